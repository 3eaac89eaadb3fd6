"""Noise prediction network: a text-conditioned generative model over
inverted-noise tensors, so improved initial noise can be produced without the
retrieval pool.

Training data are ``(text condition, eps_inv)`` pairs obtained by inverting
pool latents.  The network is the same residual MLP as the main denoiser,
trained with the diffusion objective where ``eps_inv`` plays the role of the
clean sample, and sampled with a short DDIM chain.

A bare :class:`NoisePredictionNet` carries the closed-form estimate for an
``N(0, I)`` target, so even untrained it samples roughly unit-variance noise.
:func:`train_npnet` by default instead fits a low-rank Gaussian prior to the
inverted noises and trains the network to predict them directly.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from .denoiser import Denoiser, DenoiserSpec, TrainRecord, read_checkpoint, train
from .embedder import Embedder
from .ona import denoise, invert_latent
from .pool import Pool
from .schedule import BetaSpec, DiffusionSchedule, make_schedule

logger = logging.getLogger(__name__)


def default_npnet_schedule(T: int = 10) -> DiffusionSchedule:
    """Short schedule for the unit-prior network: every level is a valid
    ``N(0, I)`` marginal, so the chain can start from plain noise."""
    return make_schedule(T, BetaSpec.constant(0.02))


def data_npnet_schedule() -> DiffusionSchedule:
    return make_schedule(1000, BetaSpec.linear(1e-4, 0.02))


@dataclass
class NoisePairDataset:
    conditions: np.ndarray  # (N, K)
    noises: np.ndarray  # (N, F, C, H, W)
    texts: list[str] = field(default_factory=list)
    source_ids: list[str] = field(default_factory=list)
    provenance: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.noises)

    def pairs(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.noises, self.conditions))


def build_dataset(
    pool: Pool,
    sched: DiffusionSchedule,
    denoiser,
    limit: int,
    seed: int,
    embedder: Embedder | None = None,
) -> NoisePairDataset:
    """Invert up to ``limit`` pool latents and pair each with its text condition.

    ``limit >= N`` takes the whole pool in pool order; otherwise a seeded
    uniform sample without replacement is taken, kept in pool order.
    """
    if len(pool) == 0:
        raise ValueError("pool is empty")
    if limit < 1:
        raise ValueError("limit must be >= 1")
    embedder = embedder or pool.embedder
    n = len(pool)
    if limit >= n:
        idx = np.arange(n)
    else:
        idx = np.sort(np.random.default_rng(seed).choice(n, size=limit, replace=False))
    conds, noises, texts, ids = [], [], [], []
    for i in idx:
        e = pool.entries[i]
        noises.append(invert_latent(e.latent, sched, denoiser, e.id).eps_inv)
        conds.append(embedder.embed(e.text))
        texts.append(e.text)
        ids.append(e.id)
    prov = {"pool_size": n, "limit": int(limit), "seed": int(seed), "T": sched.T, "embedder": embedder.tag}
    return NoisePairDataset(np.stack(conds), np.stack(noises), texts, ids, prov)


class NoisePredictionNet(Denoiser):
    kind = "npnet"

    def __init__(
        self,
        spec: DenoiserSpec,
        schedule: DiffusionSchedule,
        params=None,
        trained: bool = False,
        sample_steps: int = 10,
    ):
        if not spec.prior_skip:
            spec = replace(spec, prior_skip=True)
        super().__init__(spec, schedule, params)
        if not 1 <= sample_steps <= schedule.T:
            raise ValueError(f"sample_steps must be in [1, {schedule.T}]")
        self.trained = trained
        self.sample_steps = sample_steps
        if sample_steps == schedule.T:
            self.sample_schedule = schedule
        else:
            self.sample_schedule = make_schedule(sample_steps, schedule.beta_spec, train_steps=schedule.T)

    def header(self) -> dict:
        h = super().header()
        h["trained"] = self.trained
        h["sample_steps"] = self.sample_steps
        return h

    def sample(self, condition: np.ndarray | None, seed: int) -> np.ndarray:
        z = np.random.default_rng(seed).standard_normal(self.spec.latent_shape)
        return denoise(z, self.sample_schedule, self, lambda t: condition)

    def predict_noise(self, condition: np.ndarray | None, seed: int) -> np.ndarray:
        if not self.trained:
            raise RuntimeError("noise prediction network has not been trained")
        return self.sample(condition, seed)


def train_npnet(
    dataset: NoisePairDataset,
    steps: int,
    seed: int,
    *,
    hidden_width: int = 256,
    layer_count: int = 2,
    prior: str = "data",
    prior_rank: int = 256,
    sample_steps: int = 10,
    schedule: DiffusionSchedule | None = None,
    **train_opts,
) -> tuple[NoisePredictionNet, list[TrainRecord]]:
    """Fit a noise prediction network on ``dataset``.

    ``prior="data"`` fits a rank-``prior_rank`` Gaussian to the inverted
    noises and trains an x0-predicting network over a long schedule;
    ``prior="unit"`` keeps the ``N(0, I)`` prior and the short default
    schedule with an epsilon-predicting network.
    """
    if len(dataset) == 0:
        raise ValueError("noise-pair dataset is empty")
    if prior not in ("data", "unit"):
        raise ValueError(f"prior must be 'data' or 'unit', got {prior!r}")
    F, C, H, W = dataset.noises.shape[1:]
    common = dict(
        condition_width=dataset.conditions.shape[1],
        hidden_width=hidden_width,
        layer_count=layer_count,
        frame_shape=(C, H, W),
        frames=F,
        seed=seed,
        prior_skip=True,
    )
    if prior == "data":
        spec = DenoiserSpec(**common, prior_std=0.01, prior_rank=min(prior_rank, len(dataset)), target="x0")
        schedule = schedule or data_npnet_schedule()
    else:
        spec = DenoiserSpec(**common)
        schedule = schedule or default_npnet_schedule()
    net = NoisePredictionNet(spec, schedule, sample_steps=min(sample_steps, schedule.T))
    if prior == "data":
        net.fit_prior(dataset.noises)
    trace = train(net, dataset.pairs(), steps, seed, **train_opts)
    net.trained = True
    return net, trace


def load_npnet(path: str | os.PathLike) -> NoisePredictionNet:
    header, params = read_checkpoint(path)
    if header["kind"] != NoisePredictionNet.kind:
        raise ValueError(f"checkpoint holds a {header['kind']!r}, expected 'npnet'")
    spec_d = dict(header["spec"])
    spec_d["frame_shape"] = tuple(spec_d["frame_shape"])
    return NoisePredictionNet(
        DenoiserSpec(**spec_d),
        DiffusionSchedule.from_dict(header["schedule"]),
        params,
        bool(header.get("trained")),
        int(header.get("sample_steps", 10)),
    )
