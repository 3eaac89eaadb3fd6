"""Shared fixtures.

The trained toy world (denoiser, pool, noise network) is built once per
session; tests that need a trained model pull it from here.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from posgen import pool as poolmod
from posgen.config import GenerationConfig
from posgen.denoiser import Denoiser, train_denoiser
from posgen.embedder import HashedNgramEmbedder
from posgen.npnet import NoisePredictionNet, build_dataset, train_npnet
from posgen.pipeline import Artifacts, sampling_schedule
from posgen.schedule import BetaSpec, DiffusionSchedule, make_schedule
from posgen.spr import MockEngine
from posgen.toy import ToyVideo, make_toy_dataset

TRAIN_COUNT = 1000
EVAL_COUNT = 32
DENOISER_STEPS = 3000
NPNET_STEPS = 2000
TRAIN_OPTS = dict(batch_size=32, lr=1e-3, optimizer="adam")


@dataclass
class ToyWorld:
    train: list[ToyVideo]
    eval: list[ToyVideo]
    embedder: HashedNgramEmbedder
    pool: poolmod.Pool
    denoiser: Denoiser
    sched: DiffusionSchedule
    cfg: GenerationConfig
    train_seconds: float
    extras: dict = field(default_factory=dict)

    def artifacts(self, npnet: NoisePredictionNet | None = None, engine=None) -> Artifacts:
        return Artifacts(self.denoiser, self.sched, self.embedder, self.embedder, engine or MockEngine(), self.pool, npnet)

    @property
    def prompts(self) -> list[str]:
        return [v.caption for v in self.eval]

    @property
    def references(self) -> list[np.ndarray]:
        return [v.latent for v in self.eval]


@pytest.fixture(scope="session")
def toy_world() -> ToyWorld:
    t0 = time.perf_counter()
    train = make_toy_dataset(TRAIN_COUNT, 0)
    evalset = make_toy_dataset(EVAL_COUNT, 0, "eval")
    emb = HashedNgramEmbedder()
    pool = poolmod.build([(v.caption, v.latent) for v in train], emb, ids=[v.id for v in train])
    cfg = GenerationConfig(arm="baseline")
    base = make_schedule(cfg.train_steps, BetaSpec.linear(cfg.beta_start, cfg.beta_end))
    data = [(v.latent, emb.embed(v.caption)) for v in train]
    model, trace = train_denoiser(data, emb.dims, base, DENOISER_STEPS, 0, cond_drop=0.1, **TRAIN_OPTS)
    seconds = time.perf_counter() - t0
    world = ToyWorld(train, evalset, emb, pool, model, sampling_schedule(cfg), cfg, seconds)
    world.extras["denoiser_trace"] = trace
    return world


@pytest.fixture(scope="session")
def toy_npnet(toy_world) -> NoisePredictionNet:
    t0 = time.perf_counter()
    dataset = build_dataset(toy_world.pool, toy_world.sched, toy_world.denoiser, len(toy_world.pool), 0)
    net, _ = train_npnet(dataset, NPNET_STEPS, 0, **TRAIN_OPTS)
    toy_world.extras["npnet_seconds"] = time.perf_counter() - t0
    return net


# -- acceptance summary --------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
