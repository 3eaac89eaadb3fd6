"""End-to-end generation: artifact loading, the five ablation arms, paired
experiments and parameter sweeps.

Arms:

``baseline``  fresh Gaussian noise, original prompt
``ona``       retrieve -> invert -> mix, original prompt
``spr``       fresh noise, rewritten prompt with hybrid conditioning
``pos``       retrieve -> invert -> mix, rewritten prompt with hybrid conditioning
``pos_star``  noise network output -> mix, rewritten prompt with hybrid conditioning
"""

from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import pool as poolmod
from .codec import IdentityCodec
from .config import ConfigError, GenerationConfig, MissingArtifactError
from .denoiser import load_denoiser
from .embedder import Embedder, TableEmbedder, load_embedding_file, make_embedder
from .metrics import FeatureSet, frechet_distance, inception_score, plan_frames, prompt_similarity
from .npnet import NoisePredictionNet, load_npnet
from .ona import GuidedNoise, MixtureConfig, fresh_noise, invert_latent, mix_noise, synthesize
from .schedule import BetaSpec, DiffusionSchedule, make_schedule
from .spr import DhsConfig, RewriteExchange, make_engine, rewrite, synthesize_dhs
from .toy import describe_frame, motion_class_probs, video_features

logger = logging.getLogger(__name__)

NEEDS_POOL = {"ona", "pos"}
REWRITES = {"spr", "pos", "pos_star"}


def sampling_schedule(cfg: GenerationConfig) -> DiffusionSchedule:
    spec = BetaSpec.linear(cfg.beta_start, cfg.beta_end)
    if cfg.train_steps == cfg.steps:
        return make_schedule(cfg.steps, spec)
    return make_schedule(cfg.steps, spec, train_steps=cfg.train_steps)


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def prompt_seeds(seed: int, n: int) -> list[int]:
    """Per-prompt seeds shared by every arm of an experiment."""
    return [derive_seed(seed, i) for i in range(n)]


@dataclass
class Artifacts:
    denoiser: object
    sched: DiffusionSchedule
    embedder: Embedder
    cond_embedder: Embedder
    engine: object
    pool: poolmod.Pool | None = None
    npnet: NoisePredictionNet | None = None
    codec: object = field(default_factory=IdentityCodec)
    latent_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        self._guided: dict[str, GuidedNoise] = {}
        self._lock = threading.Lock()
        if self.latent_shape is None:
            spec = getattr(self.denoiser, "spec", None)
            if spec is not None:
                self.latent_shape = spec.latent_shape
            elif self.pool is not None:
                self.latent_shape = self.pool.latent_shape

    def condition(self, text: str) -> np.ndarray:
        return self.cond_embedder.embed(text)

    def guided_noise(self, entry: poolmod.PoolEntry) -> GuidedNoise:
        with self._lock:
            hit = self._guided.get(entry.id)
        if hit is not None:
            return hit
        g = invert_latent(entry.latent, self.sched, self.denoiser, entry.id)
        with self._lock:
            self._guided.setdefault(entry.id, g)
        return g


def check_schedule(denoiser, sched: DiffusionSchedule) -> None:
    base = getattr(denoiser, "schedule", None)
    if base is None:
        return
    if sched.timestep(sched.T) > base.T:
        raise ConfigError(f"sampler reaches noise level {sched.timestep(sched.T)}, denoiser was trained on {base.T}")
    expect = np.array([base.alpha(int(tau)) for tau in sched.timesteps[1:]])
    if not np.allclose(expect, sched.alphas_cum, rtol=1e-12, atol=0):
        raise ConfigError("sampling schedule does not match the denoiser's training schedule")


def load_artifacts(cfg: GenerationConfig, arms: Sequence[str] | None = None) -> Artifacts:
    arms = list(arms or [cfg.arm])
    if not cfg.denoiser or not Path(cfg.denoiser).exists():
        raise MissingArtifactError(f"denoiser checkpoint not found: {cfg.denoiser}")
    denoiser = load_denoiser(cfg.denoiser)
    sched = sampling_schedule(cfg)
    check_schedule(denoiser, sched)

    needs_pool = any(a in NEEDS_POOL or (a in REWRITES and cfg.k > 0) for a in arms)
    pool = None
    embedder = None
    if cfg.embedder_file:
        embedder = make_embedder("table", cfg.embedder_file)
    if needs_pool or cfg.pool:
        if not cfg.pool or not Path(cfg.pool, "manifest.json").exists():
            raise MissingArtifactError(f"pool directory not found: {cfg.pool}")
        pool = poolmod.load(cfg.pool, embedder)
        embedder = pool.embedder
    embedder = embedder or make_embedder(cfg.embedder)
    cond_embedder = embedder
    if cfg.condition_embedder_file:
        cond_embedder = TableEmbedder(load_embedding_file(cfg.condition_embedder_file), tag="condition-table")
    if cond_embedder.dims != denoiser.condition_width:
        raise ConfigError(f"condition embedder width {cond_embedder.dims} != denoiser width {denoiser.condition_width}")

    npnet = None
    if "pos_star" in arms:
        if not cfg.npnet or not Path(cfg.npnet).exists():
            raise MissingArtifactError(f"noise network checkpoint not found: {cfg.npnet}")
        npnet = load_npnet(cfg.npnet)
    try:
        engine = make_engine(cfg.llm_endpoint, cfg.llm_mock, cfg.llm_fixture, cfg.llm_token_env, cfg.llm_timeout, cfg.llm_retries)
    except (ValueError, OSError) as e:
        raise ConfigError(f"rewrite engine: {e}") from e
    return Artifacts(denoiser, sched, embedder, cond_embedder, engine, pool, npnet)


@dataclass
class Generation:
    prompt: str
    arm: str
    seed: int
    config_hash: str
    latent: np.ndarray
    source_id: str = ""
    rewrite: RewriteExchange | None = None
    seconds: float = 0.0

    def record(self) -> dict:
        return {
            "prompt": self.prompt,
            "arm": self.arm,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "source_id": self.source_id,
            "rewrite": self.rewrite.to_dict() if self.rewrite else None,
            "seconds": round(self.seconds, 4),
        }


def generate(prompt: str, cfg: GenerationConfig, art: Artifacts, seed: int | None = None) -> Generation:
    arm = cfg.arm
    seed = cfg.seed if seed is None else seed
    t0 = time.perf_counter()
    if arm in NEEDS_POOL and art.pool is None:
        raise MissingArtifactError(f"arm {arm!r} needs a pool")
    if arm == "pos_star" and art.npnet is None:
        raise MissingArtifactError("arm 'pos_star' needs a trained noise network")

    c = art.condition(prompt)
    source = ""
    mix = MixtureConfig(cfg.eta, seed)
    if arm in NEEDS_POOL:
        entry = art.pool.retrieve_video(prompt)
        source = entry.id
        init = mix_noise(art.guided_noise(entry), mix)
    elif arm == "pos_star":
        init = mix_noise(art.npnet.predict_noise(c, derive_seed(seed, 1)), mix)
    else:
        init = fresh_noise(art.latent_shape, seed)

    exchange = None
    if arm in REWRITES:
        exchange = rewrite(prompt, art.pool, cfg.k, art.engine, fallback=cfg.llm_fallback)
        c_r = art.condition(exchange.rewritten)
        z = synthesize_dhs(c, c_r, init, art.sched, art.denoiser, DhsConfig(cfg.gamma, cfg.steps))
    else:
        z = synthesize(c, init, art.sched, art.denoiser)
    out = art.codec.decode(z)
    return Generation(prompt, arm, seed, cfg.hash, out, source, exchange, time.perf_counter() - t0)


# -- evaluation ------------------------------------------------------------------


def _frame_indices(n_frames: int, role: str) -> list[int]:
    # toy clips are shorter than the evaluation plans require; use every frame then
    try:
        return plan_frames(n_frames, role).indices(n_frames)
    except ValueError:
        return list(range(n_frames))


def evaluate(
    latents: Sequence[np.ndarray],
    prompts: Sequence[str],
    embedder: Embedder,
    references: Sequence[np.ndarray] | None = None,
    features: Callable[[np.ndarray, list[int]], np.ndarray] = video_features,
) -> dict[str, float]:
    """Metric values for one set of generated videos."""
    out: dict[str, float] = {}
    if references is not None and len(references):
        gen = np.concatenate([features(z, _frame_indices(len(z), "generated")) for z in latents])
        real = np.concatenate([features(r, _frame_indices(len(r), "real")) for r in references])
        out["fd"] = frechet_distance(FeatureSet(gen, "generated"), FeatureSet(real, "reference"))
    out["is"] = inception_score(np.stack([motion_class_probs(z) for z in latents]))
    sims = []
    for z, p in zip(latents, prompts):
        idx = _frame_indices(len(z), "generated")
        sims.append(prompt_similarity([embedder.embed(describe_frame(z[i])) for i in idx], embedder.embed(p)))
    out["prompt_sim"] = float(np.mean(sims))
    return out


@dataclass
class MetricRecord:
    name: str
    arm: str
    value: float
    config_hash: str
    param: str = ""
    param_value: str = ""


@dataclass
class RunReport:
    config_hash: str
    prompts: list[str]
    seeds: list[int]
    generations: dict[str, list[Generation]] = field(default_factory=dict)
    metrics: list[MetricRecord] = field(default_factory=list)
    timing: dict[str, float] = field(default_factory=dict)

    @property
    def rewrites(self) -> list[RewriteExchange]:
        return [g.rewrite for gens in self.generations.values() for g in gens if g.rewrite is not None]

    def metric(self, name: str, arm: str) -> float:
        for m in self.metrics:
            if m.name == name and m.arm == arm and not m.param:
                return m.value
        raise KeyError((name, arm))


def run_experiment(
    prompts: Sequence[str],
    arms: Sequence[str],
    cfg: GenerationConfig,
    art: Artifacts,
    references: Sequence[np.ndarray] | None = None,
    workers: int | None = None,
) -> RunReport:
    """Generate every prompt under every arm with paired per-prompt seeds and score each arm."""
    if not prompts:
        raise ValueError("no prompts")
    if references is not None and len(references) != len(prompts):
        raise ValueError("references must pair one-to-one with prompts")
    seeds = prompt_seeds(cfg.seed, len(prompts))
    report = RunReport(cfg.hash, list(prompts), seeds)
    tasks = [(arm, i) for arm in arms for i in range(len(prompts))]
    cfgs = {arm: cfg.replace(arm=arm) for arm in arms}

    def run(task):
        arm, i = task
        return generate(prompts[i], cfgs[arm], art, seeds[i])

    t0 = time.perf_counter()
    n = workers or cfg.workers
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as ex:
            results = list(ex.map(run, tasks))
    else:
        results = [run(t) for t in tasks]
    report.timing["generate_s"] = time.perf_counter() - t0
    # results come back in task order, independent of completion order
    for (arm, i), gen in zip(tasks, results):
        report.generations.setdefault(arm, []).append(gen)

    t0 = time.perf_counter()
    for arm in arms:
        scores = evaluate([g.latent for g in report.generations[arm]], prompts, art.embedder, references)
        for name, value in scores.items():
            report.metrics.append(MetricRecord(name, arm, value, cfgs[arm].hash))
    report.timing["evaluate_s"] = time.perf_counter() - t0
    return report


def sweep(
    param: str,
    values: Sequence,
    prompts: Sequence[str],
    arm: str,
    cfg: GenerationConfig,
    art: Artifacts,
    references: Sequence[np.ndarray] | None = None,
) -> RunReport:
    """Run one arm at each value of ``param`` (``eta`` or ``gamma``); every point is reported."""
    if param not in ("eta", "gamma"):
        raise ConfigError(f"can only sweep eta or gamma, not {param!r}")
    combined = RunReport(cfg.hash, list(prompts), prompt_seeds(cfg.seed, len(prompts)))
    for v in values:
        point = cfg.replace(**{param: v})
        rep = run_experiment(prompts, [arm], point, art, references)
        label = "inf" if point.eta == float("inf") and param == "eta" else repr(getattr(point, param))
        combined.generations[f"{arm}@{param}={label}"] = rep.generations[arm]
        for m in rep.metrics:
            combined.metrics.append(MetricRecord(m.name, m.arm, m.value, m.config_hash, param, label))
        for k, t in rep.timing.items():
            combined.timing[k] = combined.timing.get(k, 0.0) + t
    return combined
