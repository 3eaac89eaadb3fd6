"""Optimal noise approximation: invert a retrieved neighbour latent into noise
space, blend it with fresh Gaussian noise, and sample from the blend.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .denoiser import NoisePredictor
from .schedule import DiffusionSchedule, dn_step, inv_step

INFINITE = math.inf


@dataclass(frozen=True)
class MixtureConfig:
    """Blend weight ``eta`` (``math.inf`` means inverted noise only) and noise seed."""

    eta: float = 0.5
    seed: int = 0

    def __post_init__(self):
        eta = float(self.eta)
        if math.isnan(eta) or eta < 0:
            raise ValueError(f"eta must be >= 0 or infinite, got {self.eta!r}")
        object.__setattr__(self, "eta", eta)

    @property
    def infinite(self) -> bool:
        return math.isinf(self.eta)


@dataclass
class GuidedNoise:
    eps_inv: np.ndarray
    source_id: str = ""
    steps_used: int = 0


def mixture_coefficients(eta: float) -> tuple[float, float]:
    """Weights on (fresh noise, inverted noise); they always form a unit vector."""
    if math.isinf(eta):
        return 0.0, 1.0
    norm = math.sqrt(1.0 + eta * eta)
    return 1.0 / norm, eta / norm


def fresh_noise(shape: tuple[int, ...], seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape)


def mix_noise(guided: GuidedNoise | np.ndarray, cfg: MixtureConfig) -> np.ndarray:
    eps_inv = np.asarray(guided.eps_inv if isinstance(guided, GuidedNoise) else guided, dtype=np.float64)
    if cfg.infinite:
        return eps_inv.copy()
    eps = fresh_noise(eps_inv.shape, cfg.seed)
    if cfg.eta == 0.0:
        return eps
    a, b = mixture_coefficients(cfg.eta)
    return a * eps + b * eps_inv


def invert_latent(
    latent: np.ndarray,
    sched: DiffusionSchedule,
    denoiser: NoisePredictor,
    source_id: str = "",
    condition: np.ndarray | None = None,
) -> GuidedNoise:
    """Run the inversion step for ``t = 0 .. T-1`` under the empty condition."""
    z = np.asarray(latent, dtype=np.float64)
    for t in range(sched.T):
        eps = denoiser.predict(z, sched.timestep(t), condition)
        if eps.shape != z.shape:
            raise ValueError(f"denoiser output {eps.shape} does not match latent {z.shape}")
        z = inv_step(z, t, eps, sched)
    return GuidedNoise(z, source_id, sched.T)


ConditionSchedule = Callable[[int], "np.ndarray | None"]


def denoise(
    init_noise: np.ndarray,
    sched: DiffusionSchedule,
    denoiser: NoisePredictor,
    condition_at: ConditionSchedule,
) -> np.ndarray:
    """Denoise from ``t = T`` to ``t = 1``, asking ``condition_at(t)`` for each step's condition."""
    z = np.asarray(init_noise, dtype=np.float64)
    for t in range(sched.T, 0, -1):
        eps = denoiser.predict(z, sched.timestep(t), condition_at(t))
        z = dn_step(z, t, eps, sched)
    return z


def synthesize(
    condition: np.ndarray | None,
    init_noise: np.ndarray,
    sched: DiffusionSchedule,
    denoiser: NoisePredictor,
) -> np.ndarray:
    return denoise(init_noise, sched, denoiser, lambda t: condition)
