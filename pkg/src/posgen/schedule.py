"""DDIM noise schedule with deterministic denoising and inversion steps.

Indexing convention: step ``t`` runs over ``0..T``.  ``alpha(t)`` is the
cumulative signal coefficient at step ``t``, with ``alpha(0) == 1`` so that
``z_0`` is the clean sample.  When the schedule is a strided view of a longer
training schedule, ``timestep(t)`` gives the noise level in the training
schedule that the denoiser should be evaluated at.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

__all__ = [
    "BetaSpec",
    "DiffusionSchedule",
    "make_schedule",
    "dn_step",
    "inv_step",
]


@dataclass(frozen=True)
class BetaSpec:
    """Either a constant beta or a linear ramp ``start..end``."""

    kind: str = "linear"
    start: float = 1e-4
    end: float = 0.02

    @classmethod
    def constant(cls, beta: float) -> "BetaSpec":
        return cls("constant", beta, beta)

    @classmethod
    def linear(cls, start: float, end: float) -> "BetaSpec":
        return cls("linear", start, end)

    def betas(self, n: int) -> np.ndarray:
        if self.kind == "constant":
            return np.full(n, float(self.start))
        if self.kind == "linear":
            if n == 1:
                return np.array([float(self.start)])
            return np.linspace(float(self.start), float(self.end), n)
        raise ValueError(f"unknown beta kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "start": self.start, "end": self.end}

    @classmethod
    def from_dict(cls, d: dict) -> "BetaSpec":
        return cls(str(d["kind"]), float(d["start"]), float(d["end"]))


@dataclass(frozen=True)
class DiffusionSchedule:
    """Immutable schedule over ``T`` DDIM steps.

    ``betas[i]`` and ``alphas_cum[i]`` describe step ``t = i + 1``.
    """

    betas: np.ndarray
    alphas_cum: np.ndarray
    timesteps: np.ndarray  # length T + 1, timesteps[0] == 0
    beta_spec: BetaSpec = field(default_factory=BetaSpec)
    train_steps: int | None = None

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha(self, t: int) -> float:
        if t == 0:
            return 1.0
        return float(self.alphas_cum[t - 1])

    def timestep(self, t: int) -> int:
        return int(self.timesteps[t])

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_spec": self.beta_spec.to_dict(), "train_steps": self.train_steps}

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionSchedule":
        return make_schedule(int(d["T"]), BetaSpec.from_dict(d["beta_spec"]), d.get("train_steps"))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def make_schedule(
    T: int,
    beta_spec: Union[BetaSpec, float, None] = None,
    train_steps: int | None = None,
) -> DiffusionSchedule:
    """Build a schedule of ``T`` steps.

    With ``train_steps`` set, ``beta_spec`` describes a ``train_steps``-long
    training schedule and the returned schedule visits ``T`` evenly strided
    noise levels of it; the effective per-step betas are the ratios of
    consecutive cumulative alphas.  A bare float is read as a constant beta.
    """
    if isinstance(beta_spec, (int, float)) and not isinstance(beta_spec, bool):
        beta_spec = BetaSpec.constant(float(beta_spec))
    spec = beta_spec or BetaSpec()
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    T = int(T)

    if train_steps is None:
        betas = spec.betas(T)
        _check_betas(betas)
        alphas_cum = np.cumprod(1.0 - betas)
        timesteps = np.arange(T + 1)
    else:
        train_steps = int(train_steps)
        if train_steps < T:
            raise ValueError("train_steps must be >= T")
        base = spec.betas(train_steps)
        _check_betas(base)
        base_cum = np.cumprod(1.0 - base)
        stride = train_steps // T
        # leading spacing: noise levels 1, 1 + stride, ..., 1 + (T - 1) * stride
        timesteps = np.concatenate([[0], 1 + stride * np.arange(T)])
        alphas_cum = base_cum[timesteps[1:] - 1]
        prev = np.concatenate([[1.0], alphas_cum[:-1]])
        betas = 1.0 - alphas_cum / prev
        _check_betas(betas)

    return DiffusionSchedule(
        betas=_frozen(betas.astype(np.float64)),
        alphas_cum=_frozen(alphas_cum.astype(np.float64)),
        timesteps=_frozen(timesteps.astype(np.int64)),
        beta_spec=spec,
        train_steps=train_steps,
    )


def _check_betas(betas: np.ndarray) -> None:
    if not np.all((betas > 0.0) & (betas < 1.0)):
        raise ValueError("every beta must lie strictly inside (0, 1)")


def _move(z: np.ndarray, a_from: float, a_to: float, eps: np.ndarray) -> np.ndarray:
    coef = np.sqrt((1.0 - a_to) / a_to) - np.sqrt((1.0 - a_from) / a_from)
    return np.sqrt(a_to) * (z / np.sqrt(a_from) + coef * eps)


def _check(z_t: np.ndarray, eps_pred: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    if z_t.shape != eps_pred.shape:
        raise ValueError(f"shape mismatch: latent {z_t.shape} vs eps_pred {eps_pred.shape}")
    return z_t, eps_pred


def dn_step(z_t: np.ndarray, t: int, eps_pred: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """One deterministic DDIM denoising step ``z_t -> z_{t-1}``."""
    z_t, eps_pred = _check(z_t, eps_pred)
    if not 1 <= t <= sched.T:
        raise ValueError(f"denoising step t={t} outside [1, {sched.T}]")
    return _move(z_t, sched.alpha(t), sched.alpha(t - 1), eps_pred)


def inv_step(z_t: np.ndarray, t: int, eps_pred: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """One DDIM inversion step ``z_t -> z_{t+1}``; ``eps_pred`` is evaluated at ``t``."""
    z_t, eps_pred = _check(z_t, eps_pred)
    if not 0 <= t <= sched.T - 1:
        raise ValueError(f"inversion step t={t} outside [0, {sched.T - 1}]")
    return _move(z_t, sched.alpha(t), sched.alpha(t + 1), eps_pred)
