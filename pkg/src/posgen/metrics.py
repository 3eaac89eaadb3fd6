"""Evaluation metrics: Frechet distance, Inception Score, prompt similarity,
and the frame-sampling plans used to pick frames from real and generated
videos.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .embedder import cosine

FeatureExtractor = Callable[[np.ndarray], np.ndarray]


@dataclass
class FeatureSet:
    vectors: np.ndarray
    source_tag: str = ""

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("feature vectors must form a 2-D array")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature vectors contain non-finite entries")
        self.vectors = v

    @property
    def dims(self) -> int:
        return self.vectors.shape[1]

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self.vectors) < 2:
            raise ValueError("at least two vectors are needed for a covariance")
        return self.vectors.mean(axis=0), np.atleast_2d(np.cov(self.vectors, rowvar=False, ddof=1))


def _clean_eigenvalues(w: np.ndarray) -> np.ndarray:
    # values below the usual rank tolerance are rounding noise around zero;
    # left in, their square roots (~1e-8) would swamp the result
    tol = max(float(w.max(initial=0.0)), 0.0) * len(w) * np.finfo(np.float64).eps
    return np.where(w > tol, w, 0.0)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    return (v * np.sqrt(_clean_eigenvalues(w))) @ v.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """Frechet distance between two Gaussians given their means and covariances.

    The trace of ``(cov_a cov_b)^(1/2)`` is taken from the eigenvalues of the
    symmetric product ``cov_a^(1/2) cov_b cov_a^(1/2)``, clamping negative
    eigenvalues (and positive ones within rounding of zero) to zero.
    """
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    cov_a, cov_b = np.atleast_2d(cov_a).astype(np.float64), np.atleast_2d(cov_b).astype(np.float64)
    if mu_a.shape != mu_b.shape or cov_a.shape != cov_b.shape or cov_a.shape != (len(mu_a), len(mu_a)):
        raise ValueError("dims mismatch between the two Gaussians")
    ra = _psd_sqrt(cov_a)
    prod = ra @ cov_b @ ra
    w = np.linalg.eigvalsh((prod + prod.T) / 2.0)
    tr_sqrt = np.sqrt(_clean_eigenvalues(w)).sum()
    diff = mu_a - mu_b
    fd = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt
    return float(max(fd, 0.0))


def frechet_distance(a: FeatureSet | np.ndarray, b: FeatureSet | np.ndarray) -> float:
    a = a if isinstance(a, FeatureSet) else FeatureSet(a)
    b = b if isinstance(b, FeatureSet) else FeatureSet(b)
    if a.dims != b.dims:
        raise ValueError(f"dims mismatch: {a.dims} vs {b.dims}")
    return frechet_from_moments(*a.moments(), *b.moments())


def inception_score(class_probs: Sequence[Sequence[float]] | np.ndarray) -> float:
    """``exp(mean_x KL(p(y|x) || p(y)))`` over the given rows."""
    p = np.asarray(class_probs, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise ValueError("class_probs must be a non-empty 2-D array")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("every row must be a probability vector")
    marginal = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(math.exp(terms.sum(axis=1).mean()))


def prompt_similarity(frames: Sequence[np.ndarray], prompt: np.ndarray) -> float:
    if len(frames) == 0:
        raise ValueError("no frames to compare")
    return float(np.mean([cosine(f, prompt) for f in frames]))


# -- frame sampling ------------------------------------------------------------

# role -> (frames per video, stride, clamp last index to the final frame)
FRAME_ROLES = {
    "real": (5, 12, False),
    "generated": (5, 4, True),
    "fvd_real": (16, 5, False),
}


@dataclass(frozen=True)
class FrameSamplePlan:
    per_video_count: int
    stride: int
    role: str
    clamp_last: bool = False

    @property
    def required_frames(self) -> int:
        if self.clamp_last:
            return (self.per_video_count - 1) * self.stride
        return self.per_video_count * self.stride

    def indices(self, total_frames: int) -> list[int]:
        if total_frames < self.required_frames:
            raise ValueError(
                f"{self.role} plan needs {self.required_frames} frames, video has {total_frames}"
            )
        return [min(i * self.stride, total_frames - 1) for i in range(self.per_video_count)]


def plan_frames(total_frames: int, role: str) -> FrameSamplePlan:
    """Frame plan for a metric role.

    Real videos take 5 frames 12 apart; generated videos 5 frames 4 apart,
    where the fifth index of a 16-frame clip is clamped to the last frame
    (giving 0, 4, 8, 12, 15); FVD real clips take 16 frames 5 apart.
    """
    try:
        count, stride, clamp = FRAME_ROLES[role]
    except KeyError:
        raise ValueError(f"unknown frame role {role!r}") from None
    plan = FrameSamplePlan(count, stride, role, clamp)
    plan.indices(total_frames)
    return plan


def all_frames_plan(total_frames: int) -> FrameSamplePlan:
    return FrameSamplePlan(total_frames, 1, "all")


def sign_test_pvalue(wins: int, n: int) -> float:
    """One-sided exact binomial p-value ``P(X >= wins)`` for ``X ~ Bin(n, 1/2)``."""
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2.0**n
