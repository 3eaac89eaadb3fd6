"""Procedural moving-blob latent videos with templated captions.

Each video is ``(F, 1, H, W)`` with values in ``[-1, 1]``: a Gaussian blob on
a -1 background whose path midpoint lies in one of nine regions.  Captions
read ``"a <size> blob moves <direction> <speed> through the <row> <column>"``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

SIZES = {"small": 1.5, "large": 2.5}
DIRECTIONS = {"right": (1.0, 0.0), "left": (-1.0, 0.0), "up": (0.0, -1.0), "down": (0.0, 1.0)}
SPEEDS = {"slowly": 0.5, "quickly": 1.0}
ROWS = ("top", "middle", "bottom")
COLUMNS = ("left", "center", "right")

_SPLIT_KEYS = {"train": 0, "eval": 1}


@dataclass(frozen=True)
class BlobParams:
    size: str
    direction: str
    speed: str
    row: str
    column: str
    mid_x: float
    mid_y: float

    @property
    def caption(self) -> str:
        return f"a {self.size} blob moves {self.direction} {self.speed} through the {self.row} {self.column}"


@dataclass
class ToyVideo:
    id: str
    caption: str
    latent: np.ndarray
    params: BlobParams


def all_captions() -> list[str]:
    combos = itertools.product(SIZES, DIRECTIONS, SPEEDS, ROWS, COLUMNS)
    return [BlobParams(*c, 0.0, 0.0).caption for c in combos]


def render_blob(p: BlobParams, frames: int = 8, size: int = 16) -> np.ndarray:
    dx, dy = DIRECTIONS[p.direction]
    v = SPEEDS[p.speed]
    sigma = SIZES[p.size]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.empty((frames, 1, size, size))
    for f in range(frames):
        s = (f - (frames - 1) / 2.0) * v
        cx, cy = p.mid_x + dx * s, p.mid_y + dy * s
        out[f, 0] = 2.0 * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2)) - 1.0
    return out


def make_toy_dataset(
    count: int,
    seed: int,
    split: str = "train",
    frames: int = 8,
    size: int = 16,
    jitter: float = 1.0,
) -> list[ToyVideo]:
    """Seeded moving-blob videos.

    ``train`` and ``eval`` draw from independent random streams of the same
    seed, and ids carry the split name, so the two splits never share entries.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if split not in _SPLIT_KEYS:
        raise ValueError(f"split must be one of {sorted(_SPLIT_KEYS)}")
    rng = np.random.default_rng([seed, _SPLIT_KEYS[split]])
    centers = np.array([0.25, 0.5, 0.75]) * size
    out = []
    for i in range(count):
        r, c = rng.integers(3), rng.integers(3)
        p = BlobParams(
            size=str(rng.choice(list(SIZES))),
            direction=str(rng.choice(list(DIRECTIONS))),
            speed=str(rng.choice(list(SPEEDS))),
            row=ROWS[r],
            column=COLUMNS[c],
            mid_x=float(centers[c] + rng.uniform(-jitter, jitter)),
            mid_y=float(centers[r] + rng.uniform(-jitter, jitter)),
        )
        out.append(ToyVideo(f"{split}-{i:06d}", p.caption, render_blob(p, frames, size), p))
    return out


# -- frame descriptors ---------------------------------------------------------


def _weights(frame: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(frame, dtype=np.float64).reshape(frame.shape[-2:]) + 1.0) / 2.0, 0.0, 1.0)


def frame_stats(frame: np.ndarray) -> np.ndarray:
    """``[centroid_x, centroid_y, spread, mass, peak]`` of one ``(C, H, W)`` frame."""
    w = _weights(frame)
    H, W = w.shape
    mass = w.sum()
    yy, xx = np.mgrid[0:H, 0:W]
    if mass <= 1e-12:
        return np.array([(W - 1) / 2, (H - 1) / 2, 0.0, 0.0, 0.0])
    cx = (w * xx).sum() / mass
    cy = (w * yy).sum() / mass
    spread = np.sqrt((w * ((xx - cx) ** 2 + (yy - cy) ** 2)).sum() / mass)
    return np.array([cx, cy, spread, mass, w.max()])


def video_features(latent: np.ndarray, indices=None) -> np.ndarray:
    """Per-frame descriptors plus centroid displacement from the previous sampled frame.

    Returns ``(n_frames, 7)``.
    """
    latent = np.asarray(latent)
    idx = range(latent.shape[0]) if indices is None else indices
    stats = np.stack([frame_stats(latent[i]) for i in idx])
    disp = np.zeros((len(stats), 2))
    disp[1:] = np.diff(stats[:, :2], axis=0)
    return np.concatenate([stats, disp], axis=1)


def centroid_track(latent: np.ndarray) -> np.ndarray:
    return np.stack([frame_stats(f)[:2] for f in np.asarray(latent)])


def describe_frame(frame: np.ndarray, size: int | None = None) -> str:
    """Short caption-like text for one frame: blob size and region."""
    cx, cy, spread, mass, _ = frame_stats(frame)
    H, W = np.asarray(frame).shape[-2:]
    if mass <= 1e-12:
        return "an empty frame"
    col = COLUMNS[min(int(3 * cx / W), 2)]
    row = ROWS[min(int(3 * cy / H), 2)]
    sz = "small" if spread < (SIZES["small"] + SIZES["large"]) / 2 * np.sqrt(2) else "large"
    return f"a {sz} blob in the {row} {col}"


MOTION_CLASSES = [(d, s) for d in DIRECTIONS for s in SPEEDS]


def motion_class_probs(latent: np.ndarray, temperature: float = 0.05) -> np.ndarray:
    """Soft assignment of a video's mean centroid velocity to direction x speed classes."""
    track = centroid_track(latent)
    vel = np.diff(track, axis=0).mean(axis=0)
    protos = np.array([np.array(DIRECTIONS[d]) * SPEEDS[s] for d, s in MOTION_CLASSES])
    d2 = ((protos - vel) ** 2).sum(axis=1)
    logits = -d2 / temperature
    logits -= logits.max()
    p = np.exp(logits)
    return p / p.sum()
