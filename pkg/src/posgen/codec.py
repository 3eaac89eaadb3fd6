"""Latent codecs standing in for a video autoencoder."""

from __future__ import annotations

import numpy as np


class IdentityCodec:
    tag = "identity"

    def encode(self, video: np.ndarray) -> np.ndarray:
        return np.asarray(video, dtype=np.float64)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return np.asarray(latent, dtype=np.float64)


class LinearCodec:
    """Fixed random orthogonal mixing of each frame's pixels.

    Orthogonality makes ``decode(encode(v))`` equal ``v`` up to rounding while
    still scrambling the latent layout, which exercises code that must not
    assume latents look like images.
    """

    tag = "linear"

    def __init__(self, frame_shape: tuple[int, int, int], seed: int = 0):
        self.frame_shape = tuple(frame_shape)
        d = int(np.prod(frame_shape))
        q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((d, d)))
        self.matrix = q * np.sign(np.diag(r))

    def encode(self, video: np.ndarray) -> np.ndarray:
        v = np.asarray(video, dtype=np.float64)
        flat = v.reshape(v.shape[0], -1)
        return (flat @ self.matrix.T).reshape(v.shape)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        z = np.asarray(latent, dtype=np.float64)
        flat = z.reshape(z.shape[0], -1)
        return (flat @ self.matrix).reshape(z.shape)
