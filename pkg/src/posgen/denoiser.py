"""Noise-prediction networks.

Anything with a ``predict(z_t, t, c)`` method can drive the samplers; ``t``
is the noise level in the denoiser's training schedule and ``c`` a condition
vector (``None`` is the empty condition).  :class:`Denoiser` is a small
residual MLP over the whole flattened latent video with a sinusoidal timestep
embedding and an additive condition projection, trained with the usual
epsilon-prediction objective.
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .schedule import DiffusionSchedule

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"POSGCKPT"
CKPT_VERSION = 1


class NoisePredictor(Protocol):
    condition_width: int

    def predict(self, z_t: np.ndarray, t: int, c: np.ndarray | None) -> np.ndarray: ...


class ZeroPredictor:
    """Predicts zero noise everywhere; the DDIM steps reduce to rescales."""

    def __init__(self, condition_width: int = 0):
        self.condition_width = condition_width

    def predict(self, z_t, t, c=None):
        return np.zeros(np.shape(z_t))


class ConstantPredictor:
    def __init__(self, value: float, condition_width: int = 0):
        self.value = float(value)
        self.condition_width = condition_width

    def predict(self, z_t, t, c=None):
        return np.full(np.shape(z_t), self.value)


@dataclass(frozen=True)
class DenoiserSpec:
    condition_width: int
    hidden_width: int = 256
    layer_count: int = 2
    frame_shape: tuple[int, int, int] = (1, 16, 16)
    frames: int = 8
    seed: int = 0
    time_width: int = 32
    zero_output: bool = True
    # combine the network with the closed-form estimate for Gaussian data
    # ~ N(prior_mean, prior_std^2) per element
    prior_skip: bool = False
    prior_mean: float = 0.0
    prior_std: float = 1.0
    # > 0: the prior is a Gaussian whose top ``prior_rank`` principal axes
    # come from data (see fit_prior); prior_std is the variance floor elsewhere
    prior_rank: int = 0
    # "eps": the network predicts a correction to the prior's noise estimate;
    # "x0": it predicts the clean latent, blended with the prior's estimate,
    # and the noise is derived from that
    target: str = "eps"
    # noise level (std in x0 units) below which an x0 estimate leans on the prior
    prior_blend: float = 0.05

    def __post_init__(self):
        if self.prior_rank < 0:
            raise ValueError("prior_rank must be >= 0")
        if self.target not in ("eps", "x0"):
            raise ValueError(f"target must be 'eps' or 'x0', got {self.target!r}")
        for name in ("condition_width", "hidden_width", "layer_count", "frames", "time_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if len(self.frame_shape) != 3 or min(self.frame_shape) < 1:
            raise ValueError(f"frame_shape must be (C, H, W), got {self.frame_shape}")
        object.__setattr__(self, "frame_shape", tuple(int(x) for x in self.frame_shape))

    @property
    def latent_shape(self) -> tuple[int, ...]:
        return (self.frames, *self.frame_shape)

    @property
    def data_width(self) -> int:
        return int(np.prod(self.latent_shape))


@dataclass
class TrainRecord:
    step: int
    loss: float


def timestep_embedding(t: np.ndarray, width: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = t * freqs
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if width % 2:
        emb = np.concatenate([emb, np.zeros((len(emb), 1))], axis=1)
    return emb


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu(x):
    return x * _sigmoid(x)


def _silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _storage(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.asarray(v, dtype="<f4").astype(np.float64) for k, v in params.items()}


class Denoiser:
    """Residual MLP noise predictor bound to its training schedule.

    Parameters are held at float32 storage precision (computation is in
    float64), so a checkpoint round trip reproduces the model exactly.
    """

    kind = "denoiser"

    def __init__(self, spec: DenoiserSpec, schedule: DiffusionSchedule, params: dict[str, np.ndarray] | None = None):
        if schedule.train_steps is not None:
            raise ValueError("a denoiser is bound to a full-length training schedule, not a strided one")
        self.spec = spec
        self.schedule = schedule
        self.params = _storage(params if params is not None else self._init_params())
        self._abar = np.concatenate([[1.0], schedule.alphas_cum])

    @property
    def condition_width(self) -> int:
        return self.spec.condition_width

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        s = self.spec
        D, H, E, K = s.data_width, s.hidden_width, s.time_width, s.condition_width
        shapes = {"w_in": (D, H), "b_in": (H,), "w_t": (E, H), "w_c": (K, H)}
        for l in range(s.layer_count):
            shapes |= {f"w1_{l}": (H, H), f"b1_{l}": (H,), f"w2_{l}": (H, H), f"b2_{l}": (H,)}
        shapes |= {"w_out": (H, D), "b_out": (D,)}
        if s.prior_rank:
            r = s.prior_rank
            shapes |= {"prior_mu": (D,), "prior_axes": (D, r), "prior_var": (r,)}
        return shapes

    def trainable(self) -> list[str]:
        return [n for n in self.param_shapes() if not n.startswith("prior_")]

    def fit_prior(self, latents: np.ndarray) -> None:
        """Fit the Gaussian prior's mean and principal axes to ``latents``.

        Axes with more variance than the floor ``prior_std**2`` keep their
        sample variance; the rest of the space gets the floor.
        """
        r = self.spec.prior_rank
        if not r:
            raise ValueError("fit_prior needs prior_rank > 0")
        X = np.asarray(latents, dtype=np.float64).reshape(len(latents), -1)
        if X.shape[1] != self.spec.data_width:
            raise ValueError(f"latent width {X.shape[1]} != model width {self.spec.data_width}")
        mu = X.mean(0)
        _, sv, vt = np.linalg.svd(X - mu, full_matrices=False)
        var = np.zeros(r)
        axes = np.zeros((X.shape[1], r))
        n = min(r, len(sv))
        var[:n] = sv[:n] ** 2 / max(len(X) - 1, 1)
        axes[:, :n] = vt[:n].T
        self.params["prior_mu"] = mu
        self.params["prior_axes"] = axes
        self.params["prior_var"] = np.maximum(var, self.spec.prior_std**2)
        self.params.update(_storage({k: self.params[k] for k in ("prior_mu", "prior_axes", "prior_var")}))

    def _init_params(self) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(self.spec.seed)
        params = {}
        for name, shape in self.param_shapes().items():
            if name == "prior_var":
                params[name] = np.full(shape, self.spec.prior_std**2)
            elif name == "prior_mu":
                params[name] = np.full(shape, self.spec.prior_mean)
            elif name.startswith("b") or name.startswith("prior_"):
                params[name] = np.zeros(shape)
            elif name == "w_out" and self.spec.zero_output:
                params[name] = np.zeros(shape)
            else:
                scale = 1.0 / math.sqrt(shape[0])
                if name.startswith("w2_") or name == "w_out":
                    scale *= 0.1
                params[name] = rng.standard_normal(shape) * scale
        return params

    # -- forward / backward -------------------------------------------------

    def _inputs(self, z_t, t, c):
        z = np.asarray(z_t, dtype=np.float64)
        shape = self.spec.latent_shape
        single = z.shape == shape
        if not single and z.shape[1:] != shape:
            raise ValueError(f"latent shape {z.shape} does not match {shape}")
        x = z.reshape(1 if single else z.shape[0], -1)
        B = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        if np.any(t < 0) or np.any(t > self.schedule.T):
            raise ValueError(f"timestep outside [0, {self.schedule.T}]")
        K = self.condition_width
        if c is None:
            cond = np.zeros((B, K))
        else:
            cond = np.asarray(c, dtype=np.float64)
            if cond.shape[-1] != K:
                raise ValueError(f"condition width {cond.shape[-1]} != declared {K}")
            cond = np.broadcast_to(cond.reshape(-1, K), (B, K))
        return x, t, cond, single, z.shape

    def _abar_at(self, t):
        return self._abar[np.rint(t).astype(np.int64)][:, None]

    def _prior(self, params, x, t):
        """Posterior mean of x0 (or of eps) under the Gaussian prior."""
        abar = self._abar_at(t)
        floor = self.spec.prior_std**2
        if self.spec.prior_rank:
            mu, axes, var = params["prior_mu"], params["prior_axes"], params["prior_var"]
        else:
            mu, axes, var = self.spec.prior_mean, None, None
        d = x - np.sqrt(abar) * mu
        proj = None if axes is None else d @ axes

        def apply(f):
            # f(variance) along the principal axes, f(floor) everywhere else
            out = f(floor) * d
            if axes is not None:
                out = out + ((f(var) - f(floor)) * proj) @ axes.T
            return out

        if self.spec.target == "x0":
            return mu + np.sqrt(abar) * apply(lambda v: v / (abar * v + 1.0 - abar))
        return np.sqrt(1.0 - abar) * apply(lambda v: 1.0 / (abar * v + 1.0 - abar))

    def _blend(self, t):
        """Weight of the network against the prior in the x0 estimate.

        Near zero while the noise is far below ``prior_blend`` (in x0 units),
        where the prior's linear shrinkage is already close to exact and a
        small network error would be amplified into a large noise error.
        """
        if self.spec.target == "eps" or not self.spec.prior_skip:
            return 1.0
        abar = self._abar_at(t)
        noise_var = (1.0 - abar) / abar
        return noise_var / (noise_var + self.spec.prior_blend**2)

    def _to_eps(self, out, x, t):
        if self.spec.target == "eps":
            return out
        # noise level 0 has no noise to recover; borrow level 1's scale
        abar = self._abar[np.maximum(np.rint(t).astype(np.int64), 1)][:, None]
        return (x - np.sqrt(abar) * out) / np.sqrt(1.0 - abar)

    def _forward(self, params, x, t, cond, keep=False):
        p = params
        emb = timestep_embedding(t, self.spec.time_width)
        # unit-norm conditions have entries ~ K^-1/2; bring them to O(1)
        cond = cond * math.sqrt(self.condition_width)
        h = x @ p["w_in"] + p["b_in"] + emb @ p["w_t"] + cond @ p["w_c"]
        cache = {"x": x, "emb": emb, "cond": cond, "h": [], "u": []}
        for l in range(self.spec.layer_count):
            u = _silu(h) @ p[f"w1_{l}"] + p[f"b1_{l}"]
            if keep:
                cache["h"].append(h)
                cache["u"].append(u)
            h = h + _silu(u) @ p[f"w2_{l}"] + p[f"b2_{l}"]
        out = _silu(h) @ p["w_out"] + p["b_out"]
        if self.spec.prior_skip:
            w = self._blend(t)
            if self.spec.target == "x0":
                out = w * out + (1.0 - w) * self._prior(p, x, t)
            else:
                out = out + self._prior(p, x, t)
        cache["h_last"] = h
        return out, cache

    def _backward(self, params, cache, g_out):
        p = params
        grads = {}
        h = cache["h_last"]
        grads["w_out"] = _silu(h).T @ g_out
        grads["b_out"] = g_out.sum(0)
        gh = (g_out @ p["w_out"].T) * _silu_grad(h)
        for l in reversed(range(self.spec.layer_count)):
            h_l, u = cache["h"][l], cache["u"][l]
            grads[f"w2_{l}"] = _silu(u).T @ gh
            grads[f"b2_{l}"] = gh.sum(0)
            gu = (gh @ p[f"w2_{l}"].T) * _silu_grad(u)
            grads[f"w1_{l}"] = _silu(h_l).T @ gu
            grads[f"b1_{l}"] = gu.sum(0)
            gh = gh + (gu @ p[f"w1_{l}"].T) * _silu_grad(h_l)
        grads["w_in"] = cache["x"].T @ gh
        grads["b_in"] = gh.sum(0)
        grads["w_t"] = cache["emb"].T @ gh
        grads["w_c"] = cache["cond"].T @ gh
        return grads

    def predict(self, z_t: np.ndarray, t, c: np.ndarray | None = None) -> np.ndarray:
        x, tt, cond, single, shape = self._inputs(z_t, t, c)
        out, _ = self._forward(self.params, x, tt, cond)
        return self._to_eps(out, x, tt).reshape(shape)

    def loss_and_grads(self, x0, t, eps, cond, params=None):
        """Prediction loss on a fixed batch and its parameter gradients.

        ``x0`` and ``eps`` are ``(B, D)``; ``t`` holds integer noise levels.
        The loss is the mean squared error of the network's target (the
        noise, or the clean latent) over all elements.
        """
        params = self.params if params is None else params
        t = np.asarray(t)
        abar = self._abar[t][:, None]
        z_t = np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps
        tt = t.astype(np.float64)
        out, cache = self._forward(params, z_t, tt, cond, keep=True)
        diff = out - (eps if self.spec.target == "eps" else x0)
        loss = float(np.mean(diff**2))
        grads = self._backward(params, cache, 2.0 * diff * self._blend(tt) / diff.size)
        return loss, grads

    # -- persistence ------------------------------------------------------

    def header(self) -> dict:
        return {
            "kind": self.kind,
            "spec": asdict(self.spec),
            "schedule": self.schedule.to_dict(),
            "params": [[n, list(s)] for n, s in self.param_shapes().items()],
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        blob = b"".join(np.ascontiguousarray(self.params[n], dtype="<f4").tobytes() for n in self.param_shapes())
        return CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(head)) + head + blob

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_bytes(self.to_bytes())


def _parse_checkpoint(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if buf[:8] != CKPT_MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(buf[16 : 16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    params = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=offset).reshape(shape).astype(np.float64)
        offset += 4 * n
    if offset != len(buf):
        raise ValueError("checkpoint has trailing bytes")
    return header, params


def read_checkpoint(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    return _parse_checkpoint(Path(path).read_bytes())


def load_denoiser(path: str | os.PathLike, kind: str = "denoiser") -> Denoiser:
    header, params = read_checkpoint(path)
    if header["kind"] != kind:
        raise ValueError(f"checkpoint holds a {header['kind']!r}, expected {kind!r}")
    spec_d = dict(header["spec"])
    spec_d["frame_shape"] = tuple(spec_d["frame_shape"])
    spec = DenoiserSpec(**spec_d)
    return Denoiser(spec, DiffusionSchedule.from_dict(header["schedule"]), params)


# -- training ----------------------------------------------------------------


class _SGD:
    def __init__(self, lr, momentum=0.0):
        self.lr, self.momentum, self.vel = lr, momentum, {}

    def step(self, params, grads):
        for k, g in grads.items():
            if self.momentum:
                v = self.vel.get(k)
                v = g if v is None else self.momentum * v + g
                self.vel[k] = v
                g = v
            params[k] -= self.lr * g


class _Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m, self.v, self.n = {}, {}, 0

    def step(self, params, grads):
        self.n += 1
        c1 = 1.0 - self.b1**self.n
        c2 = 1.0 - self.b2**self.n
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            g = g * g
            g *= 1.0 - self.b2
            v += g
            # reuse g as scratch for the update
            np.sqrt(v, out=g)
            g *= 1.0 / math.sqrt(c2)
            g += self.eps
            np.divide(m, g, out=g)
            g *= self.lr / c1
            params[k] -= g


def make_optimizer(name: str, lr: float, momentum: float = 0.0):
    if name == "sgd":
        return _SGD(lr, momentum)
    if name == "adam":
        return _Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")


def train(
    model: Denoiser,
    dataset: Sequence[tuple[np.ndarray, np.ndarray | None]],
    steps: int,
    seed: int,
    *,
    batch_size: int = 16,
    lr: float = 0.05,
    optimizer: str = "sgd",
    momentum: float = 0.0,
    cond_drop: float = 0.0,
    log_every: int = 0,
) -> list[TrainRecord]:
    """Fit ``model`` on ``(latent, condition)`` pairs with the DDPM noise loss.

    Each step draws a minibatch, a noise level ``t`` uniform in ``1..T`` of the
    model's schedule and fresh Gaussian noise.  With ``cond_drop > 0`` that
    fraction of conditions is replaced by the empty condition so the model
    also learns the unconditional prediction used for inversion.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    K = model.condition_width
    X = np.stack([np.asarray(z, dtype=np.float64).reshape(-1) for z, _ in dataset])
    C = np.stack([np.zeros(K) if c is None else np.asarray(c, dtype=np.float64) for _, c in dataset])
    if X.shape[1] != model.spec.data_width:
        raise ValueError(f"latent width {X.shape[1]} != model width {model.spec.data_width}")
    if C.shape[1] != K:
        raise ValueError(f"condition width {C.shape[1]} != declared {K}")

    rng = np.random.default_rng(seed)
    opt = make_optimizer(optimizer, lr, momentum)
    T = model.schedule.T
    records = []
    for step in range(steps):
        idx = rng.integers(0, len(X), size=batch_size)
        t = rng.integers(1, T + 1, size=batch_size)
        eps = rng.standard_normal((batch_size, X.shape[1]))
        cond = C[idx]
        if cond_drop > 0:
            cond = np.where(rng.random(batch_size)[:, None] < cond_drop, 0.0, cond)
        loss, grads = model.loss_and_grads(X[idx], t, eps, cond)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}")
        opt.step(model.params, grads)
        records.append(TrainRecord(step, loss))
        if log_every and step % log_every == 0:
            logger.info("step %d loss %.5f", step, loss)
    model.params.update(_storage(model.params))
    return records


def train_denoiser(
    dataset: Sequence[tuple[np.ndarray, np.ndarray | None]],
    condition_width: int,
    schedule: DiffusionSchedule,
    steps: int,
    seed: int,
    *,
    hidden_width: int = 256,
    layer_count: int = 2,
    prior_rank: int = 256,
    **train_opts,
) -> tuple[Denoiser, list[TrainRecord]]:
    """Build a denoiser sized for ``dataset``, fit its prior and train it.

    With ``prior_rank > 0`` the network predicts clean latents on top of a
    low-rank Gaussian fitted to the data; with 0 it predicts noise on top of
    a per-element Gaussian with the data's mean and spread.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    X = np.stack([np.asarray(z, dtype=np.float64) for z, _ in dataset])
    F, C, H, W = X.shape[1:]
    common = dict(
        condition_width=condition_width,
        hidden_width=hidden_width,
        layer_count=layer_count,
        frame_shape=(C, H, W),
        frames=F,
        seed=seed,
        prior_skip=True,
        prior_mean=float(X.mean()),
    )
    if prior_rank:
        spec = DenoiserSpec(**common, prior_std=0.01, prior_rank=min(prior_rank, len(X)), target="x0")
    else:
        spec = DenoiserSpec(**common, prior_std=float(X.std()))
    model = Denoiser(spec, schedule)
    if prior_rank:
        model.fit_prior(X)
    return model, train(model, dataset, steps, seed, **train_opts)
