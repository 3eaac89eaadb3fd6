"""Run configuration: defaults, YAML file, and command-line overrides.

Precedence is flag > file > default.  The canonical form (sorted JSON over the
fields that affect outputs) is hashed to stamp every output.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

ARMS = ("baseline", "ona", "spr", "pos", "pos_star")
# fields that do not change what gets generated
_UNHASHED = frozenset({"out", "workers"})


class ConfigError(ValueError):
    pass


class MissingArtifactError(FileNotFoundError):
    pass


def parse_eta(value: Any) -> float:
    if isinstance(value, str):
        v = value.strip().lower()
        if v in ("inf", "infinity", ".inf", "∞"):
            return math.inf
        try:
            value = float(v)
        except ValueError:
            raise ConfigError(f"eta must be a number or 'inf', got {value!r}") from None
    try:
        eta = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"eta must be a number or 'inf', got {value!r}") from None
    if math.isnan(eta) or eta < 0:
        raise ConfigError(f"eta must be >= 0, got {eta}")
    return eta


@dataclass(frozen=True)
class GenerationConfig:
    arm: str = "pos"
    steps: int = 50
    train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    eta: float = 0.5
    gamma: float = 0.1
    k: int = 5
    seed: int = 0
    pool: str | None = None
    denoiser: str | None = None
    npnet: str | None = None
    embedder: str = "hash"
    embedder_file: str | None = None
    condition_embedder_file: str | None = None
    llm_endpoint: str | None = None
    llm_mock: str | None = "identity"
    llm_fixture: str | None = None
    llm_token_env: str = "POSGEN_LLM_TOKEN"
    llm_timeout: float = 30.0
    llm_retries: int = 2
    llm_fallback: bool = True
    workers: int = 1
    out: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "eta", parse_eta(self.eta))
        if self.arm not in ARMS:
            raise ConfigError(f"arm must be one of {ARMS}, got {self.arm!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.train_steps < self.steps:
            raise ConfigError("train_steps must be >= steps")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.k < 0:
            raise ConfigError("k must be >= 0")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.llm_mock is None and not self.llm_endpoint:
            raise ConfigError("set llm_endpoint or llm_mock")

    def replace(self, **changes) -> "GenerationConfig":
        return dataclasses.replace(self, **changes)

    def canonical(self) -> str:
        d = {}
        for f in fields(self):
            if f.name in _UNHASHED:
                continue
            v = getattr(self, f.name)
            if isinstance(v, float) and math.isinf(v):
                v = "inf"
            d[f.name] = v
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:12]

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        if math.isinf(d["eta"]):
            d["eta"] = "inf"
        return d


_TYPES = {f.name: f.type for f in fields(GenerationConfig)}


def _coerce(name: str, value: Any) -> Any:
    if value is None or name == "eta":
        return value
    kind = _TYPES[name]
    try:
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError
            return bool(value)
        if kind.startswith("str"):
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {name}: {value!r}") from None
    return value


def from_mapping(values: Mapping[str, Any], base: GenerationConfig | None = None) -> GenerationConfig:
    unknown = set(values) - set(_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    clean = {k: _coerce(k, v) for k, v in values.items()}
    try:
        return dataclasses.replace(base or GenerationConfig(), **clean)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_config(path: str | os.PathLike | None = None, overrides: Mapping[str, Any] | None = None) -> GenerationConfig:
    values: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        try:
            doc = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {p}: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"{p} must hold a key-value mapping")
        values.update(doc)
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    return from_mapping(values)
