"""Reference-guided prompt rewriting and hybrid-condition denoising.

The rewriter retrieves the ``k`` pool texts closest to the prompt, renders
them with the prompt into an instruction, and asks an engine (an HTTP LLM
endpoint or a deterministic mock) for a rewrite.  During sampling the
rewritten prompt conditions the first ``m = floor(T * gamma)`` denoising
steps (counting down from ``t = T``) and the original prompt the rest.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .denoiser import NoisePredictor
from .ona import denoise
from .pool import Pool
from .schedule import DiffusionSchedule

logger = logging.getLogger(__name__)

MAX_WORDS = 20


class TransportError(RuntimeError):
    """The rewrite engine could not be reached or answered badly."""


# -- instruction ---------------------------------------------------------------


def render_instruction(original: str, references: Sequence[str]) -> str:
    # plain concatenation: reference text is never interpreted as a template
    k = len(references)
    if k == 0:
        return (
            "Rewrite the sentence " + original + " without changing the meaning of the original "
            f"sentence to a maximum of {MAX_WORDS} words"
        )
    noun = "example" if k == 1 else "examples"
    return (
        f"Let me give you {k} {noun}:" + ",".join(references) + ", rewrite the sentence " + original
        + f" without changing the meaning of the original sentence to a maximum of {MAX_WORDS} words, "
        f"imitating/combining the adjectives, adverbs or sentence patterns from the {k} {noun} above"
    )


# -- engines -------------------------------------------------------------------


class RewriteEngine(Protocol):
    tag: str

    def complete(self, instruction: str, original: str) -> str: ...


class MockEngine:
    """Deterministic stand-in for an LLM.

    Modes: ``identity`` returns the original prompt, ``prefix`` prepends
    ``"detailed: "``, ``fixture`` looks the original prompt up in a JSON object
    file and raises :class:`TransportError` when it is missing.
    """

    MODES = ("identity", "prefix", "fixture")

    def __init__(self, mode: str = "identity", fixture_path: str | os.PathLike | None = None):
        if mode not in self.MODES:
            raise ValueError(f"mock mode must be one of {self.MODES}")
        self.mode = mode
        self.tag = f"mock-{mode}"
        self._fixture: dict[str, str] = {}
        if mode == "fixture":
            if fixture_path is None:
                raise ValueError("fixture mode needs a fixture file")
            self._fixture = json.loads(Path(fixture_path).read_text(encoding="utf-8"))

    def complete(self, instruction: str, original: str) -> str:
        if self.mode == "identity":
            return original
        if self.mode == "prefix":
            return "detailed: " + original
        try:
            return self._fixture[original]
        except KeyError:
            raise TransportError(f"no fixture response for {original!r}") from None


class HttpEngine:
    """POSTs ``{"instruction", "max_words"}`` JSON and reads ``{"rewritten"}``.

    Retries connection errors, timeouts and 5xx/429 responses with exponential
    backoff; other 4xx responses fail immediately.
    """

    def __init__(
        self,
        endpoint: str,
        token_env: str | None = None,
        timeout: float = 30.0,
        retries: int = 2,
        backoff: float = 0.5,
    ):
        self.endpoint = endpoint
        self.token_env = token_env
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.tag = f"http:{endpoint}"

    def _request(self, instruction: str) -> urllib.request.Request:
        body = json.dumps({"instruction": instruction, "max_words": MAX_WORDS}).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.token_env:
            token = os.environ.get(self.token_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        return urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")

    def complete(self, instruction: str, original: str) -> str:
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                with urllib.request.urlopen(self._request(instruction), timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
                text = payload["rewritten"]
                if not isinstance(text, str):
                    raise TransportError("'rewritten' is not a string")
                return text
            except urllib.error.HTTPError as e:
                if e.code != 429 and e.code < 500:
                    raise TransportError(f"HTTP {e.code} from {self.endpoint}") from e
                last = e
            except (urllib.error.URLError, TimeoutError, ConnectionError) as e:
                last = e
            except (ValueError, KeyError) as e:
                raise TransportError(f"malformed response from {self.endpoint}: {e}") from e
            if attempt < self.retries:
                wait = self.backoff * 2**attempt
                logger.warning("rewrite retry %d/%d after %s (wait %.2fs)", attempt + 1, self.retries, last, wait)
                time.sleep(wait)
        raise TransportError(f"{self.endpoint} failed after {self.retries + 1} attempts: {last}")


# -- rewriting -----------------------------------------------------------------


@dataclass
class RewriteExchange:
    original: str
    references: list[str]
    instruction: str
    rewritten: str
    engine_tag: str
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "original": self.original,
            "references": list(self.references),
            "instruction": self.instruction,
            "rewritten": self.rewritten,
            "engine_tag": self.engine_tag,
            "flags": list(self.flags),
        }


def rewrite(
    original: str, pool: Pool | None, k: int, engine: RewriteEngine, fallback: bool = True
) -> RewriteExchange:
    """Reference-guided rewrite of ``original``.

    Engine failures and empty answers fall back to the original prompt with
    ``engine_tag == "fallback"``; with ``fallback=False`` a failure raises
    :class:`TransportError` instead.  Answers longer than the word limit are
    kept but flagged.
    """
    if k and pool is None:
        raise ValueError("reference retrieval needs a pool")
    refs = pool.retrieve_references(original, k) if k else []
    instruction = render_instruction(original, refs)
    flags: list[str] = []
    try:
        answer = " ".join(engine.complete(instruction, original).split())
    except TransportError as e:
        if not fallback:
            raise
        logger.warning("rewrite engine %s failed, keeping original prompt: %s", engine.tag, e)
        return RewriteExchange(original, refs, instruction, original, "fallback", ["transport_error"])
    if not answer:
        logger.warning("rewrite engine %s returned an empty answer, keeping original prompt", engine.tag)
        return RewriteExchange(original, refs, instruction, original, "fallback", ["empty_response"])
    if len(answer.split()) > MAX_WORDS:
        logger.warning("rewrite has %d words, over the %d-word limit", len(answer.split()), MAX_WORDS)
        flags.append("over_word_limit")
    return RewriteExchange(original, refs, instruction, answer, engine.tag, flags)


def make_engine(
    endpoint: str | None = None,
    mock: str | None = "identity",
    fixture: str | os.PathLike | None = None,
    token_env: str | None = None,
    timeout: float = 30.0,
    retries: int = 2,
) -> RewriteEngine:
    if mock:
        return MockEngine(mock, fixture)
    if not endpoint:
        raise ValueError("either an LLM endpoint or a mock mode is required")
    return HttpEngine(endpoint, token_env, timeout, retries)


# -- hybrid-condition denoising -------------------------------------------------


@dataclass(frozen=True)
class DhsConfig:
    gamma: float
    T: int

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0 or math.isnan(self.gamma):
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.T < 1:
            raise ValueError("T must be >= 1")

    @property
    def m(self) -> int:
        """``floor(T * gamma)`` with gamma read as its shortest decimal form,
        so 0.29 counts as 29/100 rather than the nearest binary fraction."""
        return int(math.floor(Decimal(repr(float(self.gamma))) * self.T))


def dhs_condition(t: int, cfg: DhsConfig, c_orig, c_rewritten):
    if not 1 <= t <= cfg.T:
        raise ValueError(f"t={t} outside [1, {cfg.T}]")
    return c_rewritten if t > cfg.T - cfg.m else c_orig


def synthesize_dhs(
    c_orig: np.ndarray | None,
    c_rewritten: np.ndarray | None,
    init_noise: np.ndarray,
    sched: DiffusionSchedule,
    denoiser: NoisePredictor,
    cfg: DhsConfig,
) -> np.ndarray:
    if cfg.T != sched.T:
        raise ValueError(f"hybrid schedule has T={cfg.T}, sampler has T={sched.T}")
    return denoise(init_noise, sched, denoiser, lambda t: dhs_condition(t, cfg, c_orig, c_rewritten))
