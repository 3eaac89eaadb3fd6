"""Text feature vectors for retrieval and conditioning.

The built-in embedder hashes character 3-5-grams into a fixed-width count
vector and L2-normalizes it.  Precomputed vectors (for example from a sentence
encoder) can be loaded from a tab-separated file and used through
:class:`TableEmbedder` instead.
"""

from __future__ import annotations

import os
import re
import unicodedata
import zlib
from pathlib import Path
from typing import Protocol

import numpy as np

NORM_TOL = 1e-9


class Embedder(Protocol):
    dims: int
    tag: str

    def embed(self, text: str) -> np.ndarray: ...


def normalize_text(text: str) -> str:
    """Case-fold, drop punctuation, collapse whitespace."""
    text = unicodedata.normalize("NFKC", text).casefold()
    text = "".join(" " if unicodedata.category(ch).startswith("P") else ch for ch in text)
    return " ".join(text.split())


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("cannot normalize a zero or non-finite vector")
    return v / n


class HashedNgramEmbedder:
    """Hashed character n-gram counts, L2-normalized."""

    def __init__(self, dims: int = 256, ngram_range: tuple[int, int] = (3, 5)):
        if dims < 1:
            raise ValueError("dims must be >= 1")
        self.dims = dims
        self.ngram_range = ngram_range
        self.tag = f"hash-ngram-{ngram_range[0]}-{ngram_range[1]}-{dims}"

    def embed(self, text: str) -> np.ndarray:
        norm = normalize_text(text)
        if not norm:
            raise ValueError("cannot embed empty text")
        padded = f" {norm} "
        vec = np.zeros(self.dims)
        lo, hi = self.ngram_range
        for n in range(lo, hi + 1):
            for i in range(len(padded) - n + 1):
                h = zlib.crc32(padded[i : i + n].encode("utf-8"))
                vec[h % self.dims] += 1.0
        if not vec.any():
            # shorter than the smallest n-gram
            vec[zlib.crc32(padded.encode("utf-8")) % self.dims] = 1.0
        return _unit(vec)


class TableEmbedder:
    """Looks up precomputed vectors by normalized text."""

    def __init__(self, table: dict[str, np.ndarray], tag: str = "table"):
        if not table:
            raise ValueError("embedding table is empty")
        dims = {len(v) for v in table.values()}
        if len(dims) != 1:
            raise ValueError(f"mixed embedding widths {sorted(dims)}")
        self.dims = dims.pop()
        self.tag = tag
        self._table = {normalize_text(k): np.asarray(v, dtype=np.float64) for k, v in table.items()}

    def embed(self, text: str) -> np.ndarray:
        key = normalize_text(text)
        if not key:
            raise ValueError("cannot embed empty text")
        try:
            return self._table[key].copy()
        except KeyError:
            raise KeyError(f"no precomputed embedding for {text!r}") from None


_FLOAT = re.compile(r"\s*,\s*")


def load_embedding_file(
    path: str | os.PathLike, dims: int | None = None, normalize: bool = True
) -> dict[str, np.ndarray]:
    """Read ``text<TAB>v1,v2,...`` records; vectors are L2-normalized unless
    ``normalize`` is off (used when reloading vectors that were saved normalized).
    """
    table: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        text, sep, values = line.rpartition("\t")
        if not sep or not text.strip():
            raise ValueError(f"{path}:{lineno}: expected 'text<TAB>values'")
        vec = np.array([float(x) for x in _FLOAT.split(values.strip())])
        if dims is not None and len(vec) != dims:
            raise ValueError(f"{path}:{lineno}: expected {dims} values, got {len(vec)}")
        table[text] = _unit(vec) if normalize else vec
    if not table:
        raise ValueError(f"{path}: no embeddings")
    widths = {len(v) for v in table.values()}
    if len(widths) != 1:
        raise ValueError(f"{path}: mixed embedding widths {sorted(widths)}")
    return table


def write_embedding_file(path: str | os.PathLike, table: dict[str, np.ndarray]) -> None:
    lines = [f"{text}\t" + ",".join(repr(float(x)) for x in vec) for text, vec in table.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dims mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine of a zero vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def make_embedder(tag: str = "hash", path: str | os.PathLike | None = None, dims: int = 256) -> Embedder:
    if tag.startswith("hash"):
        return HashedNgramEmbedder(dims)
    if tag == "table" or path is not None:
        if path is None:
            raise ValueError("table embedder needs an embedding file")
        return TableEmbedder(load_embedding_file(path), tag=f"table:{Path(path).name}")
    raise ValueError(f"unknown embedder {tag!r}")
