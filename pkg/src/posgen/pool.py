"""Candidate pool of (text, latent video) pairs with exact cosine retrieval."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embedder import Embedder, HashedNgramEmbedder, NORM_TOL, TableEmbedder, load_embedding_file, write_embedding_file
from .tensorio import Record, read_collection, write_collection

POOL_FORMAT = "posgen-pool"
POOL_VERSION = 1
EMBEDDINGS_FILE = "embeddings.tsv"
SIM_DECIMALS = 12


@dataclass(frozen=True)
class PoolEntry:
    id: str
    text: str
    embedding: np.ndarray
    latent: np.ndarray


class Pool:
    """Immutable pool; queries are an exact linear scan.

    Latents are held at float32 storage precision so that a save/load round
    trip is bit-exact.  Ties in similarity go to the lexicographically
    smallest id; similarities are compared at ``SIM_DECIMALS`` places so
    that equal cosines which round differently still tie.
    """

    def __init__(self, entries: Sequence[PoolEntry], embedder: Embedder):
        if not entries:
            raise ValueError("pool is empty")
        ids = [e.id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate ids in pool")
        shapes = {e.latent.shape for e in entries}
        if len(shapes) != 1:
            raise ValueError(f"non-uniform latent shapes {sorted(shapes)}")
        self.entries = tuple(entries)
        self.embedder = embedder
        self.latent_shape = shapes.pop()
        self._emb = np.stack([e.embedding for e in entries])
        self._emb.setflags(write=False)
        # rank of each id in lexicographic order, for tie breaking
        order = sorted(range(len(ids)), key=ids.__getitem__)
        self._id_rank = np.empty(len(ids), dtype=np.int64)
        self._id_rank[order] = np.arange(len(ids))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def N(self) -> int:
        return len(self.entries)

    def get(self, entry_id: str) -> PoolEntry:
        for e in self.entries:
            if e.id == entry_id:
                return e
        raise KeyError(entry_id)

    def similarities(self, prompt: str) -> np.ndarray:
        q = self.embedder.embed(prompt)
        if q.shape != (self._emb.shape[1],):
            raise ValueError("prompt embedding width differs from pool embeddings")
        # row-wise reduction keeps each score independent of the row's position
        return np.round(np.sum(self._emb * q, axis=1), SIM_DECIMALS)

    def ranked(self, prompt: str, k: int) -> list[PoolEntry]:
        if not 0 <= k <= self.N:
            raise ValueError(f"k={k} outside [0, {self.N}]")
        if k == 0:
            return []
        sims = self.similarities(prompt)
        order = np.lexsort((self._id_rank, -sims))[:k]
        return [self.entries[i] for i in order]

    def retrieve_video(self, prompt: str) -> PoolEntry:
        return self.ranked(prompt, 1)[0]

    def retrieve_references(self, prompt: str, k: int) -> list[str]:
        return [e.text for e in self.ranked(prompt, k)]

    # -- persistence ------------------------------------------------------

    def save(self, directory: str | os.PathLike) -> Path:
        root = Path(directory)
        meta = {
            "format": POOL_FORMAT,
            "version": POOL_VERSION,
            "embedder": self.embedder.tag,
            "dims": int(self._emb.shape[1]),
        }
        records = (Record(e.id, e.text, e.latent) for e in self.entries)
        write_collection(root, records, meta)
        if not isinstance(self.embedder, HashedNgramEmbedder):
            write_embedding_file(root / EMBEDDINGS_FILE, {e.text: e.embedding for e in self.entries})
        return root


def build(
    pairs: Iterable[tuple[str, np.ndarray]],
    embedder: Embedder | None = None,
    ids: Sequence[str] | None = None,
) -> Pool:
    """Embed texts and assemble a pool; ids default to zero-padded positions."""
    embedder = embedder or HashedNgramEmbedder()
    pairs = list(pairs)
    if not pairs:
        raise ValueError("cannot build an empty pool")
    if ids is None:
        width = max(6, len(str(len(pairs))))
        ids = [f"{i:0{width}d}" for i in range(len(pairs))]
    if len(ids) != len(pairs):
        raise ValueError("ids and pairs differ in length")
    entries = [
        PoolEntry(str(i), text, embedder.embed(text), _storage(latent))
        for i, (text, latent) in zip(ids, pairs)
    ]
    return Pool(entries, embedder)


def _storage(latent: np.ndarray) -> np.ndarray:
    a = np.array(latent, dtype=np.float32)
    if not np.all(np.isfinite(a)):
        raise ValueError("latent has non-finite entries")
    a.setflags(write=False)
    return a


def load(directory: str | os.PathLike, embedder: Embedder | None = None) -> Pool:
    records, meta = read_collection(directory)
    if meta.get("format") != POOL_FORMAT:
        raise ValueError(f"{directory} is not a pool directory")
    tag = meta["embedder"]
    emb_path = Path(directory) / EMBEDDINGS_FILE
    if embedder is None:
        if tag.startswith("hash-ngram-"):
            lo, hi, dims = (int(x) for x in tag.split("-")[2:])
            embedder = HashedNgramEmbedder(dims, (lo, hi))
        elif emb_path.exists():
            embedder = TableEmbedder(load_embedding_file(emb_path, normalize=False), tag=tag)
        else:
            raise ValueError(f"pool uses embedder {tag!r}; pass it explicitly")
    if embedder.tag != tag:
        raise ValueError(f"pool was built with {tag!r}, got embedder {embedder.tag!r}")
    entries = []
    for r in records:
        vec = embedder.embed(r.text)
        if abs(np.linalg.norm(vec) - 1.0) > NORM_TOL:
            raise ValueError(f"embedding for {r.id} is not unit-norm")
        entries.append(PoolEntry(r.id, r.text, vec, _storage(r.latent)))
    return Pool(entries, embedder)


def subsample(pairs: Sequence, n: int, seed: int) -> list:
    """Uniform sample of ``n`` items without replacement, in original order."""
    if n >= len(pairs):
        return list(pairs)
    idx = np.sort(np.random.default_rng(seed).choice(len(pairs), size=n, replace=False))
    return [pairs[i] for i in idx]
