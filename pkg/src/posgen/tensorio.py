"""Binary tensor files and manifest-indexed latent collections.

Tensor file layout (all little-endian)::

    b"PTNS"            4-byte magic
    rank               u32
    dims[rank]         u32 each
    payload            f32, row-major
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

MAGIC = b"PTNS"
MANIFEST = "manifest.json"


def encode_tensor(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise ValueError("not a tensor file (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 4)
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - offset != 4 * count:
        raise ValueError(f"payload size {len(buf) - offset} does not match shape {dims}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(dims).astype(np.float32)


def write_tensor(path: str | os.PathLike, a: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(a))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


@dataclass
class Record:
    id: str
    text: str
    latent: np.ndarray
    extra: dict[str, Any] = field(default_factory=dict)


def write_collection(
    directory: str | os.PathLike,
    records: Iterable[Record],
    meta: dict[str, Any] | None = None,
) -> Path:
    """Write records as ``manifest.json`` plus one tensor file per record."""
    root = Path(directory)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, rec in enumerate(records):
        fname = f"tensors/{i:06d}.tensor"
        write_tensor(root / fname, rec.latent)
        entry = {"id": rec.id, "text": rec.text, "tensor": fname, "shape": list(np.shape(rec.latent))}
        if rec.extra:
            entry["extra"] = rec.extra
        entries.append(entry)
    manifest = dict(meta or {})
    manifest["entries"] = entries
    tmp = root / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, ensure_ascii=False), encoding="utf-8")
    os.replace(tmp, root / MANIFEST)
    return root


def read_collection(directory: str | os.PathLike) -> tuple[list[Record], dict[str, Any]]:
    root = Path(directory)
    path = root / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    records = []
    for e in manifest.pop("entries"):
        latent = read_tensor(root / e["tensor"])
        if list(latent.shape) != list(e["shape"]):
            raise ValueError(f"tensor {e['tensor']} has shape {latent.shape}, manifest says {e['shape']}")
        records.append(Record(e["id"], e["text"], latent, e.get("extra", {})))
    return records, manifest
