"""Flat binary checkpoint format for named parameter tensors.

Layout (little-endian throughout):

    bytes 0..8    magic b"BFCKPT01"
    bytes 8..12   uint32 header length H
    bytes 12..    UTF-8 JSON header:
                    {"meta": {...},
                     "tensors": [{"name", "shape", "dtype"}, ...]}
    then          raw C-contiguous tensor data in header order

Supported dtypes: float32, float64, int64.  Round trips are bit-exact and
the format carries an arbitrary JSON-serializable meta dict (configs,
normalization stats, codebooks' shapes, ...).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"BFCKPT01"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None):
    entries = []
    blobs = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.name not in _DTYPES:
            raise TypeError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name!r} contains non-finite values")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name})
        blobs.append(np.ascontiguousarray(arr).astype(_DTYPES[arr.dtype.name], copy=False).tobytes())
    header = json.dumps({"meta": meta or {}, "tensors": entries}).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise ValueError(f"{path}: truncated header")
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    off = 12 + hlen
    for ent in header["tensors"]:
        dt = np.dtype(_DTYPES[ent["dtype"]])
        n = int(np.prod(ent["shape"], dtype=np.int64)) if ent["shape"] else 1
        nbytes = n * dt.itemsize
        if off + nbytes > len(raw):
            raise ValueError(f"{path}: truncated tensor data for {ent['name']!r}")
        arr = np.frombuffer(raw, dtype=dt, count=n, offset=off).reshape(ent["shape"])
        tensors[ent["name"]] = arr.astype(ent["dtype"], copy=True)
        off += nbytes
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return tensors, header["meta"]


def module_tensors(module) -> dict[str, np.ndarray]:
    """Numpy view of a torch module's state dict (buffers included)."""
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module_tensors(module, tensors: dict[str, np.ndarray]):
    import torch

    sd = module.state_dict()
    missing = set(sd) - set(tensors)
    extra = set(tensors) - set(sd)
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    module.load_state_dict({k: torch.as_tensor(v) for k, v in tensors.items()})
