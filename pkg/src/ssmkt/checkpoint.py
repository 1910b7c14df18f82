"""Checkpoint files: a text manifest plus one flat little-endian blob.

Manifest layout::

    ssmkt-ckpt-v1
    blob=checkpoint.bin
    tensor=<name> shape=<d0>x<d1>... dtype=<f64|f32> offset=<bytes>
    ...

A scalar tensor has ``shape=`` (empty).
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

VERSION = "ssmkt-ckpt-v1"
_DTYPES = {"f64": np.dtype("<f8"), "f32": np.dtype("<f4")}
_NAMES = {np.dtype("float64"): "f64", np.dtype("float32"): "f32"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(state: dict[str, np.ndarray], manifest_path, blob_name: str | None = None) -> Path:
    manifest_path = Path(manifest_path)
    blob_name = blob_name or manifest_path.with_suffix(".bin").name
    lines = [VERSION, f"blob={blob_name}"]
    chunks = []
    offset = 0
    for name, arr in state.items():
        arr = np.asarray(arr)
        tag = _NAMES.get(arr.dtype)
        if tag is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        shape = "x".join(str(d) for d in arr.shape)
        lines.append(f"tensor={name} shape={shape} dtype={tag} offset={offset}")
        chunks.append(raw)
        offset += len(raw)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    (manifest_path.parent / blob_name).write_bytes(b"".join(chunks))
    manifest_path.write_text("\n".join(lines) + "\n")
    return manifest_path


def load_checkpoint(manifest_path) -> dict[str, np.ndarray]:
    manifest_path = Path(manifest_path)
    lines = manifest_path.read_text().splitlines()
    if not lines or lines[0] != VERSION:
        raise CheckpointError(f"{manifest_path}: expected version line {VERSION!r}")
    blob_name = None
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = dict(part.split("=", 1) for part in line.split())
        if "blob" in fields:
            blob_name = fields["blob"]
        elif "tensor" in fields:
            entries.append((lineno, fields))
        else:
            raise CheckpointError(f"{manifest_path}:{lineno}: unrecognised line")
    if blob_name is None:
        raise CheckpointError(f"{manifest_path}: no blob entry")
    blob = (manifest_path.parent / blob_name).read_bytes()
    state = {}
    for lineno, f in entries:
        dtype = _DTYPES[f["dtype"]]
        shape = tuple(int(d) for d in f["shape"].split("x")) if f["shape"] else ()
        start = int(f["offset"])
        count = int(np.prod(shape)) if shape else 1
        end = start + count * dtype.itemsize
        if end > len(blob):
            raise CheckpointError(f"{manifest_path}:{lineno}: tensor {f['tensor']} runs past end of blob")
        state[f["tensor"]] = np.frombuffer(blob[start:end], dtype=dtype).reshape(shape).copy()
    return state
