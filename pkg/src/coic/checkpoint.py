"""Checkpoint archive: ``index.json`` + ``tensors.bin`` (+ free-form ``meta.json``) in a zip.

``index.json`` maps tensor name to ``{"shape", "dtype", "offset"}``;
offsets are in bytes into ``tensors.bin``, which holds little-endian
float32 buffers back to back.
"""
from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np
import torch

INDEX = "index.json"
DATA = "tensors.bin"
META = "meta.json"


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index, chunks, offset = {}, [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        index[name] = {"shape": list(arr.shape), "dtype": "float32", "offset": offset}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(INDEX, json.dumps(index, indent=1, sort_keys=True))
        zf.writestr(DATA, b"".join(chunks))
        zf.writestr(META, json.dumps(meta or {}, indent=1, sort_keys=True))
    return path


def load_tensors(path) -> tuple[dict, dict]:
    with zipfile.ZipFile(path) as zf:
        index = json.loads(zf.read(INDEX))
        blob = zf.read(DATA)
        meta = json.loads(zf.read(META)) if META in zf.namelist() else {}
    out = {}
    for name, entry in index.items():
        if entry.get("dtype") != "float32":
            raise CheckpointError(f"{name}: unsupported dtype {entry.get('dtype')}")
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        if start + 4 * n > len(blob):
            raise CheckpointError(f"{name}: buffer truncated")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=start).reshape(shape)
        out[name] = torch.from_numpy(arr.astype(np.float32))
    return out, meta


def load_into(module: torch.nn.Module, tensors: dict, prefix: str = "", strict: bool = True) -> None:
    """Copy ``prefix``-scoped tensors into ``module`` after checking every shape."""
    state = module.state_dict()
    found = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    for name, ref in state.items():
        if name not in found:
            if strict:
                raise CheckpointError(f"missing tensor {prefix}{name}")
            continue
        if tuple(found[name].shape) != tuple(ref.shape):
            raise CheckpointError(f"shape mismatch for {prefix}{name}: checkpoint "
                                  f"{tuple(found[name].shape)} vs model {tuple(ref.shape)}")
    if strict:
        extra = set(found) - set(state)
        if extra:
            raise CheckpointError(f"unexpected tensors: {sorted(extra)[:5]}")
    with torch.no_grad():
        for name, ref in state.items():
            if name in found:
                ref.copy_(found[name].to(ref.dtype))


def prefixed(module: torch.nn.Module, prefix: str) -> dict:
    return {prefix + k: v for k, v in module.state_dict().items()}
