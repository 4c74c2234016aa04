"""Two-part checkpoint archive.

A checkpoint is a zip file holding ``manifest.json`` (parameter names, shapes,
dtype, config echo, phase tag) and ``tensors.bin`` (every tensor flattened to
little-endian float32, concatenated in manifest order).
"""
from __future__ import annotations

import hashlib
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1
_DTYPE = "<f4"
# fixed timestamp so identical state dicts give byte-identical archives
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state: dict[str, torch.Tensor], *, phase: str, config: dict | None = None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype(_DTYPE, copy=False)
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "source_dtype": str(tensor.dtype).replace("torch.", ""),
            "offset": offset,
            "count": int(arr.size),
        })
        blobs.append(np.ascontiguousarray(arr).tobytes())
        offset += int(arr.size)
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": "float32-le",
        "phase": phase,
        "config": config or {},
        "extra": extra or {},
        "tensors": entries,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("manifest.json", _ZIP_DATE),
                    json.dumps(manifest, indent=1, sort_keys=True))
        zf.writestr(zipfile.ZipInfo("tensors.bin", _ZIP_DATE), b"".join(blobs))
    return path


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    """Return ``(state_dict, manifest)``; tensors keep their source dtype."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        raw = zf.read("tensors.bin")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version in {path}")
    flat = np.frombuffer(raw, dtype=_DTYPE)
    state = {}
    for e in manifest["tensors"]:
        arr = flat[e["offset"]:e["offset"] + e["count"]].reshape(e["shape"])
        dtype = getattr(torch, e["source_dtype"])
        state[e["name"]] = torch.from_numpy(arr.copy()).to(dtype)
    return state, manifest


def state_hash(state: dict[str, torch.Tensor]) -> str:
    """SHA-256 over names and raw bytes; used to assert immutability."""
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def load_into(module: torch.nn.Module, state: dict[str, torch.Tensor], what: str = "model"):
    """Strict load that reports shape mismatches as dimension diagnostics."""
    own = module.state_dict()
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    if missing or unexpected:
        raise CheckpointError(
            f"{what} checkpoint does not match: missing={missing[:3]} unexpected={unexpected[:3]}"
        )
    for name, t in own.items():
        if tuple(t.shape) != tuple(state[name].shape):
            raise CheckpointError(
                f"{what} dimension mismatch at {name}: model {tuple(t.shape)} "
                f"vs checkpoint {tuple(state[name].shape)}"
            )
    module.load_state_dict({k: v.to(own[k].dtype) for k, v in state.items()})
