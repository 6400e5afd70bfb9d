"""Checkpoint serialization: a JSON index plus a raw float64 blob.

Layout on disk (a directory):
    index.json   names, shapes, byte offsets, section prefixes, metadata
    weights.bin  little-endian float64, concatenated in index order

Parameter names carry a section prefix (``shared/``, ``und_branch/``,
``gen_branch/``, ...) so a reader can audit which weights belong to which
branch without loading the blob. Optimizer state rides along in the same blob
under ``optim/m/...`` and ``optim/v/...`` names.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .tensor import Tensor

INDEX_NAME = "index.json"
BLOB_NAME = "weights.bin"
FORMAT_VERSION = 1


def _to_le(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def save_checkpoint(
    path: str | Path,
    params: dict[str, Tensor],
    meta: dict | None = None,
    optim_state: dict | None = None,
    extra_arrays: dict[str, np.ndarray] | None = None,
) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0

    def emit(name: str, arr: np.ndarray):
        nonlocal offset
        raw = _to_le(arr)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)

    for name in sorted(params):
        emit(name, params[name].data)
    if optim_state is not None:
        for kind in ("m", "v"):
            for name in sorted(optim_state[kind]):
                emit(f"optim/{kind}/{name}", optim_state[kind][name])
    if extra_arrays:
        for name in sorted(extra_arrays):
            emit(f"extra/{name}", np.asarray(extra_arrays[name], dtype=np.float64))

    blob = b"".join(chunks)
    index = {
        "format_version": FORMAT_VERSION,
        "dtype": "<f8",
        "tensors": entries,
        "meta": meta or {},
    }
    if optim_state is not None:
        index["meta"]["optim_t"] = int(optim_state["t"])
        index["meta"]["optim_lr"] = float(optim_state["lr"])
    (path / BLOB_NAME).write_bytes(blob)
    (path / INDEX_NAME).write_text(json.dumps(index, indent=1, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Returns (arrays by name, meta). Optimizer/extra arrays keep their
    ``optim/`` and ``extra/`` prefixes."""
    path = Path(path)
    index = json.loads((path / INDEX_NAME).read_text())
    if index["format_version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {index['format_version']}")
    blob = (path / BLOB_NAME).read_bytes()
    out = {}
    for e in index["tensors"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        out[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).copy()
    return out, index["meta"]


def restore_params(params: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into live parameters, in place, with shape checks."""
    for name, p in params.items():
        if name not in arrays:
            raise KeyError(f"checkpoint missing parameter '{name}'")
        a = arrays[name]
        if a.shape != p.data.shape:
            raise ValueError(
                f"shape mismatch for '{name}': checkpoint {a.shape} vs model {p.data.shape}"
            )
        p.data[...] = a


def restore_optim(optim, arrays: dict[str, np.ndarray], meta: dict) -> None:
    state = {
        "t": meta["optim_t"],
        "lr": meta["optim_lr"],
        "m": {},
        "v": {},
    }
    for k in optim.params:
        state["m"][k] = arrays[f"optim/m/{k}"]
        state["v"][k] = arrays[f"optim/v/{k}"]
    optim.load_state_dict(state)


def params_checksum(params: dict[str, Tensor], names: list[str]) -> str:
    """SHA-256 over the exact bytes of the named parameters, in sorted order.

    Used to audit that frozen parameter groups do not drift during a stage.
    """
    h = hashlib.sha256()
    for name in sorted(names):
        h.update(name.encode())
        h.update(_to_le(params[name].data))
    return h.hexdigest()
