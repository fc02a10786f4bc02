"""Binary checkpoints.

Layout: ``b"TPRS"`` | version (u16) | header length (u32) | JSON header |
raw little-endian tensor bytes | SHA-256 of everything before it. The
header records the model-config digest, a name/shape/offset index for
parameters and Adam moments, the RNG state and the best validation loss.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fusion import FusionModel, ModelConfig
from .io import write_bytes
from .numerics import AdamState

MAGIC = b"TPRS"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_DIGEST = 32


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: FusionModel
    optimizer: AdamState | None
    rng_state: dict | None
    best_val_loss: float | None
    extra: dict


def _pack(arrays: dict[str, np.ndarray], blob: bytearray) -> list[dict]:
    index = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dt = arr.dtype.newbyteorder("<")
        raw = arr.astype(dt, copy=False).tobytes()
        index.append({"name": name, "shape": list(arr.shape), "dtype": dt.str,
                      "offset": len(blob), "nbytes": len(raw)})
        blob.extend(raw)
    return index


def _unpack(index: list[dict], blob: bytes) -> dict[str, np.ndarray]:
    out = {}
    for e in index:
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"tensor {e['name']} runs past the end of the data block")
        out[e["name"]] = np.frombuffer(blob[e["offset"]:end], dtype=np.dtype(e["dtype"])).reshape(
            e["shape"]).copy()
    return out


def save_checkpoint(path: str | os.PathLike, model: FusionModel, optimizer: AdamState | None = None,
                    rng_state: dict | None = None, best_val_loss: float | None = None,
                    extra: dict | None = None) -> None:
    blob = bytearray()
    params = {k: p.data for k, p in model.named_parameters().items()}
    header = {
        "config": model.cfg.to_dict(),
        "config_digest": model.cfg.digest(),
        "params": _pack(params, blob),
        "best_val_loss": best_val_loss,
        "rng_state": rng_state,
        "extra": extra or {},
        "optimizer": None,
    }
    if optimizer is not None:
        header["optimizer"] = {"step_count": optimizer.step_count,
                               "m": _pack(optimizer.m, blob), "v": _pack(optimizer.v, blob)}
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, VERSION, len(head)) + head + bytes(blob)
    write_bytes(path, body + hashlib.sha256(body).digest())


def load_checkpoint(path: str | os.PathLike, expected: ModelConfig | None = None) -> Checkpoint:
    """Validate magic, version, integrity and (optionally) the config digest, then rebuild."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < _PREFIX.size + _DIGEST:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    magic, version, head_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt file)")
    start = _PREFIX.size
    try:
        header = json.loads(body[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    blob = body[start + head_len:]
    cfg = ModelConfig.from_dict(header["config"])
    if cfg.digest() != header["config_digest"]:
        raise CheckpointError(f"{path}: stored config does not match its digest")
    if expected is not None and expected.digest() != cfg.digest():
        raise CheckpointError(f"{path}: checkpoint was written for a different model config")
    params = _unpack(header["params"], blob)
    model = FusionModel(cfg, np.random.default_rng(0))
    named = model.named_parameters()
    if set(named) != set(params):
        raise CheckpointError(f"{path}: parameter names do not match the model")
    for k, p in named.items():
        if p.data.shape != params[k].shape:
            raise CheckpointError(f"{path}: shape mismatch for {k}")
        p.data = params[k]
    opt = None
    if header.get("optimizer") is not None:
        o = header["optimizer"]
        opt = AdamState(int(o["step_count"]), _unpack(o["m"], blob), _unpack(o["v"], blob))
    return Checkpoint(model, opt, header.get("rng_state"), header.get("best_val_loss"), header.get("extra", {}))
