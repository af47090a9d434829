"""Binary checkpoint: magic, JSON header, float64 parameter block, checksum.

Layout (all integers unsigned 64-bit little-endian)::

    b"DFPO1\\n"
    header_len, header (UTF-8 JSON: config echo, stage, shapes, activation, created)
    n_floats, n_floats * float64 (little-endian, shape declaration order)
    checksum  (first 8 bytes of BLAKE2b over the float block, as u64)
"""
from __future__ import annotations

import hashlib
import json
import struct
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .diffcore import ScoreNet

__all__ = ["MAGIC", "CheckpointError", "ShapeMismatchError", "save_checkpoint", "load_checkpoint",
           "checkpoint_roundtrip"]

MAGIC = b"DFPO1\n"
_U64 = struct.Struct("<Q")


class CheckpointError(ValueError):
    """Corrupt, truncated or unreadable checkpoint."""


class ShapeMismatchError(CheckpointError):
    pass


def _checksum(block: bytes) -> int:
    return _U64.unpack(hashlib.blake2b(block, digest_size=8).digest())[0]


def save_checkpoint(path, net: ScoreNet, config: dict | None = None, stage=None, extra=None):
    path = Path(path)
    flat = np.concatenate([p.ravel() for p in net.params()]).astype("<f8")
    header = {
        "config": dict(config or {}),
        "stage": stage,
        "shapes": [list(s) for s in net.param_shapes()],
        "activation": net.activation,
        "bound": net.bound,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    if extra:
        header.update(extra)
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    block = flat.tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(_U64.pack(len(hbytes)))
        fh.write(hbytes)
        fh.write(_U64.pack(flat.size))
        fh.write(block)
        fh.write(_U64.pack(_checksum(block)))
    tmp.replace(path)
    return path


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path):
    """Return ``(net, header)``; raises :class:`CheckpointError` on any inconsistency."""
    path = Path(path)
    try:
        fh = path.open("rb")
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror or exc}") from exc
    with fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a DFPO1 checkpoint")
        (hlen,) = _U64.unpack(_read_exact(fh, 8, "header length"))
        try:
            header = json.loads(_read_exact(fh, hlen, "header").decode("utf-8"))
            shapes = [tuple(int(v) for v in s) for s in header["shapes"]]
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CheckpointError(f"{path}: unreadable header ({exc})") from exc
        (count,) = _U64.unpack(_read_exact(fh, 8, "parameter count"))
        declared = sum(int(np.prod(s)) for s in shapes)
        if declared != count:
            raise ShapeMismatchError(f"{path}: header shapes hold {declared} values but block declares {count}")
        block = _read_exact(fh, 8 * count, "parameter block")
        (stored,) = _U64.unpack(_read_exact(fh, 8, "checksum"))
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after checksum")
    if stored != _checksum(block):
        raise CheckpointError(f"{path}: checksum mismatch")
    flat = np.frombuffer(block, dtype="<f8").astype(np.float64)
    arrays, off = [], 0
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(flat[off:off + n].reshape(s).copy())
        off += n
    try:
        net = ScoreNet(arrays[0::2], arrays[1::2], activation=header.get("activation", "tanh"),
                       bound=header.get("bound"))
    except ValueError as exc:
        raise ShapeMismatchError(f"{path}: {exc}") from exc
    return net, header


def checkpoint_roundtrip(net: ScoreNet, path) -> ScoreNet:
    save_checkpoint(path, net)
    return load_checkpoint(path)[0]
