"""On-disk containers: array files with JSON headers, checkpoints, hashes."""

import hashlib
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

ARRAY_MAGIC = b"FCARR1\n"


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_array(path, array, header=None):
    """Write ``array`` as magic + uint32 header length + JSON header + raw bytes.

    The JSON header always carries ``dtype`` and ``shape``; any extra keys from
    ``header`` are stored alongside.
    """
    arr = np.ascontiguousarray(array)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    meta = dict(header or {})
    meta["dtype"] = arr.dtype.str
    meta["shape"] = list(arr.shape)
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    atomic_write_bytes(path, ARRAY_MAGIC + struct.pack("<I", len(blob)) + blob + arr.tobytes())


def read_array(path):
    """Inverse of :func:`write_array`; returns ``(array, header)``."""
    raw = Path(path).read_bytes()
    if not raw.startswith(ARRAY_MAGIC):
        raise ValueError(f"{path}: not a fidcal array file")
    off = len(ARRAY_MAGIC)
    (n,) = struct.unpack("<I", raw[off:off + 4])
    off += 4
    meta = json.loads(raw[off:off + n].decode("utf-8"))
    arr = np.frombuffer(raw[off + n:], dtype=np.dtype(meta["dtype"])).reshape(meta["shape"]).copy()
    return arr, meta


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def state_dict_sha256(state_dict) -> str:
    """Content hash of a state dict, independent of serialization details."""
    h = hashlib.sha256()
    for name in sorted(state_dict):
        t = state_dict[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, kind: str, config: dict, state_dict, **meta):
    """Self-describing checkpoint: kind tag, config echo, named weights, metadata."""
    payload = {
        "kind": kind,
        "config": config,
        "state_dict": {k: v.detach().cpu().clone() for k, v in state_dict.items()},
        "meta": meta,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path, kind=None) -> dict:
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if kind is not None and payload.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind!r} checkpoint, got {payload.get('kind')!r}")
    return payload


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")
