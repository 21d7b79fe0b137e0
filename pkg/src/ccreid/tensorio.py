"""DLT1 tensor files and JSON helpers.

Layout: ``b"DLT1"``, a little-endian uint32 header length, a UTF-8 JSON header
``{"dtype": "f32", "shape": [...], "order": "row-major"}`` and the raw
little-endian float32 payload.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"DLT1"
_F32 = np.dtype("<f4")


class TensorFormatError(ValueError):
    pass


def encode(x) -> bytes:
    arr = np.asarray(x, dtype=_F32, order="C")
    header = json.dumps({"dtype": "f32", "shape": list(arr.shape), "order": "row-major"},
                        separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header)) + header + arr.tobytes(order="C")


def decode(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise TensorFormatError("bad magic, not a DLT1 file")
    if len(buf) < 8:
        raise TensorFormatError("truncated header")
    (hlen,) = struct.unpack("<I", buf[4:8])
    header = json.loads(buf[8:8 + hlen].decode("utf-8"))
    if header.get("dtype") != "f32" or header.get("order") != "row-major":
        raise TensorFormatError(f"unsupported header {header}")
    shape = tuple(int(s) for s in header["shape"])
    payload = buf[8 + hlen:]
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    if len(payload) != expected:
        raise TensorFormatError(f"payload is {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype=_F32).reshape(shape).copy()


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(path, x) -> None:
    atomic_write_bytes(path, encode(x))


def read_tensor(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> None:
    atomic_write_bytes(path, dumps_json(obj).encode("utf-8"))


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_params(directory, params, arch: dict) -> None:
    """Checkpoint: ``params.dlt`` (flat f32 vector) plus ``model.json`` header."""
    directory = Path(directory)
    flat = np.concatenate([np.asarray(p).ravel() for p in params]) if params else np.zeros(0)
    write_tensor(directory / "params.dlt", flat)
    header = dict(arch)
    header["param_shapes"] = [list(p.shape) for p in params]
    write_json(directory / "model.json", header)


def load_params(directory):
    directory = Path(directory)
    header = read_json(directory / "model.json")
    flat = read_tensor(directory / "params.dlt").astype(np.float64)
    params, off = [], 0
    for shape in header["param_shapes"]:
        n = int(np.prod(shape, dtype=np.int64))
        params.append(flat[off:off + n].reshape(shape).copy())
        off += n
    if off != flat.size:
        raise TensorFormatError("parameter count does not match header")
    return params, header
