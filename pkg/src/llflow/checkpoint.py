"""Single-file binary checkpoints.

Layout: magic, format version, the canonical config text, then named array
blobs (name, numpy dtype tag, shape, raw little-endian elements) sorted by
name. Saving a loaded checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

MAGIC = b"LLFWCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_str(fh, s: str):
    b = s.encode("utf-8")
    fh.write(struct.pack("<Q", len(b)))
    fh.write(b)


def _read_str(fh) -> str:
    (n,) = struct.unpack("<Q", fh.read(8))
    return fh.read(n).decode("utf-8")


def save_checkpoint(path, config_text: str, arrays: dict):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _write_str(buf, config_text)
    names = sorted(arrays)
    buf.write(struct.pack("<Q", len(names)))
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        _write_str(buf, name)
        _write_str(buf, arr.dtype.str)
        buf.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<Q", d))
        buf.write(arr.tobytes())
    data = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def load_checkpoint(path):
    """Returns (config_text, {name: array})."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        config_text = _read_str(fh)
        (count,) = struct.unpack("<Q", fh.read(8))
        arrays = {}
        for _ in range(count):
            name = _read_str(fh)
            dtype = np.dtype(_read_str(fh))
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(fh.read(n * dtype.itemsize), dtype=dtype).reshape(shape).copy()
    return config_text, arrays


def pack_rng_state(rng: np.random.Generator) -> np.ndarray:
    state = json.dumps(rng.bit_generator.state, sort_keys=True)
    return np.frombuffer(state.encode("utf-8"), dtype=np.uint8).copy()


def unpack_rng_state(arr: np.ndarray) -> np.random.Generator:
    state = json.loads(arr.tobytes().decode("utf-8"))
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng
