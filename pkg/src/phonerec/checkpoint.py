"""Versioned binary model checkpoints.

Layout (little-endian): 8-byte magic, uint32 version, family string, config
JSON string, uint32 block count, then per parameter block: name, uint32 rank,
uint32 dims, raw float64 data. Strings are uint32 length + UTF-8 bytes.
Roundtrips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .models import build_model, config_dict

MAGIC = b"PHRCKPT\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_str(fh, text: str):
    raw = text.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_exact(fh, n, what):
    raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return raw


def _read_str(fh, what) -> str:
    (n,) = struct.unpack("<I", _read_exact(fh, 4, what))
    return _read_exact(fh, n, what).decode("utf-8")


def save_checkpoint(path, family: str, config: dict, params: dict):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _write_str(fh, family)
        _write_str(fh, json.dumps(config, sort_keys=True))
        fh.write(struct.pack("<I", len(params)))
        for name, value in params.items():
            arr = np.asarray(value, dtype="<f8")
            _write_str(fh, name)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Returns (family, config dict, {name: float64 array})."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 8, "magic") != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        family = _read_str(fh, "family")
        config = json.loads(_read_str(fh, "config"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "block count"))
        params = {}
        for _ in range(count):
            name = _read_str(fh, "block name")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            size = int(np.prod(shape)) if rank else 1
            raw = _read_exact(fh, 8 * size, f"data for {name}")
            params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes")
    return family, config, params


def save_model(path, model):
    save_checkpoint(path, model.family, config_dict(model), model.state())


def load_model(path, seed: int = 0):
    family, config, params = load_checkpoint(path)
    model = build_model(family, config, seed=seed)
    model.load_state(params)
    return model
