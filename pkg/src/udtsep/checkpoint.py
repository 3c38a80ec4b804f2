"""Binary checkpoint container ("UDTW").

Layout (all integers little-endian u32)::

    b"UDTW" | version | header_len | header (UTF-8 JSON) | n_records | records...
    record: name_len | name (UTF-8) | ndim | dims... | float32 data

The JSON header holds the model kind and hyperparameters, the block
bindings (which owner uses which stored block; shared blocks are stored once
and listed under both owners), optimizer settings, step counter and RNG
state. Records cover parameters, batch-norm running statistics and, when a
training state is saved, the Adam moments (prefixed ``adam.m/`` and
``adam.v/``).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .model import Adam, ModelConfig, SupervisedModel, TrainState, UdtModel
from .tensor import SeededRng

__all__ = ["MAGIC", "VERSION", "CheckpointError", "save_checkpoint", "load_checkpoint"]

MAGIC = b"UDTW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _bindings(model) -> dict[str, str]:
    if isinstance(model, UdtModel):
        n = model.config.n_blocks
        b = {}
        for dom in ("s", "t"):
            for i in range(n - 1):
                b[f"E_{dom}.{i}"] = f"E_{dom}.{i}"
            b[f"E_{dom}.{n - 1}"] = "shared.enc"
            b[f"D_{dom}.0"] = "shared.dec"
            for i in range(1, n):
                b[f"D_{dom}.{i}"] = f"D_{dom}.{i}"
        return b
    return {k: k for k in model.named_blocks()}


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    a = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", a.ndim)
    head += struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def save_checkpoint(path, model, state: TrainState | None = None, extra: dict | None = None) -> None:
    """Write ``model`` (and optionally its training state) atomically."""
    header = {
        "kind": model.kind,
        "model": model.config.__dict__.copy(),
        "bindings": _bindings(model),
        "extra": extra or {},
    }
    records = dict(model.parameters())
    records.update(model.buffers())
    arrays = {k: (v.data if hasattr(v, "data") and not isinstance(v, np.ndarray) else v)
              for k, v in records.items()}
    if state is not None:
        opt = state.optimizer
        header["train_state"] = {"step": state.step, "optimizer": opt.hyperparameters(),
                                 "rng": state.rng.get_state()}
        for k in opt.params:
            arrays[f"adam.m/{k}"] = opt.m[k]
            arrays[f"adam.v/{k}"] = opt.v[k]

    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(hbytes)), hbytes,
             struct.pack("<I", len(arrays))]
    parts += [_pack_record(k, arrays[k]) for k in sorted(arrays)]

    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(b"".join(parts))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_records(buf: memoryview, pos: int, count: int) -> dict[str, np.ndarray]:
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = bytes(buf[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
        pos += 4 * n
    if pos != len(buf):
        raise CheckpointError("trailing bytes after the last record")
    return out


def load_checkpoint(path):
    """Return ``(model, train_state_or_None, header)``."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a UDTW checkpoint")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    (count,) = struct.unpack_from("<I", data, 12 + hlen)
    records = _read_records(memoryview(data), 16 + hlen, count)

    cfg = ModelConfig.from_dict(header["model"])
    cls = UdtModel if header["kind"] == "udt" else SupervisedModel
    model = cls(cfg)
    dt = cfg.np_dtype
    params = model.parameters()
    for name, p in params.items():
        if name not in records:
            raise CheckpointError(f"missing parameter record {name}")
        if records[name].shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: {records[name].shape} vs {p.shape}")
        p.data = records[name].astype(dt)
    for name in model.buffers():
        model.set_buffer(name, records[name].astype(dt))

    state = None
    ts = header.get("train_state")
    if ts is not None:
        h = ts["optimizer"]
        opt = Adam(params, h["lr"], h["beta1"], h["beta2"], h["eps"])
        opt.t = h["t"]
        for k in params:
            opt.m[k] = records[f"adam.m/{k}"].astype(dt)
            opt.v[k] = records[f"adam.v/{k}"].astype(dt)
        rng = SeededRng(ts["rng"]["seed"])
        rng.set_state(ts["rng"])
        state = TrainState(opt, rng, ts["step"])
    return model, state, header
