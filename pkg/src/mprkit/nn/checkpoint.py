"""Checkpoint files: magic line, 8-byte header length, JSON header, float64 LE payload."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .. import MprkitError
from ..shaping import NormStats
from .model import ModelState, build_model

MAGIC = b"MPRKIT-CKPT\n"
VERSION = 1


def save_checkpoint(model: ModelState, path) -> None:
    """Payload order: parameters, Adam first moments, Adam second moments, BN buffers."""
    params = list(model.named_params())
    buffers = list(model.named_buffers())
    has_moments = bool(model.moments)
    header = {
        "version": VERSION,
        "architecture": model.architecture(),
        "input_shape": list(model.input_shape),
        "dtype": model.dtype.name,
        "seed": model.seed,
        "step": model.step,
        "epoch": model.epoch,
        "norm": None if model.norm is None else model.norm.to_json(),
        "params": [[n, list(a.shape)] for n, a in params],
        "buffers": [[n, list(a.shape)] for n, a in buffers],
        "moments": has_moments,
    }
    chunks = [a for _, a in params]
    if has_moments:
        chunks += [model.moments[n][0] for n, _ in params]
        chunks += [model.moments[n][1] for n, _ in params]
    chunks += [a for _, a in buffers]
    payload = b"".join(np.ascontiguousarray(c, dtype="<f8").tobytes() for c in chunks)
    hdr = json.dumps(header).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hdr)))
        fh.write(hdr)
        fh.write(payload)


def load_checkpoint(path) -> ModelState:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise MprkitError("incompatible checkpoint") from exc
    if not blob.startswith(MAGIC) or len(blob) < len(MAGIC) + 8:
        raise MprkitError("incompatible checkpoint")
    off = len(MAGIC)
    (hlen,) = struct.unpack("<Q", blob[off:off + 8])
    off += 8
    try:
        header = json.loads(blob[off:off + hlen])
    except ValueError as exc:
        raise MprkitError("incompatible checkpoint") from exc
    if header.get("version") != VERSION:
        raise MprkitError("incompatible checkpoint")
    off += hlen
    if (len(blob) - off) % 8:
        raise MprkitError("incompatible checkpoint")
    payload = np.frombuffer(blob[off:], dtype="<f8")

    model = build_model(header["architecture"], header["input_shape"], header["seed"], np.dtype(header["dtype"]))
    params = list(model.named_params())
    buffers = list(model.named_buffers())
    if [[n, list(a.shape)] for n, a in params] != header["params"]:
        raise MprkitError("incompatible checkpoint")
    need = sum(a.size for _, a in params) * (3 if header["moments"] else 1) + sum(a.size for _, a in buffers)
    if payload.size != need:
        raise MprkitError("incompatible checkpoint")

    pos = 0

    def take(shape):
        nonlocal pos
        size = int(np.prod(shape))
        out = payload[pos:pos + size].reshape(shape).copy()
        pos += size
        return out

    for _, a in params:
        a[...] = take(a.shape)
    if header["moments"]:
        ms = [take(a.shape) for _, a in params]
        vs = [take(a.shape) for _, a in params]
        model.moments = {n: (m, v) for (n, _), m, v in zip(params, ms, vs)}
    for _, a in buffers:
        a[...] = take(a.shape)
    model.step = int(header["step"])
    model.epoch = int(header["epoch"])
    if header["norm"] is not None:
        model.norm = NormStats(**header["norm"])
    return model
