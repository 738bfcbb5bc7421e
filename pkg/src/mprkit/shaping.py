"""Fixed-size model inputs from variable-length MPR stacks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import DataError
from .reformat import MprStack

CUBE = 25
CUBE_STRIDE = 5


@dataclass(frozen=True)
class PaddingStrategy:
    kind: str  # "zero" | "stretch" | "intermediate"
    target_len: int

    def __post_init__(self):
        if self.kind not in ("zero", "stretch", "intermediate"):
            raise DataError(f"unknown padding strategy {self.kind!r}")
        if self.target_len < 1:
            raise DataError("target_len must be >= 1")

    @classmethod
    def zero_pad(cls, target_len=170):
        return cls("zero", target_len)

    @classmethod
    def stretch_to_longest(cls, target_len=170):
        return cls("stretch", target_len)

    @classmethod
    def intermediate_resize(cls, target_len=64):
        return cls("intermediate", target_len)

    @classmethod
    def from_name(cls, name: str, target_len: int | None = None):
        factory = {"zero": cls.zero_pad, "stretch": cls.stretch_to_longest,
                   "intermediate": cls.intermediate_resize}.get(name)
        if factory is None:
            raise DataError(f"unknown padding strategy {name!r}")
        return factory() if target_len is None else factory(target_len)


def resample_axis(a: np.ndarray, n_out: int, axis: int = 0) -> np.ndarray:
    """Linear resampling along ``axis`` with end samples pinned (align-corners)."""
    a = np.asarray(a, dtype=np.float64)
    n_in = a.shape[axis]
    if n_out == n_in:
        return a.copy()
    if n_in == 1:
        return np.repeat(a, n_out, axis=axis)
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1)) if n_out > 1 else np.zeros(1)
    lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 2)
    frac = pos - lo
    shape = [1] * a.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    return np.take(a, lo, axis=axis) * (1.0 - frac) + np.take(a, lo + 1, axis=axis) * frac


def apply_padding(stack: MprStack, strategy: PaddingStrategy) -> MprStack:
    px = stack.pixels
    L = px.shape[0]
    if L < 2:
        raise DataError("stack needs at least two slices")
    T = strategy.target_len
    if strategy.kind == "zero":
        if L > T:
            raise DataError("lesion longer than pad target")
        before = (T - L) // 2
        out = np.zeros((T,) + px.shape[1:], dtype=np.float64)
        out[before:before + L] = px
    else:
        out = resample_axis(px, T, axis=0)
    return stack.with_pixels(out, padding=strategy.kind)


def cube_sequence(stack: MprStack) -> np.ndarray:
    """Overlapping ``25^3`` cubes, stride 5 along the centerline; ``(n, 25, 25, 25)``."""
    px = stack.pixels
    L, h, w = px.shape
    if (h, w) != (CUBE, CUBE):
        raise DataError("stack must be downscaled to 25x25 before cube sequencing")
    if L < CUBE:
        raise DataError("stack too short for cube sequencing")
    n = (L - CUBE) // CUBE_STRIDE + 1
    return np.stack([px[CUBE_STRIDE * i:CUBE_STRIDE * i + CUBE] for i in range(n)])


def downscale_inplane(stack: MprStack, target: int = CUBE) -> MprStack:
    _, h, w = stack.dims
    if h < target or w < target:
        raise DataError("cannot downscale upward")
    px = resample_axis(resample_axis(stack.pixels, target, axis=1), target, axis=2)
    return stack.with_pixels(px)


def slice_pair(stack: MprStack) -> np.ndarray:
    """Two orthogonal longitudinal planes through the centerline, stacked as channels.

    Channel 0 is row ``H // 2`` (an ``L x W`` image), channel 1 is column
    ``W // 2`` (``L x H``), cropped or zero-padded to width ``W``.
    """
    px = stack.pixels
    L, h, w = px.shape
    ch0 = px[:, h // 2, :]
    ch1 = px[:, :, w // 2]
    if h > w:
        off = (h - w) // 2
        ch1 = ch1[:, off:off + w]
    elif h < w:
        pad = w - h
        ch1 = np.pad(ch1, ((0, 0), (pad // 2, pad - pad // 2)))
    return np.stack([ch0, ch1])


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def to_json(self):
        return {"mean": self.mean, "std": self.std}


def fit_stats(arrays) -> NormStats:
    """Mean/std (population) over all pixels of the given training tensors."""
    arrays = list(arrays)
    total = 0.0
    sq = 0.0
    count = 0
    for a in arrays:
        a = np.asarray(a, dtype=np.float64)
        total += a.sum()
        count += a.size
    if count == 0:
        raise DataError("degenerate statistics")
    mean = total / count
    for a in arrays:
        sq += np.square(np.asarray(a, dtype=np.float64) - mean).sum()
    return NormStats(float(mean), float(np.sqrt(sq / count)))


def normalize(pixels, stats: NormStats) -> np.ndarray:
    if not stats.std > 1e-12:
        raise DataError("degenerate statistics")
    return (np.asarray(pixels, dtype=np.float64) - stats.mean) / stats.std


def denormalize(values, stats: NormStats) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * stats.std + stats.mean
