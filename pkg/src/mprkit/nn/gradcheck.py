"""Central finite-difference checks for layer and model gradients (float64 only)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Layer, bce_loss
from .model import ModelState, backward, logits

EPS = 1e-4
# entries below this fraction of the tensor's largest gradient are judged against that floor
REL_FLOOR = 1e-3
# absolute floor: central-difference round-off at eps=1e-4 is ~1e-12 for O(1) losses
ABS_FLOOR = 1e-6


def rel_error(analytic, numeric, floor: float = REL_FLOOR) -> float:
    """Max over entries of ``|a - n| / max(|a|, |n|, floor * scale, ABS_FLOOR)``.

    ``scale`` is the largest ``|a|`` or ``|n|`` of the tensor. Gradients that
    are exactly zero (a bias feeding batchnorm) are thus compared absolutely.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    mag = np.maximum(np.abs(a), np.abs(n))
    denom = np.maximum(mag, max(floor * mag.max(), ABS_FLOOR))
    return float(np.max(np.abs(a - n) / denom))


def numeric_grad(f, x: np.ndarray, coords=None, eps: float = EPS) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place) at flat ``coords``."""
    flat = x.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = []
    for i in coords:
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        out.append((hi - lo) / (2 * eps))
    return np.array(out)


def check_layer(layer: Layer, x: np.ndarray, train: bool = True, rng=None, eps: float = EPS) -> dict[str, float]:
    """Relative errors of the input and parameter gradients of ``layer`` at ``x``.

    The scalar objective is ``sum(layer(x) * R)`` for a fixed random ``R``.
    """
    rng = rng or np.random.default_rng(0)
    x = np.array(x, dtype=np.float64)
    out = layer.forward(x, train)
    r = rng.normal(size=out.shape)

    def f():
        return float(np.sum(layer.forward(x, train) * r))

    layer.forward(x, train)
    dx = layer.backward(r.copy())
    grads = {k: g.copy() for k, g in layer.grads.items()}
    errs = {}
    if dx is not None:
        errs["input"] = rel_error(dx, numeric_grad(f, x, eps=eps))
    for k, p in layer.params.items():
        errs[k] = rel_error(grads[k], numeric_grad(f, p, eps=eps))
    return errs


@dataclass
class CoordCheck:
    param: str
    index: int
    analytic: float
    numeric: float
    # ReLU/max-pool decisions that differ between the +eps and -eps evaluations
    kinks: int


def activation_pattern(model: ModelState) -> list[np.ndarray]:
    """ReLU masks and max-pool winner masks left by the most recent forward pass."""
    out = []
    for layer in model.layers:
        if layer.kind == "relu":
            out.append(layer._cache.copy())
        elif layer.kind == "maxpool":
            out.extend(m.copy() for m in layer._cache[1])
    return out


def _pattern_diff(p, q) -> int:
    return int(sum(np.count_nonzero(a != b) for a, b in zip(p, q)))


def check_model_coords(model: ModelState, batch, labels, n_coords: int = 4, rng=None,
                       eps: float = EPS) -> list[CoordCheck]:
    """Analytic vs central-difference train-mode BCE gradient at sampled entries of every parameter tensor."""
    rng = rng or np.random.default_rng(0)
    y = np.asarray(labels, dtype=np.float64)
    # running statistics change on every train-mode forward; restore them so the
    # perturbed evaluations see the same model
    saved = {n: b.copy() for n, b in model.named_buffers()}

    def restore():
        for n, b in model.named_buffers():
            b[...] = saved[n]

    def f():
        loss = bce_loss(logits(model, batch, train=True), y)[0]
        restore()
        return loss, activation_pattern(model)

    loss, dz = bce_loss(logits(model, batch, train=True), y)
    grads = backward(model, dz)
    restore()
    out = []
    for name, p in model.named_params():
        flat = p.reshape(-1)
        for i in rng.choice(p.size, size=min(n_coords, p.size), replace=False):
            old = flat[i]
            flat[i] = old + eps
            hi, pat_hi = f()
            flat[i] = old - eps
            lo, pat_lo = f()
            flat[i] = old
            out.append(CoordCheck(name, int(i), float(grads[name].reshape(-1)[i]), (hi - lo) / (2 * eps),
                                  _pattern_diff(pat_hi, pat_lo)))
    return out


def errors_by_param(coords: list[CoordCheck], kink_free: bool = False) -> dict[str, float]:
    """Per-tensor :func:`rel_error`; ``kink_free`` drops coordinates whose difference straddled a kink."""
    groups: dict[str, list[CoordCheck]] = {}
    for c in coords:
        groups.setdefault(c.param, []).append(c)
    errs = {}
    for name, cs in groups.items():
        if kink_free:
            cs = [c for c in cs if c.kinks == 0]
        errs[name] = rel_error([c.analytic for c in cs], [c.numeric for c in cs])
    return errs


def check_model(model: ModelState, batch, labels, n_coords: int = 4, rng=None, eps: float = EPS) -> dict[str, float]:
    """Relative errors of train-mode BCE gradients at ``n_coords`` sampled entries per parameter tensor."""
    return errors_by_param(check_model_coords(model, batch, labels, n_coords, rng, eps))
