"""The 2.5D CNN: model state, forward/backward, Adam, training loop and TTA prediction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import MprkitError
from ..shaping import NormStats, normalize
from .layers import LAYER_TYPES, BatchNorm, Conv2D, Dense, Flatten, Layer, MaxPool2D, ReLU, bce_loss, sigmoid

log = logging.getLogger(__name__)

INPUT_SHAPE = (2, 64, 32)
BLOCK_CHANNELS = (16, 32, 64)
HIDDEN = 128

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NumericalError(MprkitError):
    """Non-finite loss or activations."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 2
    seed: int = 0
    target: str = "significant"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 2 or self.epochs < 0:
            raise MprkitError("learning_rate > 0, batch_size >= 2 and epochs >= 0 required")
        if self.target not in ("significant", "revascularised"):
            raise MprkitError(f"unknown target {self.target!r}")


@dataclass
class ModelState:
    layers: list[Layer]
    input_shape: tuple[int, int, int]
    seed: int
    dtype: np.dtype = np.dtype(np.float64)
    step: int = 0
    epoch: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    norm: NormStats | None = None

    def named_params(self):
        """``(name, array)`` for every trainable tensor, in declaration order."""
        for i, layer in enumerate(self.layers):
            for key, arr in layer.params.items():
                yield f"{i}.{layer.kind}.{key}", arr

    def named_buffers(self):
        for i, layer in enumerate(self.layers):
            for key, arr in layer.buffers.items():
                yield f"{i}.{layer.kind}.{key}", arr

    def param_count(self) -> int:
        return sum(a.size for _, a in self.named_params())

    def architecture(self) -> list[dict]:
        return [{"type": layer.kind, **layer.config()} for layer in self.layers]


def build_model(arch: list[dict], input_shape, seed: int, dtype=np.float64) -> ModelState:
    """Instantiate layers from an architecture description, He-uniform initialised from ``seed``."""
    rng = np.random.default_rng(seed)
    layers = []
    for spec in arch:
        spec = dict(spec)
        kind = spec.pop("type")
        cls = LAYER_TYPES[kind]
        if kind in ("conv", "dense"):
            layers.append(cls(*spec.values(), rng=rng, dtype=dtype))
        elif kind == "bn":
            layers.append(cls(spec["channels"], dtype=dtype))
        else:
            layers.append(cls())
    convs = [layer for layer in layers if isinstance(layer, Conv2D)]
    if convs and layers.index(convs[0]) == 0:
        convs[0].input_grad = False
    return ModelState(layers, tuple(input_shape), seed, np.dtype(dtype))


def arch_25d(input_shape=INPUT_SHAPE, channels=BLOCK_CHANNELS, hidden=HIDDEN) -> list[dict]:
    c_in, h, w = input_shape
    arch = []
    for c in channels:
        arch += [{"type": "conv", "c_in": c_in, "c_out": c, "k": 3}, {"type": "bn", "channels": c},
                 {"type": "relu"}, {"type": "maxpool"}]
        c_in = c
        h, w = h // 2, w // 2
    arch += [{"type": "flatten"}, {"type": "dense", "n_in": c_in * h * w, "n_out": hidden}, {"type": "relu"},
             {"type": "dense", "n_in": hidden, "n_out": 1}]
    return arch


def build_25d_model(input_shape=INPUT_SHAPE, seed: int = 0, dtype=np.float64, *,
                    channels=BLOCK_CHANNELS, hidden=HIDDEN) -> ModelState:
    """Three conv-bn-relu-maxpool blocks, dense 128 + ReLU, dense 1 (sigmoid applied in forward)."""
    c, h, w = input_shape
    n_pool = len(channels)
    if c != 2 or h % 2**n_pool or w % 2**n_pool:
        raise MprkitError("architecture/input mismatch")
    return build_model(arch_25d(input_shape, channels, hidden), input_shape, seed, dtype)


def _check_input(model: ModelState, batch) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(model.input_shape):
        raise MprkitError("architecture/input mismatch")
    # NCHW in, NHWC inside
    return np.ascontiguousarray(batch.transpose(0, 2, 3, 1), dtype=model.dtype)


def logits(model: ModelState, batch, train: bool = False) -> np.ndarray:
    x = _check_input(model, batch)
    if train and x.shape[0] < 2:
        raise MprkitError("batch too small for batchnorm")
    for layer in model.layers:
        x = layer.forward(x, train)
    return x.reshape(-1).astype(np.float64)


def forward(model: ModelState, batch, mode: str = "eval") -> np.ndarray:
    """Probabilities ``(N,)``; ``mode="train"`` uses and updates batch statistics."""
    if mode not in ("train", "eval"):
        raise MprkitError(f"unknown mode {mode!r}")
    return sigmoid(logits(model, batch, train=(mode == "train")))


def backward(model: ModelState, dlogits) -> dict[str, np.ndarray]:
    d = np.asarray(dlogits, dtype=model.dtype).reshape(-1, 1)
    for layer in reversed(model.layers):
        d = layer.backward(d)
        if d is None:
            break
    return {f"{i}.{layer.kind}.{k}": layer.grads[k] for i, layer in enumerate(model.layers) for k in layer.params}


def _diagnostics(model: ModelState) -> str:
    bad = [name for name, a in model.named_params() if not np.all(np.isfinite(a))]
    return f"non-finite parameters in {bad}" if bad else "parameters finite"


def loss_and_grads(model: ModelState, batch, labels, train: bool = True):
    """Mean BCE and reverse-mode gradients for every parameter (name -> array)."""
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if np.any((y != 0) & (y != 1)):
        raise MprkitError("labels must be 0 or 1")
    z = logits(model, batch, train=train)
    loss, dz = bce_loss(z, y)
    if not np.isfinite(loss):
        raise NumericalError(f"numerical failure: {_diagnostics(model)}")
    return loss, backward(model, dz)


def optimizer_step(model: ModelState, grads: dict[str, np.ndarray], lr: float = 1e-3) -> ModelState:
    """In-place Adam update with bias correction; increments ``model.step``."""
    params = dict(model.named_params())
    if set(grads) != set(params):
        raise MprkitError("corrupt gradient")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise MprkitError("corrupt gradient")
    model.step += 1
    t = model.step
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if name not in model.moments:
            model.moments[name] = (np.zeros(p.shape), np.zeros(p.shape))
        m, v = model.moments[name]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)).astype(p.dtype)
    return model


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches covering every sample once; a trailing singleton joins the previous batch."""
    order = np.random.default_rng([seed, epoch]).permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def train(model: ModelState, tensors, labels, cfg: TrainConfig, norm: NormStats | None = None):
    """Run ``cfg.epochs`` more epochs of shuffled mini-batch Adam.

    Input normalisation statistics are taken from ``norm``, else kept from an
    earlier call, else fitted on ``tensors``. Returns ``(model, history)``
    with the per-epoch mean loss.
    """
    tensors = np.asarray(tensors)
    y = np.asarray(labels, dtype=np.float64)
    if len(tensors) == 0:
        raise MprkitError("empty training set")
    if len(tensors) != len(y):
        raise MprkitError("tensor/label count mismatch")
    if norm is not None:
        model.norm = norm
    elif model.norm is None:
        mean = float(np.mean(tensors, dtype=np.float64))
        std = float(np.sqrt(np.mean(np.square(tensors - mean, dtype=np.float64))))
        model.norm = NormStats(mean, std)
    history = []
    for _ in range(cfg.epochs):
        batches = epoch_batches(len(tensors), cfg.batch_size, cfg.seed, model.epoch)
        total = 0.0
        for bi, idx in enumerate(batches):
            x = normalize(tensors[idx], model.norm)
            try:
                loss, grads = loss_and_grads(model, x, y[idx])
            except NumericalError as exc:
                raise NumericalError(f"{exc} (epoch {model.epoch}, batch {bi})") from exc
            optimizer_step(model, grads, cfg.learning_rate)
            total += loss * len(idx)
        model.epoch += 1
        history.append(total / len(tensors))
        log.debug("epoch %d loss %.5f", model.epoch, history[-1])
    return model, history


def predict_proba(model: ModelState, tensors, batch_size: int = 256) -> np.ndarray:
    """Eval-mode probabilities for raw (un-normalised) tensors."""
    tensors = np.asarray(tensors)
    out = []
    for i in range(0, len(tensors), batch_size):
        x = tensors[i:i + batch_size]
        if model.norm is not None:
            x = normalize(x, model.norm)
        out.append(forward(model, x, "eval"))
    return np.concatenate(out) if out else np.zeros(0)


def predict(model: ModelState, lesion_views, tta: bool = True) -> float:
    """Lesion probability: mean over all views with TTA, otherwise view 0 only."""
    views = list(lesion_views)
    if not views:
        raise MprkitError("no views")
    if not tta:
        views = views[:1]
    return float(np.mean(predict_proba(model, np.stack(views))))
