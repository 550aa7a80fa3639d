"""Small dense softmax classifier with hand-derived gradients.

Everything runs in float64. Gradients are computed by explicit backprop
through ``Dense -> ReLU -> ... -> Dense -> softmax`` so they can be checked
against finite differences without an autodiff framework.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, NumericError, ShapeError

PROB_FLOOR = 1e-12
LOSS_KINDS = ("ce", "mse")

_MAGIC = b"DLTM"
_VERSION = 1


@dataclass
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class MlpModel:
    """Feed-forward classifier: ReLU on hidden layers, softmax on the output."""

    layers: list[Dense]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("model needs at least one layer")
        for i, layer in enumerate(self.layers):
            layer.weight = np.asarray(layer.weight, dtype=np.float64)
            layer.bias = np.asarray(layer.bias, dtype=np.float64)
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.out_dim,):
                raise ShapeError(f"layer {i}: weight {layer.weight.shape} / bias {layer.bias.shape}")
            if i > 0 and layer.in_dim != self.layers[i - 1].out_dim:
                raise ShapeError(
                    f"layer {i} expects {layer.in_dim} inputs, previous layer emits "
                    f"{self.layers[i - 1].out_dim}"
                )

    @classmethod
    def init(cls, sizes, seed: int = 0) -> "MlpModel":
        """Glorot-uniform weights, zero biases. ``sizes`` = (in, hidden..., C)."""
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ContractError(f"bad layer sizes {sizes}")
        rng = np.random.default_rng(seed)
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            layers.append(Dense(rng.uniform(-limit, limit, size=(fan_out, fan_in)), np.zeros(fan_out)))
        return cls(layers)

    @classmethod
    def zeros(cls, sizes) -> "MlpModel":
        return cls([Dense(np.zeros((o, i)), np.zeros(o)) for i, o in zip(sizes[:-1], sizes[1:])])

    @property
    def n_classes(self) -> int:
        return self.layers[-1].out_dim

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    def params(self) -> list[np.ndarray]:
        """Flat list ``[W0, b0, W1, b1, ...]`` of the live parameter arrays."""
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def copy(self) -> "MlpModel":
        return MlpModel([Dense(layer.weight.copy(), layer.bias.copy()) for layer in self.layers])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params())


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activations of each layer; last is the logits
    probs: np.ndarray


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(model: MlpModel, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match model input dim {model.in_dim}")
    return x, single


def forward_cache(model: MlpModel, x: np.ndarray) -> ForwardCache:
    x, _ = _as_batch(model, x)
    inputs, pre = [], []
    h = x
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        inputs.append(h)
        z = h @ layer.weight.T + layer.bias
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite activation in layer {i}", layer=i)
        pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
    return ForwardCache(inputs, pre, softmax(pre[-1]))


def forward(model: MlpModel, x) -> np.ndarray:
    """Class probabilities for one sample (1-D) or a batch (2-D)."""
    x, single = _as_batch(model, x)
    probs = forward_cache(model, x).probs
    return probs[0] if single else probs


def predict(model: MlpModel, x) -> np.ndarray:
    return np.argmax(forward(model, x), axis=-1)


def _check_one_hot(y: np.ndarray):
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-1) == 1)):
        raise ContractError("label is not one-hot")


def cross_entropy(probs, y) -> float | np.ndarray:
    """-sum_c y_c log p_c with p clamped below at 1e-12. Vectorised over rows."""
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if probs.shape != y.shape:
        raise ShapeError(f"probs {probs.shape} vs labels {y.shape}")
    _check_one_hot(y)
    return soft_cross_entropy(probs, y)


def soft_cross_entropy(probs: np.ndarray, targets: np.ndarray):
    """Cross-entropy against arbitrary (e.g. mixed) target distributions."""
    return -np.sum(targets * np.log(np.maximum(probs, PROB_FLOOR)), axis=-1)


def mse_loss(probs, target):
    probs = np.asarray(probs, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if probs.shape != target.shape:
        raise ShapeError(f"probs {probs.shape} vs target {target.shape}")
    return np.mean((probs - target) ** 2, axis=-1)


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (n_classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


# Gradients w.r.t. logits, one row per sample, for the *unweighted* per-sample loss.

def _softmax_vjp(probs: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    return probs * (grad_p - np.sum(grad_p * probs, axis=-1, keepdims=True))


def ce_logit_grad(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    # classes under the clamp contribute a constant, hence zero gradient
    active = np.where(probs > PROB_FLOOR, targets, 0.0)
    return probs * active.sum(axis=-1, keepdims=True) - active


def mse_logit_grad(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    n_classes = probs.shape[-1]
    return _softmax_vjp(probs, 2.0 * (probs - targets) / n_classes)


def reg_logit_grad(probs: np.ndarray) -> np.ndarray:
    """Gradient of KL(uniform || batch-mean prediction) w.r.t. every row's logits."""
    n, n_classes = probs.shape
    mean_pred = probs.mean(axis=0)
    prior = np.full(n_classes, 1.0 / n_classes)
    grad_mean = np.where(mean_pred > PROB_FLOOR, -prior / np.maximum(mean_pred, PROB_FLOOR), 0.0)
    return _softmax_vjp(probs, np.broadcast_to(grad_mean, probs.shape)) / n


def backprop(model: MlpModel, cache: ForwardCache, dlogits: np.ndarray):
    """Push a logit gradient back through the network.

    Returns ``(grads, dx)`` where ``grads`` is ``[(dW, db), ...]`` per layer.
    """
    grads = [None] * len(model.layers)
    delta = dlogits
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        dW = delta.T @ cache.inputs[i]
        db = delta.sum(axis=0)
        if not (np.all(np.isfinite(dW)) and np.all(np.isfinite(db))):
            raise NumericError(f"non-finite gradient in layer {i}", layer=i)
        grads[i] = (dW, db)
        delta = delta @ layer.weight
        if i > 0:
            delta = delta * (cache.pre[i - 1] > 0)
    return grads, delta


def loss_and_grads(model, batch_x, batch_targets, loss_kind="ce", weights=None):
    """Mean weighted loss ``(1/n) sum_i w_i l_i`` and its parameter gradients."""
    if loss_kind not in LOSS_KINDS:
        raise ContractError(f"loss_kind must be one of {LOSS_KINDS}, got {loss_kind!r}")
    cache = forward_cache(model, batch_x)
    targets = np.asarray(batch_targets, dtype=np.float64)
    n = cache.probs.shape[0]
    if n == 0:
        raise ContractError("empty batch")
    if targets.shape != cache.probs.shape:
        raise ShapeError(f"targets {targets.shape} vs outputs {cache.probs.shape}")
    weights = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,):
        raise ShapeError(f"weights {weights.shape} for batch of {n}")
    if loss_kind == "ce":
        per_sample = soft_cross_entropy(cache.probs, targets)
        dlogits = ce_logit_grad(cache.probs, targets)
    else:
        per_sample = mse_loss(cache.probs, targets)
        dlogits = mse_logit_grad(cache.probs, targets)
    dlogits = dlogits * (weights / n)[:, None]
    grads, _ = backprop(model, cache, dlogits)
    return float(np.sum(weights * per_sample) / n), grads


def backward(model, batch_x, batch_targets, loss_kind="ce", weights=None):
    return loss_and_grads(model, batch_x, batch_targets, loss_kind, weights)[1]


def input_gradient(model: MlpModel, x, y) -> np.ndarray:
    """d CE(forward(x), y) / dx. Accepts one sample or a batch of rows."""
    x, single = _as_batch(model, x)
    y = np.asarray(y, dtype=np.float64).reshape(x.shape[0], model.n_classes)
    cache = forward_cache(model, x)
    _, dx = backprop(model, cache, ce_logit_grad(cache.probs, y))
    return dx[0] if single else dx


@dataclass
class SgdState:
    """Classical momentum SGD: ``v = m*v + g + wd*p ; p -= lr*v``."""

    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    buffers: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ContractError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be nonnegative")

    @classmethod
    def for_model(cls, model: MlpModel, learning_rate, momentum=0.9, weight_decay=5e-4):
        return cls(learning_rate, momentum, weight_decay, [np.zeros_like(p) for p in model.params()])


def sgd_step(model: MlpModel, state: SgdState, grads) -> MlpModel:
    params = model.params()
    flat = [g for pair in grads for g in pair]
    if not state.buffers:
        state.buffers = [np.zeros_like(p) for p in params]
    if len(flat) != len(params) or len(state.buffers) != len(params):
        raise ShapeError("gradient/parameter/buffer count mismatch")
    for p, g, v in zip(params, flat, state.buffers):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(f"shape mismatch {p.shape} / {g.shape} / {v.shape}")
        v *= state.momentum
        v += g
        if state.weight_decay:
            v += state.weight_decay * p
        p -= state.learning_rate * v
    return model


def save_model(model: MlpModel, path) -> None:
    """Binary checkpoint: header, layer shapes, then row-major float64 params."""
    parts = [_MAGIC, struct.pack("<II", _VERSION, len(model.layers))]
    for layer in model.layers:
        parts.append(struct.pack("<II", layer.out_dim, layer.in_dim))
    for layer in model.layers:
        parts.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_model(path) -> MlpModel:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise ContractError(f"{path}: not a dltlab model checkpoint")
    version, n_layers = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    shapes = []
    for _ in range(n_layers):
        shapes.append(struct.unpack_from("<II", blob, offset))
        offset += 8
    layers = []
    for out_dim, in_dim in shapes:
        w = np.frombuffer(blob, dtype="<f8", count=out_dim * in_dim, offset=offset)
        offset += 8 * out_dim * in_dim
        b = np.frombuffer(blob, dtype="<f8", count=out_dim, offset=offset)
        offset += 8 * out_dim
        layers.append(Dense(w.reshape(out_dim, in_dim).astype(np.float64), b.astype(np.float64)))
    if offset != len(blob):
        raise ContractError(f"{path}: trailing bytes in checkpoint")
    return MlpModel(layers)
