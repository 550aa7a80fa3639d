"""Central finite-difference checks for the analytic gradients in :mod:`dltlab.nn`.

The numerical side only ever calls ``forward`` and the scalar loss functions,
never the backprop code it is checking.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max over entries of ``|a - n| / max(|a|, |n|, floor)``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def _batch_loss(model, x, targets, kind, weights) -> float:
    probs = nn.forward(model, x)
    per = nn.soft_cross_entropy(probs, targets) if kind == "ce" else nn.mse_loss(probs, targets)
    return float(np.sum(weights * per) / len(per))


def numeric_param_grads(model, x, targets, kind="ce", weights=None, eps=1e-5):
    weights = np.ones(len(x)) if weights is None else np.asarray(weights, dtype=np.float64)
    out = []
    for p in model.params():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + eps
            up = _batch_loss(model, x, targets, kind, weights)
            p[idx] = orig - eps
            down = _batch_loss(model, x, targets, kind, weights)
            p[idx] = orig
            g[idx] = (up - down) / (2 * eps)
        out.append(g)
    return out


def numeric_input_grad(model, x, y, eps=1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + eps
        up = float(nn.soft_cross_entropy(nn.forward(model, x), y))
        x[i] = orig - eps
        down = float(nn.soft_cross_entropy(nn.forward(model, x), y))
        x[i] = orig
        g[i] = (up - down) / (2 * eps)
    return g


@dataclass
class GradCheckResult:
    seed: int
    sizes: list
    loss_kind: str
    param_error: float
    input_error: float

    def passed(self, tol: float) -> bool:
        return self.param_error < tol and self.input_error < tol


def check_random_model(seed: int, eps: float = 1e-5) -> GradCheckResult:
    """Gradient check on one random small MLP with a random weighted batch."""
    rng = np.random.default_rng(seed)
    n_hidden = int(rng.integers(0, 3))
    sizes = [int(rng.integers(2, 6))] + [int(rng.integers(2, 7)) for _ in range(n_hidden)]
    sizes.append(int(rng.integers(2, 5)))
    model = nn.MlpModel.init(sizes, seed=int(rng.integers(2**31)))
    for layer in model.layers:
        layer.bias[:] = rng.normal(0, 0.5, layer.bias.shape)
    n = int(rng.integers(1, 6))
    x = rng.normal(size=(n, sizes[0]))
    kind = "ce" if seed % 2 == 0 else "mse"
    targets = rng.dirichlet(np.ones(sizes[-1]), size=n)
    weights = rng.uniform(0.1, 2.0, size=n)

    analytic = [g for pair in nn.backward(model, x, targets, kind, weights) for g in pair]
    numeric = numeric_param_grads(model, x, targets, kind, weights, eps)
    param_err = max(relative_error(a, b) for a, b in zip(analytic, numeric))

    y = nn.one_hot(int(rng.integers(sizes[-1])), sizes[-1])
    in_err = relative_error(nn.input_gradient(model, x[0], y), numeric_input_grad(model, x[0], y, eps))
    return GradCheckResult(seed, sizes, kind, param_err, in_err)


def run_suite(n_models: int = 50, seed: int = 0, eps: float = 1e-5) -> list[GradCheckResult]:
    return [check_random_model(seed + i, eps) for i in range(n_models)]
