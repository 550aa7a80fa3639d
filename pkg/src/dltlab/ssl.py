"""Clean/noisy batch split, pseudo-labels, mixup and the regularised DLT loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .data import augment_batch
from .errors import ContractError


@dataclass(frozen=True)
class SslWeights:
    lambda_n: float = 25.0
    lambda_r: float = 1.0
    T: float = 0.5
    K: int = 2
    mix_fraction: float = 0.5
    beta_alpha: float = 4.0

    def __post_init__(self):
        if self.lambda_n < 0 or self.lambda_r < 0:
            raise ContractError("loss weights must be nonnegative")
        if self.T <= 0:
            raise ContractError("sharpening temperature must be positive")
        if self.K < 1:
            raise ContractError("K must be >= 1")
        if not 0 <= self.mix_fraction <= 1:
            raise ContractError("mix_fraction must be in [0, 1]")
        if self.beta_alpha <= 0:
            raise ContractError("beta_alpha must be positive")


@dataclass
class BatchSplit:
    clean_ids: np.ndarray
    noisy_ids: np.ndarray
    tau: float


def split_batch(losses, tau: float, ids=None) -> BatchSplit:
    """Clean iff ``loss <= tau``. ``ids`` default to positions in ``losses``."""
    losses = np.asarray(losses, dtype=np.float64)
    ids = np.arange(losses.size) if ids is None else np.asarray(ids)
    if not np.isfinite(tau):
        raise ContractError("threshold must be finite")
    clean = losses <= tau
    return BatchSplit(ids[clean], ids[~clean], float(tau))


def sharpen(probs, T: float) -> np.ndarray:
    """Temperature sharpening ``p**(1/T) / sum(p**(1/T))`` along the last axis."""
    if T <= 0:
        raise ContractError("temperature must be positive")
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(probs.sum(axis=-1) <= 0):
        raise ContractError("cannot sharpen an all-zero vector")
    # scale by the row max first so tiny entries do not underflow to an all-zero row
    scaled = probs / probs.max(axis=-1, keepdims=True)
    powered = scaled ** (1.0 / T)
    return powered / powered.sum(axis=-1, keepdims=True)


def pseudo_label(model, views, T: float) -> np.ndarray:
    """Average the model's predictions over K views, then sharpen.

    ``views`` is (K, dim) for one sample or (K, n, dim) for a batch.
    """
    views = np.asarray(views, dtype=np.float64)
    k = views.shape[0]
    if k < 1:
        raise ContractError("need at least one view")
    flat = views.reshape(-1, views.shape[-1])
    probs = nn.forward(model, flat).reshape(views.shape[:-1] + (model.n_classes,))
    return sharpen(probs.mean(axis=0), T)


def draw_mix_lambda(rng: np.random.Generator, beta_alpha: float) -> float:
    lam = rng.beta(beta_alpha, beta_alpha)
    return max(lam, 1.0 - lam)


def mixup(x1, y1, x2, y2, lam: float):
    if not 0 <= lam <= 1:
        raise ContractError("mixup coefficient must be in [0, 1]")
    x_mix = lam * np.asarray(x1) + (1 - lam) * np.asarray(x2)
    y_mix = lam * np.asarray(y1) + (1 - lam) * np.asarray(y2)
    return x_mix, y_mix


def reg_loss(mean_prediction) -> float:
    """KL(uniform || mean prediction), denominator clamped at 1e-12."""
    p = np.asarray(mean_prediction, dtype=np.float64)
    prior = np.full(p.shape, 1.0 / p.size)
    return float(np.sum(prior * np.log(prior / np.maximum(p, nn.PROB_FLOOR))))


def total_loss(l_clean, l_noisy, l_reg, lambda_n, lambda_r) -> float:
    return l_clean + lambda_n * l_noisy + lambda_r * l_reg


@dataclass
class DltBatch:
    """Mixed inputs/targets for one DLT step, ready for the loss."""

    clean_x: np.ndarray
    clean_y: np.ndarray
    noisy_x: np.ndarray
    noisy_y: np.ndarray
    split: BatchSplit
    lam: float


def prepare_dlt_batch(model, x, y_onehot, losses, tau, weights: SslWeights,
                      rng: np.random.Generator, aug_strength: float) -> DltBatch:
    """Split, augment, pseudo-label and mix one mini-batch.

    Clean side: K views with their observed labels, mixed with a shuffled copy
    of themselves. Noisy side: K views with sharpened pseudo-labels, each mixed
    with a partner drawn from a random ``mix_fraction`` subset of the clean
    views (or from the noisy views when no clean sample exists). The first
    component always gets the larger mixing weight.
    """
    split = split_batch(losses, tau)
    k = weights.K
    views = augment_batch(x, k, aug_strength, rng)  # (K, n, dim)
    lam = draw_mix_lambda(rng, weights.beta_alpha)

    c, u = split.clean_ids, split.noisy_ids
    dim, n_classes = x.shape[1], y_onehot.shape[1]
    clean_x = views[:, c].reshape(-1, dim)
    clean_y = np.tile(y_onehot[c], (k, 1))
    if c.size:
        perm = rng.permutation(clean_x.shape[0])
        clean_x, clean_y = mixup(clean_x, clean_y, clean_x[perm], clean_y[perm], lam)

    noisy_x = views[:, u].reshape(-1, dim)
    noisy_y = np.empty((0, n_classes))
    if u.size:
        targets = pseudo_label(model, views[:, u], weights.T)
        noisy_y = np.tile(targets, (k, 1))
        if c.size:
            pool_size = max(1, int(round(weights.mix_fraction * c.size)))
            pool = rng.choice(c.size, size=pool_size, replace=False)
            partners = pool[rng.integers(0, pool_size, size=noisy_x.shape[0])]
            view_idx = rng.integers(0, k, size=noisy_x.shape[0])
            px = views[view_idx, c[partners]]
            py = y_onehot[c[partners]]
        else:
            perm = rng.permutation(noisy_x.shape[0])
            px, py = noisy_x[perm], noisy_y[perm]
        noisy_x, noisy_y = mixup(noisy_x, noisy_y, px, py, lam)
    return DltBatch(clean_x, clean_y, noisy_x, noisy_y, split, lam)


@dataclass
class DltLoss:
    total: float
    clean: float
    noisy: float
    reg: float


def dlt_objective(model, batch: DltBatch, weights: SslWeights):
    """Total loss ``L_clean + lambda_n L_noisy + lambda_r L_reg`` and its gradients.

    L_clean is the mean cross-entropy over the clean rows, L_noisy the mean
    squared error over the noisy rows, and L_reg acts on the mean prediction
    over all rows. Empty sides contribute nothing. Pseudo-labels are constants.
    """
    n_c, n_u = batch.clean_x.shape[0], batch.noisy_x.shape[0]
    xs = np.vstack([batch.clean_x, batch.noisy_x])
    if xs.shape[0] == 0:
        raise ContractError("empty DLT batch")
    cache = nn.forward_cache(model, xs)
    probs = cache.probs
    dlogits = np.zeros_like(probs)
    l_clean = l_noisy = 0.0
    if n_c:
        pc = probs[:n_c]
        l_clean = float(np.mean(nn.soft_cross_entropy(pc, batch.clean_y)))
        dlogits[:n_c] += nn.ce_logit_grad(pc, batch.clean_y) / n_c
    if n_u:
        pu = probs[n_c:]
        l_noisy = float(np.mean(nn.mse_loss(pu, batch.noisy_y)))
        if weights.lambda_n:
            dlogits[n_c:] += weights.lambda_n * nn.mse_logit_grad(pu, batch.noisy_y) / n_u
    l_reg = reg_loss(probs.mean(axis=0))
    if weights.lambda_r:
        dlogits += weights.lambda_r * nn.reg_logit_grad(probs)
    grads, _ = nn.backprop(model, cache, dlogits)
    total = total_loss(l_clean, l_noisy, l_reg, weights.lambda_n, weights.lambda_r)
    return DltLoss(total, l_clean, l_noisy, l_reg), grads
