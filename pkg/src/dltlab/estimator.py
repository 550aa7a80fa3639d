"""Noise-rate estimation from early-minus-late loss differences.

A two-component 1-D Gaussian mixture is fitted with EM; samples whose
posterior under the small-mean component reaches ``theta`` count as clean.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegeneracyError

VAR_FLOOR = 1e-6
DENSITY_FLOOR = 1e-300
_LOG_2PI = np.log(2 * np.pi)


@dataclass
class GaussianMixture2:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihoods: list = field(default_factory=list)  # mean log-lik after each EM step
    n_iter: int = 0
    converged: bool = False

    def log_density(self, x) -> np.ndarray:
        """Per-component ``log(w_k N(x; mu_k, var_k))``, shape (n, 2)."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
        return (np.log(self.weights) - 0.5 * (_LOG_2PI + np.log(self.variances))
                - 0.5 * (x - self.means) ** 2 / self.variances)

    def mean_log_likelihood(self, x) -> float:
        return float(np.mean(np.logaddexp.reduce(self.log_density(x), axis=1)))

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "variances": self.variances.tolist(), "n_iter": self.n_iter, "converged": self.converged}


def _init_split(x: np.ndarray, seed: int) -> np.ndarray:
    """Boolean mask of the initial upper component: above the median.

    Heavy ties at the median can leave one side empty; then fall back to a
    seeded random split.
    """
    upper = x > np.median(x)
    if 0 < upper.sum() < x.size:
        return upper
    rng = np.random.default_rng(seed)
    upper = np.zeros(x.size, dtype=bool)
    upper[rng.choice(x.size, size=x.size // 2, replace=False)] = True
    return upper


def fit_gmm2(values, max_iter: int = 200, tol: float = 1e-6, seed: int = 0) -> GaussianMixture2:
    """EM fit of a two-Gaussian mixture, components ordered by mean.

    Stops when the mean per-sample log-likelihood improves by less than
    ``tol``. The input is sorted first, so the fit does not depend on order.
    """
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if x.size < 4:
        raise ContractError("need at least 4 values to fit a two-component mixture")
    if not np.all(np.isfinite(x)):
        raise ContractError("values must be finite")
    if np.var(x) < VAR_FLOOR:
        raise DegeneracyError("values are (nearly) constant; the mixture is unidentifiable")

    upper = _init_split(x, seed)
    resp = np.column_stack([~upper, upper]).astype(np.float64)
    gmm = GaussianMixture2(np.zeros(2), np.zeros(2), np.ones(2))
    prev = -np.inf
    for it in range(1, max_iter + 1):
        # M step
        nk = resp.sum(axis=0)
        gmm.weights = nk / x.size
        gmm.means = (resp * x[:, None]).sum(axis=0) / nk
        gmm.variances = np.maximum((resp * (x[:, None] - gmm.means) ** 2).sum(axis=0) / nk, VAR_FLOOR)
        # E step
        logp = gmm.log_density(x)
        norm = np.logaddexp.reduce(logp, axis=1)
        resp = np.exp(logp - norm[:, None])
        ll = float(np.mean(norm))
        gmm.log_likelihoods.append(ll)
        gmm.n_iter = it
        if ll - prev < tol:
            gmm.converged = True
            break
        prev = ll
    if np.any(gmm.weights <= 0) or np.any(gmm.weights >= 1):
        raise DegeneracyError("a mixture component collapsed to zero weight")
    order = np.argsort(gmm.means, kind="stable")
    gmm.weights, gmm.means, gmm.variances = gmm.weights[order], gmm.means[order], gmm.variances[order]
    return gmm


def posterior_clean(gmm: GaussianMixture2, value) -> np.ndarray | float:
    """Posterior of the smaller-mean component; densities floored at 1e-300."""
    v = np.asarray(value, dtype=np.float64)
    dens = np.maximum(np.exp(gmm.log_density(v.ravel())), DENSITY_FLOOR)
    lo = int(np.argmin(gmm.means))
    phi = dens[:, lo] / dens.sum(axis=1)
    return float(phi[0]) if v.ndim == 0 else phi.reshape(v.shape)


@dataclass
class EstimationResult:
    phi: np.ndarray
    theta: float
    n_clean: int
    rate: float
    gmm: GaussianMixture2

    @property
    def n(self) -> int:
        return self.phi.size

    def to_dict(self, bins: int = 10) -> dict:
        hist, edges = np.histogram(self.phi, bins=bins, range=(0.0, 1.0))
        return {
            "theta": self.theta,
            "n": self.n,
            "n_clean": self.n_clean,
            "estimated_rate": self.rate,
            "phi_histogram": {"edges": edges.tolist(), "counts": hist.tolist()},
            "gmm": self.gmm.to_dict(),
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def estimate_noise_rate(diffs, theta: float = 0.5, **fit_kwargs) -> EstimationResult:
    """Clean set = ``{i : phi_i >= theta}``; rate = ``1 - n_clean / N``."""
    if not 0 <= theta <= 1:
        raise ContractError("theta must be in [0, 1]")
    diffs = np.asarray(diffs, dtype=np.float64).ravel()
    gmm = fit_gmm2(diffs, **fit_kwargs)
    phi = posterior_clean(gmm, diffs)
    n_clean = int(np.count_nonzero(phi >= theta))
    return EstimationResult(phi, float(theta), n_clean, 1.0 - n_clean / diffs.size, gmm)
