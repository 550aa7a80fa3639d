"""Per-sample loss history and the dynamic thresholds computed from it."""
from __future__ import annotations

import collections
import csv
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ContractError, NumericError, StateError

THRESHOLD_MODES = ("last-epoch", "slide-window")


def nearest_rank(q: float, n: int) -> int:
    """1-based rank ``ceil(q * n)`` computed exactly, clipped to [1, n]."""
    return min(n, max(1, math.ceil(Fraction(q) * n)))


def quantile(values, q: float) -> float:
    """Nearest-rank quantile: the ``ceil(q*n)``-th smallest value (q=0 -> min).

    Always returns one of the inputs, so ``values <= result`` selects exactly
    ``ceil(q*n)`` entries when the values are distinct.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ContractError("quantile of an empty set")
    if not 0 <= q <= 1:
        raise ContractError(f"q must be in [0, 1], got {q}")
    k = nearest_rank(q, values.size) - 1
    return float(np.partition(values, k)[k])


@dataclass(frozen=True)
class ThresholdPolicy:
    mode: str = "last-epoch"
    s: int = 200
    w: float = 0.0
    t_warm: int = 10
    t_grad: int = 40

    def __post_init__(self):
        if self.mode not in THRESHOLD_MODES:
            raise ContractError(f"mode must be one of {THRESHOLD_MODES}, got {self.mode!r}")
        if self.s < 1 or self.t_warm < 1 or self.t_grad < 1:
            raise ContractError("s, t_warm and t_grad must all be >= 1")
        if not 0 <= self.w < 1:
            raise ContractError(f"w must be in [0, 1), got {self.w}")


def selection_proportion(policy: ThresholdPolicy, t: int) -> float:
    """Fraction of samples admitted as clean at epoch ``t`` (1-based)."""
    if t < 1:
        raise ContractError("epochs are numbered from 1")
    if t <= policy.t_warm:
        return 1.0
    if t < policy.t_warm + policy.t_grad:
        return 1.0 - policy.w * (t - policy.t_warm) / policy.t_grad
    # the ramp's end is returned from this branch so it equals 1 - w exactly
    return 1.0 - policy.w


@dataclass
class BatchRecord:
    epoch: int
    batch: int
    sample_ids: np.ndarray
    losses: np.ndarray


class LossLedger:
    """Per-epoch loss arrays plus a ring buffer of the most recent batches.

    Losses recorded for a batch are the pre-update forward losses.
    """

    def __init__(self, n_samples: int, batch_size: int, window_capacity: int = 200):
        if n_samples < 1 or batch_size < 1 or window_capacity < 1:
            raise ContractError("n_samples, batch_size and window_capacity must be positive")
        self.n_samples = n_samples
        self.batch_size = batch_size
        self.window = collections.deque(maxlen=window_capacity)
        self._epochs: dict[int, np.ndarray] = {}
        self._seen: dict[int, np.ndarray] = {}
        self._batches: dict[int, list[BatchRecord]] = {}

    @property
    def batches_per_epoch(self) -> int:
        return -(-self.n_samples // self.batch_size)

    @property
    def window_capacity(self) -> int:
        return self.window.maxlen

    @property
    def epochs(self) -> list[int]:
        return sorted(self._epochs)

    def record(self, epoch: int, batch_idx: int, sample_ids, losses) -> "LossLedger":
        ids = np.asarray(sample_ids, dtype=np.int64).ravel()
        vals = np.array(losses, dtype=np.float64).ravel()
        if ids.shape != vals.shape:
            raise ContractError(f"{ids.size} ids but {vals.size} losses")
        if np.unique(ids).size != ids.size:
            raise ContractError("duplicate sample ids within a batch")
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_samples):
            raise ContractError("sample id out of range")
        bad = ~np.isfinite(vals) | (vals < 0)
        if bad.any():
            sid = int(ids[np.argmax(bad)])
            raise NumericError(f"invalid loss {vals[np.argmax(bad)]} for sample {sid}", sample_id=sid)
        if epoch not in self._epochs:
            self._epochs[epoch] = np.full(self.n_samples, np.nan)
            self._seen[epoch] = np.zeros(self.n_samples, dtype=bool)
            self._batches[epoch] = []
        self._epochs[epoch][ids] = vals
        self._seen[epoch][ids] = True
        rec = BatchRecord(epoch, batch_idx, ids, vals)
        self._batches[epoch].append(rec)
        self.window.append(rec)
        return self

    def is_complete(self, epoch: int) -> bool:
        return epoch in self._seen and bool(self._seen[epoch].all())

    def epoch_losses(self, epoch: int) -> np.ndarray:
        if not self.is_complete(epoch):
            raise StateError(f"epoch {epoch} has not been recorded for every sample")
        return self._epochs[epoch].copy()

    def batch_losses(self, epoch: int, batch_idx: int) -> BatchRecord:
        for rec in self._batches.get(epoch, ()):
            if rec.batch == batch_idx:
                return rec
        raise StateError(f"no record for epoch {epoch} batch {batch_idx}")

    def window_losses(self, s: int | None = None) -> np.ndarray:
        """Concatenated losses of the newest ``min(s, available)`` batches."""
        if not self.window:
            raise StateError("loss window is empty")
        s = len(self.window) if s is None else s
        recent = list(self.window)[-s:]
        return np.concatenate([rec.losses for rec in recent])

    def records(self):
        for epoch in self.epochs:
            yield from self._batches[epoch]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "batch", "sample_id", "loss"])
            for rec in self.records():
                for sid, loss in zip(rec.sample_ids, rec.losses):
                    writer.writerow([rec.epoch, rec.batch, int(sid), repr(float(loss))])


def threshold_last_epoch(ledger: LossLedger, t: int, q: float) -> float:
    """Quantile of all of epoch ``t-1``'s losses; the same for every batch of ``t``."""
    return quantile(ledger.epoch_losses(t - 1), q)


def threshold_slide_window(ledger: LossLedger, q: float, s: int | None = None) -> float:
    """Quantile over the last ``s`` recorded batches (all of them if fewer exist)."""
    return quantile(ledger.window_losses(s), q)


def loss_difference(ledger: LossLedger, early: int, late: int) -> np.ndarray:
    return ledger.epoch_losses(early) - ledger.epoch_losses(late)
