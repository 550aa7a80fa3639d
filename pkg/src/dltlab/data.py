"""Synthetic datasets, label-noise injection, augmentation and hard samples."""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import nn
from .errors import ContractError, ShapeError, StateError


class Provenance(enum.IntEnum):
    CLEAN = 0
    NOISY = 1
    HARD_ERASURE = 2
    HARD_ADVERSARIAL = 3

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", "-")

    @classmethod
    def parse(cls, text: str) -> "Provenance":
        return cls[text.strip().upper().replace("-", "_")]


HARD_KINDS = {"erasure": Provenance.HARD_ERASURE, "fgsm": Provenance.HARD_ADVERSARIAL}


@dataclass
class Dataset:
    """Features plus observed and hidden true labels (stored as class indices).

    ``true`` and ``provenance`` exist for evaluation only; training code must
    read labels from ``observed``.
    """

    features: np.ndarray
    observed: np.ndarray
    true: np.ndarray
    provenance: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.observed = np.asarray(self.observed, dtype=np.int64)
        self.true = np.asarray(self.true, dtype=np.int64)
        self.provenance = np.asarray(self.provenance, dtype=np.int8)
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise ShapeError("features must be 2-D")
        for name in ("observed", "true", "provenance"):
            if getattr(self, name).shape != (n,):
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected ({n},)")
        for name in ("observed", "true"):
            arr = getattr(self, name)
            if n and (arr.min() < 0 or arr.max() >= self.n_classes):
                raise ContractError(f"{name} labels outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def observed_onehot(self) -> np.ndarray:
        return nn.one_hot(self.observed, self.n_classes)

    @property
    def true_onehot(self) -> np.ndarray:
        return nn.one_hot(self.true, self.n_classes)

    @property
    def is_noisy(self) -> np.ndarray:
        return self.observed != self.true

    @property
    def noise_fraction(self) -> float:
        return float(np.mean(self.is_noisy)) if len(self) else 0.0

    def group_mask(self, group: str) -> np.ndarray:
        """Mask for 'clean', 'noisy' or 'hard' (either hard kind)."""
        p = self.provenance
        if group == "hard":
            return (p == Provenance.HARD_ERASURE) | (p == Provenance.HARD_ADVERSARIAL)
        return p == Provenance[group.upper()]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.observed[idx], self.true[idx], self.provenance[idx], self.n_classes)

    def copy(self) -> "Dataset":
        return self.subset(np.arange(len(self)))

    def equals(self, other: "Dataset") -> bool:
        return (
            self.n_classes == other.n_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.observed, other.observed)
            and np.array_equal(self.true, other.true)
            and np.array_equal(self.provenance, other.provenance)
        )


def refresh_provenance(observed, true, provenance) -> np.ndarray:
    """Tag mismatches noisy; matches keep a hard tag or become clean."""
    prov = np.asarray(provenance, dtype=np.int8).copy()
    noisy = observed != true
    prov[noisy] = Provenance.NOISY
    prov[~noisy & (prov == Provenance.NOISY)] = Provenance.CLEAN
    return prov


def make_blob_centers(n_classes: int, dim: int, center_spread: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0xB10B])
    return rng.normal(0.0, center_spread, size=(n_classes, dim))


def generate_blobs(n_per_class, n_classes, dim, center_spread, cluster_std, seed,
                   centers=None, sample_seed=None) -> Dataset:
    """One isotropic Gaussian cluster per class, rows shuffled.

    Cluster centres depend only on ``seed`` (or are passed in); the draws use
    ``sample_seed`` when given, so a test split can share the centres while
    drawing independent points.
    """
    if n_classes < 2:
        raise ContractError("need at least two classes")
    if n_per_class < 1 or dim < 1:
        raise ContractError("n_per_class and dim must be positive")
    if cluster_std <= 0:
        raise ContractError("cluster_std must be positive")
    if centers is None:
        centers = make_blob_centers(n_classes, dim, center_spread, seed)
    centers = np.asarray(centers, dtype=np.float64)
    if centers.shape != (n_classes, dim):
        raise ShapeError(f"centers {centers.shape}, expected {(n_classes, dim)}")
    rng = np.random.default_rng([seed if sample_seed is None else sample_seed, 0xDA7A])
    labels = np.repeat(np.arange(n_classes), n_per_class)
    x = centers[labels] + rng.normal(0.0, cluster_std, size=(labels.size, dim))
    order = rng.permutation(labels.size)
    labels = labels[order]
    return Dataset(x[order], labels, labels.copy(), np.zeros(labels.size, dtype=np.int8), n_classes)


def inject_symmetric_noise(ds: Dataset, w: float, seed: int) -> Dataset:
    """Redraw the label of a ``w`` fraction of samples uniformly over all classes.

    The redraw may land on the true class, so the expected disagreement rate is
    ``w * (C - 1) / C``.
    """
    if not 0 <= w < 1:
        raise ContractError(f"noise rate must be in [0, 1), got {w}")
    rng = np.random.default_rng([seed, 0x5E])
    n_flip = int(round(w * len(ds)))
    chosen = rng.choice(len(ds), size=n_flip, replace=False)
    observed = ds.observed.copy()
    observed[chosen] = rng.integers(0, ds.n_classes, size=n_flip)
    prov = refresh_provenance(observed, ds.true, ds.provenance)
    return replace(ds, observed=observed, provenance=prov, features=ds.features.copy(), true=ds.true.copy())


def cyclic_class_map(n_classes: int) -> dict[int, int]:
    return {c: (c + 1) % n_classes for c in range(n_classes)}


def inject_asymmetric_noise(ds: Dataset, w: float, class_map, seed: int) -> Dataset:
    """Relabel a ``w`` fraction of each mapped class to ``class_map[true]``.

    Classes missing from the map are left untouched.
    """
    if not 0 <= w < 1:
        raise ContractError(f"noise rate must be in [0, 1), got {w}")
    class_map = {int(k): int(v) for k, v in dict(class_map).items()}
    for src, dst in class_map.items():
        if src == dst:
            raise ContractError(f"class_map sends class {src} to itself")
        if not (0 <= src < ds.n_classes and 0 <= dst < ds.n_classes):
            raise ContractError(f"class_map entry {src}->{dst} outside [0, {ds.n_classes})")
    rng = np.random.default_rng([seed, 0xA5])
    observed = ds.observed.copy()
    for src in sorted(class_map):
        members = np.flatnonzero(ds.true == src)
        n_flip = int(round(w * members.size))
        chosen = rng.choice(members, size=n_flip, replace=False)
        observed[chosen] = class_map[src]
    prov = refresh_provenance(observed, ds.true, ds.provenance)
    return replace(ds, observed=observed, provenance=prov, features=ds.features.copy(), true=ds.true.copy())


def augment(x, k: int, strength: float, seed: int) -> np.ndarray:
    """``k`` jittered copies of one feature vector, shape (k, dim)."""
    if k < 1:
        raise ContractError("k must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng([seed, 0xA6])
    return x[None, :] + strength * rng.normal(size=(k, x.size))


def augment_batch(x: np.ndarray, k: int, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Batched jitter drawn from the caller's generator, shape (k, n, dim)."""
    if k < 1:
        raise ContractError("k must be >= 1")
    return x[None, :, :] + strength * rng.normal(size=(k,) + x.shape)


def _erase_count(erase_fraction: float, dim: int) -> int:
    # round away float noise like 0.3 * 10 = 3.0000000000000004 before the ceiling
    return max(1, min(dim, math.ceil(round(erase_fraction * dim, 9))))


def make_hard_erasure(x, erase_fraction: float, seed: int) -> np.ndarray:
    """Zero a random ``ceil(erase_fraction * dim)`` subset of coordinates."""
    if not 0 < erase_fraction < 1:
        raise ContractError("erase_fraction must be in (0, 1)")
    x = np.array(x, dtype=np.float64)
    rng = np.random.default_rng([seed, 0xE5])
    x[rng.choice(x.size, size=_erase_count(erase_fraction, x.size), replace=False)] = 0.0
    return x


def make_hard_fgsm(model, x, y, epsilon: float) -> np.ndarray:
    """``x + epsilon * sign(dCE/dx)``; works on one sample or a batch."""
    if epsilon < 0:
        raise ContractError("epsilon must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    return x + epsilon * np.sign(nn.input_gradient(model, x, y))


def add_hard_samples(ds: Dataset, kind: str, *, subset_fraction=0.1, ratio=1.0, seed=0,
                     erase_fraction=0.25, epsilon=0.5, attack_model=None) -> Dataset:
    """Append hard copies of a random subset of clean samples.

    The subset holds ``subset_fraction * N`` clean samples; ``ratio`` times
    that many hard samples are appended, cycling through the subset. Hard
    samples keep their source's true label as the observed label.
    """
    if kind not in HARD_KINDS:
        raise ContractError(f"hard sample kind must be one of {sorted(HARD_KINDS)}")
    if kind == "fgsm" and attack_model is None:
        raise StateError("fgsm hard samples need a trained attack model")
    if ratio < 0:
        raise ContractError("ratio must be nonnegative")
    rng = np.random.default_rng([seed, 0x4A2D])
    clean = np.flatnonzero(ds.provenance == Provenance.CLEAN)
    subset = rng.choice(clean, size=min(clean.size, int(round(subset_fraction * len(ds)))), replace=False)
    n_hard = int(round(ratio * subset.size))
    if n_hard == 0:
        return ds.copy()
    src = subset[np.arange(n_hard) % subset.size]
    if kind == "erasure":
        seeds = rng.integers(0, 2**63, size=n_hard)
        feats = np.stack([make_hard_erasure(ds.features[i], erase_fraction, int(s)) for i, s in zip(src, seeds)])
    else:
        feats = make_hard_fgsm(attack_model, ds.features[src], nn.one_hot(ds.true[src], ds.n_classes), epsilon)
    labels = ds.true[src]
    return Dataset(
        np.vstack([ds.features, feats]),
        np.concatenate([ds.observed, labels]),
        np.concatenate([ds.true, labels]),
        np.concatenate([ds.provenance, np.full(n_hard, HARD_KINDS[kind], dtype=np.int8)]),
        ds.n_classes,
    )


# --- serialisation ---------------------------------------------------------

_CSV_TAG = "# dltlab-dataset v1"


def save_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"{_CSV_TAG} n_classes={ds.n_classes}\n")
        writer = csv.writer(fh)
        writer.writerow([f"f{j}" for j in range(ds.dim)] + ["observed_label", "true_label", "provenance"])
        for row, obs, tru, prov in zip(ds.features, ds.observed, ds.true, ds.provenance):
            writer.writerow([repr(float(v)) for v in row] + [int(obs), int(tru), Provenance(prov).label])


def load_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        tag = fh.readline().strip()
        if not tag.startswith(_CSV_TAG):
            raise ContractError(f"{path}: missing dataset header line")
        n_classes = int(tag.split("n_classes=")[1])
        reader = csv.reader(fh)
        header = next(reader)
        dim = len(header) - 3
        feats, obs, tru, prov = [], [], [], []
        for row in reader:
            feats.append([float(v) for v in row[:dim]])
            obs.append(int(row[dim]))
            tru.append(int(row[dim + 1]))
            prov.append(Provenance.parse(row[dim + 2]))
    return Dataset(np.array(feats, dtype=np.float64).reshape(-1, dim), obs, tru, prov, n_classes)


def save_npz(ds: Dataset, path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, version=np.int64(1), features=ds.features, observed=ds.observed,
                 true=ds.true, provenance=ds.provenance, n_classes=np.int64(ds.n_classes))


def load_npz(path) -> Dataset:
    with np.load(path) as z:
        if int(z["version"]) != 1:
            raise ContractError(f"{path}: unsupported dataset version")
        return Dataset(z["features"], z["observed"], z["true"], z["provenance"], int(z["n_classes"]))


def save_dataset(ds: Dataset, path) -> None:
    (save_csv if Path(path).suffix == ".csv" else save_npz)(ds, path)


def load_dataset(path) -> Dataset:
    return (load_csv if Path(path).suffix == ".csv" else load_npz)(path)
