"""Training loops: plain cross-entropy, warm-up and DLT epochs, and the studies
built on them (noise-rate estimation, hard samples)."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import data, estimator, ledger as ledger_mod, nn, ssl
from .config import TrainConfig
from .errors import ConfigError, NumericError, StateError
from .ledger import LossLedger, ThresholdPolicy

log = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "epoch", "phase", "lr", "train_loss", "test_accuracy", "q", "tau_mean",
    "selection_precision", "selection_recall",
    "selected_clean_true_clean", "selected_clean_true_noisy",
    "selected_noisy_true_clean", "selected_noisy_true_noisy", "hard_selected_clean",
]


@dataclass
class EpochMetrics:
    epoch: int
    phase: str  # warmup | dlt | plain
    lr: float
    train_loss: float
    test_accuracy: float
    q: float | None = None
    tau_mean: float | None = None
    selection_precision: float | None = None
    selection_recall: float | None = None
    selected_clean_true_clean: int | None = None
    selected_clean_true_noisy: int | None = None
    selected_noisy_true_clean: int | None = None
    selected_noisy_true_noisy: int | None = None
    hard_selected_clean: int | None = None

    def row(self) -> list[str]:
        out = []
        for name in METRIC_COLUMNS:
            v = getattr(self, name)
            out.append("" if v is None else repr(float(v)) if isinstance(v, float) else str(v))
        return out


def write_metrics_csv(metrics, path_or_buf) -> None:
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for m in metrics:
            writer.writerow(m.row())
    finally:
        if own:
            fh.close()


def metrics_csv_text(metrics) -> str:
    buf = io.StringIO()
    write_metrics_csv(metrics, buf)
    return buf.getvalue()


def evaluate(model: nn.MlpModel, dataset: data.Dataset) -> float:
    """Fraction of argmax predictions matching the true labels."""
    if len(dataset) == 0:
        return 0.0
    return float(np.mean(nn.predict(model, dataset.features) == dataset.true))


def _batches(order: np.ndarray, batch_size: int):
    for p, start in enumerate(range(0, order.size, batch_size)):
        yield p, order[start:start + batch_size]


def warmup_epoch(model, dataset, optimizer, ledger, epoch, order, batch_size) -> float:
    """One pass of plain cross-entropy SGD; records every pre-update loss.

    Returns the mean recorded loss.
    """
    y = dataset.observed_onehot
    total = 0.0
    for p, idx in _batches(order, batch_size):
        cache = nn.forward_cache(model, dataset.features[idx])
        losses = nn.soft_cross_entropy(cache.probs, y[idx])
        if not np.all(np.isfinite(losses)):
            raise NumericError(f"non-finite loss at epoch {epoch} batch {p}")
        dlogits = nn.ce_logit_grad(cache.probs, y[idx]) / idx.size
        grads, _ = nn.backprop(model, cache, dlogits)
        nn.sgd_step(model, optimizer, grads)
        ledger.record(epoch, p, idx, losses)
        total += losses.sum()
    return total / order.size


@dataclass
class DltEpochResult:
    train_loss: float
    q: float
    tau_mean: float
    selected_clean: np.ndarray  # bool per sample id
    n_empty_clean: int = 0


def dlt_epoch(model, dataset, optimizer, ledger, policy: ThresholdPolicy, weights: ssl.SslWeights,
              t: int, order, batch_size, rng, aug_strength) -> DltEpochResult:
    """One epoch of threshold-split semi-supervised training."""
    y = dataset.observed_onehot
    q = ledger_mod.selection_proportion(policy, t)
    if policy.mode == "last-epoch":
        epoch_tau = ledger_mod.threshold_last_epoch(ledger, t, q)
    selected = np.zeros(len(dataset), dtype=bool)
    taus, total, n_empty = [], 0.0, 0
    for p, idx in _batches(order, batch_size):
        x = dataset.features[idx]
        losses = nn.soft_cross_entropy(nn.forward(model, x), y[idx])
        if not np.all(np.isfinite(losses)):
            raise NumericError(f"non-finite loss at epoch {t} batch {p}")
        if policy.mode == "last-epoch":
            tau = epoch_tau
        else:
            tau = ledger_mod.threshold_slide_window(ledger, q, policy.s)
        batch = ssl.prepare_dlt_batch(model, x, y[idx], losses, tau, weights, rng, aug_strength)
        if batch.split.clean_ids.size == 0:
            n_empty += 1
            log.warning("epoch %d batch %d: no sample under the loss threshold; skipping L_clean", t, p)
        _, grads = ssl.dlt_objective(model, batch, weights)
        nn.sgd_step(model, optimizer, grads)
        ledger.record(t, p, idx, losses)
        selected[idx[batch.split.clean_ids]] = True
        taus.append(tau)
        total += losses.sum()
    return DltEpochResult(total / order.size, q, float(np.mean(taus)), selected, n_empty)


def selection_counts(dataset: data.Dataset, selected: np.ndarray) -> dict:
    clean = ~dataset.is_noisy
    tp = int(np.sum(selected & clean))
    fp = int(np.sum(selected & ~clean))
    fn = int(np.sum(~selected & clean))
    tn = int(np.sum(~selected & ~clean))
    return {
        "selection_precision": tp / (tp + fp) if tp + fp else 0.0,
        "selection_recall": tp / (tp + fn) if tp + fn else 0.0,
        "selected_clean_true_clean": tp,
        "selected_clean_true_noisy": fp,
        "selected_noisy_true_clean": fn,
        "selected_noisy_true_noisy": tn,
        "hard_selected_clean": int(np.sum(selected & dataset.group_mask("hard"))),
    }


# --- datasets --------------------------------------------------------------

def parse_class_map(spec: str, n_classes: int) -> dict[int, int]:
    spec = spec.strip()
    if spec == "cyclic":
        return data.cyclic_class_map(n_classes)
    try:
        pairs = [item.split(":") for item in spec.split(",") if item.strip()]
        return {int(a): int(b) for a, b in pairs}
    except ValueError as exc:
        raise ConfigError(f"bad class map {spec!r}; use 'cyclic' or 'src:dst,...'") from exc


def apply_noise(cfg: TrainConfig, ds: data.Dataset) -> data.Dataset:
    kind, rate = cfg.noise.kind, cfg.noise.rate
    if kind == "none" or rate == 0:
        return ds
    if kind == "symmetric":
        return data.inject_symmetric_noise(ds, rate, cfg.noise_seed)
    return data.inject_asymmetric_noise(ds, rate, parse_class_map(cfg.noise.class_map, ds.n_classes), cfg.noise_seed)


def build_datasets(cfg: TrainConfig) -> tuple[data.Dataset, data.Dataset]:
    """Noisy training set and clean test set.

    Generated: the test set shares cluster centres with the training set but
    is drawn from an independent seed, ``test_fraction * N`` samples.
    From file: the file is taken as-is (no extra noise); without a test file
    the last ``test_fraction`` of rows are held out.
    """
    d = cfg.data
    if d.path:
        full = data.load_dataset(d.path)
        if d.test_path:
            return full, data.load_dataset(d.test_path)
        n_test = max(1, int(round(d.test_fraction * len(full))))
        return full.subset(np.arange(len(full) - n_test)), full.subset(np.arange(len(full) - n_test, len(full)))
    seed = cfg.data_seed
    centers = data.make_blob_centers(d.n_classes, d.dim, d.center_spread, seed)
    train_ds = data.generate_blobs(d.n_per_class, d.n_classes, d.dim, d.center_spread, d.cluster_std,
                                   seed, centers=centers)
    n_test_per_class = max(1, int(round(d.test_fraction * d.n_per_class)))
    test_ds = data.generate_blobs(n_test_per_class, d.n_classes, d.dim, d.center_spread, d.cluster_std,
                                  seed, centers=centers, sample_seed=seed + 7919)
    return apply_noise(cfg, train_ds), test_ds


# --- full runs -------------------------------------------------------------

@dataclass
class RunResult:
    model: nn.MlpModel
    metrics: list[EpochMetrics]
    ledger: LossLedger
    train_set: data.Dataset
    test_set: data.Dataset
    w: float | None = None
    estimation: estimator.EstimationResult | None = None
    last_selection: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([m.test_accuracy for m in self.metrics])

    def summary(self) -> dict:
        acc = self.accuracies
        out = {
            "final_accuracy": float(acc[-1]),
            "best_accuracy": float(acc.max()),
            "best_epoch": int(np.argmax(acc)) + 1,
            "epochs": len(acc),
            "noise_rate_used": self.w,
            "realized_noise_fraction": self.train_set.noise_fraction,
        }
        if self.estimation is not None:
            out["estimated_rate"] = self.estimation.rate
        return out


def _lr_at(cfg: TrainConfig, t: int) -> float:
    o = cfg.optim
    return o.lr * (o.lr_drop_factor if t > o.lr_drop_epoch else 1.0)


def resolve_noise_rate(cfg: TrainConfig, train_set, test_set):
    """Noise rate fed to the selection schedule, plus the estimate if one ran."""
    src = cfg.run.rate_source
    if src == "manual":
        return cfg.policy.w, None
    if src == "true":
        if cfg.noise.kind == "none":
            return 0.0, None
        # appended hard samples are correctly labelled and dilute the nominal rate
        return cfg.noise.rate * float(np.mean(~train_set.group_mask("hard"))), None
    est, _ = estimate_noise(cfg, train_set, test_set)
    return min(max(est.rate, 0.0), 0.99), est


def train(cfg: TrainConfig, train_set=None, test_set=None, mode: str | None = None) -> RunResult:
    """Run ``cfg.run.t_total`` epochs: warm-up then DLT, or plain CE throughout."""
    cfg.validate()
    mode = mode or cfg.run.mode
    if train_set is None:
        train_set, test_set = build_datasets(cfg)
    w, est = (None, None)
    if mode != "plain-ce":
        w, est = resolve_noise_rate(cfg, train_set, test_set)
        policy = ThresholdPolicy(mode.removeprefix("dlt-"), cfg.policy.s, w, cfg.policy.t_warm, cfg.policy.t_grad)
    weights = ssl.SslWeights(cfg.ssl.lambda_n, cfg.ssl.lambda_r, cfg.ssl.T, cfg.ssl.K,
                             cfg.ssl.mix_fraction, cfg.ssl.beta_alpha)

    init_ss, order_ss, ssl_ss = np.random.SeedSequence([cfg.run.seed, 0xD17]).spawn(3)
    sizes = [train_set.dim, *cfg.run.hidden_sizes, train_set.n_classes]
    model = nn.MlpModel.init(sizes, seed=int(init_ss.generate_state(1)[0]))
    opt = nn.SgdState.for_model(model, cfg.optim.lr, cfg.optim.momentum, cfg.optim.weight_decay)
    order_rng = np.random.default_rng(order_ss)
    ssl_rng = np.random.default_rng(ssl_ss)
    book = LossLedger(len(train_set), cfg.optim.batch_size, window_capacity=cfg.policy.s)

    metrics, selection = [], None
    for t in range(1, cfg.run.t_total + 1):
        opt.learning_rate = _lr_at(cfg, t)
        order = order_rng.permutation(len(train_set))
        if mode == "plain-ce" or t <= cfg.policy.t_warm:
            loss = warmup_epoch(model, train_set, opt, book, t, order, cfg.optim.batch_size)
            phase = "plain" if mode == "plain-ce" else "warmup"
            m = EpochMetrics(t, phase, opt.learning_rate, float(loss), evaluate(model, test_set))
        else:
            res = dlt_epoch(model, train_set, opt, book, policy, weights, t, order,
                            cfg.optim.batch_size, ssl_rng, cfg.aug_strength)
            selection = res.selected_clean
            m = EpochMetrics(t, "dlt", opt.learning_rate, float(res.train_loss), evaluate(model, test_set),
                             q=res.q, tau_mean=res.tau_mean, **selection_counts(train_set, selection))
        metrics.append(m)
        log.info("epoch %d %s loss=%.4f acc=%.4f", t, m.phase, m.train_loss, m.test_accuracy)
    return RunResult(model, metrics, book, train_set, test_set, w, est, selection)


def estimate_noise(cfg: TrainConfig, train_set=None, test_set=None):
    """Plain-CE pass, then the mixture estimate on early-minus-final losses."""
    run = train(cfg, train_set, test_set, mode="plain-ce")
    diffs = ledger_mod.loss_difference(run.ledger, cfg.early_epoch, cfg.run.t_total)
    est = estimator.estimate_noise_rate(diffs, theta=cfg.estimate.theta)
    run.estimation = est
    return est, run


# --- hard samples ----------------------------------------------------------

GROUPS = ("clean", "noisy", "hard")


def group_loss_trajectories(book: LossLedger, dataset: data.Dataset) -> dict[str, np.ndarray]:
    """Mean recorded loss per provenance group for every epoch (NaN if empty)."""
    out = {}
    for g in GROUPS:
        mask = dataset.group_mask(g)
        out[g] = np.array([book.epoch_losses(t)[mask].mean() if mask.any() else np.nan
                           for t in book.epochs])
    return out


@dataclass
class HardStudyReport:
    kind: str
    ratio: float
    n_hard: int
    trajectories: dict
    dist_to_clean: float
    dist_to_noisy: float
    hard_clean_fraction: float | None
    dlt_mode: str

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "ratio": self.ratio, "n_hard": self.n_hard,
            "dist_to_clean": self.dist_to_clean, "dist_to_noisy": self.dist_to_noisy,
            "hard_clean_fraction": self.hard_clean_fraction, "dlt_mode": self.dlt_mode,
            "trajectories": {g: [None if np.isnan(v) else float(v) for v in tr]
                             for g, tr in self.trajectories.items()},
        }


def run_hard_sample_study(cfg: TrainConfig, hard_kind: str | None = None, ratio: float | None = None,
                          attack_model: nn.MlpModel | None = None) -> HardStudyReport:
    """Append hard samples, then compare loss trajectories and DLT routing.

    Trajectories come from a plain-CE run; routing is read off the final
    epoch of a DLT run (``cfg.run.mode``, or last-epoch if that is plain-ce)
    on the same augmented training set.
    """
    hard_kind = hard_kind or cfg.hard.kind
    ratio = cfg.hard.ratio if ratio is None else ratio
    if hard_kind == "fgsm" and attack_model is None:
        raise StateError("fgsm hard samples need a pre-trained attack model")
    train_set, test_set = build_datasets(cfg)
    train_set = data.add_hard_samples(
        train_set, hard_kind, subset_fraction=cfg.hard.subset_fraction, ratio=ratio,
        seed=cfg.data_seed, erase_fraction=cfg.hard.erase_fraction, epsilon=cfg.hard.epsilon,
        attack_model=attack_model)
    n_hard = int(train_set.group_mask("hard").sum())

    plain = train(cfg, train_set, test_set, mode="plain-ce")
    traj = group_loss_trajectories(plain.ledger, train_set)
    d_clean = d_noisy = float("nan")
    if n_hard:
        d_clean = float(np.linalg.norm(traj["hard"] - traj["clean"]))
        d_noisy = float(np.linalg.norm(traj["hard"] - traj["noisy"]))

    dlt_mode = cfg.run.mode if cfg.run.mode != "plain-ce" else "dlt-last-epoch"
    frac = None
    if n_hard:
        dlt = train(cfg, train_set, test_set, mode=dlt_mode)
        frac = float(np.mean(dlt.last_selection[train_set.group_mask("hard")]))
    return HardStudyReport(hard_kind, ratio, n_hard, traj, d_clean, d_noisy, frac, dlt_mode)


def pretrain_attack_model(cfg: TrainConfig, epochs: int = 20) -> nn.MlpModel:
    """Plain-CE model trained on the *clean* labels, used as the FGSM target."""
    train_set, test_set = build_datasets(cfg)
    clean = data.Dataset(train_set.features, train_set.true, train_set.true,
                         np.zeros(len(train_set), dtype=np.int8), train_set.n_classes)
    short = replace(cfg, run=replace(cfg.run, t_total=epochs), estimate=replace(cfg.estimate, early_epoch=0))
    return train(short, clean, test_set, mode="plain-ce").model
