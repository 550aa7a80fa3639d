"""Run configuration and its ``key = value`` text format.

Example::

    [run]
    mode = dlt-slide-window
    t_total = 120
    seed = 3

    [noise]
    kind = symmetric
    rate = 0.4

Every dataclass field below is addressable as ``[section] key``; unknown
sections or keys are rejected.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
import typing
from dataclasses import dataclass, field

from .errors import ConfigError

MODES = ("dlt-last-epoch", "dlt-slide-window", "plain-ce")
RATE_SOURCES = ("true", "estimated", "manual")
NOISE_KINDS = ("none", "symmetric", "asymmetric")
SEED_ENV = "DLTLAB_SEED"


@dataclass
class DataConfig:
    n_per_class: int = 400
    n_classes: int = 10
    dim: int = 16
    center_spread: float = 1.5
    cluster_std: float = 1.0
    seed: int | None = None  # None: follow run.seed
    test_fraction: float = 0.2
    path: str = ""  # load the training set from a file instead of generating it
    test_path: str = ""


@dataclass
class NoiseConfig:
    kind: str = "symmetric"
    rate: float = 0.4
    class_map: str = "cyclic"  # or explicit pairs "0:1,1:0,2:3"
    seed: int | None = None


@dataclass
class PolicyConfig:
    s: int = 16
    t_warm: int = 10
    t_grad: int = 40
    w: float = 0.0  # used when run.rate_source = manual


@dataclass
class SslConfig:
    lambda_n: float = 25.0
    lambda_r: float = 1.0
    T: float = 0.5
    K: int = 2
    mix_fraction: float = 0.5
    beta_alpha: float = 4.0
    aug_strength: float | None = None  # None: 0.1 * cluster_std


@dataclass
class OptimConfig:
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_drop_epoch: int = 60
    lr_drop_factor: float = 0.1
    batch_size: int = 128


@dataclass
class EstimateConfig:
    early_epoch: int | None = None  # None: 10% of t_total
    theta: float = 0.5


@dataclass
class HardConfig:
    kind: str = "erasure"
    ratio: float = 1.0
    subset_fraction: float = 0.1
    erase_fraction: float = 0.25
    epsilon: float = 0.5


@dataclass
class RunConfig:
    mode: str = "dlt-last-epoch"
    t_total: int = 120
    seed: int = 0
    hidden: str = "256,256"
    rate_source: str = "true"

    @property
    def hidden_sizes(self) -> list[int]:
        return [int(h) for h in self.hidden.split(",") if h.strip()]


@dataclass
class TrainConfig:
    run: RunConfig = field(default_factory=RunConfig)
    data: DataConfig = field(default_factory=DataConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    ssl: SslConfig = field(default_factory=SslConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    estimate: EstimateConfig = field(default_factory=EstimateConfig)
    hard: HardConfig = field(default_factory=HardConfig)

    @property
    def data_seed(self) -> int:
        return self.run.seed if self.data.seed is None else self.data.seed

    @property
    def noise_seed(self) -> int:
        return self.run.seed if self.noise.seed is None else self.noise.seed

    @property
    def aug_strength(self) -> float:
        s = self.ssl.aug_strength
        return 0.1 * self.data.cluster_std if s is None else s

    @property
    def early_epoch(self) -> int:
        e = self.estimate.early_epoch
        return max(1, round(0.1 * self.run.t_total)) if e is None else e

    def validate(self) -> "TrainConfig":
        r = self.run
        if r.mode not in MODES:
            raise ConfigError(f"run.mode must be one of {MODES}, got {r.mode!r}")
        if r.rate_source not in RATE_SOURCES:
            raise ConfigError(f"run.rate_source must be one of {RATE_SOURCES}")
        if r.t_total < 1:
            raise ConfigError("run.t_total must be >= 1")
        if not r.hidden_sizes and r.hidden.strip():
            raise ConfigError("run.hidden must be a comma-separated list of widths")
        if any(h < 1 for h in r.hidden_sizes):
            raise ConfigError("hidden widths must be positive")
        if r.mode != "plain-ce" and not self.policy.t_warm < r.t_total:
            raise ConfigError("policy.t_warm must be smaller than run.t_total")
        if min(self.policy.s, self.policy.t_warm, self.policy.t_grad) < 1:
            raise ConfigError("policy.s, policy.t_warm and policy.t_grad must be >= 1")
        if not 0 <= self.policy.w < 1:
            raise ConfigError("policy.w must be in [0, 1)")
        if self.noise.kind not in NOISE_KINDS:
            raise ConfigError(f"noise.kind must be one of {NOISE_KINDS}")
        if not 0 <= self.noise.rate < 1:
            raise ConfigError("noise.rate must be in [0, 1)")
        if self.optim.batch_size < 1 or self.optim.lr <= 0:
            raise ConfigError("optim.batch_size and optim.lr must be positive")
        if not 0 < self.data.test_fraction < 1:
            raise ConfigError("data.test_fraction must be in (0, 1)")
        if not 0 <= self.estimate.theta <= 1:
            raise ConfigError("estimate.theta must be in [0, 1]")
        if self.hard.kind not in ("erasure", "fgsm"):
            raise ConfigError("hard.kind must be erasure or fgsm")
        if self.early_epoch >= r.t_total:
            raise ConfigError("estimate.early_epoch must come before the final epoch")
        return self


def _coerce(raw: str, tp, where: str):
    options = typing.get_args(tp) or (tp,)
    raw = raw.strip()
    if type(None) in options and raw.lower() in ("", "none", "auto"):
        return None
    for option in options:
        if option is type(None):
            continue
        try:
            if option is bool:
                return {"true": True, "false": False}[raw.lower()]
            return option(raw)
        except (ValueError, KeyError):
            continue
    raise ConfigError(f"{where}: cannot parse {raw!r} as {tp}")


def _section_types(section_cls) -> dict:
    hints = typing.get_type_hints(section_cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(section_cls)}


def apply_overrides(cfg: TrainConfig, items: dict[str, dict[str, str]]) -> TrainConfig:
    sections = typing.get_type_hints(TrainConfig)
    for section, values in items.items():
        if section not in sections:
            raise ConfigError(f"unknown config section [{section}]")
        target = getattr(cfg, section)
        types = _section_types(sections[section])
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key [{section}] {key}")
            setattr(target, key, _coerce(raw, types[key], f"[{section}] {key}"))
    return cfg


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__",
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str  # keys are case sensitive (e.g. ssl.T)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    items = {s: dict(parser.items(s)) for s in parser.sections()}
    return apply_overrides(base or TrainConfig(), items).validate()


def load_config(path=None, seed: int | None = None) -> TrainConfig:
    """Read a config file (or defaults); seed precedence: argument > env > file."""
    cfg = TrainConfig()
    if path:
        with open(path) as fh:
            cfg = parse_config(fh.read())
    env = os.environ.get(SEED_ENV)
    if seed is not None:
        cfg.run.seed = int(seed)
    elif env:
        try:
            cfg.run.seed = int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from exc
    return cfg.validate()


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for section in dataclasses.fields(TrainConfig):
        lines.append(f"[{section.name}]")
        for f in dataclasses.fields(getattr(cfg, section.name)):
            value = getattr(getattr(cfg, section.name), f.name)
            lines.append(f"{f.name} = {'none' if value is None else value}")
        lines.append("")
    return "\n".join(lines)
