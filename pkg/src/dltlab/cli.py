"""Command-line entry point: ``dltlab <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import data, gradcheck, nn, trainer
from .config import apply_overrides, dump_config, load_config
from .errors import ConfigError, DltError


def _overrides(pairs) -> dict:
    items: dict[str, dict[str, str]] = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {pair!r}")
        items.setdefault(section.strip(), {})[name.strip()] = value
    return items


def _config(args):
    cfg = load_config(args.config, args.seed)
    apply_overrides(cfg, _overrides(args.set))
    if args.seed is not None:
        cfg.run.seed = args.seed
    return cfg.validate()


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def cmd_train(args) -> int:
    cfg = _config(args)
    run = trainer.train(cfg)
    if args.metrics:
        trainer.write_metrics_csv(run.metrics, args.metrics)
    if args.ledger:
        run.ledger.to_csv(args.ledger)
    if args.model:
        nn.save_model(run.model, args.model)
    _write_json(run.summary(), args.summary)
    return 0


def cmd_estimate(args) -> int:
    cfg = _config(args)
    est, run = trainer.estimate_noise(cfg)
    if args.json:
        _write_json({**est.to_dict(), "realized_noise_fraction": run.train_set.noise_fraction}, args.json)
    print(f"{est.rate:.6f}")
    return 0


def cmd_inject(args) -> int:
    if args.input:
        ds = data.load_dataset(args.input)
    else:
        ds = data.generate_blobs(args.n_per_class, args.classes, args.dim, args.center_spread,
                                 args.cluster_std, args.seed)
    if args.kind == "symmetric":
        ds = data.inject_symmetric_noise(ds, args.rate, args.seed)
    else:
        ds = data.inject_asymmetric_noise(ds, args.rate, trainer.parse_class_map(args.class_map, ds.n_classes),
                                          args.seed)
    data.save_dataset(ds, args.output)
    print(f"wrote {len(ds)} samples, observed != true fraction {ds.noise_fraction:.4f}")
    return 0


def cmd_hard(args) -> int:
    cfg = _config(args)
    kind = args.kind or cfg.hard.kind
    attack = None
    if args.attack_model:
        attack = nn.load_model(args.attack_model)
    elif args.pretrain_attack:
        attack = trainer.pretrain_attack_model(cfg)
    report = trainer.run_hard_sample_study(cfg, kind, args.ratio, attack)
    _write_json(report.to_dict(), args.json)
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.models, args.seed, args.eps)
    worst = 0.0
    for r in results:
        ok = r.passed(args.tol)
        worst = max(worst, r.param_error, r.input_error)
        if args.verbose or not ok:
            print(f"seed={r.seed} sizes={r.sizes} {r.loss_kind} param={r.param_error:.2e} "
                  f"input={r.input_error:.2e} {'ok' if ok else 'FAIL'}")
    failed = sum(not r.passed(args.tol) for r in results)
    print(f"{len(results) - failed}/{len(results)} models within {args.tol:g} (worst {worst:.2e})")
    return 1 if failed else 0


def cmd_dump_losses(args) -> int:
    cfg = _config(args)
    run = trainer.train(cfg)
    run.ledger.to_csv(args.output)
    return 0


def cmd_show_config(args) -> int:
    print(dump_config(_config(args)), end="")
    return 0


def _add_config_args(p):
    p.add_argument("--config", help="key = value config file with [sections]")
    p.add_argument("--seed", type=int, help="run seed (overrides DLTLAB_SEED and the file)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config field")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dltlab", description="Dynamic loss thresholding lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training config")
    _add_config_args(p)
    p.add_argument("--metrics", help="per-epoch metrics CSV")
    p.add_argument("--summary", help="JSON summary (stdout if omitted)")
    p.add_argument("--ledger", help="per-sample loss CSV")
    p.add_argument("--model", help="final model checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("estimate-noise", help="plain-CE pass + mixture noise-rate estimate")
    _add_config_args(p)
    p.add_argument("--json", help="write the estimation result here")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("inject-noise", help="write a noisy copy of a dataset")
    p.add_argument("--input", help="dataset file (.csv or .npz); blobs are generated if omitted")
    p.add_argument("--output", required=True)
    p.add_argument("--kind", choices=["symmetric", "asymmetric"], default="symmetric")
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--class-map", default="cyclic")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-per-class", type=int, default=400)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--center-spread", type=float, default=1.5)
    p.add_argument("--cluster-std", type=float, default=1.0)
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("hard-study", help="loss trajectories and routing of hard samples")
    _add_config_args(p)
    p.add_argument("--kind", choices=["erasure", "fgsm"])
    p.add_argument("--ratio", type=float)
    p.add_argument("--attack-model", help="checkpoint to attack for fgsm samples")
    p.add_argument("--pretrain-attack", action="store_true", help="train a clean-label model to attack")
    p.add_argument("--json", help="write the report here (stdout if omitted)")
    p.set_defaults(func=cmd_hard)

    p = sub.add_parser("grad-check", help="finite-difference check of the analytic gradients")
    p.add_argument("--models", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-losses", help="train and write the per-sample loss ledger")
    _add_config_args(p)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_dump_losses)

    p = sub.add_parser("show-config", help="print the resolved config")
    _add_config_args(p)
    p.set_defaults(func=cmd_show_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DltError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
