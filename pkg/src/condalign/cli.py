"""Command line entry point: ``condalign {gen,train,eval,ablate,oracle,export}``.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import report, trainer
from .config import MODES, ConfigError, ExperimentConfig, parse_config
from .data import save_csv
from .networks import load_params
from .theory import run_oracle_suite

log = logging.getLogger("condalign")


def load_config(args) -> ExperimentConfig:
    text = ""
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError("", f"cannot read config {args.config}: {exc}") from None
    cfg = parse_config(text)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        changes["mode"] = args.mode
    return cfg.replace(**changes) if changes else cfg


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_gen(args) -> int:
    cfg = load_config(args)
    splits = report.build_datasets(cfg)
    out = report.fresh_dir(report.output_root(args.out), f"{cfg.name}-data-seed{cfg.seed}")
    for part in ("source", "target", "target_test", "source_test"):
        ds = getattr(splits, part)
        if ds is not None:
            save_csv(ds, out / f"{part}.csv")
    print(out)
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args)
    if cfg.mode == "ablation":
        return cmd_ablate(args)
    rep, _ = report.run_experiment(cfg, out=args.out)
    _print({"report_dir": rep.report_dir, "acc_class": rep.acc_class, "acc_joint": rep.acc_joint,
            "acc_class_test": rep.acc_class_test, "hdiv_after": rep.hdiv_after})
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args)
    params = load_params(args.params)
    splits = report.build_datasets(cfg)
    out = {}
    for part in ("target", "target_test"):
        ds = getattr(splits, part)
        out[part] = {w: trainer.evaluate(params, ds, w) for w in ("class_predictor", "joint_predictor")}
    hd = cfg.hdiv
    out["alignment"] = report.alignment_metrics(params, splits.source, splits.target, seed=cfg.seed,
                                                steps=hd.steps, width=hd.width, lr=hd.lr,
                                                max_samples=hd.max_samples)
    _print(out)
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    rows, path = report.run_ablations(cfg, out=args.out)
    for r in rows:
        print(f"{r['row']:<38s} acc_class={r['acc_class']:.4f} acc_joint={r['acc_joint']:.4f}")
    print(path)
    return 0


def cmd_oracle(args) -> int:
    seed = args.seed if args.seed is not None else 0
    records = run_oracle_suite(seed=seed, instances=args.instances)
    out = report.fresh_dir(report.output_root(args.out), f"oracles-seed{seed}")
    path = out / "oracles.jsonl"
    path.write_text("".join(r.to_json() + "\n" for r in records))
    for r in records:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.check} value={r.value:.3g} tol={r.tolerance:g}")
    print(path)
    return 0 if all(r.passed for r in records) else 2


def cmd_export(args) -> int:
    cfg = load_config(args)
    params = load_params(args.params)
    splits = report.build_datasets(cfg)
    out = report.fresh_dir(report.output_root(args.out), f"{cfg.name}-features")
    feats, pca = report.export_features(params, [splits.source, splits.target], out / "features.csv")
    print(feats)
    print(pca)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="condalign", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, mode=False):
        sp.add_argument("--config", help="JSON experiment config (defaults if omitted)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output root (default $CONDALIGN_OUT or ./runs)")
        if mode:
            sp.add_argument("--mode", choices=MODES)
        return sp

    common(sub.add_parser("gen", help="write source/target datasets as CSV")).set_defaults(func=cmd_gen)
    common(sub.add_parser("train", help="train one configuration"), mode=True).set_defaults(func=cmd_train)
    sp = common(sub.add_parser("eval", help="evaluate saved parameters"))
    sp.add_argument("--params", required=True)
    sp.set_defaults(func=cmd_eval)
    common(sub.add_parser("ablate", help="run the ablation table")).set_defaults(func=cmd_ablate)
    sp = common(sub.add_parser("oracle", help="run the theory oracle suite"))
    sp.add_argument("--instances", type=int, default=5)
    sp.set_defaults(func=cmd_oracle)
    sp = common(sub.add_parser("export", help="export encoder features and a 2-D PCA"))
    sp.add_argument("--params", required=True)
    sp.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
