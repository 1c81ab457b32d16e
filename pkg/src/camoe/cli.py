"""Command-line entry point.

Exit status: 0 on success, 2 for usage or configuration errors, 1 when a run fails.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .datagen import save_csv

log = logging.getLogger("camoe")


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, metavar="PATH",
                   help="experiment config file (INI sections [experiment], [data], [model], "
                        "[training], [arm:NAME], [table:NAME], [simulation])")
    p.add_argument("--seed", type=int, metavar="INT",
                   help="run only this seed instead of the config's seed list")
    p.add_argument("--out", metavar="DIR",
                   help="output directory, overriding [experiment] outputs")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _arm_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--arm", action="append", metavar="NAME",
                   help="restrict to this arm (repeatable); default is every arm")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="camoe", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("generate", help="write the seeded train/validation/test splits as CSV")
    _common(p)

    p = sub.add_parser("train", help="train arms and write checkpoints and training logs")
    _common(p)
    _arm_flag(p)

    p = sub.add_parser("calibrate", help="fit per-task temperatures on the validation split")
    _common(p)
    _arm_flag(p)

    p = sub.add_parser("evaluate", help="per-slot AUC-PR/ECE reports and reliability data on the test split")
    _common(p)
    _arm_flag(p)

    p = sub.add_parser("simulate", help="auction simulation with trained arms, oracle and constant scorers")
    _common(p)

    p = sub.add_parser("ablate", help="full matrix: train, calibrate, evaluate, tables, Pareto, simulation")
    _common(p)

    p = sub.add_parser("pareto", help="Pareto report from a directory of per-arm reports")
    p.add_argument("--reports", required=True, metavar="DIR",
                   help="directory holding <arm>/seed<k>/report.json files")
    p.add_argument("--baseline", metavar="NAME",
                   help="baseline arm; default is the one recorded in DIR/experiment.json")
    p.add_argument("--axes", nargs="+", metavar="SLOT",
                   help="slots used as objectives (default: recorded axes or StreamAudio StreamVideo)")
    _common(p, config_required=False)
    return parser


def _selected_arms(cfg: harness.ExperimentConfig, names: list[str] | None):
    return [cfg.arm(n) for n in names] if names else list(cfg.arms)


def _cmd_generate(cfg, args) -> int:
    for seed in cfg.seeds:
        splits = harness.make_splits(cfg, seed)
        out = Path(cfg.outputs) / "data" / f"seed{seed}"
        out.mkdir(parents=True, exist_ok=True)
        for name in ("train", "validation", "test"):
            save_csv(getattr(splits, name), out / f"{name}.csv")
        print(f"seed {seed}: {len(splits.train)}/{len(splits.validation)}/{len(splits.test)} rows -> {out}")
    return 0


def _per_arm(cfg, args, step) -> int:
    arms = _selected_arms(cfg, args.arm)
    for seed in cfg.seeds:
        splits = harness.make_splits(cfg, seed)
        for arm in arms:
            step(cfg, arm, seed, splits)
            print(f"{args.command} {arm.name} seed {seed} -> {harness.arm_dir(cfg, arm.name, seed)}")
    return 0


def _cmd_train(cfg, args) -> int:
    return _per_arm(cfg, args, harness.train_arm)


def _cmd_calibrate(cfg, args) -> int:
    return _per_arm(cfg, args, harness.calibrate_arm)


def _cmd_evaluate(cfg, args) -> int:
    return _per_arm(cfg, args, harness.evaluate_arm)


def _cmd_simulate(cfg, args) -> int:
    if cfg.simulation is None:
        raise harness.ConfigError("config has no [simulation] section")
    for seed in cfg.seeds:
        models = {name: harness.load_arm_model(harness.arm_dir(cfg, name, seed)) for name in cfg.simulation.arms}
        splits = harness.make_splits(cfg, seed) if cfg.simulation.constant else None
        harness.simulate_seed(cfg, seed, models, splits)
        print(f"simulate seed {seed} -> {Path(cfg.outputs) / 'simulation' / f'seed{seed}'}")
    return 0


def _cmd_ablate(cfg, args) -> int:
    result = harness.run(cfg)
    for name in result.tables:
        print(f"table {name} -> {Path(cfg.outputs) / (name + '.csv')}")
    if result.pareto is not None:
        print(f"pareto front: {', '.join(result.pareto['front'])}")
    for f in result.failures:
        print(f"FAILED {f['arm']} seed {f['seed']}: {f['error']}", file=sys.stderr)
    return 0 if result.ok else 1


def _cmd_pareto(args) -> int:
    root = Path(args.reports)
    if not root.is_dir():
        raise harness.ConfigError(f"reports directory {root} does not exist")
    recorded = {}
    meta = root / "experiment.json"
    if meta.exists():
        recorded = json.loads(meta.read_text())
    baseline = args.baseline or recorded.get("baseline")
    if not baseline:
        raise harness.ConfigError("no baseline arm: pass --baseline")
    axes = args.axes or recorded.get("pareto_axes") or ["StreamAudio", "StreamVideo"]
    reports = harness.read_reports(root)
    if baseline not in reports:
        raise harness.ConfigError(f"baseline {baseline!r} has no reports under {root}")
    payload = harness.pareto_report(reports, baseline, axes)
    out = Path(args.out) if args.out else root / "pareto.json"
    if out.is_dir():
        out = out / "pareto.json"
    harness.write_json(out, payload)
    print(f"front: {', '.join(payload['front'])} -> {out}")
    return 0


COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "calibrate": _cmd_calibrate,
    "evaluate": _cmd_evaluate,
    "simulate": _cmd_simulate,
    "ablate": _cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "pareto":
            return _cmd_pareto(args)
        cfg = harness.load_config(args.config).with_overrides(args.seed, args.out)
        return COMMANDS[args.command](cfg, args)
    except harness.ConfigError as exc:
        print(f"camoe: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any other failure is a failed run
        log.debug("run failed", exc_info=True)
        print(f"camoe: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
