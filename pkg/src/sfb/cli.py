"""Command-line entry point: ``sfb <command> --config FILE [--seed N] [--out DIR]``.

Exit codes: 0 on success, 2 for configuration errors, 1 when a pipeline
stage fails (the stage is named on stderr).
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .adaptation import AdaptedClassifier
from .errors import ConfigError
from .experiment import (
    Adapted,
    StageError,
    _stage,
    adapt_stage,
    evaluate_stage,
    generate,
    load_config,
    load_trained,
    run,
    save_splits,
    save_trained,
    sweep,
    train_stage,
    write_json,
    write_per_seed,
)
from .report import aggregate, render_table, report, write_report, write_results


def _out_dir(args, cfg) -> Path:
    return Path(args.out) if args.out else Path(cfg.output) / cfg.name


def _seeds(args, cfg):
    return [args.seed] if args.seed is not None else cfg.seeds


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def cmd_generate(args, cfg):
    out = _out_dir(args, cfg)
    for seed in _seeds(args, cfg):
        splits = _stage("generate", seed, generate, cfg, seed)
        save_splits(splits, out / "data" / f"seed{seed}")
        _log(f"seed {seed}: wrote {out / 'data' / f'seed{seed}'}")


def cmd_train(args, cfg):
    out = _out_dir(args, cfg)
    for seed in _seeds(args, cfg):
        splits = _stage("generate", seed, generate, cfg, seed)
        trained = _stage("train", seed, train_stage, cfg, splits, seed)
        save_trained(trained, out / "models" / f"seed{seed}")
        _log(f"seed {seed}: selected {trained.selected}")


def _load(out, seed):
    d = out / "models" / f"seed{seed}"
    if not (d / "sfb.json").exists():
        raise FileNotFoundError(f"{d} has no trained model; run 'sfb train' first")
    return load_trained(d)


def cmd_adapt(args, cfg):
    out = _out_dir(args, cfg)
    for seed in _seeds(args, cfg):
        splits = _stage("generate", seed, generate, cfg, seed)
        trained = _stage("adapt", seed, _load, out, seed)
        adapted = _stage("adapt", seed, adapt_stage, cfg, trained.sfb, splits)
        d = out / "models" / f"seed{seed}"
        (d / "adapted.json").write_text(adapted.classifier.to_json())
        write_json(d / "adaptation.json", {"steps": adapted.steps, "step_scores": adapted.step_scores,
                                           "rounds": adapted.rounds, "fallback": adapted.fallback})
        _log(f"seed {seed}: adapted with {adapted.steps} learner steps")


def _load_adapted(out, seed, trained):
    d = out / "models" / f"seed{seed}"
    if not (d / "adapted.json").exists():
        raise FileNotFoundError(f"{d} has no adapted classifier; run 'sfb adapt' first")
    clf = AdaptedClassifier.from_json((d / "adapted.json").read_text(), trained.sfb.stable_proba)
    meta = json.loads((d / "adaptation.json").read_text())
    return Adapted(clf, meta["steps"], meta["step_scores"], meta["rounds"], meta["fallback"])


def cmd_evaluate(args, cfg):
    out = _out_dir(args, cfg)
    rows = []
    for seed in _seeds(args, cfg):
        splits = _stage("generate", seed, generate, cfg, seed)
        trained = _stage("evaluate", seed, _load, out, seed)
        adapted = _stage("evaluate", seed, _load_adapted, out, seed, trained)
        acc, diag = _stage("evaluate", seed, evaluate_stage, cfg, trained, adapted, splits, seed)
        write_json(out / "diagnostics" / f"seed{seed}.json", diag)
        rows += [{"seed": seed, "method": k, "dataset": cfg.dataset.tag, "accuracy": v} for k, v in acc.items()]
    write_per_seed(rows, out / "per_seed.csv")
    results = aggregate(rows)
    write_results(results, out / "results.csv")
    write_report(results, out / "report.txt")
    print(render_table(results), end="")


def cmd_run(args, cfg):
    out = _out_dir(args, cfg)
    start = time.process_time()

    def progress(seed, acc):
        _log(f"seed {seed}: " + ", ".join(f"{k} {100 * v:.1f}" for k, v in acc.items()))

    results = run(cfg, out, _seeds(args, cfg), progress)
    print(render_table(results), end="")
    _log(f"wrote {out} ({time.process_time() - start:.0f} s CPU)")


def cmd_sweep(args, cfg):
    out = _out_dir(args, cfg)
    matrix = sweep(cfg, out, _seeds(args, cfg), plot=args.plot)
    for method, row in matrix.items():
        print(method, " ".join(f"{100 * v:.1f}" for v in row.values()))


def cmd_report(args, cfg):
    out = Path(args.out) if args.out else (_out_dir(args, cfg) if cfg else Path("."))
    paths = args.files or [out / "per_seed.csv"]
    print(report(paths, out), end="")


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "adapt": cmd_adapt, "evaluate": cmd_evaluate,
            "run": cmd_run, "sweep": cmd_sweep, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfb", description="Stable feature boosting experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "report",
                       help="TOML experiment file, or the name of a bundled config (ac, cedd, cmnist)")
        p.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
        p.add_argument("--out", help="output directory (default: <output>/<name> from the config)")
        if name == "sweep":
            p.add_argument("--plot", action="store_true", help="also render sweep.png")
        if name == "report":
            p.add_argument("files", nargs="*", help="per-seed CSV files (default: <out>/per_seed.csv)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else None
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed", "must be non-negative")
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: stage '{args.command}' failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
