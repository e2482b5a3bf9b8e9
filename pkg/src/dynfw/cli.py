"""Command-line entry point: ``dynfw {train,eval,compare,gradcheck,quickstart}``."""
from __future__ import annotations

import argparse
import logging
import sys
import traceback
from pathlib import Path

from .errors import ConfigError, DeltaError, ShapeError, StateError, UsageError
from .harness.config import ExperimentConfig, load_config, quickstart_config
from .harness.experiment import compare_baseline, run_eval, run_experiment, run_gradcheck
from .harness.metrics import MetricsRecord

EXPECTED = (ConfigError, UsageError, ShapeError, StateError, DeltaError, FileNotFoundError)


def _module_tag(exc: BaseException) -> str:
    """Name of the innermost package module the exception passed through."""
    tag = "cli"
    for frame in traceback.extract_tb(exc.__traceback__):
        parts = Path(frame.filename).with_suffix("").parts
        if "dynfw" in parts:
            tag = ".".join(parts[len(parts) - parts[::-1].index("dynfw"):]) or tag
    return tag


def _resolve(args: argparse.Namespace) -> ExperimentConfig:
    if args.command == "quickstart":
        if args.config:
            raise UsageError("quickstart uses the bundled scenario; use 'train --config' instead")
        cfg = quickstart_config()
    else:
        cfg = load_config(args.config)
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.out is not None:
        cfg.run.output_dir = args.out
    cfg.validate()
    return cfg


def _summary(label: str, m: MetricsRecord) -> str:
    return (f"{label}: flows={m.flows} accuracy={m.accuracy:.4f} fpr={m.fpr:.4f} "
            f"detection={m.detection_rate:.4f} reward={m.cumulative_reward:.2f} "
            f"median_latency_ns={m.latency_median_ns:.0f}")


def _run(args: argparse.Namespace) -> int:
    if args.command == "gradcheck":
        seed = args.seed if args.seed is not None else 0
        if args.dry_run:
            print(f"gradcheck seed={seed} out={args.out or '-'}")
            return 0
        reports = run_gradcheck(seed, args.out)
        for name, rep in reports:
            print(f"{name}: max_rel_error={rep.max_rel_error:.3e} {'ok' if rep.passed else 'FAIL'}")
        return 0 if all(rep.passed for _, rep in reports) else 1

    cfg = _resolve(args)
    if args.dry_run:
        print(cfg.dump(), end="")
        print(f"# resolved agent schedule: {cfg.agent_config()}")
        return 0
    out = Path(cfg.run.output_dir)
    if args.command in ("train", "quickstart"):
        result = run_experiment(cfg, out)
        if result.train_metrics is not None:
            print(_summary("train", result.train_metrics))
        print(_summary("eval", result.eval_metrics))
    if args.command == "quickstart":
        for system, m in compare_baseline(cfg, out).items():
            print(_summary(system, m))
    elif args.command == "eval":
        print(_summary("eval", run_eval(cfg, out)))
    elif args.command == "compare":
        for system, m in compare_baseline(cfg, out).items():
            print(_summary(system, m))
    print(f"outputs written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynfw", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train detector and agent, evaluate, write metrics and checkpoints",
        "eval": "greedy evaluation replay from checkpoints in the output directory",
        "compare": "learned policy vs. static-threshold rule set",
        "gradcheck": "finite-difference gradient checks of every layer and model",
        "quickstart": "bundled synthetic scenario: train (5000 steps) then compare",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, default=None, help="YAML experiment file")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--out", type=str, default=None, help="override run.output_dir")
        p.add_argument("--dry-run", action="store_true",
                       help="print the resolved configuration and exit")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except EXPECTED as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"dynfw: error [{_module_tag(exc)}]: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
