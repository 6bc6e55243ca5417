"""Command line entry point: hypoxcast <command> [--config PATH] [--seed N] [--out DIR]"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import ExperimentConfig
from .errors import DataValidationError, HypoxcastError
from .settings import settings
from .synthgen import generate, validate_cohort, write_cohort_bundle

logger = logging.getLogger("hypoxcast")

COMMANDS = (
    "gen-synth",
    "featurize",
    "train-lstm",
    "extract-hidden",
    "train-gbt",
    "run-methodology",
    "run-ablation",
    "run-lookback",
    "evaluate",
    "serve",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hypoxcast", description="Hybrid LSTM + GBT hypoxemia forecasting")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "serve":
            p.add_argument("--host", default="127.0.0.1")
            p.add_argument("--port", type=int, default=8000)
            continue
        p.add_argument("--config", help="key=value experiment config file")
        p.add_argument("--seed", type=int, help="master seed, overrides the config")
        p.add_argument("--out", help="output directory, overrides output_dir")
        if name in ("extract-hidden", "evaluate"):
            p.add_argument("--model", required=True, help="model container (.tbst)")
        if name == "train-gbt":
            p.add_argument("--model", help="LSTM container; trains the hybrid model when given")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {} if args.seed is None else {"seed": str(args.seed)}
    if args.config:
        return ExperimentConfig.load(args.config, overrides)
    return ExperimentConfig.from_text("", overrides)


def _summarize(run: pipeline.RunResult) -> None:
    for r in run.results:
        print(f"{r.model:<20} val {r.val_pr_auc:.5f}  test {r.test_pr_auc:.5f}")
    print(f"results: {run.out_dir / 'results.csv'}")


def dispatch(args: argparse.Namespace) -> None:
    if args.command == "serve":
        import uvicorn

        uvicorn.run("hypoxcast.main:app", host=args.host, port=args.port, log_level=settings.LOG_LEVEL.lower())
        return

    cfg = load_config(args)
    out = Path(args.out or cfg.output_dir)
    command = args.command

    if command == "gen-synth":
        cohort, truth = generate(cfg.synth)
        report = validate_cohort(cohort, cfg.synth, cfg.label)
        paths = write_cohort_bundle(out, cohort, truth, report)
        print(f"{len(cohort)} surgeries written to {paths['cohort']}")
        if not report.passed:
            print(f"failed checks: {', '.join(report.flags)}")
    elif command == "featurize":
        for part, path in pipeline.featurize(cfg, out).items():
            print(f"{part}: {path}")
    elif command == "train-lstm":
        trained = pipeline.train_lstm_model(cfg, out)
        print(f"{trained.path} (validation PR-AUC {trained.val_pr_auc:.5f})")
    elif command == "extract-hidden":
        for part, path in pipeline.extract_hidden_features(cfg, args.model, out).items():
            print(f"{part}: {path}")
    elif command == "train-gbt":
        trained = pipeline.train_gbt_model(cfg, args.model, out)
        print(f"{trained.path} (validation PR-AUC {trained.val_pr_auc:.5f})")
    elif command == "run-methodology":
        _summarize(pipeline.run_methodology(cfg, out))
    elif command == "run-ablation":
        _summarize(pipeline.run_ablation(cfg, out))
    elif command == "run-lookback":
        _summarize(pipeline.run_lookback_study(cfg, out))
    elif command == "evaluate":
        result = pipeline.evaluate_model(cfg, args.model, out)
        print(f"{result.model}: test PR-AUC {result.test_pr_auc:.5f}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=settings.LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        dispatch(args)
    except DataValidationError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 1
    except HypoxcastError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 2
    except Exception:
        logger.exception("Unexpected failure")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
