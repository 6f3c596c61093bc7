"""Command-line entry point: ``cvcqa <verb> [--config FILE] [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .attacks import KINDS
from .experiment import (ArtifactError, ConfigError, ExperimentConfig, attack_dataset, evaluate_run, gen_data,
                         load_vocab, muting_study, run_attacks, train_models, write_report)
from .training import TrainingDiverged

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

logger = logging.getLogger("cvcqa")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _kinds(text: str | None) -> list[str] | None:
    if text is None:
        return None
    kinds = [k.strip() for k in text.split(",") if k.strip()]
    if text.strip().lower() == "all":
        kinds = list(KINDS)
    bad = [k for k in kinds if k not in KINDS]
    if bad:
        raise UsageError(f"unknown attack(s) {bad}; expected one of {list(KINDS)} or 'all'")
    return kinds


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML experiment config")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", type=Path, help="run directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="cvcqa", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cvcqa {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic corpus")
    p = sub.add_parser("attack", parents=[common], help="write attacked copies of a dataset")
    p.add_argument("--attack", help="comma-separated kinds (adv1..adv4) or 'all'")
    p.add_argument("--dataset", type=Path, help="attack this JSONL file instead of the run's test_in")
    p.add_argument("--augment", help="also attack the training split with these kinds")
    p = sub.add_parser("train", parents=[common], help="train CT, the multi-branch model and the adaptor")
    p.add_argument("--augment", help="comma-separated attack kinds merged into the training set")
    p = sub.add_parser("eval", parents=[common], help="accuracy per dataset and method")
    p.add_argument("--method", help="comma-separated methods (CT, CVC_IV, CVC_MV_const, CVC_MV_adaptor)")
    p.add_argument("--attack", help="attacked sets to include (default: the config's list)")
    sub.add_parser("muting-study", parents=[common], help="CT accuracy with variables muted")
    sub.add_parser("report", parents=[common], help="collate runs into report.md")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=str(args.out))
    augment = _kinds(getattr(args, "augment", None))
    if augment is not None:
        cfg = replace(cfg, augment=augment)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def run(args) -> int:
    cfg = resolve_config(args)
    root = Path(cfg.out)
    verb = args.verb
    if verb == "report":
        text, missing = write_report(root)
        print(text, end="")
        for m in missing:
            logger.warning("missing %s", m)
        return EXIT_OK
    if verb == "attack" and args.dataset is not None:
        kinds = _kinds(args.attack) or list(cfg.attacks)
        run_dir = root if not cfg.betas else cfg.runs(root)[0][0]
        doc = attack_dataset(args.dataset, kinds, cfg.attack_seed, load_vocab(run_dir), root)
        for k, rep in doc.items():
            print(f"{k}: {rep['counts']} all_passed={rep['all_passed']}")
        return EXIT_OK
    for run_dir, rcfg in cfg.runs(root):
        if verb == "gen-data":
            paths = gen_data(rcfg, run_dir)
            print(f"{run_dir}: wrote {len(paths)} splits")
        elif verb == "attack":
            doc = run_attacks(rcfg, run_dir, _kinds(args.attack))
            for k, rep in doc.items():
                print(f"{run_dir} {k}: {rep['counts']} all_passed={rep['all_passed']}")
        elif verb == "train":
            summary = train_models(rcfg, run_dir)
            print(f"{run_dir}: trained on {summary['n_train']} instances, c_r={summary['tuning']['c_r']:g}")
        elif verb == "eval":
            methods = [m.strip() for m in args.method.split(",")] if args.method else None
            kinds = _kinds(args.attack)
            evaluate_run(rcfg, run_dir, methods, kinds)
            print(f"## {run_dir}")
            print((run_dir / "metrics.md").read_text(), end="")
        elif verb == "muting-study":
            muting_study(rcfg, run_dir)
            print(f"## {run_dir}")
            print((run_dir / "muting.md").read_text(), end="")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (UsageError, ConfigError) as exc:
        print(f"cvcqa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArtifactError, TrainingDiverged, OSError, RuntimeError, ValueError) as exc:
        print(f"cvcqa: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
