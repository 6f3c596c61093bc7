"""CT accuracy under variable muting on a poisoned (beta=0.9) and a clean (beta=0) corpus.

    python3 scripts/muting_study.py --out runs/muting --seed 0

A model that leans on the passage-option overlap keeps its accuracy when
the question is muted; on the clean corpus muting the question leaves
nothing to go on.
"""

import argparse
from pathlib import Path

from cvcqa.experiment import ExperimentConfig, gen_data, muting_study, train_models
from cvcqa.experiment import markdown_table


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/muting"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--betas", type=float, nargs="+", default=[0.9, 0.0])
    args = ap.parse_args()
    cfg = ExperimentConfig(seed=args.seed, betas=list(args.betas), attacks=[])
    rows = {}
    for run_dir, rcfg in cfg.runs(args.out):
        gen_data(rcfg, run_dir)
        train_models(rcfg, run_dir)
        rows[f"beta={rcfg.corpus.beta:g}"] = muting_study(rcfg, run_dir)
    print(markdown_table(rows, list(next(iter(rows.values())))))


if __name__ == "__main__":
    main()
