"""Train and evaluate CT and CVC on the default synthetic corpus for several seeds.

    python3 scripts/benchmark.py --out runs/bench --seeds 0 1 2

Prints one accuracy table per seed plus the seed mean of every cell.
"""

import argparse
import time
from pathlib import Path

import numpy as np

from cvcqa.experiment import ExperimentConfig, evaluate_run, gen_data, muting_study, run_attacks, train_models


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, help="TOML experiment config (default: built-in defaults)")
    ap.add_argument("--out", type=Path, default=Path("runs/bench"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()
    base = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    tables = []
    start = time.perf_counter()
    for seed in args.seeds:
        cfg = ExperimentConfig.from_dict({**base.to_dict(), "seed": seed})
        for run_dir, rcfg in cfg.runs(args.out / f"seed{seed}"):
            gen_data(rcfg, run_dir)
            run_attacks(rcfg, run_dir)
            summary = train_models(rcfg, run_dir)
            tables.append(evaluate_run(rcfg, run_dir))
            muting_study(rcfg, run_dir)
            print(f"## seed {seed} ({run_dir}), tuned c_r = {summary['tuning']['c_r']:g}")
            print((run_dir / "metrics.md").read_text())
    cols = list(next(iter(tables[0].values())))
    print(f"## mean over {len(tables)} run(s), {time.perf_counter() - start:.0f}s total")
    print("| method | " + " | ".join(cols) + " |")
    print("|---" * (len(cols) + 1) + "|")
    for m in tables[0]:
        cells = [f"{100 * np.mean([t[m][c] for t in tables]):.2f}" for c in cols]
        print(f"| {m} | " + " | ".join(cells) + " |")


if __name__ == "__main__":
    main()
