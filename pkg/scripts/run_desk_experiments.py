"""Train every ablation variant on the desk task and summarize accuracy.

    python scripts/run_desk_experiments.py --seeds 0 1 2 --out results/desk_runs.json
"""

import argparse
import dataclasses
import json
import time
from pathlib import Path

import numpy as np

from lrpet.experiments import VARIANTS, DeskSetup, run_variant


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    ap.add_argument("--epochs", type=int, default=DeskSetup.epochs)
    ap.add_argument("--lr", type=float, default=DeskSetup.lr)
    ap.add_argument("--out", default="results/desk_runs.json")
    args = ap.parse_args()

    setup = DeskSetup(epochs=args.epochs, lr=args.lr)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    runs = []
    for seed in args.seeds:
        for variant in args.variants:
            start = time.perf_counter()
            res = run_variant(variant, seed, setup)
            runs.append(dataclasses.asdict(res))
            print(f"seed {seed} {variant:<16} acc {res.accuracy:.4f}"
                  + (f"  factorized {res.factorized_accuracy:.4f}" if res.factorized_accuracy is not None else "")
                  + f"  ({time.perf_counter() - start:.0f}s)", flush=True)
            out.write_text(json.dumps({"setup": dataclasses.asdict(setup), "runs": runs}, indent=2, default=str))

    print("\nmean test accuracy over seeds")
    for variant in args.variants:
        accs = [r["accuracy"] for r in runs if r["variant"] == variant]
        print(f"  {variant:<16} {np.mean(accs):.4f}  (+/- {np.std(accs):.4f})")


if __name__ == "__main__":
    main()
