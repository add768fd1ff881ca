"""Time LRPET training epochs against plain SGD on the desk task.

    python3 scripts/overhead.py --epochs 3
"""

import argparse
import json

from lrpet.experiments import overhead_ratio


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    res = overhead_ratio(epochs=args.epochs, seed=args.seed)
    print(json.dumps(res, indent=2))
    print(f"overhead ratio {res['ratio']:.3f} (target <= 1.15)")


if __name__ == "__main__":
    main()
