"""Run the GP-EI ratio search on the desk CNN and compare with uniform ratios.

    python3 scripts/search_desk.py --budget 20 --out results/search_desk.json
"""

import argparse
import json
from pathlib import Path

import numpy as np

from lrpet.experiments import desk_search


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--budget", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--proxy-epochs", type=int, default=15)
    ap.add_argument("--out", default="results/search_desk.json")
    args = ap.parse_args()

    plan, state, grid = desk_search(budget=args.budget, seed=args.seed, proxy_epochs=args.proxy_epochs)
    best = state.best
    print(f"best objective {best.objective:.4f} (E {best.error:.4f}, C {best.compression:.4f}) at p={np.round(best.p, 3).tolist()}")
    for p, ev in grid.items():
        print(f"uniform p={p}: objective {ev.objective:.4f} (E {ev.error:.4f}, C {ev.compression:.4f})")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({
        "plan": plan.to_dict(),
        "best": {"p": best.p.tolist(), "objective": best.objective, "error": best.error, "compression": best.compression},
        "grid": {str(p): {"objective": ev.objective, "error": ev.error, "compression": ev.compression} for p, ev in grid.items()},
    }, indent=2))


if __name__ == "__main__":
    main()
