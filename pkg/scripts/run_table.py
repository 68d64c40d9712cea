#!/usr/bin/env python3
"""Plain vs equivariant shallow CNNs on transformed test sets.

    python scripts/run_table.py heat --seeds 0,1,2 --out results/heat
    python scripts/run_table.py velocity --seeds 0 --out results/velocity

Writes ``scores.csv`` (one row per symmetry, seed, test set and metric)
and prints a seed-averaged table of RMSE and conservation error.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from eqdyn import experiment as E
from eqdyn.metrics import metrics_csv

SUITES = {
    "heat": (E.heat_config, ["none", "magnitude", "rotation", "scale"]),
    "velocity": (E.velocity_config, ["none", "uniform_motion"]),
}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("suite", choices=sorted(SUITES))
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--symmetries", help="comma-separated subset")
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--max-train", type=int)
    ap.add_argument("--out", default="results")
    args = ap.parse_args(argv)

    make, syms = SUITES[args.suite]
    overrides = {k: v for k, v in (("epochs", args.epochs), ("max_train", args.max_train)) if v is not None}
    cfg = make(**overrides)
    if args.symmetries:
        syms = args.symmetries.split(",")
    seeds = [int(s) for s in args.seeds.split(",")]
    results = E.run_suite(cfg, syms, seeds, log=lambda s: print(s, flush=True))

    rows = []
    for (sym, seed), r in results.items():
        for test, sc in r.scores.items():
            for metric in ("rmse", "energy_l1"):
                rows.append(dict(metric=metric, split=sym, transform=test, step="all", value=sc[metric], seed=seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scores.csv").write_text(metrics_csv(rows))

    tests = list(next(iter(results.values())).scores)
    print(f"\nmean over seeds {seeds}: RMSE (conservation L1)")
    print(f"{'model':<16}" + "".join(f"{t:>22}" for t in tests))
    for sym in syms:
        cells = [f"{E.mean_score(results, sym, t, 'rmse'):.4g} ({E.mean_score(results, sym, t, 'energy_l1'):.3g})"
                 for t in tests]
        params = results[(sym, seeds[0])].params
        secs = np.mean([r.seconds for (s, _), r in results.items() if s == sym])
        print(f"{sym:<16}" + "".join(f"{c:>22}" for c in cells) + f"   {params} params, {secs:.0f}s/run")
    return 0


if __name__ == "__main__":
    sys.exit(main())
