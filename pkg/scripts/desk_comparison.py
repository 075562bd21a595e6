"""Desk-scale simulation comparison (gLASSO, TRECOR, TRECOR-oracle, CovReg).

q=30, n=150, R_true=2, tridiagonal Sigma, 20 replicates, 2000 iterations with
1000 burn-in, candidate ranks 1..5 chosen by WAIC.  Writes per-fit and chosen-
rank tables plus a manifest whose hash the acceptance suite checks.
"""
import argparse
import json
import logging
import os
import time

from trecor.evalm import comparison_manifest, run_comparison, summarize
from trecor.gibbs import FitConfig
from trecor.simgen import SimConfig

SIM = SimConfig(n=150, q=30, d=4, R_true=2, sigma_structure="tridiagonal")
FIT = FitConfig(iterations=2000, burn_in=1000, thin=5, seed=0)
METHODS = ("glasso", "trecor", "oracle", "covreg")
RANKS = (1, 2, 3, 4, 5)
REPLICATES = 20
DEFAULT_OUT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "results", "desk_comparison")


def manifest(replicates=REPLICATES):
    return comparison_manifest(SIM, FIT, replicates, METHODS, RANKS)


def run(out: str, replicates: int = REPLICATES, workers: int | None = None) -> None:
    os.makedirs(out, exist_ok=True)
    t0 = time.perf_counter()
    per_fit, chosen = run_comparison(replicates, SIM, METHODS, RANKS, FIT, workers, progress=True)
    per_fit.to_csv(os.path.join(out, "per_fit.csv"), index=False)
    chosen.to_csv(os.path.join(out, "chosen.csv"), index=False)
    summarize(chosen, SIM.R_true).to_csv(os.path.join(out, "table.csv"), index=False)
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump({**manifest(replicates), "wall_seconds": time.perf_counter() - t0}, fh, indent=2)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=DEFAULT_OUT)
    ap.add_argument("--replicates", type=int, default=REPLICATES)
    ap.add_argument("--workers", type=int)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    run(args.out, args.replicates, args.workers)


if __name__ == "__main__":
    main()
