"""Sweep gamma and print the excluded-measure table for omega = (1, lambda).

The fraction of [1, 2] thrown out by the sieve should scale about
linearly in gamma; the printed slope is the log-log fit.
"""

import argparse

import numpy as np

from hypertori.driver import measure_excluded


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--gammas", type=float, nargs="+",
                    default=[0.01, 0.02, 0.04, 0.08])
    ap.add_argument("--tau", type=float, default=2.0)
    ap.add_argument("--K", type=int, default=30)
    ap.add_argument("--grid", type=int, default=10000)
    args = ap.parse_args()

    rep = measure_excluded(lambda p: np.array([1.0, p[0]]), [[1.0, 2.0]],
                           args.gammas, tau=args.tau, K=args.K,
                           grid_res=args.grid)
    print(f"tau = {rep.tau}, K = {rep.K}, {rep.npoints} grid points")
    print("  gamma     excluded fraction")
    for row in rep.as_rows():
        print(f"  {row['gamma']:7.4f}   {row['fraction']:.6f}")
    if rep.dropped:
        print("dropped (zero fraction):", rep.dropped)
    print(f"log-log slope: {rep.slope:.4f}")


if __name__ == "__main__":
    main()
