"""Distance of the persisting torus from the trivial one, against eps.

Runs the standard preset over a ladder of perturbation sizes and fits
the log-log slope; first-order theory says 1.
"""

import argparse

import numpy as np

from hypertori.driver import run_point
from hypertori.kamstep import KamParams
from hypertori.presets import example1


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epss", type=float, nargs="+",
                    default=[1e-4, 1e-5, 1e-6])
    ap.add_argument("--gamma0", type=float, default=0.05)
    ap.add_argument("--grid", type=int, default=32)
    args = ap.parse_args()

    dists = []
    print("   eps        steps   distance")
    for eps in args.epss:
        res = run_point(example1(eps=eps), KamParams(gamma0=args.gamma0),
                        want_embedding=True, embedding_grid=args.grid)
        if res.status != "converged":
            print(f"  {eps:8.1e}   {res.status}: {res.message}")
            continue
        d = res.embedding["distance"]
        dists.append((eps, d))
        print(f"  {eps:8.1e}   {res.steps:3d}    {d:.6e}")

    if len(dists) >= 2:
        e, d = zip(*dists)
        slope = np.polyfit(np.log(e), np.log(d), 1)[0]
        print(f"log-log slope: {slope:.4f}")


if __name__ == "__main__":
    main()
