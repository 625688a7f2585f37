"""Run one preset end to end and print the step table.

Usage: python scripts/run_preset.py example1 --eps 1e-4
"""

import argparse

import numpy as np

from hypertori import presets
from hypertori.driver import run_point
from hypertori.kamstep import KamParams


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("preset", nargs="?", default="example1")
    ap.add_argument("--eps", type=float, default=1e-4)
    ap.add_argument("--gamma0", type=float, default=0.05)
    ap.add_argument("--grid", type=int, default=64,
                    help="embedding grid per angle")
    args = ap.parse_args()

    inst = presets.get(args.preset, eps=args.eps)
    res = run_point(inst, KamParams(gamma0=args.gamma0),
                    want_embedding=True, embedding_grid=args.grid)

    print(f"status: {res.status}  ({res.message or 'ok'})")
    print(" nu    K        |P|         |P+|     residual   torus metric")
    for row in res.diagnostics:
        if "norm_Pplus" not in row:
            continue
        print(f" {row['nu']:2d}  {row['K']:3d}  {row['norm_P']:10.3e}"
              f"  {row['norm_Pplus']:10.3e}  {row['residual']:9.2e}"
              f"  {row['torus_metric']:9.2e}")
    if res.status != "converged":
        return
    np.set_printoptions(precision=15)
    print("Omega_inf:", res.Omega_inf)
    print("drift from Omega_0:", res.drift)
    print("toral frequency:", res.omega_inf)
    print(f"embedding distance to trivial torus: "
          f"{res.embedding['distance']:.6e} on {args.grid}^{inst.structure.n}")


if __name__ == "__main__":
    main()
