"""Escape time against initialization scale on a 2x2 MSE toy, L = 2 and L = 3."""
import argparse

import numpy as np

from dln_lab.core import NetShape, init_gaussian
from dln_lab.costs import MSECost
from dln_lab.escape import escape_time_scaling
from dln_lab.flow import FlowConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--radius", type=float, default=0.5)
    ap.add_argument("--depths", type=int, nargs="+", default=[2, 3, 4])
    args = ap.parse_args()
    toy = MSECost(np.eye(2), np.diag([2.0, 1.0]))
    cfg = FlowConfig(step_size=1e-3, max_steps=200_000, integrator="rk45", rtol=1e-9, atol=1e-12)
    alphas = [1e-2, 1e-3, 1e-4, 1e-5]
    for L in args.depths:
        theta0 = init_gaussian(NetShape.rectangular(L, 2, 2, 2), 1.0, 0)
        fit = escape_time_scaling(theta0, toy, cfg, args.radius, alphas)
        times = ", ".join(f"{t:.4g}" for t in fit["times"])
        print(f"L={L}: times [{times}] slope {fit['slope']:.4f} "
              f"(theory {fit['theory_slope']:.4f}), R2 {fit['r_squared']:.5f}")


if __name__ == "__main__":
    main()
