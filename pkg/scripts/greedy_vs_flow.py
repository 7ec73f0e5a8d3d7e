"""Greedy rank-one growth against gradient descent from a tiny initialization."""
import argparse

import numpy as np

from dln_lab.core import NetShape
from dln_lab.costs import MSECost
from dln_lab.flow import FlowConfig
from dln_lab.greedy import GreedyConfig, greedy_vs_flow


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--alphas", type=float, nargs="+", default=[1e-1, 1e-2, 1e-3, 1e-4])
    ap.add_argument("--depth", type=int, default=2)
    args = ap.parse_args()
    cost = MSECost(np.eye(4), np.diag([3.0, 2.0, 0.0, 0.0]))
    shape = NetShape.rectangular(args.depth, 8, 4, 4)
    flow = FlowConfig(step_size=1e-2, max_steps=100_000, snapshot_every=100)
    greedy = GreedyConfig(eps=1e-3, inner_steps=50_000, lr=1e-2)
    for a in args.alphas:
        res = greedy_vs_flow(cost, shape, a, 0, flow, greedy)
        print(f"alpha={a:g}: relative difference {res.relative_difference:.2e}, "
              f"flow ranks {res.flow_ranks}, greedy ranks {res.greedy_ranks}")


if __name__ == "__main__":
    main()
