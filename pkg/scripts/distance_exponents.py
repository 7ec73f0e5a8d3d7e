"""Distances from initialization to the nearest saddle and global minimum as the width grows."""
import argparse

import numpy as np

from dln_lab.analysis import distance_sweep


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--depth", type=int, default=3)
    ap.add_argument("--gammas", type=float, nargs="+", default=[0.5, 0.75, 1.0, 1.5, 2.0])
    ap.add_argument("--seeds", type=int, default=7)
    args = ap.parse_args()
    A_star = 10.0 * np.arange(1.0, 6.0)[:, None]
    widths = [8, 16, 32, 64, 128, 256]
    for g in args.gammas:
        res = distance_sweep(widths, g, range(args.seeds), args.depth, A_star)
        s, m = res["saddle"], res["minimum"]
        print(f"gamma={g}: saddle slope {s.slope:+.3f} (theory {s.theory_slope:+.3f}), "
              f"minimum slope {m.slope:+.3f} (theory {m.theory_slope:+.3f})")


if __name__ == "__main__":
    main()
