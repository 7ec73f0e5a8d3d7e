"""Saddle-to-saddle staircase on 10x10 rank-3 completion: plateaus and visited ranks."""
import argparse

from dln_lab.cli import build_costs, preset, shape_from, validate_config
from dln_lab.core import init_gaussian
from dln_lab.flow import detect_plateaus, integrate


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--width", type=int, default=20)
    ap.add_argument("--csv", default=None, help="write the trajectory here")
    args = ap.parse_args()
    raw = preset("figure1")
    raw["seed"] = args.seed
    raw["shape"]["width"] = args.width
    cfg = validate_config(raw)
    shape = shape_from(cfg.shape)
    train, test = build_costs(cfg.cost, cfg.seed)
    traj = integrate(init_gaussian(shape, cfg.init_sigma(shape.hidden_width), cfg.seed), train,
                     cfg.flow, test_cost=test)
    for p in detect_plateaus(traj).intervals:
        print(f"plateau t=[{p.t_start:.1f}, {p.t_end:.1f}] loss {p.mean_loss:.4g}")
    print("ranks", traj.rank_sequence())
    print(f"final train {traj.loss_train[-1]:.3g} test {traj.loss_test[-1]:.3g}")
    if args.csv:
        with open(args.csv, "w") as fh:
            traj.write_csv(fh)


if __name__ == "__main__":
    main()
