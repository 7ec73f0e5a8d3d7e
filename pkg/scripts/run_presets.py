"""Run built-in presets and print each summary's checks.

    python3 scripts/run_presets.py --out runs figure1 figure3
"""
import argparse
import json
from pathlib import Path

from dln_lab.cli import PRESETS, preset, run_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("names", nargs="*", default=sorted(PRESETS))
    ap.add_argument("--out", default="runs")
    ap.add_argument("--jobs", type=int, default=None)
    args = ap.parse_args()
    for name in args.names:
        out = Path(args.out) / name
        status = run_config(preset(name), out, jobs=args.jobs)
        summary = json.loads((out / "summary.json").read_text())
        print(f"{name}: exit {status}, checks {summary.get('checks', {})}")


if __name__ == "__main__":
    main()
