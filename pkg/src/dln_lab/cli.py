"""Command-line experiment runner: JSON config in, CSV trajectories and JSON summaries out."""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import scipy

from .analysis import distance_sweep, ntk_expectation, ntk_sample
from .core import NetShape, init_gaussian, make_rng, product_map, sigma_for_gamma
from .costs import MCCost, MSECost, cost_from_json
from .escape import GridSpec, escape_profile, flow_residual, homogeneous_path, refine_escape_path
from .flow import FlowConfig, NonFinite, detect_plateaus, escape_time, integrate
from .greedy import GreedyConfig, greedy_low_rank, greedy_vs_flow
from .tasks import TEACHERS, mc_task, teacher_mse_task

KINDS = ("run", "greedy", "escape_sweep", "regime_sweep", "ntk_check", "refine_path",
         "figure1", "figure3")
TOP_KEYS = {"kind", "seed", "shape", "gamma", "sigma", "cost", "flow", "notes"} | set(KINDS)
EXIT_OK, EXIT_CONFIG, EXIT_NONFINITE = 0, 2, 3
FLAT_SLOPE_TOL = 0.0375


class ConfigError(ValueError):
    def __init__(self, where: str, message: str):
        super().__init__(f"{where}: {message}")
        self.where = where


# ---------------------------------------------------------------- validation

_MISSING = object()


def _field(obj: dict, key: str, kind, where: str, default=_MISSING):
    if key not in obj:
        if default is _MISSING:
            raise ConfigError(f"{where}.{key}", "required field is missing")
        return default
    val = obj[key]
    if kind is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{where}.{key}", f"expected a number, got {val!r}")
        return float(val)
    if kind is int:
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"{where}.{key}", f"expected an integer, got {val!r}")
        return val
    if not isinstance(val, kind):
        raise ConfigError(f"{where}.{key}", f"expected {getattr(kind, '__name__', kind)}, got {val!r}")
    return val


def _no_extra(obj: dict, allowed, where: str):
    extra = sorted(set(obj) - set(allowed))
    if extra:
        raise ConfigError(f"{where}.{extra[0]}", f"unknown field (allowed: {sorted(allowed)})")


def _number_list(obj, key, where, kind=float, default=_MISSING):
    vals = _field(obj, key, list, where, default)
    if vals is default and default is not _MISSING:
        return vals
    out = []
    for i, v in enumerate(vals):
        out.append(_field({"v": v}, "v", kind, f"{where}.{key}[{i}]"))
    if not out:
        raise ConfigError(f"{where}.{key}", "list must not be empty")
    return out


def _parse_shape(obj, where="shape") -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(where, "expected an object")
    if "widths" in obj:
        _no_extra(obj, {"widths"}, where)
        widths = _number_list(obj, "widths", where, int)
        try:
            NetShape(tuple(widths))
        except ValueError as exc:
            raise ConfigError(where, str(exc)) from None
        return {"widths": widths}
    _no_extra(obj, {"depth", "width", "n_in", "n_out"}, where)
    out = {k: _field(obj, k, int, where) for k in ("depth", "n_in", "n_out")}
    out["width"] = _field(obj, "width", int, where, None)
    if out["depth"] < 1 or out["n_in"] < 1 or out["n_out"] < 1:
        raise ConfigError(where, "depth and sizes must be positive")
    if out["width"] is not None and out["width"] < 1:
        raise ConfigError(f"{where}.width", "must be positive")
    return out


def shape_from(spec: dict, width: int | None = None, depth: int | None = None) -> NetShape:
    if "widths" in spec:
        return NetShape(tuple(spec["widths"]))
    w = width if width is not None else spec["width"]
    if w is None:
        raise ConfigError("shape.width", "required for this experiment kind")
    return NetShape.rectangular(depth if depth is not None else spec["depth"], w,
                                spec["n_in"], spec["n_out"])


def _parse_cost(obj, where="cost") -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(where, "expected an object")
    kind = _field(obj, "type", str, where)
    if kind == "random_mc":
        _no_extra(obj, {"type", "n_rows", "n_cols", "rank", "fraction", "teacher", "scale",
                        "seed"}, where)
        for k in ("n_rows", "n_cols", "rank"):
            if _field(obj, k, int, where) < 1:
                raise ConfigError(f"{where}.{k}", "must be positive")
        frac = _field(obj, "fraction", float, where)
        if not 0 < frac <= 1:
            raise ConfigError(f"{where}.fraction", "must be in (0, 1]")
        teacher = _field(obj, "teacher", str, where, "factors")
        if teacher not in TEACHERS:
            raise ConfigError(f"{where}.teacher", f"must be one of {TEACHERS}")
        _field(obj, "scale", float, where, 1.0)
        _field(obj, "seed", int, where, 0)
    elif kind == "teacher_mse":
        _no_extra(obj, {"type", "teacher", "n_samples", "noise", "n_test", "seed"}, where)
        T = _field(obj, "teacher", list, where)
        try:
            arr = np.asarray(T, dtype=float)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}.teacher", "must be a rectangular numeric matrix") from None
        if arr.ndim != 2:
            raise ConfigError(f"{where}.teacher", "must be a 2-D matrix")
        if _field(obj, "n_samples", int, where) < 1:
            raise ConfigError(f"{where}.n_samples", "must be positive")
        _field(obj, "noise", float, where, 0.0)
        _field(obj, "n_test", int, where, 0)
        _field(obj, "seed", int, where, 0)
    elif kind in ("mse", "mc", "trace", "localized"):
        try:
            cost_from_json(obj)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(where, f"invalid {kind} cost: {exc}") from None
    else:
        raise ConfigError(f"{where}.type", f"unknown cost type {kind!r}")
    return obj


def build_costs(spec: dict, seed: int):
    """Train cost and optional test cost from a validated cost spec."""
    kind = spec["type"]
    if kind == "random_mc":
        return mc_task(spec["n_rows"], spec["n_cols"], spec["rank"], float(spec["fraction"]),
                       spec.get("seed", seed), float(spec.get("scale", 1.0)),
                       spec.get("teacher", "factors"))
    if kind == "teacher_mse":
        return teacher_mse_task(np.asarray(spec["teacher"], dtype=float), spec["n_samples"],
                                spec.get("seed", seed), float(spec.get("noise", 0.0)),
                                spec.get("n_test", 0))
    train = cost_from_json(spec)
    test = train.complement() if isinstance(train, MCCost) else None
    return train, test


def target_matrix(cost) -> np.ndarray:
    """Global minimizer used by the distance constructions."""
    if isinstance(cost, MCCost):
        return np.array(cost.A_star)
    if isinstance(cost, MSECost):
        return cost.Y @ np.linalg.pinv(cost.X)
    raise ConfigError("cost.type", "distance sweeps need an mse or mc cost")


_FLOW_FIELDS = {f.name for f in fields(FlowConfig)}


def _parse_flow(obj, where="flow") -> FlowConfig:
    if obj is None:
        return FlowConfig()
    if not isinstance(obj, dict):
        raise ConfigError(where, "expected an object")
    _no_extra(obj, _FLOW_FIELDS, where)
    try:
        return FlowConfig(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(where, str(exc)) from None


_BLOCK_FIELDS = {
    "run": {"plateaus"},
    "figure1": {"plateaus", "expect"},
    "greedy": {f.name for f in fields(GreedyConfig)} | {"compare_flow"},
    "escape_sweep": {"alphas", "r", "record_training", "expect_slope_rtol"},
    "regime_sweep": {"widths", "gammas", "seeds", "slope_rtol", "flat_tol"},
    "ntk_check": {"draws", "rtol"},
    "refine_path": {"grid", "tol", "max_iter"},
    "figure3": {"widths", "gammas", "seeds", "eta0", "scale_lr", "depths", "checks"},
}
_NEEDS_INIT_SCALE = {"run", "figure1", "ntk_check", "escape_sweep"}
_SWEEPS_GAMMA = {"regime_sweep", "figure3"}


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    seed: int
    shape: dict
    gamma: float | None
    sigma: float | None
    cost: dict | None
    flow: FlowConfig
    block: dict
    raw: dict

    def init_sigma(self, width: int | None) -> float:
        if self.sigma is not None:
            return self.sigma
        if width is None:
            raise ConfigError("gamma", "needs a rectangular shape with a hidden width")
        return sigma_for_gamma(width, self.gamma)


def validate_config(obj) -> ExperimentConfig:
    if not isinstance(obj, dict):
        raise ConfigError("$", "config must be a JSON object")
    _no_extra(obj, TOP_KEYS, "$")
    kind = _field(obj, "kind", str, "$")
    if kind not in KINDS:
        raise ConfigError("$.kind", f"must be one of {KINDS}")
    blocks = [k for k in KINDS if k in obj]
    if blocks != [kind]:
        raise ConfigError("$", f"exactly one kind-specific block named {kind!r} is required, "
                               f"found {blocks}")
    block = obj[kind]
    if not isinstance(block, dict):
        raise ConfigError(f"$.{kind}", "expected an object")
    _no_extra(block, _BLOCK_FIELDS[kind], f"$.{kind}")
    seed = _field(obj, "seed", int, "$", 0)
    shape = _parse_shape(_field(obj, "shape", dict, "$"), "$.shape")
    if "gamma" in obj and "sigma" in obj:
        raise ConfigError("$.sigma", "gamma and sigma are mutually exclusive")
    gamma = _field(obj, "gamma", float, "$", None)
    sigma = _field(obj, "sigma", float, "$", None)
    if sigma is not None and sigma < 0:
        raise ConfigError("$.sigma", "must be nonnegative")
    if kind in _NEEDS_INIT_SCALE and gamma is None and sigma is None:
        raise ConfigError("$.gamma", f"kind {kind!r} needs gamma or sigma")
    if kind in _SWEEPS_GAMMA and (gamma is not None or sigma is not None):
        raise ConfigError("$.gamma", f"kind {kind!r} takes gammas from its block")
    cost = None
    if kind != "ntk_check":
        cost = _parse_cost(_field(obj, "cost", dict, "$"), "$.cost")
    elif "cost" in obj:
        cost = _parse_cost(obj["cost"], "$.cost")
    flow = _parse_flow(obj.get("flow"), "$.flow")
    _validate_block(kind, block, f"$.{kind}")
    return ExperimentConfig(kind, seed, shape, gamma, sigma, cost, flow, block, obj)


def _validate_block(kind: str, block: dict, where: str):
    if kind in ("run", "figure1") and "plateaus" in block:
        p = _field(block, "plateaus", dict, where)
        _no_extra(p, {"window", "slope_tol", "sep_tol", "floor", "resolution"}, f"{where}.plateaus")
    if kind == "figure1" and "expect" in block:
        e = _field(block, "expect", dict, where)
        _no_extra(e, {"plateaus", "ranks", "train_loss", "test_loss"}, f"{where}.expect")
    if kind == "greedy":
        rest = {k: v for k, v in block.items() if k != "compare_flow"}
        try:
            GreedyConfig(**rest)
        except (TypeError, ValueError) as exc:
            raise ConfigError(where, str(exc)) from None
        if "compare_flow" in block:
            c = _field(block, "compare_flow", dict, where)
            _no_extra(c, {"alpha", "width"}, f"{where}.compare_flow")
            _field(c, "alpha", float, f"{where}.compare_flow")
    if kind == "escape_sweep":
        alphas = _number_list(block, "alphas", where)
        if any(a <= 0 for a in alphas):
            raise ConfigError(f"{where}.alphas", "must be positive")
        if _field(block, "r", float, where) <= 0:
            raise ConfigError(f"{where}.r", "must be positive")
    if kind in ("regime_sweep", "figure3"):
        widths = _number_list(block, "widths", where, int)
        if any(b <= a for a, b in zip(widths[:-1], widths[1:])):
            raise ConfigError(f"{where}.widths", "must be strictly increasing")
        _number_list(block, "gammas", where)
        seeds = block.get("seeds", 7)
        if not (isinstance(seeds, int) and seeds > 0) and not isinstance(seeds, list):
            raise ConfigError(f"{where}.seeds", "must be a positive count or a list of seeds")
    if kind == "figure3":
        if _field(block, "eta0", float, where) <= 0:
            raise ConfigError(f"{where}.eta0", "must be positive")
        if "depths" in block:
            _number_list(block, "depths", where, int)
        checks = _field(block, "checks", list, where, [])
        bad = sorted(set(checks) - {"test", "rank", "plateaus", "incremental"})
        if bad:
            raise ConfigError(f"{where}.checks", f"unknown check {bad[0]!r}")
    if kind == "ntk_check" and _field(block, "draws", int, where, 200) < 2:
        raise ConfigError(f"{where}.draws", "need at least 2 draws")
    if kind == "refine_path" and "grid" in block:
        g = _field(block, "grid", dict, where)
        _no_extra(g, {f.name for f in fields(GridSpec)}, f"{where}.grid")


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno} column {exc.colno}", exc.msg) from None
    return validate_config(obj)


def _seeds(block) -> list[int]:
    seeds = block.get("seeds", 7)
    return list(range(seeds)) if isinstance(seeds, int) else [int(s) for s in seeds]


# ---------------------------------------------------------------- presets

_FIG2_TEACHER = (10 * np.diag([1.0, 2, 3, 4, 5])).tolist()

PRESETS: dict[str, dict] = {
    "figure1": {
        "notes": "Saddle-to-saddle on 10x10 rank-3 completion. Desk scale: width 100 -> 20; "
                 "teacher W W^T with graded column variances 1,2,3; 70% of entries observed.",
        "kind": "figure1", "seed": 0,
        "shape": {"depth": 4, "width": 20, "n_in": 10, "n_out": 10}, "gamma": 2.0,
        "cost": {"type": "random_mc", "n_rows": 10, "n_cols": 10, "rank": 3, "fraction": 0.7,
                 "teacher": "graded_gram"},
        "flow": {"step_size": 0.01, "max_steps": 200000, "snapshot_every": 50,
                 "stop_loss": 1e-7, "rank_tol": 0.1},
        "figure1": {"plateaus": {"window": 5, "slope_tol": 0.05, "sep_tol": 0.3},
                    "expect": {"plateaus": 3, "ranks": [1, 2, 3], "train_loss": 1e-6,
                               "test_loss": 1e-2}},
    },
    "figure2": {
        "notes": "NTK / mean-field / saddle-to-saddle training on the 5x5 teacher 10 diag(1..5) "
                 "with 100 Gaussian samples. Desk scale: widths {10,100,1000} -> {10,40}, "
                 "10 seeds -> 3, 50000 -> 30000 steps.",
        "kind": "figure3", "seed": 0, "shape": {"depth": 4, "n_in": 5, "n_out": 5},
        "cost": {"type": "teacher_mse", "teacher": _FIG2_TEACHER, "n_samples": 100,
                 "n_test": 1000},
        "flow": {"max_steps": 30000, "snapshot_every": 100, "rank_tol": 0.1},
        "figure3": {"widths": [10, 40], "gammas": [0.75, 1.0, 1.5], "seeds": 3, "eta0": 1e-4,
                    "scale_lr": False, "checks": ["incremental"]},
    },
    "figure3": {
        "notes": "Test error and rank at convergence vs gamma, rank-1 completion. Desk scale: "
                 "30x30 -> 12x12, 20% -> 30% observed, widths up to 1000 -> {16,64}, L=4.",
        "kind": "figure3", "seed": 0, "shape": {"depth": 4, "n_in": 12, "n_out": 12},
        "cost": {"type": "random_mc", "n_rows": 12, "n_cols": 12, "rank": 1, "fraction": 0.3},
        "flow": {"max_steps": 20000, "snapshot_every": 20000, "rank_tol": 0.1},
        "figure3": {"widths": [16, 64], "gammas": [0.75, 1.5], "seeds": 7, "eta0": 0.05,
                    "scale_lr": True},
    },
    "figure4": {
        "notes": "Lazy vs saddle-to-saddle completion from alpha * theta0 for one fixed theta0. "
                 "Desk scale: width 100 -> 20; same task as figure1.",
        "kind": "escape_sweep", "seed": 0,
        "shape": {"depth": 4, "width": 20, "n_in": 10, "n_out": 10}, "sigma": 0.2,
        "cost": {"type": "random_mc", "n_rows": 10, "n_cols": 10, "rank": 3, "fraction": 0.7,
                 "teacher": "graded_gram"},
        "flow": {"step_size": 0.005, "max_steps": 60000, "snapshot_every": 100,
                 "stop_loss": 1e-7, "rank_tol": 0.1},
        "escape_sweep": {"alphas": [2.0, 0.5, 0.25], "r": 8.0, "record_training": True},
    },
    "shallow_deep": {
        "notes": "Noisy rank-3 teacher (graded Gram + 0.2 noise) with shallow and deep nets in "
                 "the NTK and saddle-to-saddle regimes. Desk scale: widths -> {20}, 2 seeds.",
        "kind": "figure3", "seed": 0, "shape": {"depth": 2, "n_in": 10, "n_out": 10},
        "cost": {"type": "teacher_mse", "teacher": None, "n_samples": 100, "n_test": 1000,
                 "noise": 0.2},
        "flow": {"max_steps": 20000, "snapshot_every": 200, "rank_tol": 1e-4},
        "figure3": {"widths": [20], "gammas": [0.5, 2.0], "seeds": 2, "eta0": 1e-3,
                    "scale_lr": False, "depths": [2, 4]},
    },
    "distance_exponents": {
        "notes": "Constructive distances to the nearest saddle / global minimum vs width, L=3. "
                 "Target 10*(1..5) as a 5x1 map (single input column keeps the pseudo-inverse "
                 "free of finite-width bias).",
        "kind": "regime_sweep", "seed": 0, "shape": {"depth": 3, "n_in": 1, "n_out": 5},
        "cost": {"type": "teacher_mse", "teacher": [[10.0], [20.0], [30.0], [40.0], [50.0]],
                 "n_samples": 8},
        "regime_sweep": {"widths": [8, 16, 32, 64, 128], "gammas": [0.5, 1.0, 1.5], "seeds": 7},
    },
    "escape_times": {
        "notes": "Escape time vs initialization scale on a 2x2 strict-saddle MSE toy, L=3.",
        "kind": "escape_sweep", "seed": 0,
        "shape": {"depth": 3, "width": 2, "n_in": 2, "n_out": 2}, "sigma": 1.0,
        "cost": {"type": "mse", "X": [[1.0, 0.0], [0.0, 1.0]], "Y": [[2.0, 0.0], [0.0, 1.0]]},
        "flow": {"step_size": 1e-3, "max_steps": 200000, "integrator": "rk45",
                 "rtol": 1e-9, "atol": 1e-12},
        "escape_sweep": {"alphas": [1e-2, 1e-3, 1e-4, 1e-5], "r": 0.5},
    },
    "ntk": {
        "notes": "Monte-Carlo NTK diagonal at initialization against its expectation.",
        "kind": "ntk_check", "seed": 0,
        "shape": {"depth": 3, "width": 64, "n_in": 2, "n_out": 2}, "gamma": 1.0,
        "ntk_check": {"draws": 200, "rtol": 0.05},
    },
    "greedy": {
        "notes": "Greedy low-rank procedure on the rank-2 target diag(3,2,0,0), compared with "
                 "small-initialization gradient descent (L=2, w=8).",
        "kind": "greedy", "seed": 0, "shape": {"depth": 2, "width": 8, "n_in": 4, "n_out": 4},
        "cost": {"type": "mse", "X": np.eye(4).tolist(), "Y": np.diag([3.0, 2, 0, 0]).tolist()},
        "flow": {"step_size": 0.01, "max_steps": 100000, "snapshot_every": 100},
        "greedy": {"eps": 1e-3, "inner_steps": 50000, "lr": 0.01, "compare_flow": {"alpha": 1e-4}},
    },
    "refine_path": {
        "notes": "Fixed-point refinement of the optimal escape path on a 2x2 MSE toy, L=2.",
        "kind": "refine_path", "seed": 0,
        "shape": {"depth": 2, "width": 2, "n_in": 2, "n_out": 2},
        "cost": {"type": "mse", "X": [[1.0, 0.0], [0.0, 1.0]], "Y": [[2.0, 0.0], [0.0, 1.0]]},
        "refine_path": {"grid": {"n_points": 400}, "tol": 1e-12, "max_iter": 100},
    },
}


def _shallow_deep_teacher() -> list:
    from .tasks import graded_gram_matrix
    return graded_gram_matrix(10, 3, make_rng(2024)).tolist()


PRESETS["shallow_deep"]["cost"]["teacher"] = _shallow_deep_teacher()


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    return copy.deepcopy(PRESETS[name])


def list_presets() -> str:
    lines = []
    for name, cfg in PRESETS.items():
        lines.append(f"{name} (kind={cfg['kind']})\n    {cfg['notes']}")
    return "\n".join(lines)


# ---------------------------------------------------------------- experiment kinds


class _Outputs:
    def __init__(self, out_dir: Path):
        self.dir = out_dir
        self.files: dict[str, str] = {}

    def write(self, name: str, text: str):
        path = self.dir / name
        path.write_text(text)
        self.files[name] = text

    def write_json(self, name: str, obj):
        self.write(name, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.bool_,)):
        return bool(x)
    raise TypeError(f"cannot serialise {type(x)}")


def _plateau_args(block) -> dict:
    return dict(block.get("plateaus", {}))


def _trajectory_summary(traj, plateau_args) -> dict:
    rep = detect_plateaus(traj, **plateau_args)
    return {
        "steps": int(traj.step[-1]), "time": float(traj.time[-1]),
        "stop_reason": traj.stop_reason,
        "final_train_loss": float(traj.loss_train[-1]),
        "final_test_loss": float(traj.loss_test[-1]) if traj.has_test else None,
        "rank_sequence": traj.rank_sequence(),
        "plateau_count": rep.count,
        "plateaus": [asdict(p) for p in rep.intervals],
    }


def _run_single(cfg: ExperimentConfig, out: _Outputs, jobs: int) -> dict:
    shape = shape_from(cfg.shape)
    train, test = build_costs(cfg.cost, cfg.seed)
    theta0 = init_gaussian(shape, cfg.init_sigma(shape.hidden_width), cfg.seed)
    try:
        traj = integrate(theta0, train, cfg.flow, test_cost=test)
    except NonFinite as exc:
        if exc.trajectory is not None and len(exc.trajectory):
            out.write("trajectory.csv", exc.trajectory.to_csv())
        raise
    out.write("trajectory.csv", traj.to_csv())
    summary = _trajectory_summary(traj, _plateau_args(cfg.block))
    if cfg.kind == "figure1":
        exp = {"plateaus": 3, "ranks": [1, 2, 3], "train_loss": 1e-6, "test_loss": 1e-2}
        exp.update(cfg.block.get("expect", {}))
        ranks = summary["rank_sequence"]
        summary["checks"] = {
            "plateau_count": summary["plateau_count"] == exp["plateaus"],
            "rank_sequence": ranks == list(exp["ranks"]),
            "rank_nondecreasing": all(b >= a for a, b in zip(ranks[:-1], ranks[1:])),
            "train_loss": summary["final_train_loss"] <= exp["train_loss"],
            "test_loss": summary["final_test_loss"] is not None
            and summary["final_test_loss"] <= exp["test_loss"],
        }
    return summary


def _run_greedy(cfg: ExperimentConfig, out: _Outputs, jobs: int) -> dict:
    shape = shape_from(cfg.shape)
    train, _ = build_costs(cfg.cost, cfg.seed)
    gcfg = GreedyConfig(**{k: v for k, v in cfg.block.items() if k != "compare_flow"})
    summary: dict = {}
    if "compare_flow" in cfg.block:
        comp = cfg.block["compare_flow"]
        if "width" in comp:
            shape = shape_from(cfg.shape, width=comp["width"])
        res = greedy_vs_flow(train, shape, comp["alpha"], cfg.seed, cfg.flow, gcfg)
        summary["comparison"] = res.to_json()
        if res.flow_trajectory is not None:
            out.write("flow_trajectory.csv", res.flow_trajectory.to_csv())
        report = res.greedy_report
    else:
        report = greedy_low_rank(train, shape, gcfg)
    if report is not None:
        out.write_json("greedy.json", report.to_json())
        summary.update({
            "terminated": report.terminated,
            "stage_widths": [s.width for s in report.stages],
            "stage_losses": [s.loss for s in report.stages],
            "rank_sequence": report.rank_sequence(),
        })
    return summary


def _escape_point(args):
    theta0, cost, test, flow, r, alpha, record = args
    t = escape_time(theta0, cost, flow, r, alpha)
    res = {"alpha": alpha, "escape_time": t}
    text = None
    if record:
        traj = integrate(theta0 * alpha, cost, flow, test_cost=test)
        text = traj.to_csv()
        res["final_train_loss"] = float(traj.loss_train[-1])
        res["final_test_loss"] = float(traj.loss_test[-1]) if traj.has_test else None
        res["rank_sequence"] = traj.rank_sequence()
        res["plateau_count"] = detect_plateaus(traj).count
    return res, text


def _run_escape_sweep(cfg: ExperimentConfig, out: _Outputs, jobs: int) -> dict:
    from .analysis import linear_fit

    shape = shape_from(cfg.shape)
    train, test = build_costs(cfg.cost, cfg.seed)
    theta0 = init_gaussian(shape, cfg.init_sigma(shape.hidden_width), cfg.seed)
    b = cfg.block
    alphas = [float(a) for a in b["alphas"]]
    record = bool(b.get("record_training", False))
    points = [(theta0, train, test, cfg.flow, float(b["r"]), a, record) for a in alphas]
    results = _pmap(_escape_point, points, jobs)
    rows = ["alpha,escape_time"]
    for (res, text), a in zip(results, alphas):
        rows.append(f"{format(a, '.17g')},{format(res['escape_time'], '.17g')}")
        if text is not None:
            out.write(f"trajectory_alpha_{a:g}.csv", text)
    out.write("escape_times.csv", "\n".join(rows) + "\n")
    summary = {"points": [r for r, _ in results]}
    times = np.array([r["escape_time"] for r, _ in results])
    L = shape.depth
    if len(alphas) >= 2 and np.all(np.isfinite(times)) and np.all(times > 0) and L >= 2:
        s_star = escape_profile(train, L).s_star
        a = np.array(alphas)
        if L == 2:
            slope, _, r2 = linear_fit(-np.log(a), times)
            theory = 1.0 / s_star
        else:
            slope, _, r2 = linear_fit(np.log(a), np.log(times))
            theory = -(L - 2.0)
        rtol = float(b.get("expect_slope_rtol", 0.1))
        summary["fit"] = {"slope": slope, "r_squared": r2, "theory_slope": theory}
        summary["checks"] = {"slope": abs(slope - theory) <= rtol * abs(theory)}
    return summary


def _run_regime_sweep(cfg: ExperimentConfig, out: _Outputs, jobs: int) -> dict:
    train, _ = build_costs(cfg.cost, cfg.seed)
    A_star = target_matrix(train)
    b = cfg.block
    L = cfg.shape.get("depth") or shape_from(cfg.shape).depth
    seeds = [cfg.seed * 1000 + s for s in _seeds(b)]
    rtol = float(b.get("slope_rtol", 0.15))
    rows, fits, checks = [], {}, {}
    for g in b["gammas"]:
        res = distance_sweep(b["widths"], float(g), seeds, L, A_star)
        rows.extend(res["rows"])
        for key in ("saddle", "minimum"):
            fit = res[key]
            fits[f"{key}_gamma_{g:g}"] = fit.to_json()
            if fit.theory_slope != 0:
                ok = fit.relative_error() <= rtol
            else:
                # flat law: 15% of the |1/4| exponent at gamma 0.5 / 1.5
                flat = float(b.get("flat_tol", FLAT_SLOPE_TOL))
                ok = abs(fit.slope) <= flat
            checks[f"{key}_gamma_{g:g}"] = bool(ok)
    lines = ["w,gamma,seed,d_s_upper,d_m_upper"]
    for r in rows:
        lines.append(",".join([str(r["w"]), format(r["gamma"], ".17g"), str(r["seed"]),
                               format(r["d_s_upper"], ".17g"), format(r["d_m_upper"], ".17g")]))
    out.write("distances.csv", "\n".join(lines) + "\n")
    return {"fits": fits, "checks": checks}


def _run_ntk_check(cfg: ExperimentConfig, out: _Outputs, jobs: int) -> dict:
    shape = shape_from(cfg.shape)
    w = shape.hidden_width
    if w is None:
        raise ConfigError("$.shape", "ntk_check needs a rectangular network")
    gamma = cfg.gamma if cfg.gamma is not None else -2 * math.log(cfg.sigma) / math.log(w)
    draws = int(cfg.block.get("draws", 200))
    res = ntk_sample(shape.depth, w, gamma, draws, cfg.seed, shape.n_in, shape.n_out)
    rtol = float(cfg.block.get("rtol", 0.05))
    res["checks"] = {
        "diag_mean": abs(res["diag_mean"] - res["expected"]) <= rtol * res["expected"],
        "offdiag_mean": abs(res["offdiag_mean"]) <= 3 * res["offdiag_se"],
    }
    assert math.isclose(res["expected"], ntk_expectation(shape.depth, w, gamma))
    return res


def _run_refine_path(cfg: ExperimentConfig, out: _Outputs, jobs: int) -> dict:
    from .analysis import linear_fit
    from .costs import LocalizedCost, TraceCost

    shape = shape_from(cfg.shape)
    train, _ = build_costs(cfg.cost, cfg.seed)
    prof = escape_profile(train, shape.depth)
    b = cfg.block
    grid = GridSpec(**{"width": shape.hidden_width or 1, **b.get("grid", {})})
    path, ratios = refine_escape_path(train, prof, grid, float(b.get("tol", 1e-12)),
                                      int(b.get("max_iter", 100)))
    out.write("path.csv", path.to_csv())
    r = grid.r if grid.r is not None else None
    loc = LocalizedCost(train, TraceCost(prof.G), r) if r is not None else None
    if loc is None:
        from .escape import default_radius
        loc = LocalizedCost(train, TraceCost(prof.G), default_radius(prof.s1, shape.depth))
    residual = flow_residual(path, loc)
    summary = {"ratios": ratios, "flow_residual": residual, "iterations": len(ratios) + 1,
               "s_star": prof.s_star}
    base = homogeneous_path(prof, path.times, grid.width)
    diff = np.linalg.norm(path.matrix() - base.matrix(), axis=1)
    keep = diff > 0
    if keep.sum() >= 3:
        summary["decay_slope"] = linear_fit(path.times[keep], np.log(diff[keep]))[0]
    return summary


def _train_point(args):
    shape, sigma, seed, cost, test, flow, name = args
    theta0 = init_gaussian(shape, sigma, seed)
    try:
        traj = integrate(theta0, cost, flow, test_cost=test)
    except NonFinite as exc:
        text = exc.trajectory.to_csv() if exc.trajectory is not None else ""
        return name, text, {"status": "non_finite"}
    stats = {
        "status": "ok", "final_train_loss": float(traj.loss_train[-1]),
        "final_test_loss": float(traj.loss_test[-1]) if traj.has_test else None,
        "final_rank": int(traj.rank[-1]), "rank_sequence": traj.rank_sequence(),
        "plateau_count": detect_plateaus(traj).count,
    }
    return name, traj.to_csv(), stats


def _run_figure3(cfg: ExperimentConfig, out: _Outputs, jobs: int) -> dict:
    b = cfg.block
    seeds = _seeds(b)
    depths = b.get("depths", [cfg.shape.get("depth") or shape_from(cfg.shape).depth])
    points, keys = [], []
    for L in depths:
        for w in b["widths"]:
            shape = shape_from(cfg.shape, width=w, depth=L)
            for g in b["gammas"]:
                eta = float(b["eta0"])
                if b.get("scale_lr", True) and g <= 1:
                    eta *= w ** ((L - 1) * (g - 1))
                flow = cfg.flow.replace(step_size=eta)
                for s in seeds:
                    task_seed = cfg.seed * 1000 + s
                    train, test = build_costs(cfg.cost, task_seed)
                    name = f"trajectory_L{L}_w{w}_g{g:g}_s{s}.csv"
                    points.append((shape, sigma_for_gamma(w, g), task_seed, train, test, flow, name))
                    keys.append((L, w, g))
    results = _pmap(_train_point, points, jobs)
    groups: dict = {}
    any_bad = False
    for (name, text, stats), key in zip(results, keys):
        out.write(name, text)
        groups.setdefault(key, []).append(stats)
        any_bad |= stats["status"] != "ok"
    table = []
    for (L, w, g), stats in groups.items():
        ok = [s for s in stats if s["status"] == "ok"]
        tests = [s["final_test_loss"] for s in ok if s["final_test_loss"] is not None]
        table.append({
            "depth": L, "width": w, "gamma": g, "runs": len(stats), "diverged": len(stats) - len(ok),
            "median_test_loss": float(np.median(tests)) if tests else None,
            "median_train_loss": float(np.median([s["final_train_loss"] for s in ok])) if ok else None,
            "median_rank": float(np.median([s["final_rank"] for s in ok])) if ok else None,
            "median_plateaus": float(np.median([s["plateau_count"] for s in ok])) if ok else None,
            "median_ranks_visited": float(np.median([len(s["rank_sequence"]) for s in ok]))
            if ok else None,
            "rank_sequences": [s["rank_sequence"] for s in ok],
        })
    summary = {"table": table}
    gammas = sorted(float(g) for g in b["gammas"])
    checks = {}
    wanted = set(b.get("checks", ["test", "rank"]))
    if len(gammas) >= 2:
        lo, hi = gammas[0], gammas[-1]
        for L in depths:
            for w in b["widths"]:
                a = next(t for t in table if (t["depth"], t["width"], t["gamma"]) == (L, w, lo))
                c = next(t for t in table if (t["depth"], t["width"], t["gamma"]) == (L, w, hi))
                if a["median_train_loss"] is None or c["median_train_loss"] is None:
                    continue
                if "test" in wanted and None not in (a["median_test_loss"], c["median_test_loss"]):
                    checks[f"L{L}_w{w}_test"] = c["median_test_loss"] < a["median_test_loss"]
                if "rank" in wanted:
                    checks[f"L{L}_w{w}_rank"] = c["median_rank"] <= a["median_rank"]
                if "plateaus" in wanted:
                    checks[f"L{L}_w{w}_plateaus"] = c["median_plateaus"] > a["median_plateaus"]
                if "incremental" in wanted:
                    checks[f"L{L}_w{w}_incremental"] = (c["median_ranks_visited"]
                                                        > a["median_ranks_visited"])
    summary["checks"] = checks
    if any_bad:
        summary["non_finite_points"] = [k for (k, _, s) in results if s["status"] != "ok"]
    return summary


_HANDLERS = {
    "run": _run_single, "figure1": _run_single, "greedy": _run_greedy,
    "escape_sweep": _run_escape_sweep, "regime_sweep": _run_regime_sweep,
    "ntk_check": _run_ntk_check, "refine_path": _run_refine_path, "figure3": _run_figure3,
}


def _pmap(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- manifest and entry points


def git_blob_hash(data: bytes) -> str:
    """Content hash computed the way git names blobs."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _versions() -> dict:
    from importlib import metadata
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "dln_lab": own}


def _default_jobs() -> int:
    env = os.environ.get("DLN_LAB_JOBS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def run_config(obj: dict, out_dir, jobs: int | None = None, seed_override: int | None = None) -> int:
    """Validate and run a config object; returns the process exit status."""
    try:
        if seed_override is not None and isinstance(obj, dict):
            obj = dict(obj, seed=seed_override)
        cfg = validate_config(obj)
    except ConfigError as exc:
        print(f"config error at {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return _execute(cfg, Path(out_dir), jobs)


def run_experiment(config_path, out_dir, jobs: int | None = None,
                   seed_override: int | None = None) -> int:
    """Run the experiment described by a JSON file (or ``preset:NAME``)."""
    try:
        if str(config_path).startswith("preset:"):
            obj = preset(str(config_path)[len("preset:"):])
        else:
            text = Path(config_path).read_text()
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"line {exc.lineno} column {exc.colno}", exc.msg) from None
    except (OSError, KeyError) as exc:
        print(f"config error at {config_path}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error at {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run_config(obj, out_dir, jobs, seed_override)


def _execute(cfg: ExperimentConfig, out_dir: Path, jobs: int | None) -> int:
    jobs = jobs if jobs is not None else _default_jobs()
    out_dir.mkdir(parents=True, exist_ok=True)
    out = _Outputs(out_dir)
    status = EXIT_OK
    try:
        summary = _HANDLERS[cfg.kind](cfg, out, jobs)
        if "non_finite_points" in summary:
            status = EXIT_NONFINITE
    except NonFinite as exc:
        summary = {"error": "non_finite", "message": str(exc)}
        status = EXIT_NONFINITE
    except ConfigError as exc:
        for name in out.files:
            (out_dir / name).unlink(missing_ok=True)
        print(f"config error at {exc}", file=sys.stderr)
        return EXIT_CONFIG
    summary = {"kind": cfg.kind, "seed": cfg.seed, **summary}
    if "checks" in summary:
        summary["all_checks_pass"] = all(summary["checks"].values())
    out.write_json("summary.json", summary)
    manifest = {
        "config": cfg.raw,
        "versions": _versions(),
        "files": {name: {"git_blob_sha1": git_blob_hash(text.encode()), "bytes": len(text.encode())}
                  for name, text in sorted(out.files.items())},
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
    if status == EXIT_NONFINITE:
        print("integration produced non-finite values; partial outputs kept", file=sys.stderr)
    return status


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dln-lab", description="Deep linear network experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment config (path or preset:NAME)")
    run.add_argument("config")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--jobs", type=int, default=None, help="parallel sweep workers "
                     "(default: $DLN_LAB_JOBS or 1)")
    run.add_argument("--seed-override", type=int, default=None)
    sub.add_parser("presets", help="list built-in presets")
    show = sub.add_parser("show-preset", help="print a preset config as JSON")
    show.add_argument("name")
    args = parser.parse_args(argv)
    if args.command == "presets":
        print(list_presets())
        return EXIT_OK
    if args.command == "show-preset":
        try:
            print(json.dumps(preset(args.name), indent=2))
        except KeyError as exc:
            print(exc, file=sys.stderr)
            return EXIT_CONFIG
        return EXIT_OK
    return run_experiment(args.config, args.out, args.jobs, args.seed_override)


if __name__ == "__main__":
    sys.exit(main())
