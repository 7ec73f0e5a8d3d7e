"""Gradient flow / gradient descent on ``theta -> C(A_theta)`` with trajectory diagnostics."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
from scipy.integrate import RK45
from scipy.optimize import brentq

from .core import NetShape, Params, balance_defect_layers, product_map, pullback, unflatten

INTEGRATORS = ("euler", "rk4", "rk45")
CSV_COLUMNS = ("step", "time", "loss_train", "loss_test", "grad_norm", "param_norm",
               "rank", "nuclear_norm", "balance_defect")


class NonFinite(FloatingPointError):
    """Parameters or loss became NaN/Inf, usually a step size that is too large."""

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class NeverEscaped(RuntimeError):
    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass(frozen=True)
class FlowConfig:
    step_size: float = 1e-2
    max_steps: int = 10_000
    snapshot_every: int = 1
    stop_loss: float | None = None
    stop_grad_norm: float | None = None
    stop_param_norm: float | None = None
    max_time: float | None = None
    integrator: str = "euler"
    rank_tol: float = 1e-1
    keep_params: bool = False
    # rk45 only
    rtol: float = 1e-10
    atol: float = 1e-14

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.integrator not in INTEGRATORS:
            raise ValueError(f"integrator must be one of {INTEGRATORS}")
        if not self.rank_tol > 0:
            raise ValueError("rank_tol must be positive")

    def replace(self, **changes) -> "FlowConfig":
        from dataclasses import replace
        return replace(self, **changes)


@dataclass
class Trajectory:
    step: np.ndarray
    time: np.ndarray
    loss_train: np.ndarray
    loss_test: np.ndarray
    grad_norm: np.ndarray
    param_norm: np.ndarray
    rank: np.ndarray
    nuclear_norm: np.ndarray
    balance_defect: np.ndarray
    final: Params
    stop_reason: str = "max_steps"
    params: list[Params] | None = None

    def __len__(self):
        return len(self.step)

    @property
    def has_test(self) -> bool:
        return not np.all(np.isnan(self.loss_test))

    def rank_sequence(self, skip_zero: bool = True) -> list[int]:
        """Ranks visited, consecutive duplicates removed."""
        seq = []
        for r in self.rank.tolist():
            if skip_zero and r == 0:
                continue
            if not seq or seq[-1] != r:
                seq.append(int(r))
        return seq

    def write_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for i in range(len(self)):
            test = self.loss_test[i]
            w.writerow([
                int(self.step[i]), _fmt(self.time[i]), _fmt(self.loss_train[i]),
                "" if math.isnan(test) else _fmt(test), _fmt(self.grad_norm[i]),
                _fmt(self.param_norm[i]), int(self.rank[i]), _fmt(self.nuclear_norm[i]),
                _fmt(self.balance_defect[i]),
            ])

    def to_csv(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


class _Recorder:
    def __init__(self, shape: NetShape, cfg: FlowConfig, test_cost):
        self.shape = shape
        self.cfg = cfg
        self.test_cost = test_cost
        self.rows: list[tuple] = []
        self.params: list[Params] | None = [] if cfg.keep_params else None
        self.last_step = -1

    def record(self, step, t, x, loss, g):
        layers = unflatten(x, self.shape)
        A = product_map(layers)
        s = np.linalg.svd(A, compute_uv=False)
        test = self.test_cost.value(A) if self.test_cost is not None else math.nan
        self.rows.append((
            step, t, loss, test, float(np.linalg.norm(g)), float(np.linalg.norm(x)),
            int(np.sum(s > self.cfg.rank_tol)), float(s.sum()), balance_defect_layers(layers),
        ))
        if self.params is not None:
            self.params.append(Params(layers))
        self.last_step = step

    def build(self, x, stop_reason) -> Trajectory:
        cols = list(zip(*self.rows)) if self.rows else [()] * len(CSV_COLUMNS)
        arr = [np.asarray(c, dtype=float) for c in cols]
        return Trajectory(
            step=arr[0].astype(int), time=arr[1], loss_train=arr[2], loss_test=arr[3],
            grad_norm=arr[4], param_norm=arr[5], rank=arr[6].astype(int),
            nuclear_norm=arr[7], balance_defect=arr[8],
            final=Params(unflatten(x.copy(), self.shape)), stop_reason=stop_reason,
            params=self.params,
        )


def gradient_field(cost, shape: NetShape) -> Callable[[np.ndarray], tuple[float, np.ndarray]]:
    """Flat-vector ``x -> (loss, grad)`` for the loss ``C(A_theta)``."""
    if hasattr(cost, "param_value_and_grad"):
        def field_fn(x):
            value, grad = cost.param_value_and_grad(Params(unflatten(x, shape)))
            return value, grad.flat()
        return field_fn

    def field_fn(x):
        layers = unflatten(x, shape)
        A = product_map(layers)
        grads = pullback(layers, cost.gradient(A))
        return cost.value(A), np.concatenate([g.ravel() for g in grads])
    return field_fn


@dataclass
class _State:
    step: int
    t: float
    x: np.ndarray
    loss: float
    grad: np.ndarray
    dense: Callable | None = field(default=None, repr=False)


def _iterate(x0: np.ndarray, fn, cfg: FlowConfig) -> Iterator[_State]:
    """Yield the state before the first step, then after each step."""
    x = np.array(x0, dtype=float)
    loss, g = fn(x)
    yield _State(0, 0.0, x, loss, g)
    eta = cfg.step_size
    if cfg.integrator == "rk45":
        t_bound = cfg.max_time if cfg.max_time is not None else np.inf
        solver = RK45(lambda t, y: -fn(y)[1], 0.0, x, t_bound, rtol=cfg.rtol,
                      atol=cfg.atol, first_step=eta)
        step = 0
        while step < cfg.max_steps and solver.status == "running":
            msg = solver.step()
            if solver.status == "failed":
                raise FloatingPointError(f"rk45 failed: {msg}")
            step += 1
            x = solver.y
            loss, g = fn(x)
            yield _State(step, float(solver.t), x, loss, g, dense=solver.dense_output)
        return
    for step in range(1, cfg.max_steps + 1):
        if cfg.integrator == "euler":
            x = x - eta * g
        else:
            k1 = g
            k2 = fn(x - 0.5 * eta * k1)[1]
            k3 = fn(x - 0.5 * eta * k2)[1]
            k4 = fn(x - eta * k3)[1]
            x = x - (eta / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        loss, g = fn(x)
        yield _State(step, step * eta, x, loss, g)


def _stop_reason(state: _State, cfg: FlowConfig) -> str | None:
    if cfg.stop_loss is not None and state.loss <= cfg.stop_loss:
        return "stop_loss"
    if cfg.stop_grad_norm is not None and np.linalg.norm(state.grad) <= cfg.stop_grad_norm:
        return "stop_grad_norm"
    if cfg.stop_param_norm is not None and np.linalg.norm(state.x) >= cfg.stop_param_norm:
        return "stop_param_norm"
    if cfg.max_time is not None and state.t >= cfg.max_time * (1 - 1e-12):
        return "max_time"
    return None


def integrate(theta0: Params, cost, cfg: FlowConfig, test_cost=None) -> Trajectory:
    """Run gradient descent (euler), classical RK4 or adaptive RK45 from ``theta0``.

    Diagnostics are recorded every ``cfg.snapshot_every`` steps plus the first
    and last step. Raises :class:`NonFinite` (with the partial trajectory) if the
    iterate blows up.
    """
    shape = theta0.shape
    rec = _Recorder(shape, cfg, test_cost)
    fn = gradient_field(cost, shape)
    reason = "max_steps"
    state = None
    last_good = theta0.flat()
    for state in _iterate(theta0.flat(), fn, cfg):
        if not (np.isfinite(state.loss) and np.all(np.isfinite(state.x))):
            partial = rec.build(last_good, "non_finite")
            raise NonFinite(f"non-finite iterate at step {state.step} (t={state.t:g})", partial)
        last_good = state.x
        stop = _stop_reason(state, cfg)
        if state.step % cfg.snapshot_every == 0 or stop is not None:
            rec.record(state.step, state.t, state.x, state.loss, state.grad)
        if stop is not None:
            reason = stop
            break
    else:
        if state is not None and rec.last_step != state.step:
            rec.record(state.step, state.t, state.x, state.loss, state.grad)
        if state is not None and cfg.integrator == "rk45" and state.step < cfg.max_steps:
            reason = "max_time"
    return rec.build(state.x, reason)


@dataclass
class Plateau:
    t_start: float
    t_end: float
    mean_loss: float


@dataclass
class PlateauReport:
    intervals: list[Plateau]

    @property
    def count(self) -> int:
        return len(self.intervals)


def detect_plateaus(traj: Trajectory, window: int = 5, slope_tol: float = 0.05,
                    sep_tol: float = 0.3, floor: float = 1e-12,
                    resolution: float = 1e-4) -> PlateauReport:
    """Flat stretches of the training loss.

    A plateau is a maximal run of at least ``window`` snapshots on which
    ``|d/dt log(loss - loss_final + floor)| <= slope_tol``. Runs whose level is
    within ``sep_tol`` (relative) of the previous run are merged. Runs belonging
    to the terminal phase are dropped: those whose level is within ``sep_tol`` of
    the final loss, or whose excess over it is below ``resolution`` times the
    initial excess (slow polynomial convergence of deep nets looks flat in log
    scale but is not a saddle).
    """
    t = np.asarray(traj.time, dtype=float)
    loss = np.asarray(traj.loss_train, dtype=float)
    if len(t) < max(window, 2):
        return PlateauReport([])
    final = loss[-1]
    excess = np.maximum(loss - final, 0.0)
    y = np.log(excess + floor)
    slope = np.gradient(y, t)
    flat = np.abs(slope) <= slope_tol

    runs = []
    i, n = 0, len(t)
    while i < n:
        if not flat[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and flat[j + 1]:
            j += 1
        if j - i + 1 >= window:
            runs.append([i, j])
        i = j + 1

    def level(run):
        return float(np.mean(loss[run[0]:run[1] + 1]))

    merged: list[list[int]] = []
    for run in runs:
        if merged:
            prev = level(merged[-1])
            if prev > 0 and (prev - level(run)) / prev < sep_tol:
                merged[-1][1] = run[1]
                continue
        merged.append(run)

    min_excess = resolution * max(loss[0] - final, 0.0)
    out = []
    for run in merged:
        lev = level(run)
        if lev <= 0 or (lev - final) / lev < sep_tol or lev - final <= min_excess:
            continue  # terminal phase
        out.append(Plateau(float(t[run[0]]), float(t[run[1]]), lev))
    return PlateauReport(out)


def escape_time(theta0: Params, cost, cfg: FlowConfig, r: float, alpha: float,
                strict: bool = False) -> float:
    """First time the flow started at ``alpha * theta0`` reaches norm ``r``.

    Returns ``inf`` when ``r`` is not reached within the step budget, or raises
    :class:`NeverEscaped` carrying the trajectory when ``strict``.
    """
    if not (r > 0 and alpha > 0):
        raise ValueError("r and alpha must be positive")
    start = alpha * theta0
    if start.norm() >= r:
        return 0.0
    fn = gradient_field(cost, start.shape)
    prev = None
    for state in _iterate(start.flat(), fn, cfg):
        if not np.all(np.isfinite(state.x)):
            raise NonFinite(f"non-finite iterate at step {state.step}")
        norm = float(np.linalg.norm(state.x))
        if norm >= r and prev is not None:
            t0, n0 = prev
            if state.dense is not None:
                sol = state.dense()
                return float(brentq(lambda s: np.linalg.norm(sol(s)) - r, t0, state.t,
                                    xtol=1e-14, rtol=1e-13))
            return t0 + (state.t - t0) * (r - n0) / (norm - n0)
        if cfg.max_time is not None and state.t >= cfg.max_time:
            break
        prev = (state.t, norm)
    if strict:
        traj = integrate(start, cost, cfg)
        raise NeverEscaped(f"norm {r} not reached", traj)
    return math.inf
