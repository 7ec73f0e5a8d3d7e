"""Greedy low-rank training: gradient descent at a fixed width, then widen by one unit
along the top singular direction of the current cost gradient.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .core import NetShape, Params, init_gaussian, product_map, rank_of
from .costs import LocalizedCost, TraceCost
from .escape import MULTIPLICITY_RTOL, width_one_direction
from .flow import FlowConfig, Trajectory, integrate


class MaxWidthExceeded(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NoFiniteMinimum(ValueError):
    pass


@dataclass(frozen=True)
class GreedyConfig:
    eps: float = 1e-3
    inner_steps: int = 50_000
    lr: float = 1e-2
    c_min: float = 0.0
    max_width: int = 10
    rank_tol: float = 1e-1
    raise_on_max_width: bool = False

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.max_width < 1:
            raise ValueError("max_width must be >= 1")
        if not self.rank_tol > 0:
            raise ValueError("rank_tol must be positive")


@dataclass
class GreedyStage:
    width: int
    params: Params
    loss: float
    top_singular_value: float
    rank: int
    # set when the triplet used to widen after this stage had a repeated top singular value
    multiplicity_flag: bool = False
    gap: float = float("nan")
    trajectory: Trajectory | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {
            "width": self.width, "loss": self.loss,
            "top_singular_value": self.top_singular_value, "rank": self.rank,
            "multiplicity_flag": self.multiplicity_flag,
            "gap": None if np.isnan(self.gap) else self.gap,
            "params": self.params.to_json(),
        }


@dataclass
class GreedyReport:
    stages: list[GreedyStage]
    final: Params
    terminated: str
    config: GreedyConfig

    def rank_sequence(self) -> list[int]:
        seq = []
        for st in self.stages:
            if st.rank and (not seq or seq[-1] != st.rank):
                seq.append(st.rank)
        return seq

    def to_json(self) -> dict:
        return {
            "terminated": self.terminated,
            "config": asdict(self.config),
            "stages": [st.to_json() for st in self.stages],
            "final": self.final.to_json(),
        }


def _top_triplet(M: np.ndarray):
    U, s, Vt = np.linalg.svd(M)
    s2 = s[1] if len(s) > 1 else 0.0
    return U[:, 0], float(s[0]), Vt[0], float(s[0] - s2)


def widen(theta: Params, u: np.ndarray, v: np.ndarray, eps: float) -> Params:
    """Add one hidden unit: row ``-eps v^T`` to ``W_1``, diagonal ``eps`` to middle layers,
    column ``eps u`` to ``W_L``. The product changes by ``-eps^L u v^T``."""
    L = theta.depth
    if L < 2:
        raise ValueError("widening needs depth >= 2")
    out = []
    for i, W in enumerate(theta.layers):
        if i == 0:
            out.append(np.vstack([W, -eps * np.asarray(v)[None, :]]))
        elif i == L - 1:
            out.append(np.hstack([W, eps * np.asarray(u)[:, None]]))
        else:
            big = np.zeros((W.shape[0] + 1, W.shape[1] + 1))
            big[:-1, :-1] = W
            big[-1, -1] = eps
            out.append(big)
    return Params(out)


def _is_linear(cost) -> bool:
    if isinstance(cost, TraceCost):
        return True
    return isinstance(cost, LocalizedCost) and isinstance(cost.base, TraceCost)


def greedy_low_rank(cost, shape_template: NetShape, cfg: GreedyConfig,
                    keep_trajectories: bool = False) -> GreedyReport:
    """Run the greedy procedure; only depth and input/output sizes of ``shape_template`` are used."""
    L = shape_template.depth
    if L < 2:
        raise ValueError("greedy procedure needs depth >= 2")
    G0 = cost.zero_gradient()
    u, s, v, gap = _top_triplet(G0)
    if s == 0.0:
        raise ValueError("grad C(0) vanishes: the origin is already optimal")
    first_flag = gap <= MULTIPLICITY_RTOL * s
    theta = width_one_direction(u, v, L) * (cfg.eps * np.sqrt(L))
    inner = FlowConfig(step_size=cfg.lr, max_steps=cfg.inner_steps,
                       snapshot_every=cfg.inner_steps, rank_tol=cfg.rank_tol)
    stages: list[GreedyStage] = []
    width = 1
    terminated = "max_width"
    pending_flag, pending_gap = first_flag, gap
    while True:
        traj = integrate(theta, cost, inner)
        theta = traj.final
        A = product_map(theta)
        loss = cost.value(A)
        u, s, v, gap = _top_triplet(cost.gradient(A))
        stage = GreedyStage(width, theta, float(loss), s, rank_of(A, cfg.rank_tol),
                            pending_flag, pending_gap, traj if keep_trajectories else None)
        stages.append(stage)
        if not np.isfinite(loss):
            raise NoFiniteMinimum("loss diverged during the inner descent")
        if loss < cfg.c_min + cfg.eps:
            terminated = "converged"
            break
        if width >= cfg.max_width:
            break
        pending_flag, pending_gap = gap <= MULTIPLICITY_RTOL * s, gap
        theta = widen(theta, u, v, cfg.eps)
        width += 1
    report = GreedyReport(stages, theta, terminated, cfg)
    if terminated == "max_width" and cfg.raise_on_max_width:
        raise MaxWidthExceeded(f"loss still {stages[-1].loss:.3g} at width {width}", report)
    return report


@dataclass
class GreedyFlowComparison:
    status: str
    relative_difference: float
    flow_ranks: list[int]
    greedy_ranks: list[int]
    flow_final_loss: float
    greedy_final_loss: float
    flow_trajectory: Trajectory | None = field(default=None, repr=False)
    greedy_report: GreedyReport | None = field(default=None, repr=False)

    @property
    def ranks_match(self) -> bool:
        return self.flow_ranks == self.greedy_ranks

    def to_json(self) -> dict:
        return {
            "status": self.status, "relative_difference": self.relative_difference,
            "flow_ranks": self.flow_ranks, "greedy_ranks": self.greedy_ranks,
            "ranks_match": self.ranks_match, "flow_final_loss": self.flow_final_loss,
            "greedy_final_loss": self.greedy_final_loss,
        }


def greedy_vs_flow(cost, shape: NetShape, alpha: float, seed: int, cfg_flow: FlowConfig,
                   cfg_greedy: GreedyConfig) -> GreedyFlowComparison:
    """Gradient flow from ``alpha * theta0`` (standard Gaussian ``theta0``) against the greedy run.

    Compares final matrices in relative Frobenius norm and the visited rank sequences.
    A linear cost has no finite minimum; that case is reported, not compared.
    """
    if _is_linear(cost):
        return GreedyFlowComparison("no_finite_minimum", float("nan"), [], [], float("-inf"),
                                    float("-inf"))
    theta0 = init_gaussian(shape, 1.0, seed) * alpha
    traj = integrate(theta0, cost, cfg_flow.replace(rank_tol=cfg_greedy.rank_tol))
    report = greedy_low_rank(cost, shape, cfg_greedy)
    A_flow = product_map(traj.final)
    A_greedy = product_map(report.final)
    scale = max(float(np.linalg.norm(A_greedy)), 1e-300)
    return GreedyFlowComparison(
        "ok", float(np.linalg.norm(A_flow - A_greedy)) / scale, traj.rank_sequence(),
        report.rank_sequence(), float(traj.loss_train[-1]), report.stages[-1].loss, traj, report,
    )


__all__ = [
    "GreedyConfig", "GreedyStage", "GreedyReport", "GreedyFlowComparison", "MaxWidthExceeded",
    "NoFiniteMinimum", "widen", "greedy_low_rank", "greedy_vs_flow",
]
