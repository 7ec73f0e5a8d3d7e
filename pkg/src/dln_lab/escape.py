"""Escape from the saddle at the origin.

Singular-triplet analysis of ``G = grad C(0)``, escape directions and speeds,
escape cones, closed-form escape-norm curves, the rescale law of homogeneous
flows, and numerical refinement of the optimal escape path by fixed-point
iteration.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .core import NetShape, Params, product_map, pullback, unflatten
from .costs import LocalizedCost, TraceCost, homogeneous_value
from .flow import FlowConfig, Trajectory, gradient_field, integrate
from .symmetry import include


class MultiplicityNotOne(ValueError):
    """The top singular value of ``grad C(0)`` is (numerically) repeated."""

    def __init__(self, message, gap=0.0, s1=0.0):
        super().__init__(message)
        self.gap = gap
        self.s1 = s1


class TailNotNegligible(RuntimeError):
    pass


class NoContraction(RuntimeError):
    def __init__(self, message, ratios=()):
        super().__init__(message)
        self.ratios = list(ratios)


MULTIPLICITY_RTOL = 1e-8


def optimal_speed(s1: float, L: int) -> float:
    """``s* = L^(-(L-2)/2) s1``."""
    return float(L) ** (-(L - 2) / 2.0) * s1


def width_one_direction(u: np.ndarray, v: np.ndarray, L: int, sign: float = -1.0) -> Params:
    """Unit-norm width-1 parameters ``(sign v^T, 1, ..., 1, u) / sqrt(L)``."""
    if L < 2:
        raise ValueError("escape directions need depth >= 2")
    c = 1.0 / math.sqrt(L)
    layers = [sign * c * np.asarray(v, dtype=float)[None, :]]
    layers += [np.array([[c]]) for _ in range(L - 2)]
    layers.append(c * np.asarray(u, dtype=float)[:, None])
    return Params(layers)


@dataclass(frozen=True, eq=False)
class EscapeProfile:
    u1: np.ndarray
    v1: np.ndarray
    s1: float
    gap: float
    s_star: float
    rho_star: Params
    depth: int
    G: np.ndarray = field(repr=False)


def _zero_gradient(cost) -> np.ndarray:
    if isinstance(cost, LocalizedCost):
        return cost.homogeneous_part.G
    return cost.zero_gradient()


def escape_profile(cost, L: int) -> EscapeProfile:
    """Top singular triplet of ``grad C(0)``, optimal speed and the direction ``rho*``.

    ``rho*`` carries the minus sign on its first layer so that ``H(rho*) < 0``.
    """
    G = np.asarray(_zero_gradient(cost), dtype=float)
    U, s, Vt = np.linalg.svd(G)
    s1 = float(s[0])
    if s1 == 0.0:
        raise ValueError("grad C(0) vanishes: nothing to escape")
    s2 = float(s[1]) if len(s) > 1 else 0.0
    gap = s1 - s2
    if gap <= MULTIPLICITY_RTOL * s1:
        raise MultiplicityNotOne(
            f"top singular value of grad C(0) is repeated (s1={s1:.6g}, gap={gap:.3g})", gap, s1
        )
    u1, v1 = U[:, 0], Vt[0]
    return EscapeProfile(u1=u1, v1=v1, s1=s1, gap=gap, s_star=optimal_speed(s1, L),
                         rho_star=width_one_direction(u1, v1, L), depth=L, G=G)


def all_escape_directions(G: np.ndarray, L: int, rtol: float = 1e-12) -> list[tuple[Params, float]]:
    """Every width-1 escape direction with its signed speed, fastest first.

    A minus sign on the first layer gives ``H < 0`` and speed ``+s_i / L^((L-2)/2)``,
    a plus sign gives the opposite speed. Singular values below ``rtol * s1`` are skipped.
    """
    G = np.asarray(G, dtype=float)
    U, s, Vt = np.linalg.svd(G)
    if s[0] == 0.0:
        raise ValueError("G must be nonzero")
    out = []
    for i, si in enumerate(s):
        if si <= rtol * s[0]:
            continue
        speed = optimal_speed(float(si), L)
        out.append((width_one_direction(U[:, i], Vt[i], L, -1.0), speed))
        out.append((width_one_direction(U[:, i], Vt[i], L, +1.0), -speed))
    out.sort(key=lambda pair: -pair[1])
    return out


def escape_cone_ratio(theta: Params, G: np.ndarray) -> float:
    """``H(theta) / ||theta||^L``."""
    n = theta.norm()
    if n == 0.0:
        raise ValueError("the escape cone is not defined at the origin")
    return homogeneous_value(theta, G) / n ** theta.depth


def escape_cone_member(theta: Params, G: np.ndarray, L: int, eps: float) -> bool:
    """Strict membership ``H(theta)/||theta||^L < (-s* + eps)/L``."""
    if theta.depth != L:
        raise ValueError("theta depth does not match L")
    s_star = optimal_speed(float(np.linalg.norm(G, 2)), L)
    return escape_cone_ratio(theta, G) < (-s_star + eps) / L


def theoretical_escape_norm(t: float, L: int, s: float, T: float) -> float:
    """Norm along the optimal homogeneous escape path.

    ``exp(s (t + T))`` for ``L = 2``; ``(s (L-2) (T - t))^(-1/(L-2))`` for ``L > 2``,
    which blows up at ``t = T``.
    """
    if L < 2:
        raise ValueError("L must be >= 2")
    if L == 2:
        return math.exp(s * (t + T))
    if t >= T:
        raise ValueError(f"t={t} is past the blow-up time T={T}")
    return (s * (L - 2) * (T - t)) ** (-1.0 / (L - 2))


def escape_norm_bounds(t, norm0: float, s_star: float, eps: float, k: int):
    """Two-sided bounds on ``||theta(t)||`` for a flow started inside the ``eps``-cone.

    Returns ``(lower, upper)`` arrays; ``upper`` is ``inf`` past its blow-up time.
    """
    t = np.asarray(t, dtype=float)
    if k == 2:
        return norm0 * np.exp((s_star - 2 * eps) * t), norm0 * np.exp((s_star + eps) * t)
    base = norm0 ** (-(k - 2))

    def curve(rate):
        inner = base + (k - 2) * rate * t
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(inner > 0, np.abs(inner) ** (-1.0 / (k - 2)), np.inf)

    return curve(-s_star + 2 * eps), curve(-s_star - eps)


def _flow_final(theta0: Params, cost, duration: float, cfg: FlowConfig) -> Params:
    """Endpoint of the flow after ``duration``; the step is shrunk to divide it exactly."""
    if duration == 0:
        return theta0
    n = max(1, math.ceil(duration / cfg.step_size - 1e-9))
    run = cfg.replace(step_size=duration / n, max_steps=n, snapshot_every=n,
                      stop_loss=None, stop_grad_norm=None, stop_param_norm=None, max_time=None)
    return integrate(theta0, cost, run).final


def homogeneous_rescale_check(theta0: Params, G: np.ndarray, lam: float, t: float,
                              cfg: FlowConfig) -> float:
    """``||gamma(t, lam theta0) - lam gamma(lam^(L-2) t, theta0)||`` for the flow of ``Tr[G^T A]``."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    cost = TraceCost(G)
    L = theta0.depth
    left = _flow_final(theta0 * lam, cost, t, cfg)
    if lam == 1.0:
        return 0.0
    right = _flow_final(theta0, cost, lam ** (L - 2) * t, cfg) * lam
    return (left - right).norm()


def direction_convergence_stat(traj: Trajectory, G: np.ndarray, L: int) -> list[float]:
    """``H(theta)/||theta||^L + s*/L`` along a trajectory recorded with ``keep_params``."""
    if traj.params is None:
        raise ValueError("trajectory was recorded without parameters (set keep_params=True)")
    s_star = optimal_speed(float(np.linalg.norm(G, 2)), L)
    return [escape_cone_ratio(p, G) + s_star / L for p in traj.params]


def escape_time_scaling(theta0: Params, cost, cfg: FlowConfig, r: float, alphas) -> dict:
    """Escape times over an ``alpha`` sweep with the regression the theory predicts.

    For ``L = 2`` fits ``t_alpha`` against ``-log alpha`` (slope ``1/s*``); for
    ``L > 2`` fits ``log t_alpha`` against ``log alpha`` (slope ``-(L-2)``).
    """
    from .analysis import linear_fit
    from .flow import escape_time

    L = theta0.depth
    prof = escape_profile(cost, L)
    alphas = np.asarray(sorted(alphas, reverse=True), dtype=float)
    times = np.array([escape_time(theta0, cost, cfg, r, a) for a in alphas])
    if L == 2:
        fit = linear_fit(-np.log(alphas), times)
        theory = 1.0 / prof.s_star
    else:
        fit = linear_fit(np.log(alphas), np.log(times))
        theory = -(L - 2.0)
    return {"alphas": alphas.tolist(), "times": times.tolist(), "slope": fit[0],
            "intercept": fit[1], "r_squared": fit[2], "theory_slope": theory}


@dataclass
class PathGrid:
    times: np.ndarray
    values: list[Params]
    kind: str

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.kind not in ("homogeneous", "refined"):
            raise ValueError("kind must be 'homogeneous' or 'refined'")
        if len(self.times) != len(self.values):
            raise ValueError("times and values differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        shapes = {v.shape for v in self.values}
        if len(shapes) > 1:
            raise ValueError("path values have inconsistent shapes")

    def matrix(self) -> np.ndarray:
        """Values stacked as a ``(n_times, P)`` array."""
        return np.stack([v.flat() for v in self.values])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        P = self.values[0].shape.n_params if self.values else 0
        w.writerow(["t"] + [f"theta_{i}" for i in range(P)])
        for t, v in zip(self.times, self.values):
            w.writerow([format(float(t), ".17g")] + [format(float(x), ".17g") for x in v.flat()])
        return buf.getvalue()


@dataclass(frozen=True)
class GridSpec:
    """Time grid for path refinement.

    ``t_max`` defaults to where the homogeneous path has norm ``r/2``; ``t_min``
    defaults to the first point (stepping back geometrically) where the predicted
    tail of the correction integral drops below ``tol/10``.
    """

    n_points: int = 400
    r: float | None = None
    width: int = 1
    t_max: float | None = None
    t_min: float | None = None
    tail_bound: float | None = None
    max_span_factor: float = 1e6


def default_radius(s1: float, L: int) -> float:
    return 0.25 * s1 ** (1.0 / (L - 1))


def homogeneous_path_norm(t, L: int, s_star: float) -> np.ndarray:
    """Norm ``d(t)`` of the homogeneous optimal path normalised to blow up (or pass 1) at ``t=0``."""
    t = np.asarray(t, dtype=float)
    if L == 2:
        return np.exp(s_star * t)
    return (s_star * (L - 2) * (-t)) ** (-1.0 / (L - 2))


def _time_at_norm(d: float, L: int, s_star: float) -> float:
    if L == 2:
        return math.log(d) / s_star
    return -(d ** (-(L - 2))) / (s_star * (L - 2))


def _tail_estimate(cost, direction: Params, t: float, L: int, s_star: float) -> float:
    """Predicted ``int_{-inf}^t ||grad C_r - grad H||`` along the homogeneous path.

    The integrand scales like ``d^(2L-1)`` and ``d' = s* d^(L-1)``, so the tail is
    ``integrand(t) * d(t)^(2-L) / ((L+1) s*)``.
    """
    d = float(homogeneous_path_norm(t, L, s_star))
    theta = direction * d
    _, g = cost.param_value_and_grad(theta)
    gh = Params(pullback(theta.layers, cost.homogeneous_part.G))
    return (g - gh).norm() * d ** (2 - L) / ((L + 1) * s_star)


def refine_escape_path(cost, profile: EscapeProfile, grid_spec: GridSpec | None = None,
                       tol: float = 1e-10, max_iter: int = 100):
    """Fixed-point refinement of the optimal escape path of the localized cost.

    Starts from ``x0(t) = d(t) I(rho*)`` and iterates
    ``x_{n+1}(t) = x0(t) - int_{t_min}^t [grad C_r(x_n) - grad H(x0)] du``
    with trapezoid quadrature on a grid geometric in ``-t``. Returns the refined
    :class:`PathGrid` and the ratios of successive sup-norm updates.
    """
    spec = grid_spec or GridSpec()
    L = profile.depth
    s_star = profile.s_star
    r = spec.r if spec.r is not None else default_radius(profile.s1, L)
    if isinstance(cost, LocalizedCost):
        loc = cost
    else:
        loc = LocalizedCost(cost, TraceCost(profile.G), r)
    direction = include(profile.rho_star, spec.width) if spec.width > 1 else profile.rho_star
    shape: NetShape = direction.shape

    t_max = spec.t_max if spec.t_max is not None else _time_at_norm(loc.r / 2, L, s_star)
    if t_max >= 0:
        raise ValueError("grid must lie at negative times (t_max < 0); lower r")
    target = tol / 10
    if spec.t_min is None:
        t_min = 2 * t_max
        while _tail_estimate(loc, direction, t_min, L, s_star) > target:
            t_min *= 1.5
            if t_min < spec.max_span_factor * t_max:
                raise TailNotNegligible(
                    f"tail estimate still above {target:.3g} at t={t_min:.3g}; loosen tol"
                )
    else:
        t_min = spec.t_min
        if not t_min < t_max:
            raise ValueError("t_min must be below t_max")
    bound = spec.tail_bound if spec.tail_bound is not None else max(target, 1e-300)
    tail = _tail_estimate(loc, direction, t_min, L, s_star)
    if tail > bound and spec.t_min is not None:
        raise TailNotNegligible(
            f"correction tail {tail:.3g} at t_min={t_min:.4g} exceeds {bound:.3g}; extend the grid"
        )

    times = -np.geomspace(-t_min, -t_max, spec.n_points)
    d = homogeneous_path_norm(times, L, s_star)
    x0 = np.outer(d, direction.flat())
    field_fn = gradient_field(loc, shape)
    G = loc.homogeneous_part.G
    grad_h0 = np.stack([
        np.concatenate([g.ravel() for g in pullback(unflatten(row, shape), G)]) for row in x0
    ])

    x = x0.copy()
    ratios: list[float] = []
    prev_diff = None
    streak = 0
    for _ in range(max_iter):
        grads = np.stack([field_fn(row)[1] for row in x])
        correction = cumulative_trapezoid(grads - grad_h0, times, axis=0, initial=0.0)
        x_new = x0 - correction
        diff = float(np.max(np.linalg.norm(x_new - x, axis=1)))
        x = x_new
        if prev_diff is not None and prev_diff > 0:
            ratio = diff / prev_diff
            ratios.append(ratio)
            streak = streak + 1 if ratio > 1 else 0
            if streak >= 3:
                raise NoContraction("successive updates grew for 3 iterations", ratios)
        if diff <= tol:
            break
        prev_diff = diff
    values = [Params(unflatten(row.copy(), shape)) for row in x]
    return PathGrid(times, values, "refined"), ratios


def homogeneous_path(profile: EscapeProfile, times, width: int = 1) -> PathGrid:
    """The optimal homogeneous escape path sampled at ``times``."""
    direction = include(profile.rho_star, width) if width > 1 else profile.rho_star
    d = homogeneous_path_norm(times, profile.depth, profile.s_star)
    return PathGrid(times, [direction * float(di) for di in d], "homogeneous")


def flow_residual(path: PathGrid, cost) -> float:
    """``sup_t ||x'(t) + grad C(x(t))||`` with ``x'`` from second-order finite differences."""
    X = path.matrix()
    dX = np.gradient(X, path.times, axis=0, edge_order=2)
    fn = gradient_field(cost, path.values[0].shape)
    res = [np.linalg.norm(dx + fn(x)[1]) for x, dx in zip(X, dX)]
    return float(max(res))


__all__ = [
    "EscapeProfile", "MultiplicityNotOne", "TailNotNegligible", "NoContraction", "PathGrid",
    "GridSpec", "optimal_speed", "width_one_direction", "escape_profile",
    "all_escape_directions", "escape_cone_ratio", "escape_cone_member",
    "theoretical_escape_norm", "escape_norm_bounds", "homogeneous_rescale_check",
    "direction_convergence_stat", "escape_time_scaling", "refine_escape_path",
    "homogeneous_path", "homogeneous_path_norm", "flow_residual", "default_radius",
]
