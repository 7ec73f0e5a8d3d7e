"""Convex costs on matrices and the localized cost used for escape-path refinement."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import Params, product_map, pullback


class CostDimensionError(ValueError):
    pass


def _matrix(a, name) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix")
    arr.setflags(write=False)
    return arr


class _MatrixCost:
    shape: tuple[int, int]

    def _check(self, A: np.ndarray):
        if A.shape != self.shape:
            raise CostDimensionError(f"expected a {self.shape} matrix, got {A.shape}")

    def zero_gradient(self) -> np.ndarray:
        return self.gradient(np.zeros(self.shape))


@dataclass(frozen=True, eq=False)
class MSECost(_MatrixCost):
    """``(1/N) ||A X - Y||_F^2`` for inputs ``X`` (n_0 x N) and labels ``Y`` (n_L x N)."""

    X: np.ndarray
    Y: np.ndarray
    _XXt: np.ndarray = field(init=False, repr=False)
    _YXt: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        X, Y = _matrix(self.X, "X"), _matrix(self.Y, "Y")
        if X.shape[1] != Y.shape[1] or X.shape[1] < 1:
            raise ValueError("X and Y must share a positive column count")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "_XXt", X @ X.T)
        object.__setattr__(self, "_YXt", Y @ X.T)

    @property
    def n_samples(self) -> int:
        return self.X.shape[1]

    @property
    def shape(self):
        return (self.Y.shape[0], self.X.shape[0])

    def value(self, A):
        self._check(A)
        R = A @ self.X - self.Y
        return float(np.vdot(R, R)) / self.n_samples

    def gradient(self, A):
        self._check(A)
        return (2.0 / self.n_samples) * (A @ self._XXt - self._YXt)

    def to_json(self):
        return {"type": "mse", "X": self.X.tolist(), "Y": self.Y.tolist()}


@dataclass(frozen=True, eq=False)
class MCCost(_MatrixCost):
    """``(1/N) sum_i (A_{k_i m_i} - A*_{k_i m_i})^2`` over the ``N`` observed entries."""

    A_star: np.ndarray
    observed: tuple[tuple[int, int], ...]
    _mask: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        A_star = _matrix(self.A_star, "A_star")
        obs = tuple((int(i), int(j)) for i, j in self.observed)
        if not obs:
            raise ValueError("matrix completion needs at least one observed entry")
        if len(set(obs)) != len(obs):
            raise ValueError("observed entries contain duplicates")
        n, m = A_star.shape
        mask = np.zeros((n, m), dtype=bool)
        for i, j in obs:
            if not (0 <= i < n and 0 <= j < m):
                raise ValueError(f"observed index {(i, j)} out of range for {A_star.shape}")
            mask[i, j] = True
        mask.setflags(write=False)
        object.__setattr__(self, "A_star", A_star)
        object.__setattr__(self, "observed", obs)
        object.__setattr__(self, "_mask", mask)

    @classmethod
    def from_mask(cls, A_star, mask) -> "MCCost":
        idx = np.argwhere(np.asarray(mask, dtype=bool))
        return cls(A_star, tuple(map(tuple, idx.tolist())))

    @property
    def mask(self) -> np.ndarray:
        return self._mask

    @property
    def n_observed(self) -> int:
        return len(self.observed)

    @property
    def shape(self):
        return self.A_star.shape

    def value(self, A):
        self._check(A)
        d = (A - self.A_star)[self._mask]
        return float(np.dot(d, d)) / self.n_observed

    def gradient(self, A):
        self._check(A)
        return np.where(self._mask, (2.0 / self.n_observed) * (A - self.A_star), 0.0)

    def complement(self) -> "MCCost | None":
        """Same target restricted to the unobserved entries (the test cost)."""
        if self._mask.all():
            return None
        return MCCost.from_mask(self.A_star, ~self._mask)

    def to_json(self):
        return {
            "type": "mc",
            "A_star": self.A_star.tolist(),
            "observed": [list(ij) for ij in self.observed],
        }


@dataclass(frozen=True, eq=False)
class TraceCost(_MatrixCost):
    """Linear cost ``Tr[G^T A]``; as a function of ``theta`` it is ``L``-homogeneous."""

    G: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "G", _matrix(self.G, "G"))

    @property
    def shape(self):
        return self.G.shape

    def value(self, A):
        self._check(A)
        return float(np.vdot(self.G, A))

    def gradient(self, A):
        self._check(A)
        return np.array(self.G)

    def to_json(self):
        return {"type": "trace", "G": self.G.tolist()}


def cutoff(x: float) -> float:
    """Smooth cutoff: 1 on [0, 1], 0 on [2, inf), quintic smoothstep in between."""
    if x <= 1.0:
        return 1.0
    if x >= 2.0:
        return 0.0
    y = x - 1.0
    return 1.0 - y * y * y * (10.0 - 15.0 * y + 6.0 * y * y)


def cutoff_derivative(x: float) -> float:
    if x <= 1.0 or x >= 2.0:
        return 0.0
    y = x - 1.0
    return -30.0 * y * y * (1.0 - y) ** 2


@dataclass(frozen=True, eq=False)
class LocalizedCost:
    """``C(0) + H(theta) + e(theta) h(||theta|| / r)`` with ``e = C(A_theta) - C(0) - H``.

    Equals the base loss inside the ball of radius ``r`` and the homogeneous
    part (plus the constant ``C(0)``) outside radius ``2r``.
    """

    base: _MatrixCost
    homogeneous_part: TraceCost
    r: float

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError("localization radius r must be positive")
        if isinstance(self.base, LocalizedCost):
            raise ValueError("nested localization is not supported")
        if self.base.shape != self.homogeneous_part.shape:
            raise CostDimensionError("base and homogeneous part have different shapes")

    @classmethod
    def around_origin(cls, base, r: float) -> "LocalizedCost":
        """Localize ``base`` with its own first-order part ``G = grad C(0)``."""
        return cls(base, TraceCost(base.zero_gradient()), r)

    @property
    def shape(self):
        return self.base.shape

    def param_value_and_grad(self, theta: Params):
        layers = theta.layers
        A = product_map(layers)
        G = self.homogeneous_part.G
        c0 = self.base.value(np.zeros(self.shape))
        h_val = self.homogeneous_part.value(A)
        e = self.base.value(A) - c0 - h_val
        norm = theta.norm()
        x = norm / self.r
        h = cutoff(x)
        value = c0 + h_val + e * h
        dA = G + h * (self.base.gradient(A) - G)
        grads = pullback(layers, dA)
        dh = cutoff_derivative(x)
        if dh != 0.0:
            coef = e * dh / (self.r * norm)
            grads = [g + coef * W for g, W in zip(grads, layers)]
        return value, Params(grads)

    def to_json(self):
        return {
            "type": "localized",
            "base": self.base.to_json(),
            "homogeneous_part": self.homogeneous_part.to_json(),
            "r": self.r,
        }


CostSpec = MSECost | MCCost | TraceCost | LocalizedCost


def cost_value(c, A: np.ndarray) -> float:
    return c.value(np.asarray(A, dtype=float))


def cost_gradient(c, A: np.ndarray) -> np.ndarray:
    return c.gradient(np.asarray(A, dtype=float))


def localized_value_gradient(c: LocalizedCost, theta: Params):
    return c.param_value_and_grad(theta)


def homogeneous_value(theta: Params, G: np.ndarray) -> float:
    """``H(theta) = Tr[G^T A_theta]``."""
    return float(np.vdot(G, product_map(theta)))


def homogeneous_gradient(theta: Params, G: np.ndarray) -> Params:
    return Params(pullback(theta.layers, np.asarray(G, dtype=float)))


def warn_if_zero_minimal(c, rtol: float = 1e-14) -> bool:
    """Warn when the zero matrix minimizes ``c``; escape analysis is then vacuous."""
    G = c.zero_gradient()
    scale = max(1.0, float(np.abs(G).max(initial=0.0)))
    if np.linalg.norm(G) <= rtol * scale:
        warnings.warn("grad C(0) vanishes: the origin is a global minimum, nothing to escape",
                      RuntimeWarning, stacklevel=2)
        return True
    return False


def cost_from_json(obj: dict):
    kind = obj.get("type")
    if kind == "mse":
        return MSECost(obj["X"], obj["Y"])
    if kind == "mc":
        return MCCost(obj["A_star"], tuple(tuple(ij) for ij in obj["observed"]))
    if kind == "trace":
        return TraceCost(obj["G"])
    if kind == "localized":
        return LocalizedCost(cost_from_json(obj["base"]),
                             cost_from_json(obj["homogeneous_part"]), float(obj["r"]))
    raise ValueError(f"unknown cost type {kind!r}")


__all__ = [
    "MSECost", "MCCost", "TraceCost", "LocalizedCost", "CostSpec", "CostDimensionError",
    "cost_value", "cost_gradient", "localized_value_gradient", "cutoff",
    "cutoff_derivative", "homogeneous_value", "homogeneous_gradient",
    "warn_if_zero_minimal", "cost_from_json",
]
