"""Hidden-layer rotations, width inclusions, balancedness and the NTK-parametrization map."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import NetShape, Params, balance_defect_layers, make_rng, product_map, pullback


class WidthMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Rotation:
    """Orthogonal factors ``(O_1, ..., O_{L-1})`` acting on the hidden layers."""

    ops: tuple

    def __post_init__(self):
        ops = tuple(np.array(O, dtype=float) for O in self.ops)
        if not ops:
            raise ValueError("a rotation needs at least one factor (depth >= 2)")
        w = ops[0].shape[0]
        for O in ops:
            if O.shape != (w, w):
                raise WidthMismatch("rotation factors must all be w x w")
            if np.linalg.norm(O.T @ O - np.eye(w)) > 1e-10:
                raise ValueError("rotation factor is not orthogonal")
            O.setflags(write=False)
        object.__setattr__(self, "ops", ops)

    @property
    def width(self) -> int:
        return self.ops[0].shape[0]

    @property
    def depth(self) -> int:
        return len(self.ops) + 1

    def inverse(self) -> "Rotation":
        return Rotation(O.T for O in self.ops)


def _require_rectangular(theta: Params) -> int:
    w = theta.shape.hidden_width
    if w is None:
        raise WidthMismatch(f"need a rectangular network of depth >= 2, got widths {theta.shape.widths}")
    return w


def apply_rotation(R: Rotation, theta: Params) -> Params:
    """``(O_1 W_1, O_2 W_2 O_1^T, ..., W_L O_{L-1}^T)``; leaves ``A_theta`` unchanged.

    The action is linear in ``theta``, so the same call rotates gradients.
    """
    w = _require_rectangular(theta)
    if R.width != w or R.depth != theta.depth:
        raise WidthMismatch(
            f"rotation (w={R.width}, L={R.depth}) does not fit network (w={w}, L={theta.depth})"
        )
    out = []
    for i, W in enumerate(theta.layers):
        if i > 0:
            W = W @ R.ops[i - 1].T
        if i < theta.depth - 1:
            W = R.ops[i] @ W
        out.append(W)
    return Params(out)


def random_rotation(w: int, L: int, seed: int) -> Rotation:
    """Haar-random factors from QR of Gaussian matrices (signs fixed by ``diag(R) > 0``)."""
    if w < 1 or L < 2:
        raise ValueError("need w >= 1 and L >= 2")
    rng = make_rng(seed)
    ops = []
    for _ in range(L - 1):
        Q, Rm = np.linalg.qr(rng.standard_normal((w, w)))
        signs = np.sign(np.diag(Rm))
        signs[signs == 0] = 1.0
        ops.append(Q * signs)
    return Rotation(ops)


def include(theta: Params, w_target: int) -> Params:
    """Zero-pad the hidden layers of a rectangular network up to width ``w_target``."""
    w = _require_rectangular(theta)
    if w_target < w:
        raise WidthMismatch(f"cannot include width {w} into smaller width {w_target}")
    L = theta.depth
    out = []
    for i, W in enumerate(theta.layers):
        rows = w_target if i < L - 1 else W.shape[0]
        cols = w_target if i > 0 else W.shape[1]
        big = np.zeros((rows, cols))
        big[:W.shape[0], :W.shape[1]] = W
        out.append(big)
    return Params(out)


def padded_block_max(theta: Params, w_small: int) -> float:
    """Largest magnitude among the entries that :func:`include` from ``w_small`` sets to zero."""
    L = theta.depth
    worst = 0.0
    for i, W in enumerate(theta.layers):
        mask = np.ones(W.shape, dtype=bool)
        r = w_small if i < L - 1 else W.shape[0]
        c = w_small if i > 0 else W.shape[1]
        mask[:r, :c] = False
        if mask.any():
            worst = max(worst, float(np.abs(W[mask]).max()))
    return worst


def balancedness_defect(theta: Params) -> float:
    """``max_l ||W_l W_l^T - W_{l+1}^T W_{l+1}||_F``."""
    if theta.depth < 2:
        raise ValueError("balancedness needs depth >= 2")
    return balance_defect_layers(theta.layers)


def balanced_init(shape: NetShape, scale: float, seed: int) -> Params:
    """Random balanced parameters ``W_l = Q_l D Q_{l-1}^T``.

    ``Q_l`` has orthonormal columns (one frame per width) and ``D`` is a shared
    positive diagonal of size ``min(widths)`` with entries in ``scale * [0.5, 1.5]``.
    """
    rng = make_rng(seed)
    r = min(shape.widths)
    D = np.diag(scale * rng.uniform(0.5, 1.5, size=r))
    frames = []
    for n in shape.widths:
        Q, _ = np.linalg.qr(rng.standard_normal((n, r)))
        frames.append(Q)
    return Params(frames[i + 1] @ D @ frames[i].T for i in range(shape.depth))


def _fan_in_product(shape: NetShape) -> float:
    return float(np.prod(np.array(shape.widths[:-1], dtype=float)))


def ntk_param_map(theta_ntk: Params) -> tuple[Params, float]:
    """Classical initialization and time factor equivalent to an NTK-parametrized one.

    With ``p = n_0 ... n_{L-1}`` the classical flow from ``p^(-1/(2L)) theta_ntk``
    satisfies ``A(t) = A_ntk(c t)`` where ``c = p^(1/L)``.
    """
    p = _fan_in_product(theta_ntk.shape)
    L = theta_ntk.depth
    return theta_ntk * p ** (-1.0 / (2 * L)), p ** (1.0 / L)


@dataclass(frozen=True, eq=False)
class NtkParametrizedCost:
    """``C(A / sqrt(n_0 ... n_{L-1}))`` as a function of the raw weights."""

    base: object
    shape: NetShape

    @property
    def factor(self) -> float:
        return 1.0 / math.sqrt(_fan_in_product(self.shape))

    def matrix(self, theta: Params) -> np.ndarray:
        return self.factor * product_map(theta)

    def param_value_and_grad(self, theta: Params):
        A = self.matrix(theta)
        G = self.factor * self.base.gradient(A)
        return self.base.value(A), Params(pullback(theta.layers, G))


__all__ = [
    "Rotation", "WidthMismatch", "apply_rotation", "random_rotation", "include",
    "padded_block_max", "balancedness_defect", "balanced_init", "ntk_param_map",
    "NtkParametrizedCost",
]
