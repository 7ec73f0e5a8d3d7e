"""Deep linear network parameters, the product map and its exact gradient."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class MalformedParams(ValueError):
    pass


@dataclass(frozen=True)
class NetShape:
    """Widths ``(n_0, ..., n_L)`` of a depth-``L`` linear network."""

    widths: tuple[int, ...]

    def __post_init__(self):
        widths = tuple(int(n) for n in self.widths)
        if len(widths) < 2:
            raise ValueError("a network needs at least two widths (depth >= 1)")
        if any(n < 1 for n in widths):
            raise ValueError(f"widths must be positive, got {widths}")
        object.__setattr__(self, "widths", widths)

    @classmethod
    def rectangular(cls, depth: int, width: int, n_in: int, n_out: int) -> "NetShape":
        if depth < 1:
            raise ValueError("depth must be >= 1")
        return cls((n_in,) + (width,) * (depth - 1) + (n_out,))

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    @property
    def is_rectangular(self) -> bool:
        hidden = self.widths[1:-1]
        return len(set(hidden)) <= 1

    @property
    def hidden_width(self) -> int | None:
        """Common hidden width ``w``; ``None`` for depth 1 or non-rectangular nets."""
        hidden = self.widths[1:-1]
        if not hidden or len(set(hidden)) != 1:
            return None
        return hidden[0]

    @property
    def n_params(self) -> int:
        return sum(a * b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def layer_shapes(self) -> list[tuple[int, int]]:
        return [(self.widths[i + 1], self.widths[i]) for i in range(self.depth)]


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    if arr.ndim != 2:
        raise MalformedParams(f"layers must be 2-D matrices, got ndim={arr.ndim}")
    arr.setflags(write=False)
    return arr


class Params:
    """Weights ``(W_1, ..., W_L)`` stored input-to-output; ``W_l`` is ``n_l x n_{l-1}``.

    Instances are immutable and behave like vectors in R^P under ``+``, ``-`` and
    scalar multiplication, with the flattened-concatenation inner product.
    """

    __slots__ = ("layers",)
    # let numpy scalars defer to __rmul__ instead of broadcasting over a Params
    __array_ufunc__ = None

    def __init__(self, layers: Iterable):
        layers = tuple(_frozen(W) for W in layers)
        if not layers:
            raise MalformedParams("need at least one layer")
        for lo, hi in zip(layers[:-1], layers[1:]):
            if hi.shape[1] != lo.shape[0]:
                raise MalformedParams(
                    f"layer dimensions do not chain: {lo.shape} followed by {hi.shape}"
                )
        object.__setattr__(self, "layers", layers)

    def __setattr__(self, name, value):
        raise AttributeError("Params is immutable")

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def shape(self) -> NetShape:
        return NetShape((self.layers[0].shape[1],) + tuple(W.shape[0] for W in self.layers))

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i) -> np.ndarray:
        return self.layers[i]

    def __iter__(self):
        return iter(self.layers)

    def __repr__(self):
        return f"Params(widths={self.shape.widths})"

    def _check(self, other: "Params"):
        if not isinstance(other, Params) or self.shape != other.shape:
            raise MalformedParams("Params shapes differ")

    def __add__(self, other: "Params") -> "Params":
        self._check(other)
        return Params(a + b for a, b in zip(self.layers, other.layers))

    def __sub__(self, other: "Params") -> "Params":
        self._check(other)
        return Params(a - b for a, b in zip(self.layers, other.layers))

    def __mul__(self, c: float) -> "Params":
        return Params(c * a for a in self.layers)

    __rmul__ = __mul__

    def __neg__(self) -> "Params":
        return self * -1.0

    def dot(self, other: "Params") -> float:
        self._check(other)
        return float(sum(np.vdot(a, b) for a, b in zip(self.layers, other.layers)))

    def norm(self) -> float:
        return float(np.sqrt(sum(np.vdot(a, a) for a in self.layers)))

    def flat(self) -> np.ndarray:
        return np.concatenate([W.ravel() for W in self.layers])

    @classmethod
    def from_flat(cls, x: np.ndarray, shape: NetShape) -> "Params":
        return cls(unflatten(x, shape))

    def allclose(self, other: "Params", atol: float = 0.0, rtol: float = 1e-12) -> bool:
        return self.shape == other.shape and all(
            np.allclose(a, b, atol=atol, rtol=rtol) for a, b in zip(self.layers, other.layers)
        )

    def to_json(self) -> dict:
        return {
            "widths": list(self.shape.widths),
            "layers": [W.tolist() for W in self.layers],
        }

    @classmethod
    def from_json(cls, obj: dict | str) -> "Params":
        if isinstance(obj, str):
            obj = json.loads(obj)
        params = cls(obj["layers"])
        if "widths" in obj and tuple(obj["widths"]) != params.shape.widths:
            raise MalformedParams(
                f"declared widths {obj['widths']} disagree with layers {params.shape.widths}"
            )
        return params


# Gradients share the parameter layout.
GradVec = Params


def unflatten(x: np.ndarray, shape: NetShape) -> list[np.ndarray]:
    """Views of a flat vector as the layer matrices of ``shape`` (no copy)."""
    out, pos = [], 0
    for rows, cols in shape.layer_shapes():
        out.append(x[pos:pos + rows * cols].reshape(rows, cols))
        pos += rows * cols
    if pos != x.size:
        raise MalformedParams(f"flat vector has {x.size} entries, shape needs {pos}")
    return out


def zeros(shape: NetShape) -> Params:
    return Params(np.zeros(s) for s in shape.layer_shapes())


def product_map(theta: Params | Sequence[np.ndarray]) -> np.ndarray:
    """``A_theta = W_L ... W_1`` as an ``n_L x n_0`` matrix."""
    layers = theta.layers if isinstance(theta, Params) else list(theta)
    A = layers[0]
    for W in layers[1:]:
        if W.shape[1] != A.shape[0]:
            raise MalformedParams(f"cannot chain {A.shape} into {W.shape}")
        A = W @ A
    return np.array(A, dtype=float)


def flank_products(layers: Sequence[np.ndarray]):
    """Prefix ``W_{l-1}...W_1`` and suffix ``W_L...W_{l+1}`` of every layer.

    Entries are ``None`` where the product is empty (identity).
    """
    L = len(layers)
    prefix = [None] * L
    for i in range(1, L):
        prefix[i] = layers[i - 1] if prefix[i - 1] is None else layers[i - 1] @ prefix[i - 1]
    suffix = [None] * L
    for i in range(L - 2, -1, -1):
        suffix[i] = layers[i + 1] if suffix[i + 1] is None else suffix[i + 1] @ layers[i + 1]
    return prefix, suffix


def pullback(layers: Sequence[np.ndarray], G: np.ndarray) -> list[np.ndarray]:
    """Layer gradients of ``theta -> <G, A_theta>``: ``S_l^T G P_l^T`` for every layer."""
    prefix, suffix = flank_products(layers)
    grads = []
    for P, S in zip(prefix, suffix):
        g = G if S is None else S.T @ G
        if P is not None:
            g = g @ P.T
        grads.append(g)
    return grads


def loss_gradient(theta: Params, cost) -> GradVec:
    """Exact gradient of ``theta -> C(A_theta)``."""
    if hasattr(cost, "param_value_and_grad"):
        return cost.param_value_and_grad(theta)[1]
    G = cost.gradient(product_map(theta))
    return Params(pullback(theta.layers, G))


def loss_value(theta: Params, cost) -> float:
    if hasattr(cost, "param_value_and_grad"):
        return cost.param_value_and_grad(theta)[0]
    return cost.value(product_map(theta))


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``seed``."""
    return np.random.Generator(np.random.Philox(key=int(seed)))


def init_gaussian(shape: NetShape, sigma: float, seed: int) -> Params:
    """i.i.d. ``N(0, sigma^2)`` entries, drawn layer by layer in row-major order."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return zeros(shape)
    z = make_rng(seed).standard_normal(shape.n_params)
    return Params(unflatten(sigma * z, shape))


def sigma_for_gamma(width: int, gamma: float) -> float:
    """Standard deviation with variance ``w^-gamma``."""
    return float(width) ** (-gamma / 2.0)


def rank_of(A: np.ndarray, tol: float = 1e-1) -> int:
    """Number of singular values strictly above ``tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    A = np.asarray(A, dtype=float)
    if A.size == 0:
        return 0
    return int(np.sum(np.linalg.svd(A, compute_uv=False) > tol))


def balance_defect_layers(layers: Sequence[np.ndarray]) -> float:
    """``max_l ||W_l W_l^T - W_{l+1}^T W_{l+1}||_F`` (0 for depth 1)."""
    worst = 0.0
    for lo, hi in zip(layers[:-1], layers[1:]):
        worst = max(worst, float(np.linalg.norm(lo @ lo.T - hi.T @ hi)))
    return worst
