"""NTK tensors, constructive distances to saddles and minima, scaling fits and a random-matrix check."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from .core import NetShape, Params, flank_products, init_gaussian, make_rng, product_map, sigma_for_gamma


class RankDeficientFlank(ValueError):
    pass


# NTK


def ntk_tensor(theta: Params) -> np.ndarray:
    """``Theta[i, j, k, l] = <d A_ij / d theta, d A_kl / d theta>``, shape ``(n_L, n_0, n_L, n_0)``.

    Layer ``l`` contributes ``(S_l S_l^T)_{ik} (P_l^T P_l)_{jl}`` with ``P_l`` the
    product of the layers below and ``S_l`` the product of the layers above.
    """
    layers = theta.layers
    n_out, n_in = layers[-1].shape[0], layers[0].shape[1]
    prefix, suffix = flank_products(layers)
    out = np.zeros((n_out, n_in, n_out, n_in))
    for P, S in zip(prefix, suffix):
        left = np.eye(n_out) if S is None else S @ S.T
        right = np.eye(n_in) if P is None else P.T @ P
        out += np.einsum("ik,jl->ijkl", left, right)
    return out


def ntk_matrix(tensor: np.ndarray) -> np.ndarray:
    """The tensor as an ``(n_L n_0) x (n_L n_0)`` Gram matrix."""
    n_out, n_in = tensor.shape[:2]
    return tensor.reshape(n_out * n_in, n_out * n_in)


def ntk_expectation(L: int, w: int, gamma: float) -> float:
    """Diagonal value ``L w^((1-gamma)(L-1))`` of the expected NTK at initialization."""
    return L * float(w) ** ((1.0 - gamma) * (L - 1))


def ntk_change(theta_start: Params, theta_end: Params) -> tuple[float, float]:
    """``(||Theta(end) - Theta(start)||_F, ||Theta(start)||_F)`` over all four indices."""
    if theta_start.shape != theta_end.shape:
        raise ValueError("parameter shapes differ")
    t0 = ntk_tensor(theta_start)
    return float(np.linalg.norm(ntk_tensor(theta_end) - t0)), float(np.linalg.norm(t0))


def ntk_diagonal_stats(tensor: np.ndarray) -> tuple[float, float]:
    """Mean of the entries ``Theta[i,j,i,j]`` and mean absolute off-diagonal entry."""
    M = ntk_matrix(tensor)
    diag = np.diag(M)
    off = M[~np.eye(M.shape[0], dtype=bool)]
    return float(diag.mean()), float(np.abs(off).mean()) if off.size else 0.0


def ntk_sample(L: int, w: int, gamma: float, draws: int, seed: int,
               n_in: int = 2, n_out: int = 2) -> dict:
    """Monte-Carlo NTK at Gaussian initialization; per-draw diagonal means and off-diagonal entries."""
    shape = NetShape.rectangular(L, w, n_in, n_out)
    sigma = sigma_for_gamma(w, gamma)
    diag, off = [], []
    for k in range(draws):
        M = ntk_matrix(ntk_tensor(init_gaussian(shape, sigma, seed * 100_003 + k)))
        diag.append(float(np.diag(M).mean()))
        off.append(float(M[0, 1]))
    diag, off = np.array(diag), np.array(off)
    return {
        "expected": ntk_expectation(L, w, gamma),
        "diag_mean": float(diag.mean()),
        "offdiag_mean": float(off.mean()),
        "offdiag_se": float(off.std(ddof=1) / math.sqrt(draws)) if draws > 1 else math.inf,
    }


# Distances to critical points


def saddle_distance_upper(theta: Params) -> float:
    """Distance to the saddle obtained by zeroing the first and last layers."""
    if theta.depth < 2:
        raise ValueError("need depth >= 2")
    return math.hypot(float(np.linalg.norm(theta.layers[0])), float(np.linalg.norm(theta.layers[-1])))


def saddle_construction(theta: Params) -> Params:
    layers = list(theta.layers)
    layers[0] = np.zeros_like(layers[0])
    layers[-1] = np.zeros_like(layers[-1])
    return Params(layers)


def minimum_by_last_layer(theta: Params, A_star: np.ndarray, rank_rtol: float = 1e-10) -> Params:
    """Global minimum reached by changing only ``W_L``: ``dW_L = (A* - A)(W_{L-1}...W_1)^+``."""
    layers = list(theta.layers)
    below = product_map(layers[:-1]) if len(layers) > 1 else np.eye(layers[0].shape[1])
    s = np.linalg.svd(below, compute_uv=False)
    if below.shape[0] < below.shape[1] or s.min() <= rank_rtol * max(s.max(), 1e-300):
        raise RankDeficientFlank("W_{L-1}...W_1 does not have full column rank")
    dW = (np.asarray(A_star, dtype=float) - product_map(layers)) @ np.linalg.pinv(below)
    layers[-1] = layers[-1] + dW
    return Params(layers)


def minimum_by_embedding(theta: Params, A_star: np.ndarray, rank_tol: float = 1e-10) -> Params:
    """Global minimum built from a zeroed copy of ``theta`` plus an embedded SVD factorization.

    Zeroes ``W_1``, ``W_L`` and every row/column of the middle layers with index
    below ``min(n_0, n_L)``; then writes ``(S^(1/L) V^T, S^(1/L), ..., U S^(1/L))``
    (thin SVD of ``A*`` at its rank ``k``) into the leading ``k`` hidden units.
    """
    A_star = np.asarray(A_star, dtype=float)
    L = theta.depth
    w = theta.shape.hidden_width
    if w is None:
        raise ValueError("embedding construction needs a rectangular network of depth >= 2")
    U, s, Vt = np.linalg.svd(A_star)
    k = int(np.sum(s > rank_tol * max(s[0], 1e-300))) if s.size else 0
    if k > w:
        raise ValueError(f"rank of A* ({k}) exceeds the hidden width {w}")
    m = min(theta.shape.n_in, theta.shape.n_out)
    root = s[:k] ** (1.0 / L)
    layers = [np.array(W) for W in theta.layers]
    layers[0][:] = 0.0
    layers[-1][:] = 0.0
    for W in layers[1:-1]:
        W[:m, :] = 0.0
        W[:, :m] = 0.0
        W[np.arange(k), np.arange(k)] = root
    layers[0][:k, :] = root[:, None] * Vt[:k]
    layers[-1][:, :k] = U[:, :k] * root[None, :]
    return Params(layers)


def min_distance_upper(theta: Params, A_star: np.ndarray, gamma: float,
                       return_target: bool = False):
    """Length of an explicit move from ``theta`` to a global minimum ``A_theta = A*``.

    ``gamma < 1`` changes only the last layer; otherwise (or when that flank is
    rank deficient) the embedding construction is used.
    """
    target = None
    if gamma < 1:
        try:
            target = minimum_by_last_layer(theta, A_star)
        except RankDeficientFlank:
            target = None
    if target is None:
        target = minimum_by_embedding(theta, A_star)
    d = (target - theta).norm()
    return (d, target) if return_target else d


# Fits


def linear_fit(x, y) -> tuple[float, float, float]:
    """Ordinary least squares ``y ~ slope x + intercept``; returns ``(slope, intercept, R^2)``."""
    res = stats.linregress(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    return float(res.slope), float(res.intercept), float(res.rvalue ** 2)


@dataclass
class ScalingFit:
    xs: list
    ys: list
    slope: float
    r_squared: float
    theory_slope: float

    def relative_error(self) -> float:
        return abs(self.slope - self.theory_slope) / abs(self.theory_slope)

    def to_json(self) -> dict:
        return asdict(self)


def fit_scaling(xs, samples, theory_slope: float) -> ScalingFit:
    """Log-log OLS of per-``x`` medians; ``samples[i]`` holds the draws at ``xs[i]``."""
    xs = [float(x) for x in xs]
    if any(b <= a for a, b in zip(xs[:-1], xs[1:])):
        raise ValueError("xs must be strictly increasing")
    ys = [float(np.median(s)) for s in samples]
    slope, _, r2 = linear_fit(np.log(xs), np.log(ys))
    return ScalingFit(xs, ys, slope, min(max(r2, 0.0), 1.0), theory_slope)


def distance_theory_slopes(gamma: float, L: int) -> dict:
    """Exponents of the constructive distances as functions of the width."""
    saddle = (1 - gamma) / 2 + 0.0
    return {"saddle": saddle, "minimum": -(1 - gamma) * (L - 1) / 2 if gamma < 1 else 0.0}


def distance_sweep(widths, gamma: float, seeds, L: int, A_star: np.ndarray) -> dict:
    """Constructive distances at Gaussian initialization over widths and seeds.

    Returns the raw rows and one :class:`ScalingFit` per distance.
    """
    A_star = np.asarray(A_star, dtype=float)
    n_out, n_in = A_star.shape
    rows = []
    ds_all, dm_all = [], []
    for w in widths:
        shape = NetShape.rectangular(L, w, n_in, n_out)
        sigma = sigma_for_gamma(w, gamma)
        ds, dm = [], []
        for seed in seeds:
            theta = init_gaussian(shape, sigma, seed * 7919 + w)
            d_s = saddle_distance_upper(theta)
            d_m = min_distance_upper(theta, A_star, gamma)
            ds.append(d_s)
            dm.append(d_m)
            rows.append({"w": w, "gamma": gamma, "seed": seed, "d_s_upper": d_s, "d_m_upper": d_m})
        ds_all.append(ds)
        dm_all.append(dm)
    theory = distance_theory_slopes(gamma, L)
    return {
        "rows": rows,
        "saddle": fit_scaling(widths, ds_all, theory["saddle"]),
        "minimum": fit_scaling(widths, dm_all, theory["minimum"]),
    }


# Random-matrix spectrum bound


def operator_norm_bound_check(m: int, n: int, sigma: float, t: float, trials: int,
                              seed: int) -> float:
    """Fraction of ``m x n`` Gaussian matrices with extreme singular values inside
    ``[sigma (sqrt(max) - sqrt(min) - t), sigma (sqrt(m) + sqrt(n) + t)]``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = make_rng(seed)
    hi = sigma * (math.sqrt(m) + math.sqrt(n) + t)
    lo = sigma * (math.sqrt(max(m, n)) - math.sqrt(min(m, n)) - t)
    hits = 0
    for _ in range(trials):
        s = np.linalg.svd(sigma * rng.standard_normal((m, n)), compute_uv=False)
        hits += bool(s[0] <= hi and s[-1] >= lo)
    return hits / trials


def operator_norm_bound_probability(t: float) -> float:
    """Guaranteed success probability ``1 - 2 exp(-t^2 / 2)`` (may be negative)."""
    return 1.0 - 2.0 * math.exp(-t * t / 2.0)


__all__ = [
    "RankDeficientFlank", "ntk_tensor", "ntk_matrix", "ntk_expectation", "ntk_change",
    "ntk_diagonal_stats", "ntk_sample", "saddle_distance_upper", "saddle_construction",
    "minimum_by_last_layer", "minimum_by_embedding", "min_distance_upper", "linear_fit",
    "ScalingFit", "fit_scaling", "distance_theory_slopes", "distance_sweep",
    "operator_norm_bound_check", "operator_norm_bound_probability",
]
