"""Synthetic tasks used by the experiments: low-rank completion and teacher regression."""
from __future__ import annotations

import numpy as np

from .core import make_rng
from .costs import MCCost, MSECost


def low_rank_matrix(n_rows: int, n_cols: int, rank: int, rng: np.random.Generator,
                    scale: float = 1.0) -> np.ndarray:
    """Product of ``n_rows x rank`` and ``rank x n_cols`` standard Gaussian factors."""
    return scale * rng.standard_normal((n_rows, rank)) @ rng.standard_normal((rank, n_cols))


def graded_gram_matrix(n: int, rank: int, rng: np.random.Generator) -> np.ndarray:
    """``W W^T`` with ``W`` of size ``n x rank`` whose ``i``-th column has variance ``i``.

    The graded variances spread the singular values apart, which makes the
    successive saddles of small-initialization training well separated.
    """
    W = rng.standard_normal((n, rank)) * np.sqrt(np.arange(1, rank + 1))
    return W @ W.T


TEACHERS = ("factors", "graded_gram")


def random_mask(n_rows: int, n_cols: int, fraction: float, rng: np.random.Generator,
                min_per_line: int = 1) -> np.ndarray:
    """Uniform random subset of ``round(fraction * n_rows * n_cols)`` entries.

    Redraws until every row and column has at least ``min_per_line`` observed
    entries (otherwise a row of the target is unidentifiable).
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    total = n_rows * n_cols
    k = max(1, int(round(fraction * total)))
    for _ in range(1000):
        flat = np.zeros(total, dtype=bool)
        flat[rng.choice(total, size=k, replace=False)] = True
        mask = flat.reshape(n_rows, n_cols)
        if mask.sum(0).min() >= min_per_line and mask.sum(1).min() >= min_per_line:
            return mask
    raise ValueError("could not draw a mask covering every row and column")


def mc_task(n_rows: int, n_cols: int, rank: int, fraction: float, seed: int,
            scale: float = 1.0, teacher: str = "factors") -> tuple[MCCost, MCCost | None]:
    """Random rank-``rank`` completion task; returns (train cost, test cost).

    ``teacher`` is ``"factors"`` (product of Gaussian factors) or
    ``"graded_gram"`` (square only, see :func:`graded_gram_matrix`).
    """
    rng = make_rng(seed)
    if teacher == "factors":
        A_star = low_rank_matrix(n_rows, n_cols, rank, rng, scale)
    elif teacher == "graded_gram":
        if n_rows != n_cols:
            raise ValueError("graded_gram teacher needs a square target")
        A_star = scale * graded_gram_matrix(n_rows, rank, rng)
    else:
        raise ValueError(f"unknown teacher {teacher!r}; expected one of {TEACHERS}")
    train = MCCost.from_mask(A_star, random_mask(n_rows, n_cols, fraction, rng))
    return train, train.complement()


def teacher_mse_task(teacher: np.ndarray, n_samples: int, seed: int, noise: float = 0.0,
                     n_test: int = 0) -> tuple[MSECost, MSECost | None]:
    """Gaussian inputs labelled by ``teacher`` (plus optional label noise on the train set)."""
    teacher = np.asarray(teacher, dtype=float)
    rng = make_rng(seed)
    n_out, n_in = teacher.shape
    X = rng.standard_normal((n_in, n_samples))
    Y = teacher @ X + noise * rng.standard_normal((n_out, n_samples))
    test = None
    if n_test > 0:
        Xt = rng.standard_normal((n_in, n_test))
        test = MSECost(Xt, teacher @ Xt)
    return MSECost(X, Y), test
