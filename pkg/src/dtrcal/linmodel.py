"""Ordinary least-squares engine shared by every stage regression."""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DimensionMismatch, RankDeficient

RANK_RCOND = 1e-10  # relative pivot tolerance for rank decisions


@dataclass(frozen=True)
class OlsFit:
    coefficients: np.ndarray
    residual_variance: float
    n_obs: int
    n_params: int


def fit_ols(design, response, rcond=RANK_RCOND):
    """Least squares via column-pivoted QR.

    Raises RankDeficient when the pivoted factorization reports an
    effective rank below the number of columns at `rcond`.
    """
    x = np.ascontiguousarray(design, dtype=np.float64)
    y = np.ascontiguousarray(response, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 1:
        raise DimensionMismatch("design must be 2-d and response 1-d")
    n, p = x.shape
    if y.shape[0] != n:
        raise DimensionMismatch(f"design has {n} rows but response has {y.shape[0]}")
    if n < p:
        raise RankDeficient(f"n={n} observations cannot identify p={p} parameters")

    coef, rss, rank = kernels.ols_solve(x, y, rcond)
    if rank < p:
        raise RankDeficient(f"design rank {rank} < {p} at tolerance {rcond:g}")

    residual_variance = rss / (n - p) if n > p else 0.0
    # guard against tiny negative round-off of an exact fit
    return OlsFit(coef, max(residual_variance, 0.0), n, p)
