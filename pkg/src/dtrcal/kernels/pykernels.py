"""Pure numpy/scipy implementations of the hot numeric kernels.

These are the reference implementations; `_ckernels.pyx` mirrors them
one-to-one.  Both backends expose:

    ols_solve(x, y, rcond)      -- pivoted-QR least squares with rank report
    calib_moments(w, z)         -- replicate/covariate moment block

Callers are expected to validate inputs (shapes, replicate counts);
the kernels only compute.
"""

import numpy as np
from scipy.linalg import lstsq


def ols_solve(x, y, rcond=1e-10):
    """Solve min ||x b - y||_2 via column-pivoted QR (LAPACK gelsy).

    Returns (coefficients, residual sum of squares, effective rank).
    The rank is determined by the gelsy condition estimate at `rcond`;
    callers treat rank < n_params as a failure.
    """
    coef, _, rank, _ = lstsq(x, y, cond=rcond, lapack_driver="gelsy", check_finite=False)
    resid = y - x @ coef
    return coef, float(resid @ resid), int(rank)


def calib_moments(w, z):
    """Moment block for replicate-based calibration.

    w : (n, dx, kmax) replicate surrogates, NaN marking absent replicates
        (presence is column-consistent across the dx coordinates).
    z : (n, dz) error-free covariates; dz may be zero.

    Returns (wbar, k, mu_w, mu_z, nu, sxx, sxz, szz, see, sum_k_minus_1)
    where wbar are per-patient replicate means, k per-patient replicate
    counts, mu_w the count-weighted mean of means, nu the calibration
    weighting constant, sxx/sxz/szz the between-patient moment matrices
    (sxx has the pooled within-patient covariance `see` removed), and
    see the pooled within-patient replicate covariance.
    """
    n = w.shape[0]
    present = ~np.isnan(w[:, 0, :])                 # (n, kmax)
    k = present.sum(axis=1).astype(np.float64)      # (n,)
    wbar = np.nansum(w, axis=2) / k[:, None]        # (n, dx)

    sum_k = k.sum()
    mu_w = (k[:, None] * wbar).sum(axis=0) / sum_k
    nu = sum_k - (k * k).sum() / sum_k

    dev = w - wbar[:, :, None]
    dev = np.where(np.isnan(dev), 0.0, dev)
    sum_km1 = float((k - 1.0).sum())
    see = np.einsum("nik,njk->ij", dev, dev) / sum_km1

    wc = wbar - mu_w
    sxx = (np.einsum("n,ni,nj->ij", k, wc, wc) - (n - 1) * see) / nu

    dz = z.shape[1]
    if dz:
        mu_z = z.mean(axis=0)
        zc = z - mu_z
        sxz = np.einsum("n,ni,nj->ij", k, wc, zc) / nu
        szz = zc.T @ zc / (n - 1)
    else:
        mu_z = np.zeros(0)
        sxz = np.zeros((w.shape[1], 0))
        szz = np.zeros((0, 0))

    return wbar, k, mu_w, mu_z, float(nu), sxx, sxz, szz, see, sum_km1
