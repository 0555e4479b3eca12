# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementations of the hot numeric kernels.

Mirrors `pykernels` exactly: `ols_solve` calls LAPACK dgelsy (the same
driver scipy's gelsy path uses, so rank decisions agree bit-for-bit) and
`calib_moments` accumulates the calibration moment block in two passes
over the packed replicate array.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport isnan
from scipy.linalg.cython_lapack cimport dgelsy

cnp.import_array()


def ols_solve(double[:, ::1] x, double[::1] y, double rcond=1e-10):
    """Column-pivoted QR least squares; returns (coef, rss, rank)."""
    cdef int m = x.shape[0]
    cdef int n = x.shape[1]
    cdef int nrhs = 1
    cdef int lda = m
    cdef int ldb = m if m > n else n
    cdef int rank = 0
    cdef int info = 0
    cdef int lwork = -1
    cdef int i, j

    # dgelsy destroys A; always copy (asfortranarray would alias a single
    # column, which is both C- and F-contiguous)
    a_np = np.array(x, dtype=np.float64, order="F", copy=True)
    b_np = np.zeros(ldb, dtype=np.float64)
    jpvt_np = np.zeros(n, dtype=np.intc)   # zeros: all columns free to pivot
    cdef double[::1, :] a = a_np
    cdef double[::1] b = b_np
    cdef int[::1] jpvt = jpvt_np
    for i in range(m):
        b[i] = y[i]

    cdef double wkopt = 0.0
    dgelsy(&m, &n, &nrhs, &a[0, 0], &lda, &b[0], &ldb, &jpvt[0], &rcond,
           &rank, &wkopt, &lwork, &info)
    lwork = <int>wkopt
    work_np = np.empty(lwork, dtype=np.float64)
    cdef double[::1] work = work_np
    dgelsy(&m, &n, &nrhs, &a[0, 0], &lda, &b[0], &ldb, &jpvt[0], &rcond,
           &rank, &work[0], &lwork, &info)
    if info != 0:
        raise RuntimeError(f"dgelsy failed with info={info}")

    coef_np = np.empty(n, dtype=np.float64)
    cdef double[::1] coef = coef_np
    for j in range(n):
        coef[j] = b[j]

    cdef double rss = 0.0
    cdef double r
    for i in range(m):
        r = y[i]
        for j in range(n):
            r -= x[i, j] * coef[j]
        rss += r * r
    return coef_np, rss, int(rank)


def calib_moments(double[:, :, ::1] w, double[:, ::1] z):
    """Calibration moment block; see pykernels.calib_moments for the contract."""
    cdef Py_ssize_t n = w.shape[0]
    cdef Py_ssize_t dx = w.shape[1]
    cdef Py_ssize_t kmax = w.shape[2]
    cdef Py_ssize_t dz = z.shape[1]
    cdef Py_ssize_t i, l, p, q

    wbar_np = np.empty((n, dx), dtype=np.float64)
    k_np = np.empty(n, dtype=np.float64)
    mu_w_np = np.zeros(dx, dtype=np.float64)
    mu_z_np = np.zeros(dz, dtype=np.float64)
    see_np = np.zeros((dx, dx), dtype=np.float64)
    sxx_np = np.zeros((dx, dx), dtype=np.float64)
    sxz_np = np.zeros((dx, dz), dtype=np.float64)
    szz_np = np.zeros((dz, dz), dtype=np.float64)

    cdef double[:, ::1] wbar = wbar_np
    cdef double[::1] k = k_np
    cdef double[::1] mu_w = mu_w_np
    cdef double[::1] mu_z = mu_z_np
    cdef double[:, ::1] see = see_np
    cdef double[:, ::1] sxx = sxx_np
    cdef double[:, ::1] sxz = sxz_np
    cdef double[:, ::1] szz = szz_np

    cdef double sum_k = 0.0
    cdef double sum_k2 = 0.0
    cdef double sum_km1 = 0.0
    cdef double ki, dev, nu

    # pass 1: replicate counts, per-patient means, grand means
    for i in range(n):
        ki = 0.0
        for p in range(dx):
            wbar[i, p] = 0.0
        for l in range(kmax):
            if not isnan(w[i, 0, l]):
                ki += 1.0
                for p in range(dx):
                    wbar[i, p] += w[i, p, l]
        k[i] = ki
        for p in range(dx):
            wbar[i, p] /= ki
            mu_w[p] += ki * wbar[i, p]
        sum_k += ki
        sum_k2 += ki * ki
        sum_km1 += ki - 1.0
        for q in range(dz):
            mu_z[q] += z[i, q]
    for p in range(dx):
        mu_w[p] /= sum_k
    for q in range(dz):
        mu_z[q] /= n
    nu = sum_k - sum_k2 / sum_k

    # pass 2: within-patient scatter and between-patient moment sums
    wc_np = np.empty(dx, dtype=np.float64)
    zc_np = np.empty(dz if dz > 0 else 1, dtype=np.float64)
    cdef double[::1] wc = wc_np
    cdef double[::1] zc = zc_np
    for i in range(n):
        for l in range(kmax):
            if not isnan(w[i, 0, l]):
                for p in range(dx):
                    wc[p] = w[i, p, l] - wbar[i, p]
                for p in range(dx):
                    for q in range(dx):
                        see[p, q] += wc[p] * wc[q]
        ki = k[i]
        for p in range(dx):
            wc[p] = wbar[i, p] - mu_w[p]
        for q in range(dz):
            zc[q] = z[i, q] - mu_z[q]
        for p in range(dx):
            for q in range(dx):
                sxx[p, q] += ki * wc[p] * wc[q]
            for q in range(dz):
                sxz[p, q] += ki * wc[p] * zc[q]
        for p in range(dz):
            for q in range(dz):
                szz[p, q] += zc[p] * zc[q]

    for p in range(dx):
        for q in range(dx):
            see[p, q] /= sum_km1
            sxx[p, q] = (sxx[p, q] - (n - 1) * see[p, q]) / nu
        for q in range(dz):
            sxz[p, q] /= nu
    for p in range(dz):
        for q in range(dz):
            szz[p, q] /= (n - 1)

    return wbar_np, k_np, mu_w_np, mu_z_np, float(nu), sxx_np, sxz_np, szz_np, see_np, float(sum_km1)
