"""Backend equivalence and correctness of the numeric kernels."""

import numpy as np
import pytest

from dtrcal.kernels import BACKEND, pykernels

try:
    from dtrcal.kernels import _ckernels
    HAVE_COMPILED = True
except ImportError:
    HAVE_COMPILED = False


def brute_force_moments(w, z):
    """Independent loop-based evaluation of every moment formula."""
    n, dx, kmax = w.shape
    dz = z.shape[1]
    wbar = np.zeros((n, dx))
    k = np.zeros(n)
    for i in range(n):
        cols = [l for l in range(kmax) if not np.isnan(w[i, 0, l])]
        k[i] = len(cols)
        for p in range(dx):
            wbar[i, p] = sum(w[i, p, l] for l in cols) / len(cols)
    sum_k = k.sum()
    mu_w = sum(k[i] * wbar[i] for i in range(n)) / sum_k
    nu = sum_k - (k**2).sum() / sum_k
    see = np.zeros((dx, dx))
    for i in range(n):
        for l in range(kmax):
            if not np.isnan(w[i, 0, l]):
                d = w[i, :, l] - wbar[i]
                see += np.outer(d, d)
    see /= (k - 1).sum()
    sxx = np.zeros((dx, dx))
    for i in range(n):
        d = wbar[i] - mu_w
        sxx += k[i] * np.outer(d, d)
    sxx = (sxx - (n - 1) * see) / nu
    mu_z = z.mean(axis=0) if dz else np.zeros(0)
    sxz = np.zeros((dx, dz))
    szz = np.zeros((dz, dz))
    for i in range(n):
        d = wbar[i] - mu_w
        e = z[i] - mu_z
        sxz += k[i] * np.outer(d, e)
        szz += np.outer(e, e)
    sxz /= nu
    szz /= n - 1
    return wbar, k, mu_w, mu_z, nu, sxx, sxz, szz, see


def random_replicates(rng, n=80, dx=1, kmax=3, dz=2, missing=0.5):
    w = rng.normal(1.0, 1.0, (n, dx, kmax)) + rng.normal(0, 0.7, (n, dx, kmax))
    if kmax >= 3:
        drop = rng.random(n) < missing
        w[drop, :, 2] = np.nan
    z = rng.normal(0.5, 1.0, (n, dz))
    return np.ascontiguousarray(w), np.ascontiguousarray(z)


def test_python_moments_match_brute_force():
    rng = np.random.default_rng(3)
    for trial in range(10):
        w, z = random_replicates(rng, dz=trial % 3)
        got = pykernels.calib_moments(w, z)
        want = brute_force_moments(w, z)
        for g, b in zip(got[:9], want):
            assert np.allclose(np.asarray(g), np.asarray(b), rtol=0, atol=1e-10)


def test_python_ols_matches_normal_equations():
    rng = np.random.default_rng(4)
    for _ in range(20):
        n = rng.integers(5, 9)
        p = rng.integers(1, 4)
        x = rng.normal(size=(n, p))
        y = rng.normal(size=n)
        coef, rss, rank = pykernels.ols_solve(x, y)
        ref = np.linalg.solve(x.T @ x, x.T @ y)
        assert rank == p
        assert np.allclose(coef, ref, atol=1e-8)
        assert np.isclose(rss, float(((y - x @ coef) ** 2).sum()))


def test_ols_rank_detection_duplicate_column():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(30, 2))
    x = np.hstack([x, x[:, :1]])
    _, _, rank = pykernels.ols_solve(np.ascontiguousarray(x), rng.normal(size=30))
    assert rank == 2


@pytest.mark.skipif(not HAVE_COMPILED, reason="compiled kernels unavailable")
class TestCompiledEquivalence:
    def test_backend_selected(self):
        import os

        if os.environ.get("DTRCAL_PURE_PYTHON"):
            assert BACKEND == "python"
        else:
            assert BACKEND == "compiled"

    def test_ols_equivalent(self):
        rng = np.random.default_rng(6)
        for _ in range(15):
            n = int(rng.integers(10, 200))
            p = int(rng.integers(1, 8))
            x = np.ascontiguousarray(rng.normal(size=(n, p)))
            y = np.ascontiguousarray(rng.normal(size=n))
            c_py = pykernels.ols_solve(x, y)
            c_c = _ckernels.ols_solve(x, y)
            assert np.allclose(c_py[0], c_c[0], atol=1e-12)
            assert np.isclose(c_py[1], c_c[1], rtol=1e-10)
            assert c_py[2] == c_c[2]

    def test_ols_rank_agreement_on_singular_design(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(40, 3))
        x = np.ascontiguousarray(np.hstack([x, (2 * x[:, :1] - x[:, 1:2])]))
        y = np.ascontiguousarray(rng.normal(size=40))
        assert pykernels.ols_solve(x, y)[2] == _ckernels.ols_solve(x, y)[2] == 3

    def test_moments_equivalent(self):
        rng = np.random.default_rng(8)
        for trial in range(10):
            w, z = random_replicates(rng, n=150, dz=trial % 3, kmax=2 + trial % 2)
            got_py = pykernels.calib_moments(w, z)
            got_c = _ckernels.calib_moments(w, z)
            for a, b in zip(got_py, got_c):
                assert np.allclose(np.asarray(a), np.asarray(b), rtol=0, atol=1e-12)
