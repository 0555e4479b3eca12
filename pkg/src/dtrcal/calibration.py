"""Replicate-based regression calibration.

With replicate surrogates W_il = X_i + e_il and error-free covariates
Z_i, the module estimates the joint moment block (means, between-patient
covariances, and the pooled within-patient error covariance) and imputes
each patient's unobserved X by its best linear predictor given the
replicate mean and Z.  With a zero estimated error covariance the
predictor degenerates to the replicate mean exactly.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .data_model import Cohort, StageObservation, as_cohort
from .errors import (
    DegenerateSample,
    DimensionMismatch,
    InsufficientReplication,
    SingularBlockMatrix,
)

log = logging.getLogger("dtrcal")

SINGULARITY_RCOND = 1e-10


@dataclass(frozen=True)
class CalibrationModel:
    """Estimated moment block for one stage."""

    mu_w: np.ndarray       # mean of the error-prone covariate (= mean of W)
    mu_z: np.ndarray
    sigma_xx: np.ndarray   # between-patient covariance of X (error removed)
    sigma_xz: np.ndarray
    sigma_zz: np.ndarray
    sigma_ee: np.ndarray   # pooled within-patient replicate covariance
    nu: float
    n: int

    @property
    def dx(self):
        return self.mu_w.shape[0]

    @property
    def dz(self):
        return self.mu_z.shape[0]

    @property
    def sigma_xx_min_eigenvalue(self):
        return float(np.linalg.eigvalsh(self.sigma_xx).min())

    @property
    def is_sigma_xx_psd(self):
        # the error-covariance subtraction can push sigma_xx indefinite in
        # small samples; callers may want to inspect this diagnostic
        return self.sigma_xx_min_eigenvalue >= -1e-12

    def to_dict(self):
        return {
            "mu_w": self.mu_w.tolist(),
            "mu_z": self.mu_z.tolist(),
            "sigma_xx": self.sigma_xx.tolist(),
            "sigma_xz": self.sigma_xz.tolist(),
            "sigma_zz": self.sigma_zz.tolist(),
            "sigma_ee": self.sigma_ee.tolist(),
            "nu": self.nu,
            "n": self.n,
        }

    @classmethod
    def from_dict(cls, d):
        dx = len(d["mu_w"])
        dz = len(d["mu_z"])
        return cls(
            mu_w=np.asarray(d["mu_w"], dtype=float),
            mu_z=np.asarray(d["mu_z"], dtype=float),
            sigma_xx=np.asarray(d["sigma_xx"], dtype=float).reshape(dx, dx),
            sigma_xz=np.asarray(d["sigma_xz"], dtype=float).reshape(dx, dz),
            sigma_zz=np.asarray(d["sigma_zz"], dtype=float).reshape(dz, dz),
            sigma_ee=np.asarray(d["sigma_ee"], dtype=float).reshape(dx, dx),
            nu=float(d["nu"]),
            n=int(d["n"]),
        )


def _pack_replicates(replicates):
    """Normalize per-patient surrogate sets to a NaN-padded (n, dx, kmax) array."""
    if isinstance(replicates, np.ndarray) and replicates.ndim == 3:
        return np.ascontiguousarray(replicates, dtype=np.float64)
    mats = [np.atleast_2d(np.asarray(r, dtype=float)) for r in replicates]
    dx = mats[0].shape[0]
    kmax = max(m.shape[1] for m in mats)
    out = np.full((len(mats), dx, kmax), np.nan)
    for i, m in enumerate(mats):
        if m.shape[0] != dx:
            raise DimensionMismatch("error-prone dimension varies across patients")
        out[i, :, : m.shape[1]] = m
    return out


def estimate_moments(replicates, error_free=None):
    """Estimate the calibration moment block from replicate data.

    replicates : (n, dx, kmax) NaN-padded array, or a sequence of
        per-patient (dx, k_i) matrices.
    error_free : optional (n, dz) matrix of error-free covariates.

    Raises DegenerateSample for n < 2 and InsufficientReplication when
    no patient has a second replicate.
    """
    model, _, _ = _moment_block(replicates, error_free)
    return model


def _moment_block(replicates, error_free=None):
    """estimate_moments plus the per-patient replicate means and counts."""
    w = _pack_replicates(replicates)
    n, dx, _ = w.shape
    if n < 2:
        raise DegenerateSample(f"moment estimation needs n >= 2, got {n}")
    if error_free is None:
        z = np.zeros((n, 0))
    else:
        z = np.ascontiguousarray(np.atleast_2d(error_free), dtype=np.float64)
        if z.shape[0] != n:
            raise DimensionMismatch("error_free rows do not match replicate rows")

    present = ~np.isnan(w)
    if dx > 1 and not (present == present[:, :1, :]).all():
        raise DimensionMismatch("replicate presence must be column-consistent across coordinates")
    if present[:, 0, :].sum() <= n:  # sum(k_i) == n means every k_i == 1
        raise InsufficientReplication("every patient has a single replicate")

    wbar, k, mu_w, mu_z, nu, sxx, sxz, szz, see, _ = kernels.calib_moments(w, z)
    model = CalibrationModel(mu_w, mu_z, sxx, sxz, szz, see, nu, n)
    if not model.is_sigma_xx_psd:
        log.warning(
            "estimated covariance of the error-prone covariate is indefinite "
            "(min eigenvalue %.3g); estimates stay consistent but imputation may fail",
            model.sigma_xx_min_eigenvalue,
        )
    return model, wbar, k


def _blp_maps(model, k_values):
    """Best-linear-predictor coefficient matrix per distinct replicate count."""
    dx, dz = model.dx, model.dz
    top = np.hstack([model.sigma_xx, model.sigma_xz])  # (dx, dx+dz)
    maps = {}
    for k in k_values:
        m = np.empty((dx + dz, dx + dz))
        m[:dx, :dx] = model.sigma_xx + model.sigma_ee / k
        m[:dx, dx:] = model.sigma_xz
        m[dx:, :dx] = model.sigma_xz.T
        m[dx:, dx:] = model.sigma_zz
        svals = np.linalg.svd(m, compute_uv=False)
        if svals[-1] < SINGULARITY_RCOND * max(svals[0], 1e-300):
            raise SingularBlockMatrix(
                f"calibration block matrix is singular for replicate count k={k:g}"
            )
        # rows of `top` times the inverse: solve M^T G^T = top^T (M symmetric)
        maps[float(k)] = np.linalg.solve(m, top.T).T  # (dx, dx+dz)
    return maps


def _apply_blp(model, wbar, k, z):
    if wbar.shape[1] != model.dx or z.shape[1] != model.dz:
        raise DimensionMismatch(
            f"data has dx={wbar.shape[1]}, dz={z.shape[1]} but the calibration "
            f"model expects dx={model.dx}, dz={model.dz}"
        )
    dev = np.hstack([wbar - model.mu_w, z - model.mu_z]) if model.dz else wbar - model.mu_w
    xhat = np.empty_like(wbar)
    maps = _blp_maps(model, np.unique(k))
    for kv, g in maps.items():
        rows = k == kv
        xhat[rows] = model.mu_w + dev[rows] @ g.T
    return xhat


def calibrate(model, record_stage):
    """Impute the error-prone covariate for one stage observation."""
    if isinstance(record_stage, StageObservation):
        wbar = record_stage.averaged_surrogate()
        k = float(record_stage.replicate_count())
        z = np.asarray(record_stage.error_free, dtype=float)
    else:
        wbar, k, z = record_stage
        wbar = np.asarray(wbar, dtype=float)
        z = np.asarray(z, dtype=float)
    if wbar.shape[0] != model.dx or z.shape[0] != model.dz:
        raise DimensionMismatch("observation dimensions do not match the calibration model")
    return _apply_blp(model, wbar[None, :], np.array([k]), z[None, :])[0]


def calibrate_block(block):
    """Fit and apply calibration on one packed stage block."""
    model, wbar, k = _moment_block(block.w, block.z)
    return model, _apply_blp(model, wbar, k, block.z)


def apply_model(model, block):
    """Impute a packed stage block with an already-fitted model."""
    present = ~np.isnan(block.w[:, 0, :])
    k = present.sum(axis=1).astype(np.float64)
    wbar = np.nansum(block.w, axis=2) / k[:, None]
    return _apply_blp(model, wbar, k, block.z)


def calibrate_stage(data, stage):
    """Fit calibration on the patients present at `stage` and impute each.

    Returns (CalibrationModel, (m, dx) array of imputed values) aligned
    with the stage block's rows.
    """
    cohort = as_cohort(data) if not isinstance(data, Cohort) else data
    return calibrate_block(cohort.stage_block(stage))
