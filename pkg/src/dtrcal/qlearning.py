"""Backward-induction estimation of two-stage treatment-regime parameters.

Stage 2 is fit by least squares on the patients who reached it; the
stage-1 response is the fitted stage-2 value at the optimal stage-2
action (observed outcome for patients who never entered stage 2); stage
1 is then fit on all patients.  The error-prone covariates entering the
designs are read from a selectable source so that the true-covariate,
single-surrogate, surrogate-average, and calibrated estimators differ
in exactly one input.
"""

from dataclasses import dataclass

import numpy as np

from . import calibration
from .data_model import (
    DesignSpec,
    SourceKind,
    TermSource,
    Transform,
    as_cohort,
    as_source,
)
from .errors import (
    DimensionMismatch,
    InsufficientSample,
    InsufficientStage2Sample,
    MissingSource,
    StageAbsent,
)
from .linmodel import RANK_RCOND, OlsFit, fit_ols


@dataclass(frozen=True)
class StageFit:
    """Fitted treatment-free and blip coefficients for one stage."""

    beta: np.ndarray
    psi: np.ndarray
    spec: DesignSpec
    ols: OlsFit


@dataclass(frozen=True)
class Policy:
    """Per-stage blip vectors inducing the rule a_j = 1{psi_j . h_j1 > 0}."""

    stage_psis: tuple
    specs: tuple

    @property
    def n_stages(self):
        return len(self.stage_psis)

    def psi(self, stage):
        if not 1 <= stage <= self.n_stages:
            raise StageAbsent(f"policy has no stage {stage}")
        return self.stage_psis[stage - 1]


@dataclass(frozen=True)
class QlearnResult:
    stage1: StageFit
    stage2: StageFit | None
    policy: Policy
    pseudo_outcomes: np.ndarray
    covariate_source: SourceKind
    calibration_models: tuple = None  # per stage, populated for the calibrated source
    layouts: tuple = None

    def stage_fit(self, stage):
        if stage == 1:
            return self.stage1
        if stage == 2 and self.stage2 is not None:
            return self.stage2
        raise StageAbsent(f"fit has no stage {stage}")

    @property
    def n_stages(self):
        return 1 if self.stage2 is None else 2

    def coefficient_labels(self):
        return coefficient_labels([f.spec for f in self._fits_stage_order()], self.layouts)

    def coefficient_vector(self):
        """Concatenated coefficients, later stage first: [b2, psi2, b1, psi1]."""
        parts = []
        for fit in self._fits_stage_order():
            parts += [fit.beta, fit.psi]
        return np.concatenate(parts)

    def _fits_stage_order(self):
        return ([self.stage2] if self.stage2 is not None else []) + [self.stage1]

    def to_dict(self):
        out = {"covariate_source": self.covariate_source.value, "stages": {}}
        for stage in range(self.n_stages, 0, -1):
            fit = self.stage_fit(stage)
            tf_labels, blip_labels = fit.spec.term_labels(self.layouts[stage - 1])
            out["stages"][str(stage)] = {
                "spec": fit.spec.to_dict(),
                "beta": fit.beta.tolist(),
                "psi": fit.psi.tolist(),
                "treatment_free": dict(zip(tf_labels, fit.beta.tolist())),
                "blip": dict(zip(blip_labels, fit.psi.tolist())),
                "residual_variance": fit.ols.residual_variance,
                "n_obs": fit.ols.n_obs,
            }
        if self.calibration_models is not None:
            out["calibration"] = {
                str(s + 1): m.to_dict()
                for s, m in enumerate(self.calibration_models)
                if m is not None
            }
        return out


def coefficient_labels(specs_stage_desc, layouts):
    """Labels for the concatenated coefficient vector (later stage first)."""
    labels = []
    n_stages = len(specs_stage_desc)
    for pos, spec in enumerate(specs_stage_desc):
        stage = n_stages - pos
        tf_labels, blip_labels = spec.term_labels(layouts[stage - 1])
        labels += [f"tf{stage}:{l}" for l in tf_labels]
        labels += [f"blip{stage}:{l}" for l in blip_labels]
    return labels


def optimal_action(psi, tailoring):
    """1{psi . h > 0}; exact ties resolve to 0 (strict inequality)."""
    psi = np.asarray(psi, dtype=float)
    h = np.asarray(tailoring, dtype=float)
    if psi.shape != h.shape:
        raise DimensionMismatch(f"psi has shape {psi.shape}, tailoring {h.shape}")
    return int(float(psi @ h) > 0.0)


def pseudo_outcome(stage2_fit, h20, h21):
    """Fitted stage-2 value at the optimal stage-2 action."""
    h20 = np.asarray(h20, dtype=float)
    h21 = np.asarray(h21, dtype=float)
    if h20.shape[0] != stage2_fit.beta.shape[0] or h21.shape[0] != stage2_fit.psi.shape[0]:
        raise DimensionMismatch("history blocks do not match the stage-2 fit")
    blip = float(stage2_fit.psi @ h21)
    return float(stage2_fit.beta @ h20) + max(blip, 0.0)


def recommend(policy, stage, tailoring):
    """Recommended action for one patient at `stage`."""
    return optimal_action(policy.psi(stage), tailoring)


def policy_actions(policy, data, source, stage):
    """Recommended actions for every patient present at `stage`.

    The tailoring vectors are the policy's blip design evaluated on the
    given data with the given covariate source; the returned array is
    aligned with the stage block's rows.
    """
    cohort = as_cohort(data)
    source = as_source(source)
    if not 1 <= stage <= min(policy.n_stages, cohort.n_stages):
        raise StageAbsent(f"no stage {stage} in policy or data")
    xmats, _ = _source_matrices(cohort, source)
    h = _history_matrix(cohort, stage, xmats)
    spec = policy.specs[stage - 1]
    prior_a = h[:, -1] if stage == 2 else None
    _, blip = _design_blocks(h, spec, prior_a=prior_a)
    psi = policy.psi(stage)
    if blip.shape[1] != psi.shape[0]:
        raise DimensionMismatch("policy blip dimension does not match its design spec")
    return (blip @ psi > 0.0).astype(int)


# ---------------------------------------------------------------------------
# Packed pipeline
# ---------------------------------------------------------------------------

def _source_matrices(cohort, source):
    """Per-stage (m, dx) matrices filling the error-prone slots.

    For the calibrated source each stage's moments are fit on exactly the
    patients present at that stage; the stage-1 estimates reused inside
    stage-2 histories come from the stage-1 model so both stages see the
    same imputed values.
    """
    kind = source.kind
    models = None
    mats = []
    blocks = [cohort.stage1] + ([cohort.stage2] if cohort.stage2 is not None else [])
    if kind == SourceKind.CALIBRATED:
        if source.models is not None:
            if len(source.models) < len(blocks):
                raise MissingSource("calibration models are missing for some stages")
            for block, model in zip(blocks, source.models):
                mats.append(calibration.apply_model(model, block))
            return mats, tuple(source.models[: len(blocks)])
        models = []
        for block in blocks:
            model, xhat = calibration.calibrate_block(block)
            models.append(model)
            mats.append(xhat)
        return mats, tuple(models)
    for block in blocks:
        if kind == SourceKind.TRUE:
            if block.x is None:
                raise MissingSource("true covariates are not stored in this data")
            mats.append(block.x)
        elif kind == SourceKind.SINGLE_SURROGATE:
            col = block.w[:, :, 0]
            if np.isnan(col).any():
                raise MissingSource("a first replicate is absent; single-surrogate source unavailable")
            mats.append(col)
        elif kind == SourceKind.AVERAGED_SURROGATE:
            with np.errstate(invalid="ignore"):
                mats.append(np.nanmean(block.w, axis=2))
        else:
            raise MissingSource(f"unknown covariate source {kind!r}")
    return mats, None


def _history_matrix(cohort, stage, xmats):
    """Stack the flat history layout for all patients at `stage`."""
    if stage == 1:
        return np.hstack([cohort.stage1.z, xmats[0]])
    block = cohort.stage_block(2)
    rows = block.patient_rows
    return np.hstack(
        [
            cohort.stage1.z[rows],
            xmats[0][rows],
            block.z,
            xmats[1],
            cohort.stage1.a[rows][:, None],
        ]
    )


def _design_blocks(history, spec, prior_a=None):
    """Treatment-free and raw (un-multiplied) blip column blocks."""
    m = history.shape[0]

    def column(term):
        if term.source == TermSource.INTERCEPT:
            col = np.ones(m)
        elif term.source == TermSource.PRIOR_TREATMENT:
            col = prior_a.copy()
        else:
            if term.index >= history.shape[1]:
                raise DimensionMismatch(
                    f"term index {term.index} out of range for a history of "
                    f"width {history.shape[1]}"
                )
            col = history[:, term.index]
        if term.transform == Transform.TIMES_PRIOR_TREATMENT:
            col = col * prior_a
        return col

    tf = np.column_stack([column(t) for t in spec.treatment_free_terms])
    blip = np.column_stack([column(t) for t in spec.blip_terms])
    return tf, blip


def _fit_stage(tf, blip, a, y, spec, rcond):
    design = np.hstack([tf, blip * a[:, None]])
    ols = fit_ols(design, y, rcond=rcond)
    p_tf = tf.shape[1]
    return StageFit(
        beta=ols.coefficients[:p_tf],
        psi=ols.coefficients[p_tf:],
        spec=spec,
        ols=ols,
    )


def fit_qlearning(data, specs, source, rcond=RANK_RCOND):
    """Estimate the stage parameters and the induced policy.

    data   : list of PatientRecord or a packed Cohort.
    specs  : one DesignSpec per stage, stage-1 first.
    source : CovariateSource or SourceKind/str.
    """
    cohort = as_cohort(data)
    source = as_source(source)
    specs = tuple(specs)
    if len(specs) != cohort.n_stages:
        raise DimensionMismatch(
            f"{len(specs)} design specs for a {cohort.n_stages}-stage cohort"
        )
    layouts = tuple(cohort.layout(s + 1) for s in range(cohort.n_stages))
    for spec, layout in zip(specs, layouts):
        spec.validate(layout)

    xmats, models = _source_matrices(cohort, source)

    stage2_fit = None
    ytil = cohort.y.copy()
    if cohort.n_stages == 2:
        block2 = cohort.stage2
        spec2 = specs[1]
        if block2.m < spec2.n_params + 2:
            raise InsufficientStage2Sample(
                f"{block2.m} stage-2 patients for {spec2.n_params} parameters"
            )
        h2 = _history_matrix(cohort, 2, xmats)
        tf2, blip2 = _design_blocks(h2, spec2, prior_a=h2[:, -1])
        stage2_fit = _fit_stage(tf2, blip2, block2.a, cohort.y[block2.patient_rows], spec2, rcond)
        blip_values = blip2 @ stage2_fit.psi
        ytil[block2.patient_rows] = tf2 @ stage2_fit.beta + np.maximum(blip_values, 0.0)

    spec1 = specs[0]
    if cohort.n < spec1.n_params + 2:
        raise InsufficientSample(
            f"{cohort.n} stage-1 patients for {spec1.n_params} parameters"
        )
    h1 = _history_matrix(cohort, 1, xmats)
    tf1, blip1 = _design_blocks(h1, spec1)
    stage1_fit = _fit_stage(tf1, blip1, cohort.stage1.a, ytil, spec1, rcond)

    psis = [stage1_fit.psi] + ([stage2_fit.psi] if stage2_fit is not None else [])
    policy = Policy(stage_psis=tuple(psis), specs=specs)
    return QlearnResult(
        stage1=stage1_fit,
        stage2=stage2_fit,
        policy=policy,
        pseudo_outcomes=ytil,
        covariate_source=source.kind,
        calibration_models=models,
        layouts=layouts,
    )
