"""Patient trajectories, covariate sources, and regression design terms.

A trajectory holds one or two stages.  Each stage carries error-free
covariates, an error-prone covariate block observed only through
replicate surrogate measurements (NaN marks an absent replicate), the
binary treatment, and -- for simulated data -- the true covariate values.

Stage histories are flat vectors laid out as

    stage 1:  [z1..., x1...]
    stage 2:  [z1..., x1..., z2..., x2..., a1]

where the x slots are filled from a selectable source: the true values,
the first surrogate, the per-patient surrogate average, or calibrated
estimates.  Design terms index this flat layout.
"""

import csv
import re
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import (
    DataFormatError,
    DimensionMismatch,
    MissingSource,
    StageAbsent,
)

FLOAT_FMT = "%.17g"  # lossless float64 round trip


def _frozen_array(values, dtype=float, ndim=1):
    arr = np.array(values, dtype=dtype)
    if arr.ndim < ndim:
        arr = arr.reshape((1,) * (ndim - arr.ndim) + arr.shape)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Trajectory containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StageObservation:
    """One stage of a trajectory.

    surrogates has shape (n_error_prone, n_replicates); NaN cells are
    absent replicates.  Every coordinate must keep at least one present
    replicate.  true_covariate is only populated by simulators.
    """

    error_free: np.ndarray
    surrogates: np.ndarray
    treatment: int
    true_covariate: np.ndarray | None = None

    def __post_init__(self):
        ef = _frozen_array(self.error_free)
        su = _frozen_array(self.surrogates, ndim=2)
        if su.ndim != 2:
            raise DimensionMismatch("surrogates must be a 2-d (coordinate, replicate) array")
        if int(self.treatment) not in (0, 1):
            raise ValueError(f"treatment must be 0 or 1, got {self.treatment!r}")
        if np.isnan(su).all(axis=1).any():
            raise ValueError("each error-prone coordinate needs at least one replicate")
        xt = self.true_covariate
        if xt is not None:
            xt = _frozen_array(xt)
            if xt.shape[0] != su.shape[0]:
                raise DimensionMismatch("true covariate length != number of error-prone coordinates")
        object.__setattr__(self, "error_free", ef)
        object.__setattr__(self, "surrogates", su)
        object.__setattr__(self, "treatment", int(self.treatment))
        object.__setattr__(self, "true_covariate", xt)

    @property
    def n_error_free(self):
        return self.error_free.shape[0]

    @property
    def n_error_prone(self):
        return self.surrogates.shape[0]

    def replicate_count(self):
        """Number of present replicate columns (presence is column-wise)."""
        return int((~np.isnan(self.surrogates[0])).sum())

    def first_surrogate(self):
        col = self.surrogates[:, 0]
        if np.isnan(col).any():
            raise MissingSource("first replicate is absent for this record")
        return col.copy()

    def averaged_surrogate(self):
        with np.errstate(invalid="ignore"):
            return np.nanmean(self.surrogates, axis=1)


@dataclass(frozen=True)
class PatientRecord:
    """One patient trajectory with a terminal outcome.

    stage1_outcome and remission_flag are only meaningful for real-data
    cohorts where remitting patients skip the second stage.
    """

    id: int
    stages: tuple
    outcome: float
    stage1_outcome: float | None = None
    remission_flag: int | None = None

    def __post_init__(self):
        stages = tuple(self.stages)
        if not 1 <= len(stages) <= 2:
            raise ValueError("a record holds one or two stages")
        if not np.isfinite(self.outcome):
            raise ValueError("outcome must be finite")
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "outcome", float(self.outcome))

    @property
    def n_stages(self):
        return len(self.stages)

    def stage(self, stage):
        if not 1 <= stage <= len(self.stages):
            raise StageAbsent(f"record {self.id} has no stage {stage}")
        return self.stages[stage - 1]


# ---------------------------------------------------------------------------
# Covariate sources
# ---------------------------------------------------------------------------

class SourceKind(str, Enum):
    TRUE = "true"
    SINGLE_SURROGATE = "single"
    AVERAGED_SURROGATE = "averaged"
    CALIBRATED = "calibrated"


@dataclass(frozen=True)
class CovariateSource:
    """How to fill the error-prone slots of a history.

    For CALIBRATED the pipelines fit the calibration themselves unless
    precomputed values are supplied: `estimates` holds one mapping per
    stage from record id to estimate vector (record-level assembly),
    `models` holds one fitted calibration model per stage (packed
    pipelines apply the stored model instead of refitting, e.g. when
    scoring new patients with a trained policy).
    """

    kind: SourceKind
    estimates: tuple = None
    models: tuple = None

    @classmethod
    def true(cls):
        return cls(SourceKind.TRUE)

    @classmethod
    def single_surrogate(cls):
        return cls(SourceKind.SINGLE_SURROGATE)

    @classmethod
    def averaged_surrogate(cls):
        return cls(SourceKind.AVERAGED_SURROGATE)

    @classmethod
    def calibrated(cls, stage1_estimates=None, stage2_estimates=None):
        if stage1_estimates is None and stage2_estimates is None:
            return cls(SourceKind.CALIBRATED)
        return cls(SourceKind.CALIBRATED, estimates=(stage1_estimates, stage2_estimates))

    @classmethod
    def calibrated_with_models(cls, models):
        return cls(SourceKind.CALIBRATED, models=tuple(models))


def as_source(source):
    if isinstance(source, CovariateSource):
        return source
    return CovariateSource(SourceKind(source))


# ---------------------------------------------------------------------------
# Design terms
# ---------------------------------------------------------------------------

class TermSource(str, Enum):
    INTERCEPT = "intercept"
    ERROR_FREE = "error_free"
    ERROR_PRONE = "error_prone"
    PRIOR_TREATMENT = "prior_treatment"


class Transform(str, Enum):
    IDENTITY = "identity"
    # extension point: interaction with the first-stage treatment, needed
    # by stage-2 treatment-free components that model treatment carryover
    TIMES_PRIOR_TREATMENT = "times_prior_treatment"


@dataclass(frozen=True)
class CovariateTerm:
    """One column of a stage design, resolved against the flat history."""

    source: TermSource
    index: int = 0
    transform: Transform = Transform.IDENTITY

    @classmethod
    def intercept(cls):
        return cls(TermSource.INTERCEPT)

    @classmethod
    def error_free(cls, index, transform=Transform.IDENTITY):
        return cls(TermSource.ERROR_FREE, index, transform)

    @classmethod
    def error_prone(cls, index, transform=Transform.IDENTITY):
        return cls(TermSource.ERROR_PRONE, index, transform)

    @classmethod
    def prior_treatment(cls):
        return cls(TermSource.PRIOR_TREATMENT)

    def to_dict(self):
        return {
            "source": self.source.value,
            "index": int(self.index),
            "transform": self.transform.value,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            TermSource(d["source"]),
            int(d.get("index", 0)),
            Transform(d.get("transform", "identity")),
        )


@dataclass(frozen=True)
class HistoryLayout:
    """Flat layout of a stage history: z/x blocks per stage, a1 appended."""

    stage: int
    error_free_dims: tuple
    error_prone_dims: tuple

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise StageAbsent(f"no stage {self.stage}")
        if len(self.error_free_dims) != self.stage or len(self.error_prone_dims) != self.stage:
            raise DimensionMismatch("layout needs one dimension entry per stage")

    @property
    def length(self):
        return sum(self.error_free_dims) + sum(self.error_prone_dims) + (1 if self.stage == 2 else 0)

    def blocks(self):
        """Yield (kind, stage_no, width, offset) in flat order."""
        offset = 0
        for s in range(1, self.stage + 1):
            for kind, width in (("z", self.error_free_dims[s - 1]), ("x", self.error_prone_dims[s - 1])):
                yield kind, s, width, offset
                offset += width
        if self.stage == 2:
            yield "a", 1, 1, offset

    def kind_at(self, index):
        """Return ('z'|'x'|'a', stage_no, within-block index) for a flat index."""
        for kind, s, width, offset in self.blocks():
            if offset <= index < offset + width:
                return kind, s, index - offset
        raise DimensionMismatch(f"history index {index} out of range (length {self.length})")

    def labels(self):
        out = []
        for kind, s, width, offset in self.blocks():
            if kind == "a":
                out.append("a1")
            else:
                for i in range(width):
                    out.append(f"{kind}{s}" if width == 1 else f"{kind}{s}_{i + 1}")
        return out


@dataclass(frozen=True)
class DesignSpec:
    """Term lists for the treatment-free block and the blip block."""

    treatment_free_terms: tuple
    blip_terms: tuple

    def __post_init__(self):
        object.__setattr__(self, "treatment_free_terms", tuple(self.treatment_free_terms))
        object.__setattr__(self, "blip_terms", tuple(self.blip_terms))
        if not self.treatment_free_terms or not self.blip_terms:
            raise ValueError("term lists must be non-empty")

    @property
    def n_treatment_free(self):
        return len(self.treatment_free_terms)

    @property
    def n_blip(self):
        return len(self.blip_terms)

    @property
    def n_params(self):
        return self.n_treatment_free + self.n_blip

    def validate(self, layout):
        for term in self.treatment_free_terms + self.blip_terms:
            if term.source == TermSource.INTERCEPT:
                pass
            elif term.source == TermSource.PRIOR_TREATMENT:
                if layout.stage != 2:
                    raise DimensionMismatch("prior-treatment term is only valid at stage 2")
            else:
                kind, _, _ = layout.kind_at(term.index)
                want = "z" if term.source == TermSource.ERROR_FREE else "x"
                if kind != want:
                    raise DimensionMismatch(
                        f"term index {term.index} is a '{kind}' slot, not '{want}'"
                    )
            if term.transform == Transform.TIMES_PRIOR_TREATMENT and layout.stage != 2:
                raise DimensionMismatch("prior-treatment interaction is only valid at stage 2")

    def term_labels(self, layout):
        labels = layout.labels()

        def one(term):
            if term.source == TermSource.INTERCEPT:
                base = "intercept"
            elif term.source == TermSource.PRIOR_TREATMENT:
                base = "a1"
            else:
                base = labels[term.index]
            if term.transform == Transform.TIMES_PRIOR_TREATMENT:
                base = f"{base}:a1"
            return base

        return [one(t) for t in self.treatment_free_terms], [one(t) for t in self.blip_terms]

    def to_dict(self):
        return {
            "treatment_free": [t.to_dict() for t in self.treatment_free_terms],
            "blip": [t.to_dict() for t in self.blip_terms],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            tuple(CovariateTerm.from_dict(t) for t in d["treatment_free"]),
            tuple(CovariateTerm.from_dict(t) for t in d["blip"]),
        )


# ---------------------------------------------------------------------------
# History assembly and design rows (record-level API)
# ---------------------------------------------------------------------------

def _stage_x_values(obs, source, stage, record_id):
    kind = source.kind
    if kind == SourceKind.TRUE:
        if obs.true_covariate is None:
            raise MissingSource(f"record {record_id}: true covariates are not stored")
        return np.asarray(obs.true_covariate, dtype=float)
    if kind == SourceKind.SINGLE_SURROGATE:
        return obs.first_surrogate()
    if kind == SourceKind.AVERAGED_SURROGATE:
        return obs.averaged_surrogate()
    if kind == SourceKind.CALIBRATED:
        if source.estimates is None:
            raise MissingSource("calibrated source without estimates; supply them or use fit_qlearning")
        try:
            return np.asarray(source.estimates[stage - 1][record_id], dtype=float)
        except (KeyError, IndexError, TypeError):
            raise MissingSource(f"record {record_id}: no calibrated estimate for stage {stage}") from None
    raise MissingSource(f"unknown covariate source {kind!r}")


def assemble_history(record, stage, source):
    """Build the flat stage history for one record.

    Stage 2 histories accumulate the stage-1 covariates and carry the
    stage-1 treatment as the final element.
    """
    source = as_source(source)
    if not 1 <= stage <= record.n_stages:
        raise StageAbsent(f"record {record.id} has no stage {stage}")
    parts = []
    for s in range(1, stage + 1):
        obs = record.stage(s)
        parts.append(np.asarray(obs.error_free, dtype=float))
        parts.append(_stage_x_values(obs, source, s, record.id))
    if stage == 2:
        parts.append(np.array([float(record.stage(1).treatment)]))
    return np.concatenate(parts) if parts else np.zeros(0)


def build_design_row(history, treatment, spec):
    """Expand one history into a design row [treatment-free block, A * blip block]."""
    history = np.asarray(history, dtype=float)
    if int(treatment) not in (0, 1):
        raise ValueError("treatment must be 0 or 1")

    def resolve(term):
        if term.source == TermSource.INTERCEPT:
            value = 1.0
        elif term.source == TermSource.PRIOR_TREATMENT:
            value = history[-1]
        else:
            if term.index >= history.shape[0]:
                raise DimensionMismatch(
                    f"term index {term.index} out of range for history of length {history.shape[0]}"
                )
            value = history[term.index]
        if term.transform == Transform.TIMES_PRIOR_TREATMENT:
            value = value * history[-1]
        return value

    tf = [resolve(t) for t in spec.treatment_free_terms]
    blip = [resolve(t) * float(treatment) for t in spec.blip_terms]
    return np.array(tf + blip)


# ---------------------------------------------------------------------------
# Packed (columnar) cohort used by the fitting pipelines
# ---------------------------------------------------------------------------

@dataclass
class StageBlock:
    """Columnar stage data; rows follow `patient_rows` into the cohort."""

    z: np.ndarray        # (m, dz)
    w: np.ndarray        # (m, dx, kmax), NaN = absent replicate
    a: np.ndarray        # (m,)
    x: np.ndarray | None  # (m, dx) true values, simulation only
    patient_rows: np.ndarray  # (m,) int

    @property
    def m(self):
        return self.z.shape[0]

    @property
    def dz(self):
        return self.z.shape[1]

    @property
    def dx(self):
        return self.w.shape[1]

    def take(self, rows, patient_rows):
        return StageBlock(
            self.z[rows],
            self.w[rows],
            self.a[rows],
            None if self.x is None else self.x[rows],
            patient_rows,
        )


@dataclass
class Cohort:
    """Columnar view of a patient set, the unit the pipelines operate on."""

    ids: np.ndarray
    y: np.ndarray
    stage1: StageBlock
    stage2: StageBlock | None = None
    y1: np.ndarray | None = None
    r1: np.ndarray | None = None
    dgp: object = None  # generating DgpConfig when simulated
    _stage2_pos: np.ndarray = field(default=None, repr=False)

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def n_stages(self):
        return 1 if self.stage2 is None else 2

    @property
    def stage2_pos(self):
        """Per-patient row index into the stage-2 block, -1 when absent."""
        if self._stage2_pos is None:
            pos = np.full(self.n, -1, dtype=np.intp)
            if self.stage2 is not None:
                pos[self.stage2.patient_rows] = np.arange(self.stage2.m)
            self._stage2_pos = pos
        return self._stage2_pos

    def stage_block(self, stage):
        if stage == 1:
            return self.stage1
        if stage == 2 and self.stage2 is not None:
            return self.stage2
        raise StageAbsent(f"cohort has no stage {stage}")

    def take(self, idx):
        """Row-resample the cohort (whole trajectories), e.g. for the bootstrap."""
        idx = np.asarray(idx, dtype=np.intp)
        s1 = self.stage1.take(idx, np.arange(idx.shape[0], dtype=np.intp))
        s2 = None
        if self.stage2 is not None:
            pos = self.stage2_pos[idx]
            keep = pos >= 0
            s2 = self.stage2.take(pos[keep], np.flatnonzero(keep).astype(np.intp))
        return Cohort(
            ids=self.ids[idx],
            y=self.y[idx],
            stage1=s1,
            stage2=s2,
            y1=None if self.y1 is None else self.y1[idx],
            r1=None if self.r1 is None else self.r1[idx],
            dgp=self.dgp,
        )

    def layout(self, stage):
        dz = [self.stage1.dz]
        dx = [self.stage1.dx]
        if stage == 2:
            block = self.stage_block(2)
            dz.append(block.dz)
            dx.append(block.dx)
        return HistoryLayout(stage, tuple(dz), tuple(dx))


def records_to_cohort(records):
    """Pack a record list into columnar form.

    Replicate matrices are NaN-padded to the widest replicate count per
    stage; true covariates are kept only when every record carries them.
    """
    records = list(records)
    if not records:
        raise ValueError("empty record set")
    n = len(records)
    n_stages = max(r.n_stages for r in records)

    def build_block(stage):
        members = [(i, r) for i, r in enumerate(records) if r.n_stages >= stage]
        obs = [r.stage(stage) for _, r in members]
        dz = obs[0].n_error_free
        dx = obs[0].n_error_prone
        kmax = max(o.surrogates.shape[1] for o in obs)
        m = len(members)
        z = np.empty((m, dz))
        w = np.full((m, dx, kmax), np.nan)
        a = np.empty(m)
        have_truth = all(o.true_covariate is not None for o in obs)
        x = np.empty((m, dx)) if have_truth else None
        for row, o in enumerate(obs):
            if o.n_error_free != dz or o.n_error_prone != dx:
                raise DimensionMismatch("covariate dimensions vary across records")
            z[row] = o.error_free
            w[row, :, : o.surrogates.shape[1]] = o.surrogates
            a[row] = o.treatment
            if have_truth:
                x[row] = o.true_covariate
        rows = np.array([i for i, _ in members], dtype=np.intp)
        return StageBlock(z, w, a, x, rows)

    stage1 = build_block(1)
    if stage1.m != n:
        raise ValueError("every record must have a first stage")
    stage2 = build_block(2) if n_stages == 2 else None

    y1 = None
    r1 = None
    if any(r.stage1_outcome is not None for r in records):
        y1 = np.array([np.nan if r.stage1_outcome is None else r.stage1_outcome for r in records])
    if any(r.remission_flag is not None for r in records):
        r1 = np.array([-1 if r.remission_flag is None else int(r.remission_flag) for r in records])

    return Cohort(
        ids=np.array([r.id for r in records]),
        y=np.array([r.outcome for r in records]),
        stage1=stage1,
        stage2=stage2,
        y1=y1,
        r1=r1,
    )


def cohort_to_records(cohort):
    records = []
    pos = cohort.stage2_pos
    for i in range(cohort.n):
        stages = [
            StageObservation(
                error_free=cohort.stage1.z[i],
                surrogates=_strip_nan_columns(cohort.stage1.w[i]),
                treatment=int(cohort.stage1.a[i]),
                true_covariate=None if cohort.stage1.x is None else cohort.stage1.x[i],
            )
        ]
        if cohort.stage2 is not None and pos[i] >= 0:
            j = pos[i]
            stages.append(
                StageObservation(
                    error_free=cohort.stage2.z[j],
                    surrogates=_strip_nan_columns(cohort.stage2.w[j]),
                    treatment=int(cohort.stage2.a[j]),
                    true_covariate=None if cohort.stage2.x is None else cohort.stage2.x[j],
                )
            )
        y1 = None
        r1 = None
        if cohort.y1 is not None and np.isfinite(cohort.y1[i]):
            y1 = float(cohort.y1[i])
        if cohort.r1 is not None and cohort.r1[i] >= 0:
            r1 = int(cohort.r1[i])
        records.append(
            PatientRecord(
                id=int(cohort.ids[i]),
                stages=tuple(stages),
                outcome=float(cohort.y[i]),
                stage1_outcome=y1,
                remission_flag=r1,
            )
        )
    return records


def _strip_nan_columns(w_row):
    # keep trailing all-NaN replicate columns out of record-level storage
    keep = ~np.isnan(w_row).all(axis=0)
    last = np.max(np.flatnonzero(keep)) + 1 if keep.any() else 1
    return w_row[:, :last]


def as_cohort(data):
    if isinstance(data, Cohort):
        return data
    return records_to_cohort(data)


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------

def _fmt(v):
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    return FLOAT_FMT % v


def patient_csv_header(dz, kmax, n_stages, with_truth, with_real_data):
    header = ["id"]
    for s in range(1, n_stages + 1):
        header += [f"z{s}_{i + 1}" for i in range(dz[s - 1])]
        header += [f"w{s}_r{l + 1}" for l in range(kmax[s - 1])]
        header += [f"a{s}"]
    header += ["y"]
    if with_real_data:
        header += ["y1", "r1"]
    if with_truth:
        header += [f"x{s}_true" for s in range(1, n_stages + 1)]
    return header


def write_patient_csv(path, data):
    """Write records in the documented patient schema (one error-prone
    coordinate per stage); floats carry 17 significant digits."""
    cohort = as_cohort(data)
    if cohort.stage1.dx != 1 or (cohort.stage2 is not None and cohort.stage2.dx != 1):
        raise ValueError("the patient CSV schema supports one error-prone coordinate per stage")
    n_stages = cohort.n_stages
    dz = [cohort.stage1.dz] + ([cohort.stage2.dz] if n_stages == 2 else [])
    kmax = [cohort.stage1.w.shape[2]] + ([cohort.stage2.w.shape[2]] if n_stages == 2 else [])
    with_truth = cohort.stage1.x is not None and (n_stages == 1 or cohort.stage2.x is not None)
    with_real = cohort.y1 is not None or cohort.r1 is not None
    pos = cohort.stage2_pos

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(patient_csv_header(dz, kmax, n_stages, with_truth, with_real))
        for i in range(cohort.n):
            row = [str(int(cohort.ids[i]))]
            row += [_fmt(v) for v in cohort.stage1.z[i]]
            row += [_fmt(v) for v in cohort.stage1.w[i, 0]]
            row += [str(int(cohort.stage1.a[i]))]
            if n_stages == 2:
                j = pos[i]
                if j >= 0:
                    row += [_fmt(v) for v in cohort.stage2.z[j]]
                    row += [_fmt(v) for v in cohort.stage2.w[j, 0]]
                    row += [str(int(cohort.stage2.a[j]))]
                else:
                    row += [""] * (dz[1] + kmax[1] + 1)
            row += [_fmt(cohort.y[i])]
            if with_real:
                y1 = None if cohort.y1 is None else cohort.y1[i]
                row += [_fmt(y1)]
                r1 = "" if cohort.r1 is None or cohort.r1[i] < 0 else str(int(cohort.r1[i]))
                row += [r1]
            if with_truth:
                row += [_fmt(cohort.stage1.x[i, 0])]
                if n_stages == 2:
                    j = pos[i]
                    row += [_fmt(cohort.stage2.x[j, 0]) if j >= 0 else ""]
            writer.writerow(row)


def _header_groups(header):
    groups = {"z": {1: [], 2: []}, "w": {1: [], 2: []}}
    simple = {}
    for col, name in enumerate(header):
        m = re.fullmatch(r"z([12])_(\d+)", name)
        if m:
            groups["z"][int(m.group(1))].append((int(m.group(2)), col))
            continue
        m = re.fullmatch(r"w([12])_r(\d+)", name)
        if m:
            groups["w"][int(m.group(1))].append((int(m.group(2)), col))
            continue
        simple[name] = col
    for kind in groups.values():
        for cols in kind.values():
            cols.sort()
    return groups, simple


def read_patient_csv(path, allow_empty=False, require_outcome=True):
    """Parse the patient schema back into records.

    With require_outcome=False the `y` column may be absent (covariate
    files for scoring); such records carry a placeholder outcome of 0.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("empty file") from None
        groups, simple = _header_groups(header)
        required = ("id", "a1", "y") if require_outcome else ("id", "a1")
        for column in required:
            if column not in simple:
                raise DataFormatError(f"missing required column {column!r}", line=1)
        n_stages = 2 if groups["w"][2] or "a2" in simple else 1
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                records.append(_parse_patient_row(row, groups, simple, n_stages))
            except DataFormatError:
                raise
            except Exception as exc:
                raise DataFormatError(str(exc), line=lineno) from exc
    if not records and not allow_empty:
        raise DataFormatError("no data rows")
    return records


def _cell(row, col):
    return row[col].strip() if col < len(row) else ""


def _float_cell(row, col, allow_empty=True):
    text = _cell(row, col)
    if not text:
        if allow_empty:
            return np.nan
        raise ValueError("empty cell where a value is required")
    return float(text)


def _parse_patient_row(row, groups, simple, n_stages):
    rid = int(_cell(row, simple["id"]))

    def stage_obs(stage):
        a_txt = _cell(row, simple[f"a{stage}"])
        w = [_float_cell(row, col) for _, col in groups["w"][stage]]
        if stage == 2 and not a_txt and all(np.isnan(v) for v in w):
            return None  # stage absent for this patient
        while len(w) > 1 and np.isnan(w[-1]):
            w.pop()  # trailing absent replicates are storage padding
        z = [_float_cell(row, col, allow_empty=False) for _, col in groups["z"][stage]]
        truth = None
        tcol = simple.get(f"x{stage}_true")
        if tcol is not None:
            value = _float_cell(row, tcol)
            if not np.isnan(value):
                truth = [value]
        return StageObservation(
            error_free=np.array(z),
            surrogates=np.array([w]),
            treatment=int(a_txt),
            true_covariate=truth,
        )

    stages = [stage_obs(1)]
    if n_stages == 2:
        obs2 = stage_obs(2)
        if obs2 is not None:
            stages.append(obs2)

    y1 = None
    r1 = None
    if "y1" in simple:
        value = _float_cell(row, simple["y1"])
        y1 = None if np.isnan(value) else value
    if "r1" in simple:
        text = _cell(row, simple["r1"])
        r1 = int(text) if text else None

    outcome = 0.0
    if "y" in simple:
        text = _cell(row, simple["y"])
        if text:
            outcome = float(text)
    return PatientRecord(
        id=rid,
        stages=tuple(stages),
        outcome=outcome,
        stage1_outcome=y1,
        remission_flag=r1,
    )
