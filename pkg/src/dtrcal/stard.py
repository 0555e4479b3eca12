"""Two-stage depression-trial pipeline with error-prone symptom scores.

Rows carry, per stage: a clinician-rated and a patient-rated symptom
score (treated as two replicates of the unobservable true score), the
score slope over the previous level, a binary switch preference, and the
binary treatment.  Remitting patients (r1 = 1) skip stage 2; the
terminal outcome is their stage-1 score, otherwise the average of both
stage outcomes.  Three estimators are compared: naive on the clinician
score, naive on the patient score, and calibrated using both replicates.
"""

import csv
from dataclasses import dataclass, fields

import numpy as np

from .data_model import (
    CovariateTerm,
    DesignSpec,
    PatientRecord,
    SourceKind,
    StageObservation,
    Transform,
    records_to_cohort,
)
from .errors import DataFormatError, MissingY2
from .inference import bootstrap

TABLE_VARIABLES = ("A2", "A2P2", "A2S2", "A2Q2", "A1", "A1P1", "A1S1", "A1Q1")


@dataclass(frozen=True)
class StardRow:
    """One patient; stage-2 fields are None for remitters."""

    id: int
    preference_1: int
    slope_1: float
    qids_c_1: float
    qids_s_1: float
    a_1: int
    y1: float
    r1: int
    preference_2: int | None = None
    slope_2: float | None = None
    qids_c_2: float | None = None
    qids_s_2: float | None = None
    a_2: int | None = None
    y2: float | None = None

    def __post_init__(self):
        if int(self.r1) not in (0, 1):
            raise ValueError(f"row {self.id}: r1 must be 0 or 1")
        if self.r1 == 1 and any(
            v is not None
            for v in (self.preference_2, self.slope_2, self.qids_c_2, self.qids_s_2, self.a_2, self.y2)
        ):
            raise ValueError(f"row {self.id}: remitters must not carry stage-2 fields")


def composite_outcome(row):
    """Terminal outcome: y1 for remitters, the two-stage average otherwise."""
    if row.y1 is None or (isinstance(row.y1, float) and np.isnan(row.y1)):
        raise MissingY2(f"row {row.id}: y1 is required")
    if row.r1 == 1:
        return float(row.y1)
    if row.y2 is None or (isinstance(row.y2, float) and np.isnan(row.y2)):
        raise MissingY2(f"row {row.id}: non-remitter without y2")
    return 0.5 * (float(row.y1) + float(row.y2))


def rows_to_records(rows, replicate_order=("c", "s")):
    """Build patient records; `replicate_order` sets which score is the
    first replicate (the one naive single-surrogate fits use)."""
    records = []
    for row in rows:
        y = composite_outcome(row)
        reps1 = {"c": row.qids_c_1, "s": row.qids_s_1}
        stages = [
            StageObservation(
                error_free=np.array([float(row.preference_1), float(row.slope_1)]),
                surrogates=np.array([[float(reps1[replicate_order[0]]), float(reps1[replicate_order[1]])]]),
                treatment=int(row.a_1),
            )
        ]
        if row.r1 == 0:
            needed = (row.preference_2, row.slope_2, row.qids_c_2, row.qids_s_2, row.a_2)
            if any(v is None for v in needed):
                raise DataFormatError(f"row {row.id}: non-remitter with incomplete stage-2 fields")
            reps2 = {"c": row.qids_c_2, "s": row.qids_s_2}
            stages.append(
                StageObservation(
                    error_free=np.array([float(row.preference_2), float(row.slope_2)]),
                    surrogates=np.array(
                        [[float(reps2[replicate_order[0]]), float(reps2[replicate_order[1]])]]
                    ),
                    treatment=int(row.a_2),
                )
            )
        records.append(
            PatientRecord(
                id=int(row.id),
                stages=tuple(stages),
                outcome=y,
                stage1_outcome=float(row.y1),
                remission_flag=int(row.r1),
            )
        )
    return records


def stard_design(stage2_carryover=False):
    """Stage designs: blips (1, P_j, S_j, Q_j), treatment-free main effects.

    With `stage2_carryover` the stage-2 treatment-free block also models
    the first-stage treatment and its interactions with the stage-1
    tailoring variables, so the stage-1 blip effects survive into the
    constructed stage-1 response for patients who entered stage 2.
    """
    # stage-1 history [p1, s1, q1]; stage-2 history [p1, s1, q1, p2, s2, q2, a1]
    stage1_terms = (
        CovariateTerm.intercept(),
        CovariateTerm.error_free(0),
        CovariateTerm.error_free(1),
        CovariateTerm.error_prone(2),
    )
    spec1 = DesignSpec(stage1_terms, stage1_terms)
    stage2_terms = (
        CovariateTerm.intercept(),
        CovariateTerm.error_free(3),
        CovariateTerm.error_free(4),
        CovariateTerm.error_prone(5),
    )
    tf2 = stage2_terms
    if stage2_carryover:
        tf2 = tf2 + (
            CovariateTerm.prior_treatment(),
            CovariateTerm.error_free(0, Transform.TIMES_PRIOR_TREATMENT),
            CovariateTerm.error_free(1, Transform.TIMES_PRIOR_TREATMENT),
            CovariateTerm.error_prone(2, Transform.TIMES_PRIOR_TREATMENT),
        )
    spec2 = DesignSpec(tf2, stage2_terms)
    return (spec1, spec2)


@dataclass
class StardReport:
    summaries: dict          # estimator name -> BootstrapSummary
    design: tuple
    n_patients: int
    n_stage2: int

    def blip_rows(self):
        """Rows in presentation order: stage-2 blips first."""
        rows = []
        some = next(iter(self.summaries.values()))
        blip_idx = [i for i, l in enumerate(some.labels) if l.startswith("blip")]
        for pos, idx in enumerate(blip_idx):
            row = {"variable": TABLE_VARIABLES[pos]}
            for name, summary in self.summaries.items():
                row[f"est_{name}"] = summary.point[idx]
                row[f"se_{name}"] = summary.se[idx]
                row[f"ci_{name}"] = (summary.ci_lower[idx], summary.ci_upper[idx])
            rows.append(row)
        return rows


def analyze_stard(rows, b=200, seed=0, design=None, ci="normal"):
    """Fit and bootstrap the three estimators on one row set."""
    rows = list(rows)
    if design is None:
        design = stard_design()
    records_c = rows_to_records(rows, replicate_order=("c", "s"))
    records_s = rows_to_records(rows, replicate_order=("s", "c"))
    cohort_c = records_to_cohort(records_c)
    cohort_s = records_to_cohort(records_s)

    seeds = np.random.SeedSequence(seed).spawn(3)
    summaries = {
        "clinician": bootstrap(cohort_c, design, SourceKind.SINGLE_SURROGATE, b, seed=seeds[0], ci=ci),
        "patient": bootstrap(cohort_s, design, SourceKind.SINGLE_SURROGATE, b, seed=seeds[1], ci=ci),
        "corrected": bootstrap(cohort_c, design, SourceKind.CALIBRATED, b, seed=seeds[2], ci=ci),
    }
    return StardReport(
        summaries=summaries,
        design=design,
        n_patients=cohort_c.n,
        n_stage2=0 if cohort_c.stage2 is None else cohort_c.stage2.m,
    )


# ---------------------------------------------------------------------------
# Synthetic fixture
# ---------------------------------------------------------------------------

FIXTURE_PSI1 = (0.4, 0.3, 0.2, -1.0)   # blips on (1, P1, S1, Q1)
FIXTURE_PSI2 = (0.5, 0.3, 0.2, -1.0)   # blips on (1, P2, S2, Q2)
FIXTURE_BETA1 = (1.0, 0.5, 0.5, 1.0)
FIXTURE_BETA2 = (1.0, 0.5, 0.5, 1.0)


def synthetic_fixture(seed, n=1438, n_stage2=377, error_sd=0.9,
                      psi1=FIXTURE_PSI1, psi2=FIXTURE_PSI2,
                      beta1=FIXTURE_BETA1, beta2=FIXTURE_BETA2):
    """Schema-conformant cohort with known blip coefficients.

    True scores are latent normals observed through two noisy replicates
    with known error SD.  Remitter outcomes follow the stage-1 model;
    entrant terminal outcomes carry the stage-1 blip forward plus a
    stage-2 model, which makes both stages' blips identified when the
    analysis uses the stage-2 carryover design (returned alongside).

    Returns (rows, truth, design).
    """
    rng = np.random.default_rng(seed)
    psi1 = np.asarray(psi1, dtype=float)
    psi2 = np.asarray(psi2, dtype=float)
    beta1 = np.asarray(beta1, dtype=float)
    beta2 = np.asarray(beta2, dtype=float)

    p1 = rng.integers(0, 2, n).astype(float)
    s1 = rng.normal(0.0, 1.0, n)
    q1 = rng.normal(1.0, 1.0, n)           # latent true score
    a1 = rng.integers(0, 2, n).astype(float)
    w1c = q1 + rng.normal(0.0, error_sd, n)
    w1s = q1 + rng.normal(0.0, error_sd, n)

    entrants = np.zeros(n, dtype=bool)
    entrants[rng.permutation(n)[:n_stage2]] = True

    h1 = np.column_stack([np.ones(n), p1, s1, q1])
    blip1 = (h1 @ psi1) * a1

    rows = []
    for i in range(n):
        if not entrants[i]:
            y1 = float(h1[i] @ beta1 + blip1[i] + rng.normal())
            rows.append(
                StardRow(
                    id=i,
                    preference_1=int(p1[i]),
                    slope_1=float(s1[i]),
                    qids_c_1=float(w1c[i]),
                    qids_s_1=float(w1s[i]),
                    a_1=int(a1[i]),
                    y1=y1,
                    r1=1,
                )
            )
        else:
            p2 = float(rng.integers(0, 2))
            s2 = float(rng.normal(0.0, 1.0))
            q2 = float(rng.normal(1.0, 1.0))
            a2 = float(rng.integers(0, 2))
            w2c = q2 + rng.normal(0.0, error_sd)
            w2s = q2 + rng.normal(0.0, error_sd)
            h2 = np.array([1.0, p2, s2, q2])
            composite = float(blip1[i] + h2 @ beta2 + (h2 @ psi2) * a2 + rng.normal())
            y1 = float(rng.normal())        # only the average is model-constrained
            y2 = 2.0 * composite - y1
            rows.append(
                StardRow(
                    id=i,
                    preference_1=int(p1[i]),
                    slope_1=float(s1[i]),
                    qids_c_1=float(w1c[i]),
                    qids_s_1=float(w1s[i]),
                    a_1=int(a1[i]),
                    y1=y1,
                    r1=0,
                    preference_2=int(p2),
                    slope_2=s2,
                    qids_c_2=float(w2c),
                    qids_s_2=float(w2s),
                    a_2=int(a2),
                    y2=y2,
                )
            )

    truth = {
        "stage2_blips": dict(zip(TABLE_VARIABLES[:4], psi2.tolist())),
        "stage1_blips": dict(zip(TABLE_VARIABLES[4:], psi1.tolist())),
        "error_sd": error_sd,
    }
    return rows, truth, stard_design(stage2_carryover=True)


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------

_FIELDS = [f.name for f in fields(StardRow)]
_INT_FIELDS = {"id", "preference_1", "a_1", "r1", "preference_2", "a_2"}


def write_stard_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_FIELDS)
        for row in rows:
            out = []
            for name in _FIELDS:
                value = getattr(row, name)
                if value is None:
                    out.append("")
                elif name in _INT_FIELDS:
                    out.append(str(int(value)))
                else:
                    out.append("%.17g" % value)
            writer.writerow(out)


def read_stard_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("empty file") from None
        missing = [name for name in _FIELDS if name not in header and name not in
                   ("preference_2", "slope_2", "qids_c_2", "qids_s_2", "a_2", "y2")]
        if missing:
            raise DataFormatError(f"missing required columns: {', '.join(missing)}", line=1)
        cols = {name: header.index(name) for name in _FIELDS if name in header}
        rows = []
        for lineno, raw in enumerate(reader, start=2):
            if not raw or all(not c.strip() for c in raw):
                continue
            try:
                kwargs = {}
                for name, col in cols.items():
                    text = raw[col].strip() if col < len(raw) else ""
                    if not text:
                        kwargs[name] = None
                    elif name in _INT_FIELDS:
                        kwargs[name] = int(text)
                    else:
                        kwargs[name] = float(text)
                rows.append(StardRow(**kwargs))
            except (ValueError, TypeError) as exc:
                raise DataFormatError(str(exc), line=lineno) from exc
    if not rows:
        raise DataFormatError("no data rows")
    return rows


def write_report_csv(path, report):
    names = list(report.summaries)
    header = ["variable"]
    for name in names:
        header += [f"est_{name}", f"se_{name}", f"ci_{name}"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in report.blip_rows():
            out = [row["variable"]]
            for name in names:
                lo, hi = row[f"ci_{name}"]
                out += ["%.6g" % row[f"est_{name}"], "%.6g" % row[f"se_{name}"],
                        "(%.6g, %.6g)" % (lo, hi)]
            writer.writerow(out)
