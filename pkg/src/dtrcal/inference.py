"""Nonparametric bootstrap for the stage-regression coefficients.

Whole trajectories are resampled with replacement (n out of n) and the
entire pipeline -- including any calibration moment estimation -- is
rerun on every resample, so the reported standard errors carry the
calibration step's variability.
"""

from dataclasses import dataclass

import numpy as np

from .data_model import as_cohort, as_source
from .errors import DimensionMismatch, DtrError, ResampleFitFailure
from .linmodel import RANK_RCOND
from .qlearning import fit_qlearning

Z95 = 1.96  # normal-approximation 95% half-width multiplier

RESAMPLE_FAILURE_TOLERANCE = 0.05


@dataclass(frozen=True)
class BootstrapSummary:
    labels: tuple
    point: np.ndarray
    se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    b: int

    def rows(self):
        for i, label in enumerate(self.labels):
            yield {
                "coefficient": label,
                "estimate": self.point[i],
                "se": self.se[i],
                "ci_lower": self.ci_lower[i],
                "ci_upper": self.ci_upper[i],
            }


def bootstrap(data, specs, source, b, seed, ci="normal", rcond=RANK_RCOND):
    """Bootstrap the full estimation pipeline.

    b resamples are drawn from a generator seeded by `seed`; a resample
    whose fit fails (rank deficiency, degenerate calibration) is redrawn,
    up to 5% of b failures in total.  ci="normal" gives point +/- 1.96*se;
    ci="percentile" uses the empirical 2.5/97.5 percentiles.
    """
    if b < 2:
        raise ValueError("bootstrap needs b >= 2 resamples")
    if ci not in ("normal", "percentile"):
        raise ValueError(f"unknown CI type {ci!r}")
    cohort = as_cohort(data)
    source = as_source(source)

    full = fit_qlearning(cohort, specs, source, rcond=rcond)
    point = full.coefficient_vector()
    labels = tuple(full.coefficient_labels())

    # one spawned stream per resample: results do not depend on execution
    # order, and a handful of failed resamples (redrawn from the spare
    # streams) cannot perturb the surviving ones
    n = cohort.n
    allowed = int(RESAMPLE_FAILURE_TOLERANCE * b)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    streams = ss.spawn(b + allowed)
    estimates = np.empty((b, point.shape[0]))
    failures = 0
    done = 0
    for stream in streams:
        if done == b:
            break
        idx = np.random.default_rng(stream).integers(0, n, size=n)
        try:
            refit = fit_qlearning(cohort.take(idx), specs, source, rcond=rcond)
        except DtrError:
            failures += 1
            if failures > allowed:
                raise ResampleFitFailure(
                    f"{failures} of {done + failures} bootstrap resamples failed to fit"
                ) from None
            continue
        estimates[done] = refit.coefficient_vector()
        done += 1
    if done < b:
        raise ResampleFitFailure(f"only {done} of {b} bootstrap resamples fit")

    se = estimates.std(axis=0, ddof=1)
    if ci == "normal":
        lower = point - Z95 * se
        upper = point + Z95 * se
    else:
        lower = np.percentile(estimates, 2.5, axis=0)
        upper = np.percentile(estimates, 97.5, axis=0)
    return BootstrapSummary(labels, point, se, lower, upper, b)


def coverage(true_value, summaries):
    """Per-coefficient fraction of summaries whose CI contains the truth."""
    summaries = list(summaries)
    if not summaries:
        raise ValueError("no summaries given")
    truth = np.asarray(true_value, dtype=float)
    hits = np.zeros(truth.shape[0])
    for s in summaries:
        if s.point.shape[0] != truth.shape[0]:
            raise DimensionMismatch("summary dimension does not match the truth vector")
        hits += (s.ci_lower <= truth) & (truth <= s.ci_upper)
    return hits / len(summaries)


def write_summary_csv(path, summary):
    import csv

    from .data_model import FLOAT_FMT

    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["coefficient", "estimate", "se", "ci_lower", "ci_upper"]
        )
        writer.writeheader()
        for row in summary.rows():
            writer.writerow(
                {k: (v if isinstance(v, str) else FLOAT_FMT % v) for k, v in row.items()}
            )
