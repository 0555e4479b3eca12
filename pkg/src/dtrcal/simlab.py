"""Data-generating processes and Monte-Carlo experiment drivers.

Two families of synthetic cohorts are provided: a one-stage design with
a single error-prone covariate observed through two replicates, and a
two-stage design with three replicates per stage where the third
replicate is missing for most patients.  Experiment drivers estimate
bias/SE/RMSE/coverage tables, treatment-prediction accuracy, and values
achieved by the fitted regimes on fresh test cohorts.

Replications are reproducible: a master seed is spawned into one child
seed sequence per replication, so results do not depend on worker
scheduling and any single replication can be rerun in isolation.
"""

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import kernels
from .data_model import (
    Cohort,
    CovariateTerm,
    DesignSpec,
    SourceKind,
    StageBlock,
    Transform,
    as_cohort,
    cohort_to_records,
)
from .errors import ConfigError, DtrError, MissingSource
from .inference import bootstrap
from .qlearning import Policy, fit_qlearning, policy_actions

TREATMENT_FREE_SHAPES = ("linear", "cubic", "exponential", "complex")

ESTIMATOR_ORDER = (
    SourceKind.TRUE,
    SourceKind.SINGLE_SURROGATE,
    SourceKind.AVERAGED_SURROGATE,
    SourceKind.CALIBRATED,
)

PREDICTION_SCENARIOS = (
    (SourceKind.SINGLE_SURROGATE, SourceKind.TRUE),
    (SourceKind.AVERAGED_SURROGATE, SourceKind.TRUE),
    (SourceKind.CALIBRATED, SourceKind.TRUE),
    (SourceKind.SINGLE_SURROGATE, SourceKind.SINGLE_SURROGATE),
    (SourceKind.AVERAGED_SURROGATE, SourceKind.AVERAGED_SURROGATE),
    (SourceKind.CALIBRATED, SourceKind.CALIBRATED),
)


@dataclass(frozen=True)
class DgpConfig:
    """Parameters of a synthetic cohort.

    sigma and replicates are per-stage tuples (stage 1 first).  true_psi
    is (psi10, psi11) for one stage and (psi20, psi21, psi10, psi11) for
    two stages; true_beta is (intercept, z, x) for one stage and the
    coefficients of (f(x1), z1, f(x2), z2) for two stages.
    """

    n: int
    stages: int
    sigma: tuple
    treatment_free: str = "linear"
    replicates: tuple = None
    missing_rate_third_replicate: float = 0.8
    true_beta: tuple = None
    true_psi: tuple = None
    seed: int = None

    def __post_init__(self):
        object.__setattr__(self, "sigma", tuple(float(s) for s in np.atleast_1d(self.sigma)))
        if self.replicates is None:
            object.__setattr__(self, "replicates", (2,) if self.stages == 1 else (3, 3))
        else:
            object.__setattr__(self, "replicates", tuple(int(r) for r in np.atleast_1d(self.replicates)))
        if self.true_beta is None:
            object.__setattr__(self, "true_beta", (0.5, 0.5, 1.0) if self.stages == 1 else (1.0, 1.0, 1.0, 1.0))
        else:
            object.__setattr__(self, "true_beta", tuple(float(v) for v in self.true_beta))
        if self.true_psi is None:
            object.__setattr__(self, "true_psi", (0.5, 1.0) if self.stages == 1 else (0.5, -1.0, 0.5, -1.0))
        else:
            object.__setattr__(self, "true_psi", tuple(float(v) for v in self.true_psi))
        self.validate()

    def validate(self):
        if self.stages not in (1, 2):
            raise ConfigError("stages must be 1 or 2")
        if self.n < 1:
            raise ConfigError("n must be positive")
        if len(self.sigma) != self.stages:
            raise ConfigError("one error SD per stage is required")
        if any(s <= 0 for s in self.sigma):
            raise ConfigError("error SDs must be positive")
        if len(self.replicates) != self.stages or any(r < 1 for r in self.replicates):
            raise ConfigError("replicate counts must be >= 1 per stage")
        if not 0.0 <= self.missing_rate_third_replicate <= 1.0:
            raise ConfigError("missing rate must lie in [0, 1]")
        if self.treatment_free not in TREATMENT_FREE_SHAPES:
            raise ConfigError(f"unknown treatment-free shape {self.treatment_free!r}")
        want_psi = 2 if self.stages == 1 else 4
        if len(self.true_psi) != want_psi:
            raise ConfigError(f"true_psi needs {want_psi} entries for {self.stages} stage(s)")

    def blip_truth(self):
        """Blip coefficients ordered like the fitted vector (stage 2 first)."""
        return np.asarray(self.true_psi, dtype=float)

    def stage_psi(self, stage):
        if self.stages == 1:
            return np.asarray(self.true_psi, dtype=float)
        return np.asarray(self.true_psi[2:] if stage == 1 else self.true_psi[:2], dtype=float)


def one_stage_config(n=2000, sigma=0.9, seed=None, **kw):
    return DgpConfig(n=n, stages=1, sigma=(sigma,), seed=seed, **kw)


def two_stage_config(n=2000, sigma1=0.9, sigma2=0.9, treatment_free="linear", seed=None, **kw):
    return DgpConfig(
        n=n, stages=2, sigma=(sigma1, sigma2), treatment_free=treatment_free, seed=seed, **kw
    )


def _treatment_free_fn(name):
    if name == "linear":
        return lambda x: x
    if name == "cubic":
        return lambda x: x + x**3
    if name == "exponential":
        return lambda x: x + np.exp(x)
    if name == "complex":
        return lambda x: x + np.sin(x**2) + np.cos(x**2)
    raise ConfigError(f"unknown treatment-free shape {name!r}")


# ---------------------------------------------------------------------------
# Default design specs (one error-prone and one error-free covariate per stage)
# ---------------------------------------------------------------------------

def one_stage_design():
    """Stage history [z, x]: treatment-free (1, z, x), blip (1, x)."""
    tf = (CovariateTerm.intercept(), CovariateTerm.error_free(0), CovariateTerm.error_prone(1))
    blip = (CovariateTerm.intercept(), CovariateTerm.error_prone(1))
    return (DesignSpec(tf, blip),)


def two_stage_design():
    """Stage-2 history [z1, x1, z2, x2, a1].

    The stage-2 treatment-free block keeps the first-stage treatment and
    its tailoring interaction; otherwise the stage-1 effect would leak
    into the stage-1 response construction and bias its blip estimates.
    """
    spec1 = DesignSpec(
        (CovariateTerm.intercept(), CovariateTerm.error_free(0), CovariateTerm.error_prone(1)),
        (CovariateTerm.intercept(), CovariateTerm.error_prone(1)),
    )
    spec2 = DesignSpec(
        (
            CovariateTerm.intercept(),
            CovariateTerm.error_free(0),
            CovariateTerm.error_prone(1),
            CovariateTerm.prior_treatment(),
            CovariateTerm.error_prone(1, Transform.TIMES_PRIOR_TREATMENT),
            CovariateTerm.error_free(2),
            CovariateTerm.error_prone(3),
        ),
        (CovariateTerm.intercept(), CovariateTerm.error_prone(3)),
    )
    return (spec1, spec2)


def design_for(cfg):
    return one_stage_design() if cfg.stages == 1 else two_stage_design()


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

def _replicate_matrix(rng, x, sigma, n_replicates, missing_rate):
    n = x.shape[0]
    w = x[:, None] + rng.normal(0.0, sigma, size=(n, n_replicates))
    if n_replicates >= 3 and missing_rate > 0:
        missing = rng.random(n) < missing_rate
        w[missing, 2] = np.nan
    return w[:, None, :]  # (n, dx=1, k)


def simulate_cohort(cfg, seed=None):
    """Generate a packed cohort; true covariates are retained."""
    if seed is None:
        seed = cfg.seed
    if seed is None:
        raise ConfigError("a seed is required to simulate")
    rng = np.random.default_rng(seed)

    if cfg.stages == 1:
        x = rng.normal(1.0, 1.0, cfg.n)
        z = rng.normal(1.0, 1.0, cfg.n)
        w = _replicate_matrix(rng, x, cfg.sigma[0], cfg.replicates[0], 0.0)
        a = rng.integers(0, 2, cfg.n).astype(float)
        eps = rng.normal(0.0, 1.0, cfg.n)
        b0, bz, bx = cfg.true_beta
        p0, p1 = cfg.true_psi
        y = b0 + bz * z + bx * x + (p0 + p1 * x) * a + eps
        stage1 = StageBlock(z[:, None], w, a, x[:, None], np.arange(cfg.n, dtype=np.intp))
        return Cohort(ids=np.arange(cfg.n), y=y, stage1=stage1, dgp=cfg)

    f = _treatment_free_fn(cfg.treatment_free)
    x1 = rng.normal(1.0, 1.0, cfg.n)
    z1 = rng.normal(0.5, 1.0, cfg.n)
    x2 = rng.normal(1.0, 1.0, cfg.n)
    z2 = rng.normal(0.5, 1.0, cfg.n)
    w1 = _replicate_matrix(rng, x1, cfg.sigma[0], cfg.replicates[0], cfg.missing_rate_third_replicate)
    w2 = _replicate_matrix(rng, x2, cfg.sigma[1], cfg.replicates[1], cfg.missing_rate_third_replicate)
    a1 = rng.integers(0, 2, cfg.n).astype(float)
    a2 = rng.integers(0, 2, cfg.n).astype(float)
    eps = rng.normal(0.0, 1.0, cfg.n)
    c1, c2, c3, c4 = cfg.true_beta
    p20, p21, p10, p11 = cfg.true_psi
    y = (
        c1 * f(x1) + c2 * z1 + c3 * f(x2) + c4 * z2
        + (p10 + p11 * x1) * a1 + (p20 + p21 * x2) * a2 + eps
    )
    rows = np.arange(cfg.n, dtype=np.intp)
    stage1 = StageBlock(z1[:, None], w1, a1, x1[:, None], rows)
    stage2 = StageBlock(z2[:, None], w2, a2, x2[:, None], rows.copy())
    return Cohort(ids=np.arange(cfg.n), y=y, stage1=stage1, stage2=stage2, dgp=cfg)


def simulate_one_stage(cfg, seed=None):
    if cfg.stages != 1:
        raise ConfigError("config is not one-stage")
    return cohort_to_records(simulate_cohort(cfg, seed))


def simulate_two_stage(cfg, seed=None):
    if cfg.stages != 2:
        raise ConfigError("config is not two-stage")
    return cohort_to_records(simulate_cohort(cfg, seed))


# ---------------------------------------------------------------------------
# True mean outcome and optimal actions
# ---------------------------------------------------------------------------

def _require_truth(cohort):
    cfg = cohort.dgp
    if cfg is None:
        raise MissingSource("cohort does not carry its generating configuration")
    if cohort.stage1.x is None or (cfg.stages == 2 and cohort.stage2.x is None):
        raise MissingSource("cohort does not retain true covariates")
    return cfg


def true_blip_values(cohort, stage):
    """psi_j0 + psi_j1 * x_j evaluated at the true covariates."""
    cfg = _require_truth(cohort)
    psi = cfg.stage_psi(stage)
    x = cohort.stage_block(stage).x[:, 0]
    return psi[0] + psi[1] * x


def true_optimal_actions(cohort, stage):
    return (true_blip_values(cohort, stage) > 0).astype(int)


def mean_outcome(cohort, a1, a2=None):
    """Expected outcome under the given actions (noise excluded)."""
    cfg = _require_truth(cohort)
    if cfg.stages == 1:
        b0, bz, bx = cfg.true_beta
        x = cohort.stage1.x[:, 0]
        z = cohort.stage1.z[:, 0]
        return b0 + bz * z + bx * x + true_blip_values(cohort, 1) * np.asarray(a1)
    f = _treatment_free_fn(cfg.treatment_free)
    c1, c2, c3, c4 = cfg.true_beta
    x1 = cohort.stage1.x[:, 0]
    z1 = cohort.stage1.z[:, 0]
    x2 = cohort.stage2.x[:, 0]
    z2 = cohort.stage2.z[:, 0]
    return (
        c1 * f(x1) + c2 * z1 + c3 * f(x2) + c4 * z2
        + true_blip_values(cohort, 1) * np.asarray(a1)
        + true_blip_values(cohort, 2) * np.asarray(a2)
    )


def true_policy(cfg):
    """Policy whose blip vectors are the generating coefficients."""
    specs = design_for(cfg)
    if cfg.stages == 1:
        psis = (np.asarray(cfg.true_psi, dtype=float),)
    else:
        psis = (np.asarray(cfg.true_psi[2:], dtype=float), np.asarray(cfg.true_psi[:2], dtype=float))
    return Policy(stage_psis=psis, specs=specs)


# ---------------------------------------------------------------------------
# Estimation experiment (bias / SE / RMSE / coverage)
# ---------------------------------------------------------------------------

@dataclass
class ExperimentReport:
    estimate_rows: list = field(default_factory=list)
    accuracy_rows: list = field(default_factory=list)
    value_rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


def _normalize_estimators(estimators):
    if estimators is None:
        return ESTIMATOR_ORDER
    wanted = {SourceKind(e) for e in estimators}
    return tuple(k for k in ESTIMATOR_ORDER if k in wanted)


def _seed_sequence(seed):
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def _blip_indices(labels):
    return [i for i, l in enumerate(labels) if l.startswith("blip")]


def _estimation_rep(cfg, estimators, b, child_ss):
    """One replication: simulate, fit each estimator, optionally bootstrap."""
    streams = child_ss.spawn(1 + len(estimators))
    cohort = simulate_cohort(cfg, streams[0])
    specs = design_for(cfg)
    truth = cfg.blip_truth()
    n_blips = truth.shape[0]

    estimates = np.full((len(estimators), n_blips), np.nan)
    covers = np.full((len(estimators), n_blips), np.nan)
    failures = []
    for j, (estimator, stream) in enumerate(zip(estimators, streams[1:])):
        try:
            if b >= 2:
                summary = bootstrap(cohort, specs, estimator, b, seed=stream)
                idx = _blip_indices(summary.labels)
                estimates[j] = summary.point[idx]
                covers[j] = (
                    (summary.ci_lower[idx] <= truth) & (truth <= summary.ci_upper[idx])
                ).astype(float)
            else:
                result = fit_qlearning(cohort, specs, estimator)
                labels = result.coefficient_labels()
                estimates[j] = result.coefficient_vector()[_blip_indices(labels)]
        except DtrError as exc:
            failures.append(f"{estimator.value}: {exc}")
    return estimates, covers, failures


def _run_parallel(worker, tasks, parallelism):
    if parallelism <= 1 or len(tasks) <= 1:
        return [worker(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=parallelism) as pool:
        chunk = max(1, len(tasks) // (parallelism * 4))
        return list(pool.map(worker, tasks, chunksize=chunk))


class _EstimationWorker:
    """Picklable closure over the fixed per-experiment arguments."""

    def __init__(self, cfg, estimators, b):
        self.cfg = cfg
        self.estimators = estimators
        self.b = b

    def __call__(self, child_ss):
        return _estimation_rep(self.cfg, self.estimators, self.b, child_ss)


def run_estimation_experiment(cfg, estimators=None, reps=500, b=200, seed=None, parallelism=1):
    """Monte-Carlo bias/SE/RMSE/CR table for the requested estimators.

    Deterministic given (cfg, seed): replication r always receives the
    r-th spawned seed sequence, whatever the parallelism.
    """
    if reps < 1:
        raise ConfigError("reps must be >= 1")
    estimators = _normalize_estimators(estimators)
    if seed is None:
        seed = cfg.seed
    if seed is None:
        raise ConfigError("a master seed is required")
    t0 = time.perf_counter()

    children = _seed_sequence(seed).spawn(reps)
    worker = _EstimationWorker(cfg, estimators, b)
    results = _run_parallel(worker, children, parallelism)

    truth = cfg.blip_truth()
    n_blips = truth.shape[0]
    estimates = np.stack([r[0] for r in results])  # (reps, n_est, n_blips)
    covers = np.stack([r[1] for r in results])
    failures = [msg for r in results for msg in r[2]]

    labels = _blip_labels(cfg)
    rows = []
    for j, estimator in enumerate(estimators):
        est = estimates[:, j, :]
        ok = ~np.isnan(est[:, 0])
        used = int(ok.sum())
        for p in range(n_blips):
            col = est[ok, p]
            bias = float(col.mean() - truth[p]) if used else np.nan
            se = float(col.std(ddof=1)) if used > 1 else np.nan
            cov = covers[ok, j, p]
            cov = cov[~np.isnan(cov)]
            rows.append(
                {
                    "estimator": estimator.value,
                    "parameter": labels[p],
                    "truth": float(truth[p]),
                    "bias": bias,
                    "se": se,
                    "rmse": float(np.hypot(bias, se)) if used > 1 else np.nan,
                    "cr": float(cov.mean()) if cov.size else np.nan,
                    "reps_used": used,
                }
            )

    return ExperimentReport(
        estimate_rows=rows,
        metadata={
            "config": asdict(cfg),
            "estimators": [e.value for e in estimators],
            "reps": reps,
            "bootstrap_b": b,
            "seed": seed if isinstance(seed, int) else repr(seed),
            "failures": failures,
            "kernel_backend": kernels.BACKEND,
            "elapsed_s": time.perf_counter() - t0,
        },
    )


def _blip_labels(cfg):
    if cfg.stages == 1:
        return ["blip1:intercept", "blip1:x1"]
    return ["blip2:intercept", "blip2:x2", "blip1:intercept", "blip1:x1"]


# ---------------------------------------------------------------------------
# Prediction accuracy and value of the fitted regimes
# ---------------------------------------------------------------------------

def _scenario_fits(train, specs, scenarios):
    fits = {}
    for fit_kind, _ in scenarios:
        if fit_kind not in fits:
            fits[fit_kind] = fit_qlearning(train, specs, fit_kind)
    return fits


def evaluate_prediction_accuracy(train, test, scenarios=None):
    """Share of test patients whose recommended action matches the true optimum.

    Each scenario pairs the covariate source used to fit the estimator on
    the training data with the source read from the test data.
    """
    train = as_cohort(train)
    test = as_cohort(test)
    cfg = _require_truth(test)
    scenarios = tuple(scenarios) if scenarios is not None else PREDICTION_SCENARIOS
    fits = _scenario_fits(train, design_for(cfg), scenarios)
    return evaluate_prediction_accuracy_with_fits(fits, test, scenarios)


def evaluate_value(policy, test, source):
    """Mean of the true outcome function under the policy's actions."""
    test = as_cohort(test)
    cfg = _require_truth(test)
    a1 = policy_actions(policy, test, source, 1)
    a2 = policy_actions(policy, test, source, 2) if cfg.stages == 2 else None
    return float(mean_outcome(test, a1, a2).mean())


def _policy_rep(cfg, train_n, test_n, scenarios, child_ss):
    train_ss, test_ss = child_ss.spawn(2)
    train = simulate_cohort(replace(cfg, n=train_n), train_ss)
    test = simulate_cohort(replace(cfg, n=test_n), test_ss)
    specs = design_for(cfg)
    fits = _scenario_fits(train, specs, scenarios)

    accuracy = evaluate_prediction_accuracy_with_fits(fits, test, scenarios)

    values = {"optimal": float(
        mean_outcome(
            test,
            true_optimal_actions(test, 1),
            true_optimal_actions(test, 2) if cfg.stages == 2 else None,
        ).mean()
    )}
    for fit_kind, eval_kind in scenarios:
        key = f"{fit_kind.value}|{eval_kind.value}"
        values[key] = evaluate_value(fits[fit_kind].policy, test, eval_kind)
    return accuracy, values


def evaluate_prediction_accuracy_with_fits(fits, test, scenarios):
    cfg = _require_truth(test)
    optimal = {s: true_optimal_actions(test, s) for s in range(1, cfg.stages + 1)}
    rows = []
    for fit_kind, eval_kind in scenarios:
        policy = fits[fit_kind].policy
        correct = []
        for stage in range(1, cfg.stages + 1):
            actions = policy_actions(policy, test, eval_kind, stage)
            correct.append(actions == optimal[stage])
        row = {
            "fit_source": fit_kind.value,
            "eval_source": eval_kind.value,
            "stage1_accuracy": float(np.mean(correct[0])),
        }
        if cfg.stages == 2:
            row["stage2_accuracy"] = float(np.mean(correct[1]))
            row["joint_accuracy"] = float(np.mean(correct[0] & correct[1]))
        rows.append(row)
    return rows


class _PolicyWorker:
    def __init__(self, cfg, train_n, test_n, scenarios):
        self.cfg = cfg
        self.train_n = train_n
        self.test_n = test_n
        self.scenarios = scenarios

    def __call__(self, child_ss):
        return _policy_rep(self.cfg, self.train_n, self.test_n, self.scenarios, child_ss)


def run_policy_experiment(cfg, reps=500, train_n=2000, test_n=5000, seed=None, parallelism=1):
    """Accuracy and value study on fresh train/test cohorts per replication."""
    if reps < 1:
        raise ConfigError("reps must be >= 1")
    if seed is None:
        seed = cfg.seed
    if seed is None:
        raise ConfigError("a master seed is required")
    t0 = time.perf_counter()
    scenarios = PREDICTION_SCENARIOS

    children = _seed_sequence(seed).spawn(reps)
    worker = _PolicyWorker(cfg, train_n, test_n, scenarios)
    results = _run_parallel(worker, children, parallelism)

    accuracy_rows = []
    first_acc = results[0][0]
    for i, template in enumerate(first_acc):
        row = {"fit_source": template["fit_source"], "eval_source": template["eval_source"]}
        for key in template:
            if key.endswith("_accuracy"):
                row[key] = float(np.mean([r[0][i][key] for r in results]))
        accuracy_rows.append(row)

    value_rows = []
    for key in results[0][1]:
        vals = np.array([r[1][key] for r in results])
        value_rows.append(
            {
                "scenario": key,
                "value": float(vals.mean()),
                "sd": float(vals.std(ddof=1)) if reps > 1 else np.nan,
            }
        )

    return ExperimentReport(
        accuracy_rows=accuracy_rows,
        value_rows=value_rows,
        metadata={
            "config": asdict(cfg),
            "reps": reps,
            "train_n": train_n,
            "test_n": test_n,
            "seed": seed if isinstance(seed, int) else repr(seed),
            "kernel_backend": kernels.BACKEND,
            "elapsed_s": time.perf_counter() - t0,
        },
    )
