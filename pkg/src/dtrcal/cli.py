"""Command-line interface.

Subcommands:
  simulate   -- run a preset Monte-Carlo study and write its table CSV
  fit        -- fit the stage regressions on a patient CSV
  recommend  -- score new patients with a previously fitted policy
  stard      -- run the three-estimator real-data pipeline (or its
                synthetic fixture) and write the comparison table

Every command is deterministic given its configuration and master seed,
regardless of `--parallelism`; each output file gets a metadata sidecar
with the resolved configuration.  Exit codes: 0 success, 2 invalid
usage/configuration/data, 3 numerical failure.
"""

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__, kernels, simlab, stard
from .calibration import CalibrationModel
from .data_model import (
    CovariateSource,
    DesignSpec,
    SourceKind,
    read_patient_csv,
    records_to_cohort,
)
from .errors import (
    ConfigError,
    DataFormatError,
    DimensionMismatch,
    DtrError,
    MissingSource,
    MissingY2,
    StageAbsent,
)
from .inference import bootstrap, write_summary_csv
from .qlearning import Policy, fit_qlearning, policy_actions

log = logging.getLogger("dtrcal")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

_USAGE_ERRORS = (ConfigError, DataFormatError, MissingSource, StageAbsent,
                 DimensionMismatch, MissingY2, FileNotFoundError)

SIGMA_GRID = (0.5, 0.7, 0.9)

SOURCE_ALIASES = {
    "true": SourceKind.TRUE,
    "single": SourceKind.SINGLE_SURROGATE,
    "avg": SourceKind.AVERAGED_SURROGATE,
    "averaged": SourceKind.AVERAGED_SURROGATE,
    "calibrated": SourceKind.CALIBRATED,
}


def _setup_logging():
    level = os.environ.get("DTR_CALIB_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _float_list(text):
    try:
        return tuple(float(v) for v in str(text).split(","))
    except ValueError:
        raise ConfigError(f"expected a comma-separated number list, got {text!r}") from None


def _seed_meta(master_seed, cell_index=None):
    meta = {"master_seed": master_seed}
    if cell_index is not None:
        meta["cell_index"] = cell_index
        meta["note"] = "cell seeds are SeedSequence(master_seed).spawn(n_cells)[cell_index]"
    return meta


def _write_metadata(path, payload):
    payload = dict(payload)
    payload["package_version"] = __version__
    payload["kernel_backend"] = kernels.BACKEND
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, default=str)
        fh.write("\n")


def _write_csv(path, fieldnames, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            out = {}
            for key, value in row.items():
                if isinstance(value, float):
                    out[key] = repr(value)  # shortest exact round trip
                else:
                    out[key] = value
            writer.writerow(out)


def _merge_config(args, parser_defaults):
    """Precedence: explicit flags > config file > built-in defaults."""
    if getattr(args, "config", None):
        with open(args.config) as fh:
            try:
                cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        for key, value in cfg.items():
            attr = key.replace("-", "_")
            if not hasattr(args, attr):
                raise ConfigError(f"unknown config key {key!r}")
            if getattr(args, attr) is None:
                setattr(args, attr, value)
    for attr, default in parser_defaults.items():
        if getattr(args, attr, None) is None:
            setattr(args, attr, default)
    return args


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

ESTIMATE_METRICS = ("bias", "se", "rmse", "cr")


def _estimate_table_rows(report, extra):
    """Pivot parameter-level rows to one wide row per estimator."""
    by_est = {}
    order = []
    for row in report.estimate_rows:
        key = row["estimator"]
        if key not in by_est:
            by_est[key] = dict(extra, estimator=key)
            order.append(key)
        for metric in ESTIMATE_METRICS:
            by_est[key][f"{row['parameter']}_{metric}"] = row[metric]
    return [by_est[k] for k in order]


def _run_table1(args, out_dir):
    sigmas = args.sigma if args.sigma is not None else SIGMA_GRID
    cells = list(sigmas)
    seeds = np.random.SeedSequence(args.seed).spawn(len(cells))
    rows = []
    meta_cells = []
    for i, sigma in enumerate(cells):
        cfg = simlab.one_stage_config(n=args.n, sigma=sigma)
        report = simlab.run_estimation_experiment(
            cfg, estimators=args.estimators, reps=args.reps, b=args.bootstrap,
            seed=seeds[i], parallelism=args.parallelism,
        )
        rows.extend(_estimate_table_rows(report, {"n": args.n, "sigma": sigma}))
        meta_cells.append({"sigma": sigma, **{k: report.metadata[k] for k in ("failures", "elapsed_s")}})
    fields = ["n", "sigma", "estimator"] + [
        f"{p}_{m}" for p in ("blip1:intercept", "blip1:x1") for m in ESTIMATE_METRICS
    ]
    _write_csv(os.path.join(out_dir, "table1.csv"), fields, rows)
    return "table1", {"cells": meta_cells}


def _two_stage_grid(args, default_pairs):
    s2 = args.sigma2 if args.sigma2 is not None else None
    s1 = args.sigma1 if args.sigma1 is not None else None
    if s2 is None and s1 is None:
        return default_pairs
    s2 = s2 if s2 is not None else SIGMA_GRID
    s1 = s1 if s1 is not None else SIGMA_GRID
    return [(a, b) for a in s2 for b in s1]


def _run_table2(args, out_dir, variants=("linear",), name="table2"):
    default_pairs = [(a, b) for a in SIGMA_GRID for b in SIGMA_GRID]
    if name == "table3":
        default_pairs = [(s, s) for s in SIGMA_GRID]
    pairs = _two_stage_grid(args, default_pairs)
    cells = [(v, s2, s1) for v in variants for (s2, s1) in pairs]
    seeds = np.random.SeedSequence(args.seed).spawn(len(cells))
    rows = []
    meta_cells = []
    for i, (variant, sigma2, sigma1) in enumerate(cells):
        cfg = simlab.two_stage_config(n=args.n, sigma1=sigma1, sigma2=sigma2, treatment_free=variant)
        report = simlab.run_estimation_experiment(
            cfg, estimators=args.estimators, reps=args.reps, b=args.bootstrap,
            seed=seeds[i], parallelism=args.parallelism,
        )
        extra = {"n": args.n, "sigma2": sigma2, "sigma1": sigma1}
        if name == "table3":
            extra = {"variant": variant, **extra}
        rows.extend(_estimate_table_rows(report, extra))
        meta_cells.append({"variant": variant, "sigma2": sigma2, "sigma1": sigma1,
                           "failures": report.metadata["failures"],
                           "elapsed_s": report.metadata["elapsed_s"]})
    params = ("blip2:intercept", "blip2:x2", "blip1:intercept", "blip1:x1")
    fields = (["variant"] if name == "table3" else []) + ["n", "sigma2", "sigma1", "estimator"]
    fields += [f"{p}_{m}" for p in params for m in ESTIMATE_METRICS]
    _write_csv(os.path.join(out_dir, f"{name}.csv"), fields, rows)
    return name, {"cells": meta_cells}


def _run_policy_tables(args, out_dir, name):
    pairs = _two_stage_grid(args, [(a, b) for a in SIGMA_GRID for b in SIGMA_GRID])
    seeds = np.random.SeedSequence(args.seed).spawn(len(pairs))
    acc_rows = []
    value_rows = []
    meta_cells = []
    for i, (sigma2, sigma1) in enumerate(pairs):
        cfg = simlab.two_stage_config(n=args.train_n, sigma1=sigma1, sigma2=sigma2)
        report = simlab.run_policy_experiment(
            cfg, reps=args.reps, train_n=args.train_n, test_n=args.test_n,
            seed=seeds[i], parallelism=args.parallelism,
        )
        for row in report.accuracy_rows:
            acc_rows.append({"sigma2": sigma2, "sigma1": sigma1, **row})
        for row in report.value_rows:
            value_rows.append({"sigma2": sigma2, "sigma1": sigma1, **row})
        meta_cells.append({"sigma2": sigma2, "sigma1": sigma1,
                           "elapsed_s": report.metadata["elapsed_s"]})
    if name == "table4":
        fields = ["sigma2", "sigma1", "fit_source", "eval_source",
                  "stage2_accuracy", "stage1_accuracy", "joint_accuracy"]
        _write_csv(os.path.join(out_dir, "table4.csv"), fields, acc_rows)
    else:
        fields = ["sigma2", "sigma1", "scenario", "value", "sd"]
        _write_csv(os.path.join(out_dir, "table5.csv"), fields, value_rows)
    return name, {"cells": meta_cells}


def cmd_simulate(args):
    args.estimators = None if args.estimators is None else [
        SOURCE_ALIASES[e.strip()] for e in args.estimators.split(",")
    ]
    if args.seed is None:
        raise ConfigError("--seed is required for simulate (no wall-clock seeding)")
    if args.reps is not None and args.reps < 1:
        raise ConfigError("--reps must be >= 1")
    os.makedirs(args.out, exist_ok=True)
    t0 = time.perf_counter()

    preset = args.preset
    if preset == "table1":
        name, extra = _run_table1(args, args.out)
    elif preset == "table2":
        name, extra = _run_table2(args, args.out, variants=("linear",), name="table2")
    elif preset == "table3":
        variants = tuple(args.variant.split(",")) if args.variant else ("cubic", "exponential", "complex")
        name, extra = _run_table2(args, args.out, variants=variants, name="table3")
    elif preset in ("table4", "table5"):
        name, extra = _run_policy_tables(args, args.out, preset)
    elif preset == "table6-fixture":
        rows, truth, design = stard.synthetic_fixture(args.seed)
        stard.write_stard_csv(os.path.join(args.out, "fixture.csv"), rows)
        with open(os.path.join(args.out, "fixture_truth.json"), "w") as fh:
            json.dump(truth, fh, indent=2)
            fh.write("\n")
        report = stard.analyze_stard(rows, b=args.bootstrap, seed=args.seed, design=design)
        stard.write_report_csv(os.path.join(args.out, "table6.csv"), report)
        name, extra = "table6", {"n_patients": report.n_patients, "n_stage2": report.n_stage2}
    else:
        raise ConfigError(f"unknown preset {args.preset!r}")

    _write_metadata(
        os.path.join(args.out, f"{name}.meta.json"),
        {
            "command": "simulate",
            "preset": preset,
            "seed": _seed_meta(args.seed),
            "n": args.n,
            "reps": args.reps,
            "bootstrap": args.bootstrap,
            "parallelism": args.parallelism,
            "elapsed_s": time.perf_counter() - t0,
            **extra,
        },
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _load_specs(path, n_stages):
    if path is None:
        return simlab.one_stage_design() if n_stages == 1 else simlab.two_stage_design()
    with open(path) as fh:
        payload = json.load(fh)
    specs = []
    for stage in range(1, n_stages + 1):
        key = f"stage{stage}"
        if key not in payload:
            raise ConfigError(f"spec file lacks {key!r}")
        specs.append(DesignSpec.from_dict(payload[key]))
    return tuple(specs)


def cmd_fit(args):
    if args.source not in SOURCE_ALIASES:
        raise ConfigError(f"--source must be one of {sorted(SOURCE_ALIASES)}")
    source = SOURCE_ALIASES[args.source]
    records = read_patient_csv(args.data)
    cohort = records_to_cohort(records)
    specs = _load_specs(args.spec, cohort.n_stages)
    os.makedirs(args.out, exist_ok=True)

    result = fit_qlearning(cohort, specs, source)
    with open(os.path.join(args.out, "fit.json"), "w") as fh:
        json.dump(result.to_dict(), fh, indent=2)
        fh.write("\n")

    if args.dump_calibration:
        if result.calibration_models is None:
            raise ConfigError("--dump-calibration requires --source calibrated")
        payload = {f"stage{i + 1}": m.to_dict() for i, m in enumerate(result.calibration_models)}
        with open(os.path.join(args.out, "calibration.json"), "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")

    if args.bootstrap:
        if args.seed is None:
            raise ConfigError("--seed is required with --bootstrap")
        summary = bootstrap(cohort, specs, source, args.bootstrap, seed=args.seed, ci=args.ci)
        write_summary_csv(os.path.join(args.out, "bootstrap.csv"), summary)

    _write_metadata(
        os.path.join(args.out, "fit.meta.json"),
        {
            "command": "fit",
            "data": os.path.abspath(args.data),
            "source": source.value,
            "n_patients": cohort.n,
            "n_stage2": 0 if cohort.stage2 is None else cohort.stage2.m,
            "bootstrap": args.bootstrap,
            "seed": args.seed,
            "ci": args.ci,
        },
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# recommend
# ---------------------------------------------------------------------------

def _policy_from_json(payload):
    stages = payload["stages"]
    n_stages = max(int(k) for k in stages)
    specs = []
    psis = []
    for stage in range(1, n_stages + 1):
        entry = stages[str(stage)]
        specs.append(DesignSpec.from_dict(entry["spec"]))
        psis.append(np.asarray(entry["psi"], dtype=float))
    policy = Policy(stage_psis=tuple(psis), specs=tuple(specs))

    kind = SourceKind(payload["covariate_source"])
    if kind == SourceKind.CALIBRATED:
        calib = payload.get("calibration", {})
        models = [
            CalibrationModel.from_dict(calib[str(stage)])
            for stage in range(1, n_stages + 1)
            if str(stage) in calib
        ]
        if len(models) < n_stages:
            raise ConfigError("fit JSON lacks the calibration models needed to score new patients")
        source = CovariateSource.calibrated_with_models(models)
    else:
        source = CovariateSource(kind)
    return policy, source


def cmd_recommend(args):
    with open(args.model) as fh:
        payload = json.load(fh)
    policy, source = _policy_from_json(payload)

    records = read_patient_csv(args.data, allow_empty=True, require_outcome=False)

    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "actions.csv")
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "stage", "action"])
        if records:
            cohort = records_to_cohort(records)
            for stage in range(1, min(policy.n_stages, cohort.n_stages) + 1):
                actions = policy_actions(policy, cohort, source, stage)
                block = cohort.stage_block(stage)
                for row, action in zip(block.patient_rows, actions):
                    writer.writerow([int(cohort.ids[row]), stage, int(action)])
    _write_metadata(
        os.path.join(args.out, "actions.meta.json"),
        {"command": "recommend", "model": os.path.abspath(args.model),
         "data": os.path.abspath(args.data), "n_patients": len(records)},
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# stard
# ---------------------------------------------------------------------------

def cmd_stard(args):
    os.makedirs(args.out, exist_ok=True)
    if args.synthetic_fixture:
        if args.seed is None:
            raise ConfigError("--seed is required with --synthetic-fixture")
        rows, truth, design = stard.synthetic_fixture(args.seed)
        stard.write_stard_csv(os.path.join(args.out, "fixture.csv"), rows)
        with open(os.path.join(args.out, "fixture_truth.json"), "w") as fh:
            json.dump(truth, fh, indent=2)
            fh.write("\n")
    elif args.data:
        rows = stard.read_stard_csv(args.data)
        design = stard.stard_design(stage2_carryover=args.stage2_carryover)
    else:
        raise ConfigError("either --data or --synthetic-fixture is required")

    seed = args.seed if args.seed is not None else 0
    report = stard.analyze_stard(rows, b=args.bootstrap, seed=seed, design=design, ci=args.ci)
    stard.write_report_csv(os.path.join(args.out, "table6.csv"), report)
    _write_metadata(
        os.path.join(args.out, "table6.meta.json"),
        {
            "command": "stard",
            "synthetic_fixture": bool(args.synthetic_fixture),
            "data": None if args.synthetic_fixture else os.path.abspath(args.data),
            "n_patients": report.n_patients,
            "n_stage2": report.n_stage2,
            "bootstrap": args.bootstrap,
            "seed": seed,
            "ci": args.ci,
        },
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="dtrcal",
        description="Two-stage treatment-regime estimation with replicate-calibrated covariates.",
    )
    parser.add_argument("--version", action="version", version=f"dtrcal {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; explicit flags take precedence")
        p.add_argument("--out", default=None, help="output directory (default: current)")
        p.add_argument("--seed", type=int, default=None, help="master seed")

    p_sim = sub.add_parser("simulate", help="run a preset Monte-Carlo study")
    common(p_sim)
    p_sim.add_argument("--preset", required=True,
                       choices=["table1", "table2", "table3", "table4", "table5",
                                "table6-fixture"])
    p_sim.add_argument("--n", type=int, default=None, help="patients per replication (default 2000)")
    p_sim.add_argument("--reps", type=int, default=None, help="Monte-Carlo replications (default 500)")
    p_sim.add_argument("--bootstrap", type=int, default=None,
                       help="bootstrap resamples per replication; 0 skips coverage (default 200)")
    p_sim.add_argument("--sigma", type=_float_list, default=None,
                       help="comma list of error SDs (one-stage presets)")
    p_sim.add_argument("--sigma1", type=_float_list, default=None,
                       help="comma list of stage-1 error SDs (two-stage presets)")
    p_sim.add_argument("--sigma2", type=_float_list, default=None,
                       help="comma list of stage-2 error SDs (two-stage presets)")
    p_sim.add_argument("--variant", default=None,
                       help="comma list of treatment-free shapes for table3")
    p_sim.add_argument("--estimators", default=None,
                       help="comma list among true,single,avg,calibrated (default: all)")
    p_sim.add_argument("--train-n", type=int, default=None, help="training size for table4/5")
    p_sim.add_argument("--test-n", type=int, default=None, help="test size for table4/5")
    p_sim.add_argument("--parallelism", type=int, default=None, help="worker processes (default 1)")
    p_sim.set_defaults(func=cmd_simulate,
                       _defaults={"n": 2000, "reps": 500, "bootstrap": 200,
                                  "train_n": 2000, "test_n": 5000, "parallelism": 1,
                                  "out": "."})

    p_fit = sub.add_parser("fit", help="fit the stage regressions on a patient CSV")
    common(p_fit)
    p_fit.add_argument("--data", required=True, help="patient CSV")
    p_fit.add_argument("--source", default=None,
                       help="covariate source: true|single|avg|calibrated (default calibrated)")
    p_fit.add_argument("--spec", default=None, help="JSON design-spec file (default: standard designs)")
    p_fit.add_argument("--bootstrap", type=int, default=None, help="bootstrap resamples (0 = skip)")
    p_fit.add_argument("--ci", choices=["normal", "percentile"], default=None)
    p_fit.add_argument("--dump-calibration", action="store_true")
    p_fit.set_defaults(func=cmd_fit,
                       _defaults={"source": "calibrated", "bootstrap": 0, "ci": "normal", "out": "."})

    p_rec = sub.add_parser("recommend", help="score patients with a fitted policy")
    common(p_rec)
    p_rec.add_argument("--model", required=True, help="fit.json produced by the fit command")
    p_rec.add_argument("--data", required=True, help="covariate CSV (patient schema; outcome optional)")
    p_rec.set_defaults(func=cmd_recommend, _defaults={"out": "."})

    p_std = sub.add_parser("stard", help="three-estimator real-data pipeline")
    common(p_std)
    p_std.add_argument("--data", default=None, help="row CSV in the documented schema")
    p_std.add_argument("--synthetic-fixture", action="store_true",
                       help="generate and analyze a schema-conformant synthetic cohort")
    p_std.add_argument("--bootstrap", type=int, default=None, help="bootstrap resamples (default 200)")
    p_std.add_argument("--ci", choices=["normal", "percentile"], default=None)
    p_std.add_argument("--stage2-carryover", action="store_true",
                       help="model first-stage treatment carryover in the stage-2 fit")
    p_std.set_defaults(func=cmd_stard, _defaults={"bootstrap": 200, "ci": "normal", "out": "."})

    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _merge_config(args, getattr(args, "_defaults", {}))
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_USAGE
    except DtrError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
