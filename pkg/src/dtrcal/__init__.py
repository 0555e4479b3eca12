"""Two-stage treatment-regime estimation with replicate-calibrated covariates.

The package fits linear stage value models by backward induction,
corrects error-prone tailoring covariates through replicate-based
regression calibration, quantifies uncertainty with the nonparametric
bootstrap, and ships a simulation laboratory plus a real-data pipeline
behind the `dtrcal` command-line tool.
"""

from .calibration import CalibrationModel, calibrate, calibrate_stage, estimate_moments
from .data_model import (
    Cohort,
    CovariateSource,
    CovariateTerm,
    DesignSpec,
    HistoryLayout,
    PatientRecord,
    SourceKind,
    StageObservation,
    TermSource,
    Transform,
    assemble_history,
    build_design_row,
    cohort_to_records,
    read_patient_csv,
    records_to_cohort,
    write_patient_csv,
)
from .inference import BootstrapSummary, bootstrap, coverage
from .kernels import BACKEND as KERNEL_BACKEND
from .linmodel import OlsFit, fit_ols
from .qlearning import (
    Policy,
    QlearnResult,
    StageFit,
    fit_qlearning,
    optimal_action,
    policy_actions,
    pseudo_outcome,
    recommend,
)
from .simlab import (
    DgpConfig,
    evaluate_prediction_accuracy,
    evaluate_value,
    one_stage_config,
    run_estimation_experiment,
    run_policy_experiment,
    simulate_one_stage,
    simulate_two_stage,
    two_stage_config,
)
from .stard import StardRow, analyze_stard, composite_outcome, synthetic_fixture

__version__ = "0.1.0"
