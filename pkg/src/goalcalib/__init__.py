"""Goal-oriented QoI error estimation and error-driven Bayesian calibration.

The library pairs a cheap coarse PDE model with a finer one, estimates the
quantity-of-interest error between them with adjoint-weighted residuals, and
uses the estimate as the data misfit inside a Metropolis random-walk
calibration of the fine model's parameters.
"""

from .mesh import Field, MeshError, StructuredMesh, build_mesh, field_from_csv, field_to_csv
from .fem import (
    NewtonError,
    NumericError,
    SolverError,
    SparseSystem,
    apply_dirichlet,
    assemble,
    newton_solve,
    solve_linear,
)
from .elliptic import EllipticCoarseParams, EllipticFineParams, EllipticModelPair
from .tumor import TumorCoarseParams, TumorFineParams, TumorModelPair, Trajectory
from .goal_error import (
    ERROR_SOURCES,
    ErrorEstimateReport,
    OrderStudyResult,
    adjoint_weighted_residual,
    curvature_corrected_estimate,
    estimate_report,
    linearized_qoi_of_error,
    order_study,
    solve_errors_first_order,
    solve_errors_second_order,
)
from .calibration import (
    CalibrationError,
    CalibrationProblem,
    ChainRecord,
    ChainState,
    LognormalPrior,
    NoiseModel,
    PosteriorSummary,
    QoIErrorEvaluator,
    diagnostics,
    log_likelihood,
    log_prior,
    mh_step,
    run_chain,
    run_chains,
)
from .config import ConfigError, RunConfig, load_config
from .runner import (
    EXPERIMENTS,
    ExperimentError,
    RunManifest,
    build_evaluator,
    build_pair,
    export_report,
    read_csv,
    run_experiment,
    write_csv,
)

__all__ = [
    "Field",
    "MeshError",
    "StructuredMesh",
    "build_mesh",
    "field_from_csv",
    "field_to_csv",
    "NewtonError",
    "NumericError",
    "SolverError",
    "SparseSystem",
    "apply_dirichlet",
    "assemble",
    "newton_solve",
    "solve_linear",
    "EllipticCoarseParams",
    "EllipticFineParams",
    "EllipticModelPair",
    "TumorCoarseParams",
    "TumorFineParams",
    "TumorModelPair",
    "Trajectory",
    "ERROR_SOURCES",
    "ErrorEstimateReport",
    "OrderStudyResult",
    "adjoint_weighted_residual",
    "curvature_corrected_estimate",
    "estimate_report",
    "linearized_qoi_of_error",
    "order_study",
    "solve_errors_first_order",
    "solve_errors_second_order",
    "CalibrationError",
    "CalibrationProblem",
    "ChainRecord",
    "ChainState",
    "LognormalPrior",
    "NoiseModel",
    "PosteriorSummary",
    "QoIErrorEvaluator",
    "diagnostics",
    "log_likelihood",
    "log_prior",
    "mh_step",
    "run_chain",
    "run_chains",
    "ConfigError",
    "RunConfig",
    "load_config",
    "EXPERIMENTS",
    "ExperimentError",
    "RunManifest",
    "build_evaluator",
    "build_pair",
    "export_report",
    "read_csv",
    "run_experiment",
    "write_csv",
]
