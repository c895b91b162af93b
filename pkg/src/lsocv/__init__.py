"""Penalized-spline marginal regression for longitudinal and clustered data.

Fits additive and varying-coefficient models by penalized weighted least
squares under a chosen working correlation, tunes multiple penalties by
leave-subject-out cross-validation (exact shortcut or fast Newton-optimized
approximation), and selects the working correlation structure itself.
"""

from .basis import (
    BasisSpec,
    DesignAssembly,
    TermSpec,
    assemble_design,
    basis_matrix,
    eval_basis,
    evaluate_term,
    make_knots,
    penalty_matrix,
)
from .correlation import (
    CorrelationModel,
    WorkingBlock,
    ar1,
    banded_lag1,
    compound_symmetry,
    estimate_exponential_params,
    exponential_nugget,
    exponential_nugget_correlation,
    independence,
    solve_block,
    unstructured,
    working_block,
)
from .criteria import (
    CriterionReport,
    criterion_report,
    lsocv_brute,
    lsocv_exact,
    lsocv_star,
    oracle_scores,
    v_star,
)
from .data import LongitudinalDataset, Subject
from .errors import (
    ConfigError,
    DomainError,
    EstimationError,
    LeverageSaturationError,
    LsocvError,
    NearSingularError,
    NumericalError,
    OptimizerStallError,
    SingularFitError,
)
from .estimator import (
    BootstrapResult,
    FitResult,
    LeverageReport,
    PenalizedFitter,
    bootstrap_ci,
    fit,
    leverage_diagnostics,
)
from .optimizer import (
    OptimizerConfig,
    OptimizerTrace,
    grid_search,
    log_grid,
    minimize_v_star,
    optimize_lambda,
)
from .selection import SelectionReport, estimate_candidates, select_correlation
from .simulation import (
    SimScenario,
    gen_dataset,
    run_efficiency_experiment,
    run_function_estimation,
    run_selection_cell,
    run_selection_experiment,
    true_f1,
    true_f2,
)

__version__ = "0.1.0"
