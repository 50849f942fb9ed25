"""Regression-adjusted treatment effects under covariate-adaptive randomization.

The package covers the full workflow: sequential assignment schemes that
balance treatment within strata, five treatment-effect estimators (plain
stratified difference in means, OLS- and lasso-adjusted variants with shared
or stratum-specific vectors), nonparametric variance estimation with
degrees-of-freedom corrections, a Monte Carlo harness, and a CLI.
"""

from .data import CsvSchema, StratumSummary, TrialDataset, load_csv, save_csv, stratum_summaries
from .errors import (
    CarAdjustError,
    DegenerateStratumError,
    DfExhaustedError,
    EstimationError,
    InputError,
    NonConvergenceError,
    ParseError,
    SchemaError,
    SingularDesignError,
    ValidationError,
)
from .estimators import (
    ALL_ESTIMATORS,
    AdjustedVectors,
    DifferenceInMeans,
    LassoAdjusted,
    OlsAdjusted,
    TreatmentEffectEstimate,
    difference_in_means,
    estimate,
    lasso_adjusted,
    ols_adjusted,
    regression_adjusted,
)
from .expansion import CovariateExpander, ExpansionSpec, expand_covariates
from .inference import (
    ConfidenceInterval,
    VarianceEstimate,
    asymptotic_delta_common,
    asymptotic_delta_specific,
    confidence_interval,
    df_adjust,
    normal_quantile,
    variance_components,
)
from .lasso import (
    CenteredDesign,
    LassoFit,
    SolverConfig,
    build_centered_design,
    fit_lasso,
    fit_ols,
    fit_ols_centered,
    lambda_max,
    lambda_rate,
    select_lambda_cv,
)
from .randomization import (
    ALL_SCHEMES,
    AssignmentState,
    RandomizationScheme,
    assign_all,
    assign_next,
    new_state,
)
from .simulate import (
    BUILTIN_MODELS,
    CustomModel,
    ModelSpec,
    PotentialTrial,
    ReplicationReport,
    emit_report,
    generate,
    merge_reports,
    run_replications,
    true_tau,
    true_tau_detail,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
