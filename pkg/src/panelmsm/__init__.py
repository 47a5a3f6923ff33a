"""Multi-state models for intermittently-observed panel data.

Continuous-time Markov and phase-type semi-Markov models with covariates,
fitted by MAP / Laplace / MCMC, plus simulation and a simulation-based
calibration harness.
"""

__version__ = "0.1.0"

from .errors import BoundsError, ConvergenceError, DataError, LaplaceError, SpecError
from .phasetype import (
    CoxianRates,
    ErlangExpParams,
    NormalizedMoments,
    ShapeScaleSpec,
    match_moments,
    moment_bounds_ok,
    normalized_moments,
    pt_cdf,
    pt_moments,
    pt_quantile,
    shape_upper_bound,
    shapescale_to_rates,
    to_coxian,
)
from .statespace import (
    MarkovStateParams,
    ModelSpec,
    NormalPrior,
    Params,
    SemiMarkovStateParams,
    SojournModel,
    assemble_Q,
    build_layout,
    next_state_probs,
)
from .likelihood import (
    Observation,
    OutcomeModel,
    PanelDataset,
    Subject,
    expm,
    forward_loglik,
    markov_loglik,
    subject_posterior_states,
)
from .inference import (
    FitResult,
    Posterior,
    elicit_logodds_prior,
    elicit_scale_prior,
    fit_laplace,
    fit_mcmc,
    hessian_fd,
    laplace_draws,
    log_posterior,
    mcmc_sample,
    optimize_map,
    transform,
    untransform,
)
from .simulate import (
    Population,
    SBCConfig,
    Schedule,
    Trajectory,
    observe_panel,
    prior_predictive_dataset,
    sbc_run,
    simulate_trajectory,
)
from .outputs import (
    DerivedSummary,
    expected_length_of_stay,
    mean_sojourn,
    next_state_distribution,
    observable_P,
    standardized_summary,
)

__all__ = [
    "BoundsError", "ConvergenceError", "DataError", "LaplaceError", "SpecError",
    "CoxianRates", "ErlangExpParams", "NormalizedMoments", "ShapeScaleSpec",
    "match_moments", "moment_bounds_ok", "normalized_moments", "pt_cdf",
    "pt_moments", "pt_quantile", "shape_upper_bound", "shapescale_to_rates",
    "to_coxian",
    "MarkovStateParams", "ModelSpec", "NormalPrior", "Params",
    "SemiMarkovStateParams", "SojournModel", "assemble_Q", "build_layout",
    "next_state_probs",
    "Observation", "OutcomeModel", "PanelDataset", "Subject", "expm",
    "forward_loglik", "markov_loglik", "subject_posterior_states",
    "FitResult", "Posterior", "elicit_logodds_prior", "elicit_scale_prior",
    "fit_laplace", "fit_mcmc", "hessian_fd", "laplace_draws", "log_posterior",
    "mcmc_sample", "optimize_map", "transform", "untransform",
    "Population", "SBCConfig", "Schedule", "Trajectory", "observe_panel",
    "prior_predictive_dataset", "sbc_run", "simulate_trajectory",
    "DerivedSummary", "expected_length_of_stay", "mean_sojourn",
    "next_state_distribution", "observable_P", "standardized_summary",
]
