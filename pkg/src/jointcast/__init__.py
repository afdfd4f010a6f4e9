"""Joint spatio-temporal modelling of incidence and mortality counts.

Fits shared-component models to area-year panels of two related count
outcomes, completes partially observed incidence series, produces short-term
forecasts with proper-score evaluation, and aggregates area-level posterior
draws into national totals.
"""

from .graphs import (
    AreaGraph,
    ConstraintSet,
    StructureMatrix,
    build_area_graph,
    constraints_for,
    icar_structure,
    interaction_structure,
    read_adjacency,
    rw1_structure,
    write_adjacency,
)
from .inference import (
    EmpiricalBayesFit,
    FitSettings,
    GaussianApprox,
    PosteriorSamples,
    fit_empirical_bayes,
    fit_model,
    forecast_horizon,
    gaussian_approximation,
    predictive_counts,
    run_mcmc,
    sample_constrained_gaussian,
)
from .model import (
    INCIDENCE,
    MORTALITY,
    HyperParams,
    LatentLayout,
    LatentState,
    ModelConfig,
    build_layout,
    joint_prior_precision,
    linear_predictor,
    log_prior,
)
from .panel import ObservationPanel, poisson_loglik
from .synthetic import SimulationTruth, grid_graph, simulate

__version__ = "0.1.0"
