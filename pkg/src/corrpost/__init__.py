"""MAP post-processing of differentially private count streams under Markov temporal correlations."""

from .core_model import (
    CorrPostError,
    CountStream,
    DimensionMismatch,
    InstanceTooLarge,
    LocationDistribution,
    NegativeEntry,
    PriorPolicy,
    PrivacyMode,
    PrivacyParams,
    RowNotStochastic,
    ShapeMismatch,
    StreamKind,
    TransitionMatrix,
    ValidationError,
    validate_transition_matrix,
)
from .correlation import prior_distribution, propagate, propagate_all, propagate_matrix, smooth_correlations
from .mechanism import laplace_scale, release_stream, sample_laplace
from .metrics import mse, plausibility_violations, stepwise_plausibility
from .posterior import LogFactorialMode, ObjectiveSpec, fidelity_term, log_factorial, objective, prior_term, subgradient
from .solver import (
    RoundMode,
    SolverConfig,
    SolverMethod,
    SolveReport,
    brute_force_oracle,
    project_simplex,
    solve_baseline_mle,
    solve_map,
)
from .synth import count_query, generate_trajectories

__version__ = "0.1.0"
