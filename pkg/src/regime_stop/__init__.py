"""Optimal stopping for diffusions modulated by a continuous-time Markov chain."""

from .errors import (
    AmbiguousCase,
    ConfigError,
    DivergentEstimate,
    InternalError,
    MaxIterExceeded,
    NoCaseConverged,
    NonGenerator,
    NonMonotoneScheme,
    ParseError,
    PreconditionViolated,
    RegimeStopError,
    RootBracketingFailed,
    SingularMatrix,
    ValidationError,
)
from .extraction import (
    Case,
    Classification,
    ClosedFormSolution,
    ExponentSet,
    classify,
    evaluate_value,
    k_coefficients,
    lipschitz_bound,
    quartic_roots,
    single_regime_threshold,
    solve,
)
from .mc import MCEstimate, ThresholdPolicy, estimate_policy_value, policy_dominance_check, simulate_price_path
from .model import PAPER_EXAMPLE, ExtractionModel
from .regime import (
    ChainPath,
    GeneratorMatrix,
    GrowthEnvelope,
    check_hypothesis_h1,
    check_uniqueness_simple,
    expected_exp_drift_integral,
    simulate_chain,
    validate_generator,
    x_roots,
)
from .vi import (
    GridSolution,
    StoppingProblem,
    boundary_value_at_zero,
    discretize,
    extract_stopping_sets,
    extraction_problem,
    richardson_threshold,
    solve_vi,
)

__version__ = "0.1.0"
