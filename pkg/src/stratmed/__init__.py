"""Stratum-specific mediation and total effects for semi-competing risks
survival data: EM estimation, effect curves, bootstrap inference, and a
simulation harness."""

from .effects import (
    EffectCurve,
    effect_curve,
    effect_value,
    marginal_effect_curves,
    marginal_effects,
    nde1,
    nie1,
    te2,
    te3,
)
from .em import EmConfig, e_step, fit, m_step_alpha, m_step_eta, m_step_hazards
from .errors import (
    DegenerateRiskSetError,
    DegenerateStratumError,
    InvalidInputError,
    NumericalDegeneracyError,
    NumericalError,
    OutOfSupportError,
    RankDeficiencyError,
    SolverFailureError,
    StratmedError,
    UnreliableInferenceError,
)
from .inference import (
    BootstrapResult,
    EffectPoint,
    SwapSensitivity,
    bootstrap,
    label_swap_sensitivity,
    wald_tests,
)
from .likelihood import (
    LikelihoodBreakdown,
    kaplan_meier,
    observed_loglik,
    population_average_survival,
)
from .model_core import (
    BaselineHazard,
    Dataset,
    FittedModel,
    ParameterSet,
    PosteriorMatrix,
    SubjectRecord,
    cumhaz,
    stratum_survival,
    stratum_weights,
)
from .simulate import (
    AnalyticHazard,
    GenerativeSpec,
    HiddenTruth,
    benchmark_spec,
    benchmark_truth,
    generate,
    sample_event_time,
    true_effect,
    true_effects,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
