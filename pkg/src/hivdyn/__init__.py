"""Mechanism-based viral-dynamics modeling with Bayesian mixed effects.

Fits a rescaled target-cell-limited infection model with time-varying drug
efficacy (adherence x resistance x covariates) to longitudinal log10
viral-load data via a three-level Metropolis-within-Gibbs sampler, compares
adherence summary metrics by DIC, and scores parameter recovery in seeded
simulation studies.
"""

from .adherence import (
    METRIC_NAMES,
    METRICS,
    MODEL_LABELS,
    MemsLog,
    MetricSpec,
    VisitSchedule,
    adherence_rate,
    build_profile,
    window_for_visit,
)
from .efficacy import (
    AdherenceProfile,
    CovariatePair,
    EfficacyInputs,
    Ic50Trajectory,
    eval_adherence,
    eval_ic50,
    gamma,
    gamma_control,
    standardize_covariates,
)
from .errors import (
    ChainAbortError,
    ConfigError,
    DegenerateCovariateError,
    DegenerateIc50Error,
    DomainError,
    HivdynError,
    IntegrationError,
    NumericalInstabilityError,
    NumericError,
    ProfileRangeError,
    ReferentialIntegrityError,
    SchemaError,
    StudyError,
    ValidationError,
)
from .io import (
    PatientRecord,
    RunConfig,
    StudyBundle,
    build_observation_set,
    default_config,
    load_bundle,
    parse_config,
)
from .model_select import DicSummary, deviance, dic_from_chain, rank_models
from .ode import (
    IntegratorConfig,
    ScaledState,
    SubjectParams,
    UnscaledParams,
    integrate_scaled,
    integrate_unscaled,
    observed_log10_vl,
    steady_state_init,
)
from .sampler import (
    ChainOutput,
    Hyperpriors,
    McmcConfig,
    ObservationSet,
    PopulationState,
    SubjectData,
    gibbs_big_sigma,
    gibbs_mu,
    gibbs_sigma,
    individual_mean,
    log_likelihood_subject,
    mh_update_subject,
    run_chain,
)
from .simstudy import (
    RecoveryReport,
    SyntheticSource,
    TrialDesign,
    generate_trial,
    run_replications,
)

__version__ = "0.1.0"
