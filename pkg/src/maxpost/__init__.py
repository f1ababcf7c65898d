"""Post-processing of forecasts for spatial maxima with max-stable models."""

from .condsim import ConditionalSampler, ConditioningSet, conditional_simulate
from .depfit import (
    BIVARIATE,
    UNIVARIATE,
    FitResult,
    ThetaEstimate,
    estimate_thetas,
    fit_dependence,
    fmadogram,
    jackknife_variance,
    theta_from_madogram,
    wls_objective,
)
from .errors import FitError, SamplerError, SchemaError
from .margins import (
    GevParams,
    GumbelPanel,
    StationGevFit,
    StationMargins,
    crps_gev,
    fit_gev_mle,
    from_gumbel,
    gev_cdf,
    gev_quantile,
    ks_test_gumbel,
    spatial_constancy_test,
    to_gumbel,
)
from .maxstable import (
    GaussianSpec,
    MaxStableSample,
    cov_from_variogram,
    extremal_coefficient,
    sample_gaussian,
    simulate_brown_resnick,
    simulate_brown_resnick_panel,
)
from .pipeline import PipelineConfig, fit_dependence_pipeline, fit_margins_pipeline
from .postproc import (
    EnsemblePanel,
    MaximaPanel,
    Normalization,
    ensemble_max_forecast,
    ensemble_normalization,
    postprocess,
    standardize,
)
from .variogram import (
    OBS,
    PRED,
    Anisotropy,
    CrossVariogram,
    PowerVariogram,
    aniso_norm,
    bound_excess,
    common_variogram,
    cross_variogram,
    matern_correlation,
    power_variogram,
    validate_cross_params,
)
from .verify import (
    ScoreReport,
    crps_empirical,
    cross_validate,
    energy_score,
    score_models,
    skill_score,
)

__version__ = "0.1.0"
