"""Spatio-temporal model-based geostatistics for prevalence mapping."""

from .bayes import McmcControl, PosteriorDraws, PriorSpec, fit_bayes, posterior_summaries
from .diagnostics import (
    EnvelopeResult,
    GofResult,
    gof_simulation_test,
    permutation_independence_test,
    test_statistic_T,
)
from .exploratory import (
    ResidualSet,
    VariogramTable,
    empirical_variogram,
    fit_nonspatial_glmm,
    ls_variogram_fit,
    theoretical_variogram,
)
from .kernels import (
    CorrelationParams,
    TVVParams,
    bessel_k,
    covariance_matrix,
    fit_matern_to_mixture,
    gneiting,
    matern,
    simulate_gaussian_field,
    simulate_tvv_field,
    tvv_correlation,
)
from .mcml import (
    BootstrapSet,
    FittedModel,
    McmlControl,
    fit_mcml,
    mle_sampling_distribution,
    parametric_bootstrap,
    profile_deviance_xi,
)
from .prediction import (
    ParamUncertaintyMode,
    SurfaceBundle,
    compare_modes,
    conditional_simulate,
    district_average,
    exceedance_surface,
    quantile_surface,
)
from .surveys import (
    DesignMatrix,
    PredictionGrid,
    SurveyDataset,
    SurveyRecord,
    build_age_splines,
    build_design,
    grid_from_bbox,
    load_region_polygons,
    load_surveys,
    project_lonlat,
    save_surveys,
)

__version__ = "0.1.0"
