"""Central-node inference from server summaries."""
from .em import EMResult, fitted_basis, run_em
from .particles import (
    ImportanceResult,
    Particle,
    SIRState,
    SIRStep,
    effective_sample_size,
    importance_sample,
    normalize_log_weights,
    prediction_map,
    run_sir,
    sir_step,
    systematic_resample,
    weighted_interval,
    weighted_quantile,
)
from .sources import LocalSource, SummarySource, spatial_summaries
from .spatial import (
    PredictionResult,
    a_total,
    augmented_prior,
    combine,
    em_step,
    neg2_loglik,
    predict,
    predict_with_overlap,
)
from .temporal import (
    FilterTrajectory,
    st_batch_smooth,
    st_filter,
    st_filter_loglik,
    st_filter_step,
    st_forecast,
    st_smooth,
)
