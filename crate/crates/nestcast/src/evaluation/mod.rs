//! Forecast verification and spectral diagnostics.

pub mod metrics;
pub mod spectral;

pub use metrics::{
    acc, csi, exceedance_counts, lat_weights, lat_weights_for, lat_weights_from, quantile, rmse,
    sedi, ContingencyCounts, LatWeights,
};
pub use spectral::{
    adjacency_from_edges, eigendecompose_sym, frequency_response, gated_spectral_operator,
    mat_apply, normalized_laplacian, random_regular_graph, spectral_error, verify_highpass,
    zonal_spectrum, HighpassFit, HighpassStatus,
};
