//! Spatial zero-inflated count modeling by generalized estimating equations.
//!
//! The model splits each count into a structural-zero probability
//! `phi(s) = logistic(v^t beta)` and a positive-part intensity
//! `lambda(s) = exp(u^t gamma)`, and estimates `theta = (beta, gamma)` from
//! two moment-based residual components per location. Spatial dependence is
//! absorbed by a working covariance that is low-rank in a thin-plate-spline
//! basis, with the basis rank chosen by AIC. Uncertainty comes from a
//! spatial block jackknife.
//!
//! Module map:
//! - [`zim_model`]: datasets, links, residuals and their derivatives.
//! - [`tps_basis`]: the ordered spline basis from a set of sites.
//! - [`lowrank_cov`]: covariance estimation, fast actions, rank selection.
//! - [`gee_fit`]: the Newton fitting loop.
//! - [`inference`]: k-means blocking and the block jackknife.
//! - [`simgen`]: the synthetic-data generator used by the replication
//!   harness and the statistical tests.
//! - [`linalg`]: small shared wrappers over the LAPACK backend.

pub mod gee_fit;
pub mod inference;
pub mod linalg;
pub mod lowrank_cov;
pub mod simgen;
pub mod tps_basis;
pub mod zim_model;

pub use gee_fit::{
    fit, fit_from, gee_score, initial_theta, newton_step, FitConfig, FitError, FitResult,
    IterationRecord, KSelection,
};
pub use inference::{
    block_jackknife, coverage_probability, jackknife_variance, kmeans_blocks, BlockAssignment,
    InferenceError, JackknifeResult,
};
pub use lowrank_cov::{
    aic_select, ml_estimate, BlockCovariance, CovError, LowRankCovariance, RankSearch,
};
pub use simgen::{
    exp_correlation_matrix, gaussian_copula_field, generate_dataset, sample_locations, SimError,
    SimScenario, TruthRecord, ZeroInflation,
};
pub use tps_basis::{radial_phi, BasisError, Location, TpsBasis};
pub use zim_model::{
    derivative_matrix, link_lambda, link_phi, residuals, DatasetError, ModelState, SpatialDataset,
    ThetaParams,
};
