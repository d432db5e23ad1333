//! Synthetic zero-inflated spatial count data.
//!
//! The generator draws sites from a fine regular grid, builds two latent
//! Gaussian fields with exponential correlation (one for the structural-zero
//! indicator, one for the counts), and pushes them through quantile maps:
//! the indicator fires where the first field's normal CDF falls below the
//! true mixture probability, and counts come from the Poisson inverse CDF
//! applied to the second field's normal CDF.

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::linalg;
use crate::tps_basis::Location;
use crate::zim_model::{link_lambda, link_phi, DatasetError, SpatialDataset, ThetaParams};

/// Domain diameter of the unit square; correlation ranges are `c` times this.
pub const H_MAX: f64 = std::f64::consts::SQRT_2;
/// The binary field's range multiplier is fixed; the scenario's `c` applies
/// only to the count field.
const BINARY_FIELD_C: f64 = 0.3;
const GRID_SIDE: usize = 10_000;
const CHOL_JITTER: f64 = 1e-10;

/// RNG stream layout within one scenario seed.
const STREAM_LOCATIONS: u64 = 0;
const STREAM_COVARIATES: u64 = 1;
const STREAM_BINARY_FIELD: u64 = 2;
const STREAM_COUNT_FIELD: u64 = 3;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("correlation matrix could not be factorized, even with jitter")]
    FactorizationFailure,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Target zero-inflation level; selects the matching true coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZeroInflation {
    P40,
    P70,
}

impl ZeroInflation {
    pub fn beta_true(self) -> Array1<f64> {
        match self {
            ZeroInflation::P40 => ndarray::array![-0.7, -0.6, -0.6, -0.6, -0.5, -0.5],
            ZeroInflation::P70 => ndarray::array![0.5, 0.6, 0.5, 0.5, 0.5, -0.5],
        }
    }

    pub fn gamma_true(self) -> Array1<f64> {
        match self {
            ZeroInflation::P40 => ndarray::array![0.4, 0.3, 0.3, 0.3, -0.3, 0.6],
            ZeroInflation::P70 => ndarray::array![0.3, -0.3, 0.5, -0.5, -0.6, 0.6],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimScenario {
    pub n: usize,
    pub zero_inflation: ZeroInflation,
    /// Range multiplier for the count field: `delta_2 = c * H_MAX`.
    pub correlation_c: f64,
    pub sill: f64,
    pub nugget: f64,
    pub beta_true: Array1<f64>,
    pub gamma_true: Array1<f64>,
    pub seed: u64,
}

impl SimScenario {
    /// Reference configuration: sill 1, nugget 2, true coefficients from the
    /// zero-inflation level.
    pub fn preset(n: usize, zero_inflation: ZeroInflation, correlation_c: f64, seed: u64) -> Self {
        Self {
            n,
            zero_inflation,
            correlation_c,
            sill: 1.0,
            nugget: 2.0,
            beta_true: zero_inflation.beta_true(),
            gamma_true: zero_inflation.gamma_true(),
            seed,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.n < 20 {
            return Err(SimError::InvalidScenario(format!(
                "n must be at least 20, got {}",
                self.n
            )));
        }
        if !(self.correlation_c > 0.0) {
            return Err(SimError::InvalidScenario(format!(
                "correlation multiplier must be positive, got {}",
                self.correlation_c
            )));
        }
        if !(self.sill > 0.0 && self.nugget > 0.0) {
            return Err(SimError::InvalidScenario(format!(
                "sill and nugget must be positive, got {} and {}",
                self.sill, self.nugget
            )));
        }
        if self.beta_true.len() != 6 || self.gamma_true.len() != 6 {
            return Err(SimError::InvalidScenario(format!(
                "true coefficient vectors must have 6 entries (intercept + 5 covariates), \
                 got {} and {}",
                self.beta_true.len(),
                self.gamma_true.len()
            )));
        }
        Ok(())
    }
}

/// The true surfaces and coefficients behind one generated dataset.
#[derive(Debug, Clone)]
pub struct TruthRecord {
    pub phi: Array1<f64>,
    pub lambda: Array1<f64>,
    pub theta_star: ThetaParams,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `n` distinct sites drawn uniformly without replacement from the regular
/// `10^4 x 10^4` grid on the unit square. `n` may not exceed the grid size.
pub fn sample_locations(n: usize, seed: u64) -> Vec<Location> {
    assert!(n <= GRID_SIDE * GRID_SIDE, "cannot draw {n} distinct grid points");
    let mut rng = stream_rng(seed, STREAM_LOCATIONS);
    let denom = (GRID_SIDE - 1) as f64;
    rand::seq::index::sample(&mut rng, GRID_SIDE * GRID_SIDE, n)
        .into_iter()
        .map(|idx| {
            let row = idx / GRID_SIDE;
            let col = idx % GRID_SIDE;
            Location::new(row as f64 / denom, col as f64 / denom)
        })
        .collect()
}

/// Correlation matrix of the exponential model: unit diagonal, off-diagonal
/// `sill/(sill+nugget) * exp(-h/delta)`.
pub fn exp_correlation_matrix(
    locations: &[Location],
    sill: f64,
    nugget: f64,
    delta: f64,
) -> Array2<f64> {
    let n = locations.len();
    let ratio = sill / (sill + nugget);
    let mut corr = Array2::eye(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = ratio * (-locations[i].dist(&locations[j]) / delta).exp();
            corr[[i, j]] = v;
            corr[[j, i]] = v;
        }
    }
    corr
}

fn copula_draw(corr: &Array2<f64>, rng: &mut ChaCha12Rng) -> Result<Array1<f64>, SimError> {
    let n = corr.nrows();
    let l = match linalg::cholesky_lower(corr) {
        Ok(l) => l,
        Err(_) => {
            let mut jittered = corr.clone();
            for i in 0..n {
                jittered[[i, i]] += CHOL_JITTER;
            }
            linalg::cholesky_lower(&jittered).map_err(|_| SimError::FactorizationFailure)?
        }
    };
    let e = Array1::from_iter((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    Ok(l.dot(&e))
}

/// One draw of a zero-mean unit-variance Gaussian vector with the given
/// correlation, via Cholesky factorization (jittered once if needed).
pub fn gaussian_copula_field(corr: &Array2<f64>, seed: u64) -> Result<Array1<f64>, SimError> {
    copula_draw(corr, &mut ChaCha12Rng::seed_from_u64(seed))
}

/// Poisson quantile function `min {k : F(k) >= u}` by cumulative summation,
/// capped at `lambda + 20 sqrt(lambda)`; the tail mass beyond the cap is
/// below 1e-16 at the intensities the truth models produce.
pub(crate) fn poisson_inv_cdf(lambda: f64, u: f64) -> u64 {
    let cap = (lambda + 20.0 * lambda.sqrt()).ceil() as u64;
    let mut k = 0u64;
    let mut pmf = (-lambda).exp();
    let mut cdf = pmf;
    while u > cdf && k < cap {
        k += 1;
        pmf *= lambda / k as f64;
        cdf += pmf;
    }
    k
}

/// Full generation pipeline for one scenario.
pub fn generate_dataset(sc: &SimScenario) -> Result<(SpatialDataset, TruthRecord), SimError> {
    sc.validate()?;
    let n = sc.n;
    let locations = sample_locations(n, sc.seed);

    let mut cov_rng = stream_rng(sc.seed, STREAM_COVARIATES);
    let mut x = Array2::zeros((n, 6));
    for i in 0..n {
        x[[i, 0]] = 1.0;
        for j in 1..=3 {
            x[[i, j]] = cov_rng.sample::<f64, _>(StandardNormal);
        }
        for j in 4..=5 {
            x[[i, j]] = if cov_rng.random::<bool>() { 1.0 } else { 0.0 };
        }
    }

    let phi = x.map_axis(ndarray::Axis(1), |row| link_phi(row, sc.beta_true.view()));
    let lambda = x.map_axis(ndarray::Axis(1), |row| link_lambda(row, sc.gamma_true.view()));

    let corr_w = exp_correlation_matrix(&locations, sc.sill, sc.nugget, BINARY_FIELD_C * H_MAX);
    let w = copula_draw(&corr_w, &mut stream_rng(sc.seed, STREAM_BINARY_FIELD))?;
    let corr_v = exp_correlation_matrix(&locations, sc.sill, sc.nugget, sc.correlation_c * H_MAX);
    let v = copula_draw(&corr_v, &mut stream_rng(sc.seed, STREAM_COUNT_FIELD))?;

    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let y: Vec<u64> = (0..n)
        .map(|i| {
            if std_normal.cdf(w[i]) <= phi[i] {
                0
            } else {
                poisson_inv_cdf(lambda[i], std_normal.cdf(v[i]))
            }
        })
        .collect();

    let ds = SpatialDataset::with_all_covariates(locations, y, x)?;
    let truth = TruthRecord {
        phi,
        lambda,
        theta_star: ThetaParams::new(sc.beta_true.clone(), sc.gamma_true.clone()),
    };
    Ok((ds, truth))
}
