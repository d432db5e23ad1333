//! Newton-Raphson solution of the estimating equation `U(theta) =
//! D^t Sigma^{-1} Z = 0`, alternating with working-covariance re-estimation.
//!
//! Each outer iteration recomputes the residuals at the current `theta`,
//! refits the low-rank covariance per component (re-selecting the basis rank
//! when AIC mode is active), and takes one safeguarded Newton step. The loop
//! stops when the total absolute coefficient change drops below `epsilon`.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::linalg;
use crate::lowrank_cov::{BlockCovariance, CovError, LowRankCovariance, RankSearch};
use crate::tps_basis::{BasisError, TpsBasis};
use crate::zim_model::{derivative_matrix, residuals, SpatialDataset, ThetaParams};

/// Jacobian condition bound; beyond this the Newton system is rejected.
const JACOBIAN_COND_MAX: f64 = 1e12;
/// Floor on the diagonal working variances used by the initializer.
const DIAG_VAR_FLOOR: f64 = 1e-10;
const MAX_STEP_HALVINGS: u32 = 10;
const INIT_MAX_ITERS: usize = 50;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("dataset needs both zero and positive counts to identify the model")]
    DegenerateData,
    #[error("estimating-equation jacobian is singular or nearly singular")]
    SingularJacobian,
    #[error("invalid fit configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Cov(#[from] CovError),
    #[error(transparent)]
    Basis(#[from] BasisError),
}

/// Basis-rank policy: re-select by AIC every outer iteration, or hold a
/// fixed pair `(K1, K2)` throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KSelection {
    Aic,
    Fixed(usize, usize),
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    /// Convergence threshold on `sum_i |delta beta_i| + sum_i |delta gamma_i|`.
    pub epsilon: f64,
    pub max_outer_iters: usize,
    pub k_selection: KSelection,
    /// Carried alongside the fit for downstream randomized stages; the fit
    /// itself is deterministic.
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.03,
            max_outer_iters: 100,
            k_selection: KSelection::Aic,
            seed: 0,
        }
    }
}

/// One outer iteration: the accepted iterate, the ranks used to build its
/// covariance, and the coefficient change that produced it.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub theta: ThetaParams,
    pub k: (usize, usize),
    pub theta_change: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta_hat: ThetaParams,
    pub k_hat: (usize, usize),
    pub outer_iters: usize,
    pub converged: bool,
    pub phi_hat: Array1<f64>,
    pub lambda_hat: Array1<f64>,
    pub trace: Vec<IterationRecord>,
    /// `max_l |U_l(theta_hat)|` under the final working covariance.
    pub final_score_norm: f64,
}

/// Working covariance seen by the Newton core: the full block structure, or
/// the diagonal independence approximation used for initialization.
enum WorkingCov<'a> {
    Block(&'a BlockCovariance),
    Diagonal(Array1<f64>),
}

impl WorkingCov<'_> {
    fn inverse_times_vec(&self, v: &Array1<f64>) -> Array1<f64> {
        match self {
            WorkingCov::Block(b) => b.inverse_action(v),
            WorkingCov::Diagonal(d) => v / d,
        }
    }

    fn inverse_times_mat(&self, m: &Array2<f64>) -> Array2<f64> {
        match self {
            WorkingCov::Block(b) => b.inverse_action_mat(m),
            WorkingCov::Diagonal(d) => {
                let mut out = m.clone();
                for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                    row.mapv_inplace(|x| x / d[i]);
                }
                out
            }
        }
    }
}

fn score_with(ds: &SpatialDataset, theta: &ThetaParams, wc: &WorkingCov) -> Array1<f64> {
    let state = residuals(ds, theta);
    let z = state.stacked_residuals();
    let d = derivative_matrix(ds, theta);
    d.t().dot(&wc.inverse_times_vec(&z))
}

/// The estimating function `U(theta) = D^t Sigma^{-1} Z`.
pub fn gee_score(ds: &SpatialDataset, theta: &ThetaParams, cov: &BlockCovariance) -> Array1<f64> {
    score_with(ds, theta, &WorkingCov::Block(cov))
}

fn theta_minus_scaled(theta: &ThetaParams, step: &Array1<f64>, scale: f64) -> ThetaParams {
    let flat = theta.flatten() - &(step * scale);
    ThetaParams::from_flat(flat.view(), theta.beta.len())
}

/// One Newton update with step-halving. Candidates at scales 1, 1/2, ...,
/// 1/1024 are screened in order: the first whose score norm does not grow is
/// taken; failing that, the first within a 10x growth cap; failing that, the
/// last finite candidate. A plain 10x cap is not enough here: accepting a
/// string of mildly norm-increasing full steps lets the iterate escape along
/// a flat ridge (structural-zero probabilities pushed to the boundary) until
/// the Jacobian degenerates.
fn newton_core(
    ds: &SpatialDataset,
    theta: &ThetaParams,
    wc: &WorkingCov,
) -> Result<ThetaParams, FitError> {
    let state = residuals(ds, theta);
    let z = state.stacked_residuals();
    let d = derivative_matrix(ds, theta);
    let u = d.t().dot(&wc.inverse_times_vec(&z));
    let si_d = wc.inverse_times_mat(&d);
    let mut j = d.t().dot(&si_d);
    j = (&j + &j.t()) / 2.0;

    let (eigs, _) = linalg::eigh_desc(&j).map_err(|_| FitError::SingularJacobian)?;
    let smallest = eigs[eigs.len() - 1];
    if smallest <= 0.0 || eigs[0] / smallest > JACOBIAN_COND_MAX {
        return Err(FitError::SingularJacobian);
    }
    let step = linalg::spd_solve(&j, u.view()).map_err(|_| FitError::SingularJacobian)?;

    let u_norm = u.dot(&u).sqrt();
    let mut within_cap = None;
    let mut last_finite = None;
    for h in 0..=MAX_STEP_HALVINGS {
        let cand = theta_minus_scaled(theta, &step, 0.5f64.powi(h as i32));
        if !cand.is_finite() {
            continue;
        }
        let u_new = score_with(ds, &cand, wc);
        let n_new = u_new.dot(&u_new).sqrt();
        if n_new.is_finite() {
            if n_new <= u_norm {
                return Ok(cand);
            }
            if n_new <= 10.0 * u_norm && within_cap.is_none() {
                within_cap = Some(cand.clone());
            }
        }
        last_finite = Some(cand);
    }
    Ok(within_cap
        .or(last_finite)
        .unwrap_or_else(|| theta.clone()))
}

/// Public single Newton update against a fixed block covariance.
pub fn newton_step(
    ds: &SpatialDataset,
    theta: &ThetaParams,
    cov: &BlockCovariance,
) -> Result<ThetaParams, FitError> {
    newton_core(ds, theta, &WorkingCov::Block(cov))
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Moment-based starting point: intercepts from the empirical zero fraction
/// and the mean positive count, remaining coefficients zero.
fn initial_guess(ds: &SpatialDataset) -> ThetaParams {
    let mut beta = Array1::zeros(ds.v_mask().len());
    let mut gamma = Array1::zeros(ds.u_mask().len());
    beta[0] = logit(ds.zero_fraction().max(0.01));
    gamma[0] = ds.mean_positive().unwrap_or(0.0).max(0.1).ln();
    ThetaParams::new(beta, gamma)
}

pub(crate) fn initial_theta_eps(
    ds: &SpatialDataset,
    epsilon: f64,
) -> Result<ThetaParams, FitError> {
    let zf = ds.zero_fraction();
    if zf == 0.0 || zf == 1.0 {
        return Err(FitError::DegenerateData);
    }
    let mut theta = initial_guess(ds);
    for _ in 0..INIT_MAX_ITERS {
        let state = residuals(ds, &theta);
        let n = ds.n();
        let mut v = Array1::zeros(2 * n);
        for i in 0..n {
            v[i] = state.var_z1[i].max(DIAG_VAR_FLOOR);
            v[n + i] = state.var_z2[i].max(DIAG_VAR_FLOOR);
        }
        // A singular step mid-iteration means the independence equations
        // drifted toward a boundary (a quasi-separated zero pattern). The
        // last iterate is still a usable start, so keep it rather than fail.
        let next = match newton_core(ds, &theta, &WorkingCov::Diagonal(v)) {
            Ok(next) => next,
            Err(FitError::SingularJacobian) => break,
            Err(e) => return Err(e),
        };
        let change = theta.abs_change(&next);
        theta = next;
        if change < epsilon {
            break;
        }
    }
    Ok(theta)
}

/// Independence-working-covariance Newton solve used to start the main loop.
/// Fails on degenerate data (all counts zero, or none).
pub fn initial_theta(ds: &SpatialDataset) -> Result<ThetaParams, FitError> {
    initial_theta_eps(ds, FitConfig::default().epsilon)
}

fn validate_config(cfg: &FitConfig, n: usize) -> Result<(), FitError> {
    if !(cfg.epsilon.is_finite() && cfg.epsilon > 0.0) {
        return Err(FitError::InvalidConfig(format!(
            "epsilon must be positive, got {}",
            cfg.epsilon
        )));
    }
    if cfg.max_outer_iters < 1 {
        return Err(FitError::InvalidConfig(
            "max_outer_iters must be at least 1".into(),
        ));
    }
    if let KSelection::Fixed(k1, k2) = cfg.k_selection {
        for k in [k1, k2] {
            if !(3..=n).contains(&k) {
                return Err(FitError::InvalidConfig(format!(
                    "fixed rank {k} outside [3, {n}]"
                )));
            }
        }
    }
    Ok(())
}

/// Upper bound on the searched rank: `min(ceil(10 sqrt n), n/2)`, further
/// clamped to what the basis numerically supports. The n/2 guard keeps
/// enough residual dimensions to estimate the noise variance; as K
/// approaches n the working model can absorb the entire residual vector
/// into the spike and the AIC scan degenerates toward interpolation.
fn rank_cap(n: usize, basis: &TpsBasis) -> usize {
    let soft = (10.0 * (n as f64).sqrt()).ceil() as usize;
    soft.min(n / 2).max(3).min(basis.max_usable_rank())
}

enum RankStrategy {
    Aic(RankSearch),
    Fixed {
        psi1: Array2<f64>,
        psi2: Array2<f64>,
    },
}

impl RankStrategy {
    fn covariances(
        &self,
        z1: &Array1<f64>,
        z2: &Array1<f64>,
    ) -> Result<(LowRankCovariance, LowRankCovariance, (usize, usize)), CovError> {
        match self {
            RankStrategy::Aic(search) => {
                let (k1, _) = search.select(z1)?;
                let (k2, _) = search.select(z2)?;
                let psi1 = search.psi_full().slice(ndarray::s![.., ..k1]).to_owned();
                let psi2 = search.psi_full().slice(ndarray::s![.., ..k2]).to_owned();
                let c1 = LowRankCovariance::from_residuals(z1, psi1)?;
                let c2 = LowRankCovariance::from_residuals(z2, psi2)?;
                Ok((c1, c2, (k1, k2)))
            }
            RankStrategy::Fixed { psi1, psi2 } => {
                let c1 = LowRankCovariance::from_residuals(z1, psi1.clone())?;
                let c2 = LowRankCovariance::from_residuals(z2, psi2.clone())?;
                Ok((c1, c2, (psi1.ncols(), psi2.ncols())))
            }
        }
    }
}

/// Full fitting loop starting from the independence initializer.
pub fn fit(ds: &SpatialDataset, basis: &TpsBasis, cfg: &FitConfig) -> Result<FitResult, FitError> {
    validate_config(cfg, ds.n())?;
    let theta0 = initial_theta_eps(ds, cfg.epsilon)?;
    fit_from(ds, basis, cfg, theta0)
}

/// Fitting loop from an explicit start, used for jackknife warm starts.
/// Non-convergence within `max_outer_iters` is soft: the best iterate comes
/// back with `converged = false`.
pub fn fit_from(
    ds: &SpatialDataset,
    basis: &TpsBasis,
    cfg: &FitConfig,
    theta0: ThetaParams,
) -> Result<FitResult, FitError> {
    validate_config(cfg, ds.n())?;
    let strategy = match cfg.k_selection {
        KSelection::Aic => {
            let psi_full = basis.psi_at_sites(rank_cap(ds.n(), basis))?;
            RankStrategy::Aic(RankSearch::new(psi_full)?)
        }
        KSelection::Fixed(k1, k2) => RankStrategy::Fixed {
            psi1: basis.psi_at_sites(k1)?,
            psi2: basis.psi_at_sites(k2)?,
        },
    };

    let mut theta = theta0;
    let mut trace: Vec<IterationRecord> = Vec::new();
    let mut converged = false;
    let mut last_cov = None;
    let mut k_hat = (0, 0);
    for _ in 0..cfg.max_outer_iters {
        let state = residuals(ds, &theta);
        let (c1, c2, ks) = strategy.covariances(&state.z1, &state.z2)?;
        let block = BlockCovariance::new(c1, c2)?;
        let next = newton_core(ds, &theta, &WorkingCov::Block(&block))?;
        let change = theta.abs_change(&next);
        theta = next;
        k_hat = ks;
        trace.push(IterationRecord {
            theta: theta.clone(),
            k: ks,
            theta_change: change,
        });
        last_cov = Some(block);
        if change < cfg.epsilon {
            converged = true;
            break;
        }
    }

    let final_state = residuals(ds, &theta);
    let final_score_norm = match &last_cov {
        Some(block) => gee_score(ds, &theta, block)
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs())),
        None => f64::NAN,
    };
    Ok(FitResult {
        theta_hat: theta,
        k_hat,
        outer_iters: trace.len(),
        converged,
        phi_hat: final_state.phi,
        lambda_hat: final_state.lambda,
        trace,
        final_score_norm,
    })
}
