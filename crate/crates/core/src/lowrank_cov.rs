//! Low-rank working covariance `Sigma = Psi Omega Psi^t + sigma^2 I` for one
//! residual component, with the closed-form Gaussian ML estimate, fast
//! Sherman-Morrison-Woodbury actions and the AIC rank scan.
//!
//! For a single realization the sample second-moment matrix `U = z z^t` has
//! rank one, which collapses the spectral ML recipe to scalar arithmetic:
//! with `G = Psi^t Psi`, `w = Psi^t z` and `c1 = w^t G^{-1} w`, the only
//! candidate factor eigenvalue is `c1` and the estimate is either the rank-one
//! `Omega = (c1 - sigma^2)/c1 * q q^t` with `q = G^{-1} w`, or zero.

use ndarray::{Array1, Array2, Axis};
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::tps_basis::{BasisError, TpsBasis};

/// Relative ridge added to a Gram matrix whose Cholesky fails outright.
const GRAM_RIDGE_REL: f64 = 1e-10;
/// Condition number bound on the Gram matrix, measured through its Cholesky
/// diagonal; beyond this the rank is treated as unusable.
const GRAM_COND_MAX: f64 = 1e12;
/// Noise-variance floor, relative to the mean squared residual. Keeps the
/// covariance invertible when the basis interpolates the residuals exactly.
const SIGMA_FLOOR_REL: f64 = 1e-8;
/// Relative cutoff for keeping an eigenpair of `Omega` in the factor `P`.
const OMEGA_EIGEN_REL_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CovError {
    #[error("basis gram matrix is singular or nearly singular")]
    SingularGram,
    #[error("covariance core is singular: noise variance {0:.3e} is not positive")]
    SingularCore(f64),
    #[error("residual length {z_len} does not match basis rows {rows}")]
    LengthMismatch { z_len: usize, rows: usize },
    #[error("omega is {k_omega} x {k_omega} but the basis has {k_psi} columns")]
    OmegaShape { k_omega: usize, k_psi: usize },
    #[error("rank search upper bound {k_max} is below the minimum rank 3")]
    RankOutOfRange { k_max: usize },
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("eigendecomposition failed: {0}")]
    Eigen(#[from] LinalgError),
}

/// Lower Cholesky of a Gram matrix, with one ridge retry and a condition
/// check on the resulting diagonal.
fn gram_chol(g: &Array2<f64>) -> Result<Array2<f64>, CovError> {
    let k = g.nrows();
    let l = match linalg::cholesky_lower(g) {
        Ok(l) => l,
        Err(_) => {
            let ridge = GRAM_RIDGE_REL * g.diag().sum() / k as f64;
            let mut p = g.clone();
            for i in 0..k {
                p[[i, i]] += ridge;
            }
            linalg::cholesky_lower(&p).map_err(|_| CovError::SingularGram)?
        }
    };
    let diag = l.diag();
    let dmax = diag.iter().cloned().fold(f64::MIN, f64::max);
    let dmin = diag.iter().cloned().fold(f64::MAX, f64::min);
    if dmin <= 0.0 || (dmax / dmin).powi(2) > GRAM_COND_MAX {
        return Err(CovError::SingularGram);
    }
    Ok(l)
}

/// Scan rule shared by the estimator and the rank search: given the single
/// candidate eigenvalue `c1` and `tr U = z^t z`, decide whether the factor is
/// kept and return `(sigma2_hat, c1_hat)`.
fn scan_rank_one(c1: f64, tr_u: f64, n: usize) -> (f64, f64) {
    let resid_var = ((tr_u - c1) / (n as f64 - 1.0)).max(0.0);
    if c1 > resid_var {
        (resid_var, (c1 - resid_var).max(0.0))
    } else {
        (tr_u / n as f64, 0.0)
    }
}

/// Closed-form Gaussian ML estimate of `(Omega, sigma^2)` from one residual
/// vector. `sigma^2` can legitimately come out zero when the basis spans the
/// residual; callers that need an invertible covariance apply a floor (see
/// [`LowRankCovariance::from_residuals`]).
pub fn ml_estimate(z: &Array1<f64>, psi: &Array2<f64>) -> Result<(Array2<f64>, f64), CovError> {
    let n = z.len();
    let k = psi.ncols();
    if psi.nrows() != n {
        return Err(CovError::LengthMismatch {
            z_len: n,
            rows: psi.nrows(),
        });
    }
    let g = psi.t().dot(psi);
    let l = gram_chol(&g)?;
    let w = psi.t().dot(z);
    let y = linalg::forward_sub(l.view(), w.view());
    let c1 = y.dot(&y);
    let tr_u = z.dot(z);
    let (sigma2, c1_hat) = scan_rank_one(c1, tr_u, n);
    let omega = if c1_hat > 0.0 && c1 > 0.0 {
        let q = linalg::backward_sub_t(l.view(), y.view());
        let qc = q.insert_axis(Axis(1));
        qc.dot(&qc.t()) * (c1_hat / c1)
    } else {
        Array2::zeros((k, k))
    };
    Ok((omega, sigma2))
}

/// One component's working covariance, stored through its low-rank factor
/// `P = Psi V_+ D_+^{1/2}` so that every action is `O(n r)` after setup.
#[derive(Debug, Clone)]
pub struct LowRankCovariance {
    omega: Array2<f64>,
    sigma2: f64,
    psi: Array2<f64>,
    p: Array2<f64>,
    /// Lower Cholesky of `sigma^2 I_r + P^t P`; empty when `r = 0`.
    core_chol: Array2<f64>,
    rank: usize,
}

impl LowRankCovariance {
    /// Builds the covariance from an explicit `(Omega, sigma^2)` pair.
    /// `sigma2` must be strictly positive; eigenpairs of `Omega` below a
    /// relative cutoff are dropped from the factor.
    pub fn new(omega: Array2<f64>, sigma2: f64, psi: Array2<f64>) -> Result<Self, CovError> {
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(CovError::SingularCore(sigma2));
        }
        let k = psi.ncols();
        if omega.nrows() != k || omega.ncols() != k {
            return Err(CovError::OmegaShape {
                k_omega: omega.nrows(),
                k_psi: k,
            });
        }
        let sym = (&omega + &omega.t()) / 2.0;
        let (d, v) = linalg::eigh_desc(&sym)?;
        let cutoff = OMEGA_EIGEN_REL_TOL * d[0].max(0.0);
        let rank = d.iter().take_while(|&&x| x > cutoff && x > 0.0).count();
        let mut p = psi.dot(&v.slice(ndarray::s![.., ..rank]));
        for (j, mut col) in p.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|x| x * d[j].sqrt());
        }
        let core_chol = if rank == 0 {
            Array2::zeros((0, 0))
        } else {
            let mut core = p.t().dot(&p);
            for i in 0..rank {
                core[[i, i]] += sigma2;
            }
            linalg::cholesky_lower(&core).map_err(|_| CovError::SingularCore(sigma2))?
        };
        Ok(Self {
            omega,
            sigma2,
            psi,
            p,
            core_chol,
            rank,
        })
    }

    /// ML estimate with the noise floor applied, ready for solves.
    pub fn from_residuals(z: &Array1<f64>, psi: Array2<f64>) -> Result<Self, CovError> {
        let (omega, sigma2) = ml_estimate(z, &psi)?;
        let floor = SIGMA_FLOOR_REL * z.dot(z) / z.len() as f64;
        Self::new(omega, sigma2.max(floor), psi)
    }

    pub fn n(&self) -> usize {
        self.psi.nrows()
    }

    pub fn k(&self) -> usize {
        self.psi.ncols()
    }

    /// Rank of the retained factor, `<= k`.
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn omega(&self) -> &Array2<f64> {
        &self.omega
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn psi(&self) -> &Array2<f64> {
        &self.psi
    }

    /// `Sigma v` without forming the `n x n` matrix.
    pub fn apply(&self, v: &Array1<f64>) -> Array1<f64> {
        let mut out = v * self.sigma2;
        if self.rank > 0 {
            out += &self.p.dot(&self.p.t().dot(v));
        }
        out
    }

    /// `Sigma^{-1} v` through the Woodbury identity:
    /// `v / sigma^2 - P (sigma^2 I + P^t P)^{-1} P^t v / sigma^2`.
    pub fn inverse_action(&self, v: &Array1<f64>) -> Array1<f64> {
        if self.rank == 0 {
            return v / self.sigma2;
        }
        let ptv = self.p.t().dot(v);
        let w = linalg::chol_solve(self.core_chol.view(), ptv.view());
        (v - &self.p.dot(&w)) / self.sigma2
    }

    /// Column-wise [`inverse_action`](Self::inverse_action).
    pub fn inverse_action_mat(&self, m: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(m.raw_dim());
        for (j, col) in m.columns().into_iter().enumerate() {
            out.column_mut(j).assign(&self.inverse_action(&col.to_owned()));
        }
        out
    }

    /// `log det Sigma = (n - r) log sigma^2 + log det(sigma^2 I_r + P^t P)`.
    pub fn log_det(&self) -> f64 {
        let base = (self.n() - self.rank) as f64 * self.sigma2.ln();
        let core: f64 = self.core_chol.diag().iter().map(|d| 2.0 * d.ln()).sum();
        base + core
    }

    /// Gaussian log-likelihood of a residual vector under this covariance.
    pub fn gaussian_loglik(&self, z: &Array1<f64>) -> f64 {
        let n = self.n() as f64;
        let quad = z.dot(&self.inverse_action(z));
        -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + self.log_det() + quad)
    }
}

/// Working covariance for the stacked residual vector `(z1, z2)`: block
/// diagonal because the two components are uncorrelated under the model.
#[derive(Debug, Clone)]
pub struct BlockCovariance {
    comp1: LowRankCovariance,
    comp2: LowRankCovariance,
}

impl BlockCovariance {
    pub fn new(comp1: LowRankCovariance, comp2: LowRankCovariance) -> Result<Self, CovError> {
        if comp1.n() != comp2.n() {
            return Err(CovError::LengthMismatch {
                z_len: comp1.n(),
                rows: comp2.n(),
            });
        }
        Ok(Self { comp1, comp2 })
    }

    pub fn n(&self) -> usize {
        self.comp1.n()
    }

    pub fn comp1(&self) -> &LowRankCovariance {
        &self.comp1
    }

    pub fn comp2(&self) -> &LowRankCovariance {
        &self.comp2
    }

    pub fn inverse_action(&self, v: &Array1<f64>) -> Array1<f64> {
        let n = self.n();
        let top = self.comp1.inverse_action(&v.slice(ndarray::s![..n]).to_owned());
        let bot = self.comp2.inverse_action(&v.slice(ndarray::s![n..]).to_owned());
        let mut out = Array1::zeros(2 * n);
        out.slice_mut(ndarray::s![..n]).assign(&top);
        out.slice_mut(ndarray::s![n..]).assign(&bot);
        out
    }

    pub fn inverse_action_mat(&self, m: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(m.raw_dim());
        for (j, col) in m.columns().into_iter().enumerate() {
            out.column_mut(j).assign(&self.inverse_action(&col.to_owned()));
        }
        out
    }

    pub fn log_det(&self) -> f64 {
        self.comp1.log_det() + self.comp2.log_det()
    }
}

/// Reusable state for scanning basis ranks under a fixed site layout.
///
/// The Cholesky factor of the full Gram matrix is computed once; because
/// leading principal submatrices factor into leading Cholesky blocks, every
/// smaller rank's whitened projection is a prefix of one substitution pass.
#[derive(Debug, Clone)]
pub struct RankSearch {
    chol_full: Array2<f64>,
    psi_full: Array2<f64>,
}

impl RankSearch {
    pub fn new(psi_full: Array2<f64>) -> Result<Self, CovError> {
        let g = psi_full.t().dot(&psi_full);
        let chol_full = gram_chol(&g)?;
        Ok(Self { chol_full, psi_full })
    }

    pub fn k_max(&self) -> usize {
        self.psi_full.ncols()
    }

    pub fn psi_full(&self) -> &Array2<f64> {
        &self.psi_full
    }

    /// Minimizes `AIC(K) = n log 2pi + log det Sigma_K + z^t Sigma_K^{-1} z
    /// + 2 (K(K+1)/2 + 1)` over `3 <= K <= k_max`, evaluating each candidate
    /// at its own ML estimate. The penalty counts the free parameters of a
    /// symmetric `Omega` plus the noise variance. With one residual vector
    /// the likelihood gain per added rank is bounded, so the quadratic
    /// penalty keeps the selection near the small end unless the basis
    /// captures strong structure. Ties resolve to the smaller rank. Returns
    /// the winning rank and its AIC.
    pub fn select(&self, z: &Array1<f64>) -> Result<(usize, f64), CovError> {
        let n = z.len();
        if self.psi_full.nrows() != n {
            return Err(CovError::LengthMismatch {
                z_len: n,
                rows: self.psi_full.nrows(),
            });
        }
        let w = self.psi_full.t().dot(z);
        let y = linalg::forward_sub(self.chol_full.view(), w.view());
        let tr_u = z.dot(z);
        let floor = SIGMA_FLOOR_REL * tr_u / n as f64;
        let mut c1 = y[0] * y[0] + y[1] * y[1] + y[2] * y[2];
        let mut best = (3usize, f64::INFINITY);
        for k in 3..=self.k_max() {
            if k > 3 {
                c1 += y[k - 1] * y[k - 1];
            }
            let (sigma2, c1_hat) = scan_rank_one(c1, tr_u, n);
            let s = sigma2.max(floor);
            let log_det = (n as f64 - 1.0) * s.ln() + (s + c1_hat).ln();
            let quad = (tr_u - c1) / s + c1 / (s + c1_hat);
            let aic = n as f64 * (2.0 * std::f64::consts::PI).ln()
                + log_det
                + quad
                + (k * (k + 1) + 2) as f64;
            if aic < best.1 {
                best = (k, aic);
            }
        }
        Ok(best)
    }
}

/// One-shot AIC rank selection against a basis. The upper bound is clamped
/// to the basis's usable rank; ranks below 3 are rejected.
pub fn aic_select(
    z: &Array1<f64>,
    basis: &TpsBasis,
    k_max: usize,
) -> Result<(usize, f64), CovError> {
    if k_max < 3 {
        return Err(CovError::RankOutOfRange { k_max });
    }
    let cap = k_max.min(basis.max_usable_rank());
    let psi_full = basis.psi_at_sites(cap)?;
    RankSearch::new(psi_full)?.select(z)
}
