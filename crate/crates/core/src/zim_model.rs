//! Mean structures, latent residuals and their derivatives for the flexible
//! zero-inflated spatial count model.
//!
//! The model carries two location-dependent quantities: the occurrence
//! probability `phi(s)` of a structural zero (logit-linear in a covariate
//! subset `v(s)`) and the prevalence intensity `lambda(s)` of the count
//! component (log-linear in a subset `u(s)`). From both we form the latent
//! residuals `Z1` (zero occurrence) and `Z2` (positive-part deviation) whose
//! first two moments drive the GEE fit.

use ndarray::{Array1, Array2, ArrayView1};
use thiserror::Error;

use crate::tps_basis::Location;

/// Linear predictors are clamped to this magnitude before exponentiation.
pub const LINPRED_CLAMP: f64 = 30.0;

/// Below this value of `lambda` the zero-truncation ratios are evaluated by
/// series expansion instead of direct division.
const SMALL_LAMBDA: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset is empty")]
    Empty,
    #[error("locations ({locations}), responses ({responses}) and design rows ({rows}) disagree")]
    LengthMismatch {
        locations: usize,
        responses: usize,
        rows: usize,
    },
    #[error("design matrix column 0 must be an all-ones intercept (row {0} differs)")]
    MissingIntercept(usize),
    #[error("non-finite covariate at row {row}, column {col}")]
    NonFiniteCovariate { row: usize, col: usize },
    #[error("covariate mask index {index} out of range for {cols} columns")]
    MaskOutOfRange { index: usize, cols: usize },
    #[error("covariate mask must include the intercept column 0")]
    MaskMissingIntercept,
    #[error("covariate mask contains duplicate index {0}")]
    DuplicateMaskIndex(usize),
}

/// Regression coefficients for the two model components: `beta` for the
/// zero-occurrence model and `gamma` for the intensity model.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaParams {
    pub beta: Array1<f64>,
    pub gamma: Array1<f64>,
}

impl ThetaParams {
    pub fn new(beta: Array1<f64>, gamma: Array1<f64>) -> Self {
        Self { beta, gamma }
    }

    /// Total number of coefficients.
    pub fn dim(&self) -> usize {
        self.beta.len() + self.gamma.len()
    }

    /// Stacks `(beta, gamma)` into one vector, beta first.
    pub fn flatten(&self) -> Array1<f64> {
        let mut out = Array1::zeros(self.dim());
        out.slice_mut(ndarray::s![..self.beta.len()])
            .assign(&self.beta);
        out.slice_mut(ndarray::s![self.beta.len()..])
            .assign(&self.gamma);
        out
    }

    /// Inverse of [`flatten`](Self::flatten) given the beta length.
    pub fn from_flat(flat: ArrayView1<f64>, beta_len: usize) -> Self {
        Self {
            beta: flat.slice(ndarray::s![..beta_len]).to_owned(),
            gamma: flat.slice(ndarray::s![beta_len..]).to_owned(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.beta.iter().chain(self.gamma.iter()).all(|v| v.is_finite())
    }

    /// Sum of absolute coefficient changes against `other`; the outer-loop
    /// convergence statistic.
    pub fn abs_change(&self, other: &ThetaParams) -> f64 {
        self.beta
            .iter()
            .zip(other.beta.iter())
            .chain(self.gamma.iter().zip(other.gamma.iter()))
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

/// Observed counts, locations and covariates, together with the column
/// subsets used by the two model components.
///
/// The design matrix `x` is `n x (p+1)` with a leading all-ones intercept
/// column. `v_mask` and `u_mask` select the columns entering the
/// zero-occurrence and intensity linear predictors; both must contain the
/// intercept column.
#[derive(Debug, Clone)]
pub struct SpatialDataset {
    locations: Vec<Location>,
    y: Vec<u64>,
    x: Array2<f64>,
    v_mask: Vec<usize>,
    u_mask: Vec<usize>,
    // Masked sub-designs, gathered once at construction.
    v_mat: Array2<f64>,
    u_mat: Array2<f64>,
}

impl SpatialDataset {
    pub fn new(
        locations: Vec<Location>,
        y: Vec<u64>,
        x: Array2<f64>,
        v_mask: Vec<usize>,
        u_mask: Vec<usize>,
    ) -> Result<Self, DatasetError> {
        let n = locations.len();
        if n == 0 {
            return Err(DatasetError::Empty);
        }
        if y.len() != n || x.nrows() != n {
            return Err(DatasetError::LengthMismatch {
                locations: n,
                responses: y.len(),
                rows: x.nrows(),
            });
        }
        for (i, row) in x.rows().into_iter().enumerate() {
            if row[0] != 1.0 {
                return Err(DatasetError::MissingIntercept(i));
            }
            for (j, v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(DatasetError::NonFiniteCovariate { row: i, col: j });
                }
            }
        }
        let v_mask = normalize_mask(v_mask, x.ncols())?;
        let u_mask = normalize_mask(u_mask, x.ncols())?;
        let v_mat = gather_columns(&x, &v_mask);
        let u_mat = gather_columns(&x, &u_mask);
        Ok(Self {
            locations,
            y,
            x,
            v_mask,
            u_mask,
            v_mat,
            u_mat,
        })
    }

    /// Convenience constructor using every design column for both components.
    pub fn with_all_covariates(
        locations: Vec<Location>,
        y: Vec<u64>,
        x: Array2<f64>,
    ) -> Result<Self, DatasetError> {
        let all: Vec<usize> = (0..x.ncols()).collect();
        Self::new(locations, y, x, all.clone(), all)
    }

    pub fn n(&self) -> usize {
        self.locations.len()
    }

    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    pub fn y(&self) -> &[u64] {
        &self.y
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn v_mask(&self) -> &[usize] {
        &self.v_mask
    }

    pub fn u_mask(&self) -> &[usize] {
        &self.u_mask
    }

    /// Masked design for the zero-occurrence component, `n x (q1+1)`.
    pub fn v_mat(&self) -> &Array2<f64> {
        &self.v_mat
    }

    /// Masked design for the intensity component, `n x (q2+1)`.
    pub fn u_mat(&self) -> &Array2<f64> {
        &self.u_mat
    }

    /// Coefficient dimension of the stacked parameter vector.
    pub fn theta_dim(&self) -> usize {
        self.v_mask.len() + self.u_mask.len()
    }

    /// Fraction of zero responses.
    pub fn zero_fraction(&self) -> f64 {
        self.y.iter().filter(|&&v| v == 0).count() as f64 / self.n() as f64
    }

    /// Mean of the strictly positive responses, `None` if there are none.
    pub fn mean_positive(&self) -> Option<f64> {
        let (sum, cnt) = self
            .y
            .iter()
            .filter(|&&v| v > 0)
            .fold((0.0, 0usize), |(s, c), &v| (s + v as f64, c + 1));
        (cnt > 0).then(|| sum / cnt as f64)
    }

    /// Row subset of the dataset keeping the given indices (jackknife refits).
    pub fn subset(&self, keep: &[usize]) -> SpatialDataset {
        let locations = keep.iter().map(|&i| self.locations[i]).collect();
        let y = keep.iter().map(|&i| self.y[i]).collect();
        let x = gather_rows(&self.x, keep);
        SpatialDataset {
            locations,
            y,
            x,
            v_mask: self.v_mask.clone(),
            u_mask: self.u_mask.clone(),
            v_mat: gather_rows(&self.v_mat, keep),
            u_mat: gather_rows(&self.u_mat, keep),
        }
    }
}

fn normalize_mask(mut mask: Vec<usize>, cols: usize) -> Result<Vec<usize>, DatasetError> {
    mask.sort_unstable();
    for w in mask.windows(2) {
        if w[0] == w[1] {
            return Err(DatasetError::DuplicateMaskIndex(w[0]));
        }
    }
    if mask.first() != Some(&0) {
        return Err(DatasetError::MaskMissingIntercept);
    }
    if let Some(&worst) = mask.iter().find(|&&i| i >= cols) {
        return Err(DatasetError::MaskOutOfRange {
            index: worst,
            cols,
        });
    }
    Ok(mask)
}

fn gather_columns(x: &Array2<f64>, mask: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((x.nrows(), mask.len()));
    for (k, &j) in mask.iter().enumerate() {
        out.column_mut(k).assign(&x.column(j));
    }
    out
}

fn gather_rows(x: &Array2<f64>, keep: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((keep.len(), x.ncols()));
    for (r, &i) in keep.iter().enumerate() {
        out.row_mut(r).assign(&x.row(i));
    }
    out
}

/// Per-location model quantities at a fixed parameter value.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub phi: Array1<f64>,
    pub lambda: Array1<f64>,
    pub z1: Array1<f64>,
    pub z2: Array1<f64>,
    pub var_z1: Array1<f64>,
    pub var_z2: Array1<f64>,
}

impl ModelState {
    /// Stacks `(z1, z2)` into a single `2n` residual vector.
    pub fn stacked_residuals(&self) -> Array1<f64> {
        let n = self.z1.len();
        let mut z = Array1::zeros(2 * n);
        z.slice_mut(ndarray::s![..n]).assign(&self.z1);
        z.slice_mut(ndarray::s![n..]).assign(&self.z2);
        z
    }
}

/// Occurrence probability `phi = logistic(v' beta)` with the linear
/// predictor clamped to `[-30, 30]`.
pub fn link_phi(v_row: ArrayView1<f64>, beta: ArrayView1<f64>) -> f64 {
    let lp = v_row.dot(&beta).clamp(-LINPRED_CLAMP, LINPRED_CLAMP);
    1.0 / (1.0 + (-lp).exp())
}

/// Intensity `lambda = exp(u' gamma)` with the linear predictor clamped to
/// `[-30, 30]`.
pub fn link_lambda(u_row: ArrayView1<f64>, gamma: ArrayView1<f64>) -> f64 {
    u_row.dot(&gamma).clamp(-LINPRED_CLAMP, LINPRED_CLAMP).exp()
}

/// Zero-truncated Poisson mean ratio `lambda / (1 - e^{-lambda})`.
///
/// For small `lambda` the direct quotient is 0/0; a three-term series
/// `1 + lambda/2 + lambda^2/12` takes over below [`SMALL_LAMBDA`].
pub fn zt_mean_ratio(lambda: f64) -> f64 {
    if lambda < SMALL_LAMBDA {
        1.0 + lambda / 2.0 + lambda * lambda / 12.0
    } else {
        lambda / one_minus_exp_neg(lambda)
    }
}

/// The ratio `(1 - (1+lambda) e^{-lambda}) / (1 - e^{-lambda})^2` from the
/// intensity derivative of `Z2`; series `1/2 + lambda/6` for small `lambda`.
fn truncation_deriv_ratio(lambda: f64) -> f64 {
    if lambda < SMALL_LAMBDA {
        0.5 + lambda / 6.0
    } else {
        let em1 = one_minus_exp_neg(lambda);
        (1.0 - (1.0 + lambda) * (-lambda).exp()) / (em1 * em1)
    }
}

/// `1 - e^{-lambda}` computed without cancellation for small `lambda`.
fn one_minus_exp_neg(lambda: f64) -> f64 {
    -(-lambda).exp_m1()
}

/// Variance bracket of `Z2`: `(lambda+lambda^2)/(1-e^{-lambda}) - t^2` with
/// `t` the zero-truncated mean, rewritten as `t (1 + lambda - t)`.
fn var_z2_bracket(lambda: f64) -> f64 {
    let t = zt_mean_ratio(lambda);
    if lambda < SMALL_LAMBDA {
        // 1 + lambda - t cancels catastrophically here; use its expansion.
        t * (lambda / 2.0 - lambda * lambda / 12.0)
    } else {
        t * (1.0 + lambda - t)
    }
}

/// Evaluates `phi`, `lambda`, the latent residuals `Z1`/`Z2` and their
/// variances at `theta` over the whole dataset.
pub fn residuals(ds: &SpatialDataset, theta: &ThetaParams) -> ModelState {
    let n = ds.n();
    let mut phi = Array1::zeros(n);
    let mut lambda = Array1::zeros(n);
    let mut z1 = Array1::zeros(n);
    let mut z2 = Array1::zeros(n);
    let mut var_z1 = Array1::zeros(n);
    let mut var_z2 = Array1::zeros(n);

    for i in 0..n {
        let p = link_phi(ds.v_mat.row(i), theta.beta.view());
        let l = link_lambda(ds.u_mat.row(i), theta.gamma.view());
        let exp_neg = (-l).exp();
        let em1 = one_minus_exp_neg(l);
        let y = ds.y[i];

        let zero_mean = p + (1.0 - p) * exp_neg;
        z1[i] = if y == 0 { 1.0 - zero_mean } else { -zero_mean };
        z2[i] = if y > 0 {
            y as f64 - zt_mean_ratio(l)
        } else {
            0.0
        };
        var_z1[i] = zero_mean * (1.0 - p) * em1;
        var_z2[i] = (1.0 - p) * em1 * var_z2_bracket(l);

        phi[i] = p;
        lambda[i] = l;
    }

    ModelState {
        phi,
        lambda,
        z1,
        z2,
        var_z1,
        var_z2,
    }
}

/// Analytic derivative matrix `D = d(Z1, Z2) / d(beta, gamma)`.
///
/// Rows are ordered `(Z1 at s_1..s_n, Z2 at s_1..s_n)`; columns are the beta
/// entries followed by the gamma entries. The `Z2`-by-`beta` block is
/// identically zero.
pub fn derivative_matrix(ds: &SpatialDataset, theta: &ThetaParams) -> Array2<f64> {
    let n = ds.n();
    let nb = theta.beta.len();
    let ng = theta.gamma.len();
    let mut d = Array2::zeros((2 * n, nb + ng));

    for i in 0..n {
        let p = link_phi(ds.v_mat.row(i), theta.beta.view());
        let l = link_lambda(ds.u_mat.row(i), theta.gamma.view());
        let exp_neg = (-l).exp();
        let em1 = one_minus_exp_neg(l);

        let dz1_dbeta = -em1 * p * (1.0 - p);
        for (c, v) in ds.v_mat.row(i).iter().enumerate() {
            d[[i, c]] = v * dz1_dbeta;
        }

        let dz1_dgamma = (1.0 - p) * l * exp_neg;
        let dz2_dgamma = if ds.y[i] > 0 {
            -l * truncation_deriv_ratio(l)
        } else {
            0.0
        };
        for (c, u) in ds.u_mat.row(i).iter().enumerate() {
            d[[i, nb + c]] = u * dz1_dgamma;
            d[[n + i, nb + c]] = u * dz2_dgamma;
        }
        // d[[n + i, 0..nb]] stays zero: dZ2/dbeta = 0.
    }
    d
}
