//! Thin-plate spline radial functions and the ordered multi-resolution basis.
//!
//! From `n` planar sites we assemble the affine design `Delta` (columns
//! `1, s1, s2`) and the radial kernel matrix `Phi`, project out the affine
//! part with `Q = I - Delta (Delta^t Delta)^{-1} Delta^t`, and
//! eigendecompose `Q Phi Q`. The ordered basis consists of the three affine
//! functions followed by eigenfunctions in decreasing eigenvalue order; at
//! the data sites those trailing columns are exactly the eigenvectors.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::linalg;

/// Relative eigenvalue cutoff below which a basis direction is considered
/// numerically zero; also the coordinate tolerance for duplicate sites.
const EIGEN_REL_TOL: f64 = 1e-12;
const DUPLICATE_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("need at least 4 locations, got {0}")]
    TooFewLocations(usize),
    #[error("locations {0} and {1} coincide within tolerance")]
    DuplicateLocations(usize, usize),
    #[error("affine design is rank deficient (all locations collinear)")]
    RankDeficientDelta,
    #[error("eigendecomposition of the projected kernel failed")]
    EigenFailure,
    #[error("basis rank {k} outside the admissible range [3, {n}]")]
    RankOutOfRange { k: usize, n: usize },
    #[error(
        "eigenvalue {value:.3e} for basis rank {k} is below the numerical \
         cutoff {cutoff:.3e}"
    )]
    NearZeroEigenvalue { k: usize, value: f64, cutoff: f64 },
}

/// A planar site `s = (s1, s2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Location {
    pub s1: f64,
    pub s2: f64,
}

impl Location {
    pub fn new(s1: f64, s2: f64) -> Self {
        Self { s1, s2 }
    }

    pub fn dist(&self, other: &Location) -> f64 {
        (self.s1 - other.s1).hypot(self.s2 - other.s2)
    }
}

/// The thin-plate spline radial function `(1/8pi) r^2 log r`, extended by
/// continuity to 0 at `r = 0`.
pub fn radial_phi(s: Location, si: Location) -> f64 {
    let r = s.dist(&si);
    if r == 0.0 {
        0.0
    } else {
        r * r * r.ln() / (8.0 * std::f64::consts::PI)
    }
}

/// Assembles the affine design `Delta` (n x 3) and the radial kernel matrix
/// `Phi` (n x n, symmetric, zero diagonal).
pub fn build_design(locations: &[Location]) -> Result<(Array2<f64>, Array2<f64>), BasisError> {
    let n = locations.len();
    if n < 4 {
        return Err(BasisError::TooFewLocations(n));
    }
    let mut delta = Array2::zeros((n, 3));
    for (i, s) in locations.iter().enumerate() {
        delta[[i, 0]] = 1.0;
        delta[[i, 1]] = s.s1;
        delta[[i, 2]] = s.s2;
    }
    let mut phi = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            if locations[i].dist(&locations[j]) < DUPLICATE_TOL {
                return Err(BasisError::DuplicateLocations(i, j));
            }
            let v = radial_phi(locations[i], locations[j]);
            phi[[i, j]] = v;
            phi[[j, i]] = v;
        }
    }
    Ok((delta, phi))
}

/// Eigendecomposition of `Q Phi Q` with eigenvalues in descending order and
/// each eigenvector's largest-magnitude entry made positive.
pub fn eigen_qphiq(
    delta: &Array2<f64>,
    phi: &Array2<f64>,
) -> Result<(Array1<f64>, Array2<f64>), BasisError> {
    let dtd = delta.t().dot(delta);
    // W = Delta (Delta^t Delta)^{-1}; collinear sites make the solve fail.
    let w = linalg::spd_solve_mat(&dtd, &delta.t().to_owned())
        .map_err(|_| BasisError::RankDeficientDelta)?
        .t()
        .to_owned();
    let t = delta.t().dot(phi);
    let s1 = w.dot(&t);
    let tw = t.dot(&w);
    // Q Phi Q = Phi - W T - (W T)^t + W (T W) Delta^t, with the last term
    // equal to the hat matrix sandwiching Phi.
    let mut m = phi - &s1 - &s1.t() + w.dot(&tw).dot(&delta.t());
    // Symmetrize away the accumulation noise before handing to LAPACK.
    m = (&m + &m.t()) / 2.0;
    let (vals, mut vecs) = linalg::eigh_desc(&m).map_err(|_| BasisError::EigenFailure)?;
    for mut col in vecs.columns_mut() {
        let mut idx = 0;
        let mut best = 0.0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > best {
                best = v.abs();
                idx = i;
            }
        }
        if col[idx] < 0.0 {
            col.mapv_inplace(|v| -v);
        }
    }
    Ok((vals, vecs))
}

/// The immutable basis object: affine design, kernel matrix and the
/// eigen-structure of the projected kernel, built once per set of sites.
#[derive(Debug, Clone)]
pub struct TpsBasis {
    locations: Vec<Location>,
    delta: Array2<f64>,
    phi_mat: Array2<f64>,
    eigvals: Array1<f64>,
    eigvecs: Array2<f64>,
    // C = (Delta^t Delta)^{-1} Delta^t Phi, the 3 x n affine correction used
    // when evaluating eigenfunctions away from the data sites.
    c_mat: Array2<f64>,
}

impl TpsBasis {
    pub fn new(locations: &[Location]) -> Result<Self, BasisError> {
        let (delta, phi_mat) = build_design(locations)?;
        let (eigvals, eigvecs) = eigen_qphiq(&delta, &phi_mat)?;
        let dtd = delta.t().dot(&delta);
        let c_mat = linalg::spd_solve_mat(&dtd, &delta.t().dot(&phi_mat))
            .map_err(|_| BasisError::RankDeficientDelta)?;
        Ok(Self {
            locations: locations.to_vec(),
            delta,
            phi_mat,
            eigvals,
            eigvecs,
            c_mat,
        })
    }

    pub fn n(&self) -> usize {
        self.locations.len()
    }

    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    pub fn delta(&self) -> &Array2<f64> {
        &self.delta
    }

    pub fn phi_mat(&self) -> &Array2<f64> {
        &self.phi_mat
    }

    /// Eigenvalues of `Q Phi Q`, descending.
    pub fn eigvals(&self) -> &Array1<f64> {
        &self.eigvals
    }

    /// Orthonormal eigenvectors of `Q Phi Q`, columns matching `eigvals`.
    pub fn eigvecs(&self) -> &Array2<f64> {
        &self.eigvecs
    }

    /// Largest rank whose eigenvalue clears the relative cutoff; ranks above
    /// this make `evaluate_basis` fail with `NearZeroEigenvalue`.
    pub fn max_usable_rank(&self) -> usize {
        let top = self.eigvals[0];
        if top <= 0.0 {
            return 3;
        }
        let cutoff = EIGEN_REL_TOL * top;
        let usable = self
            .eigvals
            .iter()
            .take(self.n() - 3)
            .take_while(|&&v| v >= cutoff)
            .count();
        3 + usable
    }

    fn check_rank(&self, k: usize) -> Result<(), BasisError> {
        let n = self.n();
        if !(3..=n).contains(&k) {
            return Err(BasisError::RankOutOfRange { k, n });
        }
        if k > 3 {
            let cutoff = EIGEN_REL_TOL * self.eigvals[0].max(0.0);
            let tail = self.eigvals[k - 4];
            if tail < cutoff || tail <= 0.0 {
                return Err(BasisError::NearZeroEigenvalue {
                    k,
                    value: tail,
                    cutoff,
                });
            }
        }
        Ok(())
    }

    /// Basis matrix at the data sites: `[1 | s1 | s2]` followed by the
    /// leading eigenvectors. Exact by construction, no kernel evaluation.
    pub fn psi_at_sites(&self, k: usize) -> Result<Array2<f64>, BasisError> {
        self.check_rank(k)?;
        let n = self.n();
        let mut psi = Array2::zeros((n, k));
        psi.slice_mut(ndarray::s![.., ..3]).assign(&self.delta);
        for j in 3..k {
            psi.column_mut(j).assign(&self.eigvecs.column(j - 3));
        }
        Ok(psi)
    }

    /// Evaluates the first `k` basis functions at arbitrary points.
    ///
    /// Column `j >= 4` is `Lambda_{j-3}^{-1} {phi(s) - Phi Delta
    /// (Delta^t Delta)^{-1} delta}^t a_{j-3}` with `delta = (1, s^t)^t`; at
    /// the data sites this reproduces the eigenvector columns.
    pub fn evaluate_basis(
        &self,
        k: usize,
        eval_points: &[Location],
    ) -> Result<Array2<f64>, BasisError> {
        self.check_rank(k)?;
        let n = self.n();
        let m = eval_points.len();
        let mut psi = Array2::zeros((m, k));
        // CA = (Delta^t Delta)^{-1} Delta^t Phi A, shared across points.
        let a_sub = self.eigvecs.slice(ndarray::s![.., ..k - 3]);
        let ca = self.c_mat.dot(&a_sub);
        let mut phi_s = Array1::zeros(n);
        for (r, &p) in eval_points.iter().enumerate() {
            psi[[r, 0]] = 1.0;
            psi[[r, 1]] = p.s1;
            psi[[r, 2]] = p.s2;
            for (i, &si) in self.locations.iter().enumerate() {
                phi_s[i] = radial_phi(p, si);
            }
            for j in 3..k {
                let proj = phi_s.dot(&a_sub.column(j - 3))
                    - (ca[[0, j - 3]] + p.s1 * ca[[1, j - 3]] + p.s2 * ca[[2, j - 3]]);
                psi[[r, j]] = proj / self.eigvals[j - 3];
            }
        }
        Ok(psi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn unit_square() -> Vec<Location> {
        vec![
            Location::new(0.0, 0.0),
            Location::new(1.0, 0.0),
            Location::new(0.0, 1.0),
            Location::new(1.0, 1.0),
        ]
    }

    fn random_sites(n: usize, seed: u64) -> Vec<Location> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Location::new(rng.random::<f64>(), rng.random::<f64>()))
            .collect()
    }

    #[test]
    fn radial_values() {
        let o = Location::new(0.0, 0.0);
        assert_eq!(radial_phi(o, o), 0.0);
        assert_eq!(radial_phi(Location::new(1.0, 0.0), o), 0.0);
        assert_abs_diff_eq!(
            radial_phi(Location::new(2.0, 0.0), o),
            0.110318,
            epsilon = 1e-6
        );
    }

    #[test]
    fn radial_symmetric_and_rotation_invariant() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..10 {
            let a = Location::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let b = Location::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            assert_abs_diff_eq!(radial_phi(a, b), radial_phi(b, a), epsilon = 1e-15);
            let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (c, s) = (th.cos(), th.sin());
            let rot = |p: Location| Location::new(c * p.s1 - s * p.s2, s * p.s1 + c * p.s2);
            assert_abs_diff_eq!(radial_phi(rot(a), rot(b)), radial_phi(a, b), epsilon = 1e-12);
        }
    }

    #[test]
    fn design_on_unit_square() {
        let (delta, phi) = build_design(&unit_square()).unwrap();
        let expect = array![
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [1.0, 0.0, 1.0],
            [1.0, 1.0, 1.0]
        ];
        assert_abs_diff_eq!(delta, expect, epsilon = 0.0);
        for i in 0..4 {
            assert_eq!(phi[[i, i]], 0.0);
        }
        assert_abs_diff_eq!(phi[[0, 3]], radial_phi(unit_square()[0], unit_square()[3]));
    }

    #[test]
    fn design_rejects_bad_inputs() {
        let few = vec![Location::new(0.0, 0.0); 3];
        assert!(matches!(
            build_design(&few),
            Err(BasisError::TooFewLocations(3))
        ));

        let mut dup = unit_square();
        dup[3] = Location::new(0.0, 1e-13);
        assert!(matches!(
            build_design(&dup),
            Err(BasisError::DuplicateLocations(0, 3))
        ));

        let line: Vec<Location> = (0..4).map(|i| Location::new(i as f64, 2.0)).collect();
        let (d, p) = build_design(&line).unwrap();
        assert!(matches!(
            eigen_qphiq(&d, &p),
            Err(BasisError::RankDeficientDelta)
        ));
    }

    #[test]
    fn eigen_square_has_three_null_values() {
        let (d, p) = build_design(&unit_square()).unwrap();
        let (vals, vecs) = eigen_qphiq(&d, &p).unwrap();
        let nulls = vals.iter().filter(|v| v.abs() < 1e-10).count();
        assert!(nulls >= 3, "null eigenvalues: {nulls} of {vals}");
        // Reconstruction check.
        let dtd = d.t().dot(&d);
        let w = linalg::spd_solve_mat(&dtd, &d.t().to_owned())
            .unwrap()
            .t()
            .to_owned();
        let q = Array2::eye(4) - w.dot(&d.t());
        let qpq = q.dot(&p).dot(&q);
        let recon = vecs.dot(&Array2::from_diag(&vals)).dot(&vecs.t());
        let num = (&recon - &qpq).mapv(|v| v * v).sum().sqrt();
        let den = qpq.mapv(|v| v * v).sum().sqrt();
        assert!(num < 1e-8 * den.max(1e-8), "relative error {}", num / den);
    }

    #[test]
    fn eigen_random_sites_sorted_descending_with_positive_head() {
        let sites = random_sites(50, 11);
        let basis = TpsBasis::new(&sites).unwrap();
        let vals = basis.eigvals();
        assert!(vals[0] > 0.0);
        for w in vals.as_slice().unwrap().windows(2) {
            assert!(w[0] >= w[1] - 1e-14);
        }
        assert_eq!(basis.max_usable_rank(), 50);
    }

    #[test]
    fn psi_first_three_columns_are_affine() {
        let sites = random_sites(20, 3);
        let basis = TpsBasis::new(&sites).unwrap();
        let psi = basis.psi_at_sites(3).unwrap();
        for (i, s) in sites.iter().enumerate() {
            assert_eq!(psi[[i, 0]], 1.0);
            assert_eq!(psi[[i, 1]], s.s1);
            assert_eq!(psi[[i, 2]], s.s2);
        }
        let eval = basis.evaluate_basis(3, &sites).unwrap();
        assert_abs_diff_eq!(eval, psi, epsilon = 0.0);
    }

    #[test]
    fn evaluated_fourth_column_matches_eigenvector() {
        let sites = random_sites(30, 5);
        let basis = TpsBasis::new(&sites).unwrap();
        let psi = basis.evaluate_basis(4, &sites).unwrap();
        let a1 = basis.eigvecs().column(0);
        for i in 0..30 {
            assert_abs_diff_eq!(psi[[i, 3]], a1[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn trailing_site_columns_orthonormal_and_affine_orthogonal() {
        let sites = random_sites(40, 9);
        let basis = TpsBasis::new(&sites).unwrap();
        let k = 10;
        let psi = basis.psi_at_sites(k).unwrap();
        let tail = psi.slice(ndarray::s![.., 3..]);
        let gram = tail.t().dot(&tail);
        assert_abs_diff_eq!(gram, Array2::eye(k - 3), epsilon = 1e-8);
        let cross = basis.delta().t().dot(&tail);
        assert_abs_diff_eq!(cross, Array2::zeros((3, k - 3)), epsilon = 1e-8);
    }

    #[test]
    fn rank_bounds_and_near_zero_eigenvalues() {
        let sites = random_sites(12, 1);
        let basis = TpsBasis::new(&sites).unwrap();
        assert!(matches!(
            basis.psi_at_sites(13),
            Err(BasisError::RankOutOfRange { k: 13, n: 12 })
        ));
        assert!(matches!(
            basis.psi_at_sites(2),
            Err(BasisError::RankOutOfRange { k: 2, n: 12 })
        ));

        // A nearly coincident pair collapses one eigen-direction; asking for
        // the full rank must fail while the usable rank stays available.
        let mut close = random_sites(12, 2);
        close[11] = Location::new(close[10].s1 + 1e-9, close[10].s2);
        let basis = TpsBasis::new(&close).unwrap();
        let usable = basis.max_usable_rank();
        assert!(usable < 12, "usable rank {usable}");
        assert!(basis.psi_at_sites(usable).is_ok());
        assert!(matches!(
            basis.psi_at_sites(usable + 1),
            Err(BasisError::NearZeroEigenvalue { .. })
        ));
    }

    #[test]
    fn evaluate_is_deterministic() {
        let sites = random_sites(25, 13);
        let basis = TpsBasis::new(&sites).unwrap();
        let pts = random_sites(7, 14);
        let a = basis.evaluate_basis(8, &pts).unwrap();
        let b = basis.evaluate_basis(8, &pts).unwrap();
        assert_eq!(a, b);
    }

    /// Hessian entries of the radial function, for the quadrature below.
    fn radial_hessian(u: f64, v: f64) -> (f64, f64, f64) {
        let r2 = u * u + v * v;
        let log_r = 0.5 * r2.ln();
        let c = 1.0 / (8.0 * std::f64::consts::PI);
        let fxx = c * (2.0 * log_r + 1.0 + 2.0 * u * u / r2);
        let fyy = c * (2.0 * log_r + 1.0 + 2.0 * v * v / r2);
        let fxy = c * (2.0 * u * v / r2);
        (fxx, fxy, fyy)
    }

    #[test]
    fn penalty_identity_against_quadrature() {
        // nu = (1, -1, -1, 1) on the unit-square corners satisfies
        // Delta^t nu = 0, so the roughness penalty of psi = sum nu_i phi_i
        // must equal nu^t Phi nu = 4 phi(sqrt 2) = ln 2 / (2 pi).
        let sites = unit_square();
        let nu = [1.0, -1.0, -1.0, 1.0];
        let (_, phi) = build_design(&sites).unwrap();
        let mut quad_form = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                quad_form += nu[i] * nu[j] * phi[[i, j]];
            }
        }
        assert_abs_diff_eq!(
            quad_form,
            std::f64::consts::LN_2 / (2.0 * std::f64::consts::PI),
            epsilon = 1e-12
        );

        let integrand = |x: f64, y: f64| {
            let (mut fxx, mut fxy, mut fyy) = (0.0, 0.0, 0.0);
            for (i, s) in sites.iter().enumerate() {
                let (a, b, c) = radial_hessian(x - s.s1, y - s.s2);
                fxx += nu[i] * a;
                fxy += nu[i] * b;
                fyy += nu[i] * c;
            }
            fxx * fxx + 2.0 * fxy * fxy + fyy * fyy
        };
        // Midpoint rule: fine mesh near the corners where the Hessian has
        // log singularities, coarse mesh for the algebraic far-field tail.
        let mut integral = 0.0;
        let hf = 0.005;
        let fine = |x: f64, y: f64| (-0.5..1.5).contains(&x) && (-0.5..1.5).contains(&y);
        let steps_f = (2.0 / hf) as usize;
        for ix in 0..steps_f {
            let x = -0.5 + (ix as f64 + 0.5) * hf;
            for iy in 0..steps_f {
                let y = -0.5 + (iy as f64 + 0.5) * hf;
                integral += integrand(x, y) * hf * hf;
            }
        }
        let hc = 0.05;
        let steps_c = (32.0 / hc) as usize;
        for ix in 0..steps_c {
            let x = -15.5 + (ix as f64 + 0.5) * hc;
            for iy in 0..steps_c {
                let y = -15.5 + (iy as f64 + 0.5) * hc;
                if !fine(x, y) {
                    integral += integrand(x, y) * hc * hc;
                }
            }
        }
        let rel = (integral - quad_form).abs() / quad_form;
        assert!(
            rel < 0.05,
            "quadrature {integral:.6} vs quadratic form {quad_form:.6} (rel {rel:.3})"
        );
    }
}
