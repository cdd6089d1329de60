//! Bayes linear adjustment primitives.
//!
//! Beliefs are carried as first- and second-order moments only. Given data
//! `D` observed at `d`, the adjusted expectation and variance of a vector `B`
//! are
//!
//! ```text
//! E_D(B)    = E(B) + cov(B,D) var(D)⁺ (d − E(D))
//! RVar_D(B) = cov(B,D) var(D)⁺ cov(D,B)
//! var_D(B)  = var(B) − RVar_D(B)
//! ```
//!
//! `var(D)⁺` is the Moore–Penrose inverse computed from a symmetric
//! eigendecomposition. Eigenvalues whose magnitude falls below
//! `rtol · max|λ|` are treated as zero, and the same cut defines the rank
//! used to normalise discrepancies, so the numerator and denominator of a
//! discrepancy ratio always refer to the same subspace.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Default relative eigenvalue cut for generalised inverses and ranks.
pub const DEFAULT_RTOL: f64 = 1e-10;

/// Relative Frobenius asymmetry accepted for "symmetric" inputs.
pub const SYMMETRY_RTOL: f64 = 1e-10;

/// Negative eigenvalues down to `-PSD_RTOL · λ_max` are accepted as PSD.
pub const PSD_RTOL: f64 = 1e-8;

/// Mean vector and covariance matrix of a random vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPair {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
}

impl MomentPair {
    /// Validates dimensions, symmetry and positive semi-definiteness.
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != covariance.ncols() || covariance.nrows() != mean.len() {
            return Err(Error::shape(format!(
                "mean has length {} but covariance is {}x{}",
                mean.len(),
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        check_symmetric(&covariance)?;
        let min_rel = min_relative_eigenvalue(&covariance);
        if min_rel < -PSD_RTOL {
            return Err(Error::DegenerateVariance(format!(
                "covariance is not positive semi-definite (min eigenvalue / max = {min_rel:.3e})"
            )));
        }
        Ok(Self { mean, covariance })
    }

    pub fn scalar(mean: f64, variance: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(1, mean),
            DMatrix::from_element(1, 1, variance),
        )
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `cov(B, D)`: rows indexed by the adjusted quantities, columns by data.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossMoment {
    matrix: DMatrix<f64>,
}

impl CrossMoment {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        Self { matrix }
    }

    pub fn zeros(targets: usize, data: usize) -> Self {
        Self::new(DMatrix::zeros(targets, data))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    fn check(&self, target: usize, data: usize) -> Result<()> {
        if self.matrix.nrows() != target || self.matrix.ncols() != data {
            return Err(Error::shape(format!(
                "cross moment is {}x{}, expected {}x{}",
                self.matrix.nrows(),
                self.matrix.ncols(),
                target,
                data
            )));
        }
        Ok(())
    }
}

/// Moore–Penrose inverse of a symmetric matrix together with its numerical rank.
#[derive(Debug, Clone)]
pub struct GeneralizedInverse {
    pub inverse: DMatrix<f64>,
    pub rank: usize,
}

/// Square-root factor `W` of a symmetric PSD pseudo-inverse, `A⁺ = W Wᵀ`.
///
/// Columns span the retained eigenspace, so `Wᵀ x` whitens `x` within the
/// column space of `A` and discards the null-space component.
#[derive(Debug, Clone)]
pub struct WhiteningFactor {
    pub factor: DMatrix<f64>,
}

impl WhiteningFactor {
    pub fn rank(&self) -> usize {
        self.factor.ncols()
    }

    /// `Wᵀ x`.
    pub fn whiten(&self, x: &DVector<f64>) -> DVector<f64> {
        self.factor.tr_mul(x)
    }
}

pub(crate) fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::shape(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let norm = m.norm();
    if norm == 0.0 {
        return Ok(());
    }
    let asym = (m - m.transpose()).norm() / norm;
    if asym > SYMMETRY_RTOL {
        return Err(Error::Asymmetric(asym));
    }
    Ok(())
}

fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue divided by the largest eigenvalue magnitude (0 for a zero matrix).
pub fn min_relative_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let eig = SymmetricEigen::new(symmetrized(m));
    let max_abs = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if max_abs == 0.0 {
        return 0.0;
    }
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min) / max_abs
}

/// True when `m` is symmetric and PSD within [`PSD_RTOL`].
pub fn is_psd(m: &DMatrix<f64>) -> bool {
    check_symmetric(m).is_ok() && min_relative_eigenvalue(m) >= -PSD_RTOL
}

/// Moore–Penrose inverse and rank of a symmetric matrix.
pub fn generalized_inverse(m: &DMatrix<f64>, rtol: f64) -> Result<GeneralizedInverse> {
    check_symmetric(m)?;
    let n = m.nrows();
    let eig = SymmetricEigen::new(symmetrized(m));
    let max_abs = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let mut inverse = DMatrix::zeros(n, n);
    let mut rank = 0;
    if max_abs > 0.0 {
        let cut = rtol * max_abs;
        for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda.abs() > cut {
                rank += 1;
                let v = eig.eigenvectors.column(j);
                inverse.ger(1.0 / lambda, &v, &v, 1.0);
            }
        }
    }
    Ok(GeneralizedInverse {
        inverse: symmetrized(&inverse),
        rank,
    })
}

/// Moore–Penrose inverse with the default rank tolerance.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    generalized_inverse(m, DEFAULT_RTOL).map(|g| g.inverse)
}

/// Numerical rank under the same eigenvalue cut as [`generalized_inverse`].
pub fn numerical_rank(m: &DMatrix<f64>, rtol: f64) -> Result<usize> {
    generalized_inverse(m, rtol).map(|g| g.rank)
}

/// Whitening factor of a symmetric PSD matrix; negative eigenvalues below
/// the cut are dropped together with the null space.
pub fn whitening_factor(m: &DMatrix<f64>, rtol: f64) -> Result<WhiteningFactor> {
    check_symmetric(m)?;
    let n = m.nrows();
    let eig = SymmetricEigen::new(symmetrized(m));
    let max_abs = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let cut = rtol * max_abs;
    let keep: Vec<usize> = (0..n)
        .filter(|&j| max_abs > 0.0 && eig.eigenvalues[j] > cut)
        .collect();
    let mut factor = DMatrix::zeros(n, keep.len());
    for (col, &j) in keep.iter().enumerate() {
        let scale = 1.0 / eig.eigenvalues[j].sqrt();
        factor.set_column(col, &(eig.eigenvectors.column(j) * scale));
    }
    Ok(WhiteningFactor { factor })
}

/// Reusable adjustment by a fixed data vector `D`.
///
/// Holds `E(D)` and `var(D)⁺` so many targets can be adjusted against the
/// same data without repeating the eigendecomposition.
#[derive(Debug, Clone)]
pub struct Adjuster {
    data_mean: DVector<f64>,
    inverse: GeneralizedInverse,
}

impl Adjuster {
    pub fn new(data_prior: &MomentPair, rtol: f64) -> Result<Self> {
        Self::from_parts(data_prior.mean.clone(), data_prior.covariance(), rtol)
    }

    pub(crate) fn from_parts(
        data_mean: DVector<f64>,
        data_var: &DMatrix<f64>,
        rtol: f64,
    ) -> Result<Self> {
        if data_var.nrows() != data_mean.len() {
            return Err(Error::shape("data mean and variance disagree"));
        }
        Ok(Self {
            data_mean,
            inverse: generalized_inverse(data_var, rtol)?,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.data_mean.len()
    }

    pub fn rank(&self) -> usize {
        self.inverse.rank
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse.inverse
    }

    fn residual(&self, observed: &DVector<f64>) -> Result<DVector<f64>> {
        if observed.len() != self.data_dim() {
            return Err(Error::shape(format!(
                "observed data has length {}, expected {}",
                observed.len(),
                self.data_dim()
            )));
        }
        Ok(observed - &self.data_mean)
    }

    /// `var(D)⁺ (d − E(D))`.
    pub fn weighted_residual(&self, observed: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.inverse.inverse * self.residual(observed)?)
    }

    pub fn adjusted_expectation(
        &self,
        prior_mean: &DVector<f64>,
        cross: &CrossMoment,
        observed: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        cross.check(prior_mean.len(), self.data_dim())?;
        Ok(prior_mean + cross.matrix() * self.weighted_residual(observed)?)
    }

    pub fn resolved_variance(&self, cross: &CrossMoment) -> Result<DMatrix<f64>> {
        cross.check(cross.matrix.nrows(), self.data_dim())?;
        let gain = cross.matrix() * self.inverse();
        Ok(symmetrized(&(gain * cross.matrix().transpose())))
    }

    pub fn adjusted_variance(
        &self,
        prior_var: &DMatrix<f64>,
        cross: &CrossMoment,
    ) -> Result<DMatrix<f64>> {
        cross.check(prior_var.nrows(), self.data_dim())?;
        Ok(prior_var - self.resolved_variance(cross)?)
    }

    /// Diagonal of the resolved variance only; `O(n·p²)` instead of `O(n²·p)`.
    pub fn resolved_variance_diagonal(&self, cross: &CrossMoment) -> Result<DVector<f64>> {
        cross.check(cross.matrix.nrows(), self.data_dim())?;
        let gain = cross.matrix() * self.inverse();
        Ok(DVector::from_iterator(
            gain.nrows(),
            gain.row_iter()
                .zip(cross.matrix().row_iter())
                .map(|(g, c)| g.dot(&c)),
        ))
    }
}

/// `E_D(B)`.
pub fn adjusted_expectation(
    prior: &MomentPair,
    data_prior: &MomentPair,
    cross: &CrossMoment,
    observed: &DVector<f64>,
) -> Result<DVector<f64>> {
    Adjuster::new(data_prior, DEFAULT_RTOL)?.adjusted_expectation(prior.mean(), cross, observed)
}

/// `RVar_D(B) = cov(B,D) var(D)⁺ cov(D,B)`.
pub fn resolved_variance(data_prior: &MomentPair, cross: &CrossMoment) -> Result<DMatrix<f64>> {
    Adjuster::new(data_prior, DEFAULT_RTOL)?.resolved_variance(cross)
}

/// `var_D(B) = var(B) − RVar_D(B)`.
pub fn adjusted_variance(
    prior: &MomentPair,
    data_prior: &MomentPair,
    cross: &CrossMoment,
) -> Result<DMatrix<f64>> {
    Adjuster::new(data_prior, DEFAULT_RTOL)?.adjusted_variance(prior.covariance(), cross)
}

/// A Mahalanobis quadratic form and the rank it is normalised by.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Discrepancy {
    pub quadratic_form: f64,
    pub rank: usize,
}

impl Discrepancy {
    /// Quadratic form divided by rank; expectation one under the prior.
    pub fn ratio(&self) -> f64 {
        self.quadratic_form / self.rank as f64
    }
}

/// Raw and rank-normalised `(y − E(Y))ᵀ var(Y)⁺ (y − E(Y))`.
pub fn mahalanobis(
    observed: &DVector<f64>,
    mean: &DVector<f64>,
    covariance: &DMatrix<f64>,
    rtol: f64,
) -> Result<Discrepancy> {
    if observed.len() != mean.len() || covariance.nrows() != mean.len() {
        return Err(Error::shape(format!(
            "observed length {}, mean length {}, covariance {}x{}",
            observed.len(),
            mean.len(),
            covariance.nrows(),
            covariance.ncols()
        )));
    }
    let g = generalized_inverse(covariance, rtol)?;
    if g.rank == 0 {
        return Err(Error::DegenerateVariance(
            "variance has rank zero".to_string(),
        ));
    }
    let e = observed - mean;
    let q = e.dot(&(&g.inverse * &e));
    Ok(Discrepancy {
        quadratic_form: q.max(0.0),
        rank: g.rank,
    })
}

/// Discrepancy ratio of data against its prior moments.
pub fn mahalanobis_discrepancy(observed: &DVector<f64>, prior: &MomentPair) -> Result<f64> {
    mahalanobis(observed, prior.mean(), prior.covariance(), DEFAULT_RTOL).map(|d| d.ratio())
}

/// Raw adjustment discrepancy `(E_D(B) − E(B))ᵀ RVar_D(B)⁺ (E_D(B) − E(B))` with its rank.
pub fn adjustment_discrepancy_raw(
    adjusted_mean: &DVector<f64>,
    prior_mean: &DVector<f64>,
    resolved_var: &DMatrix<f64>,
    rtol: f64,
) -> Result<Discrepancy> {
    mahalanobis(adjusted_mean, prior_mean, resolved_var, rtol)
}

/// Rank-normalised adjustment discrepancy; unit expectation under the prior.
pub fn adjustment_discrepancy(
    adjusted_mean: &DVector<f64>,
    prior_mean: &DVector<f64>,
    resolved_var: &DMatrix<f64>,
) -> Result<f64> {
    adjustment_discrepancy_raw(adjusted_mean, prior_mean, resolved_var, DEFAULT_RTOL)
        .map(|d| d.ratio())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_psd(n: usize, rank: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
        &a * a.transpose()
    }

    fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / a.norm().max(b.norm()).max(1e-300)
    }

    #[test]
    fn identity_inverts_to_identity() {
        let inv = pseudo_inverse(&DMatrix::identity(3, 3)).unwrap();
        assert!(rel(&inv, &DMatrix::identity(3, 3)) < 1e-14);
    }

    #[test]
    fn rank_deficient_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0]));
        let g = generalized_inverse(&m, DEFAULT_RTOL).unwrap();
        assert_eq!(g.rank, 1);
        assert!((g.inverse[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(g.inverse[(1, 1)], 0.0);
    }

    #[test]
    fn penrose_conditions_on_random_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_psd(5, 5, &mut rng);
        let p = pseudo_inverse(&a).unwrap();
        assert!(rel(&(&a * &p * &a), &a) < 1e-8);
        assert!(rel(&(&p * &a * &p), &p) < 1e-8);
        let ap = &a * &p;
        let pa = &p * &a;
        assert!(rel(&ap.transpose(), &ap) < 1e-8);
        assert!(rel(&pa.transpose(), &pa) < 1e-8);
    }

    #[test]
    fn rejects_non_square_and_asymmetric() {
        assert!(matches!(
            pseudo_inverse(&DMatrix::zeros(2, 3)),
            Err(Error::Shape(_))
        ));
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(pseudo_inverse(&m), Err(Error::Asymmetric(_))));
    }

    #[test]
    fn scalar_adjustment_by_hand() {
        let b = MomentPair::scalar(1.0, 1.0).unwrap();
        let d = MomentPair::scalar(0.0, 1.0).unwrap();
        let c = CrossMoment::new(DMatrix::from_element(1, 1, 0.5));
        let e = adjusted_expectation(&b, &d, &c, &DVector::from_element(1, 2.0)).unwrap();
        assert!((e[0] - 2.0).abs() < 1e-15);
        let v = adjusted_variance(&b, &d, &c).unwrap();
        assert!((v[(0, 0)] - 0.75).abs() < 1e-15);

        let d2 = MomentPair::scalar(0.0, 2.0).unwrap();
        let r = resolved_variance(&d2, &c).unwrap();
        assert!((r[(0, 0)] - 0.125).abs() < 1e-15);
    }

    #[test]
    fn zero_cross_covariance_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vb = random_psd(3, 3, &mut rng);
        let vd = random_psd(4, 4, &mut rng);
        let b = MomentPair::new(DVector::from_vec(vec![1.0, 2.0, 3.0]), vb.clone()).unwrap();
        let d = MomentPair::new(DVector::zeros(4), vd).unwrap();
        let c = CrossMoment::zeros(3, 4);
        let obs = DVector::from_vec(vec![5.0, -1.0, 2.0, 0.3]);
        assert_eq!(adjusted_expectation(&b, &d, &c, &obs).unwrap(), *b.mean());
        assert_eq!(adjusted_variance(&b, &d, &c).unwrap(), vb);
        assert!(resolved_variance(&d, &c).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn self_adjustment_reproduces_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random_psd(4, 4, &mut rng);
        let d = MomentPair::new(DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]), v.clone()).unwrap();
        let c = CrossMoment::new(v.clone());
        let obs = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let e = adjusted_expectation(&d, &d, &c, &obs).unwrap();
        assert!((e - &obs).norm() < 1e-9 * obs.norm());
        let av = adjusted_variance(&d, &d, &c).unwrap();
        assert!(av.norm() < 1e-9 * v.norm());
        let rv = resolved_variance(&d, &c).unwrap();
        assert!(rel(&rv, &v) < 1e-9);
    }

    #[test]
    fn discrepancy_examples() {
        let prior = MomentPair::scalar(0.0, 4.0).unwrap();
        let y = DVector::from_element(1, 2.0);
        assert!((mahalanobis_discrepancy(&y, &prior).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(
            mahalanobis_discrepancy(&DVector::from_element(1, 0.0), &prior).unwrap(),
            0.0
        );
        let zero = MomentPair::scalar(0.0, 0.0).unwrap();
        assert!(matches!(
            mahalanobis_discrepancy(&y, &zero),
            Err(Error::DegenerateVariance(_))
        ));

        let one = DVector::from_element(1, 1.0);
        let zero_v = DVector::from_element(1, 0.0);
        let rv = DMatrix::from_element(1, 1, 1.0);
        assert!((adjustment_discrepancy(&one, &zero_v, &rv).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(adjustment_discrepancy(&one, &one, &rv).unwrap(), 0.0);
    }

    #[test]
    fn self_adjustment_discrepancy_matches_data_discrepancy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = random_psd(6, 4, &mut rng);
        let mean = DVector::from_fn(6, |i, _| i as f64);
        let d = MomentPair::new(mean.clone(), v.clone()).unwrap();
        // Observation inside the column space of v.
        let z = DVector::from_fn(6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let obs = &mean + &v * z;
        let c = CrossMoment::new(v.clone());
        let adj = adjusted_expectation(&d, &d, &c, &obs).unwrap();
        let rv = resolved_variance(&d, &c).unwrap();
        let a = adjustment_discrepancy(&adj, &mean, &rv).unwrap();
        let b = mahalanobis_discrepancy(&obs, &d).unwrap();
        assert!((a - b).abs() < 1e-6 * b.max(1.0), "{a} vs {b}");
    }

    #[test]
    fn monte_carlo_mean_discrepancy_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let v = random_psd(5, 5, &mut rng) + DMatrix::identity(5, 5) * 0.1;
        let chol = v.clone().cholesky().unwrap();
        let mean = DVector::from_vec(vec![1.0, 0.0, -1.0, 2.0, 0.5]);
        let prior = MomentPair::new(mean.clone(), v).unwrap();
        let n = 10_000;
        let total: f64 = (0..n)
            .map(|_| {
                let z = DVector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal));
                let y = &mean + chol.l() * z;
                mahalanobis_discrepancy(&y, &prior).unwrap()
            })
            .sum();
        let avg = total / n as f64;
        assert!((avg - 1.0).abs() < 0.05, "mean discrepancy {avg}");
    }

    #[test]
    fn whitening_factor_reconstructs_pseudo_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_psd(7, 3, &mut rng);
        let w = whitening_factor(&a, DEFAULT_RTOL).unwrap();
        assert_eq!(w.rank(), 3);
        let p = pseudo_inverse(&a).unwrap();
        assert!(rel(&(&w.factor * w.factor.transpose()), &p) < 1e-8);
    }

    #[test]
    fn moment_pair_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(MomentPair::new(DVector::zeros(2), m).is_err());
    }
}
