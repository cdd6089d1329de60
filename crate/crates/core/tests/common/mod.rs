#![allow(dead_code)]

use inspection_bl::bayes_linear::{
    adjusted_expectation, adjusted_variance, generalized_inverse, CrossMoment, MomentPair,
    DEFAULT_RTOL,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// Random PSD matrix of dimension `n` and rank at most `k`.
pub fn psd(rng: &mut ChaCha8Rng, n: usize, k: usize) -> DMatrix<f64> {
    let b = gaussian_matrix(rng, n, k);
    &b * b.transpose()
}

fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> Result<(), String> {
    let scale = a.amax().max(b.amax()).max(1.0);
    let err = (a - b).amax();
    if err <= tol * scale {
        Ok(())
    } else {
        Err(format!("max deviation {err:e} exceeds {:e}", tol * scale))
    }
}

/// All four Penrose conditions for a rank-deficient symmetric matrix.
pub fn penrose(seed: u64, n: usize, k: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = psd(&mut rng, n, k);
    let g = generalized_inverse(&a, DEFAULT_RTOL).map_err(|e| e.to_string())?;
    let p = &g.inverse;
    if g.rank != k.min(n) {
        return Err(format!("rank {} for a rank-{} matrix", g.rank, k.min(n)));
    }
    let ap = &a * p;
    let pa = p * &a;
    close(&(&ap * &a), &a, 1e-8).map_err(|e| format!("A A+ A: {e}"))?;
    close(&(&pa * p), p, 1e-8).map_err(|e| format!("A+ A A+: {e}"))?;
    close(&ap.transpose(), &ap, 1e-8).map_err(|e| format!("(A A+)': {e}"))?;
    close(&pa.transpose(), &pa, 1e-8).map_err(|e| format!("(A+ A)': {e}"))
}

/// Joint prior over `(B, D)`, split into its blocks.
fn joint(rng: &mut ChaCha8Rng, nb: usize, nd: usize, rank: usize) -> (MomentPair, MomentPair, CrossMoment) {
    let v = psd(rng, nb + nd, rank);
    let mean: DVector<f64> = DVector::from_fn(nb + nd, |_, _| rng.sample(StandardNormal));
    let b = MomentPair::new(mean.rows(0, nb).into(), v.view((0, 0), (nb, nb)).into()).unwrap();
    let d = MomentPair::new(mean.rows(nb, nd).into(), v.view((nb, nb), (nd, nd)).into()).unwrap();
    (b, d, CrossMoment::new(v.view((0, nb), (nb, nd)).into()))
}

/// `var(B) − var_D(B)` and `var_D(B)` are both PSD.
pub fn monotone(seed: u64, nb: usize, nd: usize, rank: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, d, c) = joint(&mut rng, nb, nd, rank);
    let adj = adjusted_variance(&b, &d, &c).map_err(|e| e.to_string())?;
    let resolved = b.covariance() - &adj;
    let scale = b.covariance().amax().max(f64::MIN_POSITIVE);
    for (name, m) in [("adjusted", &adj), ("resolved", &resolved)] {
        let e = m.clone().symmetric_eigen().eigenvalues.min();
        if e < -1e-8 * scale {
            return Err(format!("{name} variance has eigenvalue {e:e} (prior scale {scale:e})"));
        }
    }
    Ok(())
}

/// Zero covariance with the data leaves the prior untouched.
pub fn no_op(seed: u64, nb: usize, nd: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, d, _) = joint(&mut rng, nb, nd, nb + nd);
    let c = CrossMoment::zeros(nb, nd);
    let y: DVector<f64> = DVector::from_fn(nd, |_, _| 10.0 * rng.sample::<f64, _>(StandardNormal));
    let e = adjusted_expectation(&b, &d, &c, &y).map_err(|e| e.to_string())?;
    let v = adjusted_variance(&b, &d, &c).map_err(|e| e.to_string())?;
    if e != *b.mean() || v != *b.covariance() {
        return Err("zero covariance changed the prior".into());
    }
    Ok(())
}

/// Adjusting a full-rank `D` by itself returns the data with zero variance.
pub fn self_adjustment(seed: u64, n: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = psd(&mut rng, n, n + 3);
    let mean: DVector<f64> = DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
    let d = MomentPair::new(mean, v.clone()).unwrap();
    let y: DVector<f64> = DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
    let c = CrossMoment::new(v.clone());
    let e = adjusted_expectation(&d, &d, &c, &y).map_err(|e| e.to_string())?;
    let adj = adjusted_variance(&d, &d, &c).map_err(|e| e.to_string())?;
    let scale = v.amax();
    let cond_tol = 1e-6;
    let err = (&e - &y).amax();
    if err > cond_tol * y.amax().max(1.0) {
        return Err(format!("E_D(D) misses the data by {err:e}"));
    }
    if adj.amax() > cond_tol * scale {
        return Err(format!("var_D(D) has entries up to {:e}", adj.amax()));
    }
    Ok(())
}
