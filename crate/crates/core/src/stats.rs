//! Streaming moment accumulation and small summary helpers.
//!
//! [`Moments`] tracks a primary vector (full co-moment matrix) and a secondary
//! vector (per-entry second moment plus cross co-moments with the primary).
//! Blocks of samples are folded in with one matrix product each and partial
//! accumulators merge exactly (Chan et al. pairwise update), so an ensemble
//! can be split across workers and recombined in a fixed order.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    n: usize,
    mean_p: DVector<f64>,
    co_pp: DMatrix<f64>,
    mean_s: DVector<f64>,
    m2_s: DVector<f64>,
    co_sp: DMatrix<f64>,
}

impl Moments {
    pub fn empty(p: usize, s: usize) -> Self {
        Self {
            n: 0,
            mean_p: DVector::zeros(p),
            co_pp: DMatrix::zeros(p, p),
            mean_s: DVector::zeros(s),
            m2_s: DVector::zeros(s),
            co_sp: DMatrix::zeros(s, p),
        }
    }

    /// Moments of a block whose columns are samples.
    pub fn from_block(primary: &DMatrix<f64>, secondary: &DMatrix<f64>) -> Self {
        let n = primary.ncols();
        assert_eq!(n, secondary.ncols(), "primary and secondary sample counts differ");
        if n == 0 {
            return Self::empty(primary.nrows(), secondary.nrows());
        }
        let mean_p = primary.column_mean();
        let mean_s = secondary.column_mean();
        let mut cp = primary.clone();
        for mut col in cp.column_iter_mut() {
            col -= &mean_p;
        }
        let mut cs = secondary.clone();
        for mut col in cs.column_iter_mut() {
            col -= &mean_s;
        }
        let co_pp = &cp * cp.transpose();
        let co_sp = &cs * cp.transpose();
        let m2_s = DVector::from_iterator(cs.nrows(), cs.row_iter().map(|r| r.norm_squared()));
        Self {
            n,
            mean_p,
            co_pp,
            mean_s,
            m2_s,
            co_sp,
        }
    }

    /// Exact pooled moments of two disjoint sample sets.
    pub fn merge(mut self, other: &Moments) -> Self {
        if other.n == 0 {
            return self;
        }
        if self.n == 0 {
            return other.clone();
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let dp = &other.mean_p - &self.mean_p;
        let ds = &other.mean_s - &self.mean_s;
        let w = na * nb / n;
        self.co_pp += &other.co_pp;
        self.co_pp.ger(w, &dp, &dp, 1.0);
        self.co_sp += &other.co_sp;
        self.co_sp.ger(w, &ds, &dp, 1.0);
        self.m2_s += &other.m2_s + ds.component_mul(&ds) * w;
        self.mean_p += &dp * (nb / n);
        self.mean_s += &ds * (nb / n);
        self.n += other.n;
        self
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean_primary(&self) -> &DVector<f64> {
        &self.mean_p
    }

    pub fn mean_secondary(&self) -> &DVector<f64> {
        &self.mean_s
    }

    fn denom(&self) -> f64 {
        (self.n.max(2) - 1) as f64
    }

    /// Unbiased covariance of the primary vector, symmetrized.
    pub fn covariance(&self) -> DMatrix<f64> {
        let c = &self.co_pp / self.denom();
        (&c + c.transpose()) * 0.5
    }

    /// Unbiased variances of the secondary entries.
    pub fn secondary_variance(&self) -> DVector<f64> {
        &self.m2_s / self.denom()
    }

    /// Unbiased cross-covariance, secondary rows by primary columns.
    pub fn cross_covariance(&self) -> DMatrix<f64> {
        &self.co_sp / self.denom()
    }
}

/// Collects samples column by column and folds them in blocks.
#[derive(Debug, Clone)]
pub struct BlockBuffer {
    p: usize,
    s: usize,
    primary: Vec<f64>,
    secondary: Vec<f64>,
    pending: usize,
    moments: Moments,
    capacity: usize,
}

impl BlockBuffer {
    pub fn new(p: usize, s: usize, capacity: usize) -> Self {
        Self {
            p,
            s,
            primary: Vec::with_capacity(p * capacity),
            secondary: Vec::with_capacity(s * capacity),
            pending: 0,
            moments: Moments::empty(p, s),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, primary: &[f64], secondary: &[f64]) {
        debug_assert_eq!(primary.len(), self.p);
        debug_assert_eq!(secondary.len(), self.s);
        self.primary.extend_from_slice(primary);
        self.secondary.extend_from_slice(secondary);
        self.pending += 1;
        if self.pending >= self.capacity {
            self.flush();
        }
    }

    fn flush(&mut self) {
        let k = self.pending;
        if k == 0 {
            return;
        }
        let pm = DMatrix::from_column_slice(self.p, k, &self.primary);
        let sm = DMatrix::from_column_slice(self.s, k, &self.secondary);
        let block = Moments::from_block(&pm, &sm);
        self.moments = std::mem::replace(&mut self.moments, Moments::empty(0, 0)).merge(&block);
        self.primary.clear();
        self.secondary.clear();
        self.pending = 0;
    }

    pub fn finish(mut self) -> Moments {
        self.flush();
        self.moments
    }
}

/// Linear-interpolation quantile of unsorted data (`q` in `[0, 1]`).
pub fn quantile(data: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = data.to_vec();
    quantile_in_place(&mut v, q)
}

pub(crate) fn quantile_in_place(v: &mut [f64], q: f64) -> f64 {
    assert!(!v.is_empty(), "quantile of empty data");
    v.sort_by(|a, b| a.total_cmp(b));
    let h = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn mean(data: &[f64]) -> f64 {
    data.iter().sum::<f64>() / data.len() as f64
}

/// Unbiased sample variance.
pub fn variance(data: &[f64]) -> f64 {
    let m = mean(data);
    data.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (data.len().max(2) - 1) as f64
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let (ma, mb) = (mean(&ra), mean(&rb));
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(samples: &[(Vec<f64>, Vec<f64>)]) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
        let n = samples.len() as f64;
        let p = samples[0].0.len();
        let s = samples[0].1.len();
        let mp = samples.iter().fold(DVector::zeros(p), |a, x| a + DVector::from_vec(x.0.clone())) / n;
        let ms = samples.iter().fold(DVector::zeros(s), |a, x| a + DVector::from_vec(x.1.clone())) / n;
        let mut cpp = DMatrix::zeros(p, p);
        let mut vs = DVector::zeros(s);
        let mut csp = DMatrix::zeros(s, p);
        for (a, b) in samples {
            let da = DVector::from_vec(a.clone()) - &mp;
            let db = DVector::from_vec(b.clone()) - &ms;
            cpp += &da * da.transpose();
            csp += &db * da.transpose();
            vs += db.component_mul(&db);
        }
        (cpp / (n - 1.0), vs / (n - 1.0), csp / (n - 1.0))
    }

    #[test]
    fn blocked_accumulation_matches_two_pass() {
        let samples: Vec<(Vec<f64>, Vec<f64>)> = (0..103)
            .map(|i| {
                let x = i as f64;
                (
                    vec![x.sin() * 3.0 + 10.0, (x * 0.7).cos(), x * 0.01],
                    vec![(x * 1.3).sin() + 100.0, x.sqrt()],
                )
            })
            .collect();
        let mut buf = BlockBuffer::new(3, 2, 17);
        for (a, b) in &samples {
            buf.push(a, b);
        }
        let m = buf.finish();
        let (cpp, vs, csp) = naive(&samples);
        assert_eq!(m.count(), 103);
        assert!((m.covariance() - cpp).norm() < 1e-10);
        assert!((m.secondary_variance() - vs).norm() < 1e-10);
        assert!((m.cross_covariance() - csp).norm() < 1e-10);
    }

    #[test]
    fn merge_is_order_consistent() {
        let a = DMatrix::from_fn(2, 5, |i, j| (i * 7 + j * 3) as f64);
        let b = DMatrix::from_fn(2, 9, |i, j| ((i + 1) * j) as f64 * 0.5);
        let sa = DMatrix::from_fn(1, 5, |_, j| j as f64);
        let sb = DMatrix::from_fn(1, 9, |_, j| -(j as f64));
        let ab = Moments::from_block(&a, &sa).merge(&Moments::from_block(&b, &sb));
        let ba = Moments::from_block(&b, &sb).merge(&Moments::from_block(&a, &sa));
        assert!((ab.covariance() - ba.covariance()).norm() < 1e-12);
        assert!((ab.cross_covariance() - ba.cross_covariance()).norm() < 1e-12);
    }

    #[test]
    fn quantiles_and_ranks() {
        let d = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(quantile(&d, 0.0), 1.0);
        assert_eq!(quantile(&d, 1.0), 4.0);
        assert!((quantile(&d, 0.5) - 2.5).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }
}
