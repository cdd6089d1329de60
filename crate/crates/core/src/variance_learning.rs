//! Learning the population mean evolution variance `M(W_X)` from irregular
//! inspections.
//!
//! For a component observed at `t_1 < … < t_T`, each triple
//! `(t_{i−2}, t_{i−1}, t_i)` with lags `k = t_i − t_{i−1}` and
//! `l = t_i − t_{i−2}` gives the combination
//!
//! ```text
//! k·(Y_i − Y_{i−2}) − l·(Y_i − Y_{i−1})
//! ```
//!
//! which annihilates level and slope and leaves only evolution noise plus the
//! local/measurement term. Dividing its square by the exact lag weight `K`
//! makes the noise part have expectation `W_c`, so
//! `cov(M(W_X), D̄_c) = (T_c − 2)·Γ_WX` per component.

use std::collections::BTreeMap;

use log::info;
use nalgebra::{DMatrix, DVector};

use crate::bayes_linear::{Adjuster, MomentPair, DEFAULT_RTOL};
use crate::error::{Error, Result};
use crate::system::{InspectionDataset, VarianceHyperprior, VARIANCE_FLOOR};

/// `E[(k·X⁽²⁾ − l·X⁽¹⁾)²] / W_c` for level variance `W_c` and slope variance
/// `λ·W_c`, with `m = l − k`.
///
/// `K = k·l·m + λ[k²·m(m−1)(2m−1) + m²·k(k+1)(2k+1)]/6`; equals `λ + 2` at
/// `(k, l) = (1, 2)`.
pub fn lag_weight(k: usize, l: usize, lambda: f64) -> f64 {
    assert!(l > k && k >= 1, "lag weight needs l > k >= 1 (got k={k}, l={l})");
    let (k, m) = (k as f64, (l - k) as f64);
    let l = k + m;
    k * l * m
        + lambda * (k * k * m * (m - 1.0) * (2.0 * m - 1.0) + m * m * k * (k + 1.0) * (2.0 * k + 1.0))
            / 6.0
}

/// One `i ≥ 3` difference term of a component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchemeEntry {
    pub component: usize,
    /// 1-based position of `t_i` among the component's observations.
    pub index: usize,
    pub k: usize,
    pub l: usize,
    pub weight: f64,
    /// Record indices of `t_{i−2}`, `t_{i−1}`, `t_i` in the dataset.
    pub records: [usize; 3],
}

/// Difference terms of every component with at least three observations.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceScheme {
    lambda: f64,
    /// Diagonal of the correlation matrix; scales the evolution part.
    correlation_scale: f64,
    entries: Vec<SchemeEntry>,
    components: Vec<usize>,
    counts: Vec<usize>,
    skipped: Vec<usize>,
}

/// Builds the lag scheme from the dataset's (sorted) records.
pub fn build_scheme(dataset: &InspectionDataset, lambda: f64) -> DifferenceScheme {
    let mut by_component: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (i, r) in dataset.records().iter().enumerate() {
        by_component.entry(r.component).or_default().push((r.time, i));
    }
    let mut entries = Vec::new();
    let mut components = Vec::new();
    let mut counts = Vec::new();
    let mut skipped = Vec::new();
    for (&c, obs) in &by_component {
        if obs.len() < 3 {
            skipped.push(c);
            continue;
        }
        components.push(c);
        counts.push(obs.len());
        for i in 2..obs.len() {
            let k = obs[i].0 - obs[i - 1].0;
            let l = obs[i].0 - obs[i - 2].0;
            entries.push(SchemeEntry {
                component: c,
                index: i + 1,
                k,
                l,
                weight: lag_weight(k, l, lambda),
                records: [obs[i - 2].1, obs[i - 1].1, obs[i].1],
            });
        }
    }
    DifferenceScheme {
        lambda,
        correlation_scale: 1.0,
        entries,
        components,
        counts,
        skipped,
    }
}

impl DifferenceScheme {
    /// Same scheme for a correlation matrix whose diagonal is `scale`.
    pub fn with_correlation_scale(mut self, scale: f64) -> Self {
        self.correlation_scale = scale;
        self
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn entries(&self) -> &[SchemeEntry] {
        &self.entries
    }

    /// Components contributing to `D̄`, ascending.
    pub fn components(&self) -> &[usize] {
        &self.components
    }

    /// `T_c` for each contributing component.
    pub fn observation_counts(&self) -> &[usize] {
        &self.counts
    }

    /// Observed components with fewer than three records.
    pub fn skipped(&self) -> &[usize] {
        &self.skipped
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn slot(&self, component: usize) -> usize {
        self.components
            .binary_search(&component)
            .expect("scheme entry for unknown component")
    }

    /// Per-component `D̄` from values aligned with the dataset's records.
    pub fn dbar_from_values(&self, values: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.components.len());
        let mut slot = 0;
        for e in &self.entries {
            while self.components[slot] != e.component {
                slot += 1;
            }
            let [a, b, c] = e.records;
            let y1 = values[c] - values[b];
            let y2 = values[c] - values[a];
            let d = e.k as f64 * y2 - e.l as f64 * y1;
            out[slot] += d * d / e.weight;
        }
        out
    }

    /// `cov(M(W_X), D̄_c) = (T_c − 2)·Γ_WX` per contributing component.
    pub fn cross_covariance(&self, hyper: &VarianceHyperprior) -> DVector<f64> {
        DVector::from_iterator(
            self.counts.len(),
            self.counts
                .iter()
                .map(|&n| (n - 2) as f64 * hyper.gamma_wx * self.correlation_scale),
        )
    }
}

/// Per-component `D̄` of an observed dataset.
pub fn compute_dbar(dataset: &InspectionDataset, scheme: &DifferenceScheme) -> DVector<f64> {
    let values: Vec<f64> = dataset.records().iter().map(|r| r.thickness).collect();
    scheme.dbar_from_values(&values)
}

/// Second moments of the local/measurement differences for one scheme entry:
/// `E[(M⁽¹⁾)²]`, `E[(M⁽²⁾)²]`, `E[M⁽¹⁾M⁽²⁾]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MMoment {
    pub component: usize,
    pub index: usize,
    pub m1_sq: f64,
    pub m2_sq: f64,
    pub m1_m2: f64,
}

/// Closed-form `E(D̄)` per component.
pub fn expected_dbar(
    scheme: &DifferenceScheme,
    hyper: &VarianceHyperprior,
    m_moments: &[MMoment],
) -> Result<DVector<f64>> {
    let lookup: BTreeMap<(usize, usize), &MMoment> = m_moments
        .iter()
        .map(|m| ((m.component, m.index), m))
        .collect();
    let mut out = DVector::zeros(scheme.components.len());
    for e in &scheme.entries {
        let m = lookup
            .get(&(e.component, e.index))
            .ok_or(Error::MissingMoment {
                component: e.component,
                index: e.index,
            })?;
        let (k, l) = (e.k as f64, e.l as f64);
        let local = l * l * m.m1_sq + k * k * m.m2_sq - 2.0 * k * l * m.m1_m2;
        out[scheme.slot(e.component)] +=
            hyper.mu_wx * scheme.correlation_scale + local / e.weight;
    }
    Ok(out)
}

/// Observed `D̄` with the prior moments needed to adjust by it.
#[derive(Debug, Clone, PartialEq)]
pub struct DbarStatistic {
    pub values: DVector<f64>,
    pub expectation: DVector<f64>,
    pub cross_cov: DVector<f64>,
    pub variance: DMatrix<f64>,
}

impl DbarStatistic {
    pub fn new(
        values: DVector<f64>,
        expectation: DVector<f64>,
        cross_cov: DVector<f64>,
        variance: DMatrix<f64>,
    ) -> Result<Self> {
        let n = values.len();
        if expectation.len() != n || cross_cov.len() != n || variance.shape() != (n, n) {
            return Err(Error::shape(format!(
                "D̄ pieces disagree: values {n}, expectation {}, cross {}, variance {:?}",
                expectation.len(),
                cross_cov.len(),
                variance.shape()
            )));
        }
        if values.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidDesign("negative D̄ value".into()));
        }
        Ok(Self {
            values,
            expectation,
            cross_cov,
            variance,
        })
    }
}

/// Result of adjusting `M(W_X)` by `D̄`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WxAdjustment {
    pub prior_mean: f64,
    /// `E_D̄(M(W_X))`, floored at the variance floor.
    pub adjusted_mean: f64,
    /// Value before flooring.
    pub raw_mean: f64,
    pub adjusted_variance: f64,
    pub floored: bool,
}

/// `E_D̄(M(W_X))` and its adjusted variance.
pub fn adjust_wx(dbar: &DbarStatistic, hyper: &VarianceHyperprior) -> Result<WxAdjustment> {
    if dbar.values.is_empty() {
        return Err(Error::InsufficientData(
            "no component has three or more observations".into(),
        ));
    }
    let pair = MomentPair::new(dbar.expectation.clone(), dbar.variance.clone())?;
    let adjuster = Adjuster::new(&pair, DEFAULT_RTOL)?;
    let cross = DMatrix::from_row_slice(1, dbar.cross_cov.len(), dbar.cross_cov.as_slice());
    let w = adjuster.weighted_residual(&dbar.values)?;
    let raw_mean = hyper.mu_wx + (&cross * w)[0];
    let resolved = (&cross * adjuster.inverse() * cross.transpose())[0];
    let adjusted_variance = (hyper.gamma_wx - resolved).max(0.0);
    let floored = raw_mean < VARIANCE_FLOOR;
    if floored {
        info!("adjusted M(W_X) = {raw_mean:e} is below the floor; using {VARIANCE_FLOOR:e}");
    }
    Ok(WxAdjustment {
        prior_mean: hyper.mu_wx,
        adjusted_mean: raw_mean.max(VARIANCE_FLOOR),
        raw_mean,
        adjusted_variance,
        floored,
    })
}
