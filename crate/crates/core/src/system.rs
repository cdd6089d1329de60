//! System topology, prior specification and the evolution covariance structure.
//!
//! Evolution errors of the component-level trend are correlated across
//! components through
//!
//! ```text
//! Π_cc' = ρ₀ + ρ_C δ_cc' + ρ_D exp(−ν s_cc')
//! ```
//!
//! where `δ_cc'` marks a shared circuit and `s_cc'` counts intervening
//! components along that circuit. Components on different circuits have no
//! along-circuit distance, so their decay term is zero.
//!
//! Per-component evolution variances follow a second-order exchangeable
//! representation `W_c = M(W) + R_c(W)`, and the evolution covariance is
//! `S_cc' = W_c^½ W_c'^½ Π_cc'`. The slope covariance is the level
//! covariance scaled by `λ`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bayes_linear::{min_relative_eigenvalue, PSD_RTOL};
use crate::error::{Error, Result};

/// Floor applied to every drawn variance so square roots stay real.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// One component of the system as listed in a topology file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub id: u32,
    pub circuit: u32,
    pub position: i64,
}

/// Components, their circuit membership and along-circuit positions.
///
/// Components are addressed internally by their index in construction order.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemTopology {
    components: Vec<ComponentSpec>,
}

impl SystemTopology {
    pub fn new(components: Vec<ComponentSpec>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidTopology("no components".into()));
        }
        let mut ids: Vec<u32> = components.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidTopology(format!(
                "component id {} listed twice",
                w[0]
            )));
        }
        Ok(Self { components })
    }

    /// `count` components split into consecutive circuits of the given sizes,
    /// ids starting at 1 and positions counting from 0 within each circuit.
    pub fn from_circuit_sizes(sizes: &[usize]) -> Result<Self> {
        let mut components = Vec::new();
        let mut id = 1;
        for (circuit, &size) in sizes.iter().enumerate() {
            for position in 0..size {
                components.push(ComponentSpec {
                    id,
                    circuit: circuit as u32 + 1,
                    position: position as i64,
                });
                id += 1;
            }
        }
        Self::new(components)
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[ComponentSpec] {
        &self.components
    }

    pub fn id(&self, index: usize) -> u32 {
        self.components[index].id
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.components.iter().position(|c| c.id == id)
    }

    pub fn circuit(&self, index: usize) -> u32 {
        self.components[index].circuit
    }

    pub fn same_circuit(&self, a: usize, b: usize) -> bool {
        self.components[a].circuit == self.components[b].circuit
    }

    /// Intervening-component distance, `None` across circuits.
    pub fn distance(&self, a: usize, b: usize) -> Option<u64> {
        if !self.same_circuit(a, b) {
            return None;
        }
        Some(self.components[a].position.abs_diff(self.components[b].position))
    }
}

/// Parameters of the three-term correlation structure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationParams {
    pub rho0: f64,
    pub rho_c: f64,
    pub rho_d: f64,
    /// Decay rate per component of along-circuit distance.
    pub nu: f64,
}

impl Default for CorrelationParams {
    fn default() -> Self {
        Self {
            rho0: 0.2,
            rho_c: 0.5,
            rho_d: 0.3,
            nu: 1.0,
        }
    }
}

impl CorrelationParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("rho0", self.rho0), ("rhoC", self.rho_c), ("rhoD", self.rho_d)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidPrior(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.rho0 + self.rho_c + self.rho_d > 1.0 + 1e-12 {
            return Err(Error::InvalidPrior(format!(
                "rho0 + rhoC + rhoD = {} exceeds 1",
                self.rho0 + self.rho_c + self.rho_d
            )));
        }
        if !(self.nu > 0.0) {
            return Err(Error::InvalidPrior(format!("nu = {} must be positive", self.nu)));
        }
        Ok(())
    }

    /// Correlation between two components given circuit sharing and distance.
    pub fn correlation(&self, same_circuit: bool, distance: Option<u64>) -> f64 {
        let circuit = if same_circuit { self.rho_c } else { 0.0 };
        let decay = distance.map_or(0.0, |s| self.rho_d * (-self.nu * s as f64).exp());
        self.rho0 + circuit + decay
    }
}

/// Assembles `Π` over all components and checks it is PSD.
pub fn build_correlation(
    topology: &SystemTopology,
    corr: &CorrelationParams,
) -> Result<DMatrix<f64>> {
    corr.validate()?;
    let n = topology.len();
    let pi = DMatrix::from_fn(n, n, |a, b| {
        corr.correlation(topology.same_circuit(a, b), topology.distance(a, b))
    });
    let eig = SymmetricEigen::new(pi.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min < -PSD_RTOL * max.abs() {
        return Err(Error::InvalidCorrelation {
            min_eigenvalue: min,
            max_eigenvalue: max,
        });
    }
    Ok(pi)
}

/// Second-order prior for the per-component level evolution variances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceHyperprior {
    /// Prior mean of the population variance `M(W_X)` (mm²/month).
    pub mu_wx: f64,
    /// Prior variance of a single component's `W_Xc`.
    pub sigma_wx: f64,
    /// Prior variance of `M(W_X)`, i.e. covariance of two distinct `W_Xc`.
    pub gamma_wx: f64,
    /// Ratio of slope to level population variance.
    pub lambda: f64,
}

impl Default for VarianceHyperprior {
    fn default() -> Self {
        Self {
            mu_wx: 0.1 * 0.1,
            sigma_wx: 1e-3,
            gamma_wx: 5e-4,
            lambda: 0.02,
        }
    }
}

impl VarianceHyperprior {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu_wx > 0.0) {
            return Err(Error::InvalidPrior(format!("mu_WX = {} must be positive", self.mu_wx)));
        }
        if !(self.sigma_wx >= 0.0 && self.gamma_wx >= 0.0 && self.lambda >= 0.0) {
            return Err(Error::InvalidPrior(
                "sigma_WX, gamma_WX and lambda must be non-negative".into(),
            ));
        }
        if self.gamma_wx > self.sigma_wx {
            return Err(Error::InvalidPrior(format!(
                "gamma_WX = {} exceeds sigma_WX = {}",
                self.gamma_wx, self.sigma_wx
            )));
        }
        Ok(())
    }

    /// Same spread, different population mean.
    pub fn with_mean(&self, mu_wx: f64) -> Self {
        Self { mu_wx, ..*self }
    }
}

/// Distributional form used when drawing variances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperDistribution {
    /// `M ~ LN` matched to (μ, Γ); `W_c = M·U_c` with `U_c ~ LN` of mean one.
    #[default]
    LogNormal,
    /// Gaussian `M` and `R_c`, each `W_c` truncated at [`VARIANCE_FLOOR`].
    TruncatedGaussian,
}

/// One draw of the exchangeable variance structure.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceDraw {
    /// `M(W_X)`.
    pub population_mean: f64,
    /// `W_Xc = M(W_X) + R_c(W_X)` per component, floored.
    pub component: Vec<f64>,
}

impl VarianceDraw {
    /// Every component at exactly `value`.
    pub fn constant(value: f64, components: usize) -> Self {
        Self {
            population_mean: value,
            component: vec![value; components],
        }
    }
}

fn lognormal_with_moments(mean: f64, variance: f64) -> Option<LogNormal<f64>> {
    if variance <= 0.0 {
        return None;
    }
    let s2 = (1.0 + variance / (mean * mean)).ln();
    LogNormal::new(mean.ln() - 0.5 * s2, s2.sqrt()).ok()
}

impl HyperDistribution {
    /// Draws `M(W_X)` from its prior and then the component variances.
    pub fn draw<R: Rng + ?Sized>(
        &self,
        hyper: &VarianceHyperprior,
        components: usize,
        rng: &mut R,
    ) -> VarianceDraw {
        let m = match self {
            HyperDistribution::LogNormal => lognormal_with_moments(hyper.mu_wx, hyper.gamma_wx)
                .map_or(hyper.mu_wx, |d| d.sample(rng)),
            HyperDistribution::TruncatedGaussian => {
                let z: f64 = rng.sample(StandardNormal);
                hyper.mu_wx + hyper.gamma_wx.sqrt() * z
            }
        };
        self.draw_given_mean(hyper, m, components, rng)
    }

    /// Draws component variances around a fixed population mean.
    ///
    /// The residual spread keeps `var(R_c) = Σ − Γ` under the prior.
    pub fn draw_given_mean<R: Rng + ?Sized>(
        &self,
        hyper: &VarianceHyperprior,
        population_mean: f64,
        components: usize,
        rng: &mut R,
    ) -> VarianceDraw {
        let resid = (hyper.sigma_wx - hyper.gamma_wx).max(0.0);
        let component = match self {
            HyperDistribution::LogNormal => {
                // var(M·U) − var(M) = E(M²) var(U) = Σ − Γ.
                let second = hyper.gamma_wx + hyper.mu_wx * hyper.mu_wx;
                let dist = lognormal_with_moments(1.0, resid / second);
                (0..components)
                    .map(|_| {
                        let u = dist.map_or(1.0, |d| d.sample(rng));
                        (population_mean * u).max(VARIANCE_FLOOR)
                    })
                    .collect()
            }
            HyperDistribution::TruncatedGaussian => (0..components)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    (population_mean + resid.sqrt() * z).max(VARIANCE_FLOOR)
                })
                .collect(),
        };
        VarianceDraw {
            population_mean,
            component,
        }
    }
}

/// `S_cc' = W_c^½ W_c'^½ Π_cc'`.
pub fn assemble_covariance(variances: &[f64], pi: &DMatrix<f64>) -> DMatrix<f64> {
    let d: Vec<f64> = variances.iter().map(|w| w.max(VARIANCE_FLOOR).sqrt()).collect();
    DMatrix::from_fn(pi.nrows(), pi.ncols(), |a, b| d[a] * d[b] * pi[(a, b)])
}

/// A drawn pair of level and slope evolution covariances.
#[derive(Debug, Clone)]
pub struct VarianceMatrices {
    pub draw: VarianceDraw,
    pub s_x: DMatrix<f64>,
    pub s_alpha: DMatrix<f64>,
}

/// Draws `S_X` and `S_α = λ S_X` from the hyperprior.
pub fn sample_variance_matrices<R: Rng + ?Sized>(
    hyper: &VarianceHyperprior,
    pi: &DMatrix<f64>,
    distribution: HyperDistribution,
    rng: &mut R,
) -> Result<VarianceMatrices> {
    hyper.validate()?;
    let draw = distribution.draw(hyper, pi.nrows(), rng);
    let s_x = assemble_covariance(&draw.component, pi);
    if min_relative_eigenvalue(&s_x) < -PSD_RTOL {
        return Err(Error::DegenerateVariance(
            "drawn S_X is not positive semi-definite".into(),
        ));
    }
    let s_alpha = &s_x * hyper.lambda;
    Ok(VarianceMatrices { draw, s_x, s_alpha })
}

/// A lower factor `F` with `F Fᵀ = Π`; Cholesky when possible, otherwise the
/// eigen square root with negative round-off eigenvalues clipped to zero.
pub fn correlation_factor(pi: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = pi.clone().cholesky() {
        return ch.l();
    }
    let eig = SymmetricEigen::new(pi.clone());
    let sqrt = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()),
    );
    eig.eigenvectors * DMatrix::from_diagonal(&sqrt)
}

/// Noise distribution used for every simulated error term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    Gaussian,
    /// Student-t rescaled to unit variance; `df` must be at least 5.
    StudentT { df: f64 },
}

impl NoiseKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseKind::Gaussian => Ok(()),
            NoiseKind::StudentT { df } if df >= 5.0 => Ok(()),
            NoiseKind::StudentT { df } => Err(Error::InvalidPrior(format!(
                "Student-t noise needs at least 5 degrees of freedom, got {df}"
            ))),
        }
    }
}

/// Whether variance matrices are redrawn for every realization of an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceSampling {
    #[default]
    PerRealization,
    PerEnsemble,
}

/// How ensemble moments are assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentMethod {
    /// Global-trend second moments in closed form, local effects simulated.
    #[default]
    Structured,
    /// Plain joint sample moments of every simulated quantity.
    Ensemble,
}

/// Complete prior specification for a system analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpecification {
    pub hyper: VarianceHyperprior,
    pub corr: CorrelationParams,
    /// Measurement error variance per location (mm²).
    pub sigma_y: f64,
    /// Local-effect evolution variance currently in use (mm²/month).
    pub sigma_r: f64,
    /// Candidate local variances for calibration, strictly increasing.
    pub sigma_r_candidates: Vec<f64>,
    pub locations_per_component: usize,
    /// Initial wall thickness per component (mm).
    pub x0: Vec<f64>,
    /// Initial corrosion rate per component (mm/month).
    pub alpha0: Vec<f64>,
    pub ensemble_size: usize,
    pub critical_thickness: f64,
    pub rng_seed: u64,
    pub hyper_distribution: HyperDistribution,
    pub noise: NoiseKind,
    pub variance_sampling: VarianceSampling,
    pub moment_method: MomentMethod,
}

/// `count` log-spaced values spanning `[lo, hi]`.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

impl PriorSpecification {
    /// Offshore-platform prior values with uniform starting state.
    pub fn offshore(components: usize, x0: f64, alpha0: f64) -> Self {
        let hyper = VarianceHyperprior::default();
        Self {
            hyper,
            corr: CorrelationParams::default(),
            sigma_y: 0.16 * 0.16,
            sigma_r: 0.1 * 0.1,
            sigma_r_candidates: log_spaced(hyper.mu_wx / 25.0, hyper.mu_wx * 25.0, 12),
            locations_per_component: 10,
            x0: vec![x0; components],
            alpha0: vec![alpha0; components],
            ensemble_size: 1000,
            critical_thickness: 4.0,
            rng_seed: 20_240_601,
            hyper_distribution: HyperDistribution::LogNormal,
            noise: NoiseKind::Gaussian,
            variance_sampling: VarianceSampling::PerRealization,
            moment_method: MomentMethod::Structured,
        }
    }

    pub fn components(&self) -> usize {
        self.x0.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.corr.validate()?;
        self.noise.validate()?;
        if !(self.sigma_y >= 0.0 && self.sigma_r >= 0.0) {
            return Err(Error::InvalidPrior("sigma_y and sigma_r must be non-negative".into()));
        }
        if self.sigma_r_candidates.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidPrior("sigma_r candidates must be positive".into()));
        }
        if self.sigma_r_candidates.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidPrior(
                "sigma_r candidates must be strictly increasing".into(),
            ));
        }
        if self.locations_per_component == 0 {
            return Err(Error::InvalidPrior("locations per component must be at least 1".into()));
        }
        if self.alpha0.len() != self.x0.len() {
            return Err(Error::InvalidPrior(format!(
                "x0 has {} entries but alpha0 has {}",
                self.x0.len(),
                self.alpha0.len()
            )));
        }
        if self.ensemble_size < 2 {
            return Err(Error::InvalidPrior("ensemble size must be at least 2".into()));
        }
        Ok(())
    }

    pub fn with_sigma_r(&self, sigma_r: f64) -> Self {
        Self {
            sigma_r,
            ..self.clone()
        }
    }

    pub fn with_mu_wx(&self, mu_wx: f64) -> Self {
        Self {
            hyper: self.hyper.with_mean(mu_wx),
            ..self.clone()
        }
    }
}

/// A single inspection: minimum thickness of one component at one month.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InspectionRecord {
    /// Component index into the topology.
    pub component: usize,
    /// Month index, 1-based.
    pub time: usize,
    pub thickness: f64,
}

/// Irregular, partial inspections of a system over `horizon` months.
///
/// Records are kept sorted by `(component, time)`; that order defines the
/// layout of every observation vector in the crate.
#[derive(Debug, Clone, PartialEq)]
pub struct InspectionDataset {
    horizon: usize,
    records: Vec<InspectionRecord>,
}

impl InspectionDataset {
    pub fn new(horizon: usize, mut records: Vec<InspectionRecord>) -> Self {
        records.sort_by_key(|r| (r.component, r.time));
        Self { horizon, records }
    }

    /// A design with no thickness values (all zero).
    pub fn design(horizon: usize, points: impl IntoIterator<Item = (usize, usize)>) -> Self {
        Self::new(
            horizon,
            points
                .into_iter()
                .map(|(component, time)| InspectionRecord {
                    component,
                    time,
                    thickness: 0.0,
                })
                .collect(),
        )
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn records(&self) -> &[InspectionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn values(&self) -> DVector<f64> {
        DVector::from_iterator(self.records.len(), self.records.iter().map(|r| r.thickness))
    }

    /// Same design with new thickness values, in record order.
    pub fn with_values(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.records.len() {
            return Err(Error::shape(format!(
                "{} values for {} records",
                values.len(),
                self.records.len()
            )));
        }
        let records = self
            .records
            .iter()
            .zip(values)
            .map(|(r, &thickness)| InspectionRecord { thickness, ..*r })
            .collect();
        Ok(Self {
            horizon: self.horizon,
            records,
        })
    }

    pub fn with_horizon(&self, horizon: usize) -> Self {
        Self {
            horizon,
            records: self.records.clone(),
        }
    }

    /// Sorted observation times of one component.
    pub fn times_of(&self, component: usize) -> Vec<usize> {
        self.records
            .iter()
            .filter(|r| r.component == component)
            .map(|r| r.time)
            .collect()
    }

    /// Records restricted to a subset, keeping the horizon.
    pub fn filter(&self, keep: impl Fn(&InspectionRecord) -> bool) -> Self {
        Self {
            horizon: self.horizon,
            records: self.records.iter().copied().filter(|r| keep(r)).collect(),
        }
    }
}

/// A violated dataset invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Finding {
    Duplicate { component: usize, time: usize },
    TimeOutOfRange { component: usize, time: usize, horizon: usize },
    UnknownComponent { component: usize, time: usize },
    NonFiniteValue { component: usize, time: usize },
}

impl std::fmt::Display for Finding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Finding::Duplicate { component, time } => {
                write!(f, "duplicate record for component {component} at month {time}")
            }
            Finding::TimeOutOfRange { component, time, horizon } => write!(
                f,
                "component {component}: month {time} outside 1..={horizon}"
            ),
            Finding::UnknownComponent { component, time } => {
                write!(f, "unknown component index {component} (month {time})")
            }
            Finding::NonFiniteValue { component, time } => {
                write!(f, "non-finite thickness for component {component} at month {time}")
            }
        }
    }
}

/// Lists every invariant violation; empty when the dataset is well formed.
pub fn validate_dataset(dataset: &InspectionDataset, topology: &SystemTopology) -> Vec<Finding> {
    let mut findings = Vec::new();
    for (i, r) in dataset.records.iter().enumerate() {
        if r.component >= topology.len() {
            findings.push(Finding::UnknownComponent {
                component: r.component,
                time: r.time,
            });
        }
        if r.time == 0 || r.time > dataset.horizon {
            findings.push(Finding::TimeOutOfRange {
                component: r.component,
                time: r.time,
                horizon: dataset.horizon,
            });
        }
        if !r.thickness.is_finite() {
            findings.push(Finding::NonFiniteValue {
                component: r.component,
                time: r.time,
            });
        }
        if i > 0 {
            let p = &dataset.records[i - 1];
            if p.component == r.component && p.time == r.time {
                findings.push(Finding::Duplicate {
                    component: r.component,
                    time: r.time,
                });
            }
        }
    }
    findings
}
