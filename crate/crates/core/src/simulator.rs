//! Forward simulation of the corrosion model and ensemble moment estimation.
//!
//! Per component `c` and month `t`:
//!
//! ```text
//! α_t = α_{t−1} + ε_α,t          ε_α ~ (0, S_α)
//! X_t = X_{t−1} + α_t + ε_X,t     ε_X ~ (0, S_X)
//! r_{l,t} = r_{l,t−1} + ε_r       ε_r ~ (0, Σ_r),  r_{l,0} = 0
//! Y_t = min_l (X_t + r_{l,t} + ε_y)
//! ```
//!
//! [`simulate_realization`] steps this month by month and keeps every noise
//! draw. [`EnsembleSampler`] produces the same joint law only at the months
//! that matter: with Gaussian noise the level, slope and local random walks
//! are advanced across gaps in one exact multivariate step. The observation
//! splits as `Y = X + M` with `M = min_l(r + ε_y)` independent of `X`, which
//! [`estimate_moments`] exploits: the global part has closed-form second
//! moments given `E[√(W_c W_c')]`, and the local part is block-diagonal by
//! component.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{BlockBuffer, Moments};
use crate::system::{
    build_correlation, correlation_factor, HyperDistribution, InspectionDataset, MomentMethod,
    NoiseKind, PriorSpecification, SystemTopology, VarianceDraw, VarianceSampling,
};
use crate::variance_learning::{build_scheme, DifferenceScheme, MMoment, SchemeEntry};

const BLOCK: usize = 256;

/// What a target refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    /// True minimum thickness over locations, `min_l(X + r)`.
    Zmin,
    /// Component-level thickness `X`.
    Thickness,
    /// Corrosion rate `α`.
    Rate,
}

impl Quantity {
    pub fn name(&self) -> &'static str {
        match self {
            Quantity::Zmin => "zmin",
            Quantity::Thickness => "thickness",
            Quantity::Rate => "rate",
        }
    }
}

/// A quantity at one component (index) and month.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Target {
    pub quantity: Quantity,
    pub component: usize,
    pub time: usize,
}

impl Target {
    pub fn new(quantity: Quantity, component: usize, time: usize) -> Self {
        Self {
            quantity,
            component,
            time,
        }
    }
}

/// Every `quantity` target for the given components over months `1..=horizon`.
pub fn trajectory_targets(quantity: Quantity, components: &[usize], horizon: usize) -> Vec<Target> {
    components
        .iter()
        .flat_map(|&c| (1..=horizon).map(move |t| Target::new(quantity, c, t)))
        .collect()
}

/// Stage seed derivation (splitmix64) so independent stages never share a stream.
pub fn derive_seed(seed: u64, stage: u64) -> u64 {
    let mut z = seed ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Prior, topology and the correlation matrix with its factor.
#[derive(Debug, Clone)]
pub struct SystemModel {
    prior: PriorSpecification,
    topology: SystemTopology,
    pi: DMatrix<f64>,
    factor: DMatrix<f64>,
}

impl SystemModel {
    pub fn new(prior: PriorSpecification, topology: SystemTopology) -> Result<Self> {
        prior.validate()?;
        if prior.components() != topology.len() {
            return Err(Error::InvalidPrior(format!(
                "prior has starting values for {} components, topology has {}",
                prior.components(),
                topology.len()
            )));
        }
        let pi = build_correlation(&topology, &prior.corr)?;
        let factor = correlation_factor(&pi);
        Ok(Self {
            prior,
            topology,
            pi,
            factor,
        })
    }

    /// Same topology under a new prior; the factor is reused when the
    /// correlation parameters are unchanged.
    pub fn with_prior(&self, prior: PriorSpecification) -> Result<Self> {
        if prior.corr != self.prior.corr || prior.components() != self.topology.len() {
            return Self::new(prior, self.topology.clone());
        }
        prior.validate()?;
        Ok(Self {
            prior,
            topology: self.topology.clone(),
            pi: self.pi.clone(),
            factor: self.factor.clone(),
        })
    }

    pub fn prior(&self) -> &PriorSpecification {
        &self.prior
    }

    pub fn topology(&self) -> &SystemTopology {
        &self.topology
    }

    pub fn correlation(&self) -> &DMatrix<f64> {
        &self.pi
    }

    pub fn components(&self) -> usize {
        self.topology.len()
    }

    /// Prior mean thickness `x0 + α0·t`.
    pub fn mean_thickness(&self, component: usize, time: usize) -> f64 {
        self.prior.x0[component] + self.prior.alpha0[component] * time as f64
    }
}

#[derive(Debug, Clone, Copy)]
enum NoiseSource {
    Gaussian,
    StudentT(StudentT<f64>, f64),
}

impl NoiseSource {
    fn new(kind: NoiseKind) -> Self {
        match kind {
            NoiseKind::Gaussian => NoiseSource::Gaussian,
            NoiseKind::StudentT { df } => NoiseSource::StudentT(
                StudentT::new(df).expect("validated degrees of freedom"),
                ((df - 2.0) / df).sqrt(),
            ),
        }
    }

    fn is_gaussian(&self) -> bool {
        matches!(self, NoiseSource::Gaussian)
    }

    /// Zero-mean, unit-variance draw.
    #[inline]
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            NoiseSource::Gaussian => rng.sample(StandardNormal),
            NoiseSource::StudentT(d, scale) => d.sample(rng) * scale,
        }
    }
}

/// Every stored error term of an explicit realization.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizationNoise {
    /// `ε_X`, C × T.
    pub eps_x: DMatrix<f64>,
    /// `ε_α`, C × T.
    pub eps_alpha: DMatrix<f64>,
    /// `ε_r` per location, each C × T.
    pub eps_r: Vec<DMatrix<f64>>,
    /// `ε_y` per design record, one value per location.
    pub eps_y: Vec<Vec<f64>>,
}

/// One full trajectory of the system; column `t − 1` holds month `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleRealization {
    pub x: DMatrix<f64>,
    pub alpha: DMatrix<f64>,
    /// Local effects per location, each C × T.
    pub r: Vec<DMatrix<f64>>,
    /// Observations aligned with the design's records.
    pub y: Vec<f64>,
    pub zmin: DMatrix<f64>,
    pub variances: VarianceDraw,
    pub noise: RealizationNoise,
}

impl EnsembleRealization {
    pub fn horizon(&self) -> usize {
        self.x.ncols()
    }

    /// Writes `t,c,X,Zmin` rows (component ids from the topology).
    pub fn write_csv<W: Write>(&self, mut w: W, topology: &SystemTopology) -> std::io::Result<()> {
        writeln!(w, "t,c,X,Zmin")?;
        for t in 0..self.horizon() {
            for c in 0..self.x.nrows() {
                writeln!(
                    w,
                    "{},{},{},{}",
                    t + 1,
                    topology.id(c),
                    self.x[(c, t)],
                    self.zmin[(c, t)]
                )?;
            }
        }
        Ok(())
    }
}

/// Explicit month-by-month realization with variances drawn from the prior.
pub fn simulate_realization<R: Rng + ?Sized>(
    model: &SystemModel,
    design: &InspectionDataset,
    rng: &mut R,
) -> EnsembleRealization {
    let prior = model.prior();
    let draw = prior
        .hyper_distribution
        .draw(&prior.hyper, model.components(), rng);
    simulate_with_variances(model, design, draw, prior.sigma_r, rng)
}

/// Explicit realization for given per-component variances and local variance.
pub fn simulate_with_variances<R: Rng + ?Sized>(
    model: &SystemModel,
    design: &InspectionDataset,
    variances: VarianceDraw,
    sigma_r: f64,
    rng: &mut R,
) -> EnsembleRealization {
    let prior = model.prior();
    let cn = model.components();
    let horizon = design.horizon();
    let locations = prior.locations_per_component;
    let noise = NoiseSource::new(prior.noise);
    let sd: DVector<f64> = DVector::from_iterator(cn, variances.component.iter().map(|w| w.sqrt()));
    let sqrt_lambda = prior.hyper.lambda.sqrt();
    let (sr, sy) = (sigma_r.sqrt(), prior.sigma_y.sqrt());

    let mut by_time: Vec<Vec<usize>> = vec![Vec::new(); horizon + 1];
    for (i, rec) in design.records().iter().enumerate() {
        by_time[rec.time].push(i);
    }

    let mut x = DMatrix::zeros(cn, horizon);
    let mut alpha = DMatrix::zeros(cn, horizon);
    let mut zmin = DMatrix::zeros(cn, horizon);
    let mut r = vec![DMatrix::zeros(cn, horizon); locations];
    let mut eps_x = DMatrix::zeros(cn, horizon);
    let mut eps_alpha = DMatrix::zeros(cn, horizon);
    let mut eps_r = vec![DMatrix::zeros(cn, horizon); locations];
    let mut eps_y = vec![Vec::new(); design.len()];
    let mut y = vec![0.0; design.len()];

    let mut x_prev = DVector::from_column_slice(&prior.x0);
    let mut a_prev = DVector::from_column_slice(&prior.alpha0);
    let mut r_prev = vec![DVector::<f64>::zeros(cn); locations];
    for t in 1..=horizon {
        let col = t - 1;
        let z = DVector::from_fn(cn, |_, _| noise.sample(rng));
        let zp = DVector::from_fn(cn, |_, _| noise.sample(rng));
        let ex = (&model.factor * z).component_mul(&sd);
        let ea = (&model.factor * zp).component_mul(&sd) * sqrt_lambda;
        let a_now = &a_prev + &ea;
        let x_now = &x_prev + &a_now + &ex;
        eps_x.set_column(col, &ex);
        eps_alpha.set_column(col, &ea);
        alpha.set_column(col, &a_now);
        x.set_column(col, &x_now);
        for l in 0..locations {
            for c in 0..cn {
                let e = sr * noise.sample(rng);
                eps_r[l][(c, col)] = e;
                r_prev[l][c] += e;
                r[l][(c, col)] = r_prev[l][c];
            }
        }
        for c in 0..cn {
            zmin[(c, col)] = (0..locations)
                .map(|l| x_now[c] + r_prev[l][c])
                .fold(f64::INFINITY, f64::min);
        }
        for &i in &by_time[t] {
            let c = design.records()[i].component;
            let ey: Vec<f64> = (0..locations).map(|_| sy * noise.sample(rng)).collect();
            y[i] = (0..locations)
                .map(|l| x_now[c] + r_prev[l][c] + ey[l])
                .fold(f64::INFINITY, f64::min);
            eps_y[i] = ey;
        }
        x_prev = x_now;
        a_prev = a_now;
    }
    EnsembleRealization {
        x,
        alpha,
        r,
        y,
        zmin,
        variances,
        noise: RealizationNoise {
            eps_x,
            eps_alpha,
            eps_r,
            eps_y,
        },
    }
}

/// Data-generating values for synthetic studies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    /// Population mean evolution variance `M(W_X)`.
    pub mu_wx: f64,
    /// Local-effect evolution variance `Σ_r`.
    pub sigma_r: f64,
}

/// Synthetic inspections on `design` with `M(W_X)` fixed at the truth and
/// component variances drawn around it.
pub fn simulate_dataset<R: Rng + ?Sized>(
    model: &SystemModel,
    design: &InspectionDataset,
    truth: &Truth,
    rng: &mut R,
) -> Result<(InspectionDataset, EnsembleRealization)> {
    let prior = model.prior();
    let draw = prior.hyper_distribution.draw_given_mean(
        &prior.hyper,
        truth.mu_wx,
        model.components(),
        rng,
    );
    let real = simulate_with_variances(model, design, draw, truth.sigma_r, rng);
    let data = design.with_values(&real.y)?;
    Ok((data, real))
}

/// Design with `extra_months` appended to the horizon.
pub fn forecast_extend(design: &InspectionDataset, extra_months: usize) -> InspectionDataset {
    design.with_horizon(design.horizon() + extra_months)
}

#[derive(Debug, Clone, Copy)]
struct LocalStep {
    time: usize,
    record: Option<usize>,
    zmin_slot: Option<usize>,
}

/// Global increments over a gap of `g` months: `(√g, L21, L22)` for the
/// joint law of the slope walk increment and the integrated-slope remainder.
fn gap_factor(g: usize) -> (f64, f64, f64) {
    let g = g as f64;
    let l11 = g.sqrt();
    let l21 = (g + 1.0) * g.sqrt() / 2.0;
    let l22 = (g * (g * g - 1.0) / 12.0).max(0.0).sqrt();
    (l11, l21, l22)
}

/// One realization as produced by [`EnsembleSampler`].
#[derive(Debug, Clone)]
pub struct RealizationDraw {
    pub variances: VarianceDraw,
    /// `X − x0 − α0·t` at the sampler's global months, C × G.
    pub x_noise: DMatrix<f64>,
    /// `α − α0` at the global months, C × G.
    pub alpha_noise: DMatrix<f64>,
    /// `min_l(r + ε_y)` per design record.
    pub local_obs: Vec<f64>,
    /// `min_l r` per minimum-thickness slot.
    pub local_zmin: Vec<f64>,
}

/// Draws realizations only at the months needed by a design and target set.
///
/// Realization `i` uses ChaCha streams `2i` (global) and `2i + 1` (local), so
/// any subset of realizations can be drawn independently and ensembles that
/// differ only in scale parameters share their random numbers.
#[derive(Debug, Clone)]
pub struct EnsembleSampler<'a> {
    model: &'a SystemModel,
    design: &'a InspectionDataset,
    seed: u64,
    grid: Vec<usize>,
    slot_of_time: Vec<Option<usize>>,
    gaps: Vec<(usize, (f64, f64, f64))>,
    local: Vec<Vec<LocalStep>>,
    zmin_slots: Vec<Vec<(usize, usize)>>,
    zmin_count: usize,
    fixed_draw: Option<VarianceDraw>,
    noise: NoiseSource,
}

impl<'a> EnsembleSampler<'a> {
    /// `global_times` are the months at which `X` and `α` are needed;
    /// `zmin_points` the `(component, month)` pairs needing `min_l r`.
    pub fn new(
        model: &'a SystemModel,
        design: &'a InspectionDataset,
        global_times: &BTreeSet<usize>,
        zmin_points: &BTreeSet<(usize, usize)>,
        seed: u64,
    ) -> Result<Self> {
        let horizon = design.horizon();
        let cn = model.components();
        for &t in global_times {
            if t == 0 || t > horizon {
                return Err(Error::InvalidDesign(format!("month {t} outside 1..={horizon}")));
            }
        }
        for &(c, t) in zmin_points {
            if c >= cn || t == 0 || t > horizon {
                return Err(Error::InvalidDesign(format!(
                    "target (component {c}, month {t}) outside the system or 1..={horizon}"
                )));
            }
        }
        for r in design.records() {
            if r.component >= cn || r.time == 0 || r.time > horizon {
                return Err(Error::InvalidDesign(format!(
                    "record (component {}, month {}) outside the system or 1..={horizon}",
                    r.component, r.time
                )));
            }
        }
        let noise = NoiseSource::new(model.prior().noise);
        let monthly = !noise.is_gaussian();

        let grid: Vec<usize> = match (monthly, global_times.last()) {
            (true, Some(&last)) => (1..=last).collect(),
            _ => global_times.iter().copied().collect(),
        };
        let mut slot_of_time = vec![None; horizon + 1];
        for (j, &t) in grid.iter().enumerate() {
            slot_of_time[t] = Some(j);
        }
        let mut prev = 0;
        let gaps = grid
            .iter()
            .map(|&t| {
                let g = t - prev;
                prev = t;
                (g, gap_factor(g))
            })
            .collect();

        let mut zmin_slots: Vec<Vec<(usize, usize)>> = vec![Vec::new(); cn];
        for (slot, &(c, t)) in zmin_points.iter().enumerate() {
            zmin_slots[c].push((t, slot));
        }
        let mut local = Vec::with_capacity(cn);
        let mut obs: Vec<Vec<(usize, usize)>> = vec![Vec::new(); cn];
        for (i, r) in design.records().iter().enumerate() {
            obs[r.component].push((r.time, i));
        }
        for c in 0..cn {
            let mut steps: Vec<LocalStep> = Vec::new();
            let needed: BTreeSet<usize> = obs[c]
                .iter()
                .map(|p| p.0)
                .chain(zmin_slots[c].iter().map(|p| p.0))
                .collect();
            let times: Vec<usize> = match (monthly, needed.last()) {
                (true, Some(&last)) => (1..=last).collect(),
                _ => needed.into_iter().collect(),
            };
            for t in times {
                let record = obs[c].iter().find(|p| p.0 == t).map(|p| p.1);
                let zmin_slot = zmin_slots[c].iter().find(|p| p.0 == t).map(|p| p.1);
                steps.push(LocalStep {
                    time: t,
                    record,
                    zmin_slot,
                });
            }
            local.push(steps);
        }

        let prior = model.prior();
        let fixed_draw = match prior.variance_sampling {
            VarianceSampling::PerRealization => None,
            VarianceSampling::PerEnsemble => Some(prior.hyper_distribution.draw(
                &prior.hyper,
                cn,
                &mut stream(seed, u64::MAX),
            )),
        };
        Ok(Self {
            model,
            design,
            seed,
            grid,
            slot_of_time,
            gaps,
            local,
            zmin_slots,
            zmin_count: zmin_points.len(),
            fixed_draw,
            noise,
        })
    }

    pub fn model(&self) -> &SystemModel {
        self.model
    }

    pub fn design(&self) -> &InspectionDataset {
        self.design
    }

    /// Months at which the global state is sampled.
    pub fn grid(&self) -> &[usize] {
        &self.grid
    }

    pub fn slot(&self, time: usize) -> Option<usize> {
        self.slot_of_time.get(time).copied().flatten()
    }

    /// Index of `(component, time)` in [`RealizationDraw::local_zmin`].
    pub fn zmin_slot(&self, component: usize, time: usize) -> Option<usize> {
        self.zmin_slots
            .get(component)?
            .iter()
            .find(|p| p.0 == time)
            .map(|p| p.1)
    }

    pub fn zmin_count(&self) -> usize {
        self.zmin_count
    }

    pub fn draw(&self, index: u64) -> RealizationDraw {
        let prior = self.model.prior();
        let cn = self.model.components();
        let mut rng = stream(self.seed, 2 * index);
        let variances = match &self.fixed_draw {
            Some(d) => d.clone(),
            None => prior.hyper_distribution.draw(&prior.hyper, cn, &mut rng),
        };

        let g = self.grid.len();
        let (mut x_noise, mut alpha_noise) = (DMatrix::zeros(cn, g), DMatrix::zeros(cn, g));
        if g > 0 {
            let sqrt_lambda = prior.hyper.lambda.sqrt();
            let mut s = vec![0.0; cn];
            let mut a = vec![0.0; cn];
            let mut b = vec![0.0; cn];
            let mut raw_x = DMatrix::zeros(cn, g);
            let mut raw_a = DMatrix::zeros(cn, g);
            for (j, &(gap, (l11, l21, l22))) in self.gaps.iter().enumerate() {
                let gf = gap as f64;
                for c in 0..cn {
                    let u0 = self.noise.sample(&mut rng);
                    let u1 = self.noise.sample(&mut rng);
                    let u2 = self.noise.sample(&mut rng);
                    b[c] += gf * a[c] + l21 * u1 + l22 * u2;
                    a[c] += l11 * u1;
                    s[c] += l11 * u0;
                    raw_x[(c, j)] = s[c] + sqrt_lambda * b[c];
                    raw_a[(c, j)] = sqrt_lambda * a[c];
                }
            }
            x_noise = &self.model.factor * raw_x;
            alpha_noise = &self.model.factor * raw_a;
            for c in 0..cn {
                let d = variances.component[c].sqrt();
                x_noise.row_mut(c).scale_mut(d);
                alpha_noise.row_mut(c).scale_mut(d);
            }
        }

        let mut rng = stream(self.seed, 2 * index + 1);
        let locations = prior.locations_per_component;
        let sy = prior.sigma_y.sqrt();
        let mut local_obs = vec![0.0; self.design.len()];
        let mut local_zmin = vec![0.0; self.zmin_count];
        let mut r = vec![0.0; locations];
        for steps in &self.local {
            r.iter_mut().for_each(|v| *v = 0.0);
            let mut prev = 0;
            for step in steps {
                let sd = (prior.sigma_r * (step.time - prev) as f64).sqrt();
                prev = step.time;
                for v in r.iter_mut() {
                    *v += sd * self.noise.sample(&mut rng);
                }
                if let Some(i) = step.record {
                    local_obs[i] = r
                        .iter()
                        .map(|v| v + sy * self.noise.sample(&mut rng))
                        .fold(f64::INFINITY, f64::min);
                }
                if let Some(k) = step.zmin_slot {
                    local_zmin[k] = r.iter().copied().fold(f64::INFINITY, f64::min);
                }
            }
        }
        RealizationDraw {
            variances,
            x_noise,
            alpha_noise,
            local_obs,
            local_zmin,
        }
    }

    fn x_noise_at(&self, d: &RealizationDraw, component: usize, time: usize) -> f64 {
        let j = self
            .slot(time)
            .unwrap_or_else(|| panic!("month {time} not on the sampler grid"));
        d.x_noise[(component, j)]
    }

    /// `Y − x0 − α0·t` per record; records off the global grid are zero.
    pub fn observation_noise(&self, d: &RealizationDraw) -> Vec<f64> {
        self.design
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| match self.slot(r.time) {
                Some(j) => d.x_noise[(r.component, j)] + d.local_obs[i],
                None => 0.0,
            })
            .collect()
    }

    /// Full simulated observation vector.
    pub fn observations(&self, d: &RealizationDraw) -> Vec<f64> {
        self.design
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| {
                self.model.mean_thickness(r.component, r.time)
                    + self.x_noise_at(d, r.component, r.time)
                    + d.local_obs[i]
            })
            .collect()
    }

    pub fn target_value(&self, d: &RealizationDraw, target: &Target) -> f64 {
        let (c, t) = (target.component, target.time);
        match target.quantity {
            Quantity::Thickness => self.model.mean_thickness(c, t) + self.x_noise_at(d, c, t),
            Quantity::Rate => {
                let j = self.slot(t).expect("rate target off the sampler grid");
                self.model.prior().alpha0[c] + d.alpha_noise[(c, j)]
            }
            Quantity::Zmin => {
                let k = self.zmin_slot(c, t).expect("minimum-thickness target without a slot");
                self.model.mean_thickness(c, t) + self.x_noise_at(d, c, t) + d.local_zmin[k]
            }
        }
    }
}

/// Simulated moments of `D̄` under the prior.
#[derive(Debug, Clone, PartialEq)]
pub struct DbarMoments {
    pub mean: DVector<f64>,
    pub variance: DMatrix<f64>,
    /// Sample `cov(M(W_X), D̄_c)` from the drawn population means.
    pub cov_population_mean: DVector<f64>,
}

/// Ensemble moments used by every adjustment.
#[derive(Debug, Clone)]
pub struct MomentEstimates {
    pub n_realizations: usize,
    pub e_y: DVector<f64>,
    pub var_y: DMatrix<f64>,
    pub targets: Vec<Target>,
    pub e_targets: DVector<f64>,
    pub var_targets: DVector<f64>,
    /// `cov(target, Y)`, targets by observations.
    pub cov_targets_y: DMatrix<f64>,
    pub scheme: DifferenceScheme,
    /// Local-difference moments per scheme entry.
    pub m_moments: Vec<MMoment>,
    pub dbar: Option<DbarMoments>,
}

/// Which optional pieces [`estimate_moments_with`] computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MomentOptions {
    pub dbar: bool,
}

impl Default for MomentOptions {
    fn default() -> Self {
        Self { dbar: true }
    }
}

/// `cov(B_t, B_s)` for the integrated standard random walk `B_t = Σ_{u≤t} A_u`.
pub fn integrated_walk_cov(t: usize, s: usize) -> f64 {
    let (t, s) = (t.max(s) as f64, t.min(s) as f64);
    t * s * (s + 1.0) / 2.0 - s * (s + 1.0) * (2.0 * s + 1.0) / 12.0 + s * (s + 1.0) / 4.0
}

/// `cov(A_t, B_s) = Σ_{w≤s} min(t, w)`.
fn walk_integrated_cov(t: usize, s: usize) -> f64 {
    let (t, s) = (t as f64, s as f64);
    if s <= t {
        s * (s + 1.0) / 2.0
    } else {
        t * (t + 1.0) / 2.0 + t * (s - t)
    }
}

/// Time kernel of the thickness noise per unit level variance.
pub fn thickness_kernel(t: usize, s: usize, lambda: f64) -> f64 {
    t.min(s) as f64 + lambda * integrated_walk_cov(t, s)
}

/// A symmetric function of two components that only distinguishes the
/// diagonal, or a full matrix.
#[derive(Debug, Clone)]
enum Pairwise {
    Exchangeable { diag: f64, off: f64 },
    Matrix(DMatrix<f64>),
}

impl Pairwise {
    fn get(&self, a: usize, b: usize) -> f64 {
        match self {
            Pairwise::Exchangeable { diag, off } => {
                if a == b {
                    *diag
                } else {
                    *off
                }
            }
            Pairwise::Matrix(m) => m[(a, b)],
        }
    }
}

/// Mixed moments of the component variances: `E[√(W_c W_c')]` and
/// `E[W_c W_c']`. The diagonal of `root` is `E[W_c]`.
#[derive(Debug, Clone)]
struct ScaleMoments {
    root: Pairwise,
    product: Pairwise,
}

fn closed_form_scale(prior: &PriorSpecification) -> Option<ScaleMoments> {
    if prior.variance_sampling != VarianceSampling::PerRealization
        || prior.hyper_distribution != HyperDistribution::LogNormal
    {
        return None;
    }
    let h = &prior.hyper;
    let resid = (h.sigma_wx - h.gamma_wx).max(0.0);
    let v = resid / (h.gamma_wx + h.mu_wx * h.mu_wx);
    let s2 = (1.0 + v).ln();
    let mu2 = h.mu_wx * h.mu_wx;
    Some(ScaleMoments {
        root: Pairwise::Exchangeable {
            diag: h.mu_wx,
            off: h.mu_wx * (-s2 / 4.0).exp(),
        },
        product: Pairwise::Exchangeable {
            diag: h.sigma_wx + mu2,
            off: h.gamma_wx + mu2,
        },
    })
}

#[derive(Debug, Clone)]
struct Partial {
    local: Vec<Moments>,
    dbar: Option<Moments>,
    joint: Option<Moments>,
    /// Squared local parts of the difference terms.
    local_sq: Option<Moments>,
    w: [f64; 4],
}

impl Partial {
    fn merge(mut self, other: &Partial) -> Self {
        for (a, b) in self.local.iter_mut().zip(&other.local) {
            *a = std::mem::replace(a, Moments::empty(0, 0)).merge(b);
        }
        if let (Some(a), Some(b)) = (self.dbar.take(), &other.dbar) {
            self.dbar = Some(a.merge(b));
        }
        if let (Some(a), Some(b)) = (self.joint.take(), &other.joint) {
            self.joint = Some(a.merge(b));
        }
        if let (Some(a), Some(b)) = (self.local_sq.take(), &other.local_sq) {
            self.local_sq = Some(a.merge(b));
        }
        for (a, b) in self.w.iter_mut().zip(other.w) {
            *a += b;
        }
        self
    }
}

/// Moments of the design's observations and the requested targets from `n`
/// realizations.
pub fn estimate_moments(
    model: &SystemModel,
    design: &InspectionDataset,
    targets: &[Target],
    n: usize,
    seed: u64,
) -> Result<MomentEstimates> {
    estimate_moments_with(model, design, targets, n, seed, MomentOptions::default())
}

pub fn estimate_moments_with(
    model: &SystemModel,
    design: &InspectionDataset,
    targets: &[Target],
    n: usize,
    seed: u64,
    options: MomentOptions,
) -> Result<MomentEstimates> {
    if n < 2 {
        return Err(Error::InvalidPrior(format!("need at least 2 realizations, got {n}")));
    }
    let prior = model.prior();
    let cn = model.components();
    let horizon = design.horizon();
    for t in targets {
        if t.component >= cn || t.time == 0 || t.time > horizon {
            return Err(Error::InvalidDesign(format!(
                "{} target (component {}, month {}) outside the system or 1..={horizon}",
                t.quantity.name(),
                t.component,
                t.time
            )));
        }
    }
    let method = prior.moment_method;
    let pi_diag = model.pi[(0, 0)];
    let scheme = build_scheme(design, prior.hyper.lambda).with_correlation_scale(pi_diag);
    let want_dbar = options.dbar && !scheme.is_empty();
    // With Gaussian noise the global part of var(D̄) has a closed form given
    // the variance moments; only the local part needs simulation.
    let semi_analytic =
        want_dbar && method == MomentMethod::Structured && prior.noise == NoiseKind::Gaussian;

    let mut global_times: BTreeSet<usize> = BTreeSet::new();
    if want_dbar || method == MomentMethod::Ensemble {
        for e in scheme.entries() {
            for &i in &e.records {
                global_times.insert(design.records()[i].time);
            }
        }
    }
    if method == MomentMethod::Ensemble {
        global_times.extend(design.records().iter().map(|r| r.time));
        global_times.extend(targets.iter().map(|t| t.time));
    }
    let zmin_points: BTreeSet<(usize, usize)> = targets
        .iter()
        .filter(|t| t.quantity == Quantity::Zmin)
        .map(|t| (t.component, t.time))
        .collect();
    let sampler = EnsembleSampler::new(model, design, &global_times, &zmin_points, seed)?;

    // Contiguous record and zmin-slot ranges per component.
    let mut rec_range = vec![(0usize, 0usize); cn];
    for (i, r) in design.records().iter().enumerate() {
        let e = &mut rec_range[r.component];
        if e.1 == e.0 {
            *e = (i, i + 1);
        } else {
            e.1 = i + 1;
        }
    }
    let zmin_range: Vec<(usize, usize)> = (0..cn)
        .map(|c| {
            let slots: Vec<usize> = sampler.zmin_slots[c].iter().map(|p| p.1).collect();
            match (slots.first(), slots.last()) {
                (Some(&a), Some(&b)) => (a, b + 1),
                _ => (0, 0),
            }
        })
        .collect();
    let target_values = |d: &RealizationDraw| -> Vec<f64> {
        targets.iter().map(|t| sampler.target_value(d, t)).collect()
    };

    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(BLOCK)
        .map(|a| (a, (a + BLOCK).min(n)))
        .collect();
    let partials: Vec<Partial> = chunks
        .par_iter()
        .map(|&(a, b)| {
            let len = b - a;
            let mut local: Vec<BlockBuffer> = (0..cn)
                .map(|c| {
                    BlockBuffer::new(
                        rec_range[c].1 - rec_range[c].0,
                        zmin_range[c].1 - zmin_range[c].0,
                        len,
                    )
                })
                .collect();
            let mut dbar = want_dbar.then(|| BlockBuffer::new(scheme.components().len(), 1, len));
            let mut joint = (method == MomentMethod::Ensemble)
                .then(|| BlockBuffer::new(design.len(), targets.len(), len));
            let mut local_sq =
                semi_analytic.then(|| BlockBuffer::new(scheme.entries().len(), 0, len));
            let mut w = [0.0; 4];
            for i in a..b {
                let d = sampler.draw(i as u64);
                for c in 0..cn {
                    let (r0, r1) = rec_range[c];
                    let (z0, z1) = zmin_range[c];
                    if r1 > r0 || z1 > z0 {
                        local[c].push(&d.local_obs[r0..r1], &d.local_zmin[z0..z1]);
                    }
                }
                if let Some(buf) = dbar.as_mut() {
                    let v = scheme.dbar_from_values(&sampler.observation_noise(&d));
                    buf.push(v.as_slice(), &[d.variances.population_mean]);
                }
                if let Some(buf) = joint.as_mut() {
                    buf.push(&sampler.observations(&d), &target_values(&d));
                }
                if let Some(buf) = local_sq.as_mut() {
                    let v: Vec<f64> = scheme
                        .entries()
                        .iter()
                        .map(|e| local_combination(e, &d.local_obs).powi(2))
                        .collect();
                    buf.push(&v, &[]);
                }
                let comp = &d.variances.component;
                let root: f64 = comp.iter().map(|w| w.sqrt()).sum();
                let lin: f64 = comp.iter().sum();
                let sq: f64 = comp.iter().map(|w| w * w).sum();
                w[0] += lin;
                w[1] += root * root - lin;
                w[2] += sq;
                w[3] += lin * lin - sq;
            }
            Partial {
                local: local.into_iter().map(BlockBuffer::finish).collect(),
                dbar: dbar.map(BlockBuffer::finish),
                joint: joint.map(BlockBuffer::finish),
                local_sq: local_sq.map(BlockBuffer::finish),
                w,
            }
        })
        .collect();
    let mut iter = partials.into_iter();
    let first = iter.next().expect("at least one chunk");
    let total = iter.fold(first, |acc, p| acc.merge(&p));

    let m_moments = scheme
        .entries()
        .iter()
        .map(|e| {
            let block = &total.local[e.component];
            let off = rec_range[e.component].0;
            let mean = block.mean_primary();
            let cov = block.covariance();
            let [i0, i1, i2] = e.records.map(|r| r - off);
            // M1 = M_i − M_{i−1}, M2 = M_i − M_{i−2}
            let raw = |a: usize, b: usize| cov[(a, b)] + mean[a] * mean[b];
            let m1_sq = raw(i2, i2) + raw(i1, i1) - 2.0 * raw(i2, i1);
            let m2_sq = raw(i2, i2) + raw(i0, i0) - 2.0 * raw(i2, i0);
            let m1_m2 = raw(i2, i2) - raw(i2, i0) - raw(i1, i2) + raw(i1, i0);
            MMoment {
                component: e.component,
                index: e.index,
                m1_sq,
                m2_sq,
                m1_m2,
            }
        })
        .collect();

    let scale = closed_form_scale(prior).unwrap_or_else(|| match &sampler.fixed_draw {
        Some(d) => {
            let s = DVector::from_iterator(cn, d.component.iter().map(|w| w.sqrt()));
            let w = DVector::from_iterator(cn, d.component.iter().copied());
            ScaleMoments {
                root: Pairwise::Matrix(&s * s.transpose()),
                product: Pairwise::Matrix(&w * w.transpose()),
            }
        }
        None => {
            let diag = (n * cn) as f64;
            let off = (n * cn * cn.saturating_sub(1)).max(1) as f64;
            ScaleMoments {
                root: Pairwise::Exchangeable {
                    diag: total.w[0] / diag,
                    off: total.w[1] / off,
                },
                product: Pairwise::Exchangeable {
                    diag: total.w[2] / diag,
                    off: total.w[3] / off,
                },
            }
        }
    });

    let dbar = total.dbar.as_ref().map(|m| {
        let variance = match &total.local_sq {
            Some(sq) => dbar_variance(model, design, &scheme, &scale, &total.local, &rec_range, sq),
            None => m.covariance(),
        };
        DbarMoments {
            mean: m.mean_primary().clone(),
            variance,
            cov_population_mean: m.cross_covariance().row(0).transpose(),
        }
    });

    let (e_y, var_y, e_targets, var_targets, cov_targets_y) = match method {
        MomentMethod::Ensemble => {
            let j = total.joint.as_ref().expect("joint moments accumulated");
            (
                j.mean_primary().clone(),
                j.covariance(),
                j.mean_secondary().clone(),
                j.secondary_variance(),
                j.cross_covariance(),
            )
        }
        MomentMethod::Structured => {
            structured_moments(model, design, targets, &scale, &total.local, &rec_range, &sampler)
        }
    };

    Ok(MomentEstimates {
        n_realizations: n,
        e_y,
        var_y,
        targets: targets.to_vec(),
        e_targets,
        var_targets,
        cov_targets_y,
        scheme,
        m_moments,
        dbar,
    })
}

/// Coefficients of a difference term on its three record times.
fn term_coefficients(e: &SchemeEntry) -> [f64; 3] {
    let (k, l) = (e.k as f64, e.l as f64);
    [-k, l, k - l]
}

fn local_combination(e: &SchemeEntry, local_obs: &[f64]) -> f64 {
    let a = term_coefficients(e);
    (0..3).map(|p| a[p] * local_obs[e.records[p]]).sum()
}

/// `var(D̄)` from Gaussian fourth moments of the global part and simulated
/// moments of the local part.
///
/// Each term is `(u + v)²/K` with `u = √W_c·z`, `z` Gaussian and independent
/// of the local combination `v`, so
/// `cov(term_i, term_j)·K_i·K_j = cov(u_i², u_j²) + cov(v_i², v_j²)
///  + 4·E[u_i u_j]·E[v_i v_j]`.
fn dbar_variance(
    model: &SystemModel,
    design: &InspectionDataset,
    scheme: &DifferenceScheme,
    scale: &ScaleMoments,
    local: &[Moments],
    rec_range: &[(usize, usize)],
    local_sq: &Moments,
) -> DMatrix<f64> {
    let lambda = scheme.lambda();
    let pi = &model.pi;
    let recs = design.records();
    let entries = scheme.entries();
    let ne = entries.len();
    let slot_of: BTreeMap<usize, usize> =
        scheme.components().iter().enumerate().map(|(i, &c)| (c, i)).collect();

    // Local combinations: coefficient vectors within each component block.
    let local_mean: Vec<f64> = entries
        .iter()
        .map(|e| {
            let (r0, _) = rec_range[e.component];
            let m = local[e.component].mean_primary();
            let a = term_coefficients(e);
            (0..3).map(|p| a[p] * m[e.records[p] - r0]).sum()
        })
        .collect();
    let local_cov: Vec<DMatrix<f64>> = local.iter().map(Moments::covariance).collect();
    let local_raw = |i: usize, j: usize| -> f64 {
        let (ei, ej) = (&entries[i], &entries[j]);
        if ei.component != ej.component {
            return local_mean[i] * local_mean[j];
        }
        let (r0, _) = rec_range[ei.component];
        let cov = &local_cov[ei.component];
        let m = local[ei.component].mean_primary();
        let (ai, aj) = (term_coefficients(ei), term_coefficients(ej));
        let mut s = 0.0;
        for p in 0..3 {
            for q in 0..3 {
                let (x, y) = (ei.records[p] - r0, ej.records[q] - r0);
                s += ai[p] * aj[q] * (cov[(x, y)] + m[x] * m[y]);
            }
        }
        s
    };
    let kernel = |i: usize, j: usize| -> f64 {
        let (ei, ej) = (&entries[i], &entries[j]);
        let (ai, aj) = (term_coefficients(ei), term_coefficients(ej));
        let mut s = 0.0;
        for p in 0..3 {
            for q in 0..3 {
                let (tp, tq) = (recs[ei.records[p]].time, recs[ej.records[q]].time);
                s += ai[p] * aj[q] * thickness_kernel(tp, tq, lambda);
            }
        }
        s
    };
    let g_diag: Vec<f64> = (0..ne).map(|i| kernel(i, i)).collect();
    let sq_cov = local_sq.covariance();

    let nc = scheme.components().len();
    let mut out = DMatrix::zeros(nc, nc);
    for i in 0..ne {
        for j in 0..=i {
            let (c, d) = (entries[i].component, entries[j].component);
            let gij = if i == j { g_diag[i] } else { kernel(i, j) };
            let base = pi[(c, c)] * pi[(d, d)] * g_diag[i] * g_diag[j];
            let mut v = scale.product.get(c, d) * (base + 2.0 * (pi[(c, d)] * gij).powi(2))
                - scale.root.get(c, c) * scale.root.get(d, d) * base;
            v += 4.0 * scale.root.get(c, d) * pi[(c, d)] * gij * local_raw(i, j);
            if c == d {
                v += sq_cov[(i, j)];
            }
            v /= entries[i].weight * entries[j].weight;
            let (si, sj) = (slot_of[&c], slot_of[&d]);
            out[(si, sj)] += v;
            if i != j {
                out[(sj, si)] += v;
            }
        }
    }
    out
}

type Assembled = (
    DVector<f64>,
    DMatrix<f64>,
    DVector<f64>,
    DVector<f64>,
    DMatrix<f64>,
);

fn structured_moments(
    model: &SystemModel,
    design: &InspectionDataset,
    targets: &[Target],
    scale: &ScaleMoments,
    local: &[Moments],
    rec_range: &[(usize, usize)],
    sampler: &EnsembleSampler<'_>,
) -> Assembled {
    let lambda = model.prior().hyper.lambda;
    let pi = &model.pi;
    let recs = design.records();
    let n = recs.len();
    let w = |a: usize, b: usize| scale.root.get(a, b) * pi[(a, b)];

    let mut e_y = DVector::zeros(n);
    let mut var_y = DMatrix::zeros(n, n);
    for i in 0..n {
        let (ci, ti) = (recs[i].component, recs[i].time);
        for j in 0..=i {
            let (cj, tj) = (recs[j].component, recs[j].time);
            let v = w(ci, cj) * thickness_kernel(ti, tj, lambda);
            var_y[(i, j)] = v;
            var_y[(j, i)] = v;
        }
    }
    for (c, block) in local.iter().enumerate() {
        let (r0, r1) = rec_range[c];
        if r1 == r0 {
            continue;
        }
        let cov = block.covariance();
        for a in 0..(r1 - r0) {
            e_y[r0 + a] = model.mean_thickness(c, recs[r0 + a].time) + block.mean_primary()[a];
            for b in 0..(r1 - r0) {
                var_y[(r0 + a, r0 + b)] += cov[(a, b)];
            }
        }
    }

    let m = targets.len();
    let mut e_t = DVector::zeros(m);
    let mut var_t = DVector::zeros(m);
    let mut cov_ty = DMatrix::zeros(m, n);
    let local_cross: Vec<DMatrix<f64>> = local.iter().map(|b| b.cross_covariance()).collect();
    let local_var: Vec<DVector<f64>> = local.iter().map(|b| b.secondary_variance()).collect();
    for (k, tg) in targets.iter().enumerate() {
        let (c, t) = (tg.component, tg.time);
        match tg.quantity {
            Quantity::Thickness | Quantity::Zmin => {
                e_t[k] = model.mean_thickness(c, t);
                var_t[k] = w(c, c) * thickness_kernel(t, t, lambda);
                for (i, r) in recs.iter().enumerate() {
                    cov_ty[(k, i)] = w(c, r.component) * thickness_kernel(t, r.time, lambda);
                }
            }
            Quantity::Rate => {
                e_t[k] = model.prior().alpha0[c];
                var_t[k] = w(c, c) * lambda * t as f64;
                for (i, r) in recs.iter().enumerate() {
                    cov_ty[(k, i)] =
                        w(c, r.component) * lambda * walk_integrated_cov(t, r.time);
                }
            }
        }
        if tg.quantity == Quantity::Zmin {
            let slot = sampler.zmin_slot(c, t).expect("zmin slot");
            let first = sampler.zmin_slots[c][0].1;
            let s = slot - first;
            e_t[k] += local[c].mean_secondary()[s];
            var_t[k] += local_var[c][s];
            let (r0, r1) = rec_range[c];
            for a in 0..(r1 - r0) {
                cov_ty[(k, r0 + a)] += local_cross[c][(s, a)];
            }
        }
    }
    (e_y, var_y, e_t, var_t, cov_ty)
}

/// Prior samples of each target, targets by realizations.
pub fn sample_targets(
    model: &SystemModel,
    design: &InspectionDataset,
    targets: &[Target],
    n: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let times: BTreeSet<usize> = targets.iter().map(|t| t.time).collect();
    let zmin: BTreeSet<(usize, usize)> = targets
        .iter()
        .filter(|t| t.quantity == Quantity::Zmin)
        .map(|t| (t.component, t.time))
        .collect();
    let empty = design.filter(|_| false);
    let sampler = EnsembleSampler::new(model, &empty, &times, &zmin, seed)?;
    let columns: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let d = sampler.draw(i as u64);
            targets.iter().map(|t| sampler.target_value(&d, t)).collect()
        })
        .collect();
    Ok(DMatrix::from_fn(targets.len(), n, |k, i| columns[i][k]))
}
