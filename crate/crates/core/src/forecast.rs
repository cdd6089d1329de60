//! Adjusted beliefs about thickness, minimum thickness and corrosion rate,
//! and remnant life against a critical thickness.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::bayes_linear::{whitening_factor, Discrepancy, DEFAULT_RTOL};
use crate::calibration::{calibrate, CalibrationResult};
use crate::error::{Error, Result};
use crate::simulator::{estimate_moments_with, sample_targets, MomentOptions, Quantity, SystemModel, Target};
use crate::stats::quantile_in_place;
use crate::system::{InspectionDataset, PriorSpecification};

/// Half-width multiplier of adjusted bands.
pub const BAND_Z: f64 = 1.96;
pub const BAND_CONVENTION: &str = "adjusted mean +/- 1.96 adjusted sd";
pub const PRIOR_BAND_CONVENTION: &str = "prior simulation 2.5% and 97.5% percentiles";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TargetBelief {
    pub target: Target,
    pub prior_mean: f64,
    pub adjusted_mean: f64,
    pub prior_variance: f64,
    pub adjusted_variance: f64,
}

impl TargetBelief {
    /// `(lo, mean, hi)` of the adjusted band.
    pub fn band(&self) -> (f64, f64, f64) {
        let h = BAND_Z * self.adjusted_variance.sqrt();
        (self.adjusted_mean - h, self.adjusted_mean, self.adjusted_mean + h)
    }
}

/// Beliefs about a target set adjusted by one dataset.
///
/// Keeps `A = cov(T, Y)·L` and `w = Lᵀ(y − E(Y))` for `var(Y)⁺ = L Lᵀ`, so
/// adjusted means are `E(T) + A w` and resolved variances of any subset are
/// `A_I A_Iᵀ` without forming a targets-by-targets matrix.
#[derive(Debug, Clone)]
pub struct AdjustedBelief {
    pub beliefs: Vec<TargetBelief>,
    /// Σ_r and `M(W_X)` the moments were estimated under.
    pub sigma_r: f64,
    pub mu_wx: f64,
    pub observations: usize,
    whitened: DMatrix<f64>,
    residual: DVector<f64>,
}

impl AdjustedBelief {
    pub fn len(&self) -> usize {
        self.beliefs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beliefs.is_empty()
    }

    /// `RVar_Y` of the targets at `indices`.
    pub fn resolved_variance(&self, indices: &[usize]) -> DMatrix<f64> {
        let a = self.whitened.select_rows(indices);
        &a * a.transpose()
    }

    /// Adjustment discrepancy of the targets at `indices`; `None` when the
    /// data resolve nothing about them.
    pub fn discrepancy(&self, indices: &[usize]) -> Option<Discrepancy> {
        if self.residual.is_empty() || indices.is_empty() {
            return None;
        }
        let a = self.whitened.select_rows(indices);
        // (A w)ᵀ (A Aᵀ)⁺ (A w) is the squared projection of w on the row space of A.
        let eig = SymmetricEigen::new(a.tr_mul(&a));
        let max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if max == 0.0 {
            return None;
        }
        let mut q = 0.0;
        let mut rank = 0;
        for (j, &l) in eig.eigenvalues.iter().enumerate() {
            if l.abs() > DEFAULT_RTOL * max {
                rank += 1;
                q += eig.eigenvectors.column(j).dot(&self.residual).powi(2);
            }
        }
        Some(Discrepancy {
            quadratic_form: q,
            rank,
        })
    }

    /// Indices of the targets of one quantity.
    pub fn indices_of(&self, quantity: Quantity) -> Vec<usize> {
        (0..self.beliefs.len())
            .filter(|&i| self.beliefs[i].target.quantity == quantity)
            .collect()
    }
}

/// Adjusts `targets` by the dataset's values, with moments estimated under
/// the calibrated variances when given and the prior otherwise.
pub fn adjust_targets(
    model: &SystemModel,
    dataset: &InspectionDataset,
    targets: &[Target],
    calibrated: Option<&CalibrationResult>,
) -> Result<AdjustedBelief> {
    let prior = match calibrated {
        Some(c) => c.calibrated_prior(model.prior()),
        None => model.prior().clone(),
    };
    adjust_under(model, &prior, dataset, targets)
}

fn adjust_under(
    model: &SystemModel,
    prior: &PriorSpecification,
    dataset: &InspectionDataset,
    targets: &[Target],
) -> Result<AdjustedBelief> {
    let model = model.with_prior(prior.clone())?;
    let horizon = targets
        .iter()
        .map(|t| t.time)
        .max()
        .unwrap_or(0)
        .max(dataset.horizon());
    let design = dataset.with_horizon(horizon);
    let m = estimate_moments_with(
        &model,
        &design,
        targets,
        prior.ensemble_size,
        prior.rng_seed,
        MomentOptions { dbar: false },
    )?;
    let (whitened, residual) = if design.is_empty() {
        (DMatrix::zeros(targets.len(), 0), DVector::zeros(0))
    } else {
        let l = whitening_factor(&m.var_y, DEFAULT_RTOL)?;
        let e = design.values() - &m.e_y;
        (&m.cov_targets_y * &l.factor, l.whiten(&e))
    };
    let shift = &whitened * &residual;
    let beliefs = targets
        .iter()
        .enumerate()
        .map(|(k, &target)| {
            let resolved = whitened.row(k).norm_squared();
            TargetBelief {
                target,
                prior_mean: m.e_targets[k],
                adjusted_mean: m.e_targets[k] + shift[k],
                prior_variance: m.var_targets[k],
                adjusted_variance: (m.var_targets[k] - resolved).max(0.0),
            }
        })
        .collect();
    Ok(AdjustedBelief {
        beliefs,
        sigma_r: prior.sigma_r,
        mu_wx: prior.hyper.mu_wx,
        observations: design.len(),
        whitened,
        residual,
    })
}

/// First time a piecewise-linear path drops below `critical`.
pub fn first_crossing(times: &[usize], values: &[f64], critical: f64) -> Option<f64> {
    let first = values.iter().position(|&v| v < critical)?;
    if first == 0 {
        return Some(times[0] as f64);
    }
    let (t0, v0, v1) = (times[first - 1] as f64, values[first - 1], values[first]);
    let dt = (times[first] - times[first - 1]) as f64;
    Some(t0 + dt * (v0 - critical) / (v0 - v1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RemnantLife {
    pub component: usize,
    /// Crossing month of the adjusted mean.
    pub mean: Option<f64>,
    /// Crossing month of the lower band edge (the earliest).
    pub lower: Option<f64>,
    /// Crossing month of the upper band edge.
    pub upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RemnantLifeEstimate {
    pub quantity: Quantity,
    pub critical: f64,
    pub convention: &'static str,
    pub rows: Vec<RemnantLife>,
}

/// Band-edge trajectories of one quantity grouped by component, requiring a
/// contiguous monthly grid per component.
pub fn trajectories(
    beliefs: &AdjustedBelief,
    quantity: Quantity,
) -> Result<Vec<(usize, Vec<usize>, Vec<TargetBelief>)>> {
    let mut by: std::collections::BTreeMap<usize, Vec<TargetBelief>> = Default::default();
    for b in beliefs.beliefs.iter().filter(|b| b.target.quantity == quantity) {
        by.entry(b.target.component).or_default().push(*b);
    }
    by.into_iter()
        .map(|(c, mut v)| {
            v.sort_by_key(|b| b.target.time);
            let times: Vec<usize> = v.iter().map(|b| b.target.time).collect();
            if times.windows(2).any(|w| w[1] != w[0] + 1) {
                return Err(Error::NonContiguousGrid(format!(
                    "component {c}: {} months are not consecutive",
                    quantity.name()
                )));
            }
            Ok((c, times, v))
        })
        .collect()
}

pub fn remnant_life(beliefs: &AdjustedBelief, quantity: Quantity, critical: f64) -> Result<RemnantLifeEstimate> {
    let rows = trajectories(beliefs, quantity)?
        .into_iter()
        .map(|(component, times, v)| {
            let edge = |f: fn(&TargetBelief) -> f64| -> Vec<f64> { v.iter().map(f).collect() };
            RemnantLife {
                component,
                mean: first_crossing(&times, &edge(|b| b.band().1), critical),
                lower: first_crossing(&times, &edge(|b| b.band().0), critical),
                upper: first_crossing(&times, &edge(|b| b.band().2), critical),
            }
        })
        .collect();
    Ok(RemnantLifeEstimate {
        quantity,
        critical,
        convention: BAND_CONVENTION,
        rows,
    })
}

/// Prior percentile band `(2.5%, mean, 97.5%)` of each target from simulation.
pub fn prior_bands(model: &SystemModel, targets: &[Target]) -> Result<Vec<(f64, f64, f64)>> {
    let prior = model.prior();
    let horizon = targets.iter().map(|t| t.time).max().unwrap_or(1);
    let empty = InspectionDataset::new(horizon, Vec::new());
    let samples = sample_targets(model, &empty, targets, prior.ensemble_size, prior.rng_seed)?;
    Ok(samples
        .row_iter()
        .map(|row| {
            let mut v: Vec<f64> = row.iter().copied().collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let lo = quantile_in_place(&mut v, 0.025);
            let hi = quantile_in_place(&mut v, 0.975);
            (lo, mean, hi)
        })
        .collect())
}

/// The same adjustment with prior variances and with calibrated variances.
#[derive(Debug, Clone)]
pub struct VarianceLearningComparison {
    /// `None` when the data cannot support variance learning.
    pub calibration: Option<CalibrationResult>,
    pub without: AdjustedBelief,
    pub with: AdjustedBelief,
    pub life_without: RemnantLifeEstimate,
    pub life_with: RemnantLifeEstimate,
}

/// Both branches share the prior's seed, so differences are not Monte Carlo
/// noise. Remnant life is read from the minimum-thickness targets.
pub fn compare_with_without_variance_learning(
    model: &SystemModel,
    dataset: &InspectionDataset,
    targets: &[Target],
) -> Result<VarianceLearningComparison> {
    let critical = model.prior().critical_thickness;
    let without = adjust_targets(model, dataset, targets, None)?;
    let calibration = match calibrate(model, dataset) {
        Ok(c) => Some(c),
        Err(Error::InsufficientData(msg)) => {
            warn!("variance learning skipped: {msg}");
            None
        }
        Err(e) => return Err(e),
    };
    let with = match &calibration {
        Some(c) => adjust_targets(model, dataset, targets, Some(c))?,
        None => without.clone(),
    };
    Ok(VarianceLearningComparison {
        life_without: remnant_life(&without, Quantity::Zmin, critical)?,
        life_with: remnant_life(&with, Quantity::Zmin, critical)?,
        calibration,
        without,
        with,
    })
}
