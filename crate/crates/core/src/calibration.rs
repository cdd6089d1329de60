//! Choosing the local variance Σ_r by the discrepancy ratio.
//!
//! For every candidate Σ_r the population variance `M(W_X)` is learned from
//! `D̄`, the observation moments are re-estimated under the learned value, and
//! the observed data are scored by `H = Mahalanobis / rank`. The candidate
//! with `H` nearest one wins.

use log::info;
use serde::Serialize;

use crate::bayes_linear::{mahalanobis, Discrepancy, MomentPair, DEFAULT_RTOL};
use crate::error::{Error, Result};
use crate::simulator::{estimate_moments, estimate_moments_with, MomentEstimates, MomentOptions, SystemModel};
use crate::stats::quantile;
use crate::system::{InspectionDataset, PriorSpecification, VarianceHyperprior};
use crate::variance_learning::{adjust_wx, compute_dbar, expected_dbar, DbarStatistic, WxAdjustment};

/// Learns `M(W_X)` from a dataset given prior moments estimated on its design.
pub fn learn_wx(
    dataset: &InspectionDataset,
    moments: &MomentEstimates,
    hyper: &VarianceHyperprior,
) -> Result<WxAdjustment> {
    let dbar = moments
        .dbar
        .as_ref()
        .ok_or_else(|| Error::InsufficientData("no component has three or more observations".into()))?;
    let scheme = &moments.scheme;
    let stat = DbarStatistic::new(
        compute_dbar(dataset, scheme),
        expected_dbar(scheme, hyper, &moments.m_moments)?,
        scheme.cross_covariance(hyper),
        dbar.variance.clone(),
    )?;
    adjust_wx(&stat, hyper)
}

/// Discrepancy of the dataset's values against prior observation moments.
pub fn observation_discrepancy(dataset: &InspectionDataset, moments: &MomentEstimates) -> Result<Discrepancy> {
    let prior = MomentPair::new(moments.e_y.clone(), moments.var_y.clone())?;
    mahalanobis(&dataset.values(), prior.mean(), prior.covariance(), DEFAULT_RTOL)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CandidateRow {
    pub sigma_r: f64,
    pub adjusted_mu_wx: f64,
    /// Learned `M(W_X)` before flooring at the variance floor.
    pub raw_mu_wx: f64,
    pub h: f64,
    pub rank: usize,
    /// 5th and 95th percentiles of `H` over simulated replicates.
    pub band: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationResult {
    pub rows: Vec<CandidateRow>,
    pub selected: usize,
}

impl CalibrationResult {
    pub fn selected_row(&self) -> &CandidateRow {
        &self.rows[self.selected]
    }

    /// `base` with the selected Σ_r and learned `M(W_X)`.
    pub fn calibrated_prior(&self, base: &PriorSpecification) -> PriorSpecification {
        let row = self.selected_row();
        base.with_sigma_r(row.sigma_r).with_mu_wx(row.adjusted_mu_wx)
    }
}

/// Index of the `H` nearest one; ties go to the smaller Σ_r.
pub fn select_candidate(rows: &[CandidateRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        let d = (r.h - 1.0).abs();
        best = match best {
            None => Some(i),
            Some(b) => {
                let db = (rows[b].h - 1.0).abs();
                if d < db || (d == db && r.sigma_r < rows[b].sigma_r) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

/// Scores `dataset` under Σ_r given prior moments estimated on its design
/// under Σ_r: learn `M(W_X)`, re-estimate under the learned value, compute `H`.
pub fn score_candidate(
    model: &SystemModel,
    dataset: &InspectionDataset,
    sigma_r: f64,
    prior_moments: &MomentEstimates,
) -> Result<(CandidateRow, WxAdjustment)> {
    let prior = model.prior();
    let wx = learn_wx(dataset, prior_moments, &prior.hyper)?;
    let learned = model.with_prior(prior.with_sigma_r(sigma_r).with_mu_wx(wx.adjusted_mean))?;
    let after = estimate_moments_with(
        &learned,
        dataset,
        &[],
        prior.ensemble_size,
        prior.rng_seed,
        MomentOptions { dbar: false },
    )?;
    let d = observation_discrepancy(dataset, &after)?;
    Ok((
        CandidateRow {
            sigma_r,
            adjusted_mu_wx: wx.adjusted_mean,
            raw_mu_wx: wx.raw_mean,
            h: d.ratio(),
            rank: d.rank,
            band: None,
        },
        wx,
    ))
}

/// Prior moments under every candidate Σ_r for one design, reusable across
/// datasets observed on that design.
///
/// All candidates share the prior's seed, so their moment estimates use
/// common random numbers.
#[derive(Debug, Clone)]
pub struct Calibrator<'a> {
    model: &'a SystemModel,
    design: Vec<(usize, usize)>,
    prior_moments: Vec<(f64, MomentEstimates)>,
}

impl<'a> Calibrator<'a> {
    pub fn new(model: &'a SystemModel, design: &InspectionDataset) -> Result<Self> {
        let prior = model.prior();
        if prior.sigma_r_candidates.is_empty() {
            return Err(Error::Config("empty sigma_r candidate grid".into()));
        }
        let prior_moments = prior
            .sigma_r_candidates
            .iter()
            .map(|&s| {
                let candidate = model.with_prior(prior.with_sigma_r(s))?;
                let m = estimate_moments(&candidate, design, &[], prior.ensemble_size, prior.rng_seed)?;
                Ok((s, m))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            model,
            design: points(design),
            prior_moments,
        })
    }

    pub fn grid(&self) -> Vec<f64> {
        self.prior_moments.iter().map(|p| p.0).collect()
    }

    /// Runs every candidate against the dataset's values.
    pub fn calibrate(&self, dataset: &InspectionDataset) -> Result<CalibrationResult> {
        if points(dataset) != self.design {
            return Err(Error::InvalidDesign(
                "dataset was not observed on the calibrator's design".into(),
            ));
        }
        let mut rows = Vec::with_capacity(self.prior_moments.len());
        for (s, m) in &self.prior_moments {
            let (row, _) = score_candidate(self.model, dataset, *s, m)?;
            info!(
                "sigma_r {:.3e}: M(W_X) {:.4e}, H {:.4}",
                row.sigma_r, row.adjusted_mu_wx, row.h
            );
            rows.push(row);
        }
        let selected = select_candidate(&rows).expect("nonempty grid");
        Ok(CalibrationResult { rows, selected })
    }
}

fn points(d: &InspectionDataset) -> Vec<(usize, usize)> {
    d.records().iter().map(|r| (r.component, r.time)).collect()
}

/// Runs every candidate of the prior's grid against the dataset's values.
pub fn calibrate(model: &SystemModel, dataset: &InspectionDataset) -> Result<CalibrationResult> {
    Calibrator::new(model, dataset)?.calibrate(dataset)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HCurveRow {
    pub sigma_r: f64,
    pub adjusted_mu_wx: f64,
    pub h: f64,
}

pub fn h_curve(result: &CalibrationResult) -> Vec<HCurveRow> {
    result
        .rows
        .iter()
        .map(|r| HCurveRow {
            sigma_r: r.sigma_r,
            adjusted_mu_wx: r.adjusted_mu_wx,
            h: r.h,
        })
        .collect()
}

/// Pointwise summary of replicate calibrations on a shared grid: the mean
/// curve with 5–95% bands on `H`, selection by the mean curve.
pub fn summarize_replicates(results: &[CalibrationResult]) -> Result<CalibrationResult> {
    let first = results
        .first()
        .ok_or_else(|| Error::Config("no replicate calibrations to summarize".into()))?;
    let p = first.rows.len();
    if results.iter().any(|r| r.rows.len() != p) {
        return Err(Error::shape("replicate grids differ in length"));
    }
    let rows: Vec<CandidateRow> = (0..p)
        .map(|i| {
            let h: Vec<f64> = results.iter().map(|r| r.rows[i].h).collect();
            let mu: Vec<f64> = results.iter().map(|r| r.rows[i].adjusted_mu_wx).collect();
            let raw: Vec<f64> = results.iter().map(|r| r.rows[i].raw_mu_wx).collect();
            CandidateRow {
                sigma_r: first.rows[i].sigma_r,
                adjusted_mu_wx: crate::stats::mean(&mu),
                raw_mu_wx: crate::stats::mean(&raw),
                h: crate::stats::mean(&h),
                rank: first.rows[i].rank,
                band: Some((quantile(&h, 0.05), quantile(&h, 0.95))),
            }
        })
        .collect();
    let selected = select_candidate(&rows).expect("nonempty grid");
    Ok(CalibrationResult { rows, selected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{simulate_dataset, Truth};
    use crate::stats::spearman;
    use crate::system::{SystemTopology, VarianceHyperprior};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row(sigma_r: f64, h: f64) -> CandidateRow {
        CandidateRow {
            sigma_r,
            adjusted_mu_wx: 0.01,
            raw_mu_wx: 0.01,
            h,
            rank: 1,
            band: None,
        }
    }

    #[test]
    fn selection_prefers_nearest_one_then_smaller_sigma() {
        assert_eq!(select_candidate(&[row(1.0, 0.5), row(2.0, 1.2), row(3.0, 3.0)]), Some(1));
        assert_eq!(select_candidate(&[row(1.0, 0.8), row(2.0, 1.2)]), Some(0));
        assert_eq!(select_candidate(&[row(1.0, 0.0), row(2.0, 0.0)]), Some(0));
        assert_eq!(select_candidate(&[]), None);
    }

    fn model() -> SystemModel {
        let topo = SystemTopology::from_circuit_sizes(&[5, 5]).unwrap();
        let mut prior = PriorSpecification::offshore(10, 10.0, -0.02);
        prior.hyper = VarianceHyperprior {
            mu_wx: 0.01,
            sigma_wx: 1e-4,
            gamma_wx: 5e-5,
            lambda: 0.02,
        };
        prior.sigma_r_candidates = vec![0.0025, 0.005, 0.01, 0.02, 0.04];
        prior.ensemble_size = 400;
        SystemModel::new(prior, topo).unwrap()
    }

    fn design() -> InspectionDataset {
        let mut pts = Vec::new();
        for c in 0..10 {
            for t in [3, 9, 14, 22, 30, 37] {
                if (c + t) % 5 != 0 {
                    pts.push((c, t));
                }
            }
        }
        InspectionDataset::design(40, pts)
    }

    #[test]
    fn calibration_is_deterministic_and_learned_mean_falls_with_sigma_r() {
        let m = model();
        let (data, _) =
            simulate_dataset(&m, &design(), &Truth { mu_wx: 0.01, sigma_r: 0.01 }, &mut ChaCha8Rng::seed_from_u64(4))
                .unwrap();
        let a = calibrate(&m, &data).unwrap();
        let b = calibrate(&m, &data).unwrap();
        assert_eq!(a, b);
        assert_eq!(h_curve(&a).len(), 5);
        let sig: Vec<f64> = a.rows.iter().map(|r| r.sigma_r).collect();
        let mu: Vec<f64> = a.rows.iter().map(|r| r.raw_mu_wx).collect();
        assert!(spearman(&sig, &mu) < 0.0, "{mu:?}");
    }

    #[test]
    fn data_at_expectation_gives_zero_discrepancy() {
        let m = model();
        let design = design();
        let moments = estimate_moments(&m, &design, &[], 400, 1).unwrap();
        let data = design.with_values(moments.e_y.as_slice()).unwrap();
        let d = observation_discrepancy(&data, &moments).unwrap();
        assert!(d.ratio() < 1e-12);
    }

    #[test]
    fn empty_grid_is_a_config_error() {
        let m = model();
        let mut prior = m.prior().clone();
        prior.sigma_r_candidates.clear();
        let m = m.with_prior(prior).unwrap();
        assert!(matches!(calibrate(&m, &design()), Err(Error::Config(_))));
    }
}
