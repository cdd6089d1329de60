//! Batch drivers behind the command line: a full analysis of one inspection
//! dataset, and a replicated simulation study on a fixed design.

use std::fmt::Write as _;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::calibration::{learn_wx, summarize_replicates, CalibrationResult, Calibrator};
use crate::diagnostics::{adjustment_diagnostics, data_discrepancy, DiagnosticReport, Grouping};
use crate::error::{Error, Result};
use crate::forecast::{
    adjust_targets, prior_bands, remnant_life, AdjustedBelief, RemnantLifeEstimate, BAND_CONVENTION,
    PRIOR_BAND_CONVENTION,
};
use crate::io::{OutputSet, RunInputs};
use crate::simulator::{
    derive_seed, estimate_moments, simulate_dataset, trajectory_targets, Quantity, SystemModel, Target, Truth,
};
use crate::stats::{mean, quantile};
use crate::system::{validate_dataset, InspectionDataset, SystemTopology};

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Stage results of one analysis.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub topology: SystemTopology,
    pub horizon: usize,
    pub prior_report: Vec<DiagnosticReport>,
    /// `None` when no component has enough observations to learn variances.
    pub calibration: Option<CalibrationResult>,
    pub without: AdjustedBelief,
    pub with: AdjustedBelief,
    pub life_without: RemnantLifeEstimate,
    pub life_with: RemnantLifeEstimate,
    /// Prior percentile band per minimum-thickness target of `with`.
    pub prior_bands: Vec<(f64, f64, f64)>,
    /// Global `H` of the data under the final (calibrated) variances.
    pub final_check: DiagnosticReport,
    pub adjustment_check: DiagnosticReport,
}

/// Prior check, variance calibration, adjustment with and without the
/// learned variances, forecasts and diagnostics.
pub fn run_analysis(inputs: &RunInputs) -> Result<Analysis> {
    let dataset = &inputs.dataset;
    let model = SystemModel::new(inputs.prior.clone(), inputs.topology.clone()).map_err(|e| e.in_stage("prior"))?;
    if let Some(f) = validate_dataset(dataset, &inputs.topology).first() {
        return Err(Error::InvalidDesign(f.to_string()).in_stage("validate"));
    }
    let prior = model.prior();

    info!("prior check on {} observations", dataset.len());
    let prior_report = if dataset.is_empty() {
        Vec::new()
    } else {
        let m = estimate_moments(&model, dataset, &[], prior.ensemble_size, prior.rng_seed)
            .map_err(|e| e.in_stage("prior check"))?;
        [Grouping::Global, Grouping::PerComponent, Grouping::PerObservation]
            .into_iter()
            .map(|g| data_discrepancy(dataset, &m, g, inputs.threshold))
            .collect::<Result<_>>()
            .map_err(|e| e.in_stage("prior check"))?
    };

    info!("calibrating over {} candidates", prior.sigma_r_candidates.len());
    let calibration = match Calibrator::new(&model, dataset).and_then(|c| c.calibrate(dataset)) {
        Ok(c) => Some(c),
        Err(Error::InsufficientData(msg)) => {
            warn!("variance learning skipped: {msg}");
            None
        }
        Err(e) => return Err(e.in_stage("calibration")),
    };

    let horizon = dataset.horizon() + inputs.extend_months;
    let all: Vec<usize> = (0..inputs.topology.len()).collect();
    let targets: Vec<Target> = [Quantity::Zmin, Quantity::Thickness, Quantity::Rate]
        .into_iter()
        .flat_map(|q| trajectory_targets(q, &all, horizon))
        .collect();
    info!("adjusting {} targets to month {horizon}", targets.len());
    let without = adjust_targets(&model, dataset, &targets, None).map_err(|e| e.in_stage("adjustment"))?;
    let with = match &calibration {
        Some(c) => adjust_targets(&model, dataset, &targets, Some(c)).map_err(|e| e.in_stage("adjustment"))?,
        None => without.clone(),
    };

    let critical = prior.critical_thickness;
    let life_without = remnant_life(&without, Quantity::Zmin, critical).map_err(|e| e.in_stage("forecast"))?;
    let life_with = remnant_life(&with, Quantity::Zmin, critical).map_err(|e| e.in_stage("forecast"))?;
    let zmin: Vec<Target> = targets.iter().copied().filter(|t| t.quantity == Quantity::Zmin).collect();
    let bands = prior_bands(&model, &zmin).map_err(|e| e.in_stage("forecast"))?;

    let final_model = match &calibration {
        Some(c) => model.with_prior(c.calibrated_prior(prior))?,
        None => model.clone(),
    };
    let final_check = if dataset.is_empty() {
        DiagnosticReport {
            threshold: inputs.threshold,
            rows: Vec::new(),
            skipped_components: Vec::new(),
        }
    } else {
        let fp = final_model.prior();
        let m = estimate_moments(&final_model, dataset, &[], fp.ensemble_size, fp.rng_seed)
            .map_err(|e| e.in_stage("final check"))?;
        data_discrepancy(dataset, &m, Grouping::Global, inputs.threshold).map_err(|e| e.in_stage("final check"))?
    };
    let adjustment_check = adjustment_diagnostics(&with, inputs.threshold);

    Ok(Analysis {
        topology: inputs.topology.clone(),
        horizon,
        prior_report,
        calibration,
        without,
        with,
        life_without,
        life_with,
        prior_bands: bands,
        final_check,
        adjustment_check,
    })
}

fn report_csv(reports: &[&DiagnosticReport], topology: &SystemTopology) -> String {
    use crate::diagnostics::Group;
    let mut out = String::from("grouping,component,month,quantity,value,rank,flagged\n");
    for r in reports {
        for row in &r.rows {
            let (kind, c, t, q) = match row.group {
                Group::Observation { component, time } => {
                    ("observation", topology.id(component).to_string(), time.to_string(), "")
                }
                Group::Component { component } => ("component", topology.id(component).to_string(), String::new(), ""),
                Group::Global => ("global", String::new(), String::new(), ""),
                Group::Block { quantity } => ("block", String::new(), String::new(), quantity.name()),
            };
            let _ = writeln!(out, "{kind},{c},{t},{q},{},{},{}", opt(row.value), row.rank, row.flagged);
        }
    }
    out
}

impl Analysis {
    /// Every report and plot table, keyed by file name.
    pub fn outputs(&self) -> OutputSet {
        let topo = &self.topology;
        let mut out = OutputSet::default();
        out.add("prior_discrepancy.csv", report_csv(&self.prior_report.iter().collect::<Vec<_>>(), topo));

        let mut h = String::from("sigma_r,adjusted_mu_wx,raw_mu_wx,h,rank,selected\n");
        let mut sel = String::from("quantity,prior,selected\n");
        if let Some(c) = &self.calibration {
            for (i, r) in c.rows.iter().enumerate() {
                let _ = writeln!(
                    h,
                    "{},{},{},{},{},{}",
                    r.sigma_r,
                    r.adjusted_mu_wx,
                    r.raw_mu_wx,
                    r.h,
                    r.rank,
                    i == c.selected
                );
            }
        }
        let _ = writeln!(sel, "sigma_r,{},{}", self.without.sigma_r, self.with.sigma_r);
        let _ = writeln!(sel, "mu_WX,{},{}", self.without.mu_wx, self.with.mu_wx);
        out.add("h_curve.csv", h);
        out.add("selected_variances.csv", sel);

        let mut adj = String::from(
            "quantity,component,month,prior_mean,prior_variance,nolearn_mean,nolearn_variance,learn_mean,learn_variance\n",
        );
        for (a, b) in self.without.beliefs.iter().zip(&self.with.beliefs) {
            let _ = writeln!(
                adj,
                "{},{},{},{},{},{},{},{},{}",
                a.target.quantity.name(),
                topo.id(a.target.component),
                a.target.time,
                a.prior_mean,
                a.prior_variance,
                a.adjusted_mean,
                a.adjusted_variance,
                b.adjusted_mean,
                b.adjusted_variance
            );
        }
        out.add("adjusted_beliefs.csv", adj);

        let mut life = format!(
            "# first month below {} mm; band {}\nbranch,component,mean,lower,upper\n",
            self.life_with.critical, BAND_CONVENTION
        );
        for (branch, est) in [("nolearn", &self.life_without), ("learn", &self.life_with)] {
            for r in &est.rows {
                let _ = writeln!(
                    life,
                    "{branch},{},{},{},{}",
                    topo.id(r.component),
                    opt(r.mean),
                    opt(r.lower),
                    opt(r.upper)
                );
            }
        }
        out.add("remnant_life.csv", life);

        let mut bands = format!(
            "# prior: {PRIOR_BAND_CONVENTION}; adjusted: {BAND_CONVENTION}\n\
             component,t,prior_lo,prior_mean,prior_hi,nolearn_lo,nolearn_mean,nolearn_hi,learn_lo,learn_mean,learn_hi\n"
        );
        let zmin = |b: &&crate::forecast::TargetBelief| b.target.quantity == Quantity::Zmin;
        for ((a, b), p) in self
            .without
            .beliefs
            .iter()
            .filter(zmin)
            .zip(self.with.beliefs.iter().filter(zmin))
            .zip(&self.prior_bands)
        {
            let (n0, n1, n2) = a.band();
            let (l0, l1, l2) = b.band();
            let _ = writeln!(
                bands,
                "{},{},{},{},{},{n0},{n1},{n2},{l0},{l1},{l2}",
                topo.id(a.target.component),
                a.target.time,
                p.0,
                p.1,
                p.2
            );
        }
        out.add("bands.csv", bands);
        out.add("final_check.csv", report_csv(&[&self.final_check], topo));
        out.add("adjustment_diagnostics.csv", report_csv(&[&self.adjustment_check], topo));
        out.add("summary.txt", self.summary());
        out
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "observations: {}", self.without.observations);
        let _ = writeln!(s, "forecast horizon: month {}", self.horizon);
        for r in &self.prior_report {
            let flagged = r.flagged().count();
            let n = r.rows.len();
            if let Some(g) = r.rows.first().filter(|_| n == 1) {
                let _ = writeln!(s, "prior discrepancy (global): {}", opt(g.value));
            } else if n > 0 {
                let _ = writeln!(s, "prior discrepancy: {flagged} of {n} {} flagged", r.rows[0].group.kind());
            }
        }
        if let Some(r) = self.prior_report.first() {
            if !r.skipped_components.is_empty() {
                let _ = writeln!(
                    s,
                    "components without variance learning (fewer than 3 inspections): {}",
                    r.skipped_components.len()
                );
            }
        }
        match &self.calibration {
            Some(c) => {
                let row = c.selected_row();
                let _ = writeln!(s, "selected sigma_r: {}", row.sigma_r);
                let _ = writeln!(s, "learned mu_WX: {}", row.adjusted_mu_wx);
                let _ = writeln!(s, "H at selection: {}", row.h);
            }
            None => {
                let _ = writeln!(s, "variance learning: skipped, prior variances kept");
            }
        }
        if let Some(g) = self.final_check.rows.first() {
            let _ = writeln!(s, "final H: {}", opt(g.value));
        }
        for row in &self.adjustment_check.rows {
            let _ = writeln!(s, "adjustment discrepancy ({}): {}", row.group, opt(row.value));
        }
        let earliest = |e: &RemnantLifeEstimate| {
            e.rows
                .iter()
                .filter_map(|r| r.lower)
                .fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.min(v))))
        };
        let _ = writeln!(
            s,
            "earliest lower-band crossing of {} mm: without learning {}, with learning {}",
            self.life_with.critical,
            earliest(&self.life_without).map_or("none".into(), |v| v.to_string()),
            earliest(&self.life_with).map_or("none".into(), |v| v.to_string()),
        );
        s
    }
}

/// One replicate of a simulation study.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateResult {
    pub replicate: usize,
    /// `E_D̄(M(W_X))` with moments under the true Σ_r.
    pub estimate: f64,
    pub raw_estimate: f64,
    pub calibration: Option<CalibrationResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub truth: Truth,
    pub replicates: Vec<ReplicateResult>,
    /// Mean calibration curve with 5–95% bands on `H`.
    pub curve: Option<CalibrationResult>,
}

impl StudyResult {
    pub fn estimates(&self) -> Vec<f64> {
        self.replicates.iter().map(|r| r.estimate).collect()
    }

    /// Mean, 5% and 95% of the estimator over replicates.
    pub fn estimator_summary(&self) -> (f64, f64, f64) {
        let e = self.estimates();
        (mean(&e), quantile(&e, 0.05), quantile(&e, 0.95))
    }

    pub fn outputs(&self) -> OutputSet {
        let mut out = OutputSet::default();
        let mut est = String::from("replicate,estimate,raw_estimate,selected_sigma_r,selected_h\n");
        for r in &self.replicates {
            let sel = r.calibration.as_ref().map(|c| c.selected_row());
            let _ = writeln!(
                est,
                "{},{},{},{},{}",
                r.replicate,
                r.estimate,
                r.raw_estimate,
                opt(sel.map(|s| s.sigma_r)),
                opt(sel.map(|s| s.h))
            );
        }
        out.add("estimator.csv", est);
        let (m, lo, hi) = self.estimator_summary();
        out.add(
            "estimator_summary.csv",
            format!(
                "true_mu_wx,true_sigma_r,replicates,mean,q05,q95,sqrt_mean,sqrt_q05,sqrt_q95\n{},{},{},{m},{lo},{hi},{},{},{}\n",
                self.truth.mu_wx,
                self.truth.sigma_r,
                self.replicates.len(),
                m.sqrt(),
                lo.sqrt(),
                hi.sqrt()
            ),
        );
        if let Some(c) = &self.curve {
            let mut h = String::from("sigma_r,adjusted_mu_wx,h_mean,h_q05,h_q95,selection_share\n");
            let n = self.replicates.len() as f64;
            for (i, r) in c.rows.iter().enumerate() {
                let (lo, hi) = r.band.unwrap_or((r.h, r.h));
                let share = self
                    .replicates
                    .iter()
                    .filter(|x| x.calibration.as_ref().is_some_and(|c| c.selected == i))
                    .count() as f64
                    / n;
                let _ = writeln!(h, "{},{},{},{lo},{hi},{share}", r.sigma_r, r.adjusted_mu_wx, r.h);
            }
            out.add("h_curve_bands.csv", h);
        }
        out
    }
}

/// Replicate datasets on `design` under `truth`: the variance estimator with
/// moments at the true Σ_r, and optionally a full calibration of each.
pub fn simulate_study(
    model: &SystemModel,
    design: &InspectionDataset,
    truth: Truth,
    replicates: usize,
    calibrate: bool,
) -> Result<StudyResult> {
    if replicates == 0 {
        return Err(Error::Config("replicate count must be at least 1".into()));
    }
    let prior = model.prior();
    let at_truth = model.with_prior(prior.with_sigma_r(truth.sigma_r))?;
    let moments = estimate_moments(&at_truth, design, &[], prior.ensemble_size, prior.rng_seed)
        .map_err(|e| e.in_stage("study moments"))?;
    let calibrator = if calibrate {
        Some(Calibrator::new(model, design).map_err(|e| e.in_stage("study calibration"))?)
    } else {
        None
    };
    let mut results = Vec::with_capacity(replicates);
    for r in 0..replicates {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(prior.rng_seed, 0x5757 + r as u64));
        let (data, _) = simulate_dataset(model, design, &truth, &mut rng)?;
        let wx = learn_wx(&data, &moments, &prior.hyper).map_err(|e| e.in_stage("study estimator"))?;
        let calibration = match &calibrator {
            Some(c) => Some(c.calibrate(&data).map_err(|e| e.in_stage("study calibration"))?),
            None => None,
        };
        info!("replicate {r}: estimate {:.5e}", wx.adjusted_mean);
        results.push(ReplicateResult {
            replicate: r,
            estimate: wx.adjusted_mean,
            raw_estimate: wx.raw_mean,
            calibration,
        });
    }
    let curve = if calibrate {
        let all: Vec<CalibrationResult> = results.iter().filter_map(|r| r.calibration.clone()).collect();
        Some(summarize_replicates(&all)?)
    } else {
        None
    };
    Ok(StudyResult {
        truth,
        replicates: results,
        curve,
    })
}

/// What `validate` prints: parse findings and the prior discrepancy.
pub fn validate_inputs(inputs: &RunInputs) -> Result<String> {
    let model = SystemModel::new(inputs.prior.clone(), inputs.topology.clone())?;
    let dataset = &inputs.dataset;
    let findings = validate_dataset(dataset, &inputs.topology);
    if let Some(f) = findings.first() {
        return Err(Error::InvalidDesign(f.to_string()));
    }
    let mut s = format!(
        "{} components, {} inspections, horizon {} months\n",
        inputs.topology.len(),
        dataset.len(),
        dataset.horizon()
    );
    if dataset.is_empty() {
        return Ok(s);
    }
    let prior = model.prior();
    let m = estimate_moments(&model, dataset, &[], prior.ensemble_size, prior.rng_seed)?;
    let reports = [Grouping::Global, Grouping::PerComponent, Grouping::PerObservation]
        .into_iter()
        .map(|g| data_discrepancy(dataset, &m, g, inputs.threshold))
        .collect::<Result<Vec<_>>>()?;
    s.push_str(&report_csv(&reports.iter().collect::<Vec<_>>(), &inputs.topology));
    Ok(s)
}
