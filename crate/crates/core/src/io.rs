//! Input files, run configuration and atomic output writing.
//!
//! The prior configuration is flat TOML whose keys follow the usual symbol
//! names (`mu_WX`, `sigma_WX`, `gamma_WX`, `lambda`, `sigma_y`, `rho0`,
//! `rhoC`, `rhoD`, ...). Topology and inspection files are comma-delimited
//! with a header row.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate};
use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::design::{offshore_design, offshore_prior, offshore_topology, OFFSHORE_HORIZON};
use crate::error::{Error, Result};
use crate::simulator::{derive_seed, simulate_dataset, SystemModel, Truth};
use crate::system::{
    log_spaced, ComponentSpec, CorrelationParams, HyperDistribution, InspectionDataset, InspectionRecord,
    MomentMethod, NoiseKind, PriorSpecification, SystemTopology, VarianceHyperprior, VarianceSampling,
};

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &str, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line: line as usize,
        message: message.into(),
    }
}

fn csv_err(path: &str, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    parse_err(path, line, e.to_string())
}

/// A calendar month, the origin of the monthly index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl YearMonth {
    pub fn parse(s: &str) -> Option<Self> {
        let d = NaiveDate::parse_from_str(&format!("{}-01", s.trim()), "%Y-%m-%d").ok()?;
        Some(Self {
            year: d.year(),
            month: d.month(),
        })
    }

    /// 1-based index of `other` when `self` is month 1.
    fn index_of(&self, year: i32, month: u32) -> i64 {
        (year - self.year) as i64 * 12 + month as i64 - self.month as i64 + 1
    }
}

#[derive(Debug, Deserialize)]
struct TopologyRow {
    component_id: u32,
    circuit_id: u32,
    position_in_circuit: i64,
    x0: Option<f64>,
    alpha0: Option<f64>,
}

/// Topology with optional per-component starting thickness and rate.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologyFile {
    pub topology: SystemTopology,
    pub x0: Vec<Option<f64>>,
    pub alpha0: Vec<Option<f64>>,
}

/// Columns `component_id,circuit_id,position_in_circuit[,x0][,alpha0]`.
pub fn parse_topology_str(text: &str, name: &str) -> Result<TopologyFile> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut specs = Vec::new();
    let mut x0 = Vec::new();
    let mut alpha0 = Vec::new();
    let mut seen = BTreeSet::new();
    for row in reader.deserialize::<TopologyRow>() {
        let row = row.map_err(|e| csv_err(name, e))?;
        let line = specs.len() as u64 + 2;
        if !seen.insert(row.component_id) {
            return Err(parse_err(name, line, format!("duplicate component_id {}", row.component_id)));
        }
        specs.push(ComponentSpec {
            id: row.component_id,
            circuit: row.circuit_id,
            position: row.position_in_circuit,
        });
        x0.push(row.x0);
        alpha0.push(row.alpha0);
    }
    if specs.is_empty() {
        return Err(parse_err(name, 1, "topology has no components"));
    }
    Ok(TopologyFile {
        topology: SystemTopology::new(specs)?,
        x0,
        alpha0,
    })
}

pub fn parse_topology(path: &Path) -> Result<TopologyFile> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_topology_str(&text, &path.display().to_string())
}

pub fn emit_topology(topology: &SystemTopology, x0: &[f64], alpha0: &[f64]) -> String {
    let mut out = String::from("component_id,circuit_id,position_in_circuit,x0,alpha0\n");
    for (i, c) in topology.components().iter().enumerate() {
        let _ = writeln!(out, "{},{},{},{},{}", c.id, c.circuit, c.position, x0[i], alpha0[i]);
    }
    out
}

#[derive(Debug, Deserialize)]
struct InspectionRow {
    component: u32,
    month: String,
    min_thickness_mm: f64,
}

/// How inspection months are read.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonthMapping {
    /// Calendar month that is month 1; needed for `YYYY-MM[-DD]` entries.
    pub origin: Option<YearMonth>,
    /// Last modelled month; the largest month in the file when `None`.
    pub horizon: Option<usize>,
}

/// Columns `component,month,min_thickness_mm`; `month` is a 1-based index
/// or a calendar date (`YYYY-MM` or `YYYY-MM-DD`, days floored to the month).
pub fn parse_inspections_str(
    text: &str,
    name: &str,
    topology: &SystemTopology,
    mapping: MonthMapping,
) -> Result<InspectionDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<(u64, InspectionRecord)> = Vec::new();
    let mut floored = 0usize;
    let headers = reader.headers().map_err(|e| csv_err(name, e))?.clone();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(name, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let row: InspectionRow = record
            .deserialize(Some(&headers))
            .map_err(|e| parse_err(name, line, e.to_string()))?;
        let component = topology
            .index_of(row.component)
            .ok_or_else(|| parse_err(name, line, format!("unknown component {}", row.component)))?;
        let month = row.month.trim();
        let time: i64 = if let Ok(t) = month.parse::<i64>() {
            t
        } else {
            let origin = mapping.origin.ok_or_else(|| {
                parse_err(name, line, format!("calendar month `{month}` needs origin_month in the config"))
            })?;
            let (year, mon, day) = if let Ok(d) = NaiveDate::parse_from_str(month, "%Y-%m-%d") {
                (d.year(), d.month(), Some(d.day()))
            } else if let Some(ym) = YearMonth::parse(month) {
                (ym.year, ym.month, None)
            } else {
                return Err(parse_err(name, line, format!("cannot read month `{month}`")));
            };
            if day.is_some_and(|d| d != 1) {
                floored += 1;
            }
            origin.index_of(year, mon)
        };
        if time < 1 || mapping.horizon.is_some_and(|h| time > h as i64) {
            let h = mapping.horizon.map_or("the horizon".to_string(), |h| h.to_string());
            return Err(parse_err(name, line, format!("month {time} outside 1..={h}")));
        }
        if !row.min_thickness_mm.is_finite() {
            return Err(parse_err(name, line, "thickness is not finite"));
        }
        rows.push((
            line,
            InspectionRecord {
                component,
                time: time as usize,
                thickness: row.min_thickness_mm,
            },
        ));
    }
    if floored > 0 {
        warn!("{name}: {floored} dates within a month were floored to the month");
    }
    let mut seen: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for (line, r) in &rows {
        if let Some(first) = seen.insert((r.component, r.time), *line) {
            return Err(parse_err(
                name,
                *line,
                format!(
                    "duplicate inspection of component {} in month {} (first on line {first})",
                    topology.id(r.component),
                    r.time
                ),
            ));
        }
    }
    let horizon = mapping
        .horizon
        .unwrap_or_else(|| rows.iter().map(|r| r.1.time).max().unwrap_or(1));
    Ok(InspectionDataset::new(horizon, rows.into_iter().map(|r| r.1).collect()))
}

pub fn parse_inspections(path: &Path, topology: &SystemTopology, mapping: MonthMapping) -> Result<InspectionDataset> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_inspections_str(&text, &path.display().to_string(), topology, mapping)
}

/// Inspection file with integer months; parses back to the same dataset.
pub fn emit_inspections(dataset: &InspectionDataset, topology: &SystemTopology) -> String {
    let mut out = String::from("component,month,min_thickness_mm\n");
    for r in dataset.records() {
        let _ = writeln!(out, "{},{},{}", topology.id(r.component), r.time, r.thickness);
    }
    out
}

const SYNTHETIC_STAGE: u64 = 0xDA7A;

fn default_grid_points() -> usize {
    12
}

/// The flat configuration file. Unset prior values take the offshore
/// defaults.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub topology: Option<PathBuf>,
    pub inspections: Option<PathBuf>,
    /// Use the built-in 64-component offshore layout and 174-point design,
    /// with thicknesses simulated from the prior, instead of topology and
    /// inspection files.
    #[serde(default)]
    pub synthetic_design: bool,
    /// Truth for the synthetic inspections; the prior values when unset.
    #[serde(rename = "synthetic_mu_WX")]
    pub synthetic_mu_wx: Option<f64>,
    pub synthetic_sigma_r: Option<f64>,
    pub origin_month: Option<String>,
    pub horizon: Option<usize>,
    #[serde(rename = "mu_WX")]
    pub mu_wx: Option<f64>,
    #[serde(rename = "sigma_WX")]
    pub sigma_wx: Option<f64>,
    #[serde(rename = "gamma_WX")]
    pub gamma_wx: Option<f64>,
    pub lambda: Option<f64>,
    pub sigma_y: Option<f64>,
    pub sigma_r: Option<f64>,
    pub sigma_r_grid: Option<Vec<f64>>,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    pub rho0: Option<f64>,
    #[serde(rename = "rhoC")]
    pub rho_c: Option<f64>,
    #[serde(rename = "rhoD")]
    pub rho_d: Option<f64>,
    pub nu: Option<f64>,
    pub locations: Option<usize>,
    pub x0: Option<f64>,
    pub alpha0: Option<f64>,
    pub realizations: Option<usize>,
    pub seed: Option<u64>,
    pub critical_thickness: Option<f64>,
    #[serde(default)]
    pub extend_months: usize,
    pub threshold: Option<f64>,
    pub noise_df: Option<f64>,
    pub hyper_distribution: Option<HyperDistribution>,
    pub variance_sampling: Option<VarianceSampling>,
    pub moment_method: Option<MomentMethod>,
}

/// Everything an analysis needs, read and validated.
#[derive(Debug, Clone)]
pub struct RunInputs {
    pub topology: SystemTopology,
    pub dataset: InspectionDataset,
    pub prior: PriorSpecification,
    pub extend_months: usize,
    pub threshold: f64,
}

pub fn read_config(path: &Path) -> Result<ConfigFile> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    toml::from_str(&text).map_err(|e| {
        let line = e
            .span()
            .map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
        Error::Parse {
            path: path.display().to_string(),
            line,
            message: e.message().to_string(),
        }
    })
}

impl ConfigFile {
    /// Reads the referenced files (relative to `base`) and builds the prior.
    pub fn resolve(&self, base: &Path) -> Result<RunInputs> {
        let (topology, x0_col, alpha0_col, dataset, mut prior) = if self.synthetic_design {
            let topology = offshore_topology();
            let prior = offshore_prior();
            let dataset = offshore_design().with_horizon(self.horizon.unwrap_or(OFFSHORE_HORIZON));
            let n = topology.len();
            (topology, vec![None; n], vec![None; n], dataset, prior)
        } else {
            let tpath = self
                .topology
                .as_ref()
                .ok_or_else(|| Error::Config("`topology` is required unless synthetic_design = true".into()))?;
            let ipath = self
                .inspections
                .as_ref()
                .ok_or_else(|| Error::Config("`inspections` is required unless synthetic_design = true".into()))?;
            let origin = match &self.origin_month {
                Some(s) => Some(
                    YearMonth::parse(s)
                        .ok_or_else(|| Error::Config(format!("origin_month `{s}` is not YYYY-MM")))?,
                ),
                None => return Err(Error::Config("`origin_month` (YYYY-MM of month 1) is required".into())),
            };
            let topo = parse_topology(&base.join(tpath))?;
            let mapping = MonthMapping {
                origin,
                horizon: self.horizon,
            };
            let dataset = parse_inspections(&base.join(ipath), &topo.topology, mapping)?;
            let n = topo.topology.len();
            let prior = PriorSpecification::offshore(n, 10.0, -0.02);
            (topo.topology, topo.x0, topo.alpha0, dataset, prior)
        };

        let h = &mut prior.hyper;
        let defaults = VarianceHyperprior::default();
        *h = VarianceHyperprior {
            mu_wx: self.mu_wx.unwrap_or(defaults.mu_wx),
            sigma_wx: self.sigma_wx.unwrap_or(defaults.sigma_wx),
            gamma_wx: self.gamma_wx.unwrap_or(defaults.gamma_wx),
            lambda: self.lambda.unwrap_or(defaults.lambda),
        };
        let corr = CorrelationParams::default();
        prior.corr = CorrelationParams {
            rho0: self.rho0.unwrap_or(corr.rho0),
            rho_c: self.rho_c.unwrap_or(corr.rho_c),
            rho_d: self.rho_d.unwrap_or(corr.rho_d),
            nu: self.nu.unwrap_or(corr.nu),
        };
        if let Some(v) = self.sigma_y {
            prior.sigma_y = v;
        }
        if let Some(v) = self.sigma_r {
            prior.sigma_r = v;
        }
        prior.sigma_r_candidates = match &self.sigma_r_grid {
            Some(g) => g.clone(),
            None => log_spaced(prior.hyper.mu_wx / 25.0, prior.hyper.mu_wx * 25.0, self.grid_points),
        };
        if let Some(v) = self.locations {
            prior.locations_per_component = v;
        }
        for c in 0..topology.len() {
            if let Some(v) = x0_col[c].or(self.x0) {
                prior.x0[c] = v;
            }
            if let Some(v) = alpha0_col[c].or(self.alpha0) {
                prior.alpha0[c] = v;
            }
        }
        if let Some(v) = self.realizations {
            prior.ensemble_size = v;
        }
        if let Some(v) = self.seed {
            prior.rng_seed = v;
        }
        if let Some(v) = self.critical_thickness {
            prior.critical_thickness = v;
        }
        if let Some(df) = self.noise_df {
            prior.noise = NoiseKind::StudentT { df };
        }
        if let Some(v) = self.hyper_distribution {
            prior.hyper_distribution = v;
        }
        if let Some(v) = self.variance_sampling {
            prior.variance_sampling = v;
        }
        if let Some(v) = self.moment_method {
            prior.moment_method = v;
        }
        prior.validate()?;
        let dataset = if self.synthetic_design {
            let truth = Truth {
                mu_wx: self.synthetic_mu_wx.unwrap_or(prior.hyper.mu_wx),
                sigma_r: self.synthetic_sigma_r.unwrap_or(prior.sigma_r),
            };
            if !(truth.mu_wx > 0.0 && truth.sigma_r >= 0.0) {
                return Err(Error::Config("synthetic truth variances must be positive".into()));
            }
            let model = SystemModel::new(prior.clone(), topology.clone())?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(prior.rng_seed, SYNTHETIC_STAGE));
            simulate_dataset(&model, &dataset, &truth, &mut rng)?.0
        } else {
            dataset
        };
        let threshold = self.threshold.unwrap_or(crate::diagnostics::DEFAULT_THRESHOLD);
        if !(threshold > 0.0) {
            return Err(Error::Config("threshold must be positive".into()));
        }
        Ok(RunInputs {
            topology,
            dataset,
            prior,
            extend_months: self.extend_months,
            threshold,
        })
    }
}

/// Reads a configuration file and everything it references.
pub fn load_inputs(path: &Path) -> Result<RunInputs> {
    let cfg = read_config(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    cfg.resolve(base)
}

/// Named text outputs written together once a run has succeeded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OutputSet {
    pub files: Vec<(String, String)>,
}

impl OutputSet {
    pub fn add(&mut self, name: impl Into<String>, contents: String) {
        self.files.push((name.into(), contents));
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|f| f.0 == name).map(|f| f.1.as_str())
    }

    /// Writes each file to a temporary name and renames it into place, so
    /// no reader ever sees a truncated file.
    pub fn commit(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        for (name, contents) in &self.files {
            let target = dir.join(name);
            let tmp = dir.join(format!(".{name}.partial"));
            fs::write(&tmp, contents).map_err(|e| io_err(&tmp, e))?;
            fs::rename(&tmp, &target).map_err(|e| io_err(&target, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topo() -> SystemTopology {
        parse_topology_str(
            "component_id,circuit_id,position_in_circuit\n7,1,0\n8,1,1\n9,2,0\n",
            "t.csv",
        )
        .unwrap()
        .topology
    }

    fn mapping() -> MonthMapping {
        MonthMapping {
            origin: YearMonth::parse("1998-01"),
            horizon: Some(83),
        }
    }

    #[test]
    fn three_rows() {
        let d = parse_inspections_str(
            "component,month,min_thickness_mm\n7,3,9.5\n9,1998-05,9.1\n8,1998-06-17,8.75\n",
            "i.csv",
            &topo(),
            mapping(),
        )
        .unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.times_of(2), vec![5]);
        assert_eq!(d.times_of(1), vec![6]);
    }

    #[test]
    fn errors_name_the_line() {
        let cases = [
            ("component,month,min_thickness_mm\n7,3,9.5\n7,90,9.1\n", 3),
            ("component,month,min_thickness_mm\n7,3,9.5\n8,4,9\n7,3,9.1\n", 4),
            ("component,month,min_thickness_mm\n7,3,9.5\n42,4,9\n", 3),
            ("component,month,min_thickness_mm\n7,3,abc\n", 2),
            ("component,month,min_thickness_mm\n7,1997-12,9\n", 2),
        ];
        for (text, want) in cases {
            match parse_inspections_str(text, "i.csv", &topo(), mapping()) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, want, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn calendar_months_need_an_origin() {
        let m = MonthMapping {
            origin: None,
            horizon: None,
        };
        let r = parse_inspections_str("component,month,min_thickness_mm\n7,1998-05,9\n", "i.csv", &topo(), m);
        assert!(matches!(r, Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn round_trip() {
        let t = topo();
        let d = InspectionDataset::new(
            83,
            vec![
                InspectionRecord { component: 0, time: 4, thickness: 9.123456789012345 },
                InspectionRecord { component: 2, time: 80, thickness: 0.1 + 0.2 },
            ],
        );
        let back = parse_inspections_str(&emit_inspections(&d, &t), "x", &t, mapping()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn config_keys_follow_symbol_names() {
        let cfg: ConfigFile = toml::from_str(
            "synthetic_design = true\nmu_WX = 0.02\nrhoC = 0.4\nsigma_r_grid = [0.001, 0.01]\nseed = 5\n",
        )
        .unwrap();
        let inputs = cfg.resolve(Path::new(".")).unwrap();
        assert_eq!(inputs.prior.hyper.mu_wx, 0.02);
        assert_eq!(inputs.prior.corr.rho_c, 0.4);
        assert_eq!(inputs.prior.sigma_r_candidates, vec![0.001, 0.01]);
        assert_eq!(inputs.dataset.len(), 174);
        assert!(toml::from_str::<ConfigFile>("mu_wx = 0.1\n").is_err());
    }

    #[test]
    fn outputs_are_renamed_into_place() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputSet::default();
        out.add("a.csv", "x\n1\n".into());
        out.commit(dir.path()).unwrap();
        let names: Vec<String> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(names, vec!["a.csv"]);
    }
}
