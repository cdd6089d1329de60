//! Discrepancy diagnostics on the data and on adjusted beliefs.
//!
//! Every value is a Mahalanobis form divided by its rank, so it has
//! expectation one when data and prior agree. Values above the threshold
//! (default 4, i.e. `|1 − Dis| = 3`) are flagged.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::bayes_linear::{mahalanobis, DEFAULT_RTOL};
use crate::calibration::observation_discrepancy;
use crate::error::{Error, Result};
use crate::forecast::AdjustedBelief;
use crate::simulator::{MomentEstimates, Quantity};
use crate::system::InspectionDataset;

pub const DEFAULT_THRESHOLD: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Each observation against its own prior mean and variance.
    PerObservation,
    /// All observations of a component jointly.
    PerComponent,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Group {
    Observation { component: usize, time: usize },
    Component { component: usize },
    Global,
    Block { quantity: Quantity },
}

impl Group {
    pub fn kind(&self) -> &'static str {
        match self {
            Group::Observation { .. } => "observations",
            Group::Component { .. } => "components",
            Group::Global => "global",
            Group::Block { .. } => "blocks",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Group::Observation { component, time } => write!(f, "observation c{component} t{time}"),
            Group::Component { component } => write!(f, "component c{component}"),
            Group::Global => write!(f, "global"),
            Group::Block { quantity } => write!(f, "{} block", quantity.name()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiscrepancyRow {
    pub group: Group,
    /// Rank-normalised discrepancy; `None` when the group's variance is
    /// degenerate.
    pub value: Option<f64>,
    pub rank: usize,
    pub flagged: bool,
}

impl DiscrepancyRow {
    fn new(group: Group, value: Option<(f64, usize)>, threshold: f64) -> Self {
        let (value, rank) = match value {
            Some((v, r)) => (Some(v), r),
            None => (None, 0),
        };
        Self {
            group,
            value,
            rank,
            flagged: value.is_some_and(|v| v > threshold),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticReport {
    pub threshold: f64,
    pub rows: Vec<DiscrepancyRow>,
    /// Components left out of variance learning for having fewer than three
    /// observations.
    pub skipped_components: Vec<usize>,
}

impl DiagnosticReport {
    pub fn flagged(&self) -> impl Iterator<Item = &DiscrepancyRow> {
        self.rows.iter().filter(|r| r.flagged)
    }

    pub fn indeterminate(&self) -> impl Iterator<Item = &DiscrepancyRow> {
        self.rows.iter().filter(|r| r.value.is_none())
    }
}

/// Components with fewer than three observations, including unobserved ones.
pub fn skipped_components(dataset: &InspectionDataset, components: usize) -> Vec<usize> {
    (0..components).filter(|&c| dataset.times_of(c).len() < 3).collect()
}

/// `Dis(Y)` of the dataset's values under prior moments on the same design.
pub fn data_discrepancy(
    dataset: &InspectionDataset,
    moments: &MomentEstimates,
    grouping: Grouping,
    threshold: f64,
) -> Result<DiagnosticReport> {
    let n = dataset.len();
    if moments.e_y.len() != n {
        return Err(Error::shape(format!(
            "moments cover {} observations, dataset has {n}",
            moments.e_y.len()
        )));
    }
    let y = dataset.values();
    let recs = dataset.records();
    let rows = match grouping {
        Grouping::PerObservation => (0..n)
            .map(|i| {
                let v = moments.var_y[(i, i)];
                let value = (v > 0.0).then(|| ((y[i] - moments.e_y[i]).powi(2) / v, 1));
                let group = Group::Observation {
                    component: recs[i].component,
                    time: recs[i].time,
                };
                DiscrepancyRow::new(group, value, threshold)
            })
            .collect(),
        Grouping::PerComponent => {
            let mut by: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, r) in recs.iter().enumerate() {
                by.entry(r.component).or_default().push(i);
            }
            by.into_iter()
                .map(|(component, idx)| {
                    let sub_y = y.select_rows(&idx);
                    let sub_e = moments.e_y.select_rows(&idx);
                    let sub_v = moments.var_y.select_rows(&idx).select_columns(&idx);
                    let value = match mahalanobis(&sub_y, &sub_e, &sub_v, DEFAULT_RTOL) {
                        Ok(d) => Some((d.ratio(), d.rank)),
                        Err(Error::DegenerateVariance(_)) => None,
                        Err(e) => return Err(e),
                    };
                    Ok(DiscrepancyRow::new(Group::Component { component }, value, threshold))
                })
                .collect::<Result<_>>()?
        }
        Grouping::Global => {
            let value = match observation_discrepancy(dataset, moments) {
                Ok(d) => Some((d.ratio(), d.rank)),
                Err(Error::DegenerateVariance(_)) => None,
                Err(e) => return Err(e),
            };
            vec![DiscrepancyRow::new(Group::Global, value, threshold)]
        }
    };
    Ok(DiagnosticReport {
        threshold,
        rows,
        skipped_components: moments.scheme.skipped().to_vec(),
    })
}

/// `Dis_Y` of each quantity block present in the adjusted beliefs.
pub fn adjustment_diagnostics(beliefs: &AdjustedBelief, threshold: f64) -> DiagnosticReport {
    let rows = [Quantity::Thickness, Quantity::Zmin, Quantity::Rate]
        .into_iter()
        .filter_map(|quantity| {
            let idx = beliefs.indices_of(quantity);
            if idx.is_empty() {
                return None;
            }
            let value = beliefs.discrepancy(&idx).map(|d| (d.ratio(), d.rank));
            Some(DiscrepancyRow::new(Group::Block { quantity }, value, threshold))
        })
        .collect();
    DiagnosticReport {
        threshold,
        rows,
        skipped_components: Vec::new(),
    }
}
