//! Disaggregated failure metrics per persona, scenario or model.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{DistributionTag, FailureInstance, FailureMode, FailureReport, WarningTag};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no models to compare")]
    NoModels,
    #[error("unknown metric axis {0:?}; expected persona, scenario or model")]
    UnknownAxis(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricAxis {
    Persona,
    Scenario,
    Model,
}

impl MetricAxis {
    pub const ALL: [MetricAxis; 3] = [Self::Persona, Self::Scenario, Self::Model];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Persona => "persona",
            Self::Scenario => "scenario",
            Self::Model => "model",
        }
    }

    fn key_of_instance(self, i: &FailureInstance) -> &str {
        match self {
            Self::Persona => &i.persona_id,
            Self::Scenario => &i.scenario_id,
            Self::Model => &i.model_id,
        }
    }

    fn key_of_warning(self, w: &ImageWarning) -> &str {
        match self {
            Self::Persona => &w.persona_id,
            Self::Scenario => &w.scenario_id,
            Self::Model => &w.model_id,
        }
    }
}

impl fmt::Display for MetricAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricAxis {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "persona" => Ok(Self::Persona),
            "scenario" => Ok(Self::Scenario),
            "model" => Ok(Self::Model),
            other => Err(MetricsError::UnknownAxis(other.to_string())),
        }
    }
}

/// An image-level warning (FTD) together with the exploration it came from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ImageWarning {
    pub image_id: String,
    pub model_id: String,
    pub persona_id: String,
    pub scenario_id: String,
    pub tag: WarningTag,
}

impl ImageWarning {
    pub fn from_report(report: &FailureReport) -> Vec<ImageWarning> {
        report
            .image_warnings
            .iter()
            .map(|&tag| ImageWarning {
                image_id: report.context.image_id.clone(),
                model_id: report.context.model_id.clone(),
                persona_id: report.context.persona_id.clone(),
                scenario_id: report.context.scenario_id.clone(),
                tag,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Totals {
    pub instances: u64,
    pub annotated_objects: u64,
    pub warnings: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisaggregatedReport {
    pub axis: MetricAxis,
    pub group_id: String,
    pub totals: Totals,
    pub mode_counts: BTreeMap<FailureMode, u64>,
    pub mode_percent: BTreeMap<FailureMode, f64>,
    pub dist_counts: BTreeMap<DistributionTag, u64>,
    pub dist_percent: BTreeMap<DistributionTag, f64>,
    pub warning_counts: BTreeMap<WarningTag, u64>,
    pub warning_percent: BTreeMap<WarningTag, f64>,
}

impl DisaggregatedReport {
    fn empty(axis: MetricAxis, group_id: String) -> Self {
        Self {
            axis,
            group_id,
            totals: Totals::default(),
            mode_counts: FailureMode::ALL.iter().map(|&m| (m, 0)).collect(),
            mode_percent: BTreeMap::new(),
            dist_counts: DistributionTag::ALL.iter().map(|&d| (d, 0)).collect(),
            dist_percent: BTreeMap::new(),
            warning_counts: WarningTag::ALL.iter().map(|&w| (w, 0)).collect(),
            warning_percent: BTreeMap::new(),
        }
    }

    fn finish(&mut self) {
        self.mode_percent = percent_map(&self.mode_counts);
        self.dist_percent = percent_map(&self.dist_counts);
        self.warning_percent = percent_map(&self.warning_counts);
        self.totals.instances = self.mode_counts.values().sum();
        self.totals.annotated_objects = self.dist_counts.values().sum();
        self.totals.warnings = self.warning_counts.values().sum();
    }

    pub fn cd_percent(&self) -> f64 {
        self.mode_percent.get(&FailureMode::CD).copied().unwrap_or(0.0)
    }
}

fn percent_map<K: Ord + Copy>(counts: &BTreeMap<K, u64>) -> BTreeMap<K, f64> {
    let values: Vec<u64> = counts.values().copied().collect();
    counts.keys().copied().zip(round_percentages(&values)).collect()
}

/// Percent shares rounded half-up to one decimal.
///
/// If independent rounding pushes the total more than 0.1 away from 100, the
/// entries with the largest rounding error in the offending direction are
/// nudged by 0.1 until the total is back within 0.1. All zeros map to zeros.
pub fn round_percentages(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return vec![0.0; counts.len()];
    }
    let n = u128::from(total);
    // tenths of a percent, half-up: floor((2000c + n) / 2n)
    let mut tenths: Vec<i128> = counts
        .iter()
        .map(|&c| ((2000 * u128::from(c) + n) / (2 * n)) as i128)
        .collect();
    // rounding error scaled by n: tenths*n - 1000c
    let error = |t: &[i128], k: usize| t[k] * n as i128 - 1000 * i128::from(counts[k]);
    loop {
        let sum: i128 = tenths.iter().sum();
        if sum > 1001 {
            let k = (0..tenths.len())
                .filter(|&k| tenths[k] > 0)
                .max_by(|&a, &b| error(&tenths, a).cmp(&error(&tenths, b)).then(b.cmp(&a)))
                .expect("positive sum has a positive entry");
            tenths[k] -= 1;
        } else if sum < 999 {
            let k = (0..tenths.len())
                .max_by(|&a, &b| (-error(&tenths, a)).cmp(&-error(&tenths, b)).then(b.cmp(&a)))
                .expect("nonempty");
            tenths[k] += 1;
        } else {
            break;
        }
    }
    tenths.into_iter().map(|t| t as f64 / 10.0).collect()
}

/// One report per distinct group on `axis`, sorted by group id.
pub fn aggregate(instances: &[FailureInstance], image_warnings: &[ImageWarning], axis: MetricAxis) -> Vec<DisaggregatedReport> {
    let mut groups: BTreeMap<String, DisaggregatedReport> = BTreeMap::new();
    for inst in instances {
        let key = axis.key_of_instance(inst);
        let report = groups
            .entry(key.to_string())
            .or_insert_with(|| DisaggregatedReport::empty(axis, key.to_string()));
        *report.mode_counts.entry(inst.mode).or_default() += 1;
        if let Some(d) = inst.distribution {
            *report.dist_counts.entry(d).or_default() += 1;
        }
        for &w in &inst.warnings {
            *report.warning_counts.entry(w).or_default() += 1;
        }
    }
    let unique: BTreeSet<&ImageWarning> = image_warnings.iter().collect();
    for w in unique {
        let key = axis.key_of_warning(w);
        let report = groups
            .entry(key.to_string())
            .or_insert_with(|| DisaggregatedReport::empty(axis, key.to_string()));
        *report.warning_counts.entry(w.tag).or_default() += 1;
    }
    groups
        .into_values()
        .map(|mut r| {
            r.finish();
            r
        })
        .collect()
}

/// Convenience over [`aggregate`] for a batch of per-image reports.
pub fn aggregate_reports(reports: &[FailureReport], axis: MetricAxis) -> Vec<DisaggregatedReport> {
    let instances: Vec<FailureInstance> = reports.iter().flat_map(|r| r.instances.iter().cloned()).collect();
    let warnings: Vec<ImageWarning> = reports.iter().flat_map(ImageWarning::from_report).collect();
    aggregate(&instances, &warnings, axis)
}

/// Model ids ordered by CD share, highest first; ties broken by model id.
pub fn compare_models(reports_by_model: &BTreeMap<String, DisaggregatedReport>) -> Result<Vec<String>, MetricsError> {
    if reports_by_model.is_empty() {
        return Err(MetricsError::NoModels);
    }
    let mut ranked: Vec<(&String, i64)> = reports_by_model
        .iter()
        .map(|(id, r)| (id, (r.cd_percent() * 10.0).round() as i64))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(ranked.into_iter().map(|(id, _)| id.clone()).collect())
}
