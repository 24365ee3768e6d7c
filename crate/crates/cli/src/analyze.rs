//! Batch analysis of annotation and prediction files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use failprobe_core::backends::{build_detector, BackendError, ImageInput, ModelDescriptor, ReplayFile, records_to_objects};
use failprobe_core::catalog::coco80;
use failprobe_core::classify::{AnnotatedObject, ClassSet, ClassifyContext, DistributionTag, FailureMode, FailureReport, PredictedObject, Thresholds, WarningTag};
use failprobe_core::explore::augment::decode_rgba;
use failprobe_core::geometry::{Label, MatchWeights};
use failprobe_core::metrics::{aggregate_reports, DisaggregatedReport, MetricAxis};
use failprobe_core::pipeline::{analyze_batch, AnalysisConfig, ImageJob};
use failprobe_core::store::{Persona, Scenario};

use crate::CliError;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Image file for live runs, relative to the annotations file.
#[derive(Debug, Clone, Deserialize)]
pub struct ImageRef {
    pub image_id: String,
    pub file: String,
}

/// A project manifest fragment: scenarios with their images, plus the
/// annotations drawn on those images.
#[derive(Debug, Clone, Deserialize)]
pub struct AnnotationFile {
    #[serde(default)]
    pub personas: Vec<Persona>,
    pub scenarios: Vec<Scenario>,
    #[serde(default)]
    pub images: Vec<ImageRef>,
    #[serde(default)]
    pub annotations: Vec<AnnotatedObject>,
}

impl AnnotationFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let file: AnnotationFile = serde_json::from_str(text).map_err(|e| CliError::Input(format!("annotations: {e}")))?;
        file.check()?;
        Ok(file)
    }

    fn check(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Input(format!("annotations: {msg}")));
        let personas: BTreeSet<&str> = self.personas.iter().map(|p| p.persona_id.as_str()).collect();
        let mut scenarios = BTreeSet::new();
        let mut images = BTreeSet::new();
        for s in &self.scenarios {
            if !scenarios.insert(s.scenario_id.as_str()) {
                return bad(format!("duplicate scenario {:?}", s.scenario_id));
            }
            if !self.personas.is_empty() && !personas.contains(s.persona_id.as_str()) {
                return bad(format!("scenario {} refers to unknown persona {:?}", s.scenario_id, s.persona_id));
            }
            images.extend(s.image_ids.iter().map(String::as_str));
        }
        let mut ids = BTreeSet::new();
        for a in &self.annotations {
            if !images.contains(a.image_id.as_str()) {
                return bad(format!("annotation {} is on image {:?}, which no scenario lists", a.id, a.image_id));
            }
            if !ids.insert((a.image_id.as_str(), a.id.as_str())) {
                return bad(format!("duplicate annotation {} on image {}", a.id, a.image_id));
            }
        }
        Ok(())
    }
}

/// Where predictions come from.
pub enum PredictionSource {
    Replay(ReplayFile),
    Live { descriptor: ModelDescriptor, base_dir: PathBuf },
}

pub struct AnalyzeJob {
    pub annotations: AnnotationFile,
    pub annotations_dir: PathBuf,
    pub predictions: PredictionSource,
    pub model_id: String,
    pub classes: ClassSet,
    pub config: AnalysisConfig,
    pub axes: Vec<MetricAxis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisMetrics {
    pub axis: MetricAxis,
    pub groups: Vec<DisaggregatedReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub model_id: String,
    pub weights: MatchWeights,
    pub thresholds: Thresholds,
    pub images: Vec<FailureReport>,
    pub metrics: Vec<AxisMetrics>,
}

impl AnalysisReport {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }
}

pub struct AnalyzeOutcome {
    pub report: AnalysisReport,
    pub notices: Vec<String>,
}

pub fn run(job: &AnalyzeJob) -> Result<AnalyzeOutcome, CliError> {
    let mut notices = Vec::new();
    let mut by_image: BTreeMap<&str, Vec<AnnotatedObject>> = BTreeMap::new();
    for a in &job.annotations.annotations {
        by_image.entry(a.image_id.as_str()).or_default().push(a.clone());
    }

    let detector = match &job.predictions {
        PredictionSource::Live { descriptor, base_dir } => Some(build_detector(descriptor, base_dir).map_err(backend)?),
        PredictionSource::Replay(_) => None,
    };
    let mut cache: BTreeMap<String, Vec<PredictedObject>> = BTreeMap::new();
    let mut jobs = Vec::new();
    for s in &job.annotations.scenarios {
        for image_id in &s.image_ids {
            if !cache.contains_key(image_id) {
                let objects = match (&job.predictions, &detector) {
                    (PredictionSource::Replay(file), _) => match file.get(image_id) {
                        Some(p) => records_to_objects(&p.objects, p.width, p.height)
                            .map_err(|e| CliError::Input(format!("predictions for {image_id}: {e}")))?,
                        None => {
                            notices.push(format!("no predictions recorded for image {image_id}; treating it as zero detections"));
                            Vec::new()
                        }
                    },
                    (PredictionSource::Live { .. }, Some(d)) => live_detect(d.as_ref(), image_id, &job.annotations, &job.annotations_dir)?,
                    (PredictionSource::Live { .. }, None) => unreachable!("live source always builds a detector"),
                };
                cache.insert(image_id.clone(), objects);
            }
            jobs.push(ImageJob {
                context: ClassifyContext {
                    image_id: image_id.clone(),
                    model_id: job.model_id.clone(),
                    persona_id: s.persona_id.clone(),
                    scenario_id: s.scenario_id.clone(),
                },
                annotations: by_image.get(image_id.as_str()).cloned().unwrap_or_default(),
                predictions: cache[image_id].clone(),
            });
        }
    }

    let images = analyze_batch(&jobs, Some(&job.classes), &job.config)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Input(e.to_string()))?;
    let metrics = job
        .axes
        .iter()
        .map(|&axis| AxisMetrics {
            axis,
            groups: aggregate_reports(&images, axis),
        })
        .collect();
    Ok(AnalyzeOutcome {
        report: AnalysisReport {
            schema_version: REPORT_SCHEMA_VERSION,
            model_id: job.model_id.clone(),
            weights: job.config.weights,
            thresholds: job.config.thresholds,
            images,
            metrics,
        },
        notices,
    })
}

fn backend(e: BackendError) -> CliError {
    match e {
        BackendError::Config(m) => CliError::Input(format!("model descriptor: {m}")),
        other => CliError::Backend(other.to_string()),
    }
}

fn live_detect(
    detector: &dyn failprobe_core::backends::Detector,
    image_id: &str,
    annotations: &AnnotationFile,
    dir: &Path,
) -> Result<Vec<PredictedObject>, CliError> {
    let image = annotations
        .images
        .iter()
        .find(|i| i.image_id == image_id)
        .ok_or_else(|| CliError::Input(format!("annotations: live runs need an images entry for {image_id}")))?;
    let path = dir.join(&image.file);
    let bytes = std::fs::read(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let decoded = decode_rgba(&bytes).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let input = ImageInput {
        image_id,
        bytes: &bytes,
        width: decoded.width(),
        height: decoded.height(),
    };
    detector.detect(&input).map(|p| p.objects).map_err(backend)
}

/// Reads a class list: either a JSON array of labels or an object with a
/// `class_list` array.
pub fn parse_classes(text: &str) -> Result<ClassSet, CliError> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Classes {
        List(Vec<String>),
        Model { class_list: Vec<String> },
    }
    let parsed: Classes = serde_json::from_str(text).map_err(|e| CliError::Input(format!("classes: {e}")))?;
    let list = match parsed {
        Classes::List(l) | Classes::Model { class_list: l } => l,
    };
    let set = list
        .iter()
        .map(|l| Label::new(l).map_err(|e| CliError::Input(format!("classes: {e}"))))
        .collect::<Result<ClassSet, _>>()?;
    if set.is_empty() {
        return Err(CliError::Input("classes: class list is empty".into()));
    }
    Ok(set)
}

pub fn default_classes() -> ClassSet {
    coco80()
}

fn cell(count: u64, percent: f64) -> String {
    format!("{count} ({percent:.1}%)")
}

/// Fixed-width text table, one block per axis. Column order:
/// CD FD MD UD | ID OOD | FTD CQS CQB.
pub fn render_table(report: &AnalysisReport) -> String {
    const W: usize = 13;
    let mut out = String::new();
    let _ = writeln!(out, "model: {}", report.model_id);
    for block in &report.metrics {
        let group_w = block.groups.iter().map(|g| g.group_id.len()).max().unwrap_or(0).max(5);
        let _ = writeln!(out);
        let _ = writeln!(out, "by {}", block.axis);
        let mut header = format!("{:<group_w$}", "group");
        let mut rule = "-".repeat(group_w);
        for section in [&["CD", "FD", "MD", "UD"][..], &["ID", "OOD"][..], &["FTD", "CQS", "CQB"][..]] {
            header.push_str(" |");
            rule.push_str("-+");
            for name in section.iter() {
                let _ = write!(header, " {name:<W$}");
                rule.push_str(&"-".repeat(W + 1));
            }
        }
        let _ = writeln!(out, "{}", header.trim_end());
        let _ = writeln!(out, "{rule}");
        for g in &block.groups {
            let mut row = format!("{:<group_w$}", g.group_id);
            row.push_str(" |");
            for m in FailureMode::ALL {
                let _ = write!(row, " {:<W$}", cell(g.mode_counts[&m], g.mode_percent[&m]));
            }
            row.push_str(" |");
            for d in DistributionTag::ALL {
                let _ = write!(row, " {:<W$}", cell(g.dist_counts[&d], g.dist_percent[&d]));
            }
            row.push_str(" |");
            for w in WarningTag::ALL {
                let _ = write!(row, " {:<W$}", cell(g.warning_counts[&w], g.warning_percent[&w]));
            }
            let _ = writeln!(out, "{}", row.trim_end());
        }
        if block.groups.is_empty() {
            let _ = writeln!(out, "(no explorations)");
        }
    }
    out
}
