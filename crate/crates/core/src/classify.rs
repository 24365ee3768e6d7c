//! Observation-layer failure classification: turns an assignment between
//! expected and predicted objects into CD/FD/MD/UD instances with warnings
//! and in/out-of-distribution tags.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::Assignment;
use crate::geometry::{iou, Label, LabeledBox};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifyError {
    #[error("model class list is unavailable; cannot decide in/out of distribution")]
    ClassesUnavailable,
    #[error("label is empty after normalization")]
    EmptyLabel,
    #[error("assignment pair ({annotation}, {prediction}) is out of range for {annotations} annotations and {predictions} predictions")]
    IndexOutOfRange {
        annotation: usize,
        prediction: usize,
        annotations: usize,
        predictions: usize,
    },
    #[error("assignment reuses annotation {0} or prediction {1}")]
    DuplicateIndex(usize, usize),
    #[error("threshold {name}={value} is outside [0, 1]")]
    ThresholdOutOfRange { name: &'static str, value: f64 },
    #[error("severity {0} is outside 1..=7")]
    SeverityOutOfRange(i64),
    #[error("confidence score {0} is outside [0, 1]")]
    ScoreOutOfRange(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedObject {
    pub id: String,
    pub image_id: String,
    #[serde(flatten)]
    pub labeled: LabeledBox,
}

/// Detector confidence in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Score(f64);

impl Score {
    pub fn new(value: f64) -> Result<Self, ClassifyError> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(ClassifyError::ScoreOutOfRange(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Score {
    type Error = ClassifyError;
    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Score::new(v)
    }
}

impl From<Score> for f64 {
    fn from(s: Score) -> Self {
        s.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedObject {
    pub id: String,
    #[serde(flatten)]
    pub labeled: LabeledBox,
    pub score: Score,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FailureMode {
    /// Matched, same label.
    CD,
    /// Matched, different label.
    FD,
    /// Expected object with no matching prediction.
    MD,
    /// Prediction with no matching expectation.
    UD,
}

impl FailureMode {
    pub const ALL: [FailureMode; 4] = [Self::CD, Self::FD, Self::MD, Self::UD];

    pub fn is_failure(self) -> bool {
        self != Self::CD
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::CD => "CD",
            Self::FD => "FD",
            Self::MD => "MD",
            Self::UD => "UD",
        }
    }
}

impl fmt::Display for FailureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum WarningTag {
    /// Failing to detect: the model returned no objects for the image.
    FTD,
    /// Critical quality of score: confidence below the floor.
    CQS,
    /// Critical quality of box: matched pair IoU below the floor.
    CQB,
}

impl WarningTag {
    pub const ALL: [WarningTag; 3] = [Self::FTD, Self::CQS, Self::CQB];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DistributionTag {
    ID,
    OOD,
}

impl DistributionTag {
    pub const ALL: [DistributionTag; 2] = [Self::ID, Self::OOD];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawThresholds", into = "RawThresholds")]
pub struct Thresholds {
    confidence_floor: f64,
    iou_floor: f64,
}

#[derive(Serialize, Deserialize)]
struct RawThresholds {
    confidence_floor: f64,
    iou_floor: f64,
}

impl TryFrom<RawThresholds> for Thresholds {
    type Error = ClassifyError;
    fn try_from(r: RawThresholds) -> Result<Self, Self::Error> {
        Thresholds::new(r.confidence_floor, r.iou_floor)
    }
}

impl From<Thresholds> for RawThresholds {
    fn from(t: Thresholds) -> Self {
        RawThresholds {
            confidence_floor: t.confidence_floor,
            iou_floor: t.iou_floor,
        }
    }
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            confidence_floor: 0.95,
            iou_floor: 0.7,
        }
    }
}

impl Thresholds {
    pub fn new(confidence_floor: f64, iou_floor: f64) -> Result<Self, ClassifyError> {
        for (name, value) in [("confidence_floor", confidence_floor), ("iou_floor", iou_floor)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(ClassifyError::ThresholdOutOfRange { name, value });
            }
        }
        Ok(Self {
            confidence_floor,
            iou_floor,
        })
    }

    pub fn confidence_floor(&self) -> f64 {
        self.confidence_floor
    }

    pub fn iou_floor(&self) -> f64 {
        self.iou_floor
    }
}

/// Designer-assigned severity on a 1..=7 scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub struct Severity(u8);

impl Severity {
    pub const LOWEST: Severity = Severity(1);

    pub fn new(value: i64) -> Result<Self, ClassifyError> {
        if (1..=7).contains(&value) {
            Ok(Self(value as u8))
        } else {
            Err(ClassifyError::SeverityOutOfRange(value))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl Default for Severity {
    fn default() -> Self {
        Self::LOWEST
    }
}

impl TryFrom<i64> for Severity {
    type Error = ClassifyError;
    fn try_from(v: i64) -> Result<Self, Self::Error> {
        Severity::new(v)
    }
}

impl From<Severity> for i64 {
    fn from(s: Severity) -> Self {
        i64::from(s.0)
    }
}

/// Where an image was explored: which model, for which persona and scenario.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassifyContext {
    pub image_id: String,
    pub model_id: String,
    pub persona_id: String,
    pub scenario_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureInstance {
    pub instance_id: String,
    pub image_id: String,
    pub mode: FailureMode,
    pub annotation_id: Option<String>,
    pub prediction_id: Option<String>,
    pub distribution: Option<DistributionTag>,
    pub warnings: BTreeSet<WarningTag>,
    pub pair_iou: Option<f64>,
    pub severity: Severity,
    pub model_id: String,
    pub persona_id: String,
    pub scenario_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_modified: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureReport {
    #[serde(flatten)]
    pub context: ClassifyContext,
    pub instances: Vec<FailureInstance>,
    pub image_warnings: BTreeSet<WarningTag>,
}

impl FailureReport {
    pub fn count(&self, mode: FailureMode) -> usize {
        self.instances.iter().filter(|i| i.mode == mode).count()
    }
}

/// Set of labels a model can detect.
pub type ClassSet = BTreeSet<Label>;

pub fn check_distribution(label: &str, model_classes: Option<&ClassSet>) -> Result<DistributionTag, ClassifyError> {
    let label = Label::new(label).map_err(|_| ClassifyError::EmptyLabel)?;
    let classes = model_classes.ok_or(ClassifyError::ClassesUnavailable)?;
    Ok(if classes.contains(&label) {
        DistributionTag::ID
    } else {
        DistributionTag::OOD
    })
}

/// Warnings found for one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WarningAssessment {
    /// CQS flag per prediction index.
    pub low_score: Vec<bool>,
    /// `(annotation, prediction, iou, cqb)` for each matched pair.
    pub pairs: Vec<(usize, usize, f64, bool)>,
    pub image: BTreeSet<WarningTag>,
}

pub fn assess_warnings(
    assignment: &Assignment,
    anns: &[AnnotatedObject],
    preds: &[PredictedObject],
    thresholds: &Thresholds,
) -> Result<WarningAssessment, ClassifyError> {
    validate_assignment(assignment, anns.len(), preds.len())?;
    let mut image = BTreeSet::new();
    if preds.is_empty() {
        image.insert(WarningTag::FTD);
    }
    let low_score = preds
        .iter()
        .map(|p| p.score.value() < thresholds.confidence_floor)
        .collect();
    let pairs = assignment
        .pairs
        .iter()
        .map(|&(a, p)| {
            let overlap = iou(&anns[a].labeled.bbox, &preds[p].labeled.bbox);
            (a, p, overlap, overlap < thresholds.iou_floor)
        })
        .collect();
    Ok(WarningAssessment { low_score, pairs, image })
}

fn validate_assignment(assignment: &Assignment, annotations: usize, predictions: usize) -> Result<(), ClassifyError> {
    let mut seen_a = vec![false; annotations];
    let mut seen_p = vec![false; predictions];
    for &(a, p) in &assignment.pairs {
        if a >= annotations || p >= predictions {
            return Err(ClassifyError::IndexOutOfRange {
                annotation: a,
                prediction: p,
                annotations,
                predictions,
            });
        }
        if seen_a[a] || seen_p[p] {
            return Err(ClassifyError::DuplicateIndex(a, p));
        }
        seen_a[a] = true;
        seen_p[p] = true;
    }
    Ok(())
}

/// Applies the rule table to one image. Instances are emitted in annotation
/// order (CD/FD/MD) followed by unmatched predictions (UD) in prediction
/// order, with ids `<mode>_<n>` numbered per mode from 1.
pub fn classify(
    anns: &[AnnotatedObject],
    preds: &[PredictedObject],
    assignment: &Assignment,
    model_classes: Option<&ClassSet>,
    thresholds: &Thresholds,
    context: &ClassifyContext,
) -> Result<FailureReport, ClassifyError> {
    let warnings = assess_warnings(assignment, anns, preds, thresholds)?;
    let mut pair_of_ann: Vec<Option<(usize, f64, bool)>> = vec![None; anns.len()];
    let mut matched_pred = vec![false; preds.len()];
    for &(a, p, overlap, cqb) in &warnings.pairs {
        pair_of_ann[a] = Some((p, overlap, cqb));
        matched_pred[p] = true;
    }

    let mut counters = [0usize; 4];
    let mut next_id = |mode: FailureMode| {
        let slot = &mut counters[mode as usize];
        *slot += 1;
        format!("{}_{}", mode.as_str().to_lowercase(), slot)
    };
    let base = |mode: FailureMode, instance_id: String| FailureInstance {
        instance_id,
        image_id: context.image_id.clone(),
        mode,
        annotation_id: None,
        prediction_id: None,
        distribution: None,
        warnings: BTreeSet::new(),
        pair_iou: None,
        severity: Severity::LOWEST,
        model_id: context.model_id.clone(),
        persona_id: context.persona_id.clone(),
        scenario_id: context.scenario_id.clone(),
        last_modified: None,
    };

    let mut instances = Vec::with_capacity(anns.len() + preds.len());
    for (a, ann) in anns.iter().enumerate() {
        let distribution = check_distribution(ann.labeled.label.as_str(), model_classes)?;
        let instance = match pair_of_ann[a] {
            Some((p, overlap, cqb)) => {
                let pred = &preds[p];
                let mode = if ann.labeled.label == pred.labeled.label {
                    FailureMode::CD
                } else {
                    FailureMode::FD
                };
                let mut inst = base(mode, next_id(mode));
                inst.prediction_id = Some(pred.id.clone());
                inst.pair_iou = Some(overlap);
                if warnings.low_score[p] {
                    inst.warnings.insert(WarningTag::CQS);
                }
                if cqb {
                    inst.warnings.insert(WarningTag::CQB);
                }
                inst
            }
            None => base(FailureMode::MD, next_id(FailureMode::MD)),
        };
        instances.push(FailureInstance {
            annotation_id: Some(ann.id.clone()),
            distribution: Some(distribution),
            ..instance
        });
    }
    for (p, pred) in preds.iter().enumerate() {
        if matched_pred[p] {
            continue;
        }
        let mut inst = base(FailureMode::UD, next_id(FailureMode::UD));
        inst.prediction_id = Some(pred.id.clone());
        if warnings.low_score[p] {
            inst.warnings.insert(WarningTag::CQS);
        }
        instances.push(inst);
    }

    Ok(FailureReport {
        context: context.clone(),
        instances,
        image_warnings: warnings.image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::optimal_assignment;
    use crate::geometry::{build_cost_matrix, BoundingBox, MatchWeights};

    fn ann(id: &str, label: &str, b: [f64; 4]) -> AnnotatedObject {
        AnnotatedObject {
            id: id.into(),
            image_id: "img".into(),
            labeled: LabeledBox::new(Label::new(label).unwrap(), BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap()),
        }
    }

    fn pred(id: &str, label: &str, b: [f64; 4], score: f64) -> PredictedObject {
        PredictedObject {
            id: id.into(),
            labeled: LabeledBox::new(Label::new(label).unwrap(), BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap()),
            score: Score::new(score).unwrap(),
        }
    }

    fn classes(labels: &[&str]) -> ClassSet {
        labels.iter().map(|l| Label::new(l).unwrap()).collect()
    }

    fn ctx() -> ClassifyContext {
        ClassifyContext {
            image_id: "img".into(),
            model_id: "m".into(),
            persona_id: "p".into(),
            scenario_id: "s".into(),
        }
    }

    fn run(anns: &[AnnotatedObject], preds: &[PredictedObject], cls: &ClassSet) -> FailureReport {
        let a: Vec<_> = anns.iter().map(|x| x.labeled.clone()).collect();
        let p: Vec<_> = preds.iter().map(|x| x.labeled.clone()).collect();
        let assignment = optimal_assignment(&build_cost_matrix(&a, &p, &MatchWeights::default()));
        classify(anns, preds, &assignment, Some(cls), &Thresholds::default(), &ctx()).unwrap()
    }

    #[test]
    fn distribution_check() {
        let coco = classes(&["car", "person"]);
        assert_eq!(check_distribution("car", Some(&coco)), Ok(DistributionTag::ID));
        assert_eq!(check_distribution(" Car", Some(&coco)), Ok(DistributionTag::ID));
        assert_eq!(check_distribution("taxi", Some(&coco)), Ok(DistributionTag::OOD));
        assert_eq!(check_distribution("", Some(&coco)), Err(ClassifyError::EmptyLabel));
        assert_eq!(check_distribution("car", None), Err(ClassifyError::ClassesUnavailable));
    }

    #[test]
    fn taxi_teaser() {
        let anns = [ann("a0", "taxi", [0.1, 0.4, 0.5, 0.8])];
        let preds = [
            pred("p0", "car", [0.11, 0.4, 0.5, 0.8], 0.98),
            pred("p1", "car", [0.7, 0.3, 0.85, 0.45], 0.97),
        ];
        let r = run(&anns, &preds, &classes(&["car", "person"]));
        assert_eq!(r.instances.len(), 2);
        assert_eq!(r.instances[0].mode, FailureMode::FD);
        assert_eq!(r.instances[0].distribution, Some(DistributionTag::OOD));
        assert_eq!(r.instances[0].prediction_id.as_deref(), Some("p0"));
        assert_eq!(r.instances[1].mode, FailureMode::UD);
        assert_eq!(r.instances[1].prediction_id.as_deref(), Some("p1"));
        assert_eq!(r.instances[1].distribution, None);
        assert!(r.image_warnings.is_empty());
        assert_eq!(r.instances[0].instance_id, "fd_1");
        assert_eq!(r.instances[1].instance_id, "ud_1");
    }

    #[test]
    fn perfect_agreement_is_all_cd() {
        let anns = [ann("a0", "cat", [0.1, 0.1, 0.3, 0.3]), ann("a1", "dog", [0.5, 0.5, 0.9, 0.9])];
        let preds = [
            pred("p0", "cat", [0.1, 0.1, 0.3, 0.3], 0.99),
            pred("p1", "dog", [0.5, 0.5, 0.9, 0.9], 0.99),
        ];
        let r = run(&anns, &preds, &classes(&["cat", "dog"]));
        assert!(r.instances.iter().all(|i| i.mode == FailureMode::CD && i.warnings.is_empty()));
        assert!(r.image_warnings.is_empty());
    }

    #[test]
    fn no_predictions_gives_ftd_and_md() {
        let anns = [ann("a", "cat", [0.1, 0.1, 0.3, 0.3]), ann("b", "dog", [0.5, 0.5, 0.9, 0.9])];
        let r = run(&anns, &[], &classes(&["cat"]));
        assert_eq!(r.instances.len(), 2);
        assert!(r.instances.iter().all(|i| i.mode == FailureMode::MD && i.prediction_id.is_none()));
        assert_eq!(r.image_warnings, BTreeSet::from([WarningTag::FTD]));
        assert_eq!(r.instances[1].distribution, Some(DistributionTag::OOD));
    }

    #[test]
    fn confidence_boundary_is_strict() {
        let anns = [];
        let preds = [pred("p0", "cat", [0.1, 0.1, 0.3, 0.3], 0.95), pred("p1", "cat", [0.5, 0.5, 0.7, 0.7], 0.9499)];
        let w = assess_warnings(&Assignment::empty(), &anns, &preds, &Thresholds::default()).unwrap();
        assert_eq!(w.low_score, vec![false, true]);
    }

    #[test]
    fn iou_boundary_is_strict() {
        // IoU of [0,0,1,0.7] inside the unit box is exactly 0.7 in binary arithmetic
        let anns = [ann("a", "cat", [0.0, 0.0, 1.0, 1.0])];
        let exact = [pred("p", "cat", [0.0, 0.0, 1.0, 0.7], 0.99)];
        let below = [pred("p", "cat", [0.0, 0.0, 1.0, 0.69], 0.99)];
        let pairs = Assignment {
            pairs: vec![(0, 0)],
            total_cost: 0.0,
        };
        let w = assess_warnings(&pairs, &anns, &exact, &Thresholds::default()).unwrap();
        assert!(!w.pairs[0].3);
        let w = assess_warnings(&pairs, &anns, &below, &Thresholds::default()).unwrap();
        assert!(w.pairs[0].3);
    }

    #[test]
    fn inconsistent_assignment_rejected() {
        let anns = [ann("a", "cat", [0.0, 0.0, 1.0, 1.0])];
        let bad = Assignment {
            pairs: vec![(0, 3)],
            total_cost: 0.0,
        };
        let err = classify(&anns, &[], &bad, Some(&classes(&["cat"])), &Thresholds::default(), &ctx()).unwrap_err();
        assert!(matches!(err, ClassifyError::IndexOutOfRange { .. }));
    }

    #[test]
    fn missing_classes_is_an_error() {
        let anns = [ann("a", "cat", [0.0, 0.0, 1.0, 1.0])];
        let err = classify(&anns, &[], &Assignment::empty(), None, &Thresholds::default(), &ctx()).unwrap_err();
        assert_eq!(err, ClassifyError::ClassesUnavailable);
    }

    #[test]
    fn severity_range() {
        assert!(Severity::new(0).is_err());
        assert!(Severity::new(8).is_err());
        assert_eq!(Severity::new(5).unwrap().value(), 5);
        assert!(serde_json::from_str::<Severity>("9").is_err());
    }

    #[test]
    fn score_and_threshold_validation() {
        assert!(Score::new(1.2).is_err());
        assert!(Thresholds::new(1.5, 0.7).is_err());
        assert!(serde_json::from_str::<Thresholds>(r#"{"confidence_floor":0.5,"iou_floor":-1}"#).is_err());
    }
}
