use serde::{Deserialize, Serialize};

use failprobe_core::backends::{ImageInput, Prediction};
use failprobe_core::classify::{AnnotatedObject, ClassifyContext, FailureInstance, FailureReport, Thresholds};
use failprobe_core::explore::augment::decode_rgba;
use failprobe_core::explore::{suggest_prompts, RepeatSource, Suggestions};
use failprobe_core::geometry::{LabeledBox, MatchWeights};
use failprobe_core::pipeline::{analyze_image, AnalysisConfig};
use failprobe_core::store::{ExplorationRecord, Project, ProjectStore};

use crate::error::ApiError;
use crate::AppState;

/// An annotation drawn in the UI. Box coordinates are normalized; the id is
/// optional and defaults to `a<position>`.
#[derive(Debug, Clone, Deserialize)]
pub struct AnnotationInput {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(flatten)]
    pub labeled: LabeledBox,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExploreRequest {
    pub image_id: String,
    pub model_id: String,
    pub persona_id: String,
    pub scenario_id: String,
    #[serde(default)]
    pub annotations: Vec<AnnotationInput>,
    #[serde(default)]
    pub weights: Option<MatchWeights>,
    #[serde(default)]
    pub thresholds: Option<Thresholds>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExplorationResult {
    pub record: ExplorationRecord,
    pub annotations: Vec<AnnotatedObject>,
    pub instances: Vec<FailureInstance>,
    pub prediction: Prediction,
    pub suggestions: Suggestions,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum JobState {
    Running,
    Done { result: Box<ExplorationResult> },
    Failed { error: ApiError },
}

/// Detects, classifies and records one exploration.
///
/// Detection runs before the project is locked; if it fails nothing is
/// written.
pub fn run_exploration(state: &AppState, project_id: &str, req: ExploreRequest) -> Result<ExplorationResult, ApiError> {
    let store = state.store(project_id)?;
    let project = store.load()?;
    let asset = project
        .image(&req.image_id)
        .ok_or_else(|| ApiError::not_found(format!("unknown image {:?}", req.image_id)))?
        .clone();
    let scenario = project
        .scenario(&req.scenario_id)
        .ok_or_else(|| ApiError::not_found(format!("unknown scenario {:?}", req.scenario_id)))?;
    if scenario.persona_id != req.persona_id {
        return Err(ApiError::validation(format!(
            "scenario {} belongs to persona {}, not {}",
            req.scenario_id, scenario.persona_id, req.persona_id
        )));
    }
    let detector = state
        .detectors
        .get(&req.model_id)
        .ok_or_else(|| ApiError::not_found(format!("unknown model {:?}", req.model_id)))?
        .clone();
    let descriptor = detector.descriptor().clone();

    let annotations: Vec<AnnotatedObject> = req
        .annotations
        .iter()
        .enumerate()
        .map(|(i, a)| AnnotatedObject {
            id: a.id.clone().unwrap_or_else(|| format!("a{}", i + 1)),
            image_id: asset.image_id.clone(),
            labeled: a.labeled.clone(),
        })
        .collect();

    let bytes = store.blob(&asset.sha256)?;
    let prediction = detector.detect(&ImageInput {
        image_id: &asset.image_id,
        bytes: &bytes,
        width: asset.width,
        height: asset.height,
    })?;

    let context = ClassifyContext {
        image_id: asset.image_id.clone(),
        model_id: descriptor.model_id.clone(),
        persona_id: req.persona_id.clone(),
        scenario_id: req.scenario_id.clone(),
    };
    let config = AnalysisConfig {
        weights: req.weights.unwrap_or_default(),
        thresholds: req.thresholds.unwrap_or_default(),
    };
    let report = analyze_image(&annotations, &prediction.objects, Some(&descriptor.class_list), &config, &context)
        .map_err(|e| ApiError::validation(e.to_string()))?;

    let (record, project) = {
        let writer = state.writer(project_id);
        let _guard = writer.lock();
        store.update(|p| {
            p.add_model(descriptor.clone())?;
            let record = p.record_exploration(&report, prediction.clone(), &annotations)?;
            Ok((record, p.clone()))
        })?
    };
    let suggestions = suggestions_for(state, &store, &project, &record)?;
    Ok(result_of(&project, record, suggestions))
}

fn result_of(project: &Project, record: ExplorationRecord, suggestions: Suggestions) -> ExplorationResult {
    let annotations = project
        .annotations
        .iter()
        .filter(|a| record.annotation_ids.contains(&a.id))
        .cloned()
        .collect();
    let instances = record
        .instance_ids
        .iter()
        .filter_map(|id| project.instance(id).cloned())
        .collect();
    let prediction = project.predictions[&record.exploration_id].clone();
    ExplorationResult {
        record,
        annotations,
        instances,
        prediction,
        suggestions,
    }
}

/// Stored exploration with freshly computed suggestions.
pub fn load_exploration(state: &AppState, project_id: &str, exploration_id: &str) -> Result<ExplorationResult, ApiError> {
    let store = state.store(project_id)?;
    let project = store.load()?;
    let record = project
        .explorations
        .iter()
        .find(|e| e.exploration_id == exploration_id)
        .ok_or_else(|| ApiError::not_found(format!("unknown exploration {exploration_id:?}")))?
        .clone();
    let suggestions = suggestions_for(state, &store, &project, &record)?;
    Ok(result_of(&project, record, suggestions))
}

pub fn suggestions_for(state: &AppState, store: &ProjectStore, project: &Project, record: &ExplorationRecord) -> Result<Suggestions, ApiError> {
    let model = project
        .model(&record.model_id)
        .ok_or_else(|| ApiError::not_found(format!("unknown model {:?}", record.model_id)))?;
    let annotations: Vec<AnnotatedObject> = project
        .annotations
        .iter()
        .filter(|a| record.annotation_ids.contains(&a.id))
        .cloned()
        .collect();
    let report = FailureReport {
        context: ClassifyContext {
            image_id: record.image_id.clone(),
            model_id: record.model_id.clone(),
            persona_id: record.persona_id.clone(),
            scenario_id: record.scenario_id.clone(),
        },
        instances: record
            .instance_ids
            .iter()
            .filter_map(|id| project.instance(id).cloned())
            .collect(),
        image_warnings: record.image_warnings.clone(),
    };
    let mut notices = Vec::new();
    let image = match (&state.captioner, project.image(&record.image_id)) {
        (Some(_), Some(asset)) => match decode_rgba(&store.blob(&asset.sha256)?) {
            Ok(img) => Some(img),
            Err(e) => {
                notices.push(format!("image {} could not be decoded for captioning: {e}", asset.image_id));
                None
            }
        },
        _ => None,
    };
    let repeat = match (&state.captioner, &image) {
        (Some(c), Some(img)) => Some(RepeatSource {
            captioner: c.as_ref(),
            image: img,
        }),
        _ => None,
    };
    let mut out = suggest_prompts(&report, &annotations, &state.lexicon, &model.class_list, repeat);
    notices.append(&mut out.notices);
    out.notices = notices;
    Ok(out)
}
