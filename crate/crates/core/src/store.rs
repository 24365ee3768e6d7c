//! Project persistence: personas, scenarios, images, annotations, predictions,
//! failure instances and the synthesis board, kept in one project directory.
//!
//! Layout:
//!
//! ```text
//! <project dir>/
//!   project.json        manifest (pretty JSON, deterministic field order)
//!   blobs/<sha256>      image bytes keyed by content hash
//!   .lock               present while a writer holds the project
//! ```
//!
//! Unknown top-level manifest fields are kept and written back unchanged.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{ModelDescriptor, Prediction};
use crate::catalog::is_recovery_mechanism;
use crate::classify::{AnnotatedObject, FailureInstance, FailureMode, FailureReport, Severity, WarningTag};
use crate::explore::augment::AugmentationSpec;
use crate::explore::external::sha256_hex;
use crate::metrics::{aggregate, DisaggregatedReport, ImageWarning, MetricAxis};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "project.json";
pub const BLOB_DIR: &str = "blobs";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unsupported schema_version {found}; this build reads version {SCHEMA_VERSION}")]
    Version { found: u64 },
    #[error("integrity violation: {0}")]
    Integrity(String),
    #[error("unknown {kind} {id:?}")]
    NotFound { kind: &'static str, id: String },
    #[error("{kind} {id:?} is still referenced by {by}")]
    InUse { kind: &'static str, id: String, by: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("project is locked by another writer ({0})")]
    Busy(PathBuf),
    #[error("project already exists at {0}")]
    Exists(PathBuf),
    #[error("manifest is malformed: {0}")]
    Malformed(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl StoreError {
    fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn not_found(kind: &'static str, id: &str) -> Self {
        Self::NotFound { kind, id: id.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Persona {
    pub persona_id: String,
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avatar_image_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub scenario_id: String,
    pub persona_id: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub image_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSource {
    Upload,
    Generated,
    Augmented,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentation: Option<AugmentationSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAsset {
    pub image_id: String,
    pub sha256: String,
    pub width: u32,
    pub height: u32,
    pub source: ImageSource,
    #[serde(default)]
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanvasPosition {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureGroup {
    pub group_id: String,
    pub name: String,
    #[serde(default)]
    pub member_instance_ids: Vec<String>,
    #[serde(default)]
    pub recovery_note: String,
    #[serde(default)]
    pub suggested_mechanisms: Vec<String>,
    #[serde(default)]
    pub canvas_positions: BTreeMap<String, CanvasPosition>,
}

/// One model run on one image, with the ids the store assigned to its
/// annotations and failure instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationRecord {
    pub exploration_id: String,
    pub image_id: String,
    pub model_id: String,
    pub persona_id: String,
    pub scenario_id: String,
    pub annotation_ids: Vec<String>,
    pub instance_ids: Vec<String>,
    #[serde(default)]
    pub image_warnings: BTreeSet<WarningTag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Project {
    pub schema_version: u32,
    pub project_id: String,
    #[serde(default)]
    pub personas: Vec<Persona>,
    #[serde(default)]
    pub scenarios: Vec<Scenario>,
    #[serde(default)]
    pub images: Vec<ImageAsset>,
    #[serde(default)]
    pub annotations: Vec<AnnotatedObject>,
    /// Keyed by exploration id.
    #[serde(default)]
    pub predictions: BTreeMap<String, Prediction>,
    #[serde(default)]
    pub failure_instances: Vec<FailureInstance>,
    #[serde(default)]
    pub explorations: Vec<ExplorationRecord>,
    #[serde(default)]
    pub groups: Vec<FailureGroup>,
    #[serde(default)]
    pub models: Vec<ModelDescriptor>,
    /// Last id handed out per id prefix.
    #[serde(default)]
    pub counters: BTreeMap<String, u64>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

fn find<'a, T>(items: &'a [T], id: &str, key: impl Fn(&T) -> &str) -> Option<&'a T> {
    items.iter().find(|x| key(x) == id)
}

fn find_mut<'a, T>(items: &'a mut [T], id: &str, key: impl Fn(&T) -> &str) -> Option<&'a mut T> {
    items.iter_mut().find(|x| key(x) == id)
}

impl Project {
    pub fn new(project_id: impl Into<String>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            project_id: project_id.into(),
            personas: Vec::new(),
            scenarios: Vec::new(),
            images: Vec::new(),
            annotations: Vec::new(),
            predictions: BTreeMap::new(),
            failure_instances: Vec::new(),
            explorations: Vec::new(),
            groups: Vec::new(),
            models: Vec::new(),
            counters: BTreeMap::new(),
            extra: BTreeMap::new(),
        }
    }

    /// Next id for `prefix`, e.g. `persona_3`.
    pub fn next_id(&mut self, prefix: &str) -> String {
        let n = self.counters.entry(prefix.to_string()).or_insert(0);
        *n += 1;
        format!("{prefix}_{n}")
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("project serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self, StoreError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| StoreError::Malformed(e.to_string()))?;
        let found = value
            .get("schema_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| StoreError::Malformed("missing numeric schema_version".into()))?;
        if found != u64::from(SCHEMA_VERSION) {
            return Err(StoreError::Version { found });
        }
        serde_json::from_value(value).map_err(|e| StoreError::Malformed(e.to_string()))
    }

    pub fn persona(&self, id: &str) -> Option<&Persona> {
        find(&self.personas, id, |p| &p.persona_id)
    }

    pub fn scenario(&self, id: &str) -> Option<&Scenario> {
        find(&self.scenarios, id, |s| &s.scenario_id)
    }

    pub fn image(&self, id: &str) -> Option<&ImageAsset> {
        find(&self.images, id, |i| &i.image_id)
    }

    pub fn model(&self, id: &str) -> Option<&ModelDescriptor> {
        find(&self.models, id, |m| &m.model_id)
    }

    pub fn instance(&self, id: &str) -> Option<&FailureInstance> {
        find(&self.failure_instances, id, |i| &i.instance_id)
    }

    pub fn group(&self, id: &str) -> Option<&FailureGroup> {
        find(&self.groups, id, |g| &g.group_id)
    }

    pub fn add_persona(&mut self, name: &str, description: &str) -> Result<Persona, StoreError> {
        let name = name.trim();
        if name.is_empty() {
            return Err(StoreError::Invalid("persona name is empty".into()));
        }
        let persona = Persona {
            persona_id: self.next_id("persona"),
            name: name.to_string(),
            description: description.to_string(),
            avatar_image_id: None,
        };
        self.personas.push(persona.clone());
        Ok(persona)
    }

    pub fn update_persona(&mut self, id: &str, name: Option<&str>, description: Option<&str>) -> Result<Persona, StoreError> {
        let p = find_mut(&mut self.personas, id, |p| &p.persona_id).ok_or_else(|| StoreError::not_found("persona", id))?;
        if let Some(name) = name {
            if name.trim().is_empty() {
                return Err(StoreError::Invalid("persona name is empty".into()));
            }
            p.name = name.trim().to_string();
        }
        if let Some(d) = description {
            p.description = d.to_string();
        }
        Ok(p.clone())
    }

    pub fn remove_persona(&mut self, id: &str) -> Result<Persona, StoreError> {
        let idx = self
            .personas
            .iter()
            .position(|p| p.persona_id == id)
            .ok_or_else(|| StoreError::not_found("persona", id))?;
        if let Some(s) = self.scenarios.iter().find(|s| s.persona_id == id) {
            return Err(StoreError::InUse {
                kind: "persona",
                id: id.into(),
                by: format!("scenario {}", s.scenario_id),
            });
        }
        if let Some(i) = self.failure_instances.iter().find(|i| i.persona_id == id) {
            return Err(StoreError::InUse {
                kind: "persona",
                id: id.into(),
                by: format!("instance {}", i.instance_id),
            });
        }
        Ok(self.personas.remove(idx))
    }

    pub fn add_scenario(&mut self, persona_id: &str, description: &str) -> Result<Scenario, StoreError> {
        if self.persona(persona_id).is_none() {
            return Err(StoreError::not_found("persona", persona_id));
        }
        let scenario = Scenario {
            scenario_id: self.next_id("scenario"),
            persona_id: persona_id.to_string(),
            description: description.to_string(),
            image_ids: Vec::new(),
        };
        self.scenarios.push(scenario.clone());
        Ok(scenario)
    }

    pub fn update_scenario(&mut self, id: &str, description: &str) -> Result<Scenario, StoreError> {
        let s = find_mut(&mut self.scenarios, id, |s| &s.scenario_id).ok_or_else(|| StoreError::not_found("scenario", id))?;
        s.description = description.to_string();
        Ok(s.clone())
    }

    pub fn remove_scenario(&mut self, id: &str) -> Result<Scenario, StoreError> {
        let idx = self
            .scenarios
            .iter()
            .position(|s| s.scenario_id == id)
            .ok_or_else(|| StoreError::not_found("scenario", id))?;
        if let Some(i) = self.failure_instances.iter().find(|i| i.scenario_id == id) {
            return Err(StoreError::InUse {
                kind: "scenario",
                id: id.into(),
                by: format!("instance {}", i.instance_id),
            });
        }
        Ok(self.scenarios.remove(idx))
    }

    /// Registers image metadata. The bytes themselves go through
    /// [`ProjectStore::put_blob`].
    pub fn add_image(
        &mut self,
        sha256: &str,
        width: u32,
        height: u32,
        source: ImageSource,
        provenance: Provenance,
    ) -> Result<ImageAsset, StoreError> {
        if width == 0 || height == 0 {
            return Err(StoreError::Invalid(format!("image dimensions {width}x{height} must be positive")));
        }
        if let Some(parent) = &provenance.parent_image_id {
            if self.image(parent).is_none() {
                return Err(StoreError::not_found("image", parent));
            }
        }
        let asset = ImageAsset {
            image_id: self.next_id("img"),
            sha256: sha256.to_string(),
            width,
            height,
            source,
            provenance,
        };
        self.images.push(asset.clone());
        Ok(asset)
    }

    pub fn attach_image(&mut self, scenario_id: &str, image_id: &str) -> Result<(), StoreError> {
        if self.image(image_id).is_none() {
            return Err(StoreError::not_found("image", image_id));
        }
        let s = find_mut(&mut self.scenarios, scenario_id, |s| &s.scenario_id)
            .ok_or_else(|| StoreError::not_found("scenario", scenario_id))?;
        if !s.image_ids.iter().any(|i| i == image_id) {
            s.image_ids.push(image_id.to_string());
        }
        Ok(())
    }

    pub fn remove_image(&mut self, id: &str) -> Result<ImageAsset, StoreError> {
        let idx = self
            .images
            .iter()
            .position(|i| i.image_id == id)
            .ok_or_else(|| StoreError::not_found("image", id))?;
        let in_use = |by: String| StoreError::InUse {
            kind: "image",
            id: id.into(),
            by,
        };
        if let Some(e) = self.explorations.iter().find(|e| e.image_id == id) {
            return Err(in_use(format!("exploration {}", e.exploration_id)));
        }
        if let Some(a) = self.annotations.iter().find(|a| a.image_id == id) {
            return Err(in_use(format!("annotation {}", a.id)));
        }
        if let Some(c) = self.images.iter().find(|i| i.provenance.parent_image_id.as_deref() == Some(id)) {
            return Err(in_use(format!("image {}", c.image_id)));
        }
        if let Some(p) = self.personas.iter().find(|p| p.avatar_image_id.as_deref() == Some(id)) {
            return Err(in_use(format!("persona {}", p.persona_id)));
        }
        for s in &mut self.scenarios {
            s.image_ids.retain(|i| i != id);
        }
        Ok(self.images.remove(idx))
    }

    pub fn add_model(&mut self, descriptor: ModelDescriptor) -> Result<(), StoreError> {
        descriptor.validate().map_err(|e| StoreError::Invalid(e.to_string()))?;
        match find_mut(&mut self.models, &descriptor.model_id.clone(), |m| &m.model_id) {
            Some(existing) => *existing = descriptor,
            None => self.models.push(descriptor),
        }
        Ok(())
    }

    /// Persists a classified exploration. Annotations and instances get fresh
    /// store ids (`ann_<n>`, `<mode>_<n>` numbered per mode across the
    /// project); the returned record lists them in report order.
    pub fn record_exploration(
        &mut self,
        report: &FailureReport,
        prediction: Prediction,
        annotations: &[AnnotatedObject],
    ) -> Result<ExplorationRecord, StoreError> {
        let ctx = &report.context;
        if self.image(&ctx.image_id).is_none() {
            return Err(StoreError::not_found("image", &ctx.image_id));
        }
        if self.model(&ctx.model_id).is_none() {
            return Err(StoreError::not_found("model", &ctx.model_id));
        }
        let scenario = self
            .scenario(&ctx.scenario_id)
            .ok_or_else(|| StoreError::not_found("scenario", &ctx.scenario_id))?;
        if scenario.persona_id != ctx.persona_id {
            return Err(StoreError::Invalid(format!(
                "scenario {} belongs to persona {}, not {}",
                ctx.scenario_id, scenario.persona_id, ctx.persona_id
            )));
        }
        if prediction.image_id != ctx.image_id || prediction.model_id != ctx.model_id {
            return Err(StoreError::Invalid("prediction does not belong to the reported image and model".into()));
        }

        let mut ann_ids = BTreeMap::new();
        let mut annotation_ids = Vec::with_capacity(annotations.len());
        let mut new_annotations = Vec::with_capacity(annotations.len());
        for a in annotations {
            let id = self.next_id("ann");
            if ann_ids.insert(a.id.clone(), id.clone()).is_some() {
                return Err(StoreError::Invalid(format!("duplicate annotation id {:?}", a.id)));
            }
            annotation_ids.push(id.clone());
            new_annotations.push(AnnotatedObject {
                id,
                image_id: ctx.image_id.clone(),
                labeled: a.labeled.clone(),
            });
        }

        let mut instances = Vec::with_capacity(report.instances.len());
        for inst in &report.instances {
            let mut inst = inst.clone();
            inst.instance_id = self.next_id(&inst.mode.as_str().to_lowercase());
            if let Some(a) = &inst.annotation_id {
                let mapped = ann_ids
                    .get(a)
                    .ok_or_else(|| StoreError::Invalid(format!("instance refers to unknown annotation {a:?}")))?;
                inst.annotation_id = Some(mapped.clone());
            }
            if let Some(p) = &inst.prediction_id {
                if !prediction.objects.iter().any(|o| &o.id == p) {
                    return Err(StoreError::Invalid(format!("instance refers to unknown prediction {p:?}")));
                }
            }
            instances.push(inst);
        }

        let record = ExplorationRecord {
            exploration_id: self.next_id("exp"),
            image_id: ctx.image_id.clone(),
            model_id: ctx.model_id.clone(),
            persona_id: ctx.persona_id.clone(),
            scenario_id: ctx.scenario_id.clone(),
            annotation_ids,
            instance_ids: instances.iter().map(|i| i.instance_id.clone()).collect(),
            image_warnings: report.image_warnings.clone(),
        };
        self.annotations.extend(new_annotations);
        self.failure_instances.extend(instances);
        self.predictions.insert(record.exploration_id.clone(), prediction);
        self.explorations.push(record.clone());
        Ok(record)
    }

    /// Sets severity and stamps `last_modified` with `timestamp`.
    pub fn set_severity_at(&mut self, instance_id: &str, severity: i64, timestamp: &str) -> Result<FailureInstance, StoreError> {
        let severity = Severity::new(severity).map_err(|e| StoreError::Invalid(e.to_string()))?;
        let inst = find_mut(&mut self.failure_instances, instance_id, |i| &i.instance_id)
            .ok_or_else(|| StoreError::not_found("instance", instance_id))?;
        inst.severity = severity;
        inst.last_modified = Some(timestamp.to_string());
        Ok(inst.clone())
    }

    pub fn set_severity(&mut self, instance_id: &str, severity: i64) -> Result<FailureInstance, StoreError> {
        let now = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
        self.set_severity_at(instance_id, severity, &now)
    }

    fn group_mut(&mut self, id: &str) -> Result<&mut FailureGroup, StoreError> {
        find_mut(&mut self.groups, id, |g| &g.group_id).ok_or_else(|| StoreError::not_found("group", id))
    }

    pub fn create_group(&mut self, name: &str) -> Result<FailureGroup, StoreError> {
        if name.trim().is_empty() {
            return Err(StoreError::Invalid("group name is empty".into()));
        }
        let group = FailureGroup {
            group_id: self.next_id("group"),
            name: name.trim().to_string(),
            member_instance_ids: Vec::new(),
            recovery_note: String::new(),
            suggested_mechanisms: Vec::new(),
            canvas_positions: BTreeMap::new(),
        };
        self.groups.push(group.clone());
        Ok(group)
    }

    pub fn rename_group(&mut self, id: &str, name: &str) -> Result<FailureGroup, StoreError> {
        if name.trim().is_empty() {
            return Err(StoreError::Invalid("group name is empty".into()));
        }
        let g = self.group_mut(id)?;
        g.name = name.trim().to_string();
        Ok(g.clone())
    }

    /// Adds an instance to a group, moving it out of any other group.
    pub fn add_member(&mut self, group_id: &str, instance_id: &str, position: Option<CanvasPosition>) -> Result<FailureGroup, StoreError> {
        if self.instance(instance_id).is_none() {
            return Err(StoreError::not_found("instance", instance_id));
        }
        self.group_mut(group_id)?;
        for g in self.groups.iter_mut().filter(|g| g.group_id != group_id) {
            g.member_instance_ids.retain(|m| m != instance_id);
            g.canvas_positions.remove(instance_id);
        }
        let g = self.group_mut(group_id)?;
        if !g.member_instance_ids.iter().any(|m| m == instance_id) {
            g.member_instance_ids.push(instance_id.to_string());
        }
        if let Some(p) = position {
            g.canvas_positions.insert(instance_id.to_string(), p);
        }
        Ok(g.clone())
    }

    pub fn remove_member(&mut self, group_id: &str, instance_id: &str) -> Result<FailureGroup, StoreError> {
        let g = self.group_mut(group_id)?;
        let before = g.member_instance_ids.len();
        g.member_instance_ids.retain(|m| m != instance_id);
        if g.member_instance_ids.len() == before {
            return Err(StoreError::not_found("group member", instance_id));
        }
        g.canvas_positions.remove(instance_id);
        Ok(g.clone())
    }

    pub fn set_position(&mut self, group_id: &str, instance_id: &str, position: CanvasPosition) -> Result<FailureGroup, StoreError> {
        let g = self.group_mut(group_id)?;
        if !g.member_instance_ids.iter().any(|m| m == instance_id) {
            return Err(StoreError::not_found("group member", instance_id));
        }
        g.canvas_positions.insert(instance_id.to_string(), position);
        Ok(g.clone())
    }

    pub fn set_recovery_note(&mut self, group_id: &str, note: &str) -> Result<FailureGroup, StoreError> {
        let g = self.group_mut(group_id)?;
        g.recovery_note = note.to_string();
        Ok(g.clone())
    }

    /// Appends a catalog recovery mechanism to the group's suggestions.
    pub fn add_mechanism(&mut self, group_id: &str, mechanism: &str) -> Result<FailureGroup, StoreError> {
        if !is_recovery_mechanism(mechanism) {
            return Err(StoreError::not_found("recovery mechanism", mechanism));
        }
        let g = self.group_mut(group_id)?;
        if !g.suggested_mechanisms.iter().any(|m| m == mechanism) {
            g.suggested_mechanisms.push(mechanism.to_string());
        }
        Ok(g.clone())
    }

    /// Deletes a group. Its members become ungrouped; instances are kept.
    pub fn delete_group(&mut self, id: &str) -> Result<FailureGroup, StoreError> {
        let idx = self
            .groups
            .iter()
            .position(|g| g.group_id == id)
            .ok_or_else(|| StoreError::not_found("group", id))?;
        Ok(self.groups.remove(idx))
    }

    pub fn image_warnings(&self) -> Vec<ImageWarning> {
        self.explorations
            .iter()
            .flat_map(|e| {
                e.image_warnings.iter().map(|&tag| ImageWarning {
                    image_id: e.image_id.clone(),
                    model_id: e.model_id.clone(),
                    persona_id: e.persona_id.clone(),
                    scenario_id: e.scenario_id.clone(),
                    tag,
                })
            })
            .collect()
    }

    pub fn metrics(&self, axis: MetricAxis) -> Vec<DisaggregatedReport> {
        aggregate(&self.failure_instances, &self.image_warnings(), axis)
    }

    /// Full referential-integrity scan. Returns every violation found.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            out.push(format!("schema_version {} is not {SCHEMA_VERSION}", self.schema_version));
        }
        fn unique_ids<'a>(out: &mut Vec<String>, kind: &str, ids: impl Iterator<Item = &'a str>) -> BTreeSet<&'a str> {
            let mut seen = BTreeSet::new();
            for id in ids {
                if !seen.insert(id) {
                    out.push(format!("duplicate {kind} id {id:?}"));
                }
            }
            seen
        }
        let personas = unique_ids(&mut out, "persona", self.personas.iter().map(|p| p.persona_id.as_str()));
        let scenarios = unique_ids(&mut out, "scenario", self.scenarios.iter().map(|s| s.scenario_id.as_str()));
        let images = unique_ids(&mut out, "image", self.images.iter().map(|i| i.image_id.as_str()));
        let annotations = unique_ids(&mut out, "annotation", self.annotations.iter().map(|a| a.id.as_str()));
        let instances = unique_ids(&mut out, "instance", self.failure_instances.iter().map(|i| i.instance_id.as_str()));
        unique_ids(&mut out, "group", self.groups.iter().map(|g| g.group_id.as_str()));
        let models = unique_ids(&mut out, "model", self.models.iter().map(|m| m.model_id.as_str()));
        let explorations = unique_ids(&mut out, "exploration", self.explorations.iter().map(|e| e.exploration_id.as_str()));

        for p in &self.personas {
            if p.name.trim().is_empty() {
                out.push(format!("persona {} has an empty name", p.persona_id));
            }
            if let Some(a) = &p.avatar_image_id {
                if !images.contains(a.as_str()) {
                    out.push(format!("persona {} avatar refers to unknown image {a}", p.persona_id));
                }
            }
        }
        for s in &self.scenarios {
            if !personas.contains(s.persona_id.as_str()) {
                out.push(format!("scenario {} refers to unknown persona {}", s.scenario_id, s.persona_id));
            }
            for i in &s.image_ids {
                if !images.contains(i.as_str()) {
                    out.push(format!("scenario {} refers to unknown image {i}", s.scenario_id));
                }
            }
        }
        for i in &self.images {
            if i.width == 0 || i.height == 0 {
                out.push(format!("image {} has zero dimensions", i.image_id));
            }
            if let Some(parent) = &i.provenance.parent_image_id {
                if !images.contains(parent.as_str()) {
                    out.push(format!("image {} derives from unknown image {parent}", i.image_id));
                }
            }
        }
        for a in &self.annotations {
            if !images.contains(a.image_id.as_str()) {
                out.push(format!("annotation {} refers to unknown image {}", a.id, a.image_id));
            }
        }
        for m in &self.models {
            if let Err(e) = m.validate() {
                out.push(format!("model {}: {e}", m.model_id));
            }
        }

        let mut owner: BTreeMap<&str, &ExplorationRecord> = BTreeMap::new();
        for e in &self.explorations {
            let refs = [
                ("image", &images, &e.image_id),
                ("persona", &personas, &e.persona_id),
                ("scenario", &scenarios, &e.scenario_id),
                ("model", &models, &e.model_id),
            ];
            for (kind, set, id) in refs {
                if !set.contains(id.as_str()) {
                    out.push(format!("exploration {} refers to unknown {kind} {id}", e.exploration_id));
                }
            }
            for a in &e.annotation_ids {
                if !annotations.contains(a.as_str()) {
                    out.push(format!("exploration {} refers to unknown annotation {a}", e.exploration_id));
                }
            }
            for i in &e.instance_ids {
                if !instances.contains(i.as_str()) {
                    out.push(format!("exploration {} refers to unknown instance {i}", e.exploration_id));
                }
                if owner.insert(i, e).is_some() {
                    out.push(format!("instance {i} belongs to more than one exploration"));
                }
            }
            if !self.predictions.contains_key(&e.exploration_id) {
                out.push(format!("exploration {} has no stored prediction", e.exploration_id));
            }
        }
        for key in self.predictions.keys() {
            if !explorations.contains(key.as_str()) {
                out.push(format!("prediction stored for unknown exploration {key}"));
            }
        }

        for inst in &self.failure_instances {
            let id = &inst.instance_id;
            let Some(e) = owner.get(id.as_str()) else {
                out.push(format!("instance {id} is not part of any exploration"));
                continue;
            };
            if inst.image_id != e.image_id
                || inst.model_id != e.model_id
                || inst.persona_id != e.persona_id
                || inst.scenario_id != e.scenario_id
            {
                out.push(format!("instance {id} context differs from exploration {}", e.exploration_id));
            }
            if let Some(a) = &inst.annotation_id {
                if !e.annotation_ids.contains(a) {
                    out.push(format!("instance {id} refers to annotation {a} outside its exploration"));
                }
            }
            if let Some(p) = &inst.prediction_id {
                let known = self
                    .predictions
                    .get(&e.exploration_id)
                    .is_some_and(|pred| pred.objects.iter().any(|o| &o.id == p));
                if !known {
                    out.push(format!("instance {id} refers to unknown prediction object {p}"));
                }
            }
            let shape_ok = match inst.mode {
                FailureMode::CD | FailureMode::FD => inst.annotation_id.is_some() && inst.prediction_id.is_some(),
                FailureMode::MD => inst.annotation_id.is_some() && inst.prediction_id.is_none(),
                FailureMode::UD => inst.annotation_id.is_none() && inst.prediction_id.is_some(),
            };
            if !shape_ok {
                out.push(format!("instance {id} references do not fit mode {}", inst.mode));
            }
        }

        let mut grouped: BTreeMap<&str, &str> = BTreeMap::new();
        for g in &self.groups {
            if g.name.trim().is_empty() {
                out.push(format!("group {} has an empty name", g.group_id));
            }
            for m in &g.member_instance_ids {
                if !instances.contains(m.as_str()) {
                    out.push(format!("group {} refers to unknown instance {m}", g.group_id));
                }
                if let Some(other) = grouped.insert(m, &g.group_id) {
                    if other != g.group_id {
                        out.push(format!("instance {m} is in groups {other} and {}", g.group_id));
                    } else {
                        out.push(format!("instance {m} is listed twice in group {}", g.group_id));
                    }
                }
            }
            for k in g.canvas_positions.keys() {
                if !g.member_instance_ids.contains(k) {
                    out.push(format!("group {} has a position for non-member {k}", g.group_id));
                }
            }
            for mech in &g.suggested_mechanisms {
                if !is_recovery_mechanism(mech) {
                    out.push(format!("group {} suggests unknown mechanism {mech:?}", g.group_id));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(StoreError::Integrity(v.join("; ")))
        }
    }

    pub fn export_board(&self) -> BoardDocument {
        let member = |id: &String, group: &FailureGroup| -> BoardCard {
            let inst = self.instance(id);
            BoardCard {
                instance_id: id.clone(),
                mode: inst.map(|i| i.mode),
                image_id: inst.map(|i| i.image_id.clone()),
                thumbnail: inst
                    .and_then(|i| self.image(&i.image_id))
                    .map(|img| format!("{BLOB_DIR}/{}", img.sha256)),
                annotation_id: inst.and_then(|i| i.annotation_id.clone()),
                prediction_id: inst.and_then(|i| i.prediction_id.clone()),
                severity: inst.map(|i| i.severity),
                warnings: inst.map(|i| i.warnings.clone()).unwrap_or_default(),
                position: group.canvas_positions.get(id).copied(),
            }
        };
        let groups = self
            .groups
            .iter()
            .map(|g| BoardGroup {
                group_id: g.group_id.clone(),
                name: g.name.clone(),
                recovery_note: g.recovery_note.clone(),
                suggested_mechanisms: g.suggested_mechanisms.clone(),
                members: g.member_instance_ids.iter().map(|m| member(m, g)).collect(),
            })
            .collect();
        let grouped: BTreeSet<&str> = self
            .groups
            .iter()
            .flat_map(|g| g.member_instance_ids.iter().map(String::as_str))
            .collect();
        BoardDocument {
            schema_version: SCHEMA_VERSION,
            project_id: self.project_id.clone(),
            groups,
            ungrouped_instance_ids: self
                .failure_instances
                .iter()
                .filter(|i| i.mode.is_failure() && !grouped.contains(i.instance_id.as_str()))
                .map(|i| i.instance_id.clone())
                .collect(),
            metrics: BoardMetrics {
                persona: self.metrics(MetricAxis::Persona),
                scenario: self.metrics(MetricAxis::Scenario),
                model: self.metrics(MetricAxis::Model),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoardCard {
    pub instance_id: String,
    pub mode: Option<FailureMode>,
    pub image_id: Option<String>,
    /// Blob path of the source image, relative to the project directory.
    pub thumbnail: Option<String>,
    pub annotation_id: Option<String>,
    pub prediction_id: Option<String>,
    pub severity: Option<Severity>,
    pub warnings: BTreeSet<WarningTag>,
    pub position: Option<CanvasPosition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoardGroup {
    pub group_id: String,
    pub name: String,
    pub recovery_note: String,
    pub suggested_mechanisms: Vec<String>,
    pub members: Vec<BoardCard>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoardMetrics {
    pub persona: Vec<DisaggregatedReport>,
    pub scenario: Vec<DisaggregatedReport>,
    pub model: Vec<DisaggregatedReport>,
}

/// Structured export of the synthesis board.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoardDocument {
    pub schema_version: u32,
    pub project_id: String,
    pub groups: Vec<BoardGroup>,
    pub ungrouped_instance_ids: Vec<String>,
    pub metrics: BoardMetrics,
}

impl BoardDocument {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("board serializes");
        text.push('\n');
        text
    }
}

/// A project directory on disk.
#[derive(Debug, Clone)]
pub struct ProjectStore {
    root: PathBuf,
}

/// Held while a writer owns the project; removes the lock file on drop.
#[derive(Debug)]
pub struct WriteLock {
    path: PathBuf,
}

impl Drop for WriteLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

impl ProjectStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let manifest = root.join(MANIFEST_FILE);
        if !manifest.is_file() {
            return Err(StoreError::io(&manifest, io::Error::new(io::ErrorKind::NotFound, "no project manifest")));
        }
        Ok(Self { root })
    }

    /// Creates a new project directory with an empty manifest.
    pub fn init(root: impl Into<PathBuf>, project_id: &str) -> Result<Self, StoreError> {
        let root = root.into();
        if root.join(MANIFEST_FILE).exists() {
            return Err(StoreError::Exists(root));
        }
        fs::create_dir_all(root.join(BLOB_DIR)).map_err(|e| StoreError::io(&root, e))?;
        let store = Self { root };
        let _lock = store.lock()?;
        store.save(&Project::new(project_id))?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    /// Takes the writer lock or fails with [`StoreError::Busy`].
    pub fn lock(&self) -> Result<WriteLock, StoreError> {
        let path = self.root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(WriteLock { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(StoreError::Busy(path)),
            Err(e) => Err(StoreError::io(&path, e)),
        }
    }

    pub fn load(&self) -> Result<Project, StoreError> {
        let path = self.manifest_path();
        let text = fs::read_to_string(&path).map_err(|e| StoreError::io(&path, e))?;
        let project = Project::from_json(&text)?;
        project.validate()?;
        Ok(project)
    }

    /// Writes the manifest atomically (temp file, then rename). Callers are
    /// expected to hold the write lock.
    pub fn save(&self, project: &Project) -> Result<(), StoreError> {
        project.validate()?;
        let path = self.manifest_path();
        let tmp = self.root.join(format!("{MANIFEST_FILE}.tmp"));
        let write = || -> io::Result<()> {
            let mut f = File::create(&tmp)?;
            f.write_all(project.to_json().as_bytes())?;
            f.sync_all()?;
            fs::rename(&tmp, &path)
        };
        write().map_err(|e| StoreError::io(&path, e))
    }

    /// Loads, applies `edit`, validates and saves under the write lock.
    /// Nothing is written if `edit` or validation fails.
    pub fn update<T>(&self, edit: impl FnOnce(&mut Project) -> Result<T, StoreError>) -> Result<T, StoreError> {
        let _lock = self.lock()?;
        let mut project = self.load()?;
        let out = edit(&mut project)?;
        self.save(&project)?;
        Ok(out)
    }

    /// Stores image bytes under their SHA-256 and returns the hex digest.
    pub fn put_blob(&self, bytes: &[u8]) -> Result<String, StoreError> {
        let hash = sha256_hex(bytes);
        let dir = self.root.join(BLOB_DIR);
        fs::create_dir_all(&dir).map_err(|e| StoreError::io(&dir, e))?;
        let path = dir.join(&hash);
        if !path.exists() {
            let tmp = dir.join(format!("{hash}.tmp"));
            fs::write(&tmp, bytes)
                .and_then(|_| fs::rename(&tmp, &path))
                .map_err(|e| StoreError::io(&path, e))?;
        }
        Ok(hash)
    }

    /// Reads a blob and checks it still matches its hash.
    pub fn blob(&self, sha256: &str) -> Result<Vec<u8>, StoreError> {
        if sha256.len() != 64 || !sha256.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(StoreError::Invalid(format!("{sha256:?} is not a SHA-256 hex digest")));
        }
        let path = self.root.join(BLOB_DIR).join(sha256);
        let bytes = fs::read(&path).map_err(|e| StoreError::io(&path, e))?;
        if sha256_hex(&bytes) != sha256 {
            return Err(StoreError::Integrity(format!("blob {sha256} does not match its hash")));
        }
        Ok(bytes)
    }

    /// Integrity scan including image blobs.
    pub fn verify(&self) -> Result<Vec<String>, StoreError> {
        let project = {
            let path = self.manifest_path();
            let text = fs::read_to_string(&path).map_err(|e| StoreError::io(&path, e))?;
            Project::from_json(&text)?
        };
        let mut out = project.violations();
        for img in &project.images {
            if let Err(e) = self.blob(&img.sha256) {
                out.push(format!("image {}: {e}", img.image_id));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::optimal_assignment;
    use crate::backends::BackendKind;
    use crate::catalog::coco80;
    use crate::classify::{classify, ClassifyContext, PredictedObject, Score, Thresholds};
    use crate::geometry::{build_cost_matrix, BoundingBox, Label, LabeledBox, MatchWeights};

    fn lb(label: &str, b: [f64; 4]) -> LabeledBox {
        LabeledBox::new(Label::new(label).unwrap(), BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap())
    }

    fn taxi_project() -> (Project, ExplorationRecord) {
        let mut p = Project::new("demo");
        p.add_model(ModelDescriptor {
            model_id: "coco80".into(),
            display_name: "mock".into(),
            backend_kind: BackendKind::Mock,
            endpoint: None,
            auth_token_env: None,
            fixture: None,
            class_list: coco80(),
        })
        .unwrap();
        let tom = p.add_persona("Tom", "taxi driver").unwrap();
        let s = p.add_scenario(&tom.persona_id, "street").unwrap();
        let img = p.add_image(&"0".repeat(64), 200, 400, ImageSource::Upload, Provenance::default()).unwrap();
        p.attach_image(&s.scenario_id, &img.image_id).unwrap();

        let anns = vec![AnnotatedObject {
            id: "a".into(),
            image_id: img.image_id.clone(),
            labeled: lb("taxi", [0.1, 0.1, 0.5, 0.5]),
        }];
        let preds = vec![
            PredictedObject {
                id: "p0".into(),
                labeled: lb("car", [0.1, 0.1, 0.5, 0.5]),
                score: Score::new(0.98).unwrap(),
            },
            PredictedObject {
                id: "p1".into(),
                labeled: lb("car", [0.6, 0.6, 0.9, 0.9]),
                score: Score::new(0.97).unwrap(),
            },
        ];
        let a: Vec<_> = anns.iter().map(|x| x.labeled.clone()).collect();
        let b: Vec<_> = preds.iter().map(|x| x.labeled.clone()).collect();
        let asg = optimal_assignment(&build_cost_matrix(&a, &b, &MatchWeights::default()));
        let ctx = ClassifyContext {
            image_id: img.image_id.clone(),
            model_id: "coco80".into(),
            persona_id: tom.persona_id.clone(),
            scenario_id: s.scenario_id.clone(),
        };
        let report = classify(&anns, &preds, &asg, Some(&coco80()), &Thresholds::default(), &ctx).unwrap();
        let prediction = Prediction {
            image_id: img.image_id,
            model_id: "coco80".into(),
            objects: preds,
            latency_ms: 0,
        };
        let rec = p.record_exploration(&report, prediction, &anns).unwrap();
        (p, rec)
    }

    #[test]
    fn exploration_ids_assigned() {
        let (p, rec) = taxi_project();
        assert_eq!(rec.instance_ids, vec!["fd_1", "ud_1"]);
        assert_eq!(rec.annotation_ids, vec!["ann_1"]);
        assert_eq!(p.instance("fd_1").unwrap().annotation_id.as_deref(), Some("ann_1"));
        p.validate().unwrap();
    }

    #[test]
    fn severity_edits() {
        let (mut p, _) = taxi_project();
        let i = p.set_severity_at("fd_1", 5, "2026-01-01T00:00:00Z").unwrap();
        assert_eq!(i.severity.value(), 5);
        assert_eq!(i.last_modified.as_deref(), Some("2026-01-01T00:00:00Z"));
        assert_eq!(p.set_severity("ud_1", 1).unwrap().severity.value(), 1);
        assert!(matches!(p.set_severity("fd_1", 8), Err(StoreError::Invalid(_))));
        assert!(matches!(p.set_severity("fd_9", 2), Err(StoreError::NotFound { .. })));
        assert_eq!(p.instance("fd_1").unwrap().severity.value(), 5);
    }

    #[test]
    fn group_move_and_delete() {
        let (mut p, _) = taxi_project();
        let g1 = p.create_group("Model fails on rotated images").unwrap();
        assert!(g1.member_instance_ids.is_empty());
        let g2 = p.create_group("Cars everywhere").unwrap();
        p.add_member(&g1.group_id, "fd_1", Some(CanvasPosition { x: 8.0, y: 16.0 })).unwrap();
        p.add_member(&g2.group_id, "fd_1", None).unwrap();
        assert!(p.group(&g1.group_id).unwrap().member_instance_ids.is_empty());
        assert!(p.group(&g1.group_id).unwrap().canvas_positions.is_empty());
        assert_eq!(p.group(&g2.group_id).unwrap().member_instance_ids, vec!["fd_1"]);
        p.validate().unwrap();
        p.delete_group(&g2.group_id).unwrap();
        assert!(p.instance("fd_1").is_some());
        assert_eq!(p.export_board().ungrouped_instance_ids, vec!["fd_1", "ud_1"]);
        assert!(p.add_member("group_99", "fd_1", None).is_err());
        assert!(p.add_member(&g1.group_id, "nope", None).is_err());
        assert!(p.add_mechanism(&g1.group_id, "Made-up mechanism").is_err());
    }

    #[test]
    fn json_round_trip_and_version() {
        let (mut p, _) = taxi_project();
        p.extra.insert("future_field".into(), serde_json::json!({"k": [1, 2]}));
        let text = p.to_json();
        let back = Project::from_json(&text).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_json(), text);
        let bumped = text.replacen("\"schema_version\": 1", "\"schema_version\": 999", 1);
        assert!(matches!(Project::from_json(&bumped), Err(StoreError::Version { found: 999 })));
    }

    #[test]
    fn integrity_violations_detected() {
        let (mut p, _) = taxi_project();
        p.scenarios[0].persona_id = "ghost".into();
        assert!(p.validate().is_err());
        let (mut p, _) = taxi_project();
        let g = p.create_group("g").unwrap();
        p.groups[0].member_instance_ids.push("fd_1".into());
        let g2 = p.create_group("h").unwrap();
        p.groups[1].member_instance_ids.push("fd_1".into());
        let v = p.violations();
        assert!(v.iter().any(|m| m.contains(&g.group_id) && m.contains(&g2.group_id)), "{v:?}");
    }

    #[test]
    fn removal_guards() {
        let (mut p, _) = taxi_project();
        assert!(matches!(p.remove_persona("persona_1"), Err(StoreError::InUse { .. })));
        assert!(matches!(p.remove_image("img_1"), Err(StoreError::InUse { .. })));
        let lone = p.add_persona("Ana", "").unwrap();
        p.remove_persona(&lone.persona_id).unwrap();
        assert!(p.add_persona("  ", "").is_err());
    }

    #[test]
    fn store_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = ProjectStore::init(dir.path().join("proj"), "demo").unwrap();
        assert!(ProjectStore::init(store.root(), "demo").is_err());
        let hash = store.put_blob(b"pixels").unwrap();
        assert_eq!(store.blob(&hash).unwrap(), b"pixels");
        store
            .update(|p| p.add_image(&hash, 4, 4, ImageSource::Upload, Provenance::default()))
            .unwrap();
        let first = fs::read(store.manifest_path()).unwrap();
        let loaded = store.load().unwrap();
        store.update(|_| Ok(())).unwrap();
        assert_eq!(fs::read(store.manifest_path()).unwrap(), first);
        assert_eq!(store.load().unwrap(), loaded);
        assert!(store.verify().unwrap().is_empty());
    }

    #[test]
    fn lock_gives_busy_and_failed_edits_write_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let store = ProjectStore::init(dir.path(), "demo").unwrap();
        let before = fs::read(store.manifest_path()).unwrap();
        {
            let _held = store.lock().unwrap();
            assert!(matches!(store.update(|p| p.add_persona("x", "")), Err(StoreError::Busy(_))));
        }
        let err = store.update(|p| {
            p.add_persona("x", "")?;
            p.set_severity("none", 3)
        });
        assert!(err.is_err());
        assert_eq!(fs::read(store.manifest_path()).unwrap(), before);
        store.update(|p| p.add_persona("x", "")).unwrap();
        assert_eq!(store.load().unwrap().personas.len(), 1);
    }
}
