use std::collections::BTreeMap;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post, put};
use axum::Router;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use failprobe_core::catalog::{list_taxonomy, suggest_recoveries, SystemLevel};
use failprobe_core::explore::augment::{augment_bytes, decode_rgba};
use failprobe_core::explore::AugmentationSpec;
use failprobe_core::metrics::{compare_models, DisaggregatedReport, MetricAxis};
use failprobe_core::store::{CanvasPosition, ImageAsset, ImageSource, Project, ProjectStore, Provenance, StoreError};

use crate::error::ApiError;
use crate::explore::{load_exploration, run_exploration, ExploreRequest, JobState};
use crate::{blocking, ok, respond, AppState, POLL_INTERVAL_MS};

const MAX_UPLOAD_BYTES: usize = 16 * 1024 * 1024;

type Query2 = Query<BTreeMap<String, String>>;
type ApiResult = Result<Response, ApiError>;

pub(crate) fn router() -> Router<AppState> {
    Router::new()
        .route("/v1/catalog/taxonomy", get(taxonomy))
        .route("/v1/catalog/recovery", get(recovery))
        .route("/v1/models", get(models))
        .route("/v1/jobs/{job_id}", get(job))
        .route("/v1/projects", get(list_projects).post(create_project))
        .route("/v1/projects/{pid}", get(get_project))
        .route("/v1/projects/{pid}/personas", post(create_persona))
        .route("/v1/projects/{pid}/personas/{id}", patch(update_persona).delete(delete_persona))
        .route("/v1/projects/{pid}/scenarios", post(create_scenario))
        .route("/v1/projects/{pid}/scenarios/{id}", patch(update_scenario).delete(delete_scenario))
        .route("/v1/projects/{pid}/scenarios/{id}/images", post(attach_image))
        .route("/v1/projects/{pid}/images", get(list_images).post(upload_image))
        .route("/v1/projects/{pid}/images/{id}", get(image_bytes).delete(delete_image))
        .route("/v1/projects/{pid}/images/{id}/augment", post(augment_image))
        .route("/v1/projects/{pid}/generate", post(generate))
        .route("/v1/projects/{pid}/explorations", post(explore))
        .route("/v1/projects/{pid}/explorations/{id}", get(get_exploration))
        .route("/v1/projects/{pid}/explorations/{id}/prompts", post(prompts))
        .route("/v1/projects/{pid}/instances/{id}", patch(update_instance))
        .route("/v1/projects/{pid}/groups", post(create_group))
        .route("/v1/projects/{pid}/groups/{gid}", patch(update_group).delete(delete_group))
        .route("/v1/projects/{pid}/groups/{gid}/members", post(add_member))
        .route("/v1/projects/{pid}/groups/{gid}/members/{iid}", axum::routing::delete(remove_member))
        .route("/v1/projects/{pid}/groups/{gid}/members/{iid}/position", put(set_position))
        .route("/v1/projects/{pid}/groups/{gid}/mechanisms", post(add_mechanism))
        .route("/v1/projects/{pid}/metrics", get(metrics))
        .route("/v1/projects/{pid}/metrics/models", get(model_metrics))
        .route("/v1/projects/{pid}/export", get(export))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::validation(format!("request body: {e}")))
}

/// Applies `edit` under the project's writer locks and saves the result.
async fn mutate<T: Send + 'static>(
    state: AppState,
    pid: String,
    edit: impl FnOnce(&mut Project) -> Result<T, StoreError> + Send + 'static,
) -> Result<T, ApiError> {
    blocking(move || {
        let store = state.store(&pid)?;
        let writer = state.writer(&pid);
        let _guard = writer.lock();
        Ok(store.update(edit)?)
    })
    .await
}

async fn read<T: Send + 'static>(
    state: AppState,
    pid: String,
    f: impl FnOnce(&ProjectStore, Project) -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    blocking(move || {
        let store = state.store(&pid)?;
        let project = store.load()?;
        f(&store, project)
    })
    .await
}

async fn taxonomy(q: Query2) -> ApiResult {
    let level = match q.get("level") {
        Some(l) => Some(l.parse::<SystemLevel>().map_err(ApiError::validation)?),
        None => None,
    };
    Ok(ok(list_taxonomy(level)))
}

async fn recovery() -> Response {
    ok(suggest_recoveries())
}

async fn models(State(state): State<AppState>) -> Response {
    let list: Vec<_> = state.detectors.values().map(|d| d.descriptor().clone()).collect();
    ok(list)
}

async fn job(State(state): State<AppState>, Path(job_id): Path<String>) -> ApiResult {
    let job = state
        .jobs
        .lock()
        .get(&job_id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("unknown job {job_id:?}")))?;
    Ok(ok(job))
}

async fn list_projects(State(state): State<AppState>) -> ApiResult {
    let root = state.config.project_root.clone();
    let ids = blocking(move || {
        let entries = match std::fs::read_dir(&root) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(ApiError::internal(format!("listing {}: {e}", root.display()))),
        };
        let mut ids: Vec<String> = entries
            .filter_map(Result::ok)
            .filter(|e| e.path().join(failprobe_core::store::MANIFEST_FILE).is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        Ok(ids)
    })
    .await?;
    Ok(ok(ids))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewProject {
    project_id: String,
}

async fn create_project(State(state): State<AppState>, body: Bytes) -> ApiResult {
    let req: NewProject = parse(&body)?;
    let project = blocking(move || {
        let dir = state.project_dir(&req.project_id)?;
        let store = ProjectStore::init(dir, &req.project_id)?;
        Ok(store.load()?)
    })
    .await?;
    Ok(respond(StatusCode::CREATED, project))
}

async fn get_project(State(state): State<AppState>, Path(pid): Path<String>) -> ApiResult {
    Ok(ok(read(state, pid, |_, p| Ok(p)).await?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PersonaBody {
    name: Option<String>,
    #[serde(default)]
    description: Option<String>,
}

async fn create_persona(State(state): State<AppState>, Path(pid): Path<String>, body: Bytes) -> ApiResult {
    let req: PersonaBody = parse(&body)?;
    let name = req.name.ok_or_else(|| ApiError::validation("name is required"))?;
    let description = req.description.unwrap_or_default();
    let persona = mutate(state, pid, move |p| p.add_persona(&name, &description)).await?;
    Ok(respond(StatusCode::CREATED, persona))
}

async fn update_persona(State(state): State<AppState>, Path((pid, id)): Path<(String, String)>, body: Bytes) -> ApiResult {
    let req: PersonaBody = parse(&body)?;
    let persona = mutate(state, pid, move |p| p.update_persona(&id, req.name.as_deref(), req.description.as_deref())).await?;
    Ok(ok(persona))
}

async fn delete_persona(State(state): State<AppState>, Path((pid, id)): Path<(String, String)>) -> ApiResult {
    Ok(ok(mutate(state, pid, move |p| p.remove_persona(&id)).await?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioBody {
    #[serde(default)]
    persona_id: Option<String>,
    description: String,
}

async fn create_scenario(State(state): State<AppState>, Path(pid): Path<String>, body: Bytes) -> ApiResult {
    let req: ScenarioBody = parse(&body)?;
    let persona_id = req.persona_id.ok_or_else(|| ApiError::validation("persona_id is required"))?;
    let scenario = mutate(state, pid, move |p| p.add_scenario(&persona_id, &req.description)).await?;
    Ok(respond(StatusCode::CREATED, scenario))
}

async fn update_scenario(State(state): State<AppState>, Path((pid, id)): Path<(String, String)>, body: Bytes) -> ApiResult {
    let req: ScenarioBody = parse(&body)?;
    if req.persona_id.is_some() {
        return Err(ApiError::validation("a scenario cannot move to another persona"));
    }
    Ok(ok(mutate(state, pid, move |p| p.update_scenario(&id, &req.description)).await?))
}

async fn delete_scenario(State(state): State<AppState>, Path((pid, id)): Path<(String, String)>) -> ApiResult {
    Ok(ok(mutate(state, pid, move |p| p.remove_scenario(&id)).await?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AttachBody {
    image_id: String,
}

async fn attach_image(State(state): State<AppState>, Path((pid, id)): Path<(String, String)>, body: Bytes) -> ApiResult {
    let req: AttachBody = parse(&body)?;
    let scenario = mutate(state, pid, move |p| {
        p.attach_image(&id, &req.image_id)?;
        Ok(p.scenario(&id).cloned().expect("scenario exists after attach"))
    })
    .await?;
    Ok(ok(scenario))
}

async fn list_images(State(state): State<AppState>, Path(pid): Path<String>) -> ApiResult {
    Ok(ok(read(state, pid, |_, p| Ok(p.images)).await?))
}

/// Stores `bytes` as a new image and attaches it to `scenario_id` if given.
async fn store_images(
    state: AppState,
    pid: String,
    images: Vec<Vec<u8>>,
    source: ImageSource,
    provenance: Provenance,
    scenario_id: Option<String>,
) -> Result<Vec<ImageAsset>, ApiError> {
    blocking(move || {
        let mut decoded = Vec::with_capacity(images.len());
        for bytes in &images {
            if bytes.is_empty() {
                return Err(ApiError::validation("image body is empty"));
            }
            let img = decode_rgba(bytes).map_err(|e| ApiError::validation(format!("image: {e}")))?;
            decoded.push(img.dimensions());
        }
        let store = state.store(&pid)?;
        let writer = state.writer(&pid);
        let _guard = writer.lock();
        let hashes = images.iter().map(|b| store.put_blob(b)).collect::<Result<Vec<_>, _>>()?;
        Ok(store.update(|p| {
            let mut out = Vec::new();
            for (sha, (w, h)) in hashes.iter().zip(decoded) {
                let asset = p.add_image(sha, w, h, source, provenance.clone())?;
                if let Some(sid) = &scenario_id {
                    p.attach_image(sid, &asset.image_id)?;
                }
                out.push(asset);
            }
            Ok(out)
        })?)
    })
    .await
}

async fn upload_image(State(state): State<AppState>, Path(pid): Path<String>, q: Query2, body: Bytes) -> ApiResult {
    let scenario_id = q.get("scenario_id").cloned();
    let mut assets = store_images(state, pid, vec![body.to_vec()], ImageSource::Upload, Provenance::default(), scenario_id).await?;
    Ok(respond(StatusCode::CREATED, assets.remove(0)))
}

async fn image_bytes(State(state): State<AppState>, Path((pid, id)): Path<(String, String)>) -> ApiResult {
    let bytes = read(state, pid, move |store, p| {
        let asset = p.image(&id).ok_or_else(|| ApiError::not_found(format!("unknown image {id:?}")))?;
        Ok(store.blob(&asset.sha256)?)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

async fn delete_image(State(state): State<AppState>, Path((pid, id)): Path<(String, String)>) -> ApiResult {
    Ok(ok(mutate(state, pid, move |p| p.remove_image(&id)).await?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AugmentBody {
    #[serde(flatten)]
    spec: AugmentationSpec,
    #[serde(default)]
    scenario_id: Option<String>,
}

async fn augment_image(State(state): State<AppState>, Path((pid, id)): Path<(String, String)>, body: Bytes) -> ApiResult {
    let req: AugmentBody = parse(&body)?;
    let spec = req.spec;
    let parent = id.clone();
    let out = read(state.clone(), pid.clone(), move |store, p| {
        let asset = p.image(&id).ok_or_else(|| ApiError::not_found(format!("unknown image {id:?}")))?;
        let bytes = store.blob(&asset.sha256)?;
        augment_bytes(&bytes, &spec).map_err(|e| ApiError::validation(e.to_string()))
    })
    .await?;
    let provenance = Provenance {
        parent_image_id: Some(parent),
        augmentation: Some(spec),
        ..Provenance::default()
    };
    let mut assets = store_images(state, pid, vec![out], ImageSource::Augmented, provenance, req.scenario_id).await?;
    Ok(respond(StatusCode::CREATED, assets.remove(0)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateBody {
    prompt: String,
    #[serde(default)]
    scenario_id: Option<String>,
}

async fn generate(State(state): State<AppState>, Path(pid): Path<String>, body: Bytes) -> ApiResult {
    let req: GenerateBody = parse(&body)?;
    if req.prompt.trim().is_empty() {
        return Err(ApiError::validation("prompt is empty"));
    }
    let generator = state
        .generator
        .clone()
        .ok_or_else(|| ApiError::unavailable("generator_unavailable", "no image generator is configured"))?;
    let prompt = req.prompt.clone();
    let images = blocking(move || {
        generator.generate(&prompt).map_err(|e| ApiError {
            retryable: true,
            ..ApiError::new(StatusCode::BAD_GATEWAY, "generator_error", e.to_string())
        })
    })
    .await?;
    let provenance = Provenance {
        prompt: Some(req.prompt),
        ..Provenance::default()
    };
    let assets = store_images(state, pid, images, ImageSource::Generated, provenance, req.scenario_id).await?;
    Ok(respond(StatusCode::CREATED, assets))
}

#[derive(Serialize)]
struct JobAccepted {
    job_id: String,
    poll_interval_ms: u64,
}

async fn explore(State(state): State<AppState>, Path(pid): Path<String>, q: Query2, body: Bytes) -> ApiResult {
    let req: ExploreRequest = parse(&body)?;
    match q.get("mode").map(String::as_str) {
        None | Some("sync") => {
            let result = blocking(move || run_exploration(&state, &pid, req)).await?;
            Ok(respond(StatusCode::CREATED, result))
        }
        Some("async") => {
            let job_id = state.next_job_id();
            state.jobs.lock().insert(job_id.clone(), JobState::Running);
            let (st, id) = (state.clone(), job_id.clone());
            tokio::task::spawn_blocking(move || {
                let outcome = match run_exploration(&st, &pid, req) {
                    Ok(result) => JobState::Done { result: Box::new(result) },
                    Err(error) => JobState::Failed { error },
                };
                st.jobs.lock().insert(id, outcome);
            });
            Ok(respond(
                StatusCode::ACCEPTED,
                JobAccepted {
                    job_id,
                    poll_interval_ms: POLL_INTERVAL_MS,
                },
            ))
        }
        Some(other) => Err(ApiError::validation(format!("unknown mode {other:?}; expected sync or async"))),
    }
}

async fn get_exploration(State(state): State<AppState>, Path((pid, id)): Path<(String, String)>) -> ApiResult {
    Ok(ok(blocking(move || load_exploration(&state, &pid, &id)).await?))
}

async fn prompts(State(state): State<AppState>, Path((pid, id)): Path<(String, String)>) -> ApiResult {
    let result = blocking(move || load_exploration(&state, &pid, &id)).await?;
    Ok(ok(result.suggestions))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InstancePatch {
    severity: i64,
}

async fn update_instance(State(state): State<AppState>, Path((pid, id)): Path<(String, String)>, body: Bytes) -> ApiResult {
    let req: InstancePatch = parse(&body)?;
    Ok(ok(mutate(state, pid, move |p| p.set_severity(&id, req.severity)).await?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupBody {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    recovery_note: Option<String>,
}

async fn create_group(State(state): State<AppState>, Path(pid): Path<String>, body: Bytes) -> ApiResult {
    let req: GroupBody = parse(&body)?;
    let name = req.name.ok_or_else(|| ApiError::validation("name is required"))?;
    let group = mutate(state, pid, move |p| {
        let g = p.create_group(&name)?;
        match req.recovery_note {
            Some(note) => p.set_recovery_note(&g.group_id, &note),
            None => Ok(g),
        }
    })
    .await?;
    Ok(respond(StatusCode::CREATED, group))
}

async fn update_group(State(state): State<AppState>, Path((pid, gid)): Path<(String, String)>, body: Bytes) -> ApiResult {
    let req: GroupBody = parse(&body)?;
    let group = mutate(state, pid, move |p| {
        let mut g = p.group(&gid).cloned().ok_or_else(|| StoreError::not_found("group", &gid))?;
        if let Some(name) = &req.name {
            g = p.rename_group(&gid, name)?;
        }
        if let Some(note) = &req.recovery_note {
            g = p.set_recovery_note(&gid, note)?;
        }
        Ok(g)
    })
    .await?;
    Ok(ok(group))
}

async fn delete_group(State(state): State<AppState>, Path((pid, gid)): Path<(String, String)>) -> ApiResult {
    Ok(ok(mutate(state, pid, move |p| p.delete_group(&gid)).await?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MemberBody {
    instance_id: String,
    #[serde(default)]
    position: Option<CanvasPosition>,
}

async fn add_member(State(state): State<AppState>, Path((pid, gid)): Path<(String, String)>, body: Bytes) -> ApiResult {
    let req: MemberBody = parse(&body)?;
    Ok(ok(mutate(state, pid, move |p| p.add_member(&gid, &req.instance_id, req.position)).await?))
}

async fn remove_member(State(state): State<AppState>, Path((pid, gid, iid)): Path<(String, String, String)>) -> ApiResult {
    Ok(ok(mutate(state, pid, move |p| p.remove_member(&gid, &iid)).await?))
}

async fn set_position(State(state): State<AppState>, Path((pid, gid, iid)): Path<(String, String, String)>, body: Bytes) -> ApiResult {
    let pos: CanvasPosition = parse(&body)?;
    Ok(ok(mutate(state, pid, move |p| p.set_position(&gid, &iid, pos)).await?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MechanismBody {
    name: String,
}

async fn add_mechanism(State(state): State<AppState>, Path((pid, gid)): Path<(String, String)>, body: Bytes) -> ApiResult {
    let req: MechanismBody = parse(&body)?;
    Ok(ok(mutate(state, pid, move |p| p.add_mechanism(&gid, &req.name)).await?))
}

async fn metrics(State(state): State<AppState>, Path(pid): Path<String>, q: Query2) -> ApiResult {
    let axis: MetricAxis = q
        .get("axis")
        .map(|a| a.parse())
        .transpose()
        .map_err(|e: failprobe_core::metrics::MetricsError| ApiError::validation(e.to_string()))?
        .unwrap_or(MetricAxis::Persona);
    Ok(ok(read(state, pid, move |_, p| Ok(p.metrics(axis))).await?))
}

#[derive(Serialize)]
struct ModelComparison {
    ranking: Vec<String>,
    reports: BTreeMap<String, DisaggregatedReport>,
}

async fn model_metrics(State(state): State<AppState>, Path(pid): Path<String>) -> ApiResult {
    let cmp = read(state, pid, |_, p| {
        let reports: BTreeMap<String, DisaggregatedReport> =
            p.metrics(MetricAxis::Model).into_iter().map(|r| (r.group_id.clone(), r)).collect();
        let ranking = compare_models(&reports).map_err(|e| ApiError::validation(e.to_string()))?;
        Ok(ModelComparison { ranking, reports })
    })
    .await?;
    Ok(ok(cmp))
}

async fn export(State(state): State<AppState>, Path(pid): Path<String>) -> ApiResult {
    Ok(ok(read(state, pid, |_, p| Ok(p.export_board())).await?))
}
