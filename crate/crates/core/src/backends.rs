//! Object-detection backends: a hosted-inference HTTP client, a mock keyed by
//! image content hash, and a replay of stored predictions.
//!
//! All three speak the same record format:
//!
//! ```json
//! [{"label": "car", "score": 0.98, "box": {"xmin": 10, "ymin": 20, "xmax": 110, "ymax": 220}}]
//! ```
//!
//! with box coordinates in pixels of the submitted image.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{ClassSet, PredictedObject, Score};
use crate::explore::external::sha256_hex;
use crate::geometry::{BoundingBox, Label, LabeledBox};

pub const WIRE_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_REQUEST_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;
pub const DEFAULT_MAX_IMAGE_BYTES: usize = 16 * 1024 * 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("payload is not a valid record list: {0}")]
    Schema(String),
    #[error("record {index}: score {score} is outside [0, 1]")]
    ScoreOutOfRange { index: usize, score: f64 },
    #[error("record {index}: box ({xmin}, {ymin}, {xmax}, {ymax}) is inverted or empty")]
    InvertedBox {
        index: usize,
        xmin: f64,
        ymin: f64,
        xmax: f64,
        ymax: f64,
    },
    #[error("record {index}: label is empty")]
    EmptyLabel { index: usize },
    #[error("image dimensions {width}x{height} must be positive")]
    BadDimensions { width: u32, height: u32 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("network failure: {0}")]
    Network(String),
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("backend answered with HTTP status {0}")]
    Status(u16),
    #[error("malformed prediction payload: {0}")]
    Malformed(#[from] WireError),
    #[error("image is {size} bytes, limit is {limit}")]
    ImageTooLarge { size: usize, limit: usize },
    #[error("no stored prediction for {0}")]
    FixtureMissing(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    /// Whether retrying the same request later may succeed.
    pub fn retryable(&self) -> bool {
        match self {
            Self::Network(_) | Self::Timeout(_) => true,
            Self::Status(code) => *code == 429 || *code >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    Mock,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub model_id: String,
    pub display_name: String,
    pub backend_kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_token_env: Option<String>,
    /// Fixture or replay file for mock and replay backends, relative to the
    /// descriptor's base directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<String>,
    pub class_list: ClassSet,
}

impl ModelDescriptor {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.model_id.trim().is_empty() {
            return Err(BackendError::Config("model_id is empty".into()));
        }
        if self.class_list.is_empty() {
            return Err(BackendError::Config(format!("model {} has an empty class list", self.model_id)));
        }
        if self.backend_kind == BackendKind::Remote && self.endpoint.as_deref().is_none_or(str::is_empty) {
            return Err(BackendError::Config(format!("remote model {} needs an endpoint", self.model_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub model_id: String,
    pub objects: Vec<PredictedObject>,
    pub latency_ms: u64,
}

/// The image handed to a backend.
#[derive(Debug, Clone, Copy)]
pub struct ImageInput<'a> {
    pub image_id: &'a str,
    pub bytes: &'a [u8],
    pub width: u32,
    pub height: u32,
}

pub trait Detector: Send + Sync {
    fn descriptor(&self) -> &ModelDescriptor;
    fn detect(&self, image: &ImageInput<'_>) -> Result<Prediction, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRecord {
    pub label: String,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: WireBox,
}

/// Parses a wire payload into normalized objects sorted by descending score,
/// then label, then wire position. Object ids are `p<wire index>`.
pub fn parse_wire_prediction(payload: &[u8], width: u32, height: u32) -> Result<Vec<PredictedObject>, WireError> {
    let records: Vec<WireRecord> = serde_json::from_slice(payload).map_err(|e| WireError::Schema(e.to_string()))?;
    records_to_objects(&records, width, height)
}

pub fn records_to_objects(records: &[WireRecord], width: u32, height: u32) -> Result<Vec<PredictedObject>, WireError> {
    if width == 0 || height == 0 {
        return Err(WireError::BadDimensions { width, height });
    }
    let mut objects = Vec::with_capacity(records.len());
    for (index, r) in records.iter().enumerate() {
        let label = Label::new(&r.label).map_err(|_| WireError::EmptyLabel { index })?;
        let score = Score::new(r.score).map_err(|_| WireError::ScoreOutOfRange { index, score: r.score })?;
        let b = &r.bbox;
        let inverted = WireError::InvertedBox {
            index,
            xmin: b.xmin,
            ymin: b.ymin,
            xmax: b.xmax,
            ymax: b.ymax,
        };
        if !(b.xmin < b.xmax && b.ymin < b.ymax) {
            return Err(inverted);
        }
        let bbox = BoundingBox::from_pixels(b.xmin, b.ymin, b.xmax, b.ymax, width, height).map_err(|_| inverted)?;
        objects.push(PredictedObject {
            id: format!("p{index}"),
            labeled: LabeledBox::new(label, bbox),
            score,
        });
    }
    sort_objects(&mut objects);
    Ok(objects)
}

/// Descending score, then label; `sort_by` is stable so wire order breaks
/// the remaining ties.
pub fn sort_objects(objects: &mut [PredictedObject]) {
    objects.sort_by(|a, b| {
        b.score
            .value()
            .total_cmp(&a.score.value())
            .then_with(|| a.labeled.label.cmp(&b.labeled.label))
    });
}

/// Pixel-space records for normalized objects.
pub fn objects_to_records(objects: &[PredictedObject], width: u32, height: u32) -> Vec<WireRecord> {
    objects
        .iter()
        .map(|o| {
            let [xmin, ymin, xmax, ymax] = o.labeled.bbox.to_pixels(width, height);
            WireRecord {
                label: o.labeled.label.to_string(),
                score: o.score.value(),
                bbox: WireBox { xmin, ymin, xmax, ymax },
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockFixtureFile {
    pub format_version: u32,
    /// SHA-256 hex of the image bytes to the records returned for it.
    pub fixtures: BTreeMap<String, Vec<WireRecord>>,
}

/// Returns stored records for images whose content hash is known.
pub struct MockDetector {
    descriptor: ModelDescriptor,
    fixtures: BTreeMap<String, Vec<WireRecord>>,
}

impl MockDetector {
    pub fn new(descriptor: ModelDescriptor, fixtures: MockFixtureFile) -> Self {
        Self {
            descriptor,
            fixtures: fixtures.fixtures,
        }
    }

    pub fn insert(&mut self, image_bytes: &[u8], records: Vec<WireRecord>) {
        self.fixtures.insert(sha256_hex(image_bytes), records);
    }
}

impl Detector for MockDetector {
    fn descriptor(&self) -> &ModelDescriptor {
        &self.descriptor
    }

    fn detect(&self, image: &ImageInput<'_>) -> Result<Prediction, BackendError> {
        let key = sha256_hex(image.bytes);
        let records = self
            .fixtures
            .get(&key)
            .ok_or_else(|| BackendError::FixtureMissing(format!("image {} (sha256 {key})", image.image_id)))?;
        Ok(Prediction {
            image_id: image.image_id.to_string(),
            model_id: self.descriptor.model_id.clone(),
            objects: records_to_objects(records, image.width, image.height)?,
            latency_ms: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredPrediction {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<WireRecord>,
}

/// Replay file: one stored prediction per image id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayFile {
    pub format_version: u32,
    pub predictions: Vec<StoredPrediction>,
}

impl ReplayFile {
    pub fn from_json(bytes: &[u8]) -> Result<Self, WireError> {
        let file: ReplayFile = serde_json::from_slice(bytes).map_err(|e| WireError::Schema(e.to_string()))?;
        if file.format_version != WIRE_FORMAT_VERSION {
            return Err(WireError::Schema(format!(
                "unsupported replay format_version {}",
                file.format_version
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &file.predictions {
            if !seen.insert(&p.image_id) {
                return Err(WireError::Schema(format!("duplicate image_id {:?}", p.image_id)));
            }
            records_to_objects(&p.objects, p.width, p.height)?;
        }
        Ok(file)
    }

    pub fn get(&self, image_id: &str) -> Option<&StoredPrediction> {
        self.predictions.iter().find(|p| p.image_id == image_id)
    }
}

pub struct ReplayDetector {
    descriptor: ModelDescriptor,
    file: ReplayFile,
}

impl ReplayDetector {
    pub fn new(descriptor: ModelDescriptor, file: ReplayFile) -> Self {
        Self { descriptor, file }
    }
}

impl Detector for ReplayDetector {
    fn descriptor(&self) -> &ModelDescriptor {
        &self.descriptor
    }

    fn detect(&self, image: &ImageInput<'_>) -> Result<Prediction, BackendError> {
        let stored = self
            .file
            .get(image.image_id)
            .ok_or_else(|| BackendError::FixtureMissing(format!("image {}", image.image_id)))?;
        Ok(Prediction {
            image_id: stored.image_id.clone(),
            model_id: self.descriptor.model_id.clone(),
            objects: records_to_objects(&stored.objects, stored.width, stored.height)?,
            latency_ms: 0,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RemoteOptions {
    pub timeout: Duration,
    pub max_in_flight: usize,
    pub max_image_bytes: usize,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        Self {
            timeout: DEFAULT_REQUEST_TIMEOUT,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            max_image_bytes: DEFAULT_MAX_IMAGE_BYTES,
        }
    }
}

struct InFlight {
    count: Mutex<usize>,
    freed: Condvar,
    cap: usize,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut count = self.count.lock();
        while *count >= self.cap {
            self.freed.wait(&mut count);
        }
        *count += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.count.lock() -= 1;
        self.0.freed.notify_one();
    }
}

/// Client for a hosted inference endpoint: `POST` of the raw image bytes,
/// answered with the record list.
pub struct RemoteDetector {
    descriptor: ModelDescriptor,
    options: RemoteOptions,
    /// Built on first use so construction is safe inside an async runtime.
    client: OnceLock<Result<reqwest::blocking::Client, String>>,
    in_flight: InFlight,
}

impl RemoteDetector {
    pub fn new(descriptor: ModelDescriptor, options: RemoteOptions) -> Result<Self, BackendError> {
        descriptor.validate()?;
        let in_flight = InFlight {
            count: Mutex::new(0),
            freed: Condvar::new(),
            cap: options.max_in_flight.max(1),
        };
        Ok(Self {
            descriptor,
            options,
            client: OnceLock::new(),
            in_flight,
        })
    }

    fn client(&self) -> Result<&reqwest::blocking::Client, BackendError> {
        let timeout = self.options.timeout;
        self.client
            .get_or_init(|| {
                reqwest::blocking::Client::builder()
                    .timeout(timeout)
                    .build()
                    .map_err(|e| e.to_string())
            })
            .as_ref()
            .map_err(|e| BackendError::Config(e.clone()))
    }

    fn token(&self) -> Result<Option<String>, BackendError> {
        match &self.descriptor.auth_token_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| BackendError::Config(format!("environment variable {var} is not set"))),
        }
    }

    fn send_once(&self, image: &ImageInput<'_>, token: Option<&str>) -> Result<Vec<u8>, BackendError> {
        let endpoint = self.descriptor.endpoint.as_deref().unwrap_or_default();
        let mut req = self
            .client()?
            .post(endpoint)
            .header(reqwest::header::CONTENT_TYPE, "application/octet-stream")
            .body(image.bytes.to_vec());
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout(self.options.timeout)
            } else {
                BackendError::Network(e.to_string())
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(BackendError::Status(status.as_u16()));
        }
        resp.bytes()
            .map(|b| b.to_vec())
            .map_err(|e| BackendError::Network(e.to_string()))
    }
}

impl Detector for RemoteDetector {
    fn descriptor(&self) -> &ModelDescriptor {
        &self.descriptor
    }

    fn detect(&self, image: &ImageInput<'_>) -> Result<Prediction, BackendError> {
        if image.bytes.len() > self.options.max_image_bytes {
            return Err(BackendError::ImageTooLarge {
                size: image.bytes.len(),
                limit: self.options.max_image_bytes,
            });
        }
        let token = self.token()?;
        let _permit = self.in_flight.acquire();
        let started = Instant::now();
        let body = match self.send_once(image, token.as_deref()) {
            Err(BackendError::Network(_) | BackendError::Timeout(_)) => self.send_once(image, token.as_deref())?,
            other => other?,
        };
        let objects = parse_wire_prediction(&body, image.width, image.height)?;
        Ok(Prediction {
            image_id: image.image_id.to_string(),
            model_id: self.descriptor.model_id.clone(),
            objects,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

/// Builds the detector a descriptor asks for. Fixture paths are resolved
/// against `base_dir`.
pub fn build_detector(descriptor: &ModelDescriptor, base_dir: &Path) -> Result<Box<dyn Detector>, BackendError> {
    descriptor.validate()?;
    let read_fixture = || -> Result<Vec<u8>, BackendError> {
        let rel = descriptor
            .fixture
            .as_deref()
            .ok_or_else(|| BackendError::Config(format!("model {} needs a fixture file", descriptor.model_id)))?;
        std::fs::read(base_dir.join(rel)).map_err(|e| BackendError::Config(format!("reading {rel}: {e}")))
    };
    match descriptor.backend_kind {
        BackendKind::Remote => Ok(Box::new(RemoteDetector::new(descriptor.clone(), RemoteOptions::default())?)),
        BackendKind::Mock => {
            let file: MockFixtureFile = serde_json::from_slice(&read_fixture()?)
                .map_err(|e| BackendError::Malformed(WireError::Schema(e.to_string())))?;
            Ok(Box::new(MockDetector::new(descriptor.clone(), file)))
        }
        BackendKind::Replay => {
            let file = ReplayFile::from_json(&read_fixture()?)?;
            Ok(Box::new(ReplayDetector::new(descriptor.clone(), file)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn descriptor(kind: BackendKind) -> ModelDescriptor {
        ModelDescriptor {
            model_id: "detr".into(),
            display_name: "DETR".into(),
            backend_kind: kind,
            endpoint: None,
            auth_token_env: None,
            fixture: None,
            class_list: crate::catalog::coco80(),
        }
    }

    fn record(label: &str, score: f64, b: [f64; 4]) -> WireRecord {
        WireRecord {
            label: label.into(),
            score,
            bbox: WireBox {
                xmin: b[0],
                ymin: b[1],
                xmax: b[2],
                ymax: b[3],
            },
        }
    }

    #[test]
    fn parse_single_record() {
        let payload = br#"[{"label":"Car","score":0.98,"box":{"xmin":10,"ymin":20,"xmax":110,"ymax":220}}]"#;
        let objs = parse_wire_prediction(payload, 200, 400).unwrap();
        assert_eq!(objs.len(), 1);
        assert_eq!(objs[0].labeled.label.as_str(), "car");
        assert_eq!(objs[0].labeled.bbox.coords(), [0.05, 0.05, 0.55, 0.55]);
        assert_eq!(objs[0].id, "p0");
    }

    #[test]
    fn parse_errors() {
        let bad_score = br#"[{"label":"car","score":1.2,"box":{"xmin":10,"ymin":20,"xmax":110,"ymax":220}}]"#;
        assert!(matches!(parse_wire_prediction(bad_score, 200, 400), Err(WireError::ScoreOutOfRange { .. })));
        let inverted = br#"[{"label":"car","score":0.5,"box":{"xmin":120,"ymin":20,"xmax":110,"ymax":220}}]"#;
        assert!(matches!(parse_wire_prediction(inverted, 200, 400), Err(WireError::InvertedBox { .. })));
        let missing = br#"[{"label":"car","box":{"xmin":10,"ymin":20,"xmax":110,"ymax":220}}]"#;
        assert!(matches!(parse_wire_prediction(missing, 200, 400), Err(WireError::Schema(_))));
        let blank = br#"[{"label":" ","score":0.5,"box":{"xmin":10,"ymin":20,"xmax":110,"ymax":220}}]"#;
        assert!(matches!(parse_wire_prediction(blank, 200, 400), Err(WireError::EmptyLabel { .. })));
        assert!(parse_wire_prediction(b"[]", 200, 400).unwrap().is_empty());
        assert!(parse_wire_prediction(b"[]", 0, 400).is_err());
    }

    #[test]
    fn sorted_by_score_then_label_then_position() {
        let records = vec![
            record("dog", 0.5, [0.0, 0.0, 10.0, 10.0]),
            record("cat", 0.9, [0.0, 0.0, 10.0, 10.0]),
            record("cat", 0.5, [0.0, 0.0, 10.0, 10.0]),
            record("cat", 0.5, [1.0, 0.0, 10.0, 10.0]),
        ];
        let objs = records_to_objects(&records, 100, 100).unwrap();
        let ids: Vec<_> = objs.iter().map(|o| o.id.as_str()).collect();
        assert_eq!(ids, vec!["p1", "p2", "p3", "p0"]);
    }

    #[test]
    fn mock_normalizes_by_image_size() {
        let mut mock = MockDetector::new(descriptor(BackendKind::Mock), MockFixtureFile::default());
        let img = b"fake image bytes";
        mock.insert(img, vec![record("car", 0.98, [10.0, 20.0, 110.0, 220.0])]);
        let input = ImageInput {
            image_id: "i1",
            bytes: img,
            width: 200,
            height: 400,
        };
        let p = mock.detect(&input).unwrap();
        assert_eq!(p.objects.len(), 1);
        assert_eq!(p.objects[0].labeled.bbox.coords(), [0.05, 0.05, 0.55, 0.55]);
        assert_eq!(p.objects[0].score.value(), 0.98);
        assert_eq!(p, mock.detect(&input).unwrap());
        let other = ImageInput { bytes: b"other", ..input };
        assert!(matches!(mock.detect(&other), Err(BackendError::FixtureMissing(_))));
    }

    #[test]
    fn replay_passthrough() {
        let file = ReplayFile {
            format_version: 1,
            predictions: vec![StoredPrediction {
                image_id: "i1".into(),
                width: 640,
                height: 480,
                objects: vec![record("person", 0.7, [64.0, 48.0, 320.0, 240.0])],
            }],
        };
        let bytes = serde_json::to_vec(&file).unwrap();
        let replay = ReplayDetector::new(descriptor(BackendKind::Replay), ReplayFile::from_json(&bytes).unwrap());
        let p = replay
            .detect(&ImageInput {
                image_id: "i1",
                bytes: &[],
                width: 640,
                height: 480,
            })
            .unwrap();
        assert_eq!(objects_to_records(&p.objects, 640, 480), file.predictions[0].objects);
    }

    #[test]
    fn replay_rejects_bad_files() {
        assert!(ReplayFile::from_json(br#"{"format_version":2,"predictions":[]}"#).is_err());
        let dup = br#"{"format_version":1,"predictions":[{"image_id":"a","width":1,"height":1,"objects":[]},{"image_id":"a","width":1,"height":1,"objects":[]}]}"#;
        assert!(ReplayFile::from_json(dup).is_err());
    }

    #[test]
    fn descriptor_validation() {
        let mut d = descriptor(BackendKind::Remote);
        assert!(d.validate().is_err());
        d.endpoint = Some("http://localhost:1/detect".into());
        assert!(d.validate().is_ok());
        d.class_list.clear();
        assert!(d.validate().is_err());
    }

    #[test]
    fn image_size_limit() {
        let mut d = descriptor(BackendKind::Remote);
        d.endpoint = Some("http://127.0.0.1:9/detect".into());
        let remote = RemoteDetector::new(
            d,
            RemoteOptions {
                max_image_bytes: 4,
                ..RemoteOptions::default()
            },
        )
        .unwrap();
        let err = remote
            .detect(&ImageInput {
                image_id: "i",
                bytes: &[0; 5],
                width: 1,
                height: 1,
            })
            .unwrap_err();
        assert_eq!(err, BackendError::ImageTooLarge { size: 5, limit: 4 });
        assert!(!err.retryable());
    }

    #[test]
    fn retry_classification() {
        assert!(BackendError::Network("x".into()).retryable());
        assert!(BackendError::Status(503).retryable());
        assert!(!BackendError::Status(404).retryable());
        assert!(!BackendError::Malformed(WireError::Schema("x".into())).retryable());
    }
}
