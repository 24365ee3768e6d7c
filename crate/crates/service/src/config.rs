use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use failprobe_core::backends::ModelDescriptor;

pub const ENV_LISTEN: &str = "FAILPROBE_LISTEN";
pub const ENV_PROJECT_ROOT: &str = "FAILPROBE_PROJECT_ROOT";
pub const ENV_UI_ORIGIN: &str = "FAILPROBE_UI_ORIGIN";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {0}: {1}")]
    Read(PathBuf, std::io::Error),
    #[error("parsing {0}: {1}")]
    Parse(PathBuf, String),
    #[error("model {0}: {1}")]
    Model(String, String),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionConfig {
    pub endpoint: Option<String>,
    /// Environment variable holding the bearer token.
    pub auth_token_env: Option<String>,
    pub timeout_secs: Option<u64>,
    /// Fixed caption returned for every crop; for offline setups.
    pub fixture_caption: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default = "default_project_root")]
    pub project_root: PathBuf,
    /// Origins allowed by CORS, e.g. the companion UI.
    #[serde(default)]
    pub ui_origins: Vec<String>,
    #[serde(default)]
    pub models: Vec<ModelDescriptor>,
    #[serde(default)]
    pub caption: Option<CaptionConfig>,
    /// Directory fixture paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_project_root() -> PathBuf {
    PathBuf::from("projects")
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: default_listen(),
            project_root: default_project_root(),
            ui_origins: Vec::new(),
            models: Vec::new(),
            caption: None,
            base_dir: PathBuf::new(),
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: ServiceConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(base_dir.to_path_buf(), e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        if cfg.project_root.is_relative() {
            cfg.project_root = base_dir.join(&cfg.project_root);
        }
        for m in &cfg.models {
            m.validate().map_err(|e| ConfigError::Model(m.model_id.clone(), e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read(path.to_path_buf(), e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base)
    }

    /// Applies `FAILPROBE_*` environment overrides.
    pub fn with_env(mut self, get: impl Fn(&str) -> Option<String>) -> Self {
        if let Some(v) = get(ENV_LISTEN) {
            self.listen = v;
        }
        if let Some(v) = get(ENV_PROJECT_ROOT) {
            self.project_root = PathBuf::from(v);
        }
        if let Some(v) = get(ENV_UI_ORIGIN) {
            self.ui_origins = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect();
        }
        self
    }
}
