//! Bundled reference data: the failure-mode taxonomy for vision systems, the
//! UX failure-recovery mechanisms, and the COCO class list used by the default
//! mock model.
//!
//! The data lives in versioned JSON files embedded at compile time. The
//! catalog file is pinned by its SHA-256 digest.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classify::ClassSet;
use crate::geometry::Label;

const CATALOG_JSON: &str = include_str!("../data/catalog.json");
const COCO80_JSON: &str = include_str!("../data/coco80.json");

/// SHA-256 of `data/catalog.json`.
pub const CATALOG_SHA256: &str = "42fbded9b1e727882830074a27d39c8460892bcddc27ce6d780ff5cb0f96f4da";
pub const CATALOG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemLevel {
    Sensing,
    Observation,
    Reaction,
}

impl SystemLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sensing => "sensing",
            Self::Observation => "observation",
            Self::Reaction => "reaction",
        }
    }
}

impl fmt::Display for SystemLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SystemLevel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "sensing" => Ok(Self::Sensing),
            "observation" => Ok(Self::Observation),
            "reaction" => Ok(Self::Reaction),
            other => Err(format!("unknown system level {other:?}; expected sensing, observation or reaction")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyEntry {
    pub system_level: SystemLevel,
    pub name: String,
    pub description: String,
    pub example: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryMechanism {
    pub name: String,
    pub description: String,
}

#[derive(Debug, Deserialize)]
struct CatalogFile {
    catalog_version: u32,
    taxonomy: Vec<TaxonomyEntry>,
    recovery_mechanisms: Vec<RecoveryMechanism>,
}

fn catalog() -> &'static CatalogFile {
    static CATALOG: OnceLock<CatalogFile> = OnceLock::new();
    CATALOG.get_or_init(|| {
        let file: CatalogFile = serde_json::from_str(CATALOG_JSON).expect("embedded catalog parses");
        assert_eq!(file.catalog_version, CATALOG_VERSION, "embedded catalog version");
        file
    })
}

/// Hex SHA-256 of the embedded catalog bytes.
pub fn catalog_digest() -> String {
    hex::encode(Sha256::digest(CATALOG_JSON.as_bytes()))
}

/// Taxonomy entries in table order, optionally restricted to one level.
pub fn list_taxonomy(level: Option<SystemLevel>) -> Vec<TaxonomyEntry> {
    catalog()
        .taxonomy
        .iter()
        .filter(|e| level.is_none_or(|l| e.system_level == l))
        .cloned()
        .collect()
}

pub fn suggest_recoveries() -> Vec<RecoveryMechanism> {
    catalog().recovery_mechanisms.clone()
}

pub fn is_recovery_mechanism(name: &str) -> bool {
    catalog().recovery_mechanisms.iter().any(|m| m.name == name)
}

#[derive(Debug, Deserialize)]
struct ClassListFile {
    model_id: String,
    display_name: String,
    class_list: Vec<String>,
}

fn coco_file() -> &'static ClassListFile {
    static COCO: OnceLock<ClassListFile> = OnceLock::new();
    COCO.get_or_init(|| serde_json::from_str(COCO80_JSON).expect("embedded class list parses"))
}

/// The 80 COCO detection classes.
pub fn coco80() -> ClassSet {
    coco_file()
        .class_list
        .iter()
        .map(|c| Label::new(c).expect("bundled labels are non-empty"))
        .collect::<BTreeSet<_>>()
}

pub fn coco80_ids() -> (&'static str, &'static str) {
    let f = coco_file();
    (&f.model_id, &f.display_name)
}
