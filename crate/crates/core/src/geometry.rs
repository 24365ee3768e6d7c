//! Boxes, labels and the pairwise matching cost between an expected object and
//! a predicted one.
//!
//! All coordinates are normalized image fractions so that the l1 term does not
//! depend on image resolution.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box coordinate {name}={value} is not a finite number")]
    NonFinite { name: &'static str, value: f64 },
    #[error("box ({x_min}, {y_min}, {x_max}, {y_max}) must satisfy 0 <= min < max <= 1 on both axes")]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
    #[error("label is empty after normalization")]
    EmptyLabel,
    #[error("weight {name}={value} is outside [0, 1]")]
    WeightOutOfRange { name: &'static str, value: f64 },
    #[error("image dimensions {width}x{height} must be positive")]
    InvalidDimensions { width: u32, height: u32 },
}

/// Axis-aligned box in normalized image coordinates.
///
/// Construction rejects boxes with zero or negative area, so every value of
/// this type has `0 <= x_min < x_max <= 1` and `0 <= y_min < y_max <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl TryFrom<RawBox> for BoundingBox {
    type Error = GeometryError;

    fn try_from(raw: RawBox) -> Result<Self, Self::Error> {
        BoundingBox::new(raw.x_min, raw.y_min, raw.x_max, raw.y_max)
    }
}

impl From<BoundingBox> for RawBox {
    fn from(b: BoundingBox) -> Self {
        RawBox {
            x_min: b.x_min,
            y_min: b.y_min,
            x_max: b.x_max,
            y_max: b.y_max,
        }
    }
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        for (name, value) in [
            ("x_min", x_min),
            ("y_min", y_min),
            ("x_max", x_max),
            ("y_max", y_max),
        ] {
            if !value.is_finite() {
                return Err(GeometryError::NonFinite { name, value });
            }
        }
        let ok = 0.0 <= x_min && x_min < x_max && x_max <= 1.0 && 0.0 <= y_min && y_min < y_max && y_max <= 1.0;
        if !ok {
            return Err(GeometryError::InvalidBox {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Converts a pixel-space box into normalized coordinates.
    ///
    /// Coordinates that fall outside the image are clamped to its border
    /// before the area check.
    pub fn from_pixels(
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidDimensions { width, height });
        }
        let (w, h) = (f64::from(width), f64::from(height));
        let nx = |v: f64| (v / w).clamp(0.0, 1.0);
        let ny = |v: f64| (v / h).clamp(0.0, 1.0);
        for (name, value) in [
            ("xmin", x_min),
            ("ymin", y_min),
            ("xmax", x_max),
            ("ymax", y_max),
        ] {
            if !value.is_finite() {
                return Err(GeometryError::NonFinite { name, value });
            }
        }
        Self::new(nx(x_min), ny(y_min), nx(x_max), ny(y_max))
    }

    /// Pixel coordinates `(x_min, y_min, x_max, y_max)` for an image of the given size.
    pub fn to_pixels(&self, width: u32, height: u32) -> [f64; 4] {
        let (w, h) = (f64::from(width), f64::from(height));
        [self.x_min * w, self.y_min * h, self.x_max * w, self.y_max * h]
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    fn intersection_area(&self, other: &Self) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    fn enclosing_area(&self, other: &Self) -> f64 {
        let w = self.x_max.max(other.x_max) - self.x_min.min(other.x_min);
        let h = self.y_max.max(other.y_max) - self.y_min.min(other.y_min);
        w * h
    }
}

/// Class label, lowercased and trimmed. Never empty.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Label(String);

impl Label {
    pub fn new(raw: &str) -> Result<Self, GeometryError> {
        let normalized = normalize_label(raw);
        if normalized.is_empty() {
            return Err(GeometryError::EmptyLabel);
        }
        Ok(Self(normalized))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Label {
    type Error = GeometryError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Label::new(&value)
    }
}

impl From<Label> for String {
    fn from(l: Label) -> Self {
        l.0
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Unicode-aware lowercase with surrounding whitespace removed.
pub fn normalize_label(raw: &str) -> String {
    raw.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub label: Label,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

impl LabeledBox {
    pub fn new(label: Label, bbox: BoundingBox) -> Self {
        Self { label, bbox }
    }
}

/// Weights of the matching cost. `gamma_*` balance the class and box terms,
/// `lambda_*` balance l1 against the GIoU loss inside the box term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights", into = "RawWeights")]
pub struct MatchWeights {
    gamma_class: f64,
    gamma_box: f64,
    lambda_l1: f64,
    lambda_iou: f64,
}

#[derive(Serialize, Deserialize)]
struct RawWeights {
    gamma_class: f64,
    gamma_box: f64,
    lambda_l1: f64,
    lambda_iou: f64,
}

impl TryFrom<RawWeights> for MatchWeights {
    type Error = GeometryError;
    fn try_from(r: RawWeights) -> Result<Self, Self::Error> {
        MatchWeights::new(r.gamma_class, r.gamma_box, r.lambda_l1, r.lambda_iou)
    }
}

impl From<MatchWeights> for RawWeights {
    fn from(w: MatchWeights) -> Self {
        RawWeights {
            gamma_class: w.gamma_class,
            gamma_box: w.gamma_box,
            lambda_l1: w.lambda_l1,
            lambda_iou: w.lambda_iou,
        }
    }
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            gamma_class: 0.5,
            gamma_box: 0.5,
            lambda_l1: 0.5,
            lambda_iou: 0.5,
        }
    }
}

impl MatchWeights {
    pub fn new(gamma_class: f64, gamma_box: f64, lambda_l1: f64, lambda_iou: f64) -> Result<Self, GeometryError> {
        for (name, value) in [
            ("gamma_class", gamma_class),
            ("gamma_box", gamma_box),
            ("lambda_l1", lambda_l1),
            ("lambda_iou", lambda_iou),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(GeometryError::WeightOutOfRange { name, value });
            }
        }
        Ok(Self {
            gamma_class,
            gamma_box,
            lambda_l1,
            lambda_iou,
        })
    }

    pub fn gamma_class(&self) -> f64 {
        self.gamma_class
    }
    pub fn gamma_box(&self) -> f64 {
        self.gamma_box
    }
    pub fn lambda_l1(&self) -> f64 {
        self.lambda_l1
    }
    pub fn lambda_iou(&self) -> f64 {
        self.lambda_iou
    }
}

/// 0 when the labels agree, 1 otherwise.
pub fn class_cost(a: &Label, b: &Label) -> f64 {
    if a == b {
        0.0
    } else {
        1.0
    }
}

/// Sum of absolute differences of the four coordinates.
pub fn l1_box_cost(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.coords()
        .iter()
        .zip(b.coords().iter())
        .map(|(p, q)| (p - q).abs())
        .sum()
}

/// Plain intersection over union.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Generalized IoU: IoU minus the share of the smallest enclosing box not
/// covered by the union. Lies in (-1, 1].
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let enclosing = a.enclosing_area(b);
    inter / union - (enclosing - union) / enclosing
}

pub fn giou_loss(a: &BoundingBox, b: &BoundingBox) -> f64 {
    1.0 - giou(a, b)
}

pub fn match_cost(ann: &LabeledBox, pred: &LabeledBox, w: &MatchWeights) -> f64 {
    let box_cost = w.lambda_l1 * l1_box_cost(&ann.bbox, &pred.bbox) + w.lambda_iou * giou_loss(&ann.bbox, &pred.bbox);
    (w.gamma_class * class_cost(&ann.label, &pred.label) + w.gamma_box * box_cost).max(0.0)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostMatrixError {
    #[error("expected {expected} entries for a {rows}x{cols} matrix, got {actual}")]
    Shape {
        rows: usize,
        cols: usize,
        expected: usize,
        actual: usize,
    },
    #[error("entry ({row}, {col}) = {value} is not a finite nonnegative cost")]
    BadEntry { row: usize, col: usize, value: f64 },
}

/// Dense row-major matrix of matching costs, annotations on rows and
/// predictions on columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self, CostMatrixError> {
        let expected = rows * cols;
        if entries.len() != expected {
            return Err(CostMatrixError::Shape {
                rows,
                cols,
                expected,
                actual: entries.len(),
            });
        }
        for (k, &value) in entries.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(CostMatrixError::BadEntry {
                    row: k / cols.max(1),
                    col: k % cols.max(1),
                    value,
                });
            }
        }
        Ok(Self { rows, cols, entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, CostMatrixError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut entries = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(CostMatrixError::Shape {
                    rows: rows.len(),
                    cols,
                    expected: rows.len() * cols,
                    actual: rows.iter().map(Vec::len).sum(),
                });
            }
            entries.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, entries)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.cols + col]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Every entry multiplied by `factor`. `factor` must be finite and positive.
    pub fn scaled(&self, factor: f64) -> Result<Self, CostMatrixError> {
        Self::new(self.rows, self.cols, self.entries.iter().map(|e| e * factor).collect())
    }
}

pub fn build_cost_matrix(anns: &[LabeledBox], preds: &[LabeledBox], w: &MatchWeights) -> CostMatrix {
    let entries = anns
        .iter()
        .flat_map(|a| preds.iter().map(move |p| match_cost(a, p, w)))
        .collect();
    CostMatrix {
        rows: anns.len(),
        cols: preds.len(),
        entries,
    }
}
