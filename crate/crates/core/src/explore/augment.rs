//! Deterministic image variations: brightness, rotation, blur and center crop.
//!
//! Output size per kind: brightness and blur keep the input size; rotation by a
//! multiple of 90 degrees swaps or keeps the sides exactly, other angles expand
//! the canvas to the rotated bounding rectangle (uncovered pixels are
//! transparent); crop keeps `round(side * fraction)` pixels per side, at least
//! one, centered.

use std::io::Cursor;

use image::{imageops, ImageFormat, Rgba, RgbaImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("image could not be decoded: {0}")]
    Undecodable(String),
    #[error("image could not be encoded: {0}")]
    Encode(String),
    #[error("{kind} parameter {value} is out of range ({expected})")]
    ParameterOutOfRange {
        kind: AugmentationKind,
        value: f64,
        expected: &'static str,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentationKind {
    Brightness,
    Rotation,
    Blur,
    Crop,
}

impl std::fmt::Display for AugmentationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Brightness => "brightness",
            Self::Rotation => "rotation",
            Self::Blur => "blur",
            Self::Crop => "crop",
        })
    }
}

impl std::str::FromStr for AugmentationKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "brightness" => Ok(Self::Brightness),
            "rotation" => Ok(Self::Rotation),
            "blur" => Ok(Self::Blur),
            "crop" => Ok(Self::Crop),
            other => Err(format!("unknown augmentation {other:?}; expected brightness, rotation, blur or crop")),
        }
    }
}

/// One augmentation and its parameter:
/// brightness factor (> 0, 1 = identity), rotation in degrees
/// counterclockwise, blur radius in pixels (>= 0, used as the gaussian sigma),
/// or the crop fraction kept per side (0 < f <= 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct AugmentationSpec {
    kind: AugmentationKind,
    parameter: f64,
}

#[derive(Serialize, Deserialize)]
struct RawSpec {
    kind: AugmentationKind,
    parameter: f64,
}

impl TryFrom<RawSpec> for AugmentationSpec {
    type Error = AugmentError;
    fn try_from(r: RawSpec) -> Result<Self, Self::Error> {
        AugmentationSpec::new(r.kind, r.parameter)
    }
}

impl From<AugmentationSpec> for RawSpec {
    fn from(s: AugmentationSpec) -> Self {
        RawSpec {
            kind: s.kind,
            parameter: s.parameter,
        }
    }
}

impl AugmentationSpec {
    pub fn new(kind: AugmentationKind, parameter: f64) -> Result<Self, AugmentError> {
        let (ok, expected) = match kind {
            AugmentationKind::Brightness => (parameter.is_finite() && parameter > 0.0, "factor > 0"),
            AugmentationKind::Rotation => (parameter.is_finite(), "finite degrees"),
            AugmentationKind::Blur => (parameter.is_finite() && parameter >= 0.0, "radius >= 0"),
            AugmentationKind::Crop => (parameter.is_finite() && parameter > 0.0 && parameter <= 1.0, "0 < fraction <= 1"),
        };
        if !ok {
            return Err(AugmentError::ParameterOutOfRange {
                kind,
                value: parameter,
                expected,
            });
        }
        Ok(Self { kind, parameter })
    }

    pub fn brightness(factor: f64) -> Result<Self, AugmentError> {
        Self::new(AugmentationKind::Brightness, factor)
    }
    pub fn rotation(degrees: f64) -> Result<Self, AugmentError> {
        Self::new(AugmentationKind::Rotation, degrees)
    }
    pub fn blur(radius: f64) -> Result<Self, AugmentError> {
        Self::new(AugmentationKind::Blur, radius)
    }
    pub fn crop(fraction: f64) -> Result<Self, AugmentError> {
        Self::new(AugmentationKind::Crop, fraction)
    }

    pub fn kind(&self) -> AugmentationKind {
        self.kind
    }

    pub fn parameter(&self) -> f64 {
        self.parameter
    }

    pub fn is_identity(&self) -> bool {
        match self.kind {
            AugmentationKind::Brightness | AugmentationKind::Crop => self.parameter == 1.0,
            AugmentationKind::Rotation => self.parameter.rem_euclid(360.0) == 0.0,
            AugmentationKind::Blur => self.parameter == 0.0,
        }
    }
}

pub fn augment(image: &RgbaImage, spec: &AugmentationSpec) -> RgbaImage {
    if spec.is_identity() {
        return image.clone();
    }
    match spec.kind {
        AugmentationKind::Brightness => brighten(image, spec.parameter),
        AugmentationKind::Rotation => rotate(image, spec.parameter),
        AugmentationKind::Blur => imageops::blur(image, spec.parameter as f32),
        AugmentationKind::Crop => center_crop(image, spec.parameter),
    }
}

/// Decodes, augments and re-encodes as PNG. Identity specs return the input
/// bytes unchanged once they are known to decode.
pub fn augment_bytes(bytes: &[u8], spec: &AugmentationSpec) -> Result<Vec<u8>, AugmentError> {
    let decoded = decode_rgba(bytes)?;
    if spec.is_identity() {
        return Ok(bytes.to_vec());
    }
    encode_png(&augment(&decoded, spec))
}

pub fn decode_rgba(bytes: &[u8]) -> Result<RgbaImage, AugmentError> {
    if bytes.is_empty() {
        return Err(AugmentError::Undecodable("empty input".into()));
    }
    image::load_from_memory(bytes)
        .map(|img| img.to_rgba8())
        .map_err(|e| AugmentError::Undecodable(e.to_string()))
}

pub fn encode_png(image: &RgbaImage) -> Result<Vec<u8>, AugmentError> {
    let mut out = Cursor::new(Vec::new());
    image
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| AugmentError::Encode(e.to_string()))?;
    Ok(out.into_inner())
}

fn brighten(image: &RgbaImage, factor: f64) -> RgbaImage {
    let mut out = image.clone();
    for px in out.pixels_mut() {
        for c in &mut px.0[..3] {
            *c = (f64::from(*c) * factor).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

fn rotate(image: &RgbaImage, degrees: f64) -> RgbaImage {
    let d = degrees.rem_euclid(360.0);
    if d == 90.0 {
        return imageops::rotate270(image);
    }
    if d == 180.0 {
        return imageops::rotate180(image);
    }
    if d == 270.0 {
        return imageops::rotate90(image);
    }
    let theta = d.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (w, h) = (f64::from(image.width()), f64::from(image.height()));
    let out_w = (w * cos.abs() + h * sin.abs() - 1e-9).ceil().max(1.0) as u32;
    let out_h = (w * sin.abs() + h * cos.abs() - 1e-9).ceil().max(1.0) as u32;
    let (cx, cy) = (w / 2.0, h / 2.0);
    let (ocx, ocy) = (f64::from(out_w) / 2.0, f64::from(out_h) / 2.0);
    RgbaImage::from_fn(out_w, out_h, |x, y| {
        // output pixel center mapped back into the source
        let dx = f64::from(x) + 0.5 - ocx;
        let dy = f64::from(y) + 0.5 - ocy;
        let sx = dx * cos - dy * sin + cx;
        let sy = dx * sin + dy * cos + cy;
        if sx < 0.0 || sy < 0.0 || sx >= w || sy >= h {
            Rgba([0, 0, 0, 0])
        } else {
            *image.get_pixel(sx.floor() as u32, sy.floor() as u32)
        }
    })
}

fn center_crop(image: &RgbaImage, fraction: f64) -> RgbaImage {
    let (w, h) = image.dimensions();
    let nw = ((f64::from(w) * fraction).round() as u32).clamp(1, w.max(1));
    let nh = ((f64::from(h) * fraction).round() as u32).clamp(1, h.max(1));
    let x = (w - nw) / 2;
    let y = (h - nh) / 2;
    imageops::crop_imm(image, x, y, nw, nh).to_image()
}
