//! Scene annotations: validated types, JSON persistence and the
//! detector/captioner client interfaces.
//!
//! A scene file looks like
//!
//! ```json
//! { "source_id": "img_0001", "image_width": 512, "image_height": 384,
//!   "global_caption": "a harbour at dusk",
//!   "regions": [ { "box": [0.1, 0.2, 0.5, 0.9], "confidence": 0.82,
//!                  "caption": "a seagull in flight", "token_count": 6 } ] }
//! ```
//!
//! Boxes are normalized to `[0, 1]` so one annotation serves every latent
//! resolution.

mod client;

pub use client::{
    annotate, CaptionTarget, CaptionerClient, ClientError, DetectorClient, HttpClient, HttpConfig,
    ImageRef, MockClient, TokenPolicy,
};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("failed to read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("failed to write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("failed to parse {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> SceneError {
    SceneError::Invalid { field: field.into(), message: message.into() }
}

/// Axis-aligned box in normalized image coordinates with a detector score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub confidence: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64, confidence: f64) -> Result<Self, SceneError> {
        let b = Self { x0, y0, x1, y1, confidence };
        b.validate("box")?;
        Ok(b)
    }

    /// The padding sentinel: all coordinates and the score are zero.
    pub const fn zero() -> Self {
        Self { x0: 0.0, y0: 0.0, x1: 0.0, y1: 0.0, confidence: 0.0 }
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn is_zero_area(&self) -> bool {
        self.x1 == self.x0 || self.y1 == self.y0
    }

    /// True if `other` lies inside `self`.
    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn validate(&self, field: &str) -> Result<(), SceneError> {
        for (name, v) in [("x0", self.x0), ("y0", self.y0), ("x1", self.x1), ("y1", self.y1)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(field, format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.x1 < self.x0 {
            return Err(invalid(field, format!("x1 ({}) < x0 ({})", self.x1, self.x0)));
        }
        if self.y1 < self.y0 {
            return Err(invalid(field, format!("y1 ({}) < y0 ({})", self.y1, self.y0)));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(invalid(
                field.replace(".box", ".confidence"),
                format!("{} outside [0, 1]", self.confidence),
            ));
        }
        Ok(())
    }
}

/// A region-text pair. `token_count == 0` marks a padded slot.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionAnnotation {
    pub bbox: BoundingBox,
    pub caption: String,
    pub token_count: usize,
}

impl RegionAnnotation {
    pub fn new(bbox: BoundingBox, caption: impl Into<String>, token_count: usize) -> Self {
        Self { bbox, caption: caption.into(), token_count }
    }

    pub fn padding() -> Self {
        Self { bbox: BoundingBox::zero(), caption: String::new(), token_count: 0 }
    }

    pub fn is_padding(&self) -> bool {
        self.token_count == 0
    }

    pub fn confidence(&self) -> f64 {
        self.bbox.confidence
    }

    fn validate(&self, idx: usize) -> Result<(), SceneError> {
        let field = format!("regions[{idx}].box");
        self.bbox.validate(&field)?;
        if self.is_padding() {
            if !self.bbox.is_zero_area() {
                return Err(invalid(
                    format!("regions[{idx}].token_count"),
                    "0 on a region with a non-zero-area box (padded slots must use a zero box)",
                ));
            }
            if !self.caption.is_empty() {
                return Err(invalid(
                    format!("regions[{idx}].caption"),
                    "padded slot (token_count 0) must have an empty caption",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub source_id: String,
    pub image_width: u32,
    pub image_height: u32,
    pub global_caption: String,
    pub regions: Vec<RegionAnnotation>,
}

impl Scene {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.image_width == 0 {
            return Err(invalid("image_width", "must be >= 1"));
        }
        if self.image_height == 0 {
            return Err(invalid("image_height", "must be >= 1"));
        }
        let mut seen_padding = None;
        for (i, r) in self.regions.iter().enumerate() {
            r.validate(i)?;
            match (r.is_padding(), seen_padding) {
                (true, None) => seen_padding = Some(i),
                (false, Some(p)) => {
                    return Err(invalid(
                        format!("regions[{i}]"),
                        format!("active region follows padded slot regions[{p}]"),
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn active_regions(&self) -> impl Iterator<Item = &RegionAnnotation> {
        self.regions.iter().filter(|r| !r.is_padding())
    }

    pub fn image_ref(&self) -> ImageRef {
        ImageRef {
            source_id: self.source_id.clone(),
            width: self.image_width,
            height: self.image_height,
            path: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str::<SceneRecord>(text).map(Scene::from)
    }

    pub fn to_json(&self) -> String {
        // Serializing plain structs of strings and numbers cannot fail.
        serde_json::to_string_pretty(&SceneRecord::from(self)).expect("scene serializes")
    }
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    source_id: String,
    image_width: u32,
    image_height: u32,
    global_caption: String,
    regions: Vec<RegionRecord>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct RegionRecord {
    #[serde(rename = "box")]
    pub(crate) bbox: [f64; 4],
    pub(crate) confidence: f64,
    pub(crate) caption: String,
    pub(crate) token_count: usize,
}

impl From<SceneRecord> for Scene {
    fn from(r: SceneRecord) -> Self {
        Scene {
            source_id: r.source_id,
            image_width: r.image_width,
            image_height: r.image_height,
            global_caption: r.global_caption,
            regions: r
                .regions
                .into_iter()
                .map(|g| {
                    let [x0, y0, x1, y1] = g.bbox;
                    RegionAnnotation {
                        bbox: BoundingBox { x0, y0, x1, y1, confidence: g.confidence },
                        caption: g.caption,
                        token_count: g.token_count,
                    }
                })
                .collect(),
        }
    }
}

impl From<&Scene> for SceneRecord {
    fn from(s: &Scene) -> Self {
        SceneRecord {
            source_id: s.source_id.clone(),
            image_width: s.image_width,
            image_height: s.image_height,
            global_caption: s.global_caption.clone(),
            regions: s
                .regions
                .iter()
                .map(|r| RegionRecord {
                    bbox: r.bbox.coords(),
                    confidence: r.bbox.confidence,
                    caption: r.caption.clone(),
                    token_count: r.token_count,
                })
                .collect(),
        }
    }
}

/// Read and validate a scene file.
pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene, SceneError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|source| SceneError::Read { path: path.to_owned(), source })?;
    let scene = Scene::from_json(&text)
        .map_err(|source| SceneError::Parse { path: path.to_owned(), source })?;
    scene.validate()?;
    Ok(scene)
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<(), SceneError> {
    let path = path.as_ref();
    scene.validate()?;
    let mut text = scene.to_json();
    text.push('\n');
    fs::write(path, text).map_err(|source| SceneError::Write { path: path.to_owned(), source })
}
