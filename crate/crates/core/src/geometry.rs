//! Anatomical bounding boxes and detector output ingestion.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{DetectorClass, Ontology};

/// Axis-aligned box in pixel coordinates, `x1 < x2`, `y1 < y2`, all finite and
/// non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid box ({x1}, {y1}, {x2}, {y2}): {reason}")]
pub struct InvalidBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub reason: &'static str,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, InvalidBox> {
        let err = |reason| InvalidBox {
            x1,
            y1,
            x2,
            y2,
            reason,
        };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(err("non-finite coordinate"));
        }
        if x1 < 0.0 || y1 < 0.0 {
            return Err(err("negative coordinate"));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(err("degenerate or inverted extent"));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    fn fits_within(&self, width: f64, height: f64) -> bool {
        self.x2 <= width && self.y2 <= height
    }
}

/// Smallest axis-aligned box containing both inputs.
pub fn merge_boxes(a: &BBox, b: &BBox) -> BBox {
    BBox {
        x1: a.x1.min(b.x1),
        y1: a.y1.min(b.y1),
        x2: a.x2.max(b.x2),
        y2: a.y2.max(b.y2),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnatomicalBox {
    pub bbox: BBox,
    pub cls: DetectorClass,
    pub score: Option<f64>,
}

impl AnatomicalBox {
    /// Score used for per-class deduplication; a missing score counts as 1.
    pub fn effective_score(&self) -> f64 {
        self.score.unwrap_or(1.0)
    }
}

/// Detector output for one image with at most one box per class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageDetections {
    pub image_id: String,
    pub width: f64,
    pub height: f64,
    pub boxes: Vec<AnatomicalBox>,
}

impl ImageDetections {
    pub fn box_for(&self, cls: &DetectorClass) -> Option<&AnatomicalBox> {
        self.boxes.iter().find(|b| &b.cls == cls)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectionError {
    #[error("line {line}: failed to read input: {message}")]
    Read { line: usize, message: String },
    #[error("line {line}: invalid JSON: {message}")]
    Json { line: usize, message: String },
    #[error("line {line}: malformed box for '{cls}': {reason}")]
    MalformedBox {
        line: usize,
        cls: String,
        reason: String,
    },
    #[error("line {line}: unknown detector class '{cls}'")]
    UnknownClass { line: usize, cls: String },
    #[error("line {line}: invalid image size {width}x{height}")]
    InvalidImageSize {
        line: usize,
        width: f64,
        height: f64,
    },
}

impl DetectionError {
    pub fn line(&self) -> usize {
        match self {
            Self::Read { line, .. }
            | Self::Json { line, .. }
            | Self::MalformedBox { line, .. }
            | Self::UnknownClass { line, .. }
            | Self::InvalidImageSize { line, .. } => *line,
        }
    }
}

#[derive(Debug, Deserialize)]
struct RawDetections {
    image_id: String,
    width: f64,
    height: f64,
    #[serde(default)]
    boxes: Vec<RawBox>,
}

#[derive(Debug, Deserialize)]
struct RawBox {
    cls: String,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    score: Option<f64>,
}

/// Wire form of one detections line, the inverse of [`ingest_detections`].
#[derive(Debug, Serialize)]
struct WireDetections<'a> {
    image_id: &'a str,
    width: f64,
    height: f64,
    boxes: Vec<WireBox<'a>>,
}

#[derive(Debug, Serialize)]
struct WireBox<'a> {
    cls: &'a str,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

impl ImageDetections {
    /// One JSON-lines record in the ingestion format.
    pub fn to_json_line(&self) -> String {
        let wire = WireDetections {
            image_id: &self.image_id,
            width: self.width,
            height: self.height,
            boxes: self
                .boxes
                .iter()
                .map(|b| WireBox {
                    cls: b.cls.as_str(),
                    x1: b.bbox.x1,
                    y1: b.bbox.y1,
                    x2: b.bbox.x2,
                    y2: b.bbox.y2,
                    score: b.score,
                })
                .collect(),
        };
        serde_json::to_string(&wire).expect("detections serialize")
    }
}

/// Parses and validates a JSON-lines detection stream, one image per line.
///
/// Blank lines are skipped. Boxes must lie inside the image and use a class
/// from `C_pre`. When a class occurs more than once the highest score is kept,
/// the earliest box on ties. Line numbers in errors are 1-based.
pub fn ingest_detections(
    reader: impl BufRead,
    ontology: &Ontology,
) -> Result<Vec<ImageDetections>, DetectionError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| DetectionError::Read {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDetections = serde_json::from_str(&line).map_err(|e| DetectionError::Json {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(validate_detections(raw, line_no, ontology)?);
    }
    Ok(out)
}

fn validate_detections(
    raw: RawDetections,
    line: usize,
    ontology: &Ontology,
) -> Result<ImageDetections, DetectionError> {
    if !(raw.width.is_finite() && raw.height.is_finite() && raw.width > 0.0 && raw.height > 0.0) {
        return Err(DetectionError::InvalidImageSize {
            line,
            width: raw.width,
            height: raw.height,
        });
    }
    let mut kept: BTreeMap<String, usize> = BTreeMap::new();
    let mut boxes: Vec<AnatomicalBox> = Vec::new();
    for b in raw.boxes {
        if !ontology.contains_class(&b.cls) {
            return Err(DetectionError::UnknownClass { line, cls: b.cls });
        }
        let malformed = |reason: String| DetectionError::MalformedBox {
            line,
            cls: b.cls.clone(),
            reason,
        };
        let bbox = BBox::new(b.x1, b.y1, b.x2, b.y2).map_err(|e| malformed(e.reason.into()))?;
        if !bbox.fits_within(raw.width, raw.height) {
            return Err(malformed(format!(
                "extends outside the {}x{} image",
                raw.width, raw.height
            )));
        }
        if let Some(score) = b.score {
            if !(0.0..=1.0).contains(&score) {
                return Err(malformed(format!("score {score} outside [0, 1]")));
            }
        }
        let candidate = AnatomicalBox {
            bbox,
            cls: DetectorClass::new(b.cls.clone()),
            score: b.score,
        };
        match kept.get(&b.cls) {
            Some(&slot) => {
                if candidate.effective_score() > boxes[slot].effective_score() {
                    boxes[slot] = candidate;
                }
            }
            None => {
                kept.insert(b.cls, boxes.len());
                boxes.push(candidate);
            }
        }
    }
    Ok(ImageDetections {
        image_id: raw.image_id,
        width: raw.width,
        height: raw.height,
        boxes,
    })
}
