//! Boxes, detections, annotations and the exact geometric predicates the rest
//! of the pipeline is built on.
//!
//! Boxes use a half-open pixel convention `[x1, x2) × [y1, y2)` with
//! real-valued coordinates and the origin at the top-left corner, so the area
//! of a box is simply `(x2 - x1) * (y2 - y1)`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("box coordinates must be finite, got ({x1}, {y1}, {x2}, {y2})")]
    NonFinite { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("box must have positive area, got ({x1}, {y1}, {x2}, {y2})")]
    Degenerate { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("slide `{slide_id}` has invalid dimensions {width}x{height}")]
    EmptySlide { slide_id: String, width: u32, height: u32 },
    #[error("microns per pixel must be positive and finite, got {0}")]
    InvalidResolution(f64),
    #[error("box size must be positive and finite, got {0}")]
    InvalidBoxSize(f64),
    #[error("annotation center ({x}, {y}) lies outside slide `{slide_id}`")]
    CenterOutOfBounds { slide_id: String, x: f64, y: f64 },
}

/// Axis-aligned box in pixel space. Always has finite coordinates and
/// strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(GeometryError::NonFinite { x1, y1, x2, y2 });
        }
        if !(x1 < x2 && y1 < y2) {
            return Err(GeometryError::Degenerate { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Square box of side `size` centered on `(cx, cy)`.
    pub fn from_center(cx: f64, cy: f64, size: f64) -> Result<Self, GeometryError> {
        let half = size / 2.0;
        Self::new(cx - half, cy - half, cx + half, cy + half)
    }

    #[inline]
    pub fn x1(&self) -> f64 {
        self.x1
    }
    #[inline]
    pub fn y1(&self) -> f64 {
        self.y1
    }
    #[inline]
    pub fn x2(&self) -> f64 {
        self.x2
    }
    #[inline]
    pub fn y2(&self) -> f64 {
        self.y2
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    #[inline]
    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Translates the box by `(dx, dy)`.
    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self, GeometryError> {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    /// Overlap of two boxes, `None` when they share no area.
    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2.min(other.x2);
        let y2 = self.y2.min(other.y2);
        if x1 < x2 && y1 < y2 {
            Some(BBox { x1, y1, x2, y2 })
        } else {
            None
        }
    }

    /// Area shared with `other`, zero when disjoint.
    #[inline]
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }

    /// True when `other` lies entirely inside `self`.
    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }

    /// True when the point lies in the half-open box.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        self.x1 <= x && x < self.x2 && self.y1 <= y && y < self.y2
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let raw = <[f64; 4]>::deserialize(de)?;
        BBox::try_from(raw).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x1, self.y1, self.x2, self.y2)
    }
}

/// Intersection over union, in `[0, 1]`.
///
/// Symmetric bit-for-bit: the intersection and union are formed from
/// commutative `min`/`max`/`+` only.
#[inline]
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Euclidean distance between box centers, in pixels.
#[inline]
pub fn center_distance(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

/// Intersection of `b` with the slide rectangle `[0, width) × [0, height)`.
pub fn clip_box(b: &BBox, bounds: &SlideInfo) -> Option<BBox> {
    b.intersection(&bounds.bounds())
}

/// Coordinate frame a detection is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Frame {
    TileLocal(usize),
    SlideGlobal,
}

/// One predicted box with its confidence and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub model_id: String,
    pub slide_id: String,
    pub frame: Frame,
}

impl Detection {
    pub fn new(
        bbox: BBox,
        score: f64,
        model_id: impl Into<String>,
        slide_id: impl Into<String>,
        frame: Frame,
    ) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(GeometryError::ScoreOutOfRange(score));
        }
        Ok(Self {
            bbox,
            score,
            model_id: model_id.into(),
            slide_id: slide_id.into(),
            frame,
        })
    }

    pub fn is_global(&self) -> bool {
        self.frame == Frame::SlideGlobal
    }
}

/// Dimensions of a slide (or ROI) in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideInfo {
    pub slide_id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub microns_per_pixel: Option<f64>,
}

impl SlideInfo {
    pub fn new(slide_id: impl Into<String>, width: u32, height: u32) -> Result<Self, GeometryError> {
        let info = Self {
            slide_id: slide_id.into(),
            width,
            height,
            microns_per_pixel: None,
        };
        info.validate()?;
        Ok(info)
    }

    pub fn with_resolution(mut self, microns_per_pixel: f64) -> Result<Self, GeometryError> {
        if !(microns_per_pixel.is_finite() && microns_per_pixel > 0.0) {
            return Err(GeometryError::InvalidResolution(microns_per_pixel));
        }
        self.microns_per_pixel = Some(microns_per_pixel);
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::EmptySlide {
                slide_id: self.slide_id.clone(),
                width: self.width,
                height: self.height,
            });
        }
        if let Some(mpp) = self.microns_per_pixel {
            if !(mpp.is_finite() && mpp > 0.0) {
                return Err(GeometryError::InvalidResolution(mpp));
            }
        }
        Ok(())
    }

    /// The whole slide as a box.
    pub fn bounds(&self) -> BBox {
        BBox {
            x1: 0.0,
            y1: 0.0,
            x2: f64::from(self.width.max(1)),
            y2: f64::from(self.height.max(1)),
        }
    }

    pub fn area(&self) -> f64 {
        f64::from(self.width) * f64::from(self.height)
    }
}

/// Ground-truth mitotic figure, stored by its center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub x: f64,
    pub y: f64,
}

impl Annotation {
    pub fn bbox(&self, box_size: f64) -> BBox {
        let half = box_size / 2.0;
        BBox {
            x1: self.x - half,
            y1: self.y - half,
            x2: self.x + half,
            y2: self.y + half,
        }
    }

    pub fn distance_to(&self, x: f64, y: f64) -> f64 {
        (self.x - x).hypot(self.y - y)
    }
}

/// All annotations of one slide. Every annotation of a dataset shares the
/// same square box size.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    slide_id: String,
    box_size: f64,
    annotations: Vec<Annotation>,
}

impl AnnotationSet {
    pub fn new(
        slide: &SlideInfo,
        box_size: f64,
        annotations: Vec<Annotation>,
    ) -> Result<Self, GeometryError> {
        slide.validate()?;
        if !(box_size.is_finite() && box_size > 0.0) {
            return Err(GeometryError::InvalidBoxSize(box_size));
        }
        let bounds = slide.bounds();
        if let Some(a) = annotations.iter().find(|a| !bounds.contains_point(a.x, a.y)) {
            return Err(GeometryError::CenterOutOfBounds {
                slide_id: slide.slide_id.clone(),
                x: a.x,
                y: a.y,
            });
        }
        Ok(Self {
            slide_id: slide.slide_id.clone(),
            box_size,
            annotations,
        })
    }

    pub fn slide_id(&self) -> &str {
        &self.slide_id
    }

    pub fn box_size(&self) -> f64 {
        self.box_size
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    pub fn bbox(&self, index: usize) -> BBox {
        self.annotations[index].bbox(self.box_size)
    }
}
