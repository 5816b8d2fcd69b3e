//! Bounding-box arithmetic: boxes from masks, IOU, confidence/size
//! filtering, shift augmentation, and normalized 8-d spatial features.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BoxError {
    #[error("invalid box ({x_min},{y_min})-({x_max},{y_max}): corners must be finite with x_min < x_max and y_min < y_max")]
    InvalidCorners {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
    #[error("empty pixel mask")]
    EmptyMask,
    #[error("proposal without a confidence cannot be filtered at threshold {thresh}")]
    MissingConfidence { thresh: f64 },
    #[error("augment_shift: {0}")]
    BadAugmentArgs(String),
}

/// Axis-aligned pixel rectangle, origin top-left, y down. Zero-area boxes
/// are rejected at construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, BoxError> {
        let ok = x_min.is_finite()
            && y_min.is_finite()
            && x_max.is_finite()
            && y_max.is_finite()
            && x_min < x_max
            && y_min < y_max;
        if !ok {
            return Err(BoxError::InvalidCorners {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
            confidence: None,
        })
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = Some(confidence);
        self
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

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }
}

/// Tightest box around a set of pixel coordinates. A pixel covers the unit
/// square starting at its coordinate, so the box spans
/// `[min x, max x + 1) x [min y, max y + 1)` and a single pixel still has
/// area 1.
pub fn box_from_mask(mask: &[(u32, u32)]) -> Result<BBox, BoxError> {
    let (mut min_x, mut min_y) = (u32::MAX, u32::MAX);
    let (mut max_x, mut max_y) = (0u32, 0u32);
    if mask.is_empty() {
        return Err(BoxError::EmptyMask);
    }
    for &(x, y) in mask {
        min_x = min_x.min(x);
        min_y = min_y.min(y);
        max_x = max_x.max(x);
        max_y = max_y.max(y);
    }
    BBox::new(
        min_x as f64,
        min_y as f64,
        (max_x + 1) as f64,
        (max_y + 1) as f64,
    )
}

/// Intersection over union; symmetric, in `[0,1]`, zero for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Keeps exactly the boxes with `confidence >= conf_thresh` and
/// `area >= min_area`, preserving input order.
pub fn filter_proposals(
    proposals: &[BBox],
    conf_thresh: f64,
    min_area: f64,
) -> Result<Vec<BBox>, BoxError> {
    let mut kept = Vec::new();
    for b in proposals {
        let conf = match (b.confidence, conf_thresh > 0.0) {
            (Some(c), _) => c,
            (None, false) => 1.0,
            (None, true) => return Err(BoxError::MissingConfidence { thresh: conf_thresh }),
        };
        if conf >= conf_thresh && b.area() >= min_area {
            kept.push(*b);
        }
    }
    Ok(kept)
}

/// Shifted copies of a ground-truth box for training augmentation.
pub struct AugmentOutcome {
    pub boxes: Vec<BBox>,
    /// Boxes where no admissible shift was found within budget and the
    /// ground truth itself was substituted.
    pub fallbacks: usize,
}

/// Draws `k` randomly shifted/scaled copies of `gt`, each clipped to the
/// image and rejected until `iou(copy, gt) > iou_min`.
///
/// Offsets are uniform in `[-0.3 w, 0.3 w] x [-0.3 h, 0.3 h]` and scale
/// factors uniform in `[0.85, 1.15]`, rejection budget 1000 per box.
/// Deterministic for a given rng state.
pub fn augment_shift<R: Rng>(
    gt: &BBox,
    k: usize,
    iou_min: f64,
    image_w: f64,
    image_h: f64,
    rng: &mut R,
) -> Result<AugmentOutcome, BoxError> {
    if k == 0 {
        return Err(BoxError::BadAugmentArgs("k must be >= 1".into()));
    }
    if !(0.0 < iou_min && iou_min < 1.0) {
        return Err(BoxError::BadAugmentArgs(format!(
            "iou_min {iou_min} must lie in (0,1)"
        )));
    }
    if gt.x_min < 0.0 || gt.y_min < 0.0 || gt.x_max > image_w || gt.y_max > image_h {
        return Err(BoxError::BadAugmentArgs(format!(
            "ground truth box exceeds {image_w}x{image_h} image bounds"
        )));
    }

    const BUDGET: usize = 1000;
    let (cx, cy) = gt.center();
    let (w, h) = (gt.width(), gt.height());
    let mut boxes = Vec::with_capacity(k);
    let mut fallbacks = 0;
    for _ in 0..k {
        let mut accepted = None;
        for _ in 0..BUDGET {
            let dx = rng.gen_range(-0.3 * w..=0.3 * w);
            let dy = rng.gen_range(-0.3 * h..=0.3 * h);
            let sx = rng.gen_range(0.85..=1.15);
            let sy = rng.gen_range(0.85..=1.15);
            let (hw, hh) = (w * sx / 2.0, h * sy / 2.0);
            let x_min = (cx + dx - hw).max(0.0);
            let y_min = (cy + dy - hh).max(0.0);
            let x_max = (cx + dx + hw).min(image_w);
            let y_max = (cy + dy + hh).min(image_h);
            let Ok(candidate) = BBox::new(x_min, y_min, x_max, y_max) else {
                continue;
            };
            if iou(&candidate, gt) > iou_min {
                accepted = Some(candidate);
                break;
            }
        }
        match accepted {
            Some(b) => boxes.push(b),
            None => {
                boxes.push(*gt);
                fallbacks += 1;
            }
        }
    }
    Ok(AugmentOutcome { boxes, fallbacks })
}

/// The 8 normalized spatial features of a box:
/// `[x_min, y_min, x_max, y_max, x_center, y_center, width, height]`, all
/// in image coordinates mapped to `[-1,1]` (the full image has width and
/// height 2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialFeature(pub [f64; 8]);

pub fn spatial_features(b: &BBox, image_w: f64, image_h: f64) -> SpatialFeature {
    assert!(image_w > 0.0 && image_h > 0.0, "image dims must be positive");
    let nx = |x: f64| 2.0 * x / image_w - 1.0;
    let ny = |y: f64| 2.0 * y / image_h - 1.0;
    let (x0, y0, x1, y1) = (nx(b.x_min), ny(b.y_min), nx(b.x_max), ny(b.y_max));
    SpatialFeature([
        x0,
        y0,
        x1,
        y1,
        (x0 + x1) / 2.0,
        (y0 + y1) / 2.0,
        x1 - x0,
        y1 - y0,
    ])
}
