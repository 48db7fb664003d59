//! Normalized bounding-box arithmetic shared by every other module: areas,
//! intersection-over-union, and non-maximum suppression.
//!
//! Boxes are stored in YOLO center format (`cx cy w h`, all normalized to the
//! unit frame). Corner conversion is internal. IoU of boxes touching only at
//! an edge is exactly 0; IoU of identical boxes is exactly 1.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Overruns up to this much past the unit frame are treated as float noise
/// and clamped silently by [`BBox::new`].
const FRAME_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("box has a non-finite field: cx={cx} cy={cy} w={w} h={h}")]
    NonFinite { cx: f64, cy: f64, w: f64, h: f64 },
    #[error("box has non-positive size: w={w} h={h}")]
    DegenerateSize { w: f64, h: f64 },
    #[error("box extent [{x0:.4}, {x1:.4}]x[{y0:.4}, {y1:.4}] leaves the unit frame")]
    OutOfFrame { x0: f64, y0: f64, x1: f64, y1: f64 },
    #[error("box lies entirely outside the unit frame")]
    OutsideFrame,
    #[error("NMS IoU threshold must be in (0, 1], got {0}")]
    InvalidNmsThreshold(f64),
}

/// Axis-aligned box, normalized center format. Invariants are enforced at
/// construction: positive size, extent within the unit frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBBox", into = "RawBBox")]
pub struct BBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

/// Serde-facing mirror of [`BBox`] without invariants.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct RawBBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl From<BBox> for RawBBox {
    fn from(b: BBox) -> Self {
        RawBBox {
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
        }
    }
}

impl TryFrom<RawBBox> for BBox {
    type Error = GeometryError;

    fn try_from(raw: RawBBox) -> Result<Self, Self::Error> {
        BBox::new(raw.cx, raw.cy, raw.w, raw.h)
    }
}

impl BBox {
    /// Strict constructor: rejects boxes whose extent leaves the unit frame
    /// by more than float noise. Degenerate sizes are always rejected.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        let (bbox, clamped) = Self::new_clamped(cx, cy, w, h)?;
        if clamped {
            let (x0, y0, x1, y1) = corners(cx, cy, w, h);
            return Err(GeometryError::OutOfFrame { x0, y0, x1, y1 });
        }
        Ok(bbox)
    }

    /// Lenient constructor: clamps extents that overrun the unit frame and
    /// reports whether a beyond-tolerance clamp happened, so callers can
    /// record a warning. Boxes entirely outside the frame and degenerate
    /// sizes are still rejected.
    pub fn new_clamped(cx: f64, cy: f64, w: f64, h: f64) -> Result<(Self, bool), GeometryError> {
        if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(GeometryError::NonFinite { cx, cy, w, h });
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(GeometryError::DegenerateSize { w, h });
        }
        let (x0, y0, x1, y1) = corners(cx, cy, w, h);
        let nx0 = x0.max(0.0);
        let ny0 = y0.max(0.0);
        let nx1 = x1.min(1.0);
        let ny1 = y1.min(1.0);
        if nx1 <= nx0 || ny1 <= ny0 {
            return Err(GeometryError::OutsideFrame);
        }
        // untouched boxes keep their exact input fields; only genuinely
        // clamped edges force a re-derivation of center and size
        if nx0 == x0 && ny0 == y0 && nx1 == x1 && ny1 == y1 {
            return Ok((BBox { cx, cy, w, h }, false));
        }
        let clamped = (x0 - nx0).abs() > FRAME_TOLERANCE
            || (y0 - ny0).abs() > FRAME_TOLERANCE
            || (x1 - nx1).abs() > FRAME_TOLERANCE
            || (y1 - ny1).abs() > FRAME_TOLERANCE;
        Ok((
            BBox {
                cx: (nx0 + nx1) / 2.0,
                cy: (ny0 + ny1) / 2.0,
                w: nx1 - nx0,
                h: ny1 - ny0,
            },
            clamped,
        ))
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Corner form `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        corners(self.cx, self.cy, self.w, self.h)
    }

    /// Area as a fraction of the frame, in (0, 1].
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Intersection-over-union with `other`. Exactly 0 for disjoint or
    /// edge-touching boxes, exactly 1 for identical boxes.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        if inter <= 0.0 {
            return 0.0;
        }
        // corner-space areas keep inter == union exact for identical boxes
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let area_a = (ax1 - ax0) * (ay1 - ay0);
        let area_b = (bx1 - bx0) * (by1 - by0);
        let union = area_a + area_b - inter;
        // guard 1-ulp rounding in the union
        (inter / union).min(1.0)
    }

    /// Overlap area with `other`; 0 when boxes are disjoint or edge-touching.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let iw = ax1.min(bx1) - ax0.max(bx0);
        let ih = ay1.min(by1) - ay0.max(by0);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }
}

fn corners(cx: f64, cy: f64, w: f64, h: f64) -> (f64, f64, f64, f64) {
    (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

/// Anything NMS can suppress: a box with a confidence and a class.
pub trait ScoredBox {
    fn bbox(&self) -> BBox;
    fn confidence(&self) -> f64;
    fn class_id(&self) -> u32;
}

impl ScoredBox for (BBox, f64, u32) {
    fn bbox(&self) -> BBox {
        self.0
    }

    fn confidence(&self) -> f64 {
        self.1
    }

    fn class_id(&self) -> u32 {
        self.2
    }
}

impl<T: ScoredBox> ScoredBox for &T {
    fn bbox(&self) -> BBox {
        (*self).bbox()
    }

    fn confidence(&self) -> f64 {
        (*self).confidence()
    }

    fn class_id(&self) -> u32 {
        (*self).class_id()
    }
}

/// Greedy class-wise non-maximum suppression, returning indices of the
/// survivors ordered by non-increasing confidence (ties broken by earlier
/// input index). A kept detection suppresses same-class detections whose IoU
/// with it is strictly greater than `iou_threshold`.
pub fn nms_indices<T: ScoredBox>(
    items: &[T],
    iou_threshold: f64,
) -> Result<Vec<usize>, GeometryError> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(GeometryError::InvalidNmsThreshold(iou_threshold));
    }

    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        items[b]
            .confidence()
            .total_cmp(&items[a].confidence())
            .then(a.cmp(&b))
    });

    let mut suppressed = vec![false; items.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order[pos + 1..] {
            if suppressed[j] || items[j].class_id() != items[i].class_id() {
                continue;
            }
            if items[i].bbox().iou(&items[j].bbox()) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    Ok(kept)
}

/// [`nms_indices`] that clones the survivors out.
pub fn nms<T: ScoredBox + Clone>(items: &[T], iou_threshold: f64) -> Result<Vec<T>, GeometryError> {
    Ok(nms_indices(items, iou_threshold)?
        .into_iter()
        .map(|i| items[i].clone())
        .collect())
}
