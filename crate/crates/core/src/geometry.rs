//! Axis-aligned box arithmetic: IoU, containment, scaling, NMS.
//!
//! Boxes live in continuous image coordinates with the origin at the top
//! left. The tightest box of a pixel region maps pixel `(row, col)` to the
//! unit square `[col, col+1] x [row, row+1]`, which keeps IoU exact and
//! scaling well-defined.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle with strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Build a box, rejecting degenerate or non-finite coordinates.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite coordinates ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::InvalidBox(format!(
                "empty extent ({x1}, {y1}, {x2}, {y2})"
            )));
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

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }
}

/// Intersection-over-union of two boxes. Zero when disjoint, symmetric,
/// always in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

/// True iff `inner` lies inside `outer`, boundaries inclusive (a box
/// contains itself).
pub fn contains(outer: &BBox, inner: &BBox) -> bool {
    outer.x1 <= inner.x1 && outer.y1 <= inner.y1 && inner.x2 <= outer.x2 && inner.y2 <= outer.y2
}

/// Enlarge a box about its center by factor `r >= 1`, then clip to the
/// image extent `(width, height)`. Proposals cannot extend outside the
/// image, so an unclipped enlarged box would spuriously exclude valid
/// proposals.
pub fn scale_box(b: &BBox, r: f64, bounds: (f64, f64)) -> Result<BBox> {
    if !r.is_finite() || r < 1.0 {
        return Err(Error::InvalidConfig(format!(
            "box scale factor must be >= 1, got {r}"
        )));
    }
    let (w, h) = bounds;
    // exact identity at r = 1; the center/half-extent form rounds
    if r == 1.0 {
        return BBox::new(
            b.x1.max(0.0),
            b.y1.max(0.0),
            b.x2.min(w),
            b.y2.min(h),
        );
    }
    let (cx, cy) = b.center();
    let hw = b.width() * r / 2.0;
    let hh = b.height() * r / 2.0;
    BBox::new(
        (cx - hw).max(0.0),
        (cy - hh).max(0.0),
        (cx + hw).min(w),
        (cy + hh).min(h),
    )
}

/// Greedy non-maximum suppression. Returns indices of the retained boxes
/// in descending score order; score ties keep the lower original index
/// first. A box is kept iff its IoU with every already-kept box is below
/// `iou_threshold`.
pub fn nms(boxes: &[(BBox, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        boxes[b].1
            .partial_cmp(&boxes[a].1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut kept: Vec<usize> = Vec::new();
    for &idx in &order {
        let candidate = &boxes[idx].0;
        if kept.iter().all(|&k| iou(&boxes[k].0, candidate) < iou_threshold) {
            kept.push(idx);
        }
    }
    kept
}
