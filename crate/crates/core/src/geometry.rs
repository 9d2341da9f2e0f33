//! Axis-aligned box arithmetic.
//!
//! Boxes use continuous corner coordinates in pixels: `(x1, y1)` is the
//! top-left corner and `(x2, y2)` the bottom-right one. A box covering the
//! pixel grid `0..w` therefore has width exactly `w`; no `+1` terms appear
//! anywhere, which keeps IoU independent of image resolution.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Upper bound applied to log-scale size deltas before exponentiation.
pub fn delta_clamp() -> f64 {
    (1000.0f64 / 16.0).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite or zero/negative-area corners.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::DegenerateBox { x1, y1, x2, y2 })
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x2 > self.x1
            && self.y2 > self.y1
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Intersection over union. Callers must pass valid boxes; two boxes with
    /// an empty union yield 0.
    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }

    /// Clips to `[0, width] x [0, height]`. The result may be degenerate when
    /// the box lies entirely outside the image.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn flip_horizontal(&self, width: f64) -> BBox {
        BBox {
            x1: width - self.x2,
            y1: self.y1,
            x2: width - self.x1,
            y2: self.y2,
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

/// Checked IoU: fails when either box has zero area or non-finite corners.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if !bx.is_valid() {
            return Err(Error::DegenerateBox {
                x1: bx.x1,
                y1: bx.y1,
                x2: bx.x2,
                y2: bx.y2,
            });
        }
    }
    Ok(a.iou(b))
}

/// Parameterized offsets of a box relative to a reference box: center shift
/// normalized by the reference size, and log-ratios of the sizes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub fn to_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        BoxDelta {
            dx: v[0],
            dy: v[1],
            dw: v[2],
            dh: v[3],
        }
    }

    /// Divides each component by the matching weight.
    pub fn scaled(&self, weights: [f64; 4]) -> Self {
        BoxDelta {
            dx: self.dx * weights[0],
            dy: self.dy * weights[1],
            dw: self.dw * weights[2],
            dh: self.dh * weights[3],
        }
    }
}

pub fn encode(gt: &BBox, anchor: &BBox) -> BoxDelta {
    let (gx, gy) = gt.center();
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    BoxDelta {
        dx: (gx - ax) / aw,
        dy: (gy - ay) / ah,
        dw: (gt.width() / aw).ln(),
        dh: (gt.height() / ah).ln(),
    }
}

/// Inverse of [`encode`]. `dw` and `dh` are clamped to [`delta_clamp`] so the
/// result is always a valid, finite box for a valid anchor.
pub fn decode(delta: &BoxDelta, anchor: &BBox) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let clamp = delta_clamp();
    let cx = ax + delta.dx * aw;
    let cy = ay + delta.dy * ah;
    let w = aw * delta.dw.min(clamp).exp();
    let h = ah * delta.dh.min(clamp).exp();
    BBox {
        x1: cx - 0.5 * w,
        y1: cy - 0.5 * h,
        x2: cx + 0.5 * w,
        y2: cy + 0.5 * h,
    }
}

/// Weighted box coder used by the heads: encoded deltas are multiplied by
/// `weights` so regression targets have roughly unit scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCoder {
    pub weights: [f64; 4],
}

impl BoxCoder {
    pub const UNIT: BoxCoder = BoxCoder {
        weights: [1.0, 1.0, 1.0, 1.0],
    };

    pub fn encode(&self, gt: &BBox, anchor: &BBox) -> BoxDelta {
        encode(gt, anchor).scaled(self.weights)
    }

    pub fn decode(&self, delta: &BoxDelta, anchor: &BBox) -> BBox {
        let w = self.weights;
        let unscaled = delta.scaled([1.0 / w[0], 1.0 / w[1], 1.0 / w[2], 1.0 / w[3]]);
        decode(&unscaled, anchor)
    }
}

/// Greedy non-maximum suppression.
///
/// Returns kept indices in descending score order. Equal scores are ordered by
/// lower input index. A box is suppressed when its IoU with an already kept
/// box exceeds `iou_threshold`.
pub fn nms(boxes: &[(BBox, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].1.total_cmp(&boxes[a].1).then(a.cmp(&b)));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && boxes[i].0.iou(&boxes[j].0) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}
