//! Axis-aligned boxes, overlap measures, NMS and letterboxing.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub const fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f32 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f32 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) && self.x2 >= self.x1 && self.y2 >= self.y1
    }

    pub fn clip(&self, w: f32, h: f32) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, w),
            self.y1.clamp(0.0, h),
            self.x2.clamp(0.0, w),
            self.y2.clamp(0.0, h),
        )
    }

    fn intersection(&self, o: &BBox) -> f32 {
        let iw = (self.x2.min(o.x2) - self.x1.max(o.x1)).max(0.0);
        let ih = (self.y2.min(o.y2) - self.y1.max(o.y1)).max(0.0);
        iw * ih
    }
}

/// Intersection over union; zero when the union has no area.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `iou - |C \ (A ∪ B)| / |C|` with `C` the smallest
/// enclosing box.
pub fn giou(a: &BBox, b: &BBox) -> f32 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let enclose = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    if union <= 0.0 || enclose <= 0.0 {
        return 0.0;
    }
    inter / union - ((enclose - union) / enclose).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub confidence: f32,
}

/// Confidence descending, then class ascending, then position.
fn priority(dets: &[Detection], a: usize, b: usize) -> Ordering {
    dets[b]
        .confidence
        .total_cmp(&dets[a].confidence)
        .then(dets[a].class_id.cmp(&dets[b].class_id))
        .then(a.cmp(&b))
}

/// Greedy per-class suppression. The result is ordered by priority.
pub fn nms(dets: &[Detection], iou_thresh: f32) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| priority(dets, a, b));
    let mut kept_by_class: HashMap<usize, Vec<BBox>> = HashMap::new();
    let mut out = Vec::new();
    for i in order {
        let d = dets[i];
        let kept = kept_by_class.entry(d.class_id).or_default();
        if kept.iter().all(|k| iou(k, &d.bbox) < iou_thresh) {
            kept.push(d.bbox);
            out.push(d);
        }
    }
    out
}

/// Maps between source-image pixels and the letterboxed square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Letterbox {
    pub src_w: usize,
    pub src_h: usize,
    pub target: usize,
    pub new_w: usize,
    pub new_h: usize,
    pub pad_x: usize,
    pub pad_y: usize,
}

pub const LETTERBOX_FILL: f32 = 0.5;

impl Letterbox {
    pub fn plan(src_w: usize, src_h: usize, target: usize) -> Result<Self> {
        if src_w == 0 || src_h == 0 {
            return Err(Error::Image("letterbox: zero-sized image".into()));
        }
        if target == 0 || target % 32 != 0 {
            return Err(Error::invalid(format!("letterbox: target {target} is not a multiple of 32")));
        }
        let scale = (target as f64 / src_w as f64).min(target as f64 / src_h as f64);
        let new_w = ((src_w as f64 * scale).round() as usize).clamp(1, target);
        let new_h = ((src_h as f64 * scale).round() as usize).clamp(1, target);
        Ok(Letterbox {
            src_w,
            src_h,
            target,
            new_w,
            new_h,
            pad_x: (target - new_w) / 2,
            pad_y: (target - new_h) / 2,
        })
    }

    fn sx(&self) -> f32 {
        self.new_w as f32 / self.src_w as f32
    }

    fn sy(&self) -> f32 {
        self.new_h as f32 / self.src_h as f32
    }

    /// Source pixels → letterboxed pixels.
    pub fn forward(&self, b: &BBox) -> BBox {
        let (sx, sy, px, py) = (self.sx(), self.sy(), self.pad_x as f32, self.pad_y as f32);
        BBox::new(b.x1 * sx + px, b.y1 * sy + py, b.x2 * sx + px, b.y2 * sy + py)
    }

    /// Letterboxed pixels → source pixels, clipped to the source image.
    pub fn inverse(&self, b: &BBox) -> BBox {
        let (sx, sy, px, py) = (self.sx(), self.sy(), self.pad_x as f32, self.pad_y as f32);
        BBox::new((b.x1 - px) / sx, (b.y1 - py) / sy, (b.x2 - px) / sx, (b.y2 - py) / sy)
            .clip(self.src_w as f32, self.src_h as f32)
    }

    pub fn inverse_detection(&self, d: &Detection) -> Detection {
        Detection {
            bbox: self.inverse(&d.bbox),
            ..*d
        }
    }
}

/// Aspect-preserving nearest-neighbour resize into a `target`² canvas
/// filled with gray, image centered.
pub fn letterbox(image: &Tensor, target: usize) -> Result<(Tensor, Letterbox)> {
    let [n, c, h, w] = image.shape().0;
    let lb = Letterbox::plan(w, h, target)?;
    let mut out = Tensor::full(Shape::new(n, c, target, target), LETTERBOX_FILL);
    let xs: Vec<usize> = (0..lb.new_w)
        .map(|x| (((x as f64 + 0.5) * w as f64 / lb.new_w as f64) as usize).min(w - 1))
        .collect();
    for b in 0..n {
        for ch in 0..c {
            for y in 0..lb.new_h {
                let sy = (((y as f64 + 0.5) * h as f64 / lb.new_h as f64) as usize).min(h - 1);
                for (x, &sx) in xs.iter().enumerate() {
                    out.set(b, ch, y + lb.pad_y, x + lb.pad_x, image.at(b, ch, sy, sx));
                }
            }
        }
    }
    Ok((out, lb))
}
