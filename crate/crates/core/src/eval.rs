//! Average precision with VOC and COCO conventions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox, Detection};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(flatten)]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class_id: usize,
    #[serde(default)]
    pub difficult: bool,
}

impl GroundTruth {
    pub const fn new(bbox: BBox, class_id: usize) -> Self {
        GroundTruth {
            bbox,
            class_id,
            difficult: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchLabel {
    Tp,
    Fp,
    Ignored,
}

/// Indices sorted by confidence descending, ties by position.
fn by_confidence(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    order
}

/// Greedy matching with configurable exclusions. A ground truth for which
/// `ignore_gt` holds is never a positive, and a detection overlapping one
/// (without a regular match) is ignored. An unmatched detection for which
/// `ignore_det` holds is ignored instead of counted as false.
fn match_with(
    dets: &[Detection],
    gts: &[GroundTruth],
    thresh: f32,
    ignore_gt: impl Fn(&GroundTruth) -> bool,
    ignore_det: impl Fn(&Detection) -> bool,
) -> Vec<MatchLabel> {
    let mut labels = vec![MatchLabel::Fp; dets.len()];
    let mut taken = vec![false; gts.len()];
    for i in by_confidence(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f32)> = None;
        let mut hits_ignored = false;
        for (j, g) in gts.iter().enumerate() {
            let o = iou(&d.bbox, &g.bbox);
            if o < thresh {
                continue;
            }
            if ignore_gt(g) {
                hits_ignored = true;
            } else if !taken[j] && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        labels[i] = match best {
            Some((j, _)) => {
                taken[j] = true;
                MatchLabel::Tp
            }
            None if hits_ignored || ignore_det(d) => MatchLabel::Ignored,
            None => MatchLabel::Fp,
        };
    }
    labels
}

/// Labels in input order for one image and one class.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f32) -> Vec<MatchLabel> {
    match_with(dets, gts, iou_thresh, |g| g.difficult, |_| false)
}

/// All-point interpolated AP over `(confidence, is_tp)` pairs; ignored
/// detections should already be removed. Ties keep input order.
pub fn average_precision(scored: &[(f32, bool)], n_positives: usize) -> f64 {
    if n_positives == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0).then(a.cmp(&b)));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    for i in order {
        if scored[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_positives as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len())
        .map(|i| (recall[i] - recall[i - 1]) * precision[i])
        .sum()
}

/// AP of one class over a dataset, `None` when the class has no positives.
fn class_ap(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    class_id: usize,
    thresh: f32,
    area: Option<AreaRange>,
) -> Option<f64> {
    let in_range = |b: &BBox| area.is_none_or(|r| r.contains(b.area() as f64));
    let mut scored = Vec::new();
    let mut n_pos = 0;
    for (d, g) in dets.iter().zip(gts) {
        let d: Vec<Detection> = d.iter().filter(|x| x.class_id == class_id).copied().collect();
        let g: Vec<GroundTruth> = g.iter().filter(|x| x.class_id == class_id).copied().collect();
        let excluded = |x: &GroundTruth| x.difficult || !in_range(&x.bbox);
        n_pos += g.iter().filter(|x| !excluded(x)).count();
        let labels = match_with(&d, &g, thresh, excluded, |x| !in_range(&x.bbox));
        for (det, label) in d.iter().zip(labels) {
            match label {
                MatchLabel::Tp => scored.push((det.confidence, true)),
                MatchLabel::Fp => scored.push((det.confidence, false)),
                MatchLabel::Ignored => {}
            }
        }
    }
    (n_pos > 0).then(|| average_precision(&scored, n_pos))
}

fn classes_in(gts: &[Vec<GroundTruth>]) -> Vec<usize> {
    let mut c: Vec<usize> = gts.iter().flatten().map(|g| g.class_id).collect();
    c.sort_unstable();
    c.dedup();
    c
}

fn mean_ap(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    thresh: f32,
    area: Option<AreaRange>,
) -> (BTreeMap<usize, f64>, Option<f64>) {
    let per_class: BTreeMap<usize, f64> = classes_in(gts)
        .into_iter()
        .filter_map(|c| class_ap(dets, gts, c, thresh, area).map(|ap| (c, ap)))
        .collect();
    let mean = (!per_class.is_empty()).then(|| per_class.values().sum::<f64>() / per_class.len() as f64);
    (per_class, mean)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VocReport {
    pub iou_thresh: f32,
    pub per_class: BTreeMap<usize, f64>,
    pub map: f64,
}

/// Per-class AP and their mean at one IoU threshold, over classes that have
/// at least one non-difficult ground truth. Inputs are per image.
pub fn evaluate_voc(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], iou_thresh: f32) -> VocReport {
    let (per_class, map) = mean_ap(dets, gts, iou_thresh, None);
    VocReport {
        iou_thresh,
        per_class,
        map: map.unwrap_or(0.0),
    }
}

/// Half-open box-area interval in squared source pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaRange {
    pub lo: f64,
    pub hi: f64,
    pub lo_inclusive: bool,
    pub hi_inclusive: bool,
}

impl AreaRange {
    pub fn contains(&self, a: f64) -> bool {
        let above = if self.lo_inclusive { a >= self.lo } else { a > self.lo };
        let below = if self.hi_inclusive { a <= self.hi } else { a < self.hi };
        above && below
    }
}

pub const SMALL: AreaRange = AreaRange {
    lo: 0.0,
    hi: 32.0 * 32.0,
    lo_inclusive: true,
    hi_inclusive: false,
};
pub const MEDIUM: AreaRange = AreaRange {
    lo: 32.0 * 32.0,
    hi: 96.0 * 96.0,
    lo_inclusive: true,
    hi_inclusive: true,
};
pub const LARGE: AreaRange = AreaRange {
    lo: 96.0 * 96.0,
    hi: f64::INFINITY,
    lo_inclusive: false,
    hi_inclusive: true,
};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f32> {
    (0..10).map(|i| (0.5 + 0.05 * i as f64) as f32).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CocoReport {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    /// `None` when no ground truth falls in the bucket.
    #[serde(rename = "APs")]
    pub ap_small: Option<f64>,
    #[serde(rename = "APm")]
    pub ap_medium: Option<f64>,
    #[serde(rename = "APl")]
    pub ap_large: Option<f64>,
}

pub fn evaluate_coco(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>]) -> CocoReport {
    let over_thresholds = |area: Option<AreaRange>| -> Option<f64> {
        let ts = coco_thresholds();
        let aps: Vec<f64> = ts.iter().filter_map(|&t| mean_ap(dets, gts, t, area).1).collect();
        (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
    };
    CocoReport {
        ap: over_thresholds(None).unwrap_or(0.0),
        ap50: mean_ap(dets, gts, 0.5, None).1.unwrap_or(0.0),
        ap75: mean_ap(dets, gts, 0.75, None).1.unwrap_or(0.0),
        ap_small: over_thresholds(Some(SMALL)),
        ap_medium: over_thresholds(Some(MEDIUM)),
        ap_large: over_thresholds(Some(LARGE)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x1: f32, y1: f32, x2: f32, y2: f32, class_id: usize, confidence: f32) -> Detection {
        Detection {
            bbox: BBox::new(x1, y1, x2, y2),
            class_id,
            confidence,
        }
    }

    fn gt(x1: f32, y1: f32, x2: f32, y2: f32, class_id: usize, difficult: bool) -> GroundTruth {
        GroundTruth {
            bbox: BBox::new(x1, y1, x2, y2),
            class_id,
            difficult,
        }
    }

    #[test]
    fn single_match_rule() {
        let g = [gt(0.0, 0.0, 10.0, 10.0, 0, false)];
        let d = [det(0.0, 0.0, 10.0, 10.0, 0, 0.5)];
        assert_eq!(match_detections(&d, &g, 0.5), vec![MatchLabel::Tp]);
        let d = [det(0.0, 0.0, 10.0, 10.0, 0, 0.5), det(0.0, 0.0, 10.0, 9.0, 0, 0.7)];
        assert_eq!(match_detections(&d, &g, 0.5), vec![MatchLabel::Fp, MatchLabel::Tp]);
    }

    #[test]
    fn difficult_is_ignored() {
        let g = [gt(0.0, 0.0, 10.0, 10.0, 0, true)];
        let d = [det(0.0, 0.0, 10.0, 10.0, 0, 0.5), det(50.0, 50.0, 60.0, 60.0, 0, 0.4)];
        assert_eq!(match_detections(&d, &g, 0.5), vec![MatchLabel::Ignored, MatchLabel::Fp]);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[(0.9, true)], 1), 1.0);
        assert_eq!(average_precision(&[(0.9, false), (0.8, true)], 1), 0.5);
        assert_eq!(average_precision(&[(0.9, false), (0.8, false)], 3), 0.0);
        assert_eq!(average_precision(&[], 0), 0.0);
        assert_eq!(average_precision(&[(0.9, true)], 2), 0.5);
    }

    #[test]
    fn empty_detections_score_zero() {
        let g = vec![vec![gt(0.0, 0.0, 10.0, 10.0, 0, false)]];
        let r = evaluate_voc(&[vec![]], &g, 0.5);
        assert_eq!(r.map, 0.0);
    }

    #[test]
    fn shrunk_boxes_pass_at_half_not_three_quarters() {
        let g = vec![vec![gt(0.0, 0.0, 100.0, 100.0, 0, false)]];
        let s = 100.0 * (1.0 - 0.6f32.sqrt()) / 2.0;
        let d = vec![vec![det(s, s, 100.0 - s, 100.0 - s, 0, 0.9)]];
        let r = evaluate_coco(&d, &g);
        assert_eq!(r.ap50, 1.0);
        assert_eq!(r.ap75, 0.0);

        let s = 100.0 * (1.0 - 0.62f32.sqrt()) / 2.0;
        let d = vec![vec![det(s, s, 100.0 - s, 100.0 - s, 0, 0.9)]];
        let r = evaluate_coco(&d, &g);
        assert!((r.ap - 0.3).abs() < 1e-12);
        assert_eq!(r.ap_large, Some(r.ap));
        assert_eq!(r.ap_small, None);
        assert_eq!(r.ap_medium, None);
    }
}
