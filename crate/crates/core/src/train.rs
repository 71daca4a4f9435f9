//! Target assignment, the detection loss and a small two-phase SGD loop.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::context::{Ctx, Mode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::geometry::{iou, letterbox, BBox, Letterbox};
use crate::head::{Anchor, Anchors};
use crate::model::YoloRet;
use crate::tensor::{Scalar, Shape, Tensor};
use crate::weights::WeightStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_phase1: f32,
    pub epochs_phase1: usize,
    pub lr_phase2: f32,
    pub epochs_phase2: usize,
    /// Floor of the cosine schedule as a fraction of each phase's start rate.
    pub lr_min_ratio: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub ignore_iou: f32,
    pub lambda_box: f64,
    pub lambda_obj: f64,
    pub lambda_cls: f64,
    /// Applied by [`prime_head`] to a freshly initialized head.
    pub head_gain: f32,
    pub obj_bias_prior: f32,
    /// Number of seeded epoch orders cycled through; 0 keeps dataset order.
    /// With fixed batches the network learns to lean on each batch's
    /// statistics, while a fixed pool keeps windows of whole cycles
    /// comparable.
    pub epoch_orders: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_phase1: 1e-3,
            epochs_phase1: 10,
            lr_phase2: 1e-4,
            epochs_phase2: 10,
            lr_min_ratio: 0.0,
            momentum: 0.9,
            batch_size: 8,
            ignore_iou: 0.5,
            lambda_box: 0.05,
            lambda_obj: 1.0,
            lambda_cls: 0.5,
            head_gain: 0.1,
            // logit of a 1% prior
            obj_bias_prior: -4.595,
            epoch_orders: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_phase1 > 0.0 && self.lr_phase2 > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_min_ratio) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("lr_min_ratio must lie in [0, 1] and momentum in [0, 1)".into()));
        }
        if !(self.head_gain > 0.0 && self.head_gain.is_finite() && self.obj_bias_prior.is_finite()) {
            return Err(Error::Config("head_gain must be positive and obj_bias_prior finite".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Scale the prediction convs and set the objectness prior before
/// training from scratch.
pub fn prime_head(model: &YoloRet, params: &mut WeightStore, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    model.head().prime(params, cfg.head_gain, cfg.obj_bias_prior)
}

/// One ground truth's responsible prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Positive {
    pub gt: usize,
    pub scale: usize,
    /// Row and column of the cell.
    pub cell: (usize, usize),
    pub anchor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnchorAssignment {
    pub positives: Vec<Positive>,
    /// Per scale, `anchor * h * w + row * w + col`: excluded from the
    /// background objectness term.
    pub ignore: Vec<Vec<bool>>,
    /// Per scale, the same layout: target objectness 1.
    pub positive_mask: Vec<Vec<bool>>,
    /// Per scale `(h, w)`.
    pub grids: Vec<(usize, usize)>,
}

/// IoU of two boxes sharing a center.
pub fn shape_iou(w1: f32, h1: f32, w2: f32, h2: f32) -> f32 {
    let inter = w1.min(w2) * h1.min(h2);
    let union = w1 * h1 + w2 * h2 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Assign each ground truth to the anchor with the best shape IoU over all
/// scales, at the cell holding its center. A non-positive slot whose prior
/// (anchor centered on the cell) overlaps any ground truth with IoU ≥
/// `ignore_iou` is ignored.
pub fn assign_anchors(
    gts: &[GroundTruth],
    anchors: &Anchors,
    strides: &[usize],
    image_hw: (usize, usize),
    ignore_iou: f32,
) -> Result<AnchorAssignment> {
    if anchors.scales() != strides.len() || anchors.per_scale() == 0 {
        return Err(Error::shape("assign_anchors", "scale count", strides.len(), anchors.scales()));
    }
    let (img_h, img_w) = image_hw;
    let a_n = anchors.per_scale();
    let grids: Vec<(usize, usize)> = strides.iter().map(|&s| (img_h.div_ceil(s), img_w.div_ceil(s))).collect();
    let mut positive_mask: Vec<Vec<bool>> = grids.iter().map(|(h, w)| vec![false; a_n * h * w]).collect();
    let mut positives = Vec::with_capacity(gts.len());
    for (gi, g) in gts.iter().enumerate() {
        let (cx, cy) = g.bbox.center();
        if !(cx >= 0.0 && cy >= 0.0 && cx < img_w as f32 && cy < img_h as f32) {
            return Err(Error::invalid(format!(
                "assign_anchors: ground truth {gi} center ({cx}, {cy}) is outside the {img_w}x{img_h} image"
            )));
        }
        let (mut best, mut best_iou) = ((0, 0), f32::NEG_INFINITY);
        for (s, a, anc) in anchors.iter() {
            let o = shape_iou(g.bbox.width(), g.bbox.height(), anc.w, anc.h);
            if o > best_iou {
                best = (s, a);
                best_iou = o;
            }
        }
        let (scale, anchor) = best;
        let stride = strides[scale] as f32;
        let (h, w) = grids[scale];
        let cell = (((cy / stride) as usize).min(h - 1), ((cx / stride) as usize).min(w - 1));
        positive_mask[scale][anchor * h * w + cell.0 * w + cell.1] = true;
        positives.push(Positive {
            gt: gi,
            scale,
            cell,
            anchor,
        });
    }
    let mut ignore: Vec<Vec<bool>> = grids.iter().map(|(h, w)| vec![false; a_n * h * w]).collect();
    for (s, &(h, w)) in grids.iter().enumerate() {
        let stride = strides[s] as f32;
        for (a, anc) in anchors.scale(s).iter().enumerate() {
            for r in 0..h {
                for c in 0..w {
                    let idx = a * h * w + r * w + c;
                    if positive_mask[s][idx] {
                        continue;
                    }
                    let prior = BBox::from_center((c as f32 + 0.5) * stride, (r as f32 + 0.5) * stride, anc.w, anc.h);
                    ignore[s][idx] = gts.iter().any(|g| iou(&prior, &g.bbox) >= ignore_iou);
                }
            }
        }
    }
    Ok(AnchorAssignment {
        positives,
        ignore,
        positive_mask,
        grids,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossParts {
    pub total: f64,
    #[serde(rename = "box")]
    pub box_: f64,
    pub obj: f64,
    pub cls: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_box: f64,
    pub lambda_obj: f64,
    pub lambda_cls: f64,
}

impl From<&TrainConfig> for LossWeights {
    fn from(c: &TrainConfig) -> Self {
        LossWeights {
            lambda_box: c.lambda_box,
            lambda_obj: c.lambda_obj,
            lambda_cls: c.lambda_cls,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        (&TrainConfig::default()).into()
    }
}

fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `BCE(sigmoid(z), t)` computed from the logit, and its derivative in `z`.
fn bce_logit(z: f64, t: f64) -> (f64, f64) {
    let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
    (softplus - t * z, sigmoid64(z) - t)
}

/// `giou(p, g)` and its gradient with respect to `(x1, y1, x2, y2)` of `p`.
pub fn giou_with_grad(p: [f64; 4], g: [f64; 4]) -> (f64, [f64; 4]) {
    let [x1, y1, x2, y2] = p;
    let [gx1, gy1, gx2, gy2] = g;
    let (pw, ph) = (x2 - x1, y2 - y1);
    let area_p = pw * ph;
    let area_g = (gx2 - gx1) * (gy2 - gy1);
    let iw = x2.min(gx2) - x1.max(gx1);
    let ih = y2.min(gy2) - y1.max(gy1);
    let overlap = iw > 0.0 && ih > 0.0;
    let inter = if overlap { iw * ih } else { 0.0 };
    let union = area_p + area_g - inter;
    let cw = x2.max(gx2) - x1.min(gx1);
    let ch = y2.max(gy2) - y1.min(gy1);
    let c = cw * ch;
    if union <= 0.0 || c <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let value = inter / union - (c - union) / c;
    let d_area = [-ph, -pw, ph, pw];
    let d_inter = if overlap {
        [
            if x1 > gx1 { -ih } else { 0.0 },
            if y1 > gy1 { -iw } else { 0.0 },
            if x2 < gx2 { ih } else { 0.0 },
            if y2 < gy2 { iw } else { 0.0 },
        ]
    } else {
        [0.0; 4]
    };
    let d_c = [
        if x1 < gx1 { -ch } else { 0.0 },
        if y1 < gy1 { -cw } else { 0.0 },
        if x2 > gx2 { ch } else { 0.0 },
        if y2 > gy2 { cw } else { 0.0 },
    ];
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let du = d_area[k] - d_inter[k];
        grad[k] = d_inter[k] / union - inter / (union * union) * du + du / c - union / (c * c) * d_c[k];
    }
    (value, grad)
}

/// Loss over a batch and its gradient with respect to every raw prediction
/// tensor. `assignments` and `gts` are per batch item.
pub fn detection_loss<T: Scalar>(
    raw: &[&Tensor<T>],
    assignments: &[AnchorAssignment],
    gts: &[Vec<GroundTruth>],
    anchors: &Anchors,
    strides: &[usize],
    weights: LossWeights,
) -> Result<(LossParts, Vec<Tensor<T>>)> {
    let a_n = anchors.per_scale();
    if raw.len() != strides.len() || anchors.scales() != strides.len() || a_n == 0 {
        return Err(Error::shape("detection_loss", "scale count", strides.len(), raw.len()));
    }
    let batch = raw[0].shape().n();
    if assignments.len() != batch || gts.len() != batch {
        return Err(Error::shape("detection_loss", "batch", batch, assignments.len().min(gts.len())));
    }
    let mut grads: Vec<Vec<f64>> = raw.iter().map(|t| vec![0.0; t.numel()]).collect();
    let (mut l_box, mut l_obj, mut l_cls) = (0.0, 0.0, 0.0);
    let n_pos: usize = assignments.iter().map(|a| a.positives.len()).sum();
    let norm = 1.0 / n_pos.max(1) as f64;
    for (s, t) in raw.iter().enumerate() {
        let [n, c, h, w] = t.shape().0;
        if n != batch {
            return Err(Error::shape("detection_loss", "batch", batch, n));
        }
        if c % a_n != 0 || c / a_n < 6 {
            return Err(Error::shape("detection_loss", "channels", a_n * 6, c));
        }
        let per = c / a_n;
        let hw = h * w;
        let data = t.data();
        let g = &mut grads[s];
        for b in 0..batch {
            let asg = &assignments[b];
            if asg.grids.get(s) != Some(&(h, w)) {
                return Err(Error::shape("detection_loss", "grid", asg.grids.get(s).map_or(0, |g| g.0), h));
            }
            for a in 0..a_n {
                let obj_base = ((b * c) + a * per + 4) * hw;
                for i in 0..hw {
                    let slot = a * hw + i;
                    let target = if asg.positive_mask[s][slot] {
                        1.0
                    } else if asg.ignore[s][slot] {
                        continue;
                    } else {
                        0.0
                    };
                    let z = data[obj_base + i].to_f64().unwrap_or(0.0);
                    let (l, d) = bce_logit(z, target);
                    l_obj += l;
                    g[obj_base + i] += weights.lambda_obj * norm * d;
                }
            }
            for p in asg.positives.iter().filter(|p| p.scale == s) {
                let gt = &gts[b][p.gt];
                let (r, col) = p.cell;
                let cell = r * w + col;
                let ch = |k: usize| ((b * c) + p.anchor * per + k) * hw + cell;
                let v = |k: usize| data[ch(k)].to_f64().unwrap_or(0.0);
                let anchor: Anchor = anchors.scale(s)[p.anchor];
                let stride = strides[s] as f64;
                let (sx, sy) = (sigmoid64(v(0)), sigmoid64(v(1)));
                let bx = (sx + col as f64) * stride;
                let by = (sy + r as f64) * stride;
                let bw = anchor.w as f64 * v(2).exp();
                let bh = anchor.h as f64 * v(3).exp();
                let pred = [bx - bw / 2.0, by - bh / 2.0, bx + bw / 2.0, by + bh / 2.0];
                let gb = [gt.bbox.x1 as f64, gt.bbox.y1 as f64, gt.bbox.x2 as f64, gt.bbox.y2 as f64];
                let (gi, dg) = giou_with_grad(pred, gb);
                l_box += 1.0 - gi;
                // d(1 - giou) through the corner parameterization.
                let k = -weights.lambda_box * norm;
                let d_bx = dg[0] + dg[2];
                let d_by = dg[1] + dg[3];
                let d_bw = (dg[2] - dg[0]) / 2.0;
                let d_bh = (dg[3] - dg[1]) / 2.0;
                g[ch(0)] += k * d_bx * stride * sx * (1.0 - sx);
                g[ch(1)] += k * d_by * stride * sy * (1.0 - sy);
                g[ch(2)] += k * d_bw * bw;
                g[ch(3)] += k * d_bh * bh;
                for cls in 0..per - 5 {
                    let target = if cls == gt.class_id { 1.0 } else { 0.0 };
                    let (l, d) = bce_logit(v(5 + cls), target);
                    l_cls += l;
                    g[ch(5 + cls)] += weights.lambda_cls * norm * d;
                }
            }
        }
    }
    let parts = LossParts {
        total: norm * (weights.lambda_box * l_box + weights.lambda_obj * l_obj + weights.lambda_cls * l_cls),
        box_: norm * weights.lambda_box * l_box,
        obj: norm * weights.lambda_obj * l_obj,
        cls: norm * weights.lambda_cls * l_cls,
    };
    let grads = grads
        .into_iter()
        .zip(raw)
        .map(|(g, t)| Tensor::from_vec(t.shape(), g.into_iter().map(T::lit).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok((parts, grads))
}

/// `lr_min + (lr_max - lr_min)(1 + cos(πt/T))/2`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f32, lr_min: f32) -> Result<f32> {
    if total == 0 {
        return Err(Error::invalid("cosine_lr: total steps must be positive"));
    }
    if t > total {
        return Err(Error::invalid(format!("cosine_lr: step {t} beyond {total}")));
    }
    let c = (PI * t as f64 / total as f64).cos();
    Ok((lr_min as f64 + 0.5 * (lr_max as f64 - lr_min as f64) * (1.0 + c)) as f32)
}

/// Momentum SGD: `v ← μv + g`, `p ← p − lr·v`, for every parameter in
/// `grads`. Velocities start at zero.
pub fn sgd_step(
    params: &mut WeightStore,
    grads: &BTreeMap<String, Tensor>,
    lr: f32,
    momentum: f32,
    velocity: &mut HashMap<String, Tensor>,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.require(name)?;
        if p.shape() != g.shape() {
            return Err(Error::ParamShape {
                name: name.clone(),
                expected: p.shape().to_string(),
                got: g.shape().to_string(),
            });
        }
        let v = velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        if v.shape() != g.shape() {
            return Err(Error::ParamShape {
                name: name.clone(),
                expected: g.shape().to_string(),
                got: v.shape().to_string(),
            });
        }
        let mut updated = (**p).clone();
        for ((pv, vv), &gv) in updated.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
        params.insert(name.clone(), updated);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRow {
    pub step: usize,
    pub phase: u8,
    pub lr: f32,
    #[serde(flatten)]
    pub loss: LossParts,
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("step,lr,total,box,obj,cls\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.lr, r.loss.total, r.loss.box_, r.loss.obj, r.loss.cls
        ));
    }
    s
}

/// A dataset letterboxed to the model resolution with boxes mapped along.
pub struct Prepared {
    pub images: Vec<Tensor>,
    pub gts: Vec<Vec<GroundTruth>>,
    pub letterboxes: Vec<Letterbox>,
}

pub fn prepare(ds: &Dataset, resolution: usize) -> Result<Prepared> {
    let mut out = Prepared {
        images: Vec::with_capacity(ds.len()),
        gts: Vec::with_capacity(ds.len()),
        letterboxes: Vec::with_capacity(ds.len()),
    };
    for (rec, img) in ds.records.iter().zip(&ds.images) {
        let (x, lb) = letterbox(img, resolution)?;
        out.gts.push(
            rec.boxes
                .iter()
                .map(|g| GroundTruth {
                    bbox: lb.forward(&g.bbox),
                    ..*g
                })
                .collect(),
        );
        out.images.push(x);
        out.letterboxes.push(lb);
    }
    Ok(out)
}

/// One SGD step on a batch. Returns the loss before the update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &YoloRet,
    params: &mut WeightStore,
    frozen: &HashSet<String>,
    images: &[Tensor],
    gts: &[Vec<GroundTruth>],
    cfg: &TrainConfig,
    lr: f32,
    velocity: &mut HashMap<String, Tensor>,
) -> Result<LossParts> {
    let batch = Tensor::cat_batch(images)?;
    let s = batch.shape();
    let assignments = gts
        .iter()
        .map(|g| assign_anchors(g, model.anchors(), model.strides(), (s.h(), s.w()), cfg.ignore_iou))
        .collect::<Result<Vec<_>>>()?;
    let (parts, grads, updates) = {
        let mut ctx = Ctx::new(params, Tape::recording(), Mode::Train).with_frozen(frozen.clone());
        let x = Var::constant(batch);
        let raw = model.forward(&mut ctx, &x)?;
        let values: Vec<&Tensor> = raw.iter().map(|v| v.value()).collect();
        let (parts, local) = detection_loss(&values, &assignments, gts, model.anchors(), model.strides(), cfg.into())?;
        let inputs: Vec<&Var> = raw.iter().collect();
        let loss = ctx.tape.custom_scalar(&inputs, parts.total as f32, local)?;
        let grads = ctx.tape.backward(&loss)?.into_params();
        (parts, grads, ctx.take_updates())
    };
    sgd_step(params, &grads, lr, cfg.momentum, velocity)?;
    for u in updates {
        params.insert(u.name, u.value);
    }
    Ok(parts)
}

fn batches(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    (0..n.div_ceil(size)).map(|i| i * size..((i + 1) * size).min(n)).collect()
}

/// Phase 1 trains everything outside `frozen`; phase 2 trains everything.
/// Each phase runs a cosine schedule from its start rate over its steps and
/// starts with zero momentum. Epoch `e` follows order `e % epoch_orders`
/// of a seeded pool of permutations (dataset order when the pool is empty).
/// `on_step` sees each row together with the parameters after that step.
pub fn train_two_phase(
    model: &YoloRet,
    params: &mut WeightStore,
    frozen: &HashSet<String>,
    data: &Prepared,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRow, &WeightStore),
) -> Result<Vec<LossRow>> {
    cfg.validate()?;
    let n = data.images.len();
    if n == 0 {
        return Err(Error::invalid("train: empty dataset"));
    }
    let plan = batches(n, cfg.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let orders: Vec<Vec<usize>> = if cfg.epoch_orders == 0 {
        vec![(0..n).collect()]
    } else {
        (0..cfg.epoch_orders)
            .map(|_| {
                let mut o: Vec<usize> = (0..n).collect();
                o.shuffle(&mut rng);
                o
            })
            .collect()
    };
    let mut epochs_done = 0;
    let none = HashSet::new();
    let mut rows = Vec::new();
    for (phase, lr_max, epochs, frozen) in [
        (1u8, cfg.lr_phase1, cfg.epochs_phase1, frozen),
        (2u8, cfg.lr_phase2, cfg.epochs_phase2, &none),
    ] {
        let total = epochs * plan.len();
        let mut velocity = HashMap::new();
        for t in 0..total {
            let epoch = epochs_done + t / plan.len();
            let lr = cosine_lr(t, total, lr_max, lr_max * cfg.lr_min_ratio)?;
            let idx = &orders[epoch % orders.len()][plan[t % plan.len()].clone()];
            let images: Vec<Tensor> = idx.iter().map(|&i| data.images[i].clone()).collect();
            let gts: Vec<Vec<GroundTruth>> = idx.iter().map(|&i| data.gts[i].clone()).collect();
            let loss = train_step(model, params, frozen, &images, &gts, cfg, lr, &mut velocity)?;
            let row = LossRow {
                step: rows.len(),
                phase,
                lr,
                loss,
            };
            on_step(&row, params);
            rows.push(row);
        }
        epochs_done += epochs;
    }
    Ok(rows)
}

/// Replace every batchnorm's running statistics with the pooled moments of
/// `images` under the current weights. Each batch runs with batch statistics,
/// as in training; the pooled variance includes the spread of batch means.
pub fn recalibrate_bn(model: &YoloRet, params: &mut WeightStore, images: &[Tensor], batch_size: usize) -> Result<()> {
    if images.is_empty() || batch_size == 0 {
        return Err(Error::invalid("recalibrate: need images and a batch size"));
    }
    // prefix -> (count, sum of x, sum of x^2) per channel
    let mut acc: BTreeMap<String, (f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in batches(images.len(), batch_size) {
        let batch = Tensor::cat_batch(&images[r])?;
        let mut ctx = Ctx::new(params, Tape::inference(), Mode::Train);
        model.forward(&mut ctx, &Var::constant(batch))?;
        for m in ctx.take_moments() {
            let c = m.mean.len();
            let e = acc.entry(m.prefix).or_insert_with(|| (0.0, vec![0.0; c], vec![0.0; c]));
            let n = m.count as f64;
            e.0 += n;
            for i in 0..c {
                e.1[i] += n * m.mean[i];
                e.2[i] += n * (m.var[i] + m.mean[i] * m.mean[i]);
            }
        }
    }
    for (prefix, (n, s1, s2)) in acc {
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let mean: Vec<f64> = s1.iter().map(|v| v / n).collect();
        let var = s2.iter().zip(&mean).map(|(v, m)| ((v / n - m * m).max(0.0) * unbias) as f32).collect();
        params.insert(format!("{prefix}.running_mean"), Tensor::vector(mean.iter().map(|&v| v as f32).collect()));
        params.insert(format!("{prefix}.running_var"), Tensor::vector(var));
    }
    Ok(())
}

/// Trailing moving average with window `k` (shorter at the start).
pub fn moving_average(xs: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for i in 0..xs.len() {
        acc += xs[i];
        if i >= k {
            acc -= xs[i - k];
        }
        out.push(acc / (i + 1).min(k) as f64);
    }
    out
}

/// The raw-prediction shapes a model emits for a batch of `n` images.
pub fn raw_shapes(model: &YoloRet, n: usize) -> Vec<Shape> {
    let r = model.resolution();
    model
        .strides()
        .iter()
        .map(|&s| Shape::new(n, model.head().out_channels(), r / s, r / s))
        .collect()
}
