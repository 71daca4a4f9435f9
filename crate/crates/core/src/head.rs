//! PANet-lite aggregation, the YOLO prediction layer and box decoding.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbone::FeaturePyramid;
use crate::blocks::{Block, BlockSpec, Hw};
use crate::context::Ctx;
use crate::error::{Error, Result};
use crate::flops::ConvLayer;
use crate::geometry::{BBox, Detection};
use crate::init;
use crate::kernels::{sigmoid, ConvGeom, ResizeDir};
use crate::tensor::{Scalar, Shape, Tensor};
use crate::weights::WeightStore;

/// Prior box size in input pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub w: f32,
    pub h: f32,
}

impl Anchor {
    pub const fn new(w: f32, h: f32) -> Self {
        Anchor { w, h }
    }
}

const REFERENCE_ANCHORS: [[(f32, f32); 3]; 3] = [
    [(10.0, 13.0), (16.0, 30.0), (33.0, 23.0)],
    [(30.0, 61.0), (62.0, 45.0), (59.0, 119.0)],
    [(116.0, 90.0), (156.0, 198.0), (373.0, 326.0)],
];
const REFERENCE_RESOLUTION: f32 = 416.0;

/// Anchors grouped per output scale, finest scale first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Anchors(pub Vec<Vec<Anchor>>);

impl Anchors {
    /// The three reference triplets rescaled to `resolution`.
    pub fn default_for(resolution: usize) -> Self {
        let f = resolution as f32 / REFERENCE_RESOLUTION;
        Anchors(
            REFERENCE_ANCHORS
                .iter()
                .map(|scale| scale.iter().map(|&(w, h)| Anchor::new(w * f, h * f)).collect())
                .collect(),
        )
    }

    pub fn scales(&self) -> usize {
        self.0.len()
    }

    /// Anchors per scale; zero when the scales disagree.
    pub fn per_scale(&self) -> usize {
        let a = self.0.first().map_or(0, Vec::len);
        if self.0.iter().all(|s| s.len() == a) {
            a
        } else {
            0
        }
    }

    pub fn scale(&self, i: usize) -> &[Anchor] {
        &self.0[i]
    }

    /// Flattened `(scale, index, anchor)` triples.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, Anchor)> + '_ {
        self.0
            .iter()
            .enumerate()
            .flat_map(|(s, v)| v.iter().enumerate().map(move |(a, &anc)| (s, a, anc)))
    }

    pub fn validate(&self, scales: usize) -> Result<()> {
        if self.scales() != scales {
            return Err(Error::Config(format!(
                "anchors: {} scales given, model has {scales}",
                self.scales()
            )));
        }
        if self.per_scale() == 0 {
            return Err(Error::Config("anchors: every scale needs the same non-zero count".into()));
        }
        for (s, a, anc) in self.iter() {
            if !(anc.w > 0.0 && anc.h > 0.0 && anc.w.is_finite() && anc.h.is_finite()) {
                return Err(Error::Config(format!("anchors: scale {s} anchor {a} is not positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PanetConfig {
    /// Channel width per output scale, finest first.
    pub widths: Vec<usize>,
    pub expansion: usize,
    pub kernel: usize,
    pub se_reduction: usize,
}

impl Default for PanetConfig {
    fn default() -> Self {
        PanetConfig {
            widths: vec![64, 96, 128],
            expansion: 2,
            kernel: 3,
            se_reduction: 4,
        }
    }
}

/// Block inventory of the neck.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PanetAudit {
    /// One entry per scale: `(stride, mbconvse before the paths, mbconvse after merges)`.
    pub per_scale: Vec<(usize, usize, usize)>,
    pub cross_convs: usize,
}

#[derive(Debug, Clone)]
struct Lateral {
    unit: Block,
    from: usize,
    to: usize,
}

/// Top-down then bottom-up aggregation over consecutive power-of-two scales.
#[derive(Debug, Clone)]
pub struct PanetLite {
    strides: Vec<usize>,
    widths: Vec<usize>,
    pre: Vec<Block>,
    top_down: Vec<(Lateral, Block)>,
    bottom_up: Vec<(Lateral, Block)>,
}

impl PanetLite {
    /// `inputs` lists `(stride, raw channels)` per scale, finest first.
    pub fn new(prefix: &str, inputs: &[(usize, usize)], cfg: &PanetConfig) -> Result<Self> {
        let n = inputs.len();
        if n == 0 || cfg.widths.len() != n {
            return Err(Error::Config(format!(
                "panet: {} widths for {n} scales",
                cfg.widths.len()
            )));
        }
        if inputs.windows(2).any(|w| w[1].0 != 2 * w[0].0) {
            return Err(Error::Config("panet: strides must double from scale to scale".into()));
        }
        let strides: Vec<usize> = inputs.iter().map(|x| x.0).collect();
        let widths = cfg.widths.clone();
        let se = |c_in: usize, c_out: usize| {
            BlockSpec::mbconvse(c_in, c_out, cfg.expansion, cfg.kernel, 1).with_se_reduction(cfg.se_reduction)
        };
        let mut pre = Vec::with_capacity(n);
        for (i, &(s, c)) in inputs.iter().enumerate() {
            pre.push(Block::new(format!("{prefix}.pre.s{s}"), se(c, widths[i]))?);
        }
        let lateral = |kind: &str, from: usize, to: usize| -> Result<Lateral> {
            Ok(Lateral {
                unit: Block::new(
                    format!("{prefix}.{kind}_lateral.s{}_s{}", strides[from], strides[to]),
                    BlockSpec::pointwise(widths[from], widths[to]),
                )?,
                from,
                to,
            })
        };
        let mut top_down = Vec::new();
        for i in (0..n.saturating_sub(1)).rev() {
            let merge = Block::new(format!("{prefix}.td.s{}", strides[i]), se(widths[i], widths[i]))?;
            top_down.push((lateral("td", i + 1, i)?, merge));
        }
        let mut bottom_up = Vec::new();
        for i in 1..n {
            let merge = Block::new(format!("{prefix}.bu.s{}", strides[i]), se(widths[i], widths[i]))?;
            bottom_up.push((lateral("bu", i - 1, i)?, merge));
        }
        Ok(PanetLite {
            strides,
            widths,
            pre,
            top_down,
            bottom_up,
        })
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    fn all_blocks(&self) -> impl Iterator<Item = &Block> {
        self.pre.iter().chain(
            self.top_down
                .iter()
                .chain(&self.bottom_up)
                .flat_map(|(l, b)| [&l.unit, b]),
        )
    }

    /// Names of the cross-scale 1×1 units, for severing tests.
    pub fn lateral_prefixes(&self) -> Vec<String> {
        self.top_down
            .iter()
            .chain(&self.bottom_up)
            .map(|(l, _)| l.unit.prefix().to_string())
            .collect()
    }

    pub fn init(&self, store: &mut WeightStore, seed: u64) {
        for b in self.all_blocks() {
            b.init(store, seed);
        }
    }

    pub fn param_count(&self) -> usize {
        self.all_blocks().map(Block::param_count).sum()
    }

    pub fn audit(&self) -> PanetAudit {
        let per_scale = (0..self.strides.len())
            .map(|i| {
                let merges = self.top_down.iter().chain(&self.bottom_up).filter(|(l, _)| l.to == i).count();
                (self.strides[i], 1, merges)
            })
            .collect();
        PanetAudit {
            per_scale,
            cross_convs: self.top_down.len() + self.bottom_up.len(),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, pyramid: &FeaturePyramid<T>) -> Result<FeaturePyramid<T>> {
        let got = pyramid.strides();
        if got != self.strides {
            return Err(Error::shape("panet_lite", "scale count", self.strides.len(), got.len()));
        }
        let mut feats = Vec::with_capacity(self.strides.len());
        for (b, (_, x)) in self.pre.iter().zip(pyramid.entries()) {
            feats.push(b.forward(ctx, x)?);
        }
        for (lat, merge) in &self.top_down {
            let up = ctx.tape.resize(&feats[lat.from], 2, ResizeDir::Up)?;
            let p = lat.unit.forward(ctx, &up)?;
            let sum = ctx.tape.add(&feats[lat.to], &p)?;
            feats[lat.to] = merge.forward(ctx, &sum)?;
        }
        for (lat, merge) in &self.bottom_up {
            let down = ctx.tape.resize(&feats[lat.from], 2, ResizeDir::Down)?;
            let p = lat.unit.forward(ctx, &down)?;
            let sum = ctx.tape.add(&feats[lat.to], &p)?;
            feats[lat.to] = merge.forward(ctx, &sum)?;
        }
        FeaturePyramid::new(self.strides.iter().copied().zip(feats).collect())
    }

    pub fn conv_layers(&self, hw: Hw) -> Vec<ConvLayer> {
        let at = |i: usize| hw.map(|(h, w)| (h / self.strides[i], w / self.strides[i]));
        let mut out = Vec::new();
        for (i, b) in self.pre.iter().enumerate() {
            out.extend(b.conv_layers(at(i)).0);
        }
        for (lat, merge) in self.top_down.iter().chain(&self.bottom_up) {
            out.extend(lat.unit.conv_layers(at(lat.to)).0);
            out.extend(merge.conv_layers(at(lat.to)).0);
        }
        out
    }
}

/// One 1×1 prediction conv (with bias, no activation) per scale.
#[derive(Debug, Clone)]
pub struct YoloHead {
    prefix: String,
    strides: Vec<usize>,
    in_channels: Vec<usize>,
    anchors_per_scale: usize,
    num_classes: usize,
}

impl YoloHead {
    pub fn new(
        prefix: impl Into<String>,
        inputs: &[(usize, usize)],
        anchors_per_scale: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if anchors_per_scale == 0 || num_classes == 0 {
            return Err(Error::Config("head: need at least one anchor and one class".into()));
        }
        Ok(YoloHead {
            prefix: prefix.into(),
            strides: inputs.iter().map(|x| x.0).collect(),
            in_channels: inputs.iter().map(|x| x.1).collect(),
            anchors_per_scale,
            num_classes,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.anchors_per_scale * (5 + self.num_classes)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn conv_prefix(&self, stride: usize) -> String {
        format!("{}.s{stride}", self.prefix)
    }

    pub fn init(&self, store: &mut WeightStore, seed: u64) {
        for (&s, &c) in self.strides.iter().zip(&self.in_channels) {
            init::conv(store, seed, &self.conv_prefix(s), Shape::new(self.out_channels(), c, 1, 1), true);
        }
    }

    /// Training-start adjustment of freshly initialized prediction convs:
    /// weights scaled by `gain`, objectness biases set to `obj_bias`.
    /// Small raw outputs keep sigmoid offsets and exp sizes away from their
    /// flat regions, and a negative objectness bias avoids a large
    /// all-background loss on the first steps.
    pub fn prime(&self, store: &mut WeightStore, gain: f32, obj_bias: f32) -> Result<()> {
        let per = 5 + self.num_classes;
        for &s in &self.strides {
            let p = self.conv_prefix(s);
            let w = store.require(&format!("{p}.weight"))?.map(|v| v * gain);
            let mut b = (**store.require(&format!("{p}.bias"))?).clone();
            for a in 0..self.anchors_per_scale {
                b.data_mut()[a * per + 4] = obj_bias;
            }
            store.insert(format!("{p}.weight"), w);
            store.insert(format!("{p}.bias"), b);
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.in_channels.iter().map(|c| (c + 1) * self.out_channels()).sum()
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, features: &FeaturePyramid<T>) -> Result<Vec<Var<T>>> {
        if features.len() != self.strides.len() {
            return Err(Error::shape("yolo_head", "scale count", self.strides.len(), features.len()));
        }
        features
            .entries()
            .iter()
            .map(|(s, x)| ctx.conv(&self.conv_prefix(*s), x, ConvGeom::pointwise(), true))
            .collect()
    }

    pub fn conv_layers(&self, hw: Hw) -> Vec<ConvLayer> {
        self.strides
            .iter()
            .zip(&self.in_channels)
            .map(|(&s, &c)| ConvLayer {
                name: self.conv_prefix(s),
                c_in: c,
                c_out: self.out_channels(),
                k: 1,
                groups: 1,
                stride: 1,
                out_hw: hw.map(|(h, w)| (h / s, w / s)),
            })
            .collect()
    }
}

/// Box center and size in input pixels from raw offsets at cell `(cx, cy)`.
pub fn decode_box(t: [f32; 4], cx: usize, cy: usize, stride: usize, anchor: Anchor) -> BBox {
    let s = stride as f32;
    let bx = (sigmoid(t[0]) + cx as f32) * s;
    let by = (sigmoid(t[1]) + cy as f32) * s;
    let bw = anchor.w * t[2].exp();
    let bh = anchor.h * t[3].exp();
    BBox::from_center(bx, by, bw, bh)
}

/// Every cell × anchor of every scale as a detection (argmax class), with
/// confidence ≥ `conf_thresh`, boxes clipped to the `image_hw` frame. One
/// list per batch item.
pub fn decode(
    raw: &[Tensor],
    anchors: &Anchors,
    strides: &[usize],
    conf_thresh: f32,
    image_hw: (usize, usize),
) -> Result<Vec<Vec<Detection>>> {
    if raw.len() != strides.len() || anchors.scales() != strides.len() {
        return Err(Error::shape("decode", "scale count", strides.len(), raw.len().max(anchors.scales())));
    }
    let a_n = anchors.per_scale();
    if a_n == 0 {
        return Err(Error::invalid("decode: anchors must have equal non-zero count per scale"));
    }
    let batch = raw.first().map_or(0, |t| t.shape().n());
    let (img_h, img_w) = (image_hw.0 as f32, image_hw.1 as f32);
    let mut out = vec![Vec::new(); batch];
    for (si, (t, &stride)) in raw.iter().zip(strides).enumerate() {
        let [n, c, h, w] = t.shape().0;
        if n != batch {
            return Err(Error::shape("decode", "batch", batch, n));
        }
        if c % a_n != 0 || c / a_n < 6 {
            return Err(Error::shape("decode", "channels", a_n * 6, c));
        }
        let per = c / a_n;
        for (b, dets) in out.iter_mut().enumerate() {
            for (a, &anchor) in anchors.scale(si).iter().enumerate() {
                let ch = |k: usize| t.plane(b, a * per + k);
                let (tx, ty, tw, th, to) = (ch(0), ch(1), ch(2), ch(3), ch(4));
                for i in 0..h * w {
                    let (mut best, mut best_logit) = (0, f32::NEG_INFINITY);
                    for k in 0..per - 5 {
                        let v = ch(5 + k)[i];
                        if v > best_logit {
                            best = k;
                            best_logit = v;
                        }
                    }
                    let confidence = sigmoid(to[i]) * sigmoid(best_logit);
                    if confidence < conf_thresh {
                        continue;
                    }
                    let bbox = decode_box([tx[i], ty[i], tw[i], th[i]], i % w, i / w, stride, anchor);
                    dets.push(Detection {
                        bbox: bbox.clip(img_w, img_h),
                        class_id: best,
                        confidence,
                    });
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::FeaturePyramid;

    #[test]
    fn default_anchors_scale_with_resolution() {
        let a = Anchors::default_for(416);
        assert_eq!(a.scale(0)[0], Anchor::new(10.0, 13.0));
        let b = Anchors::default_for(208);
        assert_eq!(b.scale(2)[2], Anchor::new(186.5, 163.0));
        assert_eq!(a.per_scale(), 3);
        assert!(a.validate(3).is_ok());
        assert!(a.validate(2).is_err());
    }

    #[test]
    fn head_channel_counts() {
        let h = YoloHead::new("head", &[(8, 64), (16, 96), (32, 128)], 3, 20).unwrap();
        assert_eq!(h.out_channels(), 75);
        let h = YoloHead::new("head", &[(8, 64)], 3, 80).unwrap();
        assert_eq!(h.out_channels(), 255);
    }

    #[test]
    fn decode_zero_offsets() {
        let anchors = Anchors(vec![vec![Anchor::new(32.0, 64.0)]]);
        let raw = Tensor::zeros(Shape::new(1, 6, 2, 2));
        let b = decode_box([0.0; 4], 0, 0, 32, anchors.scale(0)[0]);
        assert_eq!(b, BBox::new(0.0, -16.0, 32.0, 48.0));
        let dets = decode(&[raw], &anchors, &[32], 0.0, (64, 64)).unwrap();
        assert_eq!(dets[0].len(), 4);
        assert_eq!(dets[0][0].bbox, BBox::new(0.0, 0.0, 32.0, 48.0));
        assert_eq!(dets[0][0].confidence, 0.25);
    }

    #[test]
    fn decode_rejects_mismatch() {
        let anchors = Anchors::default_for(320);
        let raw = Tensor::zeros(Shape::new(1, 75, 2, 2));
        assert!(decode(&[raw.clone()], &anchors, &[8], 0.0, (16, 16)).is_err());
        assert!(decode(&[raw.clone(), raw.clone(), raw], &anchors, &[8, 16, 32], 0.0, (16, 16)).is_ok());
    }

    #[test]
    fn panet_audit_and_shapes() {
        let cfg = PanetConfig::default();
        let p = PanetLite::new("neck", &[(8, 24), (16, 72), (32, 120)], &cfg).unwrap();
        let audit = p.audit();
        assert_eq!(audit.per_scale, vec![(8, 1, 1), (16, 1, 2), (32, 1, 1)]);
        assert_eq!(audit.cross_convs, 4);
        let mut store = WeightStore::new();
        p.init(&mut store, 1);
        let pyr = FeaturePyramid::from_tensors(vec![
            (8, init::randn(1, "a", Shape::new(1, 24, 8, 8))),
            (16, init::randn(1, "b", Shape::new(1, 72, 4, 4))),
            (32, init::randn(1, "c", Shape::new(1, 120, 2, 2))),
        ])
        .unwrap();
        let mut ctx = Ctx::infer(&store);
        let out = p.forward(&mut ctx, &pyr).unwrap();
        let shapes: Vec<Shape> = out.entries().iter().map(|(_, v)| v.shape()).collect();
        assert_eq!(
            shapes,
            vec![Shape::new(1, 64, 8, 8), Shape::new(1, 96, 4, 4), Shape::new(1, 128, 2, 2)]
        );
    }

    #[test]
    fn panet_rejects_wrong_scale_count() {
        let cfg = PanetConfig::default();
        assert!(PanetLite::new("neck", &[(8, 24), (16, 72)], &cfg).is_err());
    }
}
