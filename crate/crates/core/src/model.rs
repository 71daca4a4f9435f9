//! The assembled detector: backbone → (RFCR) → PANet-lite → YOLO head.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::autograd::Var;
use crate::backbone::{Backbone, BackboneSpec, FeaturePyramid};
use crate::blocks::Hw;
use crate::config::ModelConfig;
use crate::context::{is_buffer, Ctx};
use crate::error::{Error, Result};
use crate::flops::{flops_of, ConvLayer};
use crate::geometry::{letterbox, nms, Detection};
use crate::head::{decode, Anchors, PanetLite, YoloHead};
use crate::rfcr::Rfcr;
use crate::tensor::{Scalar, Tensor};
use crate::weights::WeightStore;

pub const BACKBONE: &str = "backbone";
pub const RFCR: &str = "rfcr";
pub const NECK: &str = "neck";
pub const HEAD: &str = "head";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopsReport {
    pub unit: &'static str,
    pub resolution: usize,
    pub backbone: u64,
    pub rfcr: u64,
    pub neck: u64,
    pub head: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub backbone: usize,
    pub rfcr: usize,
    pub neck: usize,
    pub head: usize,
    pub total: usize,
    pub bytes_f32: usize,
}

#[derive(Debug, Clone)]
pub struct YoloRet {
    cfg: ModelConfig,
    backbone: Backbone,
    rfcr: Option<Rfcr>,
    neck: PanetLite,
    head: YoloHead,
    anchors: Anchors,
}

impl YoloRet {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let outputs = cfg.output_strides().to_vec();
        let mut taps: BTreeSet<usize> = outputs.iter().copied().collect();
        if cfg.rfcr.enabled {
            taps.extend(cfg.rfcr.input_strides.iter().copied());
        }
        let spec = BackboneSpec {
            width_multiplier: cfg.width_multiplier,
            truncate_last: cfg.truncate_last,
            tap_strides: taps.iter().copied().collect(),
            ..BackboneSpec::default()
        };
        let backbone = Backbone::new(BACKBONE, spec)?;
        let channels: BTreeMap<usize, usize> = taps
            .iter()
            .map(|&s| (s, backbone.tap_channels(s).expect("taps validated by backbone")))
            .collect();
        let rfcr = if cfg.rfcr.enabled {
            Some(Rfcr::new(RFCR, cfg.rfcr.clone(), channels.clone())?)
        } else {
            None
        };
        let neck_in: Vec<(usize, usize)> = outputs.iter().map(|&s| (s, channels[&s])).collect();
        let neck = PanetLite::new(NECK, &neck_in, &cfg.panet)?;
        let head_in: Vec<(usize, usize)> = outputs.iter().copied().zip(neck.widths().iter().copied()).collect();
        let anchors = cfg.anchors();
        let head = YoloHead::new(HEAD, &head_in, anchors.per_scale(), cfg.num_classes)?;
        Ok(YoloRet {
            cfg,
            backbone,
            rfcr,
            neck,
            head,
            anchors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn rfcr(&self) -> Option<&Rfcr> {
        self.rfcr.as_ref()
    }

    pub fn neck(&self) -> &PanetLite {
        &self.neck
    }

    pub fn head(&self) -> &YoloHead {
        &self.head
    }

    pub fn anchors(&self) -> &Anchors {
        &self.anchors
    }

    pub fn strides(&self) -> &[usize] {
        self.cfg.output_strides()
    }

    pub fn resolution(&self) -> usize {
        self.cfg.input_resolution
    }

    pub fn init(&self, seed: u64) -> WeightStore {
        let mut store = WeightStore::new();
        self.backbone.init(&mut store, seed);
        if let Some(r) = &self.rfcr {
            r.init(&mut store, seed);
        }
        self.neck.init(&mut store, seed);
        self.head.init(&mut store, seed);
        store
    }

    /// Every parameter the model reads must exist with the expected shape.
    pub fn check_store(&self, store: &WeightStore) -> Result<()> {
        for (name, t) in self.init(0).iter() {
            let got = store.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
            if got.shape() != t.shape() {
                return Err(Error::ParamShape {
                    name: name.to_string(),
                    expected: t.shape().to_string(),
                    got: got.shape().to_string(),
                });
            }
        }
        Ok(())
    }

    /// Enhanced multi-scale features entering the neck.
    pub fn features<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: &Var<T>) -> Result<FeaturePyramid<T>> {
        let raw = self.backbone.extract_pyramid(ctx, image)?;
        match &self.rfcr {
            Some(r) => r.forward(ctx, &raw),
            None => Ok(raw),
        }
    }

    /// Raw predictions per output scale, finest first.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: &Var<T>) -> Result<Vec<Var<T>>> {
        let feats = self.features(ctx, image)?;
        let agg = self.neck.forward(ctx, &feats)?;
        self.head.forward(ctx, &agg)
    }

    pub fn infer(&self, store: &WeightStore, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut ctx = Ctx::infer(store);
        let x = Var::constant(image.clone());
        Ok(self.forward(&mut ctx, &x)?.into_iter().map(Var::into_tensor).collect())
    }

    /// Decode and suppress predictions for an input already at model
    /// resolution. Boxes are in input pixels, one list per batch item.
    pub fn detect_prepared(&self, store: &WeightStore, input: &Tensor, conf: f32) -> Result<Vec<Vec<Detection>>> {
        let s = input.shape();
        let raw = self.infer(store, input)?;
        let dets = decode(&raw, &self.anchors, self.strides(), conf, (s.h(), s.w()))?;
        Ok(dets.iter().map(|d| nms(d, self.cfg.nms_iou)).collect())
    }

    /// Letterbox a single image of any size, detect and map boxes back to
    /// source pixels.
    pub fn detect(&self, store: &WeightStore, image: &Tensor, conf: f32) -> Result<Vec<Detection>> {
        if image.shape().n() != 1 {
            return Err(Error::shape("detect", "batch", 1, image.shape().n()));
        }
        let (input, lb) = letterbox(image, self.resolution())?;
        let dets = self.detect_prepared(store, &input, conf)?;
        Ok(dets[0].iter().map(|d| lb.inverse_detection(d)).collect())
    }

    pub fn conv_layers(&self, hw: Hw) -> Vec<ConvLayer> {
        let mut out = self.backbone.conv_layers(hw);
        if let Some(r) = &self.rfcr {
            out.extend(r.conv_layers(hw));
        }
        out.extend(self.neck.conv_layers(hw));
        out.extend(self.head.conv_layers(hw));
        out
    }

    pub fn flops(&self) -> Result<FlopsReport> {
        let r = self.resolution();
        let hw = Some((r, r));
        let backbone = flops_of(&self.backbone.conv_layers(hw))?;
        let rfcr = match &self.rfcr {
            Some(m) => flops_of(&m.conv_layers(hw))?,
            None => 0,
        };
        let neck = flops_of(&self.neck.conv_layers(hw))?;
        let head = flops_of(&self.head.conv_layers(hw))?;
        Ok(FlopsReport {
            unit: "MAC",
            resolution: r,
            backbone,
            rfcr,
            neck,
            head,
            total: backbone + rfcr + neck + head,
        })
    }

    pub fn params(&self) -> ParamReport {
        let store = self.init(0);
        let count = |prefix: &str| {
            store
                .iter()
                .filter(|(n, _)| !is_buffer(n) && n.starts_with(prefix) && n[prefix.len()..].starts_with('.'))
                .map(|(_, t)| t.numel())
                .sum::<usize>()
        };
        let (backbone, rfcr, neck, head) = (count(BACKBONE), count(RFCR), count(NECK), count(HEAD));
        let total = backbone + rfcr + neck + head;
        ParamReport {
            backbone,
            rfcr,
            neck,
            head,
            total,
            bytes_f32: 4 * total,
        }
    }
}
