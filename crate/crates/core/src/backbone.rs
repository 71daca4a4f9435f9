//! MobileNetV2-style feature extractor with width scaling, truncation of
//! trailing blocks and multi-scale taps.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::blocks::{conv_bn, init_conv_bn, Block, BlockSpec, Hw};
use crate::context::{is_buffer, Ctx};
use crate::error::{Error, Result};
use crate::flops::ConvLayer;
use crate::kernels::{conv_out_len, Activation, ConvGeom};
use crate::tensor::{Scalar, Tensor};
use crate::weights::WeightStore;

/// One `(t, c, n, s)` row of the stage table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub expansion: usize,
    pub channels: usize,
    pub repeats: usize,
    pub stride: usize,
}

pub const STEM_CHANNELS: usize = 32;
/// Width of the classifier-side 1×1 expansion that detection never builds.
pub const CLASSIFIER_CHANNELS: usize = 1280;

pub fn mobilenet_v2_stages() -> Vec<Stage> {
    [
        (1, 16, 1, 1),
        (6, 24, 2, 2),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ]
    .into_iter()
    .map(|(expansion, channels, repeats, stride)| Stage {
        expansion,
        channels,
        repeats,
        stride,
    })
    .collect()
}

/// Width-multiplied channel count rounded to a multiple of 8 (never below
/// 8, never more than 10% below the unrounded value).
pub fn scale_channels(c: usize, alpha: f32) -> usize {
    let v = alpha as f64 * c as f64;
    let mut scaled = (((v + 4.0) / 8.0).floor() as usize * 8).max(8);
    if (scaled as f64) < 0.9 * v {
        scaled += 8;
    }
    scaled
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub width_multiplier: f32,
    pub stages: Vec<Stage>,
    pub truncate_last: usize,
    pub tap_strides: Vec<usize>,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            width_multiplier: 1.0,
            stages: mobilenet_v2_stages(),
            truncate_last: 0,
            tap_strides: vec![4, 8, 16, 32],
        }
    }
}

impl BackboneSpec {
    pub fn with_width(alpha: f32) -> Self {
        BackboneSpec {
            width_multiplier: alpha,
            ..Default::default()
        }
    }

    pub fn total_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.repeats).sum()
    }
}

/// Features tagged with their stride, in increasing stride order.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<T: Scalar = f32> {
    entries: Vec<(usize, Var<T>)>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn new(mut entries: Vec<(usize, Var<T>)>) -> Result<Self> {
        entries.sort_by_key(|e| e.0);
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::invalid(format!("pyramid: duplicate stride {}", w[0].0)));
            }
        }
        Ok(FeaturePyramid { entries })
    }

    pub fn from_tensors(entries: Vec<(usize, Tensor<T>)>) -> Result<Self> {
        Self::new(entries.into_iter().map(|(s, t)| (s, Var::constant(t))).collect())
    }

    pub fn strides(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn get(&self, stride: usize) -> Option<&Var<T>> {
        self.entries.iter().find(|e| e.0 == stride).map(|e| &e.1)
    }

    pub fn require(&self, stride: usize) -> Result<&Var<T>> {
        self.get(stride)
            .ok_or_else(|| Error::invalid(format!("pyramid has no stride-{stride} feature")))
    }

    pub fn entries(&self) -> &[(usize, Var<T>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    prefix: String,
    spec: BackboneSpec,
    stem_channels: usize,
    /// Block plus the cumulative stride of its output.
    blocks: Vec<(Block, usize)>,
    /// Channels of the last block before any truncation.
    full_last_channels: usize,
}

impl Backbone {
    pub fn new(prefix: impl Into<String>, spec: BackboneSpec) -> Result<Self> {
        let alpha = spec.width_multiplier;
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::invalid(format!("backbone: width multiplier {alpha} must be > 0")));
        }
        let prefix = prefix.into();
        let stem_channels = scale_channels(STEM_CHANNELS, alpha);
        let mut blocks = Vec::new();
        let mut c_in = stem_channels;
        let mut stride = 2;
        for stage in &spec.stages {
            let c_out = scale_channels(stage.channels, alpha);
            for r in 0..stage.repeats {
                let s = if r == 0 { stage.stride } else { 1 };
                stride *= s;
                let idx = blocks.len();
                let block = Block::new(
                    format!("{prefix}.blocks.{idx}"),
                    BlockSpec::mbconv(c_in, c_out, stage.expansion, 3, s),
                )?;
                blocks.push((block, stride));
                c_in = c_out;
            }
        }
        let total = blocks.len();
        if spec.truncate_last >= total {
            return Err(Error::invalid(format!(
                "backbone: cannot truncate {} of {} blocks",
                spec.truncate_last, total
            )));
        }
        blocks.truncate(total - spec.truncate_last);
        let deepest = blocks.last().map(|b| b.1).unwrap_or(2);
        for &tap in &spec.tap_strides {
            if tap > deepest || !blocks.iter().any(|b| b.1 == tap) {
                return Err(Error::invalid(format!(
                    "backbone: truncating {} blocks leaves no stride-{tap} block",
                    spec.truncate_last
                )));
            }
        }
        Ok(Backbone {
            prefix,
            spec,
            stem_channels,
            blocks,
            full_last_channels: c_in,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn stem_channels(&self) -> usize {
        self.stem_channels
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.blocks.iter().map(|b| &b.0)
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Largest stride reached by the retained blocks.
    pub fn output_stride(&self) -> usize {
        self.blocks.last().map(|b| b.1).unwrap_or(2)
    }

    /// Channels of the tap at `stride` (deepest block at that stride).
    pub fn tap_channels(&self, stride: usize) -> Option<usize> {
        self.blocks
            .iter()
            .rev()
            .find(|b| b.1 == stride)
            .map(|b| b.0.spec().c_out)
    }

    /// Name prefix of block `i`, with trailing dot.
    pub fn block_prefix(&self, i: usize) -> String {
        format!("{}.blocks.{i}.", self.prefix)
    }

    fn stem_prefix(&self) -> String {
        format!("{}.stem", self.prefix)
    }

    /// The same network with `n` more trailing blocks removed.
    pub fn truncated(&self, n: usize) -> Result<Backbone> {
        let mut spec = self.spec.clone();
        spec.truncate_last += n;
        Backbone::new(self.prefix.clone(), spec)
    }

    pub fn init(&self, store: &mut WeightStore, seed: u64) {
        init_conv_bn(store, seed, &self.stem_prefix(), 3, self.stem_channels, 3);
        for (b, _) in &self.blocks {
            b.init(store, seed);
        }
    }

    /// Drop every parameter of this backbone's prefix that the retained
    /// blocks do not use.
    pub fn prune_store(&self, store: &mut WeightStore) {
        let keep_blocks = self.blocks.len();
        let block_root = format!("{}.blocks.", self.prefix);
        store.retain(|name| match name.strip_prefix(&block_root) {
            Some(rest) => rest
                .split('.')
                .next()
                .and_then(|i| i.parse::<usize>().ok())
                .is_some_and(|i| i < keep_blocks),
            None => true,
        });
    }

    /// Trainable parameter count of the built network (stem and retained blocks).
    pub fn param_count(&self) -> usize {
        let stem = self.stem_channels * 3 * 9 + 2 * self.stem_channels;
        stem + self.blocks.iter().map(|b| b.0.param_count()).sum::<usize>()
    }

    /// Parameters of the classifier-side 1×1 expansion (with its BN) that an
    /// untruncated classification network would append.
    pub fn classifier_expansion_params(&self) -> usize {
        let c_out = scale_channels(CLASSIFIER_CHANNELS, self.spec.width_multiplier.max(1.0));
        self.full_last_channels * c_out + 2 * c_out
    }

    pub fn forward_taps<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        image: &Var<T>,
        taps: &[usize],
    ) -> Result<FeaturePyramid<T>> {
        let s = image.shape();
        if s.c() != 3 {
            return Err(Error::shape("backbone", "input channels", 3, s.c()));
        }
        if s.h() % 32 != 0 {
            return Err(Error::shape("backbone", "input height (multiple of 32)", 32, s.h()));
        }
        if s.w() % 32 != 0 {
            return Err(Error::shape("backbone", "input width (multiple of 32)", 32, s.w()));
        }
        for &t in taps {
            if self.tap_channels(t).is_none() {
                return Err(Error::invalid(format!("backbone: no block at stride {t}")));
            }
        }
        let mut x = conv_bn(
            ctx,
            &self.stem_prefix(),
            image,
            ConvGeom::same(3, 2, 1),
            Some(Activation::Relu6),
        )?;
        let mut latest: BTreeMap<usize, Var<T>> = BTreeMap::new();
        let deepest_tap = taps.iter().copied().max().unwrap_or(0);
        for (i, (b, stride)) in self.blocks.iter().enumerate() {
            // Nothing past the last block of the deepest requested stride is needed.
            if *stride > deepest_tap && i > 0 {
                break;
            }
            x = b.forward(ctx, &x)?;
            if taps.contains(stride) {
                latest.insert(*stride, x.clone());
            }
        }
        FeaturePyramid::new(latest.into_iter().collect())
    }

    /// Pyramid at the configured tap strides.
    pub fn extract_pyramid<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: &Var<T>) -> Result<FeaturePyramid<T>> {
        let taps = self.spec.tap_strides.clone();
        self.forward_taps(ctx, image, &taps)
    }

    pub fn conv_layers(&self, hw: Hw) -> Vec<ConvLayer> {
        let stem_hw = hw.and_then(|(h, w)| Some((conv_out_len(h, 3, 2, 1)?, conv_out_len(w, 3, 2, 1)?)));
        let mut out = vec![ConvLayer {
            name: format!("{}.conv", self.stem_prefix()),
            c_in: 3,
            c_out: self.stem_channels,
            k: 3,
            groups: 1,
            stride: 2,
            out_hw: stem_hw,
        }];
        let mut cur = stem_hw;
        for (b, _) in &self.blocks {
            let (layers, next) = b.conv_layers(cur);
            out.extend(layers);
            cur = next;
        }
        out
    }

    /// Copy the stem and the first `k` blocks from `source`; the rest of this
    /// backbone is re-initialized from `seed`. Returns the names loaded,
    /// which are the ones eligible for freezing. The stem is loaded with the
    /// first block (any `k >= 1`).
    pub fn init_partial_transfer(
        &self,
        params: &mut WeightStore,
        source: &WeightStore,
        k: usize,
        seed: u64,
    ) -> Result<HashSet<String>> {
        if k > self.blocks.len() {
            return Err(Error::invalid(format!(
                "partial transfer: {k} blocks requested, backbone has {}",
                self.blocks.len()
            )));
        }
        let mut fresh = WeightStore::new();
        self.init(&mut fresh, seed);
        let loaded_prefixes: Vec<String> = (0..k)
            .map(|i| self.block_prefix(i))
            .chain((k > 0).then(|| format!("{}.", self.stem_prefix())))
            .collect();
        let mut loaded = HashSet::new();
        for (name, init) in fresh.iter() {
            if loaded_prefixes.iter().any(|p| name.starts_with(p)) {
                let src = source.require(name)?;
                if src.shape() != init.shape() {
                    return Err(Error::ParamShape {
                        name: name.to_string(),
                        expected: init.shape().to_string(),
                        got: src.shape().to_string(),
                    });
                }
                params.insert_arc(name, src.clone());
                if !is_buffer(name) {
                    loaded.insert(name.to_string());
                }
            } else {
                params.insert_arc(name, init.clone());
            }
        }
        Ok(loaded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_rule() {
        assert_eq!(scale_channels(32, 1.0), 32);
        assert_eq!(scale_channels(32, 0.75), 24);
        assert_eq!(scale_channels(24, 0.75), 24);
        assert_eq!(scale_channels(16, 0.35), 8);
        assert_eq!(scale_channels(320, 1.4), 448);
        assert_eq!(scale_channels(1, 0.1), 8);
    }

    #[test]
    fn reference_net_shape() {
        let b = Backbone::new("backbone", BackboneSpec::default()).unwrap();
        assert_eq!(b.block_count(), 17);
        assert_eq!(b.stem_channels(), 32);
        assert_eq!(b.tap_channels(32), Some(320));
        let taps: Vec<_> = [4, 8, 16, 32].iter().map(|&s| b.tap_channels(s).unwrap()).collect();
        assert_eq!(taps, [24, 32, 96, 320]);
    }

    #[test]
    fn truncation_limits() {
        let spec = |n| BackboneSpec {
            truncate_last: n,
            ..Default::default()
        };
        let t2 = Backbone::new("b", spec(2)).unwrap();
        assert_eq!(t2.tap_channels(32), Some(160));
        assert_eq!(t2.output_stride(), 32);
        assert!(Backbone::new("b", spec(3)).is_ok());
        assert!(Backbone::new("b", spec(4)).is_err());
        assert!(Backbone::new("b", spec(17)).is_err());
        assert!(Backbone::new("b", BackboneSpec::with_width(0.0)).is_err());
    }

    #[test]
    fn stored_params_match_closed_form() {
        let b = Backbone::new("backbone", BackboneSpec::with_width(0.75)).unwrap();
        let mut store = WeightStore::new();
        b.init(&mut store, 1);
        let enumerated: usize = store
            .iter()
            .filter(|(n, _)| !is_buffer(n))
            .map(|(_, t)| t.numel())
            .sum();
        assert_eq!(enumerated, b.param_count());
    }

    #[test]
    fn prune_keeps_only_retained_blocks() {
        let full = Backbone::new("backbone", BackboneSpec::default()).unwrap();
        let mut store = WeightStore::new();
        full.init(&mut store, 1);
        let t = full.truncated(2).unwrap();
        t.prune_store(&mut store);
        let mut expected = WeightStore::new();
        t.init(&mut expected, 1);
        assert_eq!(store, expected);
    }
}
