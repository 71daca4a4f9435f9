//! Raw feature collection and redistribution.
//!
//! Every raw backbone scale is projected to a common width, resampled to a
//! single fusion resolution, fused with a normalized weighted sum, refined by
//! one large-kernel MBConv and then projected back and added onto each output
//! scale. Every output scale therefore sees every input scale through a
//! single hop.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbone::FeaturePyramid;
use crate::blocks::{conv_bn, init_conv_bn, Block, BlockSpec};
use crate::context::Ctx;
use crate::error::{Error, Result};
use crate::flops::ConvLayer;
use crate::kernels::{ConvGeom, ResizeDir};
use crate::tensor::{Scalar, Shape, Tensor};
use crate::weights::WeightStore;

pub const FUSION_EPS: f32 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RfcrConfig {
    pub enabled: bool,
    pub input_strides: Vec<usize>,
    pub output_strides: Vec<usize>,
    pub fusion_stride: usize,
    pub fusion_channels: usize,
    pub expansion: usize,
    pub kernel: usize,
}

impl Default for RfcrConfig {
    fn default() -> Self {
        RfcrConfig {
            enabled: true,
            input_strides: vec![4, 8, 16, 32],
            output_strides: vec![8, 16, 32],
            fusion_stride: 8,
            fusion_channels: 32,
            expansion: 1,
            kernel: 5,
        }
    }
}

impl RfcrConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("rfcr: {m}")));
        if self.input_strides.is_empty() || self.output_strides.is_empty() {
            return bad("input and output stride lists must be non-empty".into());
        }
        for &s in self.input_strides.iter().chain(&self.output_strides) {
            if s == 0 || !s.is_power_of_two() {
                return bad(format!("stride {s} is not a power of two"));
            }
        }
        for list in [&self.input_strides, &self.output_strides] {
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return bad("strides must be strictly increasing".into());
            }
        }
        if !self.input_strides.contains(&self.fusion_stride) {
            return bad(format!("fusion stride {} is not an input stride", self.fusion_stride));
        }
        if self.fusion_channels == 0 {
            return bad("fusion_channels must be positive".into());
        }
        BlockSpec::mbconv(self.fusion_channels, self.fusion_channels, self.expansion, self.kernel, 1)
            .validate()
            .map_err(|e| Error::Config(format!("rfcr refine block: {e}")))
    }

    pub fn refine_spec(&self) -> BlockSpec {
        BlockSpec::mbconv(self.fusion_channels, self.fusion_channels, self.expansion, self.kernel, 1)
    }
}

/// Layer inventory of the module, for structural checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RfcrLayers {
    pub collect_convs: usize,
    pub weighted_sums: usize,
    pub mbconv_blocks: usize,
    pub redistribute_convs: usize,
    pub resizes: usize,
}

fn resample<T: Scalar>(ctx: &mut Ctx<'_, T>, x: &Var<T>, from: usize, to: usize) -> Result<Var<T>> {
    if from == to {
        Ok(x.clone())
    } else if from < to {
        ctx.tape.resize(x, to / from, ResizeDir::Down)
    } else {
        ctx.tape.resize(x, from / to, ResizeDir::Up)
    }
}

#[derive(Debug, Clone)]
pub struct Rfcr {
    prefix: String,
    cfg: RfcrConfig,
    /// Raw channel count per stride, covering inputs and outputs.
    channels: BTreeMap<usize, usize>,
    refine: Block,
}

impl Rfcr {
    pub fn new(prefix: impl Into<String>, cfg: RfcrConfig, channels: BTreeMap<usize, usize>) -> Result<Self> {
        cfg.validate()?;
        for s in cfg.input_strides.iter().chain(&cfg.output_strides) {
            if !channels.contains_key(s) {
                return Err(Error::invalid(format!("rfcr: no channel count for stride {s}")));
            }
        }
        let prefix = prefix.into();
        let refine = Block::new(format!("{prefix}.refine"), cfg.refine_spec())?;
        Ok(Rfcr {
            prefix,
            cfg,
            channels,
            refine,
        })
    }

    pub fn config(&self) -> &RfcrConfig {
        &self.cfg
    }

    fn collect_prefix(&self, s: usize) -> String {
        format!("{}.collect.s{s}", self.prefix)
    }

    fn redistribute_prefix(&self, s: usize) -> String {
        format!("{}.redistribute.s{s}", self.prefix)
    }

    fn fuse_name(&self) -> String {
        format!("{}.fuse.weight", self.prefix)
    }

    pub fn init(&self, store: &mut WeightStore, seed: u64) {
        let cf = self.cfg.fusion_channels;
        for &s in &self.cfg.input_strides {
            init_conv_bn(store, seed, &self.collect_prefix(s), self.channels[&s], cf, 1);
        }
        store.insert(self.fuse_name(), Tensor::vector(vec![1.0; self.cfg.input_strides.len()]));
        self.refine.init(store, seed);
        for &s in &self.cfg.output_strides {
            init_conv_bn(store, seed, &self.redistribute_prefix(s), cf, self.channels[&s], 1);
        }
    }

    pub fn collect<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, pyramid: &FeaturePyramid<T>) -> Result<Vec<Var<T>>> {
        self.cfg
            .input_strides
            .iter()
            .map(|&s| {
                let raw = pyramid.require(s)?;
                conv_bn(ctx, &self.collect_prefix(s), raw, ConvGeom::pointwise(), None)
            })
            .collect()
    }

    pub fn fuse<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, projected: &[Var<T>]) -> Result<Var<T>> {
        if projected.len() != self.cfg.input_strides.len() {
            return Err(Error::shape(
                "rfcr_fuse",
                "input count",
                self.cfg.input_strides.len(),
                projected.len(),
            ));
        }
        let f = self.cfg.fusion_stride;
        let mut resized = Vec::with_capacity(projected.len());
        for (x, &s) in projected.iter().zip(&self.cfg.input_strides) {
            if x.shape().c() != self.cfg.fusion_channels {
                return Err(Error::shape("rfcr_fuse", "channels", self.cfg.fusion_channels, x.shape().c()));
            }
            resized.push(resample(ctx, x, s, f)?);
        }
        let w = ctx.param(&self.fuse_name())?;
        ctx.tape.weighted_fusion(&resized, &w, T::lit(FUSION_EPS as f64))
    }

    pub fn refine<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, fused: &Var<T>) -> Result<Var<T>> {
        self.refine.forward(ctx, fused)
    }

    pub fn redistribute<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        refined: &Var<T>,
        pyramid: &FeaturePyramid<T>,
    ) -> Result<FeaturePyramid<T>> {
        let f = self.cfg.fusion_stride;
        let mut out = Vec::with_capacity(self.cfg.output_strides.len());
        for &s in &self.cfg.output_strides {
            let raw = pyramid.require(s)?;
            let r = resample(ctx, refined, f, s)?;
            let p = conv_bn(ctx, &self.redistribute_prefix(s), &r, ConvGeom::pointwise(), None)?;
            out.push((s, ctx.tape.add(raw, &p)?));
        }
        FeaturePyramid::new(out)
    }

    /// The fused map before refinement.
    pub fn fused<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, pyramid: &FeaturePyramid<T>) -> Result<Var<T>> {
        let projected = self.collect(ctx, pyramid)?;
        self.fuse(ctx, &projected)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, pyramid: &FeaturePyramid<T>) -> Result<FeaturePyramid<T>> {
        let fused = self.fused(ctx, pyramid)?;
        let refined = self.refine(ctx, &fused)?;
        self.redistribute(ctx, &refined, pyramid)
    }

    pub fn layers(&self) -> RfcrLayers {
        let f = self.cfg.fusion_stride;
        let resizes = self.cfg.input_strides.iter().filter(|&&s| s != f).count()
            + self.cfg.output_strides.iter().filter(|&&s| s != f).count();
        RfcrLayers {
            collect_convs: self.cfg.input_strides.len(),
            weighted_sums: 1,
            mbconv_blocks: 1,
            redistribute_convs: self.cfg.output_strides.len(),
            resizes,
        }
    }

    /// Convolutions for an input image of size `hw`.
    pub fn conv_layers(&self, hw: Option<(usize, usize)>) -> Vec<ConvLayer> {
        let at = |s: usize| hw.map(|(h, w)| (h / s, w / s));
        let cf = self.cfg.fusion_channels;
        let mut out = Vec::new();
        for &s in &self.cfg.input_strides {
            out.push(ConvLayer {
                name: format!("{}.conv", self.collect_prefix(s)),
                c_in: self.channels[&s],
                c_out: cf,
                k: 1,
                groups: 1,
                stride: 1,
                out_hw: at(s),
            });
        }
        out.extend(self.refine.conv_layers(at(self.cfg.fusion_stride)).0);
        for &s in &self.cfg.output_strides {
            out.push(ConvLayer {
                name: format!("{}.conv", self.redistribute_prefix(s)),
                c_in: cf,
                c_out: self.channels[&s],
                k: 1,
                groups: 1,
                stride: 1,
                out_hw: at(s),
            });
        }
        out
    }

    pub fn output_shape(&self, stride: usize, input: Shape) -> Shape {
        Shape::new(input.n(), self.channels[&stride], input.h() / stride, input.w() / stride)
    }
}
