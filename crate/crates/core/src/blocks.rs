//! Pointwise unit, inverted-residual MBConv, squeeze-excite and MBConvSE.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::context::Ctx;
use crate::error::{Error, Result};
use crate::flops::ConvLayer;
use crate::init;
use crate::kernels::{conv_out_len, Activation, ConvGeom};
use crate::tensor::{Scalar, Shape};
use crate::weights::WeightStore;

pub type Hw = Option<(usize, usize)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Pointwise,
    Mbconv,
    Mbconvse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub c_in: usize,
    pub c_out: usize,
    pub expansion: usize,
    pub kernel: usize,
    pub stride: usize,
    pub se_reduction: usize,
}

pub const DEFAULT_SE_REDUCTION: usize = 4;

impl BlockSpec {
    pub fn pointwise(c_in: usize, c_out: usize) -> Self {
        BlockSpec {
            kind: BlockKind::Pointwise,
            c_in,
            c_out,
            expansion: 1,
            kernel: 1,
            stride: 1,
            se_reduction: DEFAULT_SE_REDUCTION,
        }
    }

    pub fn mbconv(c_in: usize, c_out: usize, expansion: usize, kernel: usize, stride: usize) -> Self {
        BlockSpec {
            kind: BlockKind::Mbconv,
            c_in,
            c_out,
            expansion,
            kernel,
            stride,
            se_reduction: DEFAULT_SE_REDUCTION,
        }
    }

    pub fn mbconvse(c_in: usize, c_out: usize, expansion: usize, kernel: usize, stride: usize) -> Self {
        BlockSpec {
            kind: BlockKind::Mbconvse,
            ..Self::mbconv(c_in, c_out, expansion, kernel, stride)
        }
    }

    pub fn with_se_reduction(mut self, r: usize) -> Self {
        self.se_reduction = r;
        self
    }

    pub fn has_residual(&self) -> bool {
        self.kind != BlockKind::Pointwise && self.stride == 1 && self.c_in == self.c_out
    }

    pub fn expanded(&self) -> usize {
        self.expansion * self.c_in
    }

    pub fn se_width(&self) -> usize {
        se_bottleneck(self.expanded(), self.se_reduction)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 {
            return Err(Error::invalid("block: channel counts must be positive"));
        }
        match self.kind {
            BlockKind::Pointwise => Ok(()),
            _ => {
                if !matches!(self.kernel, 1 | 3 | 5) {
                    return Err(Error::invalid(format!("block: kernel {} not in {{1,3,5}}", self.kernel)));
                }
                if !matches!(self.stride, 1 | 2) {
                    return Err(Error::invalid(format!("block: stride {} not in {{1,2}}", self.stride)));
                }
                if self.expansion == 0 {
                    return Err(Error::invalid("block: expansion must be positive"));
                }
                if self.kind == BlockKind::Mbconvse && self.se_reduction == 0 {
                    return Err(Error::invalid("block: SE reduction must be positive"));
                }
                Ok(())
            }
        }
    }

    /// Trainable parameters (conv weights, biases, BN scale and shift).
    pub fn param_count(&self) -> usize {
        let (ci, co, k) = (self.c_in, self.c_out, self.kernel);
        match self.kind {
            BlockKind::Pointwise => ci * co + 2 * co,
            _ => {
                let e = self.expanded();
                let expand = if self.expansion == 1 { 0 } else { ci * e + 2 * e };
                let dw = e * k * k + 2 * e;
                let project = e * co + 2 * co;
                let se = if self.kind == BlockKind::Mbconvse {
                    let m = self.se_width();
                    e * m + m + m * e + e
                } else {
                    0
                };
                expand + dw + project + se
            }
        }
    }
}

pub fn se_bottleneck(c: usize, r: usize) -> usize {
    c.div_ceil(r.max(1)).max(1)
}

fn out_hw(hw: Hw, k: usize, s: usize) -> Hw {
    let (h, w) = hw?;
    Some((conv_out_len(h, k, s, k / 2)?, conv_out_len(w, k, s, k / 2)?))
}

fn layer(name: String, c_in: usize, c_out: usize, k: usize, groups: usize, stride: usize, hw: Hw) -> ConvLayer {
    ConvLayer {
        name,
        c_in,
        c_out,
        k,
        groups,
        stride,
        out_hw: hw,
    }
}

/// Conv → BN, optionally followed by an activation, under one prefix.
pub(crate) fn conv_bn<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    prefix: &str,
    x: &Var<T>,
    geom: ConvGeom,
    act: Option<Activation>,
) -> Result<Var<T>> {
    let y = ctx.conv(&format!("{prefix}.conv"), x, geom, false)?;
    let y = ctx.batchnorm(&format!("{prefix}.bn"), &y)?;
    Ok(match act {
        Some(a) => ctx.tape.activation(&y, a),
        None => y,
    })
}

pub(crate) fn init_conv_bn(store: &mut WeightStore, seed: u64, prefix: &str, c_in_g: usize, c_out: usize, k: usize) {
    init::conv(store, seed, &format!("{prefix}.conv"), Shape::new(c_out, c_in_g, k, k), false);
    init::batchnorm(store, &format!("{prefix}.bn"), c_out);
}

/// Squeeze-and-excitation gate over `channels` channels.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    prefix: String,
    channels: usize,
    reduced: usize,
}

impl SqueezeExcite {
    pub fn new(prefix: impl Into<String>, channels: usize, reduction: usize) -> Self {
        SqueezeExcite {
            prefix: prefix.into(),
            channels,
            reduced: se_bottleneck(channels, reduction),
        }
    }

    pub fn reduced(&self) -> usize {
        self.reduced
    }

    pub fn init(&self, store: &mut WeightStore, seed: u64) {
        let p = &self.prefix;
        init::conv(store, seed, &format!("{p}.reduce"), Shape::new(self.reduced, self.channels, 1, 1), true);
        init::conv(store, seed, &format!("{p}.expand"), Shape::new(self.channels, self.reduced, 1, 1), true);
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        if x.shape().c() != self.channels {
            return Err(Error::shape("se_unit", "channels", self.channels, x.shape().c()));
        }
        let p = &self.prefix;
        let pooled = ctx.tape.global_avg_pool(x)?;
        let r = ctx.conv(&format!("{p}.reduce"), &pooled, ConvGeom::pointwise(), true)?;
        let r = ctx.tape.activation(&r, Activation::Swish);
        let e = ctx.conv(&format!("{p}.expand"), &r, ConvGeom::pointwise(), true)?;
        let gate = ctx.tape.activation(&e, Activation::Sigmoid);
        ctx.tape.channel_scale(x, &gate)
    }

    pub fn conv_layers(&self) -> Vec<ConvLayer> {
        let p = &self.prefix;
        vec![
            layer(format!("{p}.reduce"), self.channels, self.reduced, 1, 1, 1, Some((1, 1))),
            layer(format!("{p}.expand"), self.reduced, self.channels, 1, 1, 1, Some((1, 1))),
        ]
    }
}

/// A pointwise unit, MBConv or MBConvSE block with its parameter prefix.
#[derive(Debug, Clone)]
pub struct Block {
    prefix: String,
    spec: BlockSpec,
}

impl Block {
    pub fn new(prefix: impl Into<String>, spec: BlockSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Block {
            prefix: prefix.into(),
            spec,
        })
    }

    pub fn spec(&self) -> &BlockSpec {
        &self.spec
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn se(&self) -> Option<SqueezeExcite> {
        (self.spec.kind == BlockKind::Mbconvse).then(|| {
            SqueezeExcite::new(format!("{}.se", self.prefix), self.spec.expanded(), self.spec.se_reduction)
        })
    }

    pub fn init(&self, store: &mut WeightStore, seed: u64) {
        let p = &self.prefix;
        let s = &self.spec;
        match s.kind {
            BlockKind::Pointwise => init_conv_bn(store, seed, p, s.c_in, s.c_out, 1),
            _ => {
                let e = s.expanded();
                if s.expansion != 1 {
                    init_conv_bn(store, seed, &format!("{p}.expand"), s.c_in, e, 1);
                }
                init_conv_bn(store, seed, &format!("{p}.dw"), 1, e, s.kernel);
                if let Some(se) = self.se() {
                    se.init(store, seed);
                }
                init_conv_bn(store, seed, &format!("{p}.project"), e, s.c_out, 1);
            }
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let s = &self.spec;
        if x.shape().c() != s.c_in {
            return Err(Error::shape("block", "input channels", s.c_in, x.shape().c()));
        }
        let p = &self.prefix;
        match s.kind {
            BlockKind::Pointwise => conv_bn(ctx, p, x, ConvGeom::pointwise(), Some(Activation::Relu6)),
            _ => {
                let e = s.expanded();
                let h = if s.expansion != 1 {
                    conv_bn(ctx, &format!("{p}.expand"), x, ConvGeom::pointwise(), Some(Activation::Relu6))?
                } else {
                    x.clone()
                };
                let h = conv_bn(
                    ctx,
                    &format!("{p}.dw"),
                    &h,
                    ConvGeom::same(s.kernel, s.stride, e),
                    Some(Activation::Relu6),
                )?;
                let h = match self.se() {
                    Some(se) => se.forward(ctx, &h)?,
                    None => h,
                };
                let y = conv_bn(ctx, &format!("{p}.project"), &h, ConvGeom::pointwise(), None)?;
                if s.has_residual() {
                    ctx.tape.add(&y, x)
                } else {
                    Ok(y)
                }
            }
        }
    }

    /// Convolutions run on an input of spatial size `hw`, and the output size.
    pub fn conv_layers(&self, hw: Hw) -> (Vec<ConvLayer>, Hw) {
        let p = &self.prefix;
        let s = &self.spec;
        match s.kind {
            BlockKind::Pointwise => (vec![layer(format!("{p}.conv"), s.c_in, s.c_out, 1, 1, 1, hw)], hw),
            _ => {
                let e = s.expanded();
                let mut out = Vec::new();
                if s.expansion != 1 {
                    out.push(layer(format!("{p}.expand.conv"), s.c_in, e, 1, 1, 1, hw));
                }
                let ohw = out_hw(hw, s.kernel, s.stride);
                out.push(layer(format!("{p}.dw.conv"), e, e, s.kernel, e, s.stride, ohw));
                if let Some(se) = self.se() {
                    out.extend(se.conv_layers().into_iter().map(|mut l| {
                        if ohw.is_none() {
                            l.out_hw = None;
                        }
                        l
                    }));
                }
                out.push(layer(format!("{p}.project.conv"), e, s.c_out, 1, 1, 1, ohw));
                (out, ohw)
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }
}
