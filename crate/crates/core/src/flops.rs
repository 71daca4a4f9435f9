//! Multiply-accumulate accounting.
//!
//! All costs are MACs: one multiply plus one add counts once. Elementwise
//! work (batchnorm, activations, adds, resizes) is not counted.

use serde::Serialize;

use crate::error::{Error, Result};

/// A convolution as seen by the cost model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConvLayer {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub groups: usize,
    pub stride: usize,
    /// `None` until the layer has been traced at a concrete input size.
    pub out_hw: Option<(usize, usize)>,
}

impl ConvLayer {
    pub fn macs(&self) -> Option<u64> {
        let (h, w) = self.out_hw?;
        Some((self.c_out * (self.c_in / self.groups) * self.k * self.k * h * w) as u64)
    }
}

pub fn flops_of(layers: &[ConvLayer]) -> Result<u64> {
    layers.iter().try_fold(0u64, |acc, l| {
        l.macs()
            .map(|m| acc + m)
            .ok_or_else(|| Error::invalid(format!("flops_of: layer `{}` has no shape", l.name)))
    })
}
