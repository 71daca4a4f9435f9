//! Forward-pass context shared by every block.

use std::collections::HashSet;
use std::sync::Arc;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::kernels::ConvGeom;
use crate::tensor::{Scalar, Tensor};
use crate::weights::WeightStore;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batchnorm uses running statistics.
    Infer,
    /// Batchnorm uses batch statistics and reports running-average updates.
    Train,
}

/// Running statistics produced by a training-mode batchnorm.
#[derive(Debug, Clone)]
pub struct BufferUpdate {
    pub name: String,
    pub value: Tensor,
}

/// Per-channel batch moments seen by one training-mode batchnorm.
#[derive(Debug, Clone)]
pub struct BnMoments {
    pub prefix: String,
    pub count: usize,
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
}

pub struct Ctx<'a, T: Scalar = f32> {
    pub tape: Tape<T>,
    store: &'a WeightStore,
    mode: Mode,
    frozen: HashSet<String>,
    updates: Vec<BufferUpdate>,
    moments: Vec<BnMoments>,
}

pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a WeightStore, tape: Tape<T>, mode: Mode) -> Self {
        Ctx {
            tape,
            store,
            mode,
            frozen: HashSet::new(),
            updates: Vec::new(),
            moments: Vec::new(),
        }
    }

    /// Inference: nothing recorded, running statistics.
    pub fn infer(store: &'a WeightStore) -> Self {
        Ctx::new(store, Tape::inference(), Mode::Infer)
    }

    /// Parameters in `frozen` are read as constants and get no gradient.
    pub fn with_frozen(mut self, frozen: HashSet<String>) -> Self {
        self.frozen = frozen;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &WeightStore {
        self.store
    }

    pub fn take_updates(&mut self) -> Vec<BufferUpdate> {
        std::mem::take(&mut self.updates)
    }

    pub fn take_moments(&mut self) -> Vec<BnMoments> {
        std::mem::take(&mut self.moments)
    }

    pub fn param(&mut self, name: &str) -> Result<Var<T>> {
        let t = T::lift(self.store.require(name)?);
        if self.tape.is_recording() && !self.frozen.contains(name) {
            Ok(self.tape.param(name, t))
        } else {
            Ok(Var::from_arc(t))
        }
    }

    fn buffer(&self, name: &str) -> Result<Arc<Tensor<T>>> {
        Ok(T::lift(self.store.require(name)?))
    }

    /// Convolution reading `{prefix}.weight` (and `{prefix}.bias` when `bias`).
    pub fn conv(&mut self, prefix: &str, x: &Var<T>, geom: ConvGeom, bias: bool) -> Result<Var<T>> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = if bias {
            Some(self.param(&format!("{prefix}.bias"))?)
        } else {
            None
        };
        self.tape.conv2d(x, &w, b.as_ref(), geom)
    }

    /// Batchnorm over `{prefix}.{gamma,beta,running_mean,running_var}`.
    pub fn batchnorm(&mut self, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let eps = T::lit(BN_EPS);
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        match self.mode {
            Mode::Infer => {
                let mean = self.buffer(&mean_name)?;
                let var = self.buffer(&var_name)?;
                self.tape
                    .batchnorm_infer(x, &gamma, &beta, mean.data(), var.data(), eps)
            }
            Mode::Train => {
                let (y, stats) = self.tape.batchnorm_train(x, &gamma, &beta, eps)?;
                let m = BN_MOMENTUM;
                let unbias = if stats.count > 1 {
                    stats.count as f32 / (stats.count - 1) as f32
                } else {
                    1.0
                };
                let old_mean = self.store.require(&mean_name)?;
                let old_var = self.store.require(&var_name)?;
                let new_mean = old_mean
                    .data()
                    .iter()
                    .zip(&stats.mean)
                    .map(|(&r, b)| (1.0 - m) * r + m * b.to_f32().unwrap_or(0.0))
                    .collect();
                let new_var = old_var
                    .data()
                    .iter()
                    .zip(&stats.var)
                    .map(|(&r, b)| (1.0 - m) * r + m * b.to_f32().unwrap_or(0.0) * unbias)
                    .collect();
                let f = |v: &[T]| v.iter().map(|e| e.to_f64().unwrap_or(0.0)).collect();
                self.moments.push(BnMoments {
                    prefix: prefix.to_string(),
                    count: stats.count,
                    mean: f(&stats.mean),
                    var: f(&stats.var),
                });
                self.updates.push(BufferUpdate {
                    name: mean_name,
                    value: Tensor::vector(new_mean),
                });
                self.updates.push(BufferUpdate {
                    name: var_name,
                    value: Tensor::vector(new_var),
                });
                Ok(y)
            }
        }
    }
}
