//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] records every differentiable op applied to [`Var`]s while
//! `recording` is on. With recording off the same code runs as plain
//! inference and nothing is retained.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, Activation, BnBatchStats, ConvGeom, ResizeDir};
use crate::tensor::{Scalar, Shape, Tensor};

pub type NodeId = usize;

/// A tensor value, plus its tape node when it participates in a gradient.
#[derive(Debug, Clone)]
pub struct Var<T: Scalar = f32> {
    value: Arc<Tensor<T>>,
    node: Option<NodeId>,
}

impl<T: Scalar> Var<T> {
    pub fn constant(t: Tensor<T>) -> Self {
        Var {
            value: Arc::new(t),
            node: None,
        }
    }

    pub fn from_arc(t: Arc<Tensor<T>>) -> Self {
        Var { value: t, node: None }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn into_tensor(self) -> Tensor<T> {
        Arc::try_unwrap(self.value).unwrap_or_else(|a| (*a).clone())
    }
}

/// One recorded 1×1-or-larger convolution, kept for cost accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTrace {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvTrace {
    pub fn macs(&self) -> u64 {
        (self.c_out * (self.c_in / self.groups) * self.k * self.k * self.out_h * self.out_w) as u64
    }
}

enum Op<T: Scalar> {
    Leaf,
    Conv {
        geom: ConvGeom,
        has_bias: bool,
    },
    BatchNorm {
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Act(Activation),
    Resize(usize, ResizeDir),
    Fusion {
        eps: T,
    },
    GlobalAvgPool,
    Add,
    Mul,
    Concat,
    ChannelScale,
    Sum,
    /// Scalar output whose local gradients were computed in the forward pass.
    Custom(Vec<Tensor<T>>),
}

struct Node<T: Scalar> {
    op: Op<T>,
    inputs: Vec<Option<NodeId>>,
    saved: Vec<Arc<Tensor<T>>>,
    in_shapes: Vec<Shape>,
    shape: Shape,
}

/// The gradient ledger: recorded graph plus named parameter leaves.
pub struct Tape<T: Scalar = f32> {
    recording: bool,
    nodes: Vec<Node<T>>,
    params: Vec<(String, NodeId)>,
    trace: Option<Vec<ConvTrace>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape::inference()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn recording() -> Self {
        Tape {
            recording: true,
            nodes: Vec::new(),
            params: Vec::new(),
            trace: None,
        }
    }

    pub fn inference() -> Self {
        Tape {
            recording: false,
            nodes: Vec::new(),
            params: Vec::new(),
            trace: None,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Start keeping a list of the convolutions executed.
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn conv_trace(&self) -> &[ConvTrace] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input that is not a named parameter.
    pub fn input(&mut self, t: Tensor<T>) -> Var<T> {
        self.leaf(Arc::new(t))
    }

    /// A named trainable parameter. Gradients are reported under `name`.
    pub fn param(&mut self, name: &str, t: Arc<Tensor<T>>) -> Var<T> {
        let v = self.leaf(t);
        if let Some(id) = v.node {
            self.params.push((name.to_string(), id));
        }
        v
    }

    fn leaf(&mut self, t: Arc<Tensor<T>>) -> Var<T> {
        if !self.recording {
            return Var::from_arc(t);
        }
        let shape = t.shape();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            saved: Vec::new(),
            in_shapes: Vec::new(),
            shape,
        });
        Var {
            value: t,
            node: Some(self.nodes.len() - 1),
        }
    }

    fn push(&mut self, op: Op<T>, inputs: &[&Var<T>], saved: Vec<Arc<Tensor<T>>>, out: Tensor<T>) -> Var<T> {
        let ids: Vec<Option<NodeId>> = inputs.iter().map(|v| v.node).collect();
        if !self.recording || ids.iter().all(Option::is_none) {
            return Var::constant(out);
        }
        let shape = out.shape();
        let in_shapes = inputs.iter().map(|v| v.shape()).collect();
        self.nodes.push(Node {
            op,
            inputs: ids,
            saved,
            in_shapes,
            shape,
        });
        Var {
            value: Arc::new(out),
            node: Some(self.nodes.len() - 1),
        }
    }

    pub fn conv2d(&mut self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>, geom: ConvGeom) -> Result<Var<T>> {
        if let Some(b) = b {
            if b.value().numel() != w.shape().n() {
                return Err(Error::shape("conv2d", "bias length", w.shape().n(), b.value().numel()));
            }
        }
        let out = kernels::conv2d(x.value(), w.value(), b.map(|b| b.value().data()), geom)?;
        if let Some(trace) = self.trace.as_mut() {
            let s = out.shape();
            trace.push(ConvTrace {
                c_in: x.shape().c(),
                c_out: s.c(),
                k: w.shape().h(),
                groups: geom.groups,
                out_h: s.h(),
                out_w: s.w(),
            });
        }
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            inputs.push(b);
        }
        let saved = vec![x.value.clone(), w.value.clone()];
        Ok(self.push(
            Op::Conv {
                geom,
                has_bias: b.is_some(),
            },
            &inputs,
            saved,
            out,
        ))
    }

    /// Batchnorm with given normalization statistics (`mean`, `var`), the
    /// inference path. Gradients flow to the input, gamma and beta.
    pub fn batchnorm_infer(
        &mut self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var<T>> {
        let out = kernels::batchnorm_infer(x.value(), gamma.value().data(), beta.value().data(), mean, var, eps)?;
        let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        Ok(self.push(
            Op::BatchNorm {
                mean: mean.to_vec(),
                inv_std,
                batch_stats: false,
            },
            &[x, gamma, beta],
            vec![x.value.clone(), gamma.value.clone()],
            out,
        ))
    }

    /// Batchnorm normalized with batch statistics; returns them so the
    /// caller can update running averages.
    pub fn batchnorm_train(
        &mut self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        eps: T,
    ) -> Result<(Var<T>, BnBatchStats<T>)> {
        let (out, stats) = kernels::batchnorm_train(x.value(), gamma.value().data(), beta.value().data(), eps)?;
        let v = self.push(
            Op::BatchNorm {
                mean: stats.mean.clone(),
                inv_std: stats.inv_std.clone(),
                batch_stats: true,
            },
            &[x, gamma, beta],
            vec![x.value.clone(), gamma.value.clone()],
            out,
        );
        Ok((v, stats))
    }

    pub fn activation(&mut self, x: &Var<T>, kind: Activation) -> Var<T> {
        let out = kernels::activation(x.value(), kind);
        self.push(Op::Act(kind), &[x], vec![x.value.clone()], out)
    }

    pub fn resize(&mut self, x: &Var<T>, factor: usize, dir: ResizeDir) -> Result<Var<T>> {
        if factor == 1 {
            return Ok(x.clone());
        }
        let out = kernels::resize(x.value(), factor, dir)?;
        Ok(self.push(Op::Resize(factor, dir), &[x], Vec::new(), out))
    }

    /// `weights` is a vector var holding one raw weight per input.
    pub fn weighted_fusion(&mut self, inputs: &[Var<T>], weights: &Var<T>, eps: T) -> Result<Var<T>> {
        let refs: Vec<&Tensor<T>> = inputs.iter().map(Var::value).collect();
        let out = kernels::weighted_fusion(&refs, weights.value().data(), eps)?;
        let mut all: Vec<&Var<T>> = inputs.iter().collect();
        all.push(weights);
        let saved = all.iter().map(|v| v.value.clone()).collect();
        Ok(self.push(Op::Fusion { eps }, &all, saved, out))
    }

    pub fn global_avg_pool(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let out = kernels::global_avg_pool(x.value())?;
        Ok(self.push(Op::GlobalAvgPool, &[x], Vec::new(), out))
    }

    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = kernels::add(a.value(), b.value())?;
        Ok(self.push(Op::Add, &[a, b], Vec::new(), out))
    }

    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = kernels::mul(a.value(), b.value())?;
        Ok(self.push(Op::Mul, &[a, b], vec![a.value.clone(), b.value.clone()], out))
    }

    pub fn concat_channels(&mut self, inputs: &[Var<T>]) -> Result<Var<T>> {
        let refs: Vec<&Tensor<T>> = inputs.iter().map(Var::value).collect();
        let out = kernels::concat_channels(&refs)?;
        let all: Vec<&Var<T>> = inputs.iter().collect();
        Ok(self.push(Op::Concat, &all, Vec::new(), out))
    }

    pub fn channel_scale(&mut self, x: &Var<T>, gate: &Var<T>) -> Result<Var<T>> {
        let out = kernels::channel_scale(x.value(), gate.value())?;
        Ok(self.push(Op::ChannelScale, &[x, gate], vec![x.value.clone(), gate.value.clone()], out))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: &Var<T>) -> Var<T> {
        let out = Tensor::scalar(x.value().sum());
        self.push(Op::Sum, &[x], Vec::new(), out)
    }

    /// Attach a scalar computed outside the tape, with `local_grads[i]` the
    /// derivative of `value` with respect to `inputs[i]`.
    pub fn custom_scalar(&mut self, inputs: &[&Var<T>], value: T, local_grads: Vec<Tensor<T>>) -> Result<Var<T>> {
        if local_grads.len() != inputs.len() {
            return Err(Error::shape("custom_scalar", "gradient count", inputs.len(), local_grads.len()));
        }
        for (v, g) in inputs.iter().zip(&local_grads) {
            if v.shape() != g.shape() {
                return Err(Error::shape("custom_scalar", "gradient numel", v.value().numel(), g.numel()));
            }
        }
        Ok(self.push(Op::Custom(local_grads), inputs, Vec::new(), Tensor::scalar(value)))
    }

    /// Propagate from a scalar `loss` back to every recorded leaf.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if !loss.value().is_scalar() {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {}",
                loss.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if let Some(root) = loss.node {
            grads[root] = Some(Tensor::full(loss.shape(), T::one()));
            for id in (0..=root).rev() {
                let Some(g) = grads[id].take() else { continue };
                let node = &self.nodes[id];
                if matches!(node.op, Op::Leaf) {
                    grads[id] = Some(g);
                    continue;
                }
                let local = node_backward(node, &g);
                for (input, lg) in node.inputs.iter().zip(local) {
                    let (Some(src), Some(lg)) = (input, lg) else { continue };
                    match &mut grads[*src] {
                        Some(acc) => {
                            for (a, &b) in acc.data_mut().iter_mut().zip(lg.data()) {
                                *a += b;
                            }
                        }
                        slot => *slot = Some(lg),
                    }
                }
            }
        }
        let mut by_param = BTreeMap::new();
        for (name, id) in &self.params {
            let g = grads[*id]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[*id].shape));
            match by_param.get_mut(name) {
                None => {
                    by_param.insert(name.clone(), g);
                }
                Some(acc) => {
                    let acc: &mut Tensor<T> = acc;
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
        }
        let mut leaves = HashMap::new();
        for (id, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                leaves.insert(id, g);
            }
        }
        Ok(Gradients { by_param, leaves })
    }
}

/// Gradients of every input slot of `node` given its output gradient.
fn node_backward<T: Scalar>(node: &Node<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
    let want = |i: usize| node.inputs.get(i).copied().flatten().is_some();
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Conv { geom, has_bias } => {
            let x = &node.saved[0];
            let w = &node.saved[1];
            let gx = want(0).then(|| kernels::conv2d_grad_input(x.shape(), w, g, *geom));
            let gw = want(1).then(|| kernels::conv2d_grad_weight(x, w.shape(), g, *geom));
            let mut out = vec![gx, gw];
            if *has_bias {
                out.push(want(2).then(|| Tensor::vector(kernels::channel_sums(g))));
            }
            out
        }
        Op::BatchNorm {
            mean,
            inv_std,
            batch_stats,
        } => {
            let x = &node.saved[0];
            let gamma = node.saved[1].data();
            let (dx, dgamma, dbeta) = kernels::batchnorm_backward(x, gamma, mean, inv_std, g, *batch_stats);
            vec![
                want(0).then_some(dx),
                want(1).then(|| Tensor::vector(dgamma)),
                want(2).then(|| Tensor::vector(dbeta)),
            ]
        }
        Op::Act(kind) => vec![Some(kernels::activation_backward(&node.saved[0], g, *kind))],
        Op::Resize(f, dir) => vec![Some(kernels::resize_backward(g, *f, *dir))],
        Op::Fusion { eps } => {
            let k = node.saved.len() - 1;
            let refs: Vec<&Tensor<T>> = node.saved[..k].iter().map(|a| a.as_ref()).collect();
            let weights = node.saved[k].data();
            let (gin, gw) = kernels::weighted_fusion_backward(&refs, weights, *eps, g);
            let mut out: Vec<Option<Tensor<T>>> = gin.into_iter().enumerate().map(|(i, t)| want(i).then_some(t)).collect();
            out.push(want(k).then(|| Tensor::vector(gw)));
            out
        }
        Op::GlobalAvgPool => {
            vec![Some(kernels::global_avg_pool_backward(node.in_shapes[0], g))]
        }
        Op::Add => vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())],
        Op::Mul => {
            let (a, b) = (&node.saved[0], &node.saved[1]);
            vec![
                want(0).then(|| kernels::mul(g, b).expect("shape checked in forward")),
                want(1).then(|| kernels::mul(g, a).expect("shape checked in forward")),
            ]
        }
        Op::Concat => {
            kernels::concat_channels_backward(&node.in_shapes, g)
                .into_iter()
                .enumerate()
                .map(|(i, t)| want(i).then_some(t))
                .collect()
        }
        Op::ChannelScale => {
            let (gx, gg) = kernels::channel_scale_backward(&node.saved[0], &node.saved[1], g);
            vec![want(0).then_some(gx), want(1).then_some(gg)]
        }
        Op::Sum => {
            vec![Some(Tensor::full(node.in_shapes[0], g.item()))]
        }
        Op::Custom(local) => {
            let scale = g.item();
            local
                .iter()
                .enumerate()
                .map(|(i, t)| want(i).then(|| t.map(|v| v * scale)))
                .collect()
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar = f32> {
    by_param: BTreeMap<String, Tensor<T>>,
    leaves: HashMap<NodeId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.by_param
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.by_param
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_param.get(name)
    }

    /// Gradient of a leaf created with [`Tape::input`] or [`Tape::param`].
    pub fn wrt(&self, v: &Var<T>) -> Option<Tensor<T>> {
        let id = v.node?;
        Some(
            self.leaves
                .get(&id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(v.shape())),
        )
    }
}
