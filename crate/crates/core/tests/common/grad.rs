//! Central finite-difference checks in f64 for every tape op, the
//! composite blocks, the detection loss and a whole micro model.

use std::collections::BTreeMap;

use yoloret::autograd::{Tape, Var};
use yoloret::backbone::FeaturePyramid;
use yoloret::blocks::{Block, BlockSpec};
use yoloret::context::{is_buffer, Ctx, Mode};
use yoloret::eval::GroundTruth;
use yoloret::geometry::BBox;
use yoloret::head::{Anchors, PanetConfig, PanetLite};
use yoloret::kernels::{Activation, ConvGeom, ResizeDir};
use yoloret::model::YoloRet;
use yoloret::rfcr::{Rfcr, RfcrConfig};
use yoloret::train::{assign_anchors, detection_loss, LossWeights};
use yoloret::{Result, Shape, Tensor, WeightStore};

use super::*;

#[derive(Debug)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    /// Agreed only at a refined step.
    pub kinks: usize,
    pub failures: Vec<String>,
}

impl GradReport {
    fn new(name: &str) -> Self {
        GradReport {
            name: name.to_string(),
            checked: 0,
            kinks: 0,
            failures: Vec::new(),
        }
    }

    /// `numeric(i, step)` is the central difference at element `i`.
    fn compare(&mut self, what: &str, analytic: &[f64], indices: &[usize], mut numeric: impl FnMut(usize, f64) -> f64) {
        for &i in indices {
            self.checked += 1;
            let n = numeric(i, FD_STEP);
            if fd_close(analytic[i], n) {
                continue;
            }
            if FD_REFINE.iter().any(|&h| fd_close(analytic[i], numeric(i, h))) {
                self.kinks += 1;
            } else {
                self.failures.push(format!("{what}[{i}]: analytic {} numeric {n}", analytic[i]));
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.failures.is_empty()
    }
}

fn projections(shapes: &[Shape], seed: u64) -> Vec<Tensor<f64>> {
    let mut r = rng(seed);
    shapes.iter().map(|&s| uniform(&mut r, s, -1.0, 1.0)).collect()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn project(tape: &mut Tape<f64>, ys: &[Var<f64>], rs: &[Tensor<f64>]) -> Var<f64> {
    let mut total: Option<Var<f64>> = None;
    for (y, r) in ys.iter().zip(rs) {
        let p = tape.mul(y, &Var::constant(r.clone())).unwrap();
        let s = tape.sum(&p);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(&t, &s).unwrap(),
        });
    }
    total.unwrap()
}

/// `Σ r·op(inputs)` checked against central differences for every input
/// element.
pub fn check_op(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Tape<f64>, &[Var<f64>]) -> Var<f64>,
) -> GradReport {
    let mut rep = GradReport::new(name);
    let mut tape = Tape::recording();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let y = f(&mut tape, &vars);
    let rs = projections(&[y.shape()], 77);
    let loss = project(&mut tape, &[y], &rs);
    let grads = tape.backward(&loss).unwrap();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v).unwrap();
        let mut eval = |p: &Tensor<f64>| {
            let mut t = Tape::inference();
            let vs: Vec<Var<f64>> = inputs
                .iter()
                .enumerate()
                .map(|(j, x)| Var::constant(if j == i { p.clone() } else { x.clone() }))
                .collect();
            dot(f(&mut t, &vs).value(), &rs[0])
        };
        let all: Vec<usize> = (0..inputs[i].numel()).collect();
        rep.compare(&format!("input{i}"), analytic.data(), &all, |k, h| central(&inputs[i], k, h, &mut eval));
    }
    rep
}

type Net<'f> = dyn Fn(&mut Ctx<'_, f64>, &[Var<f64>]) -> Result<Vec<Var<f64>>> + 'f;

/// Projection loss of a parameterized network: input gradients on every
/// element, parameter gradients on up to `per_param` entries of every
/// trainable tensor in `store`.
pub fn check_net(
    name: &str,
    store: &WeightStore,
    mode: Mode,
    inputs: Vec<Tensor<f64>>,
    per_param: usize,
    f: &Net<'_>,
) -> GradReport {
    let mut rep = GradReport::new(name);
    let mut ctx = Ctx::new(store, Tape::recording(), mode);
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| ctx.tape.input(t.clone())).collect();
    let ys = f(&mut ctx, &vars).unwrap();
    let shapes: Vec<Shape> = ys.iter().map(Var::shape).collect();
    let rs = projections(&shapes, 78);
    let loss = project(&mut ctx.tape, &ys, &rs);
    let grads = ctx.tape.backward(&loss).unwrap();
    let eval = |s: &WeightStore, xs: &[Tensor<f64>]| -> f64 {
        let mut c = Ctx::new(s, Tape::inference(), mode);
        let vs: Vec<Var<f64>> = xs.iter().cloned().map(Var::constant).collect();
        let out = f(&mut c, &vs).unwrap();
        out.iter().zip(&rs).map(|(y, r)| dot(y.value(), r)).sum()
    };
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v).unwrap();
        let mut at = |p: &Tensor<f64>| {
            let mut xs = inputs.clone();
            xs[i] = p.clone();
            eval(store, &xs)
        };
        let all: Vec<usize> = (0..inputs[i].numel()).collect();
        rep.compare(&format!("input{i}"), analytic.data(), &all, |k, h| central(&inputs[i], k, h, &mut at));
    }
    let names: Vec<String> = store.names().filter(|n| !is_buffer(n)).map(str::to_string).collect();
    for n in names {
        let len = store.get(&n).unwrap().numel();
        let analytic = grads
            .param(&n)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; len]);
        let mut at = |s: &WeightStore| eval(s, &inputs);
        rep.compare(&n, &analytic, &sample_indices(len, per_param), |k, h| central_param(store, &n, k, h, &mut at));
    }
    rep
}

/// Running statistics away from the identity so the inference path is
/// exercised with a real affine map.
pub fn perturb_buffers(store: &mut WeightStore, seed: u64) {
    let mut r = rng(seed);
    let names: Vec<String> = store.names().filter(|n| is_buffer(n)).map(str::to_string).collect();
    for n in names {
        let len = store.get(&n).unwrap().numel();
        let (lo, hi) = if n.ends_with("running_var") { (0.5, 2.0) } else { (-0.3, 0.3) };
        store.insert(n, Tensor::vector(uniform::<f32>(&mut r, Shape::new(1, len, 1, 1), lo, hi).into_data()));
    }
}

fn vector(t: Tensor<f64>) -> Tensor<f64> {
    Tensor::vector(t.into_data())
}

pub fn op_cases() -> Vec<GradReport> {
    let mut r = rng(11);
    let mut u = |s: Shape, lo: f64, hi: f64| uniform::<f64>(&mut r, s, lo, hi);
    let x = u(Shape::new(2, 4, 5, 5), -1.0, 1.0);
    let mut out = Vec::new();
    let w = u(Shape::new(3, 4, 3, 3), -1.0, 1.0);
    let b = vector(u(Shape::new(1, 1, 1, 3), -1.0, 1.0));
    out.push(check_op("conv2d dense stride 2 pad 1 + bias", vec![x.clone(), w, b], |t, v| {
        t.conv2d(&v[0], &v[1], Some(&v[2]), ConvGeom::new(2, 1, 1)).unwrap()
    }));
    let wg = u(Shape::new(4, 2, 3, 3), -1.0, 1.0);
    out.push(check_op("conv2d grouped", vec![x.clone(), wg], |t, v| {
        t.conv2d(&v[0], &v[1], None, ConvGeom::new(1, 1, 2)).unwrap()
    }));
    let wd = u(Shape::new(4, 1, 5, 5), -1.0, 1.0);
    out.push(check_op("conv2d depthwise 5x5", vec![x.clone(), wd], |t, v| {
        t.conv2d(&v[0], &v[1], None, ConvGeom::same(5, 1, 4)).unwrap()
    }));
    let gamma = vector(u(Shape::new(1, 1, 1, 4), 0.5, 1.5));
    let beta = vector(u(Shape::new(1, 1, 1, 4), -0.5, 0.5));
    out.push(check_op("batchnorm infer", vec![x.clone(), gamma.clone(), beta.clone()], |t, v| {
        t.batchnorm_infer(&v[0], &v[1], &v[2], &[0.1, -0.2, 0.0, 0.3], &[1.5, 0.7, 1.0, 2.0], 1e-5)
            .unwrap()
    }));
    out.push(check_op("batchnorm train", vec![x.clone(), gamma, beta], |t, v| {
        t.batchnorm_train(&v[0], &v[1], &v[2], 1e-5).unwrap().0
    }));
    // keep clear of the relu6 kinks at 0 and 6 by more than the step
    let away = x.map(|v| if v.abs() < 0.01 { v + 0.05 } else { v } * 4.0);
    for act in [Activation::Relu6, Activation::Sigmoid, Activation::Swish] {
        let a = if act == Activation::Relu6 { away.map(|v| if (v - 6.0).abs() < 0.05 { v + 0.1 } else { v }) } else { x.clone() };
        out.push(check_op(&format!("activation {act:?}"), vec![a], move |t, v| t.activation(&v[0], act)));
    }
    let even = u(Shape::new(1, 3, 4, 6), -1.0, 1.0);
    out.push(check_op("resize up x2", vec![even.clone()], |t, v| t.resize(&v[0], 2, ResizeDir::Up).unwrap()));
    out.push(check_op("resize down x2", vec![even.clone()], |t, v| t.resize(&v[0], 2, ResizeDir::Down).unwrap()));
    let a = u(Shape::new(1, 3, 4, 6), -1.0, 1.0);
    let fw = vector(u(Shape::new(1, 1, 1, 2), 0.2, 1.5));
    out.push(check_op("weighted fusion", vec![even.clone(), a.clone(), fw], |t, v| {
        t.weighted_fusion(&v[..2], &v[2], 1e-4).unwrap()
    }));
    out.push(check_op("global avg pool", vec![even.clone()], |t, v| t.global_avg_pool(&v[0]).unwrap()));
    out.push(check_op("add", vec![even.clone(), a.clone()], |t, v| t.add(&v[0], &v[1]).unwrap()));
    out.push(check_op("mul", vec![even.clone(), a.clone()], |t, v| t.mul(&v[0], &v[1]).unwrap()));
    out.push(check_op("concat channels", vec![even.clone(), a], |t, v| t.concat_channels(v).unwrap()));
    let gate = u(Shape::new(1, 3, 1, 1), -1.0, 1.0);
    out.push(check_op("channel scale", vec![even.clone(), gate], |t, v| t.channel_scale(&v[0], &v[1]).unwrap()));
    out.push(check_op("sum", vec![even], |t, v| {
        let s = t.sum(&v[0]);
        let k = Var::constant(Tensor::scalar(1.0));
        t.mul(&s, &k).unwrap()
    }));
    out
}

fn block_case(name: &str, spec: BlockSpec, mode: Mode, batch: usize, hw: usize) -> GradReport {
    let blk = Block::new("blk", spec.clone()).unwrap();
    let mut store = WeightStore::new();
    blk.init(&mut store, 3);
    perturb_buffers(&mut store, 4);
    let mut r = rng(5);
    let x = uniform::<f64>(&mut r, Shape::new(batch, spec.c_in, hw, hw), -1.0, 1.0);
    check_net(name, &store, mode, vec![x], 12, &|ctx, v| Ok(vec![blk.forward(ctx, &v[0])?]))
}

pub fn block_cases() -> Vec<GradReport> {
    vec![
        block_case("MBConv residual (infer BN)", BlockSpec::mbconv(4, 4, 3, 3, 1), Mode::Infer, 1, 5),
        block_case("MBConv stride 2 (infer BN)", BlockSpec::mbconv(4, 6, 2, 3, 2), Mode::Infer, 1, 6),
        block_case("MBConv residual (batch BN)", BlockSpec::mbconv(4, 4, 2, 3, 1), Mode::Train, 2, 4),
        block_case("MBConvSE (infer BN)", BlockSpec::mbconvse(4, 4, 2, 3, 1).with_se_reduction(2), Mode::Infer, 1, 5),
        block_case("MBConvSE (batch BN)", BlockSpec::mbconvse(4, 6, 2, 3, 1).with_se_reduction(2), Mode::Train, 2, 4),
    ]
}

/// 4-scale pyramid at input side 32: strides 4..32.
fn pyramid_inputs(channels: &BTreeMap<usize, usize>, side: usize, seed: u64) -> Vec<Tensor<f64>> {
    let mut r = rng(seed);
    channels
        .iter()
        .map(|(&s, &c)| uniform(&mut r, Shape::new(1, c, side / s, side / s), -1.0, 1.0))
        .collect()
}

pub fn rfcr_case() -> GradReport {
    let channels: BTreeMap<usize, usize> = [(4, 3), (8, 4), (16, 5), (32, 6)].into_iter().collect();
    let cfg = RfcrConfig {
        fusion_channels: 4,
        ..RfcrConfig::default()
    };
    let m = Rfcr::new("rfcr", cfg, channels.clone()).unwrap();
    let mut store = WeightStore::new();
    m.init(&mut store, 8);
    perturb_buffers(&mut store, 9);
    let strides: Vec<usize> = channels.keys().copied().collect();
    let inputs = pyramid_inputs(&channels, 32, 10);
    check_net("RFCR", &store, Mode::Infer, inputs, 10, &|ctx, v| {
        let p = FeaturePyramid::new(strides.iter().copied().zip(v.iter().cloned()).collect())?;
        let out = m.forward(ctx, &p)?;
        Ok(out.entries().iter().map(|(_, y)| y.clone()).collect())
    })
}

pub fn panet_case() -> GradReport {
    let inputs_c = [(8usize, 3usize), (16, 4), (32, 5)];
    let cfg = PanetConfig {
        widths: vec![4, 4, 6],
        expansion: 2,
        kernel: 3,
        se_reduction: 2,
    };
    let m = PanetLite::new("neck", &inputs_c, &cfg).unwrap();
    let mut store = WeightStore::new();
    m.init(&mut store, 12);
    perturb_buffers(&mut store, 13);
    let channels: BTreeMap<usize, usize> = inputs_c.into_iter().collect();
    let inputs = pyramid_inputs(&channels, 32, 14);
    check_net("PANet-lite", &store, Mode::Infer, inputs, 6, &|ctx, v| {
        let p = FeaturePyramid::new([8, 16, 32].into_iter().zip(v.iter().cloned()).collect())?;
        let out = m.forward(ctx, &p)?;
        Ok(out.entries().iter().map(|(_, y)| y.clone()).collect())
    })
}

pub fn loss_case() -> GradReport {
    let mut rep = GradReport::new("detection_loss");
    let anchors = Anchors(vec![
        vec![yoloret::head::Anchor::new(6.0, 8.0), yoloret::head::Anchor::new(10.0, 9.0)],
        vec![yoloret::head::Anchor::new(14.0, 20.0), yoloret::head::Anchor::new(24.0, 18.0)],
    ]);
    let strides = [8usize, 16];
    let (h, w) = (32usize, 32usize);
    let gts = vec![
        vec![
            GroundTruth::new(BBox::new(3.0, 4.0, 11.0, 13.0), 1),
            GroundTruth::new(BBox::new(12.0, 6.0, 34.0 - 4.0, 25.0), 0),
        ],
        vec![GroundTruth::new(BBox::new(17.0, 18.0, 26.0, 26.0), 2)],
    ];
    let asg: Vec<_> = gts
        .iter()
        .map(|g| assign_anchors(g, &anchors, &strides, (h, w), 0.5).unwrap())
        .collect();
    let mut r = rng(21);
    let raw: Vec<Tensor<f64>> = strides
        .iter()
        .map(|&s| uniform(&mut r, Shape::new(2, 2 * 8, h / s, w / s), -1.0, 1.0))
        .collect();
    let weights = LossWeights {
        lambda_box: 1.3,
        lambda_obj: 0.7,
        lambda_cls: 0.9,
    };
    let total = |raws: &[Tensor<f64>]| {
        let refs: Vec<&Tensor<f64>> = raws.iter().collect();
        detection_loss(&refs, &asg, &gts, &anchors, &strides, weights).unwrap().0.total
    };
    let refs: Vec<&Tensor<f64>> = raw.iter().collect();
    let (_, grads) = detection_loss(&refs, &asg, &gts, &anchors, &strides, weights).unwrap();
    for i in 0..raw.len() {
        let mut at = |p: &Tensor<f64>| {
            let mut rs = raw.clone();
            rs[i] = p.clone();
            total(&rs)
        };
        let all: Vec<usize> = (0..raw[i].numel()).collect();
        rep.compare(&format!("scale{i}"), grads[i].data(), &all, |k, h| central(&raw[i], k, h, &mut at));
    }
    rep
}

/// Backbone, RFCR, neck and head together at 64×64 with a projection
/// loss; a sample of every parameter tensor is checked.
pub fn whole_model_case() -> GradReport {
    let mut cfg = micro_config();
    cfg.panet.widths = vec![8, 8, 8];
    cfg.rfcr.fusion_channels = 8;
    let m = YoloRet::new(cfg).unwrap();
    let mut store = m.init(5);
    perturb_buffers(&mut store, 6);
    let mut r = rng(7);
    let x = uniform::<f64>(&mut r, Shape::new(1, 3, 64, 64), 0.0, 1.0);
    // the image is held constant: input differences over 12k pixels would
    // dominate the runtime and the input path is covered block by block
    check_net("whole micro model", &store, Mode::Infer, vec![], 2, &|ctx, _| {
        m.forward(ctx, &Var::constant(x.clone()))
    })
}

pub fn all_cases() -> Vec<GradReport> {
    let mut v = op_cases();
    v.extend(block_cases());
    v.push(rfcr_case());
    v.push(panet_case());
    v.push(loss_case());
    v
}
