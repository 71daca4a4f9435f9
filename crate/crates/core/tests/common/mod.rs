//! Shared oracles and helpers for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use yoloret::config::ModelConfig;
use yoloret::head::{Anchor, Anchors, PanetConfig};
use yoloret::kernels::ConvGeom;
use yoloret::{Scalar, Shape, Tensor, WeightStore};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Scalar>(r: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<T> {
    let data = (0..shape.numel()).map(|_| T::lit(r.random_range(lo..hi))).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Direct seven-loop cross-correlation in f64.
pub fn conv2d_oracle(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&[f64]>, g: ConvGeom) -> Tensor<f64> {
    let [n, _, h, wd] = x.shape().0;
    let [c_out, cin_g, kh, kw] = w.shape().0;
    let oh = (h + 2 * g.padding - kh) / g.stride + 1;
    let ow = (wd + 2 * g.padding - kw) / g.stride + 1;
    let cout_g = c_out / g.groups;
    let mut out = Tensor::zeros(Shape::new(n, c_out, oh, ow));
    for b in 0..n {
        for co in 0..c_out {
            let grp = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bias.map_or(0.0, |bv| bv[co]);
                    for ci in 0..cin_g {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += x.at(b, grp * cin_g + ci, iy as usize, ix as usize) * w.at(co, ci, ky, kx);
                            }
                        }
                    }
                    out.set(b, co, oy, ox, s);
                }
            }
        }
    }
    out
}

pub fn upsample_oracle(x: &Tensor<f64>, f: usize) -> Tensor<f64> {
    let [n, c, h, w] = x.shape().0;
    let mut out = Tensor::zeros(Shape::new(n, c, h * f, w * f));
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h * f {
                for xx in 0..w * f {
                    out.set(b, ch, y, xx, x.at(b, ch, y / f, xx / f));
                }
            }
        }
    }
    out
}

pub fn avgpool_oracle(x: &Tensor<f64>, f: usize) -> Tensor<f64> {
    let [n, c, h, w] = x.shape().0;
    let mut out = Tensor::zeros(Shape::new(n, c, h / f, w / f));
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h / f {
                for xx in 0..w / f {
                    let mut s = 0.0;
                    for dy in 0..f {
                        for dx in 0..f {
                            s += x.at(b, ch, y * f + dy, xx * f + dx);
                        }
                    }
                    out.set(b, ch, y, xx, s / (f * f) as f64);
                }
            }
        }
    }
    out
}

pub fn gap_oracle(x: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, w] = x.shape().0;
    let mut out = Tensor::zeros(Shape::new(n, c, 1, 1));
    for b in 0..n {
        for ch in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    s += x.at(b, ch, y, xx);
                }
            }
            out.set(b, ch, 0, 0, s / (h * w) as f64);
        }
    }
    out
}

/// `max|a - b| / max(max|b|, 1)`.
pub fn rel_err(a: &Tensor<f32>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let scale = b.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (&x, &y)| m.max((x as f64 - y).abs()));
    diff / scale
}

pub const FD_STEP: f64 = 1e-3;
pub const FD_REL: f64 = 1e-3;
pub const FD_ABS: f64 = 1e-5;

pub fn fd_close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= FD_ABS + FD_REL * analytic.abs().max(numeric.abs())
}

/// Steps tried, in order, when the standard step disagrees. An element
/// that agrees only at a smaller step had an activation kink inside the
/// standard interval.
pub const FD_REFINE: [f64; 4] = [1e-4, 1e-5, 1e-6, 1e-7];

/// Central difference of `f` at element `i` of `x`.
pub fn central(x: &Tensor<f64>, i: usize, step: f64, f: &mut impl FnMut(&Tensor<f64>) -> f64) -> f64 {
    let mut probe = x.clone();
    let v = x.data()[i];
    probe.data_mut()[i] = v + step;
    let up = f(&probe);
    probe.data_mut()[i] = v - step;
    let down = f(&probe);
    (up - down) / (2.0 * step)
}

/// Central differences of `f` at every element of `x`.
pub fn numeric_grad(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        g.data_mut()[i] = central(x, i, FD_STEP, &mut f);
    }
    g
}

/// Central difference over one float32 entry of a store. The stored value
/// moves by the float32 rounding of `±step`; the exact realized step is
/// used in the quotient.
pub fn central_param(store: &WeightStore, name: &str, i: usize, step: f64, f: &mut impl FnMut(&WeightStore) -> f64) -> f64 {
    let mut s = store.clone();
    let base = (**store.get(name).unwrap()).clone();
    let v = base.data()[i];
    let (up, down) = (v + step as f32, v - step as f32);
    let mut t = base.clone();
    t.data_mut()[i] = up;
    s.insert(name, t.clone());
    let fu = f(&s);
    t.data_mut()[i] = down;
    s.insert(name, t);
    let fd = f(&s);
    (fu - fd) / (up as f64 - down as f64)
}

/// Indices spread across a tensor of `len` elements.
pub fn sample_indices(len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    (0..count).map(|i| i * len / count + (i * 7919) % (len / count).max(1)).collect()
}

/// 64×64 micro detector used by the training and whole-model checks.
pub fn micro_config() -> ModelConfig {
    let mut c = ModelConfig::default();
    c.input_resolution = 64;
    c.width_multiplier = 0.35;
    c.num_classes = 3;
    c.rfcr.fusion_channels = 16;
    c.panet = PanetConfig {
        widths: vec![16, 24, 32],
        expansion: 2,
        kernel: 3,
        se_reduction: 4,
    };
    let a = |w: f32| Anchor::new(w, w);
    c.anchors = Some(Anchors(vec![
        vec![a(10.0), a(13.0), a(16.0)],
        vec![a(19.0), a(22.0), a(25.0)],
        vec![a(28.0), a(32.0), a(40.0)],
    ]));
    c
}

pub fn bitwise_eq(a: &WeightStore, b: &WeightStore, names: impl IntoIterator<Item = String>) -> bool {
    names.into_iter().all(|n| match (a.get(&n), b.get(&n)) {
        (Some(x), Some(y)) => {
            x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        }
        _ => false,
    })
}

pub fn max_abs(t: &Tensor<f64>) -> f64 {
    t.data().iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub type Grads = BTreeMap<String, Tensor<f64>>;

/// Worst relative error and number of cases for conv2d (dense, grouped and
/// depthwise), up/down resize and global pooling on random shapes.
pub struct KernelSuite {
    pub cases: usize,
    pub worst: f64,
    pub worst_case: String,
}

pub fn kernel_oracle_suite(seed: u64, conv_cases: usize) -> KernelSuite {
    use yoloret::kernels::{conv2d, global_avg_pool, resize, ResizeDir};
    let mut r = rng(seed);
    let mut suite = KernelSuite {
        cases: 0,
        worst: 0.0,
        worst_case: String::new(),
    };
    let record = |err: f64, what: String, suite: &mut KernelSuite| {
        suite.cases += 1;
        if err > suite.worst {
            suite.worst = err;
            suite.worst_case = what;
        }
    };
    for i in 0..conv_cases {
        let k = [1, 3, 5][r.random_range(0..3)];
        let stride = r.random_range(1..=2);
        let padding = r.random_range(0..=k / 2 + 1);
        let (groups, c_in, c_out) = match i % 3 {
            0 => (1, r.random_range(1..=6), r.random_range(1..=6)),
            1 => {
                let g = r.random_range(1..=3);
                (g, g * r.random_range(1..=3), g * r.random_range(1..=3))
            }
            _ => {
                let c = r.random_range(1..=8);
                (c, c, c)
            }
        };
        let h = r.random_range(k.max(1)..=k + 9);
        let w = r.random_range(k.max(1)..=k + 9);
        let n = r.random_range(1..=2);
        let x: Tensor<f64> = uniform(&mut r, Shape::new(n, c_in, h, w), -1.0, 1.0);
        let wt: Tensor<f64> = uniform(&mut r, Shape::new(c_out, c_in / groups, k, k), -1.0, 1.0);
        let bias: Option<Vec<f64>> = (i % 2 == 0).then(|| (0..c_out).map(|_| r.random_range(-1.0..1.0)).collect());
        let g = ConvGeom::new(stride, padding, groups);
        let got = conv2d(&x.cast::<f32>(), &wt.cast::<f32>(), bias.as_ref().map(|b| b.iter().map(|&v| v as f32).collect::<Vec<_>>()).as_deref(), g).unwrap();
        // oracle sees exactly the float32 inputs the kernel saw
        let want = conv2d_oracle(&x.cast::<f32>().cast(), &wt.cast::<f32>().cast(), bias.as_ref().map(|b| b.iter().map(|&v| v as f32 as f64).collect::<Vec<_>>()).as_deref(), g);
        record(rel_err(&got, &want), format!("conv {:?} x{} w{}", g, x.shape(), wt.shape()), &mut suite);
    }
    for i in 0..conv_cases / 2 {
        let f = [2, 4][i % 2];
        let shape = Shape::new(r.random_range(1..=2), r.random_range(1..=5), f * r.random_range(1..=5), f * r.random_range(1..=5));
        let x32: Tensor<f32> = uniform(&mut r, shape, -1.0, 1.0);
        let x = x32.cast::<f64>();
        let up = resize(&x32, f, ResizeDir::Up).unwrap();
        record(rel_err(&up, &upsample_oracle(&x, f)), format!("up{f} {shape}"), &mut suite);
        let down = resize(&x32, f, ResizeDir::Down).unwrap();
        record(rel_err(&down, &avgpool_oracle(&x, f)), format!("down{f} {shape}"), &mut suite);
        let gap = global_avg_pool(&x32).unwrap();
        record(rel_err(&gap, &gap_oracle(&x)), format!("gap {shape}"), &mut suite);
    }
    suite
}
pub mod checks;
pub mod grad;
