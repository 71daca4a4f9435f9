//! Structural oracles shared by the model, geometry and acceptance tests.

use rand::Rng;

use super::{micro_config, rng, uniform};
use yoloret::autograd::Var;
use yoloret::backbone::FeaturePyramid;
use yoloret::context::Ctx;
use yoloret::config::ModelConfig;
use yoloret::geometry::{iou, BBox, Detection};
use yoloret::head::{Anchor, Anchors};
use yoloret::model::YoloRet;
use yoloret::{Shape, Tensor, WeightStore};

/// Parameter count of the reference classification network with the
/// given number of trailing blocks removed, counted from the stage table
/// by hand: convs without bias, two affine scalars per BN channel.
pub fn mobilenet_params(drop_blocks: usize, with_classifier_conv: bool) -> usize {
    let mut blocks = Vec::new();
    let mut c_in = 32;
    for (t, c, n) in [(1, 16, 1), (6, 24, 2), (6, 32, 3), (6, 64, 4), (6, 96, 3), (6, 160, 3), (6, 320, 1)] {
        for _ in 0..n {
            let hid = c_in * t;
            let expand = if t == 1 { 0 } else { c_in * hid + 2 * hid };
            blocks.push(expand + 9 * hid + 2 * hid + hid * c + 2 * c);
            c_in = c;
        }
    }
    let stem = 27 * 32 + 64;
    let kept: usize = blocks[..blocks.len() - drop_blocks].iter().sum();
    stem + kept + if with_classifier_conv { 320 * 1280 + 2 * 1280 } else { 0 }
}

pub fn random_pyramid(seed: u64, m: &YoloRet, side: usize) -> FeaturePyramid {
    let mut r = rng(seed);
    let taps: Vec<(usize, Tensor)> = m
        .config()
        .rfcr
        .input_strides
        .iter()
        .map(|&s| (s, uniform(&mut r, Shape::new(1, m.backbone().tap_channels(s).unwrap(), side / s, side / s), -1.0, 1.0)))
        .collect();
    FeaturePyramid::from_tensors(taps).unwrap()
}

pub fn rfcr_out(m: &YoloRet, store: &WeightStore, p: &FeaturePyramid) -> Vec<Tensor> {
    let mut ctx = Ctx::infer(store);
    let out = m.rfcr().unwrap().forward(&mut ctx, p).unwrap();
    out.entries().iter().map(|(_, v)| v.value().clone()).collect()
}

pub fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b) as f64
}

pub fn with_outputs(strides: &[usize]) -> ModelConfig {
    let mut c = micro_config();
    c.rfcr.output_strides = strides.to_vec();
    let a = |w: f32| Anchor::new(w, w);
    c.anchors = Some(Anchors(strides.iter().map(|&s| vec![a(s as f32), a(1.5 * s as f32), a(2.0 * s as f32)]).collect()));
    c.panet.widths = strides.iter().map(|&s| 8 + s / 2).collect();
    c
}

pub fn random_dets(seed: u64, n: usize, classes: usize) -> Vec<Detection> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let x1 = r.random_range(0.0..300.0f32);
            let y1 = r.random_range(0.0..300.0f32);
            Detection {
                bbox: BBox::new(x1, y1, x1 + r.random_range(5.0..80.0f32), y1 + r.random_range(5.0..80.0f32)),
                class_id: r.random_range(0..classes),
                // coarse confidences so ties occur
                confidence: (r.random_range(0..50) as f32) / 50.0,
            }
        })
        .collect()
}

/// Full pairwise IoU table, then one sweep in priority order: a box survives
/// when no surviving box of its class ahead of it overlaps it at `t` or more.
pub fn nms_oracle(dets: &[Detection], t: f32) -> Vec<Detection> {
    let n = dets.len();
    let table: Vec<Vec<f32>> = (0..n).map(|i| (0..n).map(|j| iou(&dets[i].bbox, &dets[j].bbox)).collect()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap()
            .then(dets[a].class_id.cmp(&dets[b].class_id))
            .then(a.cmp(&b))
    });
    let mut alive = vec![false; n];
    for (rank, &i) in order.iter().enumerate() {
        alive[i] = order[..rank]
            .iter()
            .all(|&j| !(alive[j] && dets[j].class_id == dets[i].class_id && table[j][i] >= t));
    }
    order.into_iter().filter(|&i| alive[i]).map(|i| dets[i]).collect()
}

pub fn bitwise_same(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// `reach[k][o]`: max-abs change of RFCR output `o` when input scale `k`
/// alone is perturbed, default config at side 128.
pub fn rfcr_reach(seed: u64) -> Vec<Vec<f64>> {
    let m = YoloRet::new(ModelConfig::default()).unwrap();
    let store = m.init(seed);
    let base = random_pyramid(seed, &m, 128);
    let want = rfcr_out(&m, &store, &base);
    (0..m.config().rfcr.input_strides.len())
        .map(|k| {
            let mut entries: Vec<(usize, Tensor)> = base.entries().iter().map(|(s, v)| (*s, v.value().clone())).collect();
            let mut r = rng(100 + seed);
            let noise: Tensor = uniform(&mut r, entries[k].1.shape(), -0.5, 0.5);
            let bumped: Vec<f32> = entries[k].1.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
            entries[k].1 = Tensor::from_vec(noise.shape(), bumped).unwrap();
            let got = rfcr_out(&m, &store, &FeaturePyramid::from_tensors(entries).unwrap());
            got.iter().zip(&want).map(|(a, b)| max_diff(a, b)).collect()
        })
        .collect()
}

/// The RFCR fused map of a fixed image for a micro model whose head reads
/// `strides`; weights seeded identically.
pub fn fused_map(strides: &[usize]) -> Tensor {
    let mut r = rng(2);
    let image: Tensor = uniform(&mut r, Shape::new(1, 3, 64, 64), 0.0, 1.0);
    let m = YoloRet::new(with_outputs(strides)).unwrap();
    let store = m.init(17);
    let mut ctx = Ctx::infer(&store);
    let raw = m.backbone().extract_pyramid(&mut ctx, &Var::constant(image)).unwrap();
    m.rfcr().unwrap().fused(&mut ctx, &raw).unwrap().value().clone()
}
