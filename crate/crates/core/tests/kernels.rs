mod common;

use proptest::prelude::*;
use yoloret::kernels::{activation, conv2d, resize, weighted_fusion, Activation, ConvGeom, ResizeDir};
use yoloret::{Shape, Tensor};

use common::*;

#[test]
fn kernels_match_loop_oracles_on_random_shapes() {
    let s = kernel_oracle_suite(2024, 120);
    assert!(s.cases >= 100, "{} cases", s.cases);
    assert!(s.worst <= 1e-5, "worst {} at {}", s.worst, s.worst_case);
}

#[test]
fn depthwise_stride_two_same_padding() {
    let mut r = rng(5);
    let x: Tensor<f64> = uniform(&mut r, Shape::new(1, 4, 9, 7), -2.0, 2.0);
    let w: Tensor<f64> = uniform(&mut r, Shape::new(4, 1, 5, 5), -1.0, 1.0);
    let g = ConvGeom::same(5, 2, 4);
    let got = conv2d(&x, &w, None, g).unwrap();
    assert_eq!(got.shape(), Shape::new(1, 4, 5, 4));
    let want = conv2d_oracle(&x, &w, None, g);
    assert!(got.max_abs_diff(&want) < 1e-12);
}

#[test]
fn fusion_is_scale_invariant_without_eps() {
    let mut r = rng(9);
    let a: Tensor<f64> = uniform(&mut r, Shape::new(1, 2, 3, 3), -1.0, 1.0);
    let b: Tensor<f64> = uniform(&mut r, Shape::new(1, 2, 3, 3), -1.0, 1.0);
    let base = weighted_fusion(&[&a, &b], &[0.3, 1.7], 0.0).unwrap();
    for k in [0.01, 3.0, 250.0] {
        let scaled = weighted_fusion(&[&a, &b], &[0.3 * k, 1.7 * k], 0.0).unwrap();
        assert!(base.max_abs_diff(&scaled) <= 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn finite_inputs_give_finite_outputs(seed in any::<u64>(), k in prop::sample::select(vec![1usize, 3, 5]),
                                         stride in 1usize..=2, c in 1usize..=4, hw in 5usize..=10, scale in 1e-3f64..1e3) {
        let mut r = rng(seed);
        let x: Tensor<f32> = uniform(&mut r, Shape::new(1, c, hw, hw), -scale, scale);
        let w: Tensor<f32> = uniform(&mut r, Shape::new(c, 1, k, k), -1.0, 1.0);
        let y = conv2d(&x, &w, None, ConvGeom::same(k, stride, c)).unwrap();
        prop_assert!(y.all_finite());
        for act in [Activation::Relu6, Activation::Sigmoid, Activation::Swish] {
            prop_assert!(activation(&y, act).all_finite());
        }
        prop_assert!(resize(&y, 2, ResizeDir::Up).unwrap().all_finite());
    }

    #[test]
    fn upsample_then_pool_is_identity(seed in any::<u64>(), f in prop::sample::select(vec![2usize, 4]), h in 1usize..5, w in 1usize..5) {
        let mut r = rng(seed);
        let x: Tensor<f64> = uniform(&mut r, Shape::new(1, 2, h, w), -1.0, 1.0);
        let back = resize(&resize(&x, f, ResizeDir::Up).unwrap(), f, ResizeDir::Down).unwrap();
        prop_assert!(back.max_abs_diff(&x) < 1e-12);
    }
}
