mod common;

use common::{rel_err, rng, uniform};
use l2caf_core::baselines::{cam, channel_weights, grad_cam, grad_cam_retrieval, GradTarget, Rectify};
use l2caf_core::network::presets;
use l2caf_core::{HeadKind, LayerSpec, NetworkModel, Tensor};

const FD_STEP: f64 = 1e-6;

/// Per-channel mean of central differences of `score(tail(A))` in `A`.
fn numeric_alpha(model: &NetworkModel, a: &Tensor, at: usize, score: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    let stop = model.raw_output_layer();
    let k = a.shape()[2];
    let cells = a.len() / k;
    let mut alpha = vec![0.0; k];
    let eval = |v: Vec<f64>| score(&model.forward_from(at, &Tensor::new(a.shape().to_vec(), v).unwrap(), stop).unwrap());
    for i in 0..a.len() {
        let mut p = a.data().to_vec();
        let mut m = a.data().to_vec();
        p[i] += FD_STEP;
        m[i] -= FD_STEP;
        alpha[i % k] += (eval(p) - eval(m)) / (2.0 * FD_STEP);
    }
    alpha.iter().map(|s| s / cells as f64).collect()
}

fn worst(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().zip(numeric).map(|(&a, &n)| rel_err(a, n)).fold(0.0, f64::max)
}

fn deep_tail_net(seed: u64) -> NetworkModel {
    let layers = vec![
        LayerSpec::conv(3, 4, 1, 1),
        LayerSpec::Relu,
        LayerSpec::conv(3, 5, 2, 1),
        LayerSpec::Relu,
        LayerSpec::conv(3, 6, 1, 1),
        LayerSpec::Relu,
        LayerSpec::Gap,
        LayerSpec::Dense { out_dim: 3 },
    ];
    NetworkModel::new(vec![8, 8, 2], None, layers, HeadKind::Logits(3), seed).unwrap()
}

#[test]
fn channel_weights_match_finite_differences() {
    for seed in 0..3 {
        let cls = presets::tiny_cls(4, seed).unwrap();
        let x = uniform(&[32, 32, 3], 0.0, 1.0, &mut rng(seed));
        let at = cls.feature_layer().unwrap();
        let c = seed as usize % 4;
        let (a, alpha) = channel_weights(&cls, &x, at, GradTarget::Class(c)).unwrap();
        let n = numeric_alpha(&cls, &a, at, |o| o.data()[c]);
        assert!(worst(&alpha, &n) < 1e-5, "cls seed {seed}");

        // Gradient flows back through two conv blocks.
        let deep = deep_tail_net(seed);
        let x = uniform(&[8, 8, 2], 0.0, 1.0, &mut rng(seed + 10));
        let (a, alpha) = channel_weights(&deep, &x, 1, GradTarget::Class(c % 3)).unwrap();
        let n = numeric_alpha(&deep, &a, 1, |o| o.data()[c % 3]);
        assert!(worst(&alpha, &n) < 1e-5, "deep seed {seed}");

        let ret = presets::tiny_ret(8, true, seed).unwrap();
        let x = uniform(&[32, 32, 3], 0.0, 1.0, &mut rng(seed + 20));
        let at = ret.feature_layer().unwrap();
        for (target, reduce) in [
            (GradTarget::EmbeddingSum, 1.0),
            (GradTarget::EmbeddingMean, 1.0 / 8.0),
        ] {
            let (a, alpha) = channel_weights(&ret, &x, at, target).unwrap();
            let n = numeric_alpha(&ret, &a, at, |o| o.sum() * reduce);
            assert!(worst(&alpha, &n) < 1e-5, "ret {target:?} seed {seed}");
        }
    }
}

#[test]
fn absolute_variant_dominates_rectified() {
    for seed in 0..4 {
        let ret = presets::tiny_ret(8, true, seed).unwrap();
        let x = uniform(&[32, 32, 3], 0.0, 1.0, &mut rng(seed + 30));
        let at = ret.feature_layer().unwrap();
        let relu = grad_cam_retrieval(&ret, &x, at, Rectify::Relu, GradTarget::EmbeddingSum).unwrap();
        let abs = grad_cam_retrieval(&ret, &x, at, Rectify::Abs, GradTarget::EmbeddingSum).unwrap();
        for (a, r) in abs.grid().data().iter().zip(relu.grid().data()) {
            assert!(a >= r);
            assert!(*r == 0.0 || r == a);
        }
    }
}

#[test]
fn grad_cam_equals_cam_on_gap_dense_heads() {
    for seed in 0..4 {
        let m = presets::tiny_cls(4, seed).unwrap();
        let x = uniform(&[32, 32, 3], 0.0, 1.0, &mut rng(seed + 40));
        let at = m.feature_layer().unwrap();
        for c in 0..4 {
            let g = grad_cam(&m, &x, at, c).unwrap();
            let k = cam(&m, &x, c).unwrap();
            let cells = g.grid().len() as f64;
            // Channel weights are the dense row divided by the pooled area.
            for (a, b) in g.grid().data().iter().zip(k.grid().data()) {
                assert!((a * cells - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
            }
            if !k.is_zero() {
                let hg = g.to_heatmap((32, 32)).unwrap();
                let hk = k.to_heatmap((32, 32)).unwrap();
                for (a, b) in hg.grid().data().iter().zip(hk.grid().data()) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }
}
