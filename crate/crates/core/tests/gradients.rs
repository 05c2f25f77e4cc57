//! Reverse-mode gradients against central differences on random graphs.

mod common;

use common::{gradient_error, off_grid_offsets, random_tensor};
use esol::cam::clip_features_graph;
use esol::deform::deform_conv2d;
use esol::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;

#[test]
fn conv_relu_gap_sigmoid_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..20 {
        // keep pre-activations away from the relu kink
        let x = random_tensor(&mut rng, &[2, 2, 5, 5], -1.0, 1.0);
        let w = random_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
        let b = random_tensor(&mut rng, &[3], -0.2, 0.2);
        let err = gradient_error(
            |g, v| {
                let h = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                let h = g.relu(h)?;
                let h = g.global_avg_pool(h)?;
                g.sigmoid(h)
            },
            &[x, w, b],
            &[true, true, true],
            case,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-3, "case {case}: {err}");
    }
}

#[test]
fn sigmoid_cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..20 {
        let logits = random_tensor(&mut rng, &[3, 4], -5.0, 5.0);
        let labels = Tensor::from_fn(&[3, 4], |i| (i % 2) as f64);
        let err = gradient_error(|g, v| g.sigmoid_ce(v[0], &labels), &[logits], &[true], case, STEP).unwrap();
        assert!(err < 1e-6, "case {case}: {err}");
    }
}

#[test]
fn clipping_passes_gradient_only_below_the_cap() {
    // the cap is a constant of the forward pass, so the gradient is an
    // indicator of the unclipped entries
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random_tensor(&mut rng, &[2, 3, 4, 4], 0.0, 1.0);
    let mut g = esol::Graph::<f64>::new();
    let v = g.param(x.clone()).unwrap();
    let y = clip_features_graph(&mut g, v, 0.4).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    let grad = g.grad(v).unwrap();
    for (sample, chunk) in x.data().chunks(48).enumerate() {
        let cap = 0.4 * chunk.iter().copied().fold(0.0, f64::max);
        for (i, &val) in chunk.iter().enumerate() {
            let expected = if val < cap { 1.0 } else { 0.0 };
            assert_eq!(grad.data()[sample * 48 + i], expected);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn deform_gradients_match_differences(
        seed in any::<u64>(),
        n in 1usize..=2,
        cin in 1usize..=2,
        cout in 1usize..=2,
        k in prop::sample::select(vec![1usize, 3]),
        h in 2usize..=4,
        w in 2usize..=4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [
            random_tensor(&mut rng, &[n, cin, h, w], -1.0, 1.0),
            off_grid_offsets(&mut rng, &[n, 2 * k * k, h, w], 0.05),
            random_tensor(&mut rng, &[cout, cin, k, k], -1.0, 1.0),
            random_tensor(&mut rng, &[cout], -1.0, 1.0),
        ];
        let err = gradient_error(
            |g, v| deform_conv2d(g, v[0], v[1], v[2], Some(v[3])),
            &inputs,
            &[true; 4],
            seed,
            STEP,
        ).unwrap();
        prop_assert!(err < 1e-6, "relative error {}", err);
    }

    #[test]
    fn strided_conv_gradients_match_differences(
        seed in any::<u64>(),
        stride in 1usize..=3,
        padding in 0usize..=2,
        h in 3usize..=6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [
            random_tensor(&mut rng, &[1, 2, h, h + 1], -1.0, 1.0),
            random_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0),
        ];
        let err = gradient_error(|g, v| g.conv2d(v[0], v[1], None, stride, padding), &inputs, &[true, true], seed, STEP).unwrap();
        prop_assert!(err < 1e-6, "relative error {}", err);
    }
}
