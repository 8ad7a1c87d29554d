use gci_autodiff::{BatchNormMode, Graph, StftConfig, Tensor};
use proptest::prelude::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

#[test]
fn sum_of_squares_gradient_is_twice_input() {
    let mut g = Graph::new();
    let x = g.param(t(&[3, 4], &(0..12).map(|i| i as f64 * 0.37 - 2.0).collect::<Vec<_>>()));
    let s = g.square(x);
    let l = g.sum(s);
    g.backward(l).unwrap();
    let grad = g.grad(x).unwrap();
    for (gv, xv) in grad.data().iter().zip(g.value(x).data()) {
        assert_eq!(*gv, 2.0 * xv);
    }
}

#[test]
fn conv1d_difference_kernel_on_ramp() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 4], &[0.0, 1.0, 2.0, 3.0]));
    let w = g.constant(t(&[1, 1, 2], &[1.0, -1.0]));
    let y = g.conv1d(x, w, None, 1).unwrap();
    assert_eq!(g.value(y).data(), &[-1.0, -1.0, -1.0]);
}

#[test]
fn conv1d_identity_kernel() {
    let mut g = Graph::new();
    let data = [0.3, -1.0, 2.5, 4.0, 0.0];
    let x = g.constant(t(&[1, 1, 5], &data));
    let w = g.constant(t(&[1, 1, 1], &[1.0]));
    let y = g.conv1d(x, w, None, 3).unwrap();
    assert_eq!(g.value(y).data(), &data);
}

#[test]
fn conv1d_output_length_and_short_input() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 10]));
    let w = g.constant(Tensor::zeros(&[3, 2, 3]));
    let y = g.conv1d(x, w, None, 4).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 2]);
    let short = g.constant(Tensor::zeros(&[1, 2, 8]));
    assert!(g.conv1d(short, w, None, 4).is_err());
}

#[test]
fn avg_pool_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 4], &[1.0, 3.0, 5.0, 7.0]));
    let y = g.avg_pool(x, 2).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 6.0]);
    let c = g.constant(Tensor::full(&[1, 2, 6], 0.7));
    let y = g.avg_pool(c, 2).unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
}

#[test]
fn avg_pool_gradient_splits_evenly() {
    let mut g = Graph::new();
    let x = g.param(t(&[1, 1, 5], &[1.0, 2.0, 3.0, 4.0, 5.0]));
    let y = g.avg_pool(x, 2).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.5, 0.5, 0.5, 0.5, 0.0]);
}

#[test]
fn gated_unit_examples() {
    let mut g = Graph::new();
    let xf = g.constant(t(&[3], &[-1.0, 0.5, 2.0]));
    let zero = g.constant(Tensor::zeros(&[3]));
    let y = g.gated(xf, zero).unwrap();
    for (yv, xv) in g.value(y).data().iter().zip([-1.0f64, 0.5, 2.0]) {
        assert!((yv - 0.5 * xv.tanh()).abs() < 1e-15);
    }
    let y = g.gated(zero, xf).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_norm_frozen_is_per_element() {
    let mode = BatchNormMode::Frozen { mean: vec![0.5], var: vec![4.0], eps: 0.0 };
    let run = |data: &[f64]| {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 1, 2], data));
        let gamma = g.constant(t(&[1], &[2.0]));
        let beta = g.constant(t(&[1], &[1.0]));
        let (y, stats) = g.batch_norm(x, gamma, beta, &mode).unwrap();
        assert!(stats.is_none());
        g.value(y).data().to_vec()
    };
    let a = run(&[1.0, 2.0, 3.0, 4.0]);
    let b = run(&[1.0, 2.0, -30.0, 90.0]);
    assert_eq!(a[..2], b[..2]);
    assert_eq!(a[0], 2.0 * (1.0 - 0.5) / 2.0 + 1.0);
}

#[test]
fn batch_norm_train_on_standardised_batch_is_affine() {
    // zero mean, unit (biased) variance per channel
    let data = [1.0, -1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0];
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 1, 4], &data));
    let gamma = g.constant(t(&[1], &[1.5]));
    let beta = g.constant(t(&[1], &[-0.25]));
    let (y, stats) = g.batch_norm(x, gamma, beta, &BatchNormMode::Train { eps: 1e-12 }).unwrap();
    let stats = stats.unwrap();
    assert!(stats.mean[0].abs() < 1e-15 && (stats.var[0] - 1.0).abs() < 1e-15);
    for (yv, xv) in g.value(y).data().iter().zip(data) {
        assert!((yv - (1.5 * xv - 0.25)).abs() < 1e-6);
    }
}

#[test]
fn stop_gradient_blocks_upstream() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let sq = g.square(x);
    let s = g.stop_gradient(sq);
    assert_eq!(g.value(s).data(), &[1.0, 4.0]);
    let y = g.mul(s, x).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    // only the direct path: d(s * x)/dx with s held constant
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 4.0]);
}

#[test]
fn backward_accumulates_across_calls() {
    let build = |g: &mut Graph<f64>, scale: f64| {
        let x = g.param(t(&[3], &[0.2, -0.7, 1.3]));
        let y = g.tanh(x);
        let y = g.square(y);
        let l = g.sum(y);
        (x, g.scale(l, scale))
    };
    let mut g1 = Graph::new();
    let (x1, l1) = build(&mut g1, 1.0);
    g1.backward(l1).unwrap();
    g1.backward(l1).unwrap();
    let mut g2 = Graph::new();
    let (x2, l2) = build(&mut g2, 2.0);
    g2.backward(l2).unwrap();
    for (a, b) in g1.grad(x1).unwrap().data().iter().zip(g2.grad(x2).unwrap().data()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(&[2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn stft_of_silence_is_log_floor() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 64]));
    let s = g.stft_log_mag(x, StftConfig::half_overlap(16, 1e-5)).unwrap();
    assert_eq!(g.shape(s), &[1, 7, 9]);
    assert!(g.value(s).data().iter().all(|&v| v == 1e-5f64.ln()));
}

proptest! {
    #[test]
    fn slice_then_concat_is_identity(
        data in proptest::collection::vec(-10.0f64..10.0, 24),
        axis in 0usize..3,
        cut in 1usize..2,
    ) {
        let shape = [2, 3, 4];
        let mut g = Graph::new();
        let x = g.constant(t(&shape, &data));
        let cut = cut.min(shape[axis] - 1);
        let a = g.slice(x, axis, 0, cut).unwrap();
        let b = g.slice(x, axis, cut, shape[axis] - cut).unwrap();
        let c = g.concat(&[a, b], axis).unwrap();
        prop_assert_eq!(g.value(c), g.value(x));
    }

    #[test]
    fn upsample_preserves_knots(
        knots in proptest::collection::vec(-5.0f64..5.0, 2..12),
        factor in 1usize..9,
    ) {
        let n = knots.len();
        let mut g = Graph::new();
        let x = g.constant(t(&[n], &knots));
        let y = g.upsample_linear(x, factor, 0.0, (n - 1) * factor + 1).unwrap();
        for (i, &k) in knots.iter().enumerate() {
            prop_assert_eq!(g.value(y).data()[i * factor], k);
        }
    }
}
