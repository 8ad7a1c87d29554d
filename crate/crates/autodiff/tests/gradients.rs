//! Central-difference checks for every differentiable operator.

use gci_autodiff::gradcheck::max_relative_error;
use gci_autodiff::{BatchNormMode, Graph, Result, StftConfig, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;
const INSTANCES: u64 = 10;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so kinks (abs, relu) are never straddled.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Contracts an arbitrary output with a fixed random tensor so every
/// output element contributes to the checked scalar.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = rand_tensor(&mut rng, g.shape(out));
    let r = g.constant(r);
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

fn check_instances(name: &str, mut build: impl FnMut(&mut ChaCha8Rng, u64) -> f64) {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 13);
        let err = build(&mut rng, seed);
        assert!(err < TOL, "{name}: instance {seed} relative error {err:e}");
    }
}

fn random_dims(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.random_range(1..4), rng.random_range(2..5)]
}

#[test]
fn elementwise_binary_ops() {
    for op in ["add", "sub", "mul"] {
        check_instances(op, |rng, seed| {
            let shape = random_dims(rng);
            let inputs = [rand_tensor(rng, &shape), rand_tensor(rng, &shape)];
            max_relative_error(
                &inputs,
                |g, v| {
                    let out = match op {
                        "add" => g.add(v[0], v[1])?,
                        "sub" => g.sub(v[0], v[1])?,
                        _ => g.mul(v[0], v[1])?,
                    };
                    project(g, out, seed)
                },
                H,
            )
            .unwrap()
        });
    }
}

#[test]
fn unary_ops() {
    for op in ["tanh", "sigmoid", "relu", "leaky_relu", "abs", "square", "scale", "add_scalar", "neg"] {
        check_instances(op, |rng, seed| {
            let shape = random_dims(rng);
            let inputs = [rand_away_from_zero(rng, &shape)];
            max_relative_error(
                &inputs,
                |g, v| {
                    let out = match op {
                        "tanh" => g.tanh(v[0]),
                        "sigmoid" => g.sigmoid(v[0]),
                        "relu" => g.relu(v[0]),
                        "leaky_relu" => g.leaky_relu(v[0], 0.2),
                        "abs" => g.abs(v[0]),
                        "square" => g.square(v[0]),
                        "scale" => g.scale(v[0], -1.7),
                        "neg" => g.neg(v[0]),
                        _ => g.add_scalar(v[0], 0.3),
                    };
                    project(g, out, seed)
                },
                H,
            )
            .unwrap()
        });
    }
}

#[test]
fn reductions() {
    for op in ["sum", "mean", "mae", "mse"] {
        check_instances(op, |rng, _| {
            let shape = random_dims(rng);
            let inputs = [rand_away_from_zero(rng, &shape), rand_tensor(rng, &shape)];
            max_relative_error(
                &inputs,
                |g, v| match op {
                    "sum" => {
                        let s = g.square(v[0]);
                        Ok(g.sum(s))
                    }
                    "mean" => {
                        let s = g.mul(v[0], v[1])?;
                        Ok(g.mean(s))
                    }
                    "mae" => {
                        // offset keeps the differences away from the abs kink
                        let shifted = g.add_scalar(v[1], 3.0);
                        g.mae(v[0], shifted)
                    }
                    _ => g.mse(v[0], v[1]),
                },
                H,
            )
            .unwrap()
        });
    }
}

#[test]
fn matmul() {
    check_instances("matmul", |rng, seed| {
        let (m, k, n) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..4));
        let inputs = [rand_tensor(rng, &[m, k]), rand_tensor(rng, &[k, n])];
        max_relative_error(
            &inputs,
            |g, v| {
                let out = g.matmul(v[0], v[1])?;
                project(g, out, seed)
            },
            H,
        )
        .unwrap()
    });
}

#[test]
fn slice_concat_pad_reshape() {
    check_instances("slice/concat/pad/reshape", |rng, seed| {
        let shape = [rng.random_range(1..3), rng.random_range(2..4), rng.random_range(3..6)];
        let axis = rng.random_range(0..3);
        let inputs = [rand_tensor(rng, &shape), rand_tensor(rng, &shape)];
        let start = rng.random_range(0..shape[axis]);
        let len = rng.random_range(1..=shape[axis] - start);
        max_relative_error(
            &inputs,
            |g, v| {
                let s = g.slice(v[0], axis, start, len)?;
                let c = g.concat(&[s, v[1]], axis)?;
                let p = g.pad(c, axis, 1, 2)?;
                let n = g.value(p).len();
                let r = g.reshape(p, &[n])?;
                project(g, r, seed)
            },
            H,
        )
        .unwrap()
    });
}

#[test]
fn conv1d_with_dilation_and_bias() {
    check_instances("conv1d", |rng, seed| {
        let (b, cin, cout) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let k = rng.random_range(1..4);
        let d = rng.random_range(1..4);
        let t = (k - 1) * d + 1 + rng.random_range(0..6);
        let inputs = [rand_tensor(rng, &[b, cin, t]), rand_tensor(rng, &[cout, cin, k]), rand_tensor(rng, &[cout])];
        max_relative_error(
            &inputs,
            |g, v| {
                let out = g.conv1d(v[0], v[1], Some(v[2]), d)?;
                project(g, out, seed)
            },
            H,
        )
        .unwrap()
    });
}

#[test]
fn avg_pool() {
    check_instances("avg_pool", |rng, seed| {
        let shape = [rng.random_range(1..3), rng.random_range(1..3), rng.random_range(2..9)];
        let inputs = [rand_tensor(rng, &shape)];
        max_relative_error(
            &inputs,
            |g, v| {
                let out = g.avg_pool(v[0], 2)?;
                project(g, out, seed)
            },
            H,
        )
        .unwrap()
    });
}

#[test]
fn upsample_linear() {
    check_instances("upsample_linear", |rng, seed| {
        let n = rng.random_range(2..6);
        let factor = rng.random_range(1..5);
        let offset = rng.random_range(-1.0..1.0);
        let out_len = (n - 1) * factor + rng.random_range(1..4);
        let inputs = [rand_tensor(rng, &[2, 1, n])];
        max_relative_error(
            &inputs,
            |g, v| {
                let out = g.upsample_linear(v[0], factor, offset, out_len)?;
                project(g, out, seed)
            },
            H,
        )
        .unwrap()
    });
}

#[test]
fn batch_norm_train_and_frozen() {
    for train in [true, false] {
        check_instances("batch_norm", |rng, seed| {
            let (b, c, t) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(2..6));
            let inputs = [rand_tensor(rng, &[b, c, t]), rand_tensor(rng, &[c]), rand_tensor(rng, &[c])];
            let mode = if train {
                BatchNormMode::Train { eps: 1e-5 }
            } else {
                BatchNormMode::Frozen {
                    mean: (0..c).map(|_| rng.random_range(-0.5..0.5)).collect(),
                    var: (0..c).map(|_| rng.random_range(0.5..2.0)).collect(),
                    eps: 1e-5,
                }
            };
            max_relative_error(
                &inputs,
                |g, v| {
                    let (out, _) = g.batch_norm(v[0], v[1], v[2], &mode)?;
                    project(g, out, seed)
                },
                H,
            )
            .unwrap()
        });
    }
}

#[test]
fn gated_unit() {
    check_instances("gated", |rng, seed| {
        let shape = random_dims(rng);
        let inputs = [rand_tensor(rng, &shape), rand_tensor(rng, &shape)];
        max_relative_error(
            &inputs,
            |g, v| {
                let out = g.gated(v[0], v[1])?;
                project(g, out, seed)
            },
            H,
        )
        .unwrap()
    });
}

#[test]
fn stft_log_mag() {
    check_instances("stft_log_mag", |rng, seed| {
        let win = rng.random_range(4..12);
        let cfg = StftConfig::half_overlap(win, 1e-5);
        let t = win + rng.random_range(0..12);
        let inputs = [rand_tensor(rng, &[2, t])];
        max_relative_error(
            &inputs,
            |g, v| {
                let out = g.stft_log_mag(v[0], cfg)?;
                project(g, out, seed)
            },
            H,
        )
        .unwrap()
    });
}

#[test]
fn multi_layer_composition() {
    check_instances("composition", |rng, seed| {
        let t = 24;
        let inputs = [rand_tensor(rng, &[2, 1, t]), rand_tensor(rng, &[3, 1, 3]), rand_tensor(rng, &[1, 3, 2])];
        max_relative_error(
            &inputs,
            |g, v| {
                let h = g.conv1d(v[0], v[1], None, 2)?;
                let h = g.tanh(h);
                let h = g.avg_pool(h, 2)?;
                let h = g.conv1d(h, v[2], None, 1)?;
                let h = g.upsample_linear(h, 4, 0.5, 20)?;
                let n = g.shape(h)[2];
                let h = g.reshape(h, &[2, n])?;
                let s = g.stft_log_mag(h, StftConfig::half_overlap(8, 1e-5))?;
                project(g, s, seed)
            },
            H,
        )
        .unwrap()
    });
}
