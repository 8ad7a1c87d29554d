//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 6 to 8 train networks for hours on one core. They run only when
//! `GCI_ACCEPTANCE_LONG=1`; otherwise they print SKIP. `GCI_ACCEPTANCE_ONLY`
//! takes a comma-separated list of criterion numbers.

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use gci_autodiff::gradcheck::{analytic_grads, max_relative_error, relative_error};
use gci_autodiff::{BatchNormMode, Graph, StftConfig, Tensor, Var};
use gci_core::corpus::{perturb_utterance, random_utterance_spec, synth_utterance, UtteranceRecord};
use gci_core::gci_eval::{associate, compute_metrics, flow_to_gci, evaluate_lists, VoicingMask};
use gci_core::lf_model::{lf_pulse_derivative, rd_from_quotients, rd_to_lf_coeffs};
use gci_core::losses::{
    a_spectral_loss, a_time_loss, as_time_loss, asa_time_loss, multi_res_spectral_mae, LossWeights, SpectralLossSpec,
};
use gci_core::models::{toy_configs, Analyzer, Synthesizer};
use gci_core::trainer::{
    evaluate_analyzer, joint_train, prepare, pretrain_analyzer, pretrain_synthesizer, CheckpointPolicy, TrainConfig,
};
use gci_core::GciError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-5;
const GRAD_H: f64 = 1e-5;
const INSTANCES: u64 = 10;
const SEEDS: [u64; 3] = [0, 1, 2];

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn minutes(d: Duration) -> f64 {
    d.as_secs_f64() / 60.0
}

// ---------------------------------------------------------------- 1

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Magnitudes in [0.1, 1) with random sign, clear of every kink.
fn rand_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(0.1..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    Tensor::new(shape, data).unwrap()
}

fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> gci_autodiff::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xacce);
    let r = rand_tensor(&mut rng, g.shape(out));
    let r = g.constant(r);
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

type Builder = fn(&mut ChaCha8Rng, u64) -> f64;

fn op_cases() -> Vec<(&'static str, Builder)> {
    fn unary(rng: &mut ChaCha8Rng, seed: u64, f: fn(&mut Graph<f64>, Var) -> Var) -> f64 {
        let shape = [rng.random_range(1..4), rng.random_range(2..6)];
        let x = [rand_off_zero(rng, &shape)];
        max_relative_error(&x, |g, v| { let o = f(g, v[0]); project(g, o, seed) }, GRAD_H).unwrap()
    }
    fn binary(rng: &mut ChaCha8Rng, seed: u64, f: fn(&mut Graph<f64>, Var, Var) -> gci_autodiff::Result<Var>) -> f64 {
        let shape = [rng.random_range(1..4), rng.random_range(2..6)];
        let x = [rand_tensor(rng, &shape), rand_tensor(rng, &shape)];
        max_relative_error(&x, |g, v| { let o = f(g, v[0], v[1])?; project(g, o, seed) }, GRAD_H).unwrap()
    }
    vec![
        ("add", |r, s| binary(r, s, |g, a, b| g.add(a, b))),
        ("sub", |r, s| binary(r, s, |g, a, b| g.sub(a, b))),
        ("mul", |r, s| binary(r, s, |g, a, b| g.mul(a, b))),
        ("gated", |r, s| binary(r, s, |g, a, b| g.gated(a, b))),
        ("scale", |r, s| unary(r, s, |g, a| g.scale(a, -1.3))),
        ("neg", |r, s| unary(r, s, |g, a| g.neg(a))),
        ("add_scalar", |r, s| unary(r, s, |g, a| g.add_scalar(a, 0.7))),
        ("tanh", |r, s| unary(r, s, |g, a| g.tanh(a))),
        ("sigmoid", |r, s| unary(r, s, |g, a| g.sigmoid(a))),
        ("relu", |r, s| unary(r, s, |g, a| g.relu(a))),
        ("leaky_relu", |r, s| unary(r, s, |g, a| g.leaky_relu(a, 0.2))),
        ("abs", |r, s| unary(r, s, |g, a| g.abs(a))),
        ("square", |r, s| unary(r, s, |g, a| g.square(a))),
        ("sum", |r, _| {
            let x = [rand_tensor(r, &[3, 4])];
            max_relative_error(&x, |g, v| { let q = g.square(v[0]); Ok(g.sum(q)) }, GRAD_H).unwrap()
        }),
        ("mean", |r, _| {
            let x = [rand_tensor(r, &[2, 5]), rand_tensor(r, &[2, 5])];
            max_relative_error(&x, |g, v| { let q = g.mul(v[0], v[1])?; Ok(g.mean(q)) }, GRAD_H).unwrap()
        }),
        ("mae", |r, _| {
            let x = [rand_tensor(r, &[2, 5]), rand_tensor(r, &[2, 5])];
            max_relative_error(&x, |g, v| { let b = g.add_scalar(v[1], 3.0); g.mae(v[0], b) }, GRAD_H).unwrap()
        }),
        ("mse", |r, _| {
            let x = [rand_tensor(r, &[2, 5]), rand_tensor(r, &[2, 5])];
            max_relative_error(&x, |g, v| g.mse(v[0], v[1]), GRAD_H).unwrap()
        }),
        ("matmul", |r, s| {
            let (m, k, n) = (r.random_range(1..4), r.random_range(1..5), r.random_range(1..4));
            let x = [rand_tensor(r, &[m, k]), rand_tensor(r, &[k, n])];
            max_relative_error(&x, |g, v| { let o = g.matmul(v[0], v[1])?; project(g, o, s) }, GRAD_H).unwrap()
        }),
        ("reshape/slice/concat/pad", |r, s| {
            let shape = [r.random_range(1..3), r.random_range(2..4), r.random_range(3..6)];
            let axis = r.random_range(0..3);
            let start = r.random_range(0..shape[axis]);
            let len = r.random_range(1..=shape[axis] - start);
            let x = [rand_tensor(r, &shape), rand_tensor(r, &shape)];
            max_relative_error(
                &x,
                |g, v| {
                    let a = g.slice(v[0], axis, start, len)?;
                    let c = g.concat(&[a, v[1]], axis)?;
                    let p = g.pad(c, axis, 2, 1)?;
                    let n = g.value(p).len();
                    let f = g.reshape(p, &[n])?;
                    project(g, f, s)
                },
                GRAD_H,
            )
            .unwrap()
        }),
        ("conv1d", |r, s| {
            let (b, ci, co, k, d) =
                (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
            let t = (k - 1) * d + 1 + r.random_range(0..6);
            let x = [rand_tensor(r, &[b, ci, t]), rand_tensor(r, &[co, ci, k]), rand_tensor(r, &[co])];
            max_relative_error(&x, |g, v| { let o = g.conv1d(v[0], v[1], Some(v[2]), d)?; project(g, o, s) }, GRAD_H)
                .unwrap()
        }),
        ("avg_pool", |r, s| {
            let shape = [r.random_range(1..3), 2, r.random_range(2..9)];
            let x = [rand_tensor(r, &shape)];
            max_relative_error(&x, |g, v| { let o = g.avg_pool(v[0], 2)?; project(g, o, s) }, GRAD_H).unwrap()
        }),
        ("upsample_linear", |r, s| {
            let n = r.random_range(2..6);
            let f = r.random_range(1..9);
            let out = (n - 1) * f + r.random_range(1..4);
            let x = [rand_tensor(r, &[2, 1, n])];
            max_relative_error(&x, |g, v| { let o = g.upsample_linear(v[0], f, 0.5, out)?; project(g, o, s) }, GRAD_H)
                .unwrap()
        }),
        ("batch_norm train", |r, s| {
            let (b, c, t) = (r.random_range(1..3), r.random_range(1..4), r.random_range(2..6));
            let x = [rand_tensor(r, &[b, c, t]), rand_tensor(r, &[c]), rand_tensor(r, &[c])];
            let mode = BatchNormMode::Train { eps: 1e-5 };
            max_relative_error(&x, |g, v| { let (o, _) = g.batch_norm(v[0], v[1], v[2], &mode)?; project(g, o, s) }, GRAD_H)
                .unwrap()
        }),
        ("batch_norm frozen", |r, s| {
            let (b, c, t) = (r.random_range(1..3), r.random_range(1..4), r.random_range(2..6));
            let x = [rand_tensor(r, &[b, c, t]), rand_tensor(r, &[c]), rand_tensor(r, &[c])];
            let mode = BatchNormMode::Frozen {
                mean: (0..c).map(|_| r.random_range(-0.5..0.5)).collect(),
                var: (0..c).map(|_| r.random_range(0.5..2.0)).collect(),
                eps: 1e-5,
            };
            max_relative_error(&x, |g, v| { let (o, _) = g.batch_norm(v[0], v[1], v[2], &mode)?; project(g, o, s) }, GRAD_H)
                .unwrap()
        }),
        ("stft_log_mag", |r, s| {
            let win = r.random_range(4..12);
            let cfg = StftConfig::half_overlap(win, 1e-5);
            let len = win + r.random_range(0..12);
            let x = [rand_tensor(r, &[2, len])];
            max_relative_error(&x, |g, v| { let o = g.stft_log_mag(v[0], cfg)?; project(g, o, s) }, GRAD_H).unwrap()
        }),
    ]
}

/// Central differences on `coords` entries of every input.
fn sampled_relative_error(
    inputs: &[Tensor<f64>],
    f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
    coords: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let wrapped = |g: &mut Graph<f64>, v: &[Var]| Ok::<_, gci_autodiff::AutodiffError>(f(g, v));
    let analytic = analytic_grads(inputs, &wrapped).unwrap();
    let eval = |inp: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inp.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut work = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        let idx: Vec<usize> = (0..coords.min(inputs[i].len())).map(|_| rng.random_range(0..inputs[i].len())).collect();
        let mut num = Vec::new();
        let mut ana = Vec::new();
        for &j in &idx {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + GRAD_H;
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - GRAD_H;
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            num.push((plus - minus) / (2.0 * GRAD_H));
            ana.push(analytic[i][j]);
        }
        worst = worst.max(relative_error(&ana, &num));
    }
    worst
}

/// Two signals whose point-wise differences stay clear of the MAE kink.
fn separated_pair(rng: &mut ChaCha8Rng, n: usize) -> [Tensor<f64>; 2] {
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(0.05..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    [Tensor::new(&[n], x).unwrap(), Tensor::new(&[n], y).unwrap()]
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst: Vec<(String, f64)> = Vec::new();
    for (name, build) in op_cases() {
        let mut e: f64 = 0.0;
        for i in 0..INSTANCES {
            let mut rng = ChaCha8Rng::seed_from_u64(i * 104_729 + 17);
            e = e.max(build(&mut rng, i));
        }
        worst.push((name.to_string(), e));
    }
    type LossFn = fn(&mut Graph<f64>, Var, Var) -> Var;
    let losses: [(&str, usize, usize, LossFn); 5] = [
        ("AS-spectral", 2600, 12, |g, a, b| multi_res_spectral_mae(g, a, b, &SpectralLossSpec::as_spectral()).unwrap()),
        ("AS-time", 300, 300, |g, a, b| as_time_loss(g, a, b).unwrap()),
        ("ASA-time", 300, 300, |g, a, b| asa_time_loss(g, a, b).unwrap()),
        ("A-spectral", 200, 200, |g, a, b| a_spectral_loss(g, a, b).unwrap()),
        ("A-time", 300, 300, |g, a, b| a_time_loss(g, a, b).unwrap()),
    ];
    for (name, len, coords, f) in losses {
        let mut e: f64 = 0.0;
        for i in 0..INSTANCES {
            let mut rng = ChaCha8Rng::seed_from_u64(i * 7_919 + 5);
            let inputs = separated_pair(&mut rng, len);
            e = e.max(sampled_relative_error(&inputs, &|g, v| f(g, v[0], v[1]), coords, &mut rng));
        }
        worst.push((name.to_string(), e));
    }
    let elapsed = start.elapsed();
    let (wn, we) = worst.iter().max_by(|a, b| a.1.total_cmp(&b.1)).cloned().unwrap();
    let ok = we < GRAD_TOL && elapsed < Duration::from_secs(60);
    verdict(
        ok,
        format!(
            "{} checks x {INSTANCES} instances, worst rel. error {we:.2e} ({wn}), {:.1} s",
            worst.len(),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 2

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn criterion_2() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let (ee, sr) = (1.0, 16_000u32);
    for rd in [0.5, 1.0, 2.0] {
        let c = rd_to_lf_coeffs(rd).unwrap();
        let mut worst_int: f64 = 0.0;
        let mut worst_shift: f64 = 0.0;
        for t0 in [0.0025, 0.005, 0.008, 0.0143] {
            // split at te where the derivative has a kink
            let area = simpson(|t| c.derivative(t), 0.0, c.te, 20_000) + simpson(|t| c.derivative(t), c.te, 1.0, 20_000);
            worst_int = worst_int.max((ee * t0 * area).abs() / (ee * t0));
            let p = lf_pulse_derivative(&c, t0, ee, sr).unwrap();
            let argmin = p.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 as f64;
            worst_shift = worst_shift.max((argmin - (c.te * t0 * sr as f64).round()).abs());
        }
        let rt = (rd_from_quotients(c.ra, c.rk, c.rg) - rd).abs();
        ok &= worst_int < 1e-4 && worst_shift <= 1.0 && rt < 1e-9;
        notes.push(format!("Rd {rd}: |int|/(Ee T0) {worst_int:.1e}, argmin off by {worst_shift} smp, round trip {rt:.0e}"));
    }
    verdict(ok, notes.join("; "))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut worst_idr: f64 = 100.0;
    let mut worst_ida: f64 = 0.0;
    for seed in 0..50 {
        let r = synth_utterance(&random_utterance_spec(10_000 + seed, 2.0).unwrap()).unwrap();
        let mask = VoicingMask { voiced: r.voiced.clone(), frame_hop: r.frame_hop };
        let det = flow_to_gci(r.pulse_target.as_ref().unwrap(), Some(&mask)).unwrap();
        let (_, rep) = evaluate_lists(&det, r.gci.as_ref().unwrap()).unwrap();
        worst_idr = worst_idr.min(rep.idr);
        worst_ida = worst_ida.max(rep.ida);
    }
    let elapsed = start.elapsed();
    verdict(
        worst_idr == 100.0 && worst_ida <= 0.25 && elapsed < Duration::from_secs(60),
        format!("50 utterances, worst IDR {worst_idr:.2}%, worst IDA {worst_ida:.3} ms, {:.1} s", elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let spec = SpectralLossSpec::as_spectral();
    let (mut max_spec, mut min_time) = (0.0f64, f64::INFINITY);
    for _ in 0..100 {
        let n = rng.random_range(2560..4000);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::new(&[n], x).unwrap());
        let b = g.constant(Tensor::new(&[n], neg).unwrap());
        let s = multi_res_spectral_mae(&mut g, a, b, &spec).unwrap();
        let t = as_time_loss(&mut g, a, b).unwrap();
        max_spec = max_spec.max(g.value(s).item().abs());
        min_time = min_time.min(g.value(t).item());
    }
    verdict(
        max_spec == 0.0 && min_time > 0.0,
        format!("100 signals, max AS-spectral(x,-x) {max_spec:.1e}, min AS-time(x,-x) {min_time:.3}"),
    )
}

// ---------------------------------------------------------------- 5

/// Independent scoring: every detection is tested against every cycle.
fn brute_force(det: &[f64], refs: &[f64]) -> (usize, usize, usize, Vec<f64>) {
    let n = refs.len();
    let cycle = |i: usize| -> (f64, f64) {
        let prev = if i > 0 { refs[i - 1] } else if n > 1 { 2.0 * refs[0] - refs[1] } else { f64::NEG_INFINITY };
        let next = if i + 1 < n { refs[i + 1] } else if n > 1 { 2.0 * refs[n - 1] - refs[n - 2] } else { f64::INFINITY };
        ((prev + refs[i]) / 2.0, (refs[i] + next) / 2.0)
    };
    let mut counts = vec![0usize; n];
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut outside = 0;
    for &d in det {
        let mut hit = false;
        for i in 0..n {
            let (lo, hi) = cycle(i);
            if d >= lo && d < hi {
                counts[i] += 1;
                members[i].push(d);
                hit = true;
                break;
            }
        }
        if !hit {
            outside += 1;
        }
    }
    let ident = counts.iter().filter(|&&c| c == 1).count();
    let missed = counts.iter().filter(|&&c| c == 0).count();
    let fa = outside + counts.iter().filter(|&&c| c > 1).sum::<usize>();
    let errs: Vec<f64> = (0..n).filter(|&i| counts[i] == 1).map(|i| (members[i][0] - refs[i]) * 1000.0).collect();
    (ident, missed, fa, errs)
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut mismatches = 0;
    let mut bound_violations = 0;
    for _ in 0..1000 {
        let n_ref = rng.random_range(0..=20);
        let mut t = 0.0;
        let refs: Vec<f64> = (0..n_ref).map(|_| { t += rng.random_range(0.002..0.012); t }).collect();
        let span = t + 0.01;
        let mut det: Vec<f64> = (0..rng.random_range(0..30)).map(|_| rng.random_range(-0.005..span)).collect();
        det.sort_by(f64::total_cmp);
        det.dedup();
        let m = associate(&det, &refs).unwrap();
        let rep = compute_metrics(&m);
        let (ident, missed, fa, errs) = brute_force(&det, &refs);
        let same_counts = m.identified.len() == ident && m.missed.len() == missed && m.false_alarms.len() == fa;
        let same_metrics = if n_ref > 0 {
            let n = n_ref as f64;
            let ida = if errs.is_empty() {
                0.0
            } else {
                let mu = errs.iter().sum::<f64>() / errs.len() as f64;
                (errs.iter().map(|e| (e - mu).powi(2)).sum::<f64>() / errs.len() as f64).sqrt()
            };
            let same = (rep.idr - 100.0 * ident as f64 / n).abs() < 1e-9
                && (rep.mr - 100.0 * missed as f64 / n).abs() < 1e-9
                && (rep.far - 100.0 * fa as f64 / n).abs() < 1e-9
                && (rep.ida - ida).abs() < 1e-9;
            if rep.idr + rep.mr > 100.0 + 1e-9 {
                bound_violations += 1;
            }
            same
        } else {
            !rep.defined
        };
        if !(same_counts && same_metrics) {
            mismatches += 1;
        }
    }
    verdict(
        mismatches == 0 && bound_violations == 0,
        format!("1000 configurations, {mismatches} disagreements, {bound_violations} with IDR + MR > 100"),
    )
}

// ---------------------------------------------------------------- 6-8

fn synthetic_set(base: u64, n: u64) -> Vec<UtteranceRecord> {
    (0..n).map(|i| synth_utterance(&random_utterance_spec(base + i, 2.0).unwrap()).unwrap()).collect()
}

fn pseudo_real_set(base: u64, n: u64) -> Vec<UtteranceRecord> {
    synthetic_set(base, n).iter().enumerate().map(|(i, r)| perturb_utterance(r, 5.0, 3.0, 0.5, base + i as u64).unwrap()).collect()
}

/// Per-seed toy corpus: synthetic train / valid / held-out test and
/// pseudo-real train / valid / test, all from disjoint generator seeds.
struct ToyCorpus {
    syn_train: Vec<UtteranceRecord>,
    syn_valid: Vec<UtteranceRecord>,
    syn_test: Vec<UtteranceRecord>,
    pr_train: Vec<UtteranceRecord>,
    pr_valid: Vec<UtteranceRecord>,
    pr_test: Vec<UtteranceRecord>,
}

fn toy_corpus(seed: u64) -> ToyCorpus {
    let b = 1_000_000 * (seed + 1);
    ToyCorpus {
        syn_train: synthetic_set(b, 20),
        syn_valid: synthetic_set(b + 100, 5),
        syn_test: synthetic_set(b + 200, 10),
        pr_train: pseudo_real_set(b + 300, 20),
        pr_valid: pseudo_real_set(b + 400, 5),
        pr_test: pseudo_real_set(b + 500, 10),
    }
}

fn quiet() -> impl FnMut(&gci_core::trainer::TrainLogEntry) {
    |_| {}
}

struct Step1 {
    analyzer: Analyzer<f32>,
    time: Duration,
}

/// Step-1 analyzers are shared between criteria 6 to 8.
#[derive(Default)]
struct Cache {
    corpora: HashMap<u64, ToyCorpus>,
    analyzers: HashMap<u64, Step1>,
}

impl Cache {
    fn corpus(&mut self, seed: u64) -> &ToyCorpus {
        self.corpora.entry(seed).or_insert_with(|| toy_corpus(seed))
    }

    fn analyzer(&mut self, seed: u64) -> &Step1 {
        if !self.analyzers.contains_key(&seed) {
            let c = self.corpus(seed);
            let (train, valid) = (prepare(&c.syn_train).unwrap(), prepare(&c.syn_valid).unwrap());
            let cfg = TrainConfig { seed, ..TrainConfig::toy() };
            let start = Instant::now();
            let a = Analyzer::new(toy_configs().0, seed).unwrap();
            let a = pretrain_analyzer(a, &train, &valid, &cfg, &CheckpointPolicy::default(), &mut quiet()).unwrap();
            self.analyzers.insert(seed, Step1 { analyzer: a, time: start.elapsed() });
        }
        &self.analyzers[&seed]
    }
}

fn criterion_6(cache: &mut Cache) -> Outcome {
    let (mut tr, mut ho, mut tm) = (Vec::new(), Vec::new(), Vec::new());
    for seed in SEEDS {
        let time = cache.analyzer(seed).time;
        let c = &cache.corpora[&seed];
        let a = &cache.analyzers[&seed].analyzer;
        let (_, train) = evaluate_analyzer(a, &c.syn_train).unwrap();
        let (_, held) = evaluate_analyzer(a, &c.syn_test).unwrap();
        eprintln!("  criterion 6 seed {seed}: train IDR {:.2}%, held-out IDR {:.2}%, {:.1} min", train.total.idr, held.total.idr, minutes(time));
        tr.push(train.total.idr);
        ho.push(held.total.idr);
        tm.push(minutes(time));
    }
    let (t, h, m) = (median(tr), median(ho), median(tm));
    verdict(
        t >= 98.0 && h >= 90.0 && m <= 30.0,
        format!("median train IDR {t:.2}% (>= 98), held-out IDR {h:.2}% (>= 90), {m:.1} CPU-min (<= 30)"),
    )
}

fn criterion_7(cache: &mut Cache) -> Outcome {
    let (mut gains, mut times, mut collapses) = (Vec::new(), Vec::new(), 0);
    for seed in SEEDS {
        let step1_time = cache.analyzer(seed).time;
        let c = &cache.corpora[&seed];
        let a1 = cache.analyzers[&seed].analyzer.clone();
        let cfg = TrainConfig { seed, ..TrainConfig::toy() };
        let start = Instant::now();
        let (syn_train, syn_valid) = (prepare(&c.syn_train).unwrap(), prepare(&c.syn_valid).unwrap());
        let s = Synthesizer::new(toy_configs().1, seed + 10).unwrap();
        let s = pretrain_synthesizer(s, &syn_train, &syn_valid, &cfg, &CheckpointPolicy::default(), &mut quiet()).unwrap();
        let (pr_train, pr_valid) = (prepare(&c.pr_train).unwrap(), prepare(&c.pr_valid).unwrap());
        let run = joint_train(a1.clone(), s, &pr_train, &pr_valid, &syn_train, &cfg, &CheckpointPolicy::default(), &mut quiet());
        let elapsed = minutes(step1_time + start.elapsed());
        times.push(elapsed);
        match run {
            Ok(out) => {
                let (_, before) = evaluate_analyzer(&a1, &c.pr_test).unwrap();
                let (_, after) = evaluate_analyzer(&out.analyzer, &c.pr_test).unwrap();
                let gain = after.total.idr - before.total.idr;
                eprintln!(
                    "  criterion 7 seed {seed}: Step-1 IDR {:.2}%, Step-2 IDR {:.2}%, gain {gain:+.2} pp, {elapsed:.1} min",
                    before.total.idr, after.total.idr
                );
                gains.push(gain);
            }
            Err(e) => {
                eprintln!("  criterion 7 seed {seed}: joint training failed: {e}");
                collapses += 1;
                gains.push(f64::NEG_INFINITY);
            }
        }
    }
    let (g, t) = (median(gains), median(times));
    verdict(
        g >= 1.0 && t <= 120.0 && collapses == 0,
        format!("median IDR gain {g:+.2} pp (>= +1), median {t:.1} CPU-min (<= 120), {collapses} aborted runs"),
    )
}

fn criterion_8(cache: &mut Cache) -> Outcome {
    // part 1: Anasynth-B completes
    let seed = SEEDS[0];
    cache.analyzer(seed);
    let c = &cache.corpora[&seed];
    let a1 = cache.analyzers[&seed].analyzer.clone();
    let (syn_train, syn_valid) = (prepare(&c.syn_train).unwrap(), prepare(&c.syn_valid).unwrap());
    let (pr_train, pr_valid) = (prepare(&c.pr_train).unwrap(), prepare(&c.pr_valid).unwrap());
    let mut cfg = TrainConfig { seed, ablate_a_spectral: true, ..TrainConfig::toy() };
    let s = Synthesizer::new(toy_configs().1, seed + 10).unwrap();
    let s = pretrain_synthesizer(s, &syn_train, &syn_valid, &cfg, &CheckpointPolicy::default(), &mut quiet()).unwrap();
    let ablated = joint_train(a1, s, &pr_train, &pr_valid, &syn_train, &cfg, &CheckpointPolicy::default(), &mut quiet());
    let ablation_ok = ablated.is_ok();
    eprintln!("  criterion 8 ablation run: {}", match &ablated { Ok(o) => format!("completed {} steps", o.steps), Err(e) => e.to_string() });

    // part 2: untrained synthesizer, regularisers off
    let mut fired = 0;
    for seed in SEEDS {
        cache.analyzer(seed);
        let c = &cache.corpora[&seed];
        let a1 = cache.analyzers[&seed].analyzer.clone();
        let (syn_train, pr_train) = (prepare(&c.syn_train).unwrap(), prepare(&c.pr_train).unwrap());
        let pr_valid = prepare(&c.pr_valid).unwrap();
        cfg = TrainConfig { seed, ablate_a_spectral: true, synthetic_update: false, ..TrainConfig::toy() };
        cfg.step2.epochs = 5000usize.div_ceil(cfg.step2.epoch_updates);
        let s = Synthesizer::new(toy_configs().1, seed + 10).unwrap();
        // the run is capped at 5000 joint steps, so any collapse is in budget
        let run = joint_train(a1, s, &pr_train, &pr_valid, &syn_train, &cfg, &CheckpointPolicy::default(), &mut quiet());
        let verdict = match run {
            Err(GciError::Collapse(msg)) => {
                fired += 1;
                format!("collapse guard fired: {msg}")
            }
            Err(e) => format!("other error: {e}"),
            Ok(o) => format!("no collapse in {} steps", o.steps),
        };
        eprintln!("  criterion 8 seed {seed}: {verdict}");
    }
    verdict(
        ablation_ok && fired >= 2,
        format!(
            "ablation run {}, collapse guard fired in {fired} of 3 seeds (>= 2)",
            if ablation_ok { "completed" } else { "failed" }
        ),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let c = TrainConfig::default();
    let (a, s, j) = (&c.step1_analyzer, &c.step1_synth, &c.step2);
    let w = LossWeights::default();
    let checks = [
        ("analyzer batch", a.batch as f64, 128.0),
        ("analyzer segment", a.segment_len as f64, 3553.0),
        ("analyzer epoch updates", a.epoch_updates as f64, 500.0),
        ("analyzer lr", a.lr, 2e-4),
        ("analyzer plateau factor", a.plateau_factor, 0.75),
        ("analyzer plateau patience", a.plateau_patience as f64, 10.0),
        ("synth batch", s.batch as f64, 8.0),
        ("synth segment", s.segment_len as f64, 2560.0),
        ("synth epoch updates", s.epoch_updates as f64, 512.0),
        ("synth lr", s.lr, 5e-5),
        ("synth min lr", s.min_lr, 1e-6),
        ("joint batch", j.batch as f64, 8.0),
        ("joint segment", j.segment_len as f64, 3553.0),
        ("joint lr", j.lr, 1e-5),
        ("w AS-spectral", w.as_spectral, 0.1),
        ("w AS-time", w.as_time, 10.0),
        ("w ASA-time", w.asa_time, 1.0),
        ("w A-spectral", w.a_spectral, 0.02),
        ("w A-time", w.a_time, 10.0),
    ];
    let wrong: Vec<String> =
        checks.iter().filter(|(_, got, want)| got != want).map(|(n, got, want)| format!("{n} {got} != {want}")).collect();
    let flags_ok = !c.ablate_a_spectral && c.synthetic_update;
    verdict(
        wrong.is_empty() && flags_ok,
        if wrong.is_empty() { format!("{} values and default flags match", checks.len()) } else { wrong.join(", ") },
    )
}

fn main() -> ExitCode {
    let long = std::env::var("GCI_ACCEPTANCE_LONG").is_ok_and(|v| v == "1");
    let only: Option<Vec<u32>> =
        std::env::var("GCI_ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    // libtest flags such as --nocapture are accepted and ignored
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();

    let mut cache = Cache::default();
    let names = [
        "autodiff gradient suite",
        "LF-model physics",
        "pipeline self-consistency",
        "loss phase split",
        "metrics oracle equivalence",
        "toy overfit",
        "Step 2 beats Step 1 on pseudo-real speech",
        "ablation and collapse",
        "hyperparameter audit",
    ];
    let mut failed = 0;
    for (i, name) in names.iter().enumerate() {
        let n = i as u32 + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) || (!filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()))) {
            continue;
        }
        let outcome = match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 | 7 | 8 if !long => Outcome::Skip("long training run; set GCI_ACCEPTANCE_LONG=1".into()),
            6 => criterion_6(&mut cache),
            7 => criterion_7(&mut cache),
            8 => criterion_8(&mut cache),
            _ => criterion_9(),
        };
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("criterion {n} [{tag}] {name}: {detail}");
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
