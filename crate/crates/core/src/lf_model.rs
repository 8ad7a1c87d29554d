//! Liljencrants-Fant glottal source with the one-parameter `Rd` shape
//! regression, and pulse-train rendering with exact GCI annotations.
//!
//! Pulses are evaluated in normalised time (period 1, excitation amplitude
//! 1). The open phase is `-exp(a (t - te)) sin(pi t / tp) / sin(pi te / tp)`
//! and the return phase `-(exp(-eps (t - te)) - exp(-eps (1 - te))) / (eps ta)`.
//! `eps` makes the two phases meet at `-1`; `a` makes the flow return to
//! its starting value at the end of the period.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::AudioBuffer;
use crate::error::{invalid, GciError, Result};

pub const RD_MIN: f64 = 0.3;
pub const RD_MAX: f64 = 2.7;

/// Flow values are reported in excitation-amplitude x milliseconds.
pub const FLOW_SCALE: f64 = 1000.0;

const SOLVER_MAX_ITER: usize = 50;
const SOLVER_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LfCoeffs {
    pub rd: f64,
    pub ra: f64,
    pub rk: f64,
    pub rg: f64,
    pub tp: f64,
    pub te: f64,
    pub ta: f64,
    pub epsilon: f64,
    pub alpha: f64,
}

/// Recovers `Rd` from the timing quotients; the inverse of the regression.
pub fn rd_from_quotients(ra: f64, rk: f64, rg: f64) -> f64 {
    (0.5 + 1.2 * rk) * (rk / (4.0 * rg) + ra) / 0.11
}

pub fn rd_to_lf_coeffs(rd: f64) -> Result<LfCoeffs> {
    if !(RD_MIN..=RD_MAX).contains(&rd) {
        return invalid(format!("Rd {rd} outside the supported range [{RD_MIN}, {RD_MAX}]"));
    }
    let ra = (-1.0 + 4.8 * rd) / 100.0;
    let rk = (22.4 + 11.8 * rd) / 100.0;
    let denom = 0.11 * rd - ra * (0.5 + 1.2 * rk);
    if denom <= 0.0 {
        return Err(GciError::DegenerateShape(format!("Rd {rd}: regression denominator {denom}")));
    }
    let rg = rk * (0.5 + 1.2 * rk) / (4.0 * denom);
    let tp = 1.0 / (2.0 * rg);
    let te = tp * (1.0 + rk);
    let ta = ra;
    if !(0.0 < tp && tp < te && te < 1.0 && ta > 0.0 && ta < 1.0 - te) {
        return Err(GciError::DegenerateShape(format!("Rd {rd}: tp {tp}, te {te}, ta {ta}")));
    }
    let epsilon = solve_epsilon(te, ta)?;
    let alpha = solve_alpha(tp, te, ta, epsilon)?;
    Ok(LfCoeffs { rd, ra, rk, rg, tp, te, ta, epsilon, alpha })
}

/// Newton iteration kept inside a sign-change bracket; steps that leave the
/// bracket are replaced by bisection.
fn safeguarded_newton(
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64) -> f64,
    mut lo: f64,
    mut hi: f64,
    x0: f64,
    what: &str,
) -> Result<f64> {
    let (flo, fhi) = (f(lo), f(hi));
    if flo.signum() == fhi.signum() {
        return Err(GciError::Solver(format!("{what}: root not bracketed in [{lo}, {hi}]")));
    }
    let rising = flo < 0.0;
    let mut x = x0.clamp(lo, hi);
    for _ in 0..SOLVER_MAX_ITER {
        let fx = f(x);
        if fx.abs() < SOLVER_TOL {
            return Ok(x);
        }
        if (fx < 0.0) == rising {
            lo = x;
        } else {
            hi = x;
        }
        let d = df(x);
        let newton = x - fx / d;
        x = if d != 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (hi - lo).abs() < SOLVER_TOL * x.abs().max(1.0) {
            return Ok(x);
        }
    }
    let fx = f(x);
    if fx.abs() < SOLVER_TOL * 10.0 {
        Ok(x)
    } else {
        Err(GciError::Solver(format!("{what}: no convergence after {SOLVER_MAX_ITER} iterations (residual {fx:e})")))
    }
}

fn solve_epsilon(te: f64, ta: f64) -> Result<f64> {
    let tc = 1.0 - te;
    let f = |e: f64| e * ta - 1.0 + (-e * tc).exp();
    let df = |e: f64| ta - tc * (-e * tc).exp();
    // f < 0 just above zero because ta < 1 - te; f(2/ta) > 0
    safeguarded_newton(f, df, 1e-9, 2.0 / ta, 1.0 / ta, "epsilon")
}

/// Integral of the return phase over `[te, 1]` (unit amplitude).
fn return_phase_area(te: f64, ta: f64, eps: f64) -> f64 {
    let tc = 1.0 - te;
    let tail = (-eps * tc).exp();
    -((1.0 - tail) / eps - tc * tail) / (eps * ta)
}

/// Integral of the open phase over `[0, te]` (unit amplitude at `te`).
fn open_phase_area(alpha: f64, tp: f64, te: f64) -> f64 {
    let w = PI / tp;
    let (s, c) = (w * te).sin_cos();
    -(alpha * s - w * c + w * (-alpha * te).exp()) / ((alpha * alpha + w * w) * s)
}

fn solve_alpha(tp: f64, te: f64, ta: f64, eps: f64) -> Result<f64> {
    let target = -return_phase_area(te, ta, eps);
    let f = |a: f64| open_phase_area(a, tp, te) - target;
    // the open-phase area falls monotonically with alpha
    let (mut lo, mut hi) = (-1.0, 1.0);
    while f(lo) < 0.0 && lo > -1e4 {
        lo *= 2.0;
    }
    while f(hi) > 0.0 && hi < 1e4 {
        hi *= 2.0;
    }
    let df = |a: f64| {
        let h = 1e-6 * a.abs().max(1.0);
        (f(a + h) - f(a - h)) / (2.0 * h)
    };
    safeguarded_newton(f, df, lo, hi, 0.0, "alpha")
}

impl LfCoeffs {
    /// Flow derivative at normalised time `t` in `[0, 1]`, unit amplitude.
    pub fn derivative(&self, t: f64) -> f64 {
        if t <= self.te {
            let w = PI / self.tp;
            -(self.alpha * (t - self.te)).exp() * (w * t).sin() / (w * self.te).sin()
        } else {
            let tail = (-self.epsilon * (1.0 - self.te)).exp();
            -((-self.epsilon * (t - self.te)).exp() - tail) / (self.epsilon * self.ta)
        }
    }

    /// Flow (integral of the derivative from 0) at normalised time `t`.
    pub fn flow(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        let w = PI / self.tp;
        let open = |t: f64| {
            let a = self.alpha;
            -((-a * self.te).exp() * ((a * t).exp() * (a * (w * t).sin() - w * (w * t).cos()) + w))
                / ((a * a + w * w) * (w * self.te).sin())
        };
        if t <= self.te {
            open(t)
        } else {
            let eps = self.epsilon;
            let tail = (-eps * (1.0 - self.te)).exp();
            let dt = t - self.te;
            open(self.te) - ((1.0 - (-eps * dt).exp()) / eps - dt * tail) / (eps * self.ta)
        }
    }
}

/// One period of the flow derivative sampled at `n / sample_rate`, scaled
/// by `ee`.
pub fn lf_pulse_derivative(coeffs: &LfCoeffs, t0: f64, ee: f64, sample_rate: u32) -> Result<Vec<f64>> {
    let n = t0 * sample_rate as f64;
    if n < 8.0 {
        return invalid(format!("period of {n:.2} samples is shorter than 8"));
    }
    let count = n.floor() as usize;
    Ok((0..count).map(|i| ee * coeffs.derivative(i as f64 / n)).collect())
}

/// Strictly increasing instants in seconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GciList(Vec<f64>);

impl GciList {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if let Some(i) = times.windows(2).position(|w| !(w[1] > w[0])) {
            return invalid(format!("GCI times not strictly increasing at index {}", i + 1));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return invalid("non-finite GCI time");
        }
        Ok(Self(times))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn times(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Per-frame source description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PulseTrainSpec {
    pub f0_track: Vec<f64>,
    pub rd_track: Vec<f64>,
    pub voicing: Vec<bool>,
    pub frame_hop: f64,
    pub ee: f64,
    pub duration: f64,
}

/// Cycle-to-cycle departures from the LF pulse train.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    /// Standard deviation of the relative period change, percent.
    pub jitter_pct: f64,
    /// Standard deviation of the relative amplitude change, percent.
    pub shimmer_pct: f64,
    /// Return-phase smoothing amount in `[0, 1]`.
    pub shape_morph: f64,
    pub seed: u64,
}

impl Perturbation {
    pub fn is_identity(&self) -> bool {
        self.jitter_pct == 0.0 && self.shimmer_pct == 0.0 && self.shape_morph == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=10.0).contains(&self.jitter_pct) || !(0.0..=10.0).contains(&self.shimmer_pct) {
            return invalid("jitter and shimmer must lie in [0, 10] percent");
        }
        if !(0.0..=1.0).contains(&self.shape_morph) {
            return invalid("shape morph must lie in [0, 1]");
        }
        Ok(())
    }
}

/// One rendered period.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PulseEvent {
    pub onset: f64,
    pub period: f64,
    pub amplitude: f64,
    pub gci: f64,
}

#[derive(Clone, Debug)]
pub struct RenderedPulses {
    /// Flow derivative, amplitude `ee` at each closure.
    pub derivative: AudioBuffer,
    /// Flow in units of `ee * ms`.
    pub flow: AudioBuffer,
    pub gci: GciList,
    pub events: Vec<PulseEvent>,
}

impl PulseTrainSpec {
    pub fn n_frames(&self) -> usize {
        self.f0_track.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.f0_track.len();
        if self.rd_track.len() != n || self.voicing.len() != n {
            return invalid("f0, Rd and voicing tracks differ in length");
        }
        if !(self.frame_hop > 0.0) || !(self.duration > 0.0) {
            return invalid("frame hop and duration must be positive");
        }
        if (n as f64) * self.frame_hop < self.duration - 1e-9 {
            return invalid("tracks do not cover the duration");
        }
        for i in 0..n {
            if self.voicing[i] && !(self.f0_track[i] > 0.0) {
                return invalid(format!("voiced frame {i} has f0 {}", self.f0_track[i]));
            }
            if self.voicing[i] && !(RD_MIN..=RD_MAX).contains(&self.rd_track[i]) {
                return invalid(format!("voiced frame {i} has Rd {}", self.rd_track[i]));
            }
        }
        Ok(())
    }

    fn frame_of(&self, t: f64) -> usize {
        // tolerance keeps `f * hop` in frame `f` despite rounding
        ((t / self.frame_hop + 1e-9).floor().max(0.0) as usize).min(self.n_frames() - 1)
    }

    fn voiced_at(&self, t: f64) -> bool {
        t >= 0.0 && t < self.duration && self.voicing[self.frame_of(t)]
    }
}

/// Renders the pulse train of `spec`.
///
/// Pulses are placed back to back: each onset is the previous onset plus
/// the period read at that onset's frame. A pulse is emitted only when its
/// onset and its closure instant both fall in voiced frames and the whole
/// period fits in the utterance. An onset in an unvoiced frame jumps to the
/// next voiced frame.
pub fn render_pulse_train(spec: &PulseTrainSpec, sample_rate: u32) -> Result<RenderedPulses> {
    render_pulse_train_perturbed(spec, sample_rate, &Perturbation::default())
}

pub fn render_pulse_train_perturbed(
    spec: &PulseTrainSpec,
    sample_rate: u32,
    perturbation: &Perturbation,
) -> Result<RenderedPulses> {
    spec.validate()?;
    perturbation.validate()?;
    let sr = sample_rate as f64;
    let len = (spec.duration * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(perturbation.seed);
    let mut gauss = move || -> f64 {
        let v: f64 = StandardNormal.sample(&mut rng);
        v.clamp(-3.0, 3.0)
    };
    // flow increments per sample interval, in ee * seconds
    let mut inc = vec![0.0; len + 1];
    let mut events = Vec::new();
    let mut cache: Option<(f64, LfCoeffs)> = None;
    let mut t = 0.0;
    while t < spec.duration {
        let frame = spec.frame_of(t);
        if !spec.voicing[frame] {
            match (frame + 1..spec.n_frames()).find(|&f| spec.voicing[f]) {
                Some(f) => {
                    let next = f as f64 * spec.frame_hop;
                    debug_assert!(next > t);
                    t = next;
                    continue;
                }
                None => break,
            }
        }
        let mut period = 1.0 / spec.f0_track[frame];
        let mut amp = spec.ee;
        if perturbation.jitter_pct > 0.0 {
            period *= 1.0 + perturbation.jitter_pct / 100.0 * gauss();
        }
        if perturbation.shimmer_pct > 0.0 {
            amp *= 1.0 + perturbation.shimmer_pct / 100.0 * gauss();
        }
        let rd = spec.rd_track[frame];
        let coeffs = match cache {
            Some((r, c)) if r == rd => c,
            _ => {
                let c = rd_to_lf_coeffs(rd)?;
                cache = Some((rd, c));
                c
            }
        };
        let gci = t + coeffs.te * period;
        if spec.voiced_at(gci) && t + period <= spec.duration {
            add_pulse(&mut inc, sr, t, period, amp, &coeffs, perturbation.shape_morph);
            events.push(PulseEvent { onset: t, period, amplitude: amp, gci });
        }
        t += period;
    }
    inc.truncate(len);
    let derivative: Vec<f64> = inc.iter().map(|v| v * sr).collect();
    let mut flow = Vec::with_capacity(len);
    let mut acc = 0.0;
    for v in &inc {
        flow.push(acc * FLOW_SCALE);
        acc += v;
    }
    let gci = GciList::new(events.iter().map(|e| e.gci).collect())?;
    Ok(RenderedPulses {
        derivative: AudioBuffer::new(derivative, sample_rate)?,
        flow: AudioBuffer::new(flow, sample_rate)?,
        gci,
        events,
    })
}

/// Adds one pulse's exact per-interval flow increments. With `morph > 0`
/// the return phase is smoothed by a one-pole filter (time constant
/// `0.1 * morph` periods); the area cut off at the period end is spread
/// evenly over the return phase.
fn add_pulse(inc: &mut [f64], sr: f64, onset: f64, period: f64, amp: f64, c: &LfCoeffs, morph: f64) {
    let first = (onset * sr).floor() as usize;
    let last = (((onset + period) * sr).ceil() as usize).min(inc.len());
    if first >= last {
        return;
    }
    let scale = amp * period;
    let tau = |s: f64| ((s - onset) / period).clamp(0.0, 1.0);
    let mut local: Vec<f64> =
        (first..last).map(|n| scale * (c.flow(tau((n + 1) as f64 / sr)) - c.flow(tau(n as f64 / sr)))).collect();
    if morph > 0.0 {
        let ne = (((onset + c.te * period) * sr).floor() as usize).saturating_sub(first);
        if ne + 1 < local.len() {
            let time_const = 0.1 * morph * period * sr;
            let beta = (-1.0 / time_const).exp();
            let before: f64 = local[ne + 1..].iter().sum();
            let mut prev = local[ne];
            for v in local[ne + 1..].iter_mut() {
                prev = (1.0 - beta) * *v + beta * prev;
                *v = prev;
            }
            let after: f64 = local[ne + 1..].iter().sum();
            let fill = (before - after) / (local.len() - ne - 1) as f64;
            local[ne + 1..].iter_mut().for_each(|v| *v += fill);
        }
    }
    for (dst, v) in inc[first..last].iter_mut().zip(local) {
        *dst += v;
    }
}
