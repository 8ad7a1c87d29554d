use gci_core::lf_model::{
    lf_pulse_derivative, rd_from_quotients, rd_to_lf_coeffs, render_pulse_train, PulseTrainSpec, RD_MAX, RD_MIN,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SR: u32 = 16_000;

fn spec(f0: impl Fn(usize) -> f64, voiced: impl Fn(usize) -> bool, seconds: f64) -> PulseTrainSpec {
    let n = (seconds / 0.005).ceil() as usize;
    PulseTrainSpec {
        f0_track: (0..n).map(&f0).collect(),
        rd_track: vec![1.0; n],
        voicing: (0..n).map(&voiced).collect(),
        frame_hop: 0.005,
        ee: 1.0,
        duration: seconds,
    }
}

/// Composite Simpson integration of the continuous pulse on a dense grid.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn rd_regression_round_trips_for_random_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let rd = rng.random_range(RD_MIN..RD_MAX);
        let c = rd_to_lf_coeffs(rd).unwrap();
        assert!((rd_from_quotients(c.ra, c.rk, c.rg) - rd).abs() < 1e-9, "Rd {rd}");
        assert!(0.0 < c.tp && c.tp < c.te && c.te < 1.0 && c.ta > 0.0);
        assert!(c.epsilon.is_finite() && c.alpha.is_finite());
    }
}

#[test]
fn pulse_period_integral_vanishes() {
    let (t0, ee) = (0.008, 1.0);
    for rd in [0.5, 1.0, 2.0] {
        let c = rd_to_lf_coeffs(rd).unwrap();
        // split at te where the derivative has a kink
        let area = simpson(|t| c.derivative(t), 0.0, c.te, 20_000) + simpson(|t| c.derivative(t), c.te, 1.0, 20_000);
        let integral = ee * t0 * area;
        assert!(integral.abs() < 1e-4 * ee * t0, "Rd {rd}: {integral:e}");
    }
}

#[test]
fn sampled_pulse_minimum_sits_at_te() {
    for rd in [0.5, 1.0, 2.0] {
        for t0 in [0.0025, 0.005, 0.01, 0.0143] {
            let c = rd_to_lf_coeffs(rd).unwrap();
            let p = lf_pulse_derivative(&c, t0, 1.0, SR).unwrap();
            let argmin = p.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 as f64;
            let expected = (c.te * t0 * SR as f64).round();
            assert!((argmin - expected).abs() <= 1.0, "Rd {rd} T0 {t0}: {argmin} vs {expected}");
            // dense-grid minimum of the continuous waveform
            let (t_min, v_min) = (0..=100_000)
                .map(|i| (i as f64 / 100_000.0, c.derivative(i as f64 / 100_000.0)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            assert!((t_min - c.te).abs() <= 1e-5 && v_min >= -1.0 - 1e-12, "Rd {rd}: {t_min} {v_min}");
        }
    }
}

#[test]
fn waveform_continuous_at_te() {
    for rd in [0.3, 0.8, 1.5, 2.7] {
        let c = rd_to_lf_coeffs(rd).unwrap();
        let left = c.derivative(c.te - 1e-10);
        let right = c.derivative(c.te + 1e-10);
        assert!((left - right).abs() < 1e-6, "Rd {rd}");
    }
}

#[test]
fn constant_f0_gives_regular_gcis() {
    let r = render_pulse_train(&spec(|_| 100.0, |_| true, 1.0), SR).unwrap();
    let g = r.gci.times();
    assert!((99..=100).contains(&g.len()), "{} GCIs", g.len());
    for w in g.windows(2) {
        assert!((w[1] - w[0] - 0.01).abs() <= 1.0 / SR as f64);
    }
}

#[test]
fn f0_step_changes_spacing_once() {
    let r = render_pulse_train(&spec(|i| if i < 100 { 100.0 } else { 200.0 }, |_| true, 1.0), SR).unwrap();
    let g = r.gci.times();
    let tol = 1.0 / SR as f64;
    let spacings: Vec<f64> = g.windows(2).map(|w| w[1] - w[0]).collect();
    let odd: Vec<&f64> =
        spacings.iter().filter(|&&d| (d - 0.01).abs() > tol && (d - 0.005).abs() > tol).collect();
    assert!(odd.len() <= 1, "transitional spacings {odd:?}");
    let before = g.iter().filter(|&&t| t < 0.45).count();
    let after = g.iter().filter(|&&t| t > 0.55).count();
    assert!(before >= 44 && after >= 88, "{before} / {after}");
    for (w, d) in g.windows(2).zip(&spacings) {
        if w[1] < 0.49 {
            assert!((d - 0.01).abs() <= tol);
        }
        if w[0] > 0.52 {
            assert!((d - 0.005).abs() <= tol);
        }
    }
}

#[test]
fn no_gci_in_unvoiced_frames() {
    let voiced = |i: usize| (i / 40) % 2 == 0;
    let s = spec(|i| 80.0 + i as f64 * 0.5, voiced, 2.0);
    let r = render_pulse_train(&s, SR).unwrap();
    assert!(!r.gci.is_empty());
    for &t in r.gci.times() {
        assert!(voiced((t / 0.005) as usize), "GCI at {t} in an unvoiced frame");
    }
    // the derivative is silent in frames no pulse reaches
    for (f, v) in s.voicing.iter().enumerate() {
        let start = f * 80;
        let any_pulse = r.events.iter().any(|e| {
            let (a, b) = (e.onset * 16_000.0, (e.onset + e.period) * 16_000.0);
            a < (start + 80) as f64 && b > start as f64
        });
        if !v && !any_pulse {
            assert!(r.derivative.samples[start..start + 80].iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn rendered_minimum_matches_annotation() {
    let r = render_pulse_train(&spec(|_| 140.0, |_| true, 0.5), SR).unwrap();
    let d = &r.derivative.samples;
    for e in &r.events {
        let a = (e.onset * 16_000.0) as usize;
        let b = (((e.onset + e.period) * 16_000.0) as usize).min(d.len());
        let argmin = (a..b).min_by(|&x, &y| d[x].total_cmp(&d[y])).unwrap();
        assert!((argmin as f64 + 0.5 - e.gci * 16_000.0).abs() <= 1.5);
    }
}
