//! Deterministic signal-processing primitives.

use gci_autodiff::{log_mag_frames, StftConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Floor applied to every spectral magnitude before taking the log.
pub const LOG_FLOOR: f64 = 1e-5;

/// Floor for mel band powers (the square of [`LOG_FLOOR`]).
pub const MEL_POWER_FLOOR: f64 = LOG_FLOOR * LOG_FLOOR;

pub const AUDIO_RATE: u32 = 16_000;
pub const PULSE_RATE: u32 = 2_000;

/// Mono audio at a fixed sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return invalid("sample rate must be positive");
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite sample at index {i}"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

/// Glottal flow at the analyzer rate. Sample `k` describes the instant
/// `offset + k / sample_rate` seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PulseSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub offset: f64,
}

/// Time of pulse sample 0 relative to audio sample 0: the centre of the
/// first pair of audio samples.
pub const PULSE_OFFSET_S: f64 = 0.5 / AUDIO_RATE as f64;

/// Ratio between the audio and pulse rates.
pub const DECIMATION: usize = (AUDIO_RATE / PULSE_RATE) as usize;

impl PulseSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32, offset: f64) -> Result<Self> {
        if sample_rate == 0 {
            return invalid("sample rate must be positive");
        }
        if samples.iter().any(|v| !v.is_finite()) || !offset.is_finite() {
            return invalid("non-finite pulse signal");
        }
        Ok(Self { samples, sample_rate, offset })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn time_of(&self, k: usize) -> f64 {
        self.offset + k as f64 / self.sample_rate as f64
    }

    /// Reduces a 16 kHz flow to the pulse rate: sample `k` is the mean of
    /// audio samples `8k` and `8k + 1`.
    pub fn from_audio_rate(flow: &[f64]) -> Result<Self> {
        let n = flow.len().div_ceil(DECIMATION);
        let samples = (0..n)
            .map(|k| {
                let a = flow[k * DECIMATION];
                let b = flow.get(k * DECIMATION + 1).copied().unwrap_or(a);
                0.5 * (a + b)
            })
            .collect();
        Self::new(samples, PULSE_RATE, PULSE_OFFSET_S)
    }
}

/// Log-magnitude STFT frames, `frames[frame][bin]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMagSpectrogram {
    pub frames: Vec<Vec<f64>>,
    pub window_len: usize,
    pub hop: usize,
}

/// Log mel band powers, `frames[frame][band]`, frame `m` centred at
/// `m * frame_hop` seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelEnvelope {
    pub frames: Vec<Vec<f64>>,
    pub n_bands: usize,
    pub frame_hop: f64,
}

impl MelEnvelope {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }
}

pub fn window_len_samples(window_ms: f64, sample_rate: u32) -> usize {
    (window_ms * sample_rate as f64 / 1000.0).round() as usize
}

/// Symmetric Hann window.
pub fn hann_window(size: usize) -> Result<Vec<f64>> {
    if size < 2 {
        return invalid(format!("Hann window needs at least 2 samples, got {size}"));
    }
    let denom = (size - 1) as f64;
    Ok((0..size).map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / denom).cos())).collect())
}

/// STFT configuration for a window given in milliseconds.
pub fn stft_config(window_ms: f64, sample_rate: u32) -> Result<StftConfig> {
    let win = window_len_samples(window_ms, sample_rate);
    if win < 2 {
        return invalid(format!("{window_ms} ms is shorter than two samples at {sample_rate} Hz"));
    }
    Ok(StftConfig::half_overlap(win, LOG_FLOOR))
}

/// Hann-windowed, half-overlapping log-magnitude STFT.
pub fn stft_log_mag(signal: &AudioBuffer, window_ms: f64) -> Result<LogMagSpectrogram> {
    let cfg = stft_config(window_ms, signal.sample_rate)?;
    if signal.len() < cfg.win {
        return invalid(format!("signal of {} samples is shorter than one {}-sample window", signal.len(), cfg.win));
    }
    let (flat, n_frames) = log_mag_frames(&signal.samples, cfg)?;
    let bins = cfg.n_bins();
    let frames = (0..n_frames).map(|f| flat[f * bins..(f + 1) * bins].to_vec()).collect();
    Ok(LogMagSpectrogram { frames, window_len: cfg.win, hop: cfg.hop })
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of `n_bands` mel bands spanning 0 Hz to Nyquist.
pub fn mel_band_centers(n_bands: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (1..=n_bands).map(|i| mel_to_hz(top * i as f64 / (n_bands + 1) as f64)).collect()
}

/// Triangular mel filterbank over `nfft / 2 + 1` bins. Each row is
/// normalised to unit sum so white noise yields equal band powers.
pub fn mel_filterbank(n_bands: usize, nfft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let bins = nfft / 2 + 1;
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_bands + 2).map(|i| mel_to_hz(top * i as f64 / (n_bands + 1) as f64)).collect();
    let bin_hz = sample_rate as f64 / nfft as f64;
    (0..n_bands)
        .map(|b| {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            let mut row: Vec<f64> = (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f > lo && f < hi {
                        if f <= mid {
                            (f - lo) / (mid - lo)
                        } else {
                            (hi - f) / (hi - mid)
                        }
                    } else {
                        0.0
                    }
                })
                .collect();
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|w| *w /= s);
            } else {
                let k = ((mid / bin_hz).round() as usize).min(bins - 1);
                row[k] = 1.0;
            }
            row
        })
        .collect()
}

/// Log mel band powers on centred frames.
///
/// The signal is zero-padded by half a window on both sides; frame `m`
/// is centred on sample `m * hop`. Band powers are normalised by the
/// window energy so a stationary signal maps to its mean-square level.
pub fn mel_band_envelope(signal: &AudioBuffer, n_bands: usize, window_ms: f64, hop_ms: f64) -> Result<MelEnvelope> {
    if n_bands == 0 {
        return invalid("n_bands must be at least 1");
    }
    if signal.is_empty() {
        return invalid("empty signal");
    }
    let sr = signal.sample_rate;
    let win = window_len_samples(window_ms, sr);
    let hop = window_len_samples(hop_ms, sr);
    if win < 2 || hop == 0 {
        return invalid(format!("window {window_ms} ms / hop {hop_ms} ms too short at {sr} Hz"));
    }
    let nfft = win.next_power_of_two();
    let half = win / 2;
    let mut padded = vec![0.0; half];
    padded.extend_from_slice(&signal.samples);
    padded.extend(std::iter::repeat(0.0).take(win - half));
    let n_frames = signal.len() / hop + 1;
    let cfg = StftConfig { win, hop, nfft, floor: 0.0 };
    let (logmag, got) = log_mag_frames(&padded, cfg)?;
    debug_assert!(got >= n_frames);
    let window = hann_window(win)?;
    let wenergy: f64 = window.iter().map(|w| w * w).sum();
    let fb = mel_filterbank(n_bands, nfft, sr);
    let bins = cfg.n_bins();
    let frames = (0..n_frames)
        .map(|f| {
            let power: Vec<f64> = logmag[f * bins..(f + 1) * bins].iter().map(|&l| (2.0 * l).exp() / wenergy).collect();
            fb.iter()
                .map(|row| {
                    let e: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
                    e.max(MEL_POWER_FLOOR).ln()
                })
                .collect()
        })
        .collect();
    Ok(MelEnvelope { frames, n_bands, frame_hop: hop as f64 / sr as f64 })
}

/// Linear interpolation by an integer factor; knots are kept exactly and
/// the output has `(len - 1) * factor + 1` samples.
pub fn upsample_linear(knots: &[f64], factor: usize) -> Result<Vec<f64>> {
    if knots.is_empty() {
        return invalid("cannot upsample an empty signal");
    }
    if factor == 0 {
        return invalid("upsampling factor must be at least 1");
    }
    let mut out = Vec::with_capacity((knots.len() - 1) * factor + 1);
    for w in knots.windows(2) {
        for j in 0..factor {
            let u = j as f64 / factor as f64;
            out.push(w[0] + (w[1] - w[0]) * u);
        }
    }
    out.push(*knots.last().unwrap());
    Ok(out)
}

/// Natural cubic spline through unit-spaced knots.
#[derive(Clone, Debug)]
pub struct NaturalSpline {
    y: Vec<f64>,
    m: Vec<f64>,
}

impl NaturalSpline {
    pub fn new(y: &[f64]) -> Self {
        let n = y.len();
        let mut m = vec![0.0; n];
        if n >= 3 {
            // Thomas algorithm on M[i-1] + 4 M[i] + M[i+1] = 6 (y[i+1] - 2 y[i] + y[i-1])
            let k = n - 2;
            let mut c = vec![0.0; k];
            let mut d = vec![0.0; k];
            for i in 0..k {
                let rhs = 6.0 * (y[i + 2] - 2.0 * y[i + 1] + y[i]);
                if i == 0 {
                    c[0] = 1.0 / 4.0;
                    d[0] = rhs / 4.0;
                } else {
                    let denom = 4.0 - c[i - 1];
                    c[i] = 1.0 / denom;
                    d[i] = (rhs - d[i - 1]) / denom;
                }
            }
            m[k] = d[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = d[i] - c[i] * m[i + 2];
            }
        }
        Self { y: y.to_vec(), m }
    }

    /// Value at fractional knot position `x`, clamped to the knot range.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.y.len();
        if n == 1 {
            return self.y[0];
        }
        let x = x.clamp(0.0, (n - 1) as f64);
        let i = (x.floor() as usize).min(n - 2);
        let u = x - i as f64;
        let v = 1.0 - u;
        v * self.y[i] + u * self.y[i + 1] + ((v * v * v - v) * self.m[i] + (u * u * u - u) * self.m[i + 1]) / 6.0
    }
}

/// Natural cubic spline upsampling by an integer factor. Fewer than four
/// knots fall back to linear interpolation.
pub fn upsample_cubic(knots: &[f64], factor: usize) -> Result<Vec<f64>> {
    if knots.len() < 4 {
        return upsample_linear(knots, factor);
    }
    if factor == 0 {
        return invalid("upsampling factor must be at least 1");
    }
    let spline = NaturalSpline::new(knots);
    let n_out = (knots.len() - 1) * factor + 1;
    Ok((0..n_out)
        .map(|t| if t % factor == 0 { knots[t / factor] } else { spline.eval(t as f64 / factor as f64) })
        .collect())
}

/// Zero-mean, unit-variance Gaussian noise, deterministic per seed.
pub fn white_noise(length: usize, seed: u64, sample_rate: u32) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..length).map(|_| StandardNormal.sample(&mut rng)).collect();
    AudioBuffer { samples, sample_rate }
}
