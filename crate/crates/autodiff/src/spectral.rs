//! Log-magnitude short-time Fourier transform with an analytic adjoint.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{shape_err, Result};
use crate::real::Real;

/// Framing of a log-magnitude STFT. Frames start at multiples of `hop`
/// with no centering padding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StftConfig {
    pub win: usize,
    pub hop: usize,
    pub nfft: usize,
    pub floor: f64,
}

impl StftConfig {
    /// Half-overlap configuration with the FFT size rounded up to a power of two.
    pub fn half_overlap(win: usize, floor: f64) -> Self {
        Self { win, hop: (win / 2).max(1), nfft: win.next_power_of_two(), floor }
    }

    pub fn n_bins(&self) -> usize {
        self.nfft / 2 + 1
    }

    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.win {
            0
        } else {
            (len - self.win) / self.hop + 1
        }
    }

    pub(crate) fn validate(&self, len: usize) -> Result<()> {
        if self.win < 2 || self.hop == 0 || self.nfft < self.win {
            return shape_err(format!("invalid STFT configuration {self:?}"));
        }
        if len < self.win {
            return shape_err(format!("signal of {len} samples is shorter than the {}-sample window", self.win));
        }
        Ok(())
    }
}

/// Symmetric Hann window, `0.5 (1 - cos(2 pi n / (size - 1)))`.
pub(crate) fn hann<T: Real>(size: usize) -> Vec<T> {
    let denom = (size - 1) as f64;
    (0..size)
        .map(|n| T::lit(0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / denom).cos())))
        .collect()
}

pub(crate) struct SpectralPlan<T: Real> {
    pub cfg: StftConfig,
    pub window: Vec<T>,
    fft: Arc<dyn Fft<T>>,
}

impl<T: Real> SpectralPlan<T> {
    pub fn new(cfg: StftConfig) -> Self {
        let mut planner = FftPlanner::new();
        Self { cfg, window: hann(cfg.win), fft: planner.plan_fft_forward(cfg.nfft) }
    }

    /// Complex one-sided spectra of all frames, `[frames * bins]`.
    pub fn spectra(&self, signal: &[T]) -> Vec<Complex<T>> {
        let cfg = self.cfg;
        let frames = cfg.n_frames(signal.len());
        let bins = cfg.n_bins();
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); cfg.nfft];
        for f in 0..frames {
            let start = f * cfg.hop;
            for (n, b) in buf.iter_mut().enumerate() {
                *b = if n < cfg.win {
                    Complex::new(signal[start + n] * self.window[n], T::zero())
                } else {
                    Complex::new(T::zero(), T::zero())
                };
            }
            self.fft.process(&mut buf);
            out.extend_from_slice(&buf[..bins]);
        }
        out
    }

    pub fn log_mag(&self, spectra: &[Complex<T>]) -> Vec<T> {
        let floor = T::lit(self.cfg.floor);
        spectra.iter().map(|c| c.norm().max(floor).ln()).collect()
    }

    /// Adds the gradient of `sum(upstream * log_mag)` with respect to the
    /// signal into `grad`.
    pub fn backward(&self, spectra: &[Complex<T>], upstream: &[T], grad: &mut [T]) {
        let cfg = self.cfg;
        let bins = cfg.n_bins();
        let frames = spectra.len() / bins;
        let floor = T::lit(self.cfg.floor);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); cfg.nfft];
        for f in 0..frames {
            buf.iter_mut().for_each(|b| *b = Complex::new(T::zero(), T::zero()));
            let mut any = false;
            for k in 0..bins {
                let x = spectra[f * bins + k];
                let mag2 = x.norm_sqr();
                if mag2.sqrt() > floor {
                    // d log|X| / dX contributes g * conj(X) / |X|^2
                    buf[k] = x.conj() * (upstream[f * bins + k] / mag2);
                    any = true;
                }
            }
            if !any {
                continue;
            }
            self.fft.process(&mut buf);
            let start = f * cfg.hop;
            for n in 0..cfg.win {
                grad[start + n] += self.window[n] * buf[n].re;
            }
        }
    }
}

/// Log-magnitude frames of one signal as `(values [frames * bins], frames)`.
pub fn log_mag_frames<T: Real>(signal: &[T], cfg: StftConfig) -> Result<(Vec<T>, usize)> {
    cfg.validate(signal.len())?;
    let plan = SpectralPlan::new(cfg);
    let spectra = plan.spectra(signal);
    Ok((plan.log_mag(&spectra), cfg.n_frames(signal.len())))
}
