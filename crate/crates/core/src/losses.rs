//! Reconstruction and regularisation losses of the analysis-synthesis
//! loop, and the joint-training bundle on unlabelled speech.

use gci_autodiff::{Binding, Graph, Real, StftConfig, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::dsp::{AUDIO_RATE, LOG_FLOOR, PULSE_RATE};
use crate::error::{invalid, GciError, Result};
use crate::models::{upsample_pulses, Analyzer, BnUse, Synthesizer, ANALYZER_LEFT_PAD, COND_CHANNELS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub as_spectral: f64,
    pub as_time: f64,
    pub asa_time: f64,
    pub a_spectral: f64,
    pub a_time: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { as_spectral: 0.1, as_time: 10.0, asa_time: 1.0, a_spectral: 0.02, a_time: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.as_spectral, self.as_time, self.asa_time, self.a_spectral, self.a_time];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return invalid("loss weights must be finite and non-negative");
        }
        Ok(())
    }
}

/// Multi-resolution log-magnitude STFT comparison at one sample rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralLossSpec {
    /// Window lengths in milliseconds, longest first. Hop is half a window.
    pub window_ms: Vec<f64>,
    pub sample_rate: u32,
    pub floor: f64,
}

impl SpectralLossSpec {
    /// Speech-domain resolutions at 16 kHz.
    pub fn as_spectral() -> Self {
        Self { window_ms: vec![160.0, 53.3, 32.0, 22.9, 17.8], sample_rate: AUDIO_RATE, floor: LOG_FLOOR }
    }

    /// Pulse-domain resolutions at 2 kHz.
    pub fn a_spectral() -> Self {
        Self { window_ms: vec![80.0, 40.0], sample_rate: PULSE_RATE, floor: LOG_FLOOR }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_ms.is_empty() || self.window_ms.iter().any(|w| !(*w > 0.0)) {
            return invalid("spectral loss needs positive window lengths");
        }
        if self.window_ms.windows(2).any(|w| w[0] < w[1]) {
            return invalid("spectral loss windows must be sorted longest first");
        }
        Ok(())
    }

    pub fn stft_configs(&self) -> Vec<StftConfig> {
        self.window_ms
            .iter()
            .map(|ms| {
                let win = (ms * self.sample_rate as f64 / 1000.0).round() as usize;
                StftConfig::half_overlap(win.max(2), self.floor)
            })
            .collect()
    }

    pub fn longest_window(&self) -> usize {
        self.stft_configs().iter().map(|c| c.win).max().unwrap_or(0)
    }
}

fn check_pair<T: Real>(g: &Graph<T>, x: Var, y: Var) -> Result<()> {
    if g.shape(x) != g.shape(y) {
        return Err(GciError::Shape(format!("loss operands differ: {:?} vs {:?}", g.shape(x), g.shape(y))));
    }
    Ok(())
}

/// Mean over resolutions of the MAE between log-magnitude spectrograms.
/// Operands are `[time]` or `[batch, time]`.
pub fn multi_res_spectral_mae<T: Real>(g: &mut Graph<T>, x: Var, y: Var, spec: &SpectralLossSpec) -> Result<Var> {
    spec.validate()?;
    check_pair(g, x, y)?;
    let len = *g.shape(x).last().unwrap_or(&0);
    if len < spec.longest_window() {
        return Err(GciError::Shape(format!(
            "signal of {len} samples is shorter than the {}-sample window",
            spec.longest_window()
        )));
    }
    let configs = spec.stft_configs();
    let mut total: Option<Var> = None;
    for cfg in &configs {
        let sx = g.stft_log_mag(x, *cfg)?;
        let sy = g.stft_log_mag(y, *cfg)?;
        let l = g.mae(sx, sy)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    Ok(g.scale(total.expect("validated non-empty"), 1.0 / configs.len() as f64))
}

/// Point-wise MAE between resynthesis (noise input zeroed) and speech.
pub fn as_time_loss<T: Real>(g: &mut Graph<T>, resynth_noise_zero: Var, real: Var) -> Result<Var> {
    check_pair(g, resynth_noise_zero, real)?;
    Ok(g.mae(resynth_noise_zero, real)?)
}

/// MSE between the reanalysis of resynthesised speech and the original
/// analysis. Two silent analyses give zero, which is the degenerate
/// optimum the regularisers exist to avoid.
pub fn asa_time_loss<T: Real>(g: &mut Graph<T>, reanalysis: Var, original: Var) -> Result<Var> {
    check_pair(g, reanalysis, original)?;
    Ok(g.mse(reanalysis, original)?)
}

/// Spectral distance between analysed pulses and pulses rendered from
/// the utterance's f0, Rd and voicing annotations.
pub fn a_spectral_loss<T: Real>(g: &mut Graph<T>, analyzed: Var, reference: Var) -> Result<Var> {
    multi_res_spectral_mae(g, analyzed, reference, &SpectralLossSpec::a_spectral())
}

/// MSE between analyzer output and ground-truth pulses on synthetic audio.
pub fn a_time_loss<T: Real>(g: &mut Graph<T>, predicted: Var, target: Var) -> Result<Var> {
    check_pair(g, predicted, target)?;
    Ok(g.mse(predicted, target)?)
}

/// Per-loss values of one step; unused terms are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub as_spectral: f64,
    pub as_time: f64,
    pub asa_time: f64,
    pub a_spectral: f64,
    pub a_time: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn values(&self) -> [f64; 5] {
        [self.as_spectral, self.as_time, self.asa_time, self.a_spectral, self.a_time]
    }

    /// Element-wise mean of `items`; zero when empty.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown {
            as_spectral: avg(|b| b.as_spectral),
            as_time: avg(|b| b.as_time),
            asa_time: avg(|b| b.asa_time),
            a_spectral: avg(|b| b.a_spectral),
            a_time: avg(|b| b.a_time),
            total: avg(|b| b.total),
        }
    }
}

/// One batch of unlabelled speech segments for joint training.
#[derive(Clone, Debug, PartialEq)]
pub struct RealBatch {
    pub batch: usize,
    pub segment_len: usize,
    /// `[batch, segment_len]` analyzer input.
    pub audio: Vec<f64>,
    /// `[batch, COND_CHANNELS, synth_len]` envelopes for the synthesizer window.
    pub cond: Vec<f64>,
    /// `[batch, synth_len]` synthesizer noise input.
    pub noise: Vec<f64>,
    /// `[batch, pulses]` pulses rendered from annotations.
    pub reference: Vec<f64>,
}

impl RealBatch {
    /// Audio samples seen by the synthesizer: the segment minus the
    /// analyzer trim.
    pub fn synth_len(&self) -> usize {
        self.segment_len - 2 * ANALYZER_LEFT_PAD - 1
    }
}

fn constant<T: Real>(g: &mut Graph<T>, shape: &[usize], data: &[f64]) -> Result<Var> {
    Ok(g.constant(Tensor::new(shape, data.iter().map(|&v| T::lit(v)).collect())?))
}

/// Networks bound into one graph for a joint step.
pub struct Networks<'a, T: Real> {
    pub analyzer: &'a Analyzer<T>,
    pub analyzer_binding: &'a Binding,
    /// Detached copy of the analyzer weights used for reanalysis.
    pub reanalyzer_binding: &'a Binding,
    pub synthesizer: &'a Synthesizer<T>,
    pub synth_binding: &'a Binding,
}

/// Builds the real-data losses along the analysis-synthesis loop and
/// returns the weighted total. Terms with zero weight are not built, so
/// they contribute neither value nor gradient.
pub fn step2_real_bundle<T: Real>(
    g: &mut Graph<T>,
    nets: &Networks<'_, T>,
    batch: &RealBatch,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    let b = batch.batch;
    let seg = batch.segment_len;
    let syn = batch.synth_len();
    let n_out = nets
        .analyzer
        .config
        .output_len(seg)
        .ok_or_else(|| GciError::Shape(format!("segment of {seg} samples is too short")))?;
    if batch.audio.len() != b * seg
        || batch.cond.len() != b * COND_CHANNELS * syn
        || batch.noise.len() != b * syn
        || batch.reference.len() != b * n_out
    {
        return Err(GciError::Shape("real batch buffers do not match its dimensions".into()));
    }

    let audio = constant(g, &[b, 1, seg], &batch.audio)?;
    let (pulses, _) = nets.analyzer.forward(g, nets.analyzer_binding, audio, BnUse::Running)?;
    let target = g.slice(audio, 2, ANALYZER_LEFT_PAD, syn)?;
    let target = g.reshape(target, &[b, syn])?;
    let excitation = upsample_pulses(g, pulses, syn)?;
    let excitation = g.reshape(excitation, &[b, 1, syn])?;
    let cond = constant(g, &[b, COND_CHANNELS, syn], &batch.cond)?;

    let mut terms: Vec<(Var, f64)> = Vec::new();
    let mut br = LossBreakdown::default();
    let needs_noisy = weights.as_spectral > 0.0 || weights.asa_time > 0.0;
    let resynth = if needs_noisy {
        let noise = constant(g, &[b, 1, syn], &batch.noise)?;
        let src = g.concat(&[excitation, noise], 1)?;
        Some(nets.synthesizer.forward(g, nets.synth_binding, src, cond)?)
    } else {
        None
    };
    if weights.as_spectral > 0.0 {
        let l = multi_res_spectral_mae(g, resynth.unwrap(), target, &SpectralLossSpec::as_spectral())?;
        br.as_spectral = g.value(l).item().as_f64();
        terms.push((l, weights.as_spectral));
    }
    if weights.as_time > 0.0 {
        let zeros = g.constant(Tensor::zeros(&[b, 1, syn]));
        let src = g.concat(&[excitation, zeros], 1)?;
        let quiet = nets.synthesizer.forward(g, nets.synth_binding, src, cond)?;
        let l = as_time_loss(g, quiet, target)?;
        br.as_time = g.value(l).item().as_f64();
        terms.push((l, weights.as_time));
    }
    if weights.asa_time > 0.0 {
        let x = g.reshape(resynth.unwrap(), &[b, 1, syn])?;
        let (re, _) = nets.analyzer.forward(g, nets.reanalyzer_binding, x, BnUse::Running)?;
        let m = g.shape(re)[1];
        let orig = g.slice(pulses, 1, ANALYZER_LEFT_PAD / crate::dsp::DECIMATION, m)?;
        let l = asa_time_loss(g, re, orig)?;
        br.asa_time = g.value(l).item().as_f64();
        terms.push((l, weights.asa_time));
    }
    if weights.a_spectral > 0.0 {
        let reference = constant(g, &[b, n_out], &batch.reference)?;
        let l = a_spectral_loss(g, pulses, reference)?;
        br.a_spectral = g.value(l).item().as_f64();
        terms.push((l, weights.a_spectral));
    }
    let total = weighted_sum(g, &terms)?;
    br.total = g.value(total).item().as_f64();
    Ok((total, br))
}

/// `sum(w_i * l_i)`; an empty list gives a constant zero.
pub fn weighted_sum<T: Real>(g: &mut Graph<T>, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(l, w) in terms {
        let s = g.scale(l, w);
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    Ok(acc.unwrap_or_else(|| g.constant(Tensor::scalar(T::zero()))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_weights_are_table_values() {
        let w = LossWeights::default();
        assert_eq!([w.as_spectral, w.as_time, w.asa_time, w.a_spectral, w.a_time], [0.1, 10.0, 1.0, 0.02, 10.0]);
        assert!(LossWeights { a_time: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn window_lengths_in_samples() {
        let wins: Vec<usize> = SpectralLossSpec::as_spectral().stft_configs().iter().map(|c| c.win).collect();
        assert_eq!(wins, vec![2560, 853, 512, 366, 285]);
        let wins: Vec<usize> = SpectralLossSpec::a_spectral().stft_configs().iter().map(|c| c.win).collect();
        assert_eq!(wins, vec![160, 80]);
        let bad = SpectralLossSpec { window_ms: vec![10.0, 20.0], ..SpectralLossSpec::a_spectral() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mse_of_simple_pair() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        let z = g.constant(Tensor::zeros(&[2]));
        let l = asa_time_loss(&mut g, a, z).unwrap();
        assert_eq!(g.value(l).item(), 0.5);
        let l = asa_time_loss(&mut g, z, z).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn short_signal_rejected() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::zeros(&[100]));
        assert!(a_spectral_loss(&mut g, a, a).is_err());
        let b = g.constant(Tensor::zeros(&[200]));
        assert!(a_time_loss(&mut g, a, b).is_err());
    }
}
