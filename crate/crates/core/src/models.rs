//! The analyzer (speech at 16 kHz to glottal flow at 2 kHz) and the
//! synthesizer (pulses, noise and envelopes to speech).

use gci_autodiff::{BatchNormMode, BatchStats, Binding, Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{upsample_cubic, AudioBuffer, MelEnvelope, PulseSignal, AUDIO_RATE, DECIMATION, PULSE_OFFSET_S, PULSE_RATE};
use crate::error::{invalid, GciError, Result};

/// Input samples consumed by the analyzer's valid padding.
pub const ANALYZER_TRIM: usize = 993;
/// Zeros prepended to a whole utterance so output `j` lands on audio
/// instant `8j + 0.5`.
pub const ANALYZER_LEFT_PAD: usize = ANALYZER_TRIM / 2;
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

/// Mel envelopes enter the synthesizer as `(log_power - ENV_CENTER) / ENV_SCALE`.
pub const ENV_CENTER: f64 = -10.0;
pub const ENV_SCALE: f64 = 5.0;
pub const COND_CHANNELS: usize = 64 + 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzerConfig {
    /// Kernel size of each batch-normalised convolution.
    pub kernels: Vec<usize>,
    /// Whether a factor-2 average pool follows each convolution.
    pub pool_after: Vec<bool>,
    pub channels: usize,
}

impl AnalyzerConfig {
    /// Input samples removed by the valid convolutions and pools, each
    /// weighted by the decimation already applied before it.
    pub fn total_trim(&self) -> usize {
        let mut step = 1;
        let mut trim = 0;
        for (&k, &pool) in self.kernels.iter().zip(&self.pool_after) {
            trim += (k - 1) * step;
            if pool {
                trim += step;
                step *= 2;
            }
        }
        trim
    }

    pub fn downsample_factor(&self) -> usize {
        1 << self.pool_after.iter().filter(|&&p| p).count()
    }

    pub fn receptive_field(&self) -> usize {
        self.total_trim() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels.len() != self.pool_after.len() || self.kernels.is_empty() {
            return invalid("analyzer kernels and pool flags differ in length");
        }
        if self.kernels.contains(&0) || self.channels == 0 {
            return invalid("analyzer kernel sizes and width must be positive");
        }
        if self.pool_after.iter().filter(|&&p| p).count() != 3 {
            return invalid("analyzer needs exactly three pooling stages");
        }
        if self.total_trim() != ANALYZER_TRIM {
            return invalid(format!("analyzer trim {} differs from {ANALYZER_TRIM}", self.total_trim()));
        }
        Ok(())
    }

    /// Output length for `input_len` samples, or `None` when too short.
    pub fn output_len(&self, input_len: usize) -> Option<usize> {
        let mut n = input_len;
        for (&k, &pool) in self.kernels.iter().zip(&self.pool_after) {
            n = n.checked_sub(k - 1)?;
            if pool {
                n /= 2;
            }
            if n == 0 {
                return None;
            }
        }
        Some(n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesizerConfig {
    pub stacks: usize,
    pub layers_per_stack: usize,
    pub dilations: Vec<usize>,
    pub residual_channels: usize,
    pub skip_channels: usize,
    pub kernel: usize,
}

impl SynthesizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stacks != 2 || self.layers_per_stack != 6 || self.dilations.len() != 6 {
            return invalid("synthesizer must have two stacks of six layers");
        }
        if self.residual_channels == 0 || self.skip_channels == 0 || self.kernel % 2 == 0 {
            return invalid("synthesizer widths must be positive and the kernel odd");
        }
        Ok(())
    }
}

/// Full-size configurations.
pub fn reference_configs() -> (AnalyzerConfig, SynthesizerConfig) {
    (analyzer_config(64), synthesizer_config(64, 64))
}

/// Reduced-width configurations for desk-scale runs.
pub fn toy_configs() -> (AnalyzerConfig, SynthesizerConfig) {
    (analyzer_config(12), synthesizer_config(8, 8))
}

pub fn analyzer_config(channels: usize) -> AnalyzerConfig {
    AnalyzerConfig {
        kernels: vec![33, 32, 32, 49, 49],
        pool_after: vec![true, true, true, false, false],
        channels,
    }
}

pub fn synthesizer_config(residual: usize, skip: usize) -> SynthesizerConfig {
    SynthesizerConfig {
        stacks: 2,
        layers_per_stack: 6,
        dilations: vec![1, 2, 4, 8, 16, 32],
        residual_channels: residual,
        skip_channels: skip,
        kernel: 3,
    }
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// How the analyzer's batch norms normalise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnUse {
    /// Statistics of the current batch (training before the freeze).
    Batch,
    /// Stored running statistics.
    Running,
}

#[derive(Clone, Debug)]
struct AnalyzerLayer {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
pub struct Analyzer<T: Real> {
    pub config: AnalyzerConfig,
    pub params: ParamStore<T>,
    pub running_mean: Vec<Vec<T>>,
    pub running_var: Vec<Vec<T>>,
    frozen: bool,
    layers: Vec<AnalyzerLayer>,
    head_w: ParamId,
    head_b: ParamId,
}

impl<T: Real> Analyzer<T> {
    pub fn new(config: AnalyzerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = config.channels;
        let mut layers = Vec::new();
        let mut cin = 1;
        for (i, &k) in config.kernels.iter().enumerate() {
            // He-style bound for leaky-ReLU fan-in
            let bound = (6.0 / (cin * k) as f64).sqrt();
            let w = params.add(&format!("analyzer.conv{i}.w"), uniform(&mut rng, &[c, cin, k], bound));
            let b = params.add(&format!("analyzer.conv{i}.b"), Tensor::zeros(&[c]));
            let gamma = params.add(&format!("analyzer.bn{i}.gamma"), Tensor::ones(&[c]));
            let beta = params.add(&format!("analyzer.bn{i}.beta"), Tensor::zeros(&[c]));
            layers.push(AnalyzerLayer { w, b, gamma, beta });
            cin = c;
        }
        let head_w = params.add("analyzer.head.w", uniform(&mut rng, &[1, c, 1], (3.0 / c as f64).sqrt()));
        let head_b = params.add("analyzer.head.b", Tensor::zeros(&[1]));
        let n = config.kernels.len();
        Ok(Self {
            running_mean: vec![vec![T::zero(); c]; n],
            running_var: vec![vec![T::one(); c]; n],
            config,
            params,
            frozen: false,
            layers,
            head_w,
            head_b,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Switches every batch norm to its running statistics for good.
    pub fn freeze_batchnorm(&mut self) {
        self.frozen = true;
    }

    /// Builds the network on `x` of shape `[batch, 1, time]`, returning
    /// `[batch, frames]` and the per-layer batch statistics in batch mode.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        binding: &Binding,
        x: Var,
        bn: BnUse,
    ) -> Result<(Var, Vec<BatchStats<T>>)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != 1 {
            return Err(GciError::Shape(format!("analyzer input must be [batch, 1, time], got {shape:?}")));
        }
        if self.config.output_len(shape[2]).is_none() {
            return Err(GciError::Shape(format!(
                "analyzer input of {} samples is shorter than the receptive field {}",
                shape[2],
                self.config.receptive_field()
            )));
        }
        let use_batch = bn == BnUse::Batch && !self.frozen;
        let mut h = x;
        let mut stats = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            h = g.conv1d(h, binding.var(layer.w), Some(binding.var(layer.b)), 1)?;
            let mode = if use_batch {
                BatchNormMode::Train { eps: BN_EPS }
            } else {
                BatchNormMode::Frozen {
                    mean: self.running_mean[i].clone(),
                    var: self.running_var[i].clone(),
                    eps: BN_EPS,
                }
            };
            let (y, s) = g.batch_norm(h, binding.var(layer.gamma), binding.var(layer.beta), &mode)?;
            stats.extend(s);
            h = g.leaky_relu(y, LEAKY_SLOPE);
            if self.config.pool_after[i] {
                h = g.avg_pool(h, 2)?;
            }
        }
        let out = g.conv1d(h, binding.var(self.head_w), Some(binding.var(self.head_b)), 1)?;
        let s = g.shape(out).to_vec();
        let out = g.reshape(out, &[s[0], s[2]])?;
        Ok((out, stats))
    }

    /// Folds batch statistics into the running statistics. Ignored once
    /// frozen.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<T>]) {
        if self.frozen || stats.len() != self.running_mean.len() {
            return;
        }
        let m = T::lit(BN_MOMENTUM);
        let one_m = T::lit(1.0 - BN_MOMENTUM);
        for (i, s) in stats.iter().enumerate() {
            for (r, &v) in self.running_mean[i].iter_mut().zip(&s.mean) {
                *r = m * *r + one_m * v;
            }
            for (r, &v) in self.running_var[i].iter_mut().zip(&s.var) {
                *r = m * *r + one_m * v;
            }
        }
    }

    /// Running statistics as named tensors for checkpoints.
    pub fn state_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (m, v)) in self.running_mean.iter().zip(&self.running_var).enumerate() {
            out.push((format!("analyzer.bn{i}.running_mean"), Tensor::new(&[m.len()], m.clone()).unwrap()));
            out.push((format!("analyzer.bn{i}.running_var"), Tensor::new(&[v.len()], v.clone()).unwrap()));
        }
        let flag = if self.frozen { T::one() } else { T::zero() };
        out.push(("analyzer.frozen".to_string(), Tensor::scalar(flag)));
        out
    }

    pub fn load_state_tensors<U: Real>(&mut self, tensors: &[(String, Tensor<U>)]) -> Result<()> {
        let find = |name: &str| -> Result<Vec<T>> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.data().iter().map(|v| T::lit(v.as_f64())).collect())
                .ok_or_else(|| GciError::Load { entry: name.to_string(), reason: "missing from checkpoint".into() })
        };
        for i in 0..self.running_mean.len() {
            let m = find(&format!("analyzer.bn{i}.running_mean"))?;
            let v = find(&format!("analyzer.bn{i}.running_var"))?;
            if m.len() != self.config.channels || v.len() != self.config.channels {
                return Err(GciError::Load { entry: format!("analyzer.bn{i}"), reason: "width mismatch".into() });
            }
            self.running_mean[i] = m;
            self.running_var[i] = v;
        }
        self.frozen = find("analyzer.frozen")?.first().is_some_and(|v| v.as_f64() > 0.5);
        Ok(())
    }

    /// Output samples for a padded input of `len` samples.
    pub fn padded_len_for(&self, n_out: usize) -> usize {
        ANALYZER_TRIM + 1 + DECIMATION * (n_out.max(1) - 1)
    }

    /// Runs the analyzer on a whole utterance with running statistics.
    /// The output has one sample per 8 audio samples, aligned with the
    /// rendered pulse targets.
    pub fn analyze(&self, audio: &AudioBuffer) -> Result<PulseSignal> {
        if audio.sample_rate != AUDIO_RATE {
            return invalid(format!("analyzer needs {AUDIO_RATE} Hz audio, got {} Hz", audio.sample_rate));
        }
        if audio.is_empty() {
            return invalid("empty audio");
        }
        let n_out = audio.len().div_ceil(DECIMATION);
        let total = self.padded_len_for(n_out);
        let mut x = vec![T::zero(); total];
        for (dst, &v) in x[ANALYZER_LEFT_PAD..].iter_mut().zip(&audio.samples) {
            *dst = T::lit(v);
        }
        let mut g = Graph::new();
        let binding = self.params.bind_detached(&mut g);
        let input = g.constant(Tensor::new(&[1, 1, total], x)?);
        let (out, _) = self.forward(&mut g, &binding, input, BnUse::Running)?;
        let samples: Vec<f64> = g.value(out).data().iter().map(|v| v.as_f64()).collect();
        debug_assert_eq!(samples.len(), n_out);
        PulseSignal::new(samples, PULSE_RATE, PULSE_OFFSET_S)
    }
}

#[derive(Clone, Debug)]
struct SynthLayer {
    dilation: usize,
    w_dil: ParamId,
    b_dil: ParamId,
    w_cond: ParamId,
    w_res: ParamId,
    b_res: ParamId,
    w_skip: ParamId,
    b_skip: ParamId,
}

#[derive(Clone, Debug)]
pub struct Synthesizer<T: Real> {
    pub config: SynthesizerConfig,
    pub params: ParamStore<T>,
    w_in: ParamId,
    b_in: ParamId,
    w_c: ParamId,
    b_c: ParamId,
    layers: Vec<SynthLayer>,
    w_h1: ParamId,
    b_h1: ParamId,
    w_h2: ParamId,
    b_h2: ParamId,
}

impl<T: Real> Synthesizer<T> {
    /// Random weights with a zero-initialised output layer.
    pub fn new(config: SynthesizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (r, s, k) = (config.residual_channels, config.skip_channels, config.kernel);
        let b = |fan_in: usize| (3.0 / fan_in as f64).sqrt();
        let w_in = p.add("synth.in.w", uniform(&mut rng, &[r, 2, 1], b(2)));
        let b_in = p.add("synth.in.b", Tensor::zeros(&[r]));
        let w_c = p.add("synth.cond.w", uniform(&mut rng, &[r, COND_CHANNELS, 1], b(COND_CHANNELS)));
        let b_c = p.add("synth.cond.b", Tensor::zeros(&[r]));
        let mut layers = Vec::new();
        for stack in 0..config.stacks {
            for (li, &dilation) in config.dilations.iter().enumerate() {
                let name = format!("synth.s{stack}.l{li}");
                layers.push(SynthLayer {
                    dilation,
                    w_dil: p.add(&format!("{name}.dil.w"), uniform(&mut rng, &[2 * r, r, k], b(r * k))),
                    b_dil: p.add(&format!("{name}.dil.b"), Tensor::zeros(&[2 * r])),
                    w_cond: p.add(&format!("{name}.cond.w"), uniform(&mut rng, &[2 * r, r, 1], b(r))),
                    w_res: p.add(&format!("{name}.res.w"), uniform(&mut rng, &[r, r, 1], b(r))),
                    b_res: p.add(&format!("{name}.res.b"), Tensor::zeros(&[r])),
                    w_skip: p.add(&format!("{name}.skip.w"), uniform(&mut rng, &[s, r, 1], b(r))),
                    b_skip: p.add(&format!("{name}.skip.b"), Tensor::zeros(&[s])),
                });
            }
        }
        let w_h1 = p.add("synth.head1.w", uniform(&mut rng, &[s, s, 1], b(s)));
        let b_h1 = p.add("synth.head1.b", Tensor::zeros(&[s]));
        let w_h2 = p.add("synth.head2.w", Tensor::zeros(&[1, s, 1]));
        let b_h2 = p.add("synth.head2.b", Tensor::zeros(&[1]));
        Ok(Self { config, params: p, w_in, b_in, w_c, b_c, layers, w_h1, b_h1, w_h2, b_h2 })
    }

    /// Non-autoregressive pass. `source` is `[batch, 2, time]` (pulses and
    /// noise), `cond` is `[batch, 80, time]`; returns `[batch, time]`.
    pub fn forward(&self, g: &mut Graph<T>, binding: &Binding, source: Var, cond: Var) -> Result<Var> {
        let (ss, cs) = (g.shape(source).to_vec(), g.shape(cond).to_vec());
        if ss.len() != 3 || ss[1] != 2 || cs.len() != 3 || cs[1] != COND_CHANNELS || ss[0] != cs[0] || ss[2] != cs[2] {
            return Err(GciError::Shape(format!(
                "synthesizer inputs must be [b, 2, t] and [b, {COND_CHANNELS}, t], got {ss:?} and {cs:?}"
            )));
        }
        let v = |id: ParamId| binding.var(id);
        let r = self.config.residual_channels;
        let half = self.config.kernel / 2;
        let mut h = g.conv1d(source, v(self.w_in), Some(v(self.b_in)), 1)?;
        let c = g.conv1d(cond, v(self.w_c), Some(v(self.b_c)), 1)?;
        let mut skip: Option<Var> = None;
        for layer in &self.layers {
            let pad = half * layer.dilation;
            let hp = g.pad(h, 2, pad, pad)?;
            let z = g.conv1d(hp, v(layer.w_dil), Some(v(layer.b_dil)), layer.dilation)?;
            let zc = g.conv1d(c, v(layer.w_cond), None, 1)?;
            let z = g.add(z, zc)?;
            let filter = g.slice(z, 1, 0, r)?;
            let gate = g.slice(z, 1, r, r)?;
            let u = g.gated(filter, gate)?;
            let sk = g.conv1d(u, v(layer.w_skip), Some(v(layer.b_skip)), 1)?;
            skip = Some(match skip {
                Some(acc) => g.add(acc, sk)?,
                None => sk,
            });
            let res = g.conv1d(u, v(layer.w_res), Some(v(layer.b_res)), 1)?;
            let sum = g.add(h, res)?;
            h = g.scale(sum, std::f64::consts::FRAC_1_SQRT_2);
        }
        let skip = skip.expect("at least one layer");
        let a = g.relu(skip);
        let a = g.conv1d(a, v(self.w_h1), Some(v(self.b_h1)), 1)?;
        let a = g.relu(a);
        let out = g.conv1d(a, v(self.w_h2), Some(v(self.b_h2)), 1)?;
        let s = g.shape(out).to_vec();
        Ok(g.reshape(out, &[s[0], s[2]])?)
    }

    /// Inference on plain buffers: pulses already at the audio rate.
    pub fn synthesize(&self, pulses16k: &[f64], noise: &[f64], cond: &[Vec<f64>]) -> Result<AudioBuffer> {
        let t = pulses16k.len();
        if noise.len() != t || cond.len() != COND_CHANNELS || cond.iter().any(|c| c.len() != t) {
            return Err(GciError::Shape("synthesizer inputs differ in length".into()));
        }
        let mut g = Graph::new();
        let binding = self.params.bind_detached(&mut g);
        let src: Vec<T> = pulses16k.iter().chain(noise).map(|&v| T::lit(v)).collect();
        let src = g.constant(Tensor::new(&[1, 2, t], src)?);
        let cv: Vec<T> = cond.iter().flatten().map(|&v| T::lit(v)).collect();
        let cv = g.constant(Tensor::new(&[1, COND_CHANNELS, t], cv)?);
        let out = self.forward(&mut g, &binding, src, cv)?;
        AudioBuffer::new(g.value(out).data().iter().map(|v| v.as_f64()).collect(), AUDIO_RATE)
    }
}

/// Per-sample conditioning rows for audio samples `start..start + len`:
/// 64 speech bands then 16 noise bands, linearly interpolated between
/// envelope frames and normalised.
pub fn conditioning(env64: &MelEnvelope, env16: &MelEnvelope, start: usize, len: usize) -> Vec<Vec<f64>> {
    let mut rows = vec![vec![0.0; len]; COND_CHANNELS];
    let fill = |env: &MelEnvelope, rows: &mut [Vec<f64>]| {
        let hop = env.frame_hop * AUDIO_RATE as f64;
        let last = env.frames.len().saturating_sub(1);
        for i in 0..len {
            let pos = ((start + i) as f64 / hop).min(last as f64);
            let f0 = pos.floor() as usize;
            let f1 = (f0 + 1).min(last);
            let w = pos - f0 as f64;
            for (b, row) in rows.iter_mut().enumerate() {
                let v = env.frames[f0][b] * (1.0 - w) + env.frames[f1][b] * w;
                row[i] = (v - ENV_CENTER) / ENV_SCALE;
            }
        }
    };
    let (speech, noise) = rows.split_at_mut(env64.n_bands);
    fill(env64, speech);
    fill(env16, noise);
    rows
}

/// Pulse-rate flow to audio-rate excitation: linear interpolation while
/// training, cubic splines at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Linear,
    Cubic,
}

/// Upsamples pulse knots (sample `k` at audio position `8k + 0.5`) to
/// `out_len` audio samples inside a graph; linear only, as it must be
/// differentiable.
pub fn upsample_pulses<T: Real>(g: &mut Graph<T>, pulses: Var, out_len: usize) -> Result<Var> {
    Ok(g.upsample_linear(pulses, DECIMATION, 0.5, out_len)?)
}

/// Plain-buffer upsampling of a pulse signal to the audio rate.
pub fn pulses_to_audio_rate(p: &PulseSignal, out_len: usize, interp: Interp) -> Result<Vec<f64>> {
    if p.is_empty() {
        return invalid("empty pulse signal");
    }
    let factor = DECIMATION;
    let dense = match interp {
        Interp::Linear => crate::dsp::upsample_linear(&p.samples, factor)?,
        Interp::Cubic => upsample_cubic(&p.samples, factor)?,
    };
    // dense[i] sits at audio position i + 0.5; resample to integer positions
    Ok((0..out_len)
        .map(|n| {
            let pos = (n as f64 - 0.5).max(0.0);
            let i = (pos.floor() as usize).min(dense.len() - 1);
            let j = (i + 1).min(dense.len() - 1);
            let w = pos - i as f64;
            dense[i] * (1.0 - w) + dense[j] * w
        })
        .collect())
}
