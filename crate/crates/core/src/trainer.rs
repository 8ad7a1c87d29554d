//! Separate pretraining of both networks on synthetic speech, then joint
//! refinement of the analysis-synthesis loop on unlabelled speech.

use std::fmt;
use std::path::{Path, PathBuf};

use gci_autodiff::{load_checkpoint, save_checkpoint, Adam, Graph, PlateauSchedule, Real, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{reference_pulses, UtteranceRecord};
use crate::dsp::{MelEnvelope, DECIMATION};
use crate::error::{invalid, GciError, Result};
use crate::gci_eval::{aggregate, evaluate_lists, flow_to_gci, Aggregate, FileReport, VoicingMask};
use crate::losses::{
    a_time_loss, as_time_loss, multi_res_spectral_mae, step2_real_bundle, weighted_sum, LossBreakdown, LossWeights,
    Networks, RealBatch, SpectralLossSpec,
};
use crate::models::{
    conditioning, upsample_pulses, Analyzer, AnalyzerConfig, BnUse, Synthesizer, SynthesizerConfig, ANALYZER_LEFT_PAD,
    ANALYZER_TRIM, COND_CHANNELS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzerPhase {
    pub batch: usize,
    pub segment_len: usize,
    pub epoch_updates: usize,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub epochs: usize,
    pub valid_batches: usize,
}

impl Default for AnalyzerPhase {
    fn default() -> Self {
        Self {
            batch: 128,
            segment_len: 3553,
            epoch_updates: 500,
            lr: 2e-4,
            plateau_factor: 0.75,
            plateau_patience: 10,
            epochs: 100,
            valid_batches: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthPhase {
    pub batch: usize,
    pub segment_len: usize,
    pub epoch_updates: usize,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub epochs: usize,
    pub valid_batches: usize,
}

impl Default for SynthPhase {
    fn default() -> Self {
        Self {
            batch: 8,
            segment_len: 2560,
            epoch_updates: 512,
            lr: 5e-5,
            plateau_factor: 0.75,
            plateau_patience: 10,
            min_lr: 1e-6,
            epochs: 100,
            valid_batches: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointPhase {
    pub batch: usize,
    pub segment_len: usize,
    pub epoch_updates: usize,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub epochs: usize,
    pub valid_batches: usize,
}

impl Default for JointPhase {
    fn default() -> Self {
        Self {
            batch: 8,
            segment_len: 3553,
            epoch_updates: 500,
            lr: 1e-5,
            plateau_factor: 0.75,
            plateau_patience: 10,
            epochs: 100,
            valid_batches: 4,
        }
    }
}

/// Abort joint training once voiced pulse energy stays below `ratio` of
/// its value at the start for `patience` consecutive steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseGuard {
    pub ratio: f64,
    pub patience: usize,
}

impl Default for CollapseGuard {
    fn default() -> Self {
        Self { ratio: 0.01, patience: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub step1_analyzer: AnalyzerPhase,
    pub step1_synth: SynthPhase,
    pub step2: JointPhase,
    pub weights: LossWeights,
    /// Drop the A-spectral term from joint training.
    pub ablate_a_spectral: bool,
    /// Run the synthetic A-time update in each joint step.
    pub synthetic_update: bool,
    pub collapse: CollapseGuard,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            step1_analyzer: AnalyzerPhase::default(),
            step1_synth: SynthPhase::default(),
            step2: JointPhase::default(),
            weights: LossWeights::default(),
            ablate_a_spectral: false,
            synthetic_update: true,
            collapse: CollapseGuard::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale schedule for reduced-width networks: shorter epochs,
    /// smaller batches and larger learning rates.
    pub fn toy() -> Self {
        Self {
            step1_analyzer: AnalyzerPhase {
                batch: 8,
                segment_len: ANALYZER_TRIM + 8 * 128,
                epoch_updates: 50,
                lr: 2e-3,
                plateau_patience: 3,
                epochs: 60,
                valid_batches: 2,
                ..AnalyzerPhase::default()
            },
            step1_synth: SynthPhase {
                batch: 4,
                epoch_updates: 25,
                lr: 1e-3,
                plateau_patience: 3,
                min_lr: 1e-5,
                epochs: 48,
                valid_batches: 2,
                ..SynthPhase::default()
            },
            step2: JointPhase {
                batch: 4,
                epoch_updates: 25,
                lr: 2e-4,
                plateau_patience: 3,
                epochs: 6,
                valid_batches: 2,
                ..JointPhase::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let a = &self.step1_analyzer;
        let s = &self.step1_synth;
        let j = &self.step2;
        if [a.batch, s.batch, j.batch].contains(&0) || [a.epoch_updates, s.epoch_updates, j.epoch_updates].contains(&0) {
            return invalid("batch sizes and epoch lengths must be at least 1");
        }
        for len in [a.segment_len, j.segment_len] {
            if len <= ANALYZER_TRIM || (len - ANALYZER_TRIM) % DECIMATION != 0 {
                return invalid(format!("segment length {len} must be {ANALYZER_TRIM} + 8n"));
            }
        }
        if s.segment_len < SpectralLossSpec::as_spectral().longest_window() {
            return invalid("synthesizer segments are shorter than the longest spectral window");
        }
        if j.segment_len - ANALYZER_TRIM < SpectralLossSpec::as_spectral().longest_window() {
            return invalid("joint segments leave the synthesizer less than the longest spectral window");
        }
        if !(self.collapse.ratio > 0.0) || self.collapse.patience == 0 {
            return invalid("collapse guard needs a positive ratio and patience");
        }
        Ok(())
    }

    /// Effective joint-training weights after the ablation flag.
    pub fn joint_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.ablate_a_spectral {
            w.a_spectral = 0.0;
        }
        w
    }

    /// Every field as `dotted.key = value` lines.
    pub fn to_kv(&self) -> String {
        kv_format(self)
    }

    /// Parses `key = value` lines over the defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        kv_apply(self, text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        kv_set(self, key, value)
    }
}

/// Any serialisable config as sorted `dotted.key = value` lines.
pub fn kv_format<C: Serialize>(cfg: &C) -> String {
    let v = serde_json::to_value(cfg).expect("config serialises");
    let mut lines = Vec::new();
    flatten("", &v, &mut lines);
    lines.join("\n") + "\n"
}

/// Applies `key = value` lines. Blank lines and `#` comments are
/// skipped; unknown keys are errors.
pub fn kv_apply<C: Serialize + DeserializeOwned>(cfg: &mut C, text: &str) -> Result<()> {
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return invalid(format!("expected key = value, got {line:?}"));
        };
        kv_set(cfg, k.trim(), v.trim())?;
    }
    Ok(())
}

/// Sets one dotted key from its text form, keeping the field's type.
pub fn kv_set<C: Serialize + DeserializeOwned>(cfg: &mut C, key: &str, value: &str) -> Result<()> {
    let mut root = serde_json::to_value(&*cfg).expect("config serialises");
    let mut slot = &mut root;
    for part in key.split('.') {
        slot = slot.get_mut(part).ok_or_else(|| GciError::InvalidArgument(format!("unknown config key {key:?}")))?;
    }
    *slot = match slot {
        Value::Bool(_) => Value::Bool(
            value.parse().map_err(|_| GciError::InvalidArgument(format!("{key}: expected true or false")))?,
        ),
        Value::Number(n) if n.is_u64() => Value::from(
            value
                .parse::<u64>()
                .map_err(|_| GciError::InvalidArgument(format!("{key}: expected an unsigned integer")))?,
        ),
        Value::Number(_) => Value::from(
            value.parse::<f64>().map_err(|_| GciError::InvalidArgument(format!("{key}: expected a number")))?,
        ),
        Value::String(_) => Value::String(value.to_string()),
        _ => return invalid(format!("{key} is not a leaf setting")),
    };
    *cfg = serde_json::from_value(root).map_err(|e| GciError::InvalidArgument(format!("{key}: {e}")))?;
    Ok(())
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => out.push(format!("{prefix} = {}", other.to_string().trim_matches('"'))),
    }
}

/// One record laid out for segment sampling: audio preceded by the
/// analyzer's left pad, with pulse-rate signals indexed so a segment
/// starting at padded sample `p` (a multiple of 8) maps output `j` to
/// pulse index `p / 8 + j`.
#[derive(Clone, Debug)]
pub struct PreparedRecord {
    pub id: String,
    pub speaker: String,
    pub audio_len: usize,
    pub padded: Vec<f64>,
    pub pulse_target: Option<Vec<f64>>,
    pub reference: Vec<f64>,
    pub voiced_knots: Vec<bool>,
    pub env64: MelEnvelope,
    pub env16: MelEnvelope,
}

impl PreparedRecord {
    pub fn new(r: &UtteranceRecord) -> Result<Self> {
        let mut padded = vec![0.0; ANALYZER_LEFT_PAD];
        padded.extend_from_slice(&r.audio.samples);
        padded.extend(std::iter::repeat_n(0.0, ANALYZER_TRIM - ANALYZER_LEFT_PAD));
        let reference = reference_pulses(r)?.samples;
        let voiced_knots = (0..reference.len()).map(|k| r.is_voiced_at((8 * k) as f64 / 16_000.0)).collect();
        Ok(Self {
            id: r.id.clone(),
            speaker: r.speaker_id.clone(),
            audio_len: r.audio.len(),
            padded,
            pulse_target: r.pulse_target.as_ref().map(|p| p.samples.clone()),
            reference,
            voiced_knots,
            env64: r.env64.clone(),
            env16: r.env16.clone(),
        })
    }

    /// Largest segment start (a multiple of 8) for `len` samples.
    fn max_start(&self, len: usize) -> usize {
        (self.padded.len().saturating_sub(len) / DECIMATION) * DECIMATION
    }

    fn segment(&self, start: usize, len: usize, out: &mut Vec<f64>) {
        out.extend((start..start + len).map(|i| self.padded.get(i).copied().unwrap_or(0.0)));
    }

    fn knots(src: &[f64], start: usize, n: usize, out: &mut Vec<f64>) {
        out.extend((start..start + n).map(|k| src.get(k).copied().unwrap_or(0.0)));
    }
}

pub fn prepare(records: &[UtteranceRecord]) -> Result<Vec<PreparedRecord>> {
    records.iter().map(PreparedRecord::new).collect()
}

fn step_rng(seed: u64, stream: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

const STREAM_ANALYZER: u64 = 1;
const STREAM_SYNTH: u64 = 2;
const STREAM_JOINT_REAL: u64 = 3;
const STREAM_JOINT_SYNTH: u64 = 4;
const STREAM_VALID: u64 = 5;
const STREAM_PROBE: u64 = 6;
const STREAM_RECALIBRATE: u64 = 7;

/// Record indices for one batch: distinct files whenever enough exist.
pub fn pick_files(rng: &mut ChaCha8Rng, n_records: usize, batch: usize) -> Vec<usize> {
    if n_records >= batch {
        sample(rng, n_records, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.random_range(0..n_records)).collect()
    }
}

fn pick_start(rng: &mut ChaCha8Rng, r: &PreparedRecord, len: usize) -> usize {
    DECIMATION * rng.random_range(0..=r.max_start(len) / DECIMATION)
}

/// Analyzer input `[batch, seg]` and target pulses `[batch, n_out]`.
#[derive(Clone, Debug)]
pub struct AnalyzerBatch {
    pub batch: usize,
    pub segment_len: usize,
    pub n_out: usize,
    pub audio: Vec<f64>,
    pub target: Vec<f64>,
}

pub fn analyzer_batch(
    records: &[PreparedRecord],
    rng: &mut ChaCha8Rng,
    batch: usize,
    segment_len: usize,
) -> Result<AnalyzerBatch> {
    if records.is_empty() {
        return invalid("no records to sample from");
    }
    let n_out = (segment_len - ANALYZER_TRIM - 1) / DECIMATION + 1;
    let mut audio = Vec::with_capacity(batch * segment_len);
    let mut target = Vec::with_capacity(batch * n_out);
    for i in pick_files(rng, records.len(), batch) {
        let r = &records[i];
        let Some(pt) = &r.pulse_target else {
            return invalid(format!("record {} has no pulse target", r.id));
        };
        let p = pick_start(rng, r, segment_len);
        r.segment(p, segment_len, &mut audio);
        PreparedRecord::knots(pt, p / DECIMATION, n_out, &mut target);
    }
    Ok(AnalyzerBatch { batch, segment_len, n_out, audio, target })
}

/// Synthesizer training batch: pulse knots `[batch, len/8 + 1]`, noise
/// and conditioning for `len` samples, and target audio.
#[derive(Clone, Debug)]
pub struct SynthBatch {
    pub batch: usize,
    pub len: usize,
    pub knots: Vec<f64>,
    pub noise: Vec<f64>,
    pub cond: Vec<f64>,
    pub target: Vec<f64>,
}

pub fn synth_batch(records: &[PreparedRecord], rng: &mut ChaCha8Rng, batch: usize, len: usize) -> Result<SynthBatch> {
    if records.is_empty() {
        return invalid("no records to sample from");
    }
    let n_knots = len / DECIMATION + 1;
    let mut out = SynthBatch {
        batch,
        len,
        knots: Vec::with_capacity(batch * n_knots),
        noise: Vec::with_capacity(batch * len),
        cond: Vec::with_capacity(batch * COND_CHANNELS * len),
        target: Vec::with_capacity(batch * len),
    };
    for i in pick_files(rng, records.len(), batch) {
        let r = &records[i];
        let Some(pt) = &r.pulse_target else {
            return invalid(format!("record {} has no pulse target", r.id));
        };
        // audio start q maps to padded start q + left pad
        let max_q = (r.audio_len.saturating_sub(len) / DECIMATION) * DECIMATION;
        let q = DECIMATION * rng.random_range(0..=max_q / DECIMATION);
        r.segment(q + ANALYZER_LEFT_PAD, len, &mut out.target);
        PreparedRecord::knots(pt, q / DECIMATION, n_knots, &mut out.knots);
        out.noise.extend((0..len).map(|_| rng.sample::<f64, _>(StandardNormal)));
        for row in conditioning(&r.env64, &r.env16, q, len) {
            out.cond.extend(row);
        }
    }
    Ok(out)
}

/// Joint-training batch plus the voicing of each analyzer output.
#[derive(Clone, Debug)]
pub struct JointRealBatch {
    pub real: RealBatch,
    pub voiced: Vec<bool>,
}

pub fn real_batch(
    records: &[PreparedRecord],
    rng: &mut ChaCha8Rng,
    batch: usize,
    segment_len: usize,
) -> Result<JointRealBatch> {
    if records.is_empty() {
        return invalid("no records to sample from");
    }
    let n_out = (segment_len - ANALYZER_TRIM - 1) / DECIMATION + 1;
    let syn = segment_len - ANALYZER_TRIM;
    let mut rb = RealBatch {
        batch,
        segment_len,
        audio: Vec::with_capacity(batch * segment_len),
        cond: Vec::with_capacity(batch * COND_CHANNELS * syn),
        noise: Vec::with_capacity(batch * syn),
        reference: Vec::with_capacity(batch * n_out),
    };
    let mut voiced = Vec::with_capacity(batch * n_out);
    for i in pick_files(rng, records.len(), batch) {
        let r = &records[i];
        let p = pick_start(rng, r, segment_len);
        r.segment(p, segment_len, &mut rb.audio);
        PreparedRecord::knots(&r.reference, p / DECIMATION, n_out, &mut rb.reference);
        let k0 = p / DECIMATION;
        voiced.extend((k0..k0 + n_out).map(|k| r.voiced_knots.get(k).copied().unwrap_or(false)));
        rb.noise.extend((0..syn).map(|_| rng.sample::<f64, _>(StandardNormal)));
        // the synthesizer window starts at audio sample p
        for row in conditioning(&r.env64, &r.env16, p, syn) {
            rb.cond.extend(row);
        }
    }
    Ok(JointRealBatch { real: rb, voiced })
}

/// Mean squared first difference of pulses over adjacent voiced outputs;
/// `None` when the batch holds no voiced pair.
pub fn pulse_energy(pulses: &[f64], voiced: &[bool], n_out: usize) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, v) in pulses.chunks(n_out).zip(voiced.chunks(n_out)) {
        for k in 1..p.len() {
            if v[k] && v[k - 1] {
                sum += (p[k] - p[k - 1]).powi(2);
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

fn constant<T: Real>(g: &mut Graph<T>, shape: &[usize], data: &[f64]) -> Result<gci_autodiff::Var> {
    Ok(g.constant(Tensor::new(shape, data.iter().map(|&v| T::lit(v)).collect())?))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub phase: String,
    pub step: u64,
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub lr_analyzer: Option<f64>,
    pub lr_synth: Option<f64>,
    pub validation: Option<f64>,
    pub pulse_energy: Option<f64>,
}

impl fmt::Display for TrainLogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = &self.losses;
        write!(
            f,
            "{} step={} epoch={} as_spectral={:.6} as_time={:.6} asa_time={:.6} a_spectral={:.6} a_time={:.6} total={:.6}",
            self.phase, self.step, self.epoch, l.as_spectral, l.as_time, l.asa_time, l.a_spectral, l.a_time, l.total
        )?;
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3e}"));
        write!(
            f,
            " lr_a={} lr_s={} valid={} energy={}",
            opt(self.lr_analyzer),
            opt(self.lr_synth),
            opt(self.validation),
            opt(self.pulse_energy)
        )
    }
}

/// Where and how often to write checkpoints.
#[derive(Clone, Debug, Default)]
pub struct CheckpointPolicy {
    pub dir: Option<PathBuf>,
    pub every_epochs: usize,
    /// Continue from `<phase>_last` when present.
    pub resume: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PhaseState {
    phase: String,
    step: u64,
    epoch: usize,
    lr_analyzer: f64,
    lr_synth: f64,
    #[serde(with = "unbounded")]
    plateau_best: f64,
    plateau_wait: usize,
    #[serde(with = "unbounded")]
    best_validation: f64,
    updates: u64,
    collapse_reference: Option<f64>,
    collapse_wait: usize,
}

/// JSON has no infinity; "no best value yet" is stored as null.
mod unbounded {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

fn state_path(dir: &Path, tag: &str) -> PathBuf {
    dir.join(format!("{tag}.state.json"))
}

fn ckpt_path(dir: &Path, tag: &str) -> PathBuf {
    dir.join(format!("{tag}.ckpt"))
}

fn write_state(dir: &Path, tag: &str, s: &PhaseState) -> Result<()> {
    let text = serde_json::to_string_pretty(s).map_err(|e| GciError::InvalidArgument(e.to_string()))?;
    std::fs::write(state_path(dir, tag), text)?;
    Ok(())
}

fn read_state(dir: &Path, tag: &str) -> Result<PhaseState> {
    let path = state_path(dir, tag);
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text)
        .map_err(|e| GciError::Load { entry: path.display().to_string(), reason: e.to_string() })
}

fn prefixed<T: Real>(prefix: &str, v: Vec<(String, Tensor<T>)>) -> Vec<(String, Tensor<T>)> {
    v.into_iter().map(|(n, t)| (format!("{prefix}{n}"), t)).collect()
}

fn strip<U: Real>(prefix: &str, v: &[(String, Tensor<U>)]) -> Vec<(String, Tensor<U>)> {
    v.iter().filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone()))).collect()
}

fn save_tensors<T: Real>(path: &Path, tensors: &[(String, Tensor<T>)]) -> Result<()> {
    let refs: Vec<(&str, &Tensor<T>)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    save_checkpoint(path, &refs)?;
    Ok(())
}

fn analyzer_tensors<T: Real>(a: &Analyzer<T>) -> Vec<(String, Tensor<T>)> {
    let mut out: Vec<(String, Tensor<T>)> = a.params.named().into_iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    out.extend(a.state_tensors());
    out
}

fn synth_tensors<T: Real>(s: &Synthesizer<T>) -> Vec<(String, Tensor<T>)> {
    s.params.named().into_iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
}

/// Writes an analyzer (weights and batch-norm state) to a checkpoint.
pub fn save_analyzer<T: Real>(path: &Path, a: &Analyzer<T>) -> Result<()> {
    save_tensors(path, &analyzer_tensors(a))
}

pub fn load_analyzer(path: &Path, config: AnalyzerConfig) -> Result<Analyzer<f32>> {
    let tensors = load_checkpoint(path)?;
    let mut a = Analyzer::new(config, 0)?;
    let own: Vec<_> = tensors.iter().filter(|(n, _)| a.params.id(n).is_some()).cloned().collect();
    a.params.load_named(&own)?;
    a.load_state_tensors(&tensors)?;
    Ok(a)
}

pub fn save_synthesizer<T: Real>(path: &Path, s: &Synthesizer<T>) -> Result<()> {
    save_tensors(path, &synth_tensors(s))
}

pub fn load_synthesizer(path: &Path, config: SynthesizerConfig) -> Result<Synthesizer<f32>> {
    let tensors = load_checkpoint(path)?;
    let mut s = Synthesizer::new(config, 0)?;
    let own: Vec<_> = tensors.iter().filter(|(n, _)| s.params.id(n).is_some()).cloned().collect();
    s.params.load_named(&own)?;
    Ok(s)
}

/// Step 1 for the analyzer: A-time on synthetic speech with batch
/// statistics.
#[derive(Clone, Debug)]
pub struct AnalyzerTrainer<T: Real> {
    pub analyzer: Analyzer<T>,
    pub adam: Adam<T>,
    pub schedule: PlateauSchedule,
    pub cfg: AnalyzerPhase,
    pub seed: u64,
    pub step: u64,
    pub epoch: usize,
    pub best_validation: f64,
}

impl<T: Real> AnalyzerTrainer<T> {
    pub fn new(analyzer: Analyzer<T>, cfg: AnalyzerPhase, seed: u64) -> Result<Self> {
        if analyzer.is_frozen() {
            return invalid("analyzer pretraining needs live batch statistics");
        }
        let adam = Adam::new(&analyzer.params, cfg.lr);
        let schedule = PlateauSchedule::new(cfg.plateau_factor, cfg.plateau_patience, None)?;
        Ok(Self { analyzer, adam, schedule, cfg, seed, step: 0, epoch: 0, best_validation: f64::INFINITY })
    }

    /// One update; returns the A-time loss before it.
    pub fn train_step(&mut self, train: &[PreparedRecord]) -> Result<f64> {
        let mut rng = step_rng(self.seed, STREAM_ANALYZER, self.step);
        let b = analyzer_batch(train, &mut rng, self.cfg.batch, self.cfg.segment_len)?;
        let mut g = Graph::new();
        let binding = self.analyzer.params.bind(&mut g);
        let x = constant(&mut g, &[b.batch, 1, b.segment_len], &b.audio)?;
        let (y, stats) = self.analyzer.forward(&mut g, &binding, x, BnUse::Batch)?;
        let t = constant(&mut g, &[b.batch, b.n_out], &b.target)?;
        let loss = a_time_loss(&mut g, y, t)?;
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(GciError::Collapse(format!("non-finite analyzer loss at step {}", self.step)));
        }
        g.backward(loss)?;
        self.analyzer.params.accumulate_grads(&g, &binding);
        self.analyzer.update_running_stats(&stats);
        self.adam.step(&mut self.analyzer.params);
        self.step += 1;
        Ok(value)
    }

    /// A-time with running statistics on fixed validation batches.
    pub fn validate(&self, valid: &[PreparedRecord]) -> Result<f64> {
        analyzer_validation(&self.analyzer, valid, self.cfg.valid_batches, self.cfg.batch, self.cfg.segment_len, self.seed)
    }

    fn state(&self) -> PhaseState {
        PhaseState {
            phase: "analyzer".into(),
            step: self.step,
            epoch: self.epoch,
            lr_analyzer: self.adam.learning_rate,
            lr_synth: 0.0,
            plateau_best: self.schedule.best(),
            plateau_wait: self.schedule.epochs_since_improvement(),
            best_validation: self.best_validation,
            updates: self.adam.step_count(),
            collapse_reference: None,
            collapse_wait: 0,
        }
    }

    pub fn save(&self, dir: &Path, tag: &str) -> Result<()> {
        let mut t = analyzer_tensors(&self.analyzer);
        t.extend(prefixed("adam.", self.adam.state_tensors(&self.analyzer.params)));
        save_tensors(&ckpt_path(dir, tag), &t)?;
        write_state(dir, tag, &self.state())
    }

    pub fn load(&mut self, dir: &Path, tag: &str) -> Result<()> {
        let tensors = load_checkpoint(&ckpt_path(dir, tag))?;
        let own: Vec<_> = tensors.iter().filter(|(n, _)| self.analyzer.params.id(n).is_some()).cloned().collect();
        self.analyzer.params.load_named(&own)?;
        self.analyzer.load_state_tensors(&tensors)?;
        self.adam.load_state_tensors(&self.analyzer.params, &strip("adam.", &tensors))?;
        let s = read_state(dir, tag)?;
        self.step = s.step;
        self.epoch = s.epoch;
        self.adam.learning_rate = s.lr_analyzer;
        self.schedule.restore(s.plateau_best, s.plateau_wait);
        self.best_validation = s.best_validation;
        Ok(())
    }
}

fn analyzer_validation<T: Real>(
    analyzer: &Analyzer<T>,
    valid: &[PreparedRecord],
    n_batches: usize,
    batch: usize,
    segment_len: usize,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..n_batches.max(1) {
        let mut rng = step_rng(seed, STREAM_VALID, i as u64);
        let b = analyzer_batch(valid, &mut rng, batch, segment_len)?;
        let mut g = Graph::new();
        let binding = analyzer.params.bind_detached(&mut g);
        let x = constant(&mut g, &[b.batch, 1, b.segment_len], &b.audio)?;
        let (y, _) = analyzer.forward(&mut g, &binding, x, BnUse::Running)?;
        let t = constant(&mut g, &[b.batch, b.n_out], &b.target)?;
        let loss = a_time_loss(&mut g, y, t)?;
        total += g.value(loss).item().as_f64();
    }
    Ok(total / n_batches.max(1) as f64)
}

/// Replaces the analyzer's running batch-norm statistics with their plain
/// average over `batches` fresh training batches at the current weights.
/// The momentum estimate lags behind the weights while they still move.
pub fn recalibrate_batchnorm<T: Real>(
    analyzer: &mut Analyzer<T>,
    records: &[PreparedRecord],
    batches: usize,
    batch: usize,
    segment_len: usize,
    seed: u64,
) -> Result<()> {
    if analyzer.is_frozen() {
        return invalid("cannot recalibrate a frozen analyzer");
    }
    if batches == 0 {
        return Ok(());
    }
    let mut mean: Vec<Vec<f64>> = analyzer.running_mean.iter().map(|m| vec![0.0; m.len()]).collect();
    let mut var = mean.clone();
    for i in 0..batches {
        let mut rng = step_rng(seed, STREAM_RECALIBRATE, i as u64);
        let b = analyzer_batch(records, &mut rng, batch, segment_len)?;
        let mut g = Graph::new();
        let binding = analyzer.params.bind_detached(&mut g);
        let x = constant(&mut g, &[b.batch, 1, b.segment_len], &b.audio)?;
        let (_, stats) = analyzer.forward(&mut g, &binding, x, BnUse::Batch)?;
        for (l, st) in stats.iter().enumerate() {
            for (acc, v) in mean[l].iter_mut().zip(&st.mean) {
                *acc += v.as_f64();
            }
            for (acc, v) in var[l].iter_mut().zip(&st.var) {
                *acc += v.as_f64();
            }
        }
    }
    let n = batches as f64;
    for l in 0..mean.len() {
        analyzer.running_mean[l] = mean[l].iter().map(|v| T::lit(v / n)).collect();
        analyzer.running_var[l] = var[l].iter().map(|v| T::lit(v / n)).collect();
    }
    Ok(())
}

/// Step 1 for the synthesizer: ground-truth pulses to speech under the
/// AS-spectral and AS-time losses.
#[derive(Clone, Debug)]
pub struct SynthTrainer<T: Real> {
    pub synth: Synthesizer<T>,
    pub adam: Adam<T>,
    pub schedule: PlateauSchedule,
    pub cfg: SynthPhase,
    pub weights: LossWeights,
    pub seed: u64,
    pub step: u64,
    pub epoch: usize,
    pub best_validation: f64,
}

fn synth_losses<T: Real>(
    g: &mut Graph<T>,
    synth: &Synthesizer<T>,
    binding: &gci_autodiff::Binding,
    b: &SynthBatch,
    w: &LossWeights,
) -> Result<(gci_autodiff::Var, LossBreakdown)> {
    let knots = constant(g, &[b.batch, b.len / DECIMATION + 1], &b.knots)?;
    let exc = upsample_pulses(g, knots, b.len)?;
    let exc = g.reshape(exc, &[b.batch, 1, b.len])?;
    let cond = constant(g, &[b.batch, COND_CHANNELS, b.len], &b.cond)?;
    let target = constant(g, &[b.batch, b.len], &b.target)?;
    let mut terms = Vec::new();
    let mut br = LossBreakdown::default();
    if w.as_spectral > 0.0 {
        let noise = constant(g, &[b.batch, 1, b.len], &b.noise)?;
        let src = g.concat(&[exc, noise], 1)?;
        let y = synth.forward(g, binding, src, cond)?;
        let l = multi_res_spectral_mae(g, y, target, &SpectralLossSpec::as_spectral())?;
        br.as_spectral = g.value(l).item().as_f64();
        terms.push((l, w.as_spectral));
    }
    if w.as_time > 0.0 {
        let zeros = g.constant(Tensor::zeros(&[b.batch, 1, b.len]));
        let src = g.concat(&[exc, zeros], 1)?;
        let y = synth.forward(g, binding, src, cond)?;
        let l = as_time_loss(g, y, target)?;
        br.as_time = g.value(l).item().as_f64();
        terms.push((l, w.as_time));
    }
    let total = weighted_sum(g, &terms)?;
    br.total = g.value(total).item().as_f64();
    Ok((total, br))
}

impl<T: Real> SynthTrainer<T> {
    pub fn new(synth: Synthesizer<T>, cfg: SynthPhase, weights: LossWeights, seed: u64) -> Result<Self> {
        let adam = Adam::new(&synth.params, cfg.lr);
        let schedule = PlateauSchedule::new(cfg.plateau_factor, cfg.plateau_patience, Some(cfg.min_lr))?;
        Ok(Self { synth, adam, schedule, cfg, weights, seed, step: 0, epoch: 0, best_validation: f64::INFINITY })
    }

    pub fn train_step(&mut self, train: &[PreparedRecord]) -> Result<LossBreakdown> {
        let mut rng = step_rng(self.seed, STREAM_SYNTH, self.step);
        let b = synth_batch(train, &mut rng, self.cfg.batch, self.cfg.segment_len)?;
        let mut g = Graph::new();
        let binding = self.synth.params.bind(&mut g);
        let (loss, br) = synth_losses(&mut g, &self.synth, &binding, &b, &self.weights)?;
        if !br.total.is_finite() {
            return Err(GciError::Collapse(format!("non-finite synthesizer loss at step {}", self.step)));
        }
        g.backward(loss)?;
        self.synth.params.accumulate_grads(&g, &binding);
        self.adam.step(&mut self.synth.params);
        self.step += 1;
        Ok(br)
    }

    pub fn validate(&self, valid: &[PreparedRecord]) -> Result<f64> {
        let n = self.cfg.valid_batches.max(1);
        let mut total = 0.0;
        for i in 0..n {
            let mut rng = step_rng(self.seed, STREAM_VALID, i as u64);
            let b = synth_batch(valid, &mut rng, self.cfg.batch, self.cfg.segment_len)?;
            let mut g = Graph::new();
            let binding = self.synth.params.bind_detached(&mut g);
            total += synth_losses(&mut g, &self.synth, &binding, &b, &self.weights)?.1.total;
        }
        Ok(total / n as f64)
    }

    fn state(&self) -> PhaseState {
        PhaseState {
            phase: "synth".into(),
            step: self.step,
            epoch: self.epoch,
            lr_analyzer: 0.0,
            lr_synth: self.adam.learning_rate,
            plateau_best: self.schedule.best(),
            plateau_wait: self.schedule.epochs_since_improvement(),
            best_validation: self.best_validation,
            updates: self.adam.step_count(),
            collapse_reference: None,
            collapse_wait: 0,
        }
    }

    pub fn save(&self, dir: &Path, tag: &str) -> Result<()> {
        let mut t = synth_tensors(&self.synth);
        t.extend(prefixed("adam.", self.adam.state_tensors(&self.synth.params)));
        save_tensors(&ckpt_path(dir, tag), &t)?;
        write_state(dir, tag, &self.state())
    }

    pub fn load(&mut self, dir: &Path, tag: &str) -> Result<()> {
        let tensors = load_checkpoint(&ckpt_path(dir, tag))?;
        let own: Vec<_> = tensors.iter().filter(|(n, _)| self.synth.params.id(n).is_some()).cloned().collect();
        self.synth.params.load_named(&own)?;
        self.adam.load_state_tensors(&self.synth.params, &strip("adam.", &tensors))?;
        let s = read_state(dir, tag)?;
        self.step = s.step;
        self.epoch = s.epoch;
        self.adam.learning_rate = s.lr_synth;
        self.schedule.restore(s.plateau_best, s.plateau_wait);
        self.best_validation = s.best_validation;
        Ok(())
    }
}

/// Outcome of one joint step.
#[derive(Clone, Debug, PartialEq)]
pub struct JointStepReport {
    pub losses: LossBreakdown,
    pub pulse_energy: Option<f64>,
    pub updates: u64,
}

/// Step 2: each step updates both networks on unlabelled speech, then
/// the analyzer alone on synthetic speech.
#[derive(Clone, Debug)]
pub struct JointTrainer<T: Real> {
    pub analyzer: Analyzer<T>,
    pub synth: Synthesizer<T>,
    pub adam_analyzer: Adam<T>,
    pub adam_synth: Adam<T>,
    pub schedule: PlateauSchedule,
    pub cfg: TrainConfig,
    pub step: u64,
    pub epoch: usize,
    /// Optimizer updates applied so far across both kinds.
    pub updates: u64,
    pub best_validation: f64,
    pub collapse_reference: Option<f64>,
    pub collapse_wait: usize,
}

impl<T: Real> JointTrainer<T> {
    pub fn new(analyzer: Analyzer<T>, synth: Synthesizer<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if !analyzer.is_frozen() {
            return invalid("joint training needs the analyzer's batch norm frozen");
        }
        let lr = cfg.step2.lr;
        Ok(Self {
            adam_analyzer: Adam::new(&analyzer.params, lr),
            adam_synth: Adam::new(&synth.params, lr),
            schedule: PlateauSchedule::new(cfg.step2.plateau_factor, cfg.step2.plateau_patience, None)?,
            analyzer,
            synth,
            cfg,
            step: 0,
            epoch: 0,
            updates: 0,
            best_validation: f64::INFINITY,
            collapse_reference: None,
            collapse_wait: 0,
        })
    }

    fn n_out(&self) -> usize {
        (self.cfg.step2.segment_len - ANALYZER_TRIM - 1) / DECIMATION + 1
    }

    /// Voiced pulse energy of the current analyzer on a fixed probe batch.
    pub fn probe_energy(&self, real: &[PreparedRecord]) -> Result<Option<f64>> {
        let mut rng = step_rng(self.cfg.seed, STREAM_PROBE, 0);
        let jb = real_batch(real, &mut rng, self.cfg.step2.batch.max(4), self.cfg.step2.segment_len)?;
        let b = &jb.real;
        let mut g = Graph::new();
        let binding = self.analyzer.params.bind_detached(&mut g);
        let x = constant(&mut g, &[b.batch, 1, b.segment_len], &b.audio)?;
        let (y, _) = self.analyzer.forward(&mut g, &binding, x, BnUse::Running)?;
        let p: Vec<f64> = g.value(y).data().iter().map(|v| v.as_f64()).collect();
        Ok(pulse_energy(&p, &jb.voiced, self.n_out()))
    }

    /// Records the collapse reference from the pretrained analyzer.
    pub fn set_collapse_reference(&mut self, real: &[PreparedRecord]) -> Result<()> {
        self.collapse_reference = self.probe_energy(real)?;
        Ok(())
    }

    pub fn train_step(&mut self, real: &[PreparedRecord], synthetic: &[PreparedRecord]) -> Result<JointStepReport> {
        if self.collapse_reference.is_none() {
            self.set_collapse_reference(real)?;
        }
        let weights = self.cfg.joint_weights();
        let seg = self.cfg.step2.segment_len;

        // update 1: analysis-synthesis losses on unlabelled speech
        let mut rng = step_rng(self.cfg.seed, STREAM_JOINT_REAL, self.step);
        let jb = real_batch(real, &mut rng, self.cfg.step2.batch, seg)?;
        let mut g = Graph::new();
        let a_bind = self.analyzer.params.bind(&mut g);
        let re_bind = self.analyzer.params.bind_detached(&mut g);
        let s_bind = self.synth.params.bind(&mut g);
        let nets = Networks {
            analyzer: &self.analyzer,
            analyzer_binding: &a_bind,
            reanalyzer_binding: &re_bind,
            synthesizer: &self.synth,
            synth_binding: &s_bind,
        };
        let (total, mut br) = step2_real_bundle(&mut g, &nets, &jb.real, &weights)?;
        if !br.total.is_finite() {
            return Err(GciError::Collapse(format!("non-finite joint loss at step {}", self.step)));
        }
        // analyzer output on this batch, for the collapse statistic
        let energy = {
            let mut g2 = Graph::new();
            let b = self.analyzer.params.bind_detached(&mut g2);
            let x = constant(&mut g2, &[jb.real.batch, 1, seg], &jb.real.audio)?;
            let (y, _) = self.analyzer.forward(&mut g2, &b, x, BnUse::Running)?;
            let p: Vec<f64> = g2.value(y).data().iter().map(|v| v.as_f64()).collect();
            pulse_energy(&p, &jb.voiced, self.n_out())
        };
        g.backward(total)?;
        self.analyzer.params.accumulate_grads(&g, &a_bind);
        self.synth.params.accumulate_grads(&g, &s_bind);
        self.adam_analyzer.step(&mut self.analyzer.params);
        self.adam_synth.step(&mut self.synth.params);
        self.updates += 1;

        // update 2: conventional analyzer step on synthetic speech
        if self.cfg.synthetic_update && weights.a_time > 0.0 {
            let mut rng = step_rng(self.cfg.seed, STREAM_JOINT_SYNTH, self.step);
            let b = analyzer_batch(synthetic, &mut rng, self.cfg.step2.batch, seg)?;
            let mut g = Graph::new();
            let bind = self.analyzer.params.bind(&mut g);
            let x = constant(&mut g, &[b.batch, 1, b.segment_len], &b.audio)?;
            let (y, _) = self.analyzer.forward(&mut g, &bind, x, BnUse::Running)?;
            let t = constant(&mut g, &[b.batch, b.n_out], &b.target)?;
            let l = a_time_loss(&mut g, y, t)?;
            br.a_time = g.value(l).item().as_f64();
            let scaled = g.scale(l, weights.a_time);
            g.backward(scaled)?;
            self.analyzer.params.accumulate_grads(&g, &bind);
            self.adam_analyzer.step(&mut self.analyzer.params);
            self.updates += 1;
        }
        self.step += 1;

        if let (Some(e), Some(reference)) = (energy, self.collapse_reference) {
            if e < self.cfg.collapse.ratio * reference {
                self.collapse_wait += 1;
            } else {
                self.collapse_wait = 0;
            }
            if self.collapse_wait >= self.cfg.collapse.patience {
                return Err(GciError::Collapse(format!(
                    "voiced pulse energy {e:.3e} below {:.0}% of its starting value {reference:.3e} for {} steps (step {})",
                    self.cfg.collapse.ratio * 100.0,
                    self.collapse_wait,
                    self.step
                )));
            }
        }
        Ok(JointStepReport { losses: br, pulse_energy: energy, updates: self.updates })
    }

    /// Joint real-data total on fixed held-out batches.
    pub fn validate(&self, valid: &[PreparedRecord]) -> Result<f64> {
        let weights = self.cfg.joint_weights();
        let n = self.cfg.step2.valid_batches.max(1);
        let mut total = 0.0;
        for i in 0..n {
            let mut rng = step_rng(self.cfg.seed, STREAM_VALID, i as u64);
            let jb = real_batch(valid, &mut rng, self.cfg.step2.batch, self.cfg.step2.segment_len)?;
            let mut g = Graph::new();
            let a = self.analyzer.params.bind_detached(&mut g);
            let s = self.synth.params.bind_detached(&mut g);
            let nets = Networks {
                analyzer: &self.analyzer,
                analyzer_binding: &a,
                reanalyzer_binding: &a,
                synthesizer: &self.synth,
                synth_binding: &s,
            };
            total += step2_real_bundle(&mut g, &nets, &jb.real, &weights)?.1.total;
        }
        Ok(total / n as f64)
    }

    fn state(&self) -> PhaseState {
        PhaseState {
            phase: "joint".into(),
            step: self.step,
            epoch: self.epoch,
            lr_analyzer: self.adam_analyzer.learning_rate,
            lr_synth: self.adam_synth.learning_rate,
            plateau_best: self.schedule.best(),
            plateau_wait: self.schedule.epochs_since_improvement(),
            best_validation: self.best_validation,
            updates: self.updates,
            collapse_reference: self.collapse_reference,
            collapse_wait: self.collapse_wait,
        }
    }

    pub fn save(&self, dir: &Path, tag: &str) -> Result<()> {
        let mut t = analyzer_tensors(&self.analyzer);
        t.extend(synth_tensors(&self.synth));
        t.extend(prefixed("adam_a.", self.adam_analyzer.state_tensors(&self.analyzer.params)));
        t.extend(prefixed("adam_s.", self.adam_synth.state_tensors(&self.synth.params)));
        save_tensors(&ckpt_path(dir, tag), &t)?;
        write_state(dir, tag, &self.state())
    }

    pub fn load(&mut self, dir: &Path, tag: &str) -> Result<()> {
        let tensors = load_checkpoint(&ckpt_path(dir, tag))?;
        let own_a: Vec<_> = tensors.iter().filter(|(n, _)| self.analyzer.params.id(n).is_some()).cloned().collect();
        let own_s: Vec<_> = tensors.iter().filter(|(n, _)| self.synth.params.id(n).is_some()).cloned().collect();
        self.analyzer.params.load_named(&own_a)?;
        self.analyzer.load_state_tensors(&tensors)?;
        self.synth.params.load_named(&own_s)?;
        self.adam_analyzer.load_state_tensors(&self.analyzer.params, &strip("adam_a.", &tensors))?;
        self.adam_synth.load_state_tensors(&self.synth.params, &strip("adam_s.", &tensors))?;
        let s = read_state(dir, tag)?;
        self.step = s.step;
        self.epoch = s.epoch;
        self.updates = s.updates;
        self.adam_analyzer.learning_rate = s.lr_analyzer;
        self.adam_synth.learning_rate = s.lr_synth;
        self.schedule.restore(s.plateau_best, s.plateau_wait);
        self.best_validation = s.best_validation;
        self.collapse_reference = s.collapse_reference;
        self.collapse_wait = s.collapse_wait;
        Ok(())
    }
}

/// Sink for training log lines.
pub type LogSink<'a> = &'a mut dyn FnMut(&TrainLogEntry);

fn resume_possible(policy: &CheckpointPolicy, tag: &str) -> Option<PathBuf> {
    let dir = policy.dir.as_ref()?;
    (policy.resume && ckpt_path(dir, tag).exists() && state_path(dir, tag).exists()).then(|| dir.clone())
}

fn checkpoint_due(policy: &CheckpointPolicy, epoch: usize) -> bool {
    policy.every_epochs > 0 && epoch % policy.every_epochs == 0
}

/// Runs the analyzer's Step-1 schedule, then freezes its batch norm.
pub fn pretrain_analyzer(
    analyzer: Analyzer<f32>,
    train: &[PreparedRecord],
    valid: &[PreparedRecord],
    cfg: &TrainConfig,
    policy: &CheckpointPolicy,
    log: LogSink<'_>,
) -> Result<Analyzer<f32>> {
    if train.is_empty() {
        return invalid("analyzer pretraining needs synthetic training records");
    }
    if train.iter().chain(valid).any(|r| r.pulse_target.is_none()) {
        return invalid("analyzer pretraining needs a pulse target for every record");
    }
    let valid = if valid.is_empty() { train } else { valid };
    let phase = &cfg.step1_analyzer;
    let mut t = AnalyzerTrainer::new(analyzer, phase.clone(), cfg.seed)?;
    if let Some(dir) = resume_possible(policy, "analyzer_last") {
        t.load(&dir, "analyzer_last")?;
        log::info!("resumed analyzer pretraining at epoch {}", t.epoch);
    }
    while t.epoch < phase.epochs {
        let mut seen = Vec::with_capacity(phase.epoch_updates);
        for _ in 0..phase.epoch_updates {
            let loss = t.train_step(train)?;
            seen.push(LossBreakdown { a_time: loss, total: loss, ..Default::default() });
            log(&TrainLogEntry {
                phase: "analyzer".into(),
                step: t.step,
                epoch: t.epoch,
                losses: seen[seen.len() - 1],
                lr_analyzer: Some(t.adam.learning_rate),
                lr_synth: None,
                validation: None,
                pulse_energy: None,
            });
        }
        let v = t.validate(valid)?;
        t.schedule.observe(v, &mut t.adam.learning_rate);
        t.epoch += 1;
        log(&TrainLogEntry {
            phase: "analyzer-epoch".into(),
            step: t.step,
            epoch: t.epoch,
            losses: LossBreakdown::mean(&seen),
            lr_analyzer: Some(t.adam.learning_rate),
            lr_synth: None,
            validation: Some(v),
            pulse_energy: None,
        });
        if let Some(dir) = &policy.dir {
            if v < t.best_validation {
                t.best_validation = v;
                save_analyzer(&ckpt_path(dir, "analyzer_best"), &t.analyzer)?;
            }
            if checkpoint_due(policy, t.epoch) {
                t.save(dir, "analyzer_last")?;
            }
        }
    }
    let mut analyzer = t.analyzer;
    analyzer.freeze_batchnorm();
    if let Some(dir) = &policy.dir {
        save_analyzer(&ckpt_path(dir, "analyzer"), &analyzer)?;
    }
    Ok(analyzer)
}

pub fn pretrain_synthesizer(
    synth: Synthesizer<f32>,
    train: &[PreparedRecord],
    valid: &[PreparedRecord],
    cfg: &TrainConfig,
    policy: &CheckpointPolicy,
    log: LogSink<'_>,
) -> Result<Synthesizer<f32>> {
    if train.is_empty() {
        return invalid("synthesizer pretraining needs synthetic training records");
    }
    if train.iter().chain(valid).any(|r| r.pulse_target.is_none()) {
        return invalid("synthesizer pretraining needs ground-truth pulses for every record");
    }
    let valid = if valid.is_empty() { train } else { valid };
    let phase = &cfg.step1_synth;
    let mut t = SynthTrainer::new(synth, phase.clone(), cfg.weights, cfg.seed)?;
    if let Some(dir) = resume_possible(policy, "synth_last") {
        t.load(&dir, "synth_last")?;
        log::info!("resumed synthesizer pretraining at epoch {}", t.epoch);
    }
    while t.epoch < phase.epochs {
        let mut seen = Vec::with_capacity(phase.epoch_updates);
        for _ in 0..phase.epoch_updates {
            let br = t.train_step(train)?;
            seen.push(br);
            log(&TrainLogEntry {
                phase: "synth".into(),
                step: t.step,
                epoch: t.epoch,
                losses: br,
                lr_analyzer: None,
                lr_synth: Some(t.adam.learning_rate),
                validation: None,
                pulse_energy: None,
            });
        }
        let v = t.validate(valid)?;
        t.schedule.observe(v, &mut t.adam.learning_rate);
        t.epoch += 1;
        log(&TrainLogEntry {
            phase: "synth-epoch".into(),
            step: t.step,
            epoch: t.epoch,
            losses: LossBreakdown::mean(&seen),
            lr_analyzer: None,
            lr_synth: Some(t.adam.learning_rate),
            validation: Some(v),
            pulse_energy: None,
        });
        if let Some(dir) = &policy.dir {
            if v < t.best_validation {
                t.best_validation = v;
                save_synthesizer(&ckpt_path(dir, "synth_best"), &t.synth)?;
            }
            if checkpoint_due(policy, t.epoch) {
                t.save(dir, "synth_last")?;
            }
        }
    }
    if let Some(dir) = &policy.dir {
        save_synthesizer(&ckpt_path(dir, "synth"), &t.synth)?;
    }
    Ok(t.synth)
}

/// Refined networks after joint training.
pub struct JointOutcome {
    pub analyzer: Analyzer<f32>,
    pub synth: Synthesizer<f32>,
    pub steps: u64,
    pub updates: u64,
}

/// Step 2 over `real` (unlabelled) and `synthetic` (labelled) records.
/// Collapse aborts with [`GciError::Collapse`].
pub fn joint_train(
    analyzer: Analyzer<f32>,
    synth: Synthesizer<f32>,
    real_train: &[PreparedRecord],
    real_valid: &[PreparedRecord],
    synthetic: &[PreparedRecord],
    cfg: &TrainConfig,
    policy: &CheckpointPolicy,
    log: LogSink<'_>,
) -> Result<JointOutcome> {
    if real_train.is_empty() {
        return invalid("joint training needs unlabelled training records");
    }
    if cfg.synthetic_update && synthetic.iter().any(|r| r.pulse_target.is_none()) {
        return invalid("the synthetic update needs ground-truth pulses");
    }
    if cfg.synthetic_update && synthetic.is_empty() {
        return invalid("the synthetic update needs synthetic records");
    }
    let valid = if real_valid.is_empty() { real_train } else { real_valid };
    let mut t = JointTrainer::new(analyzer, synth, cfg.clone())?;
    if let Some(dir) = resume_possible(policy, "joint_last") {
        t.load(&dir, "joint_last")?;
        log::info!("resumed joint training at epoch {}", t.epoch);
    } else {
        t.set_collapse_reference(real_train)?;
    }
    while t.epoch < cfg.step2.epochs {
        let mut seen = Vec::with_capacity(cfg.step2.epoch_updates);
        for _ in 0..cfg.step2.epoch_updates {
            let r = t.train_step(real_train, synthetic)?;
            seen.push(r.losses);
            log(&TrainLogEntry {
                phase: "joint".into(),
                step: t.step,
                epoch: t.epoch,
                losses: r.losses,
                lr_analyzer: Some(t.adam_analyzer.learning_rate),
                lr_synth: Some(t.adam_synth.learning_rate),
                validation: None,
                pulse_energy: r.pulse_energy,
            });
        }
        let v = t.validate(valid)?;
        let mut lr = t.adam_analyzer.learning_rate;
        t.schedule.observe(v, &mut lr);
        t.adam_analyzer.learning_rate = lr;
        t.adam_synth.learning_rate = lr;
        t.epoch += 1;
        log(&TrainLogEntry {
            phase: "joint-epoch".into(),
            step: t.step,
            epoch: t.epoch,
            losses: LossBreakdown::mean(&seen),
            lr_analyzer: Some(lr),
            lr_synth: Some(lr),
            validation: Some(v),
            pulse_energy: None,
        });
        if let Some(dir) = &policy.dir {
            if v < t.best_validation {
                t.best_validation = v;
                save_analyzer(&ckpt_path(dir, "joint_analyzer_best"), &t.analyzer)?;
                save_synthesizer(&ckpt_path(dir, "joint_synth_best"), &t.synth)?;
            }
            if checkpoint_due(policy, t.epoch) {
                t.save(dir, "joint_last")?;
            }
        }
    }
    if let Some(dir) = &policy.dir {
        save_analyzer(&ckpt_path(dir, "joint_analyzer"), &t.analyzer)?;
        save_synthesizer(&ckpt_path(dir, "joint_synth"), &t.synth)?;
    }
    Ok(JointOutcome { steps: t.step, updates: t.updates, analyzer: t.analyzer, synth: t.synth })
}

/// Detects GCIs on every annotated record with the analyzer and scores
/// them per file and per speaker.
pub fn evaluate_analyzer<T: Real>(analyzer: &Analyzer<T>, records: &[UtteranceRecord]) -> Result<(Vec<FileReport>, Aggregate)> {
    let mut files = Vec::new();
    for r in records {
        let Some(reference) = &r.gci else {
            continue;
        };
        let pulses = analyzer.analyze(&r.audio)?;
        let mask = VoicingMask { voiced: r.voiced.clone(), frame_hop: r.frame_hop };
        let detected = flow_to_gci(&pulses, Some(&mask))?;
        let (_, report) = evaluate_lists(&detected, reference)?;
        files.push(FileReport { file: r.id.clone(), speaker: r.speaker_id.clone(), report });
    }
    let agg = aggregate(&files)?;
    Ok((files, agg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::toy().validate().unwrap();
        let mut c = TrainConfig::default();
        c.step2.segment_len = 3550;
        assert!(c.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let mut c = TrainConfig::toy();
        c.seed = 17;
        c.ablate_a_spectral = true;
        let back = TrainConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        let mut d = TrainConfig::default();
        d.set("step2.lr", "3e-5").unwrap();
        assert_eq!(d.step2.lr, 3e-5);
        assert!(d.set("step2.nope", "1").is_err());
        assert!(d.set("step2.batch", "1.5").is_err());
    }

    #[test]
    fn file_picker_prefers_distinct_files() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = pick_files(&mut rng, 20, 8);
        p.sort();
        p.dedup();
        assert_eq!(p.len(), 8);
        assert_eq!(pick_files(&mut rng, 3, 8).len(), 8);
    }

    #[test]
    fn pulse_energy_on_voiced_pairs() {
        let p = [0.0, 1.0, 0.0, 5.0];
        let v = [true, true, true, false];
        assert_eq!(pulse_energy(&p, &v, 4), Some(1.0));
        assert_eq!(pulse_energy(&p, &[false; 4], 4), None);
    }
}
