//! Annotated utterance generation, perturbation and persistence.
//!
//! A synthetic utterance is an LF pulse train shaped by a slowly varying
//! 64-band spectral envelope plus spectrally tilted noise. Every record
//! keeps the description it was rendered from so it can be re-rendered
//! with cycle-to-cycle perturbations (the pseudo-real set).

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::{
    hz_to_mel, mel_band_centers, mel_band_envelope, white_noise, AudioBuffer, MelEnvelope, PulseSignal, AUDIO_RATE,
};
use crate::error::{invalid, GciError, Result};
use crate::lf_model::{render_pulse_train_perturbed, GciList, Perturbation, PulseTrainSpec, RD_MAX, RD_MIN};

pub const FRAME_HOP_S: f64 = 0.005;
pub const ENV_WINDOW_MS: f64 = 32.0;
pub const ENV_HOP_MS: f64 = 5.0;
pub const SPEECH_BANDS: usize = 64;
pub const NOISE_BANDS: usize = 16;
pub const F0_MIN: f64 = 70.0;
pub const F0_MAX: f64 = 400.0;

/// RMS of the voiced component after level normalisation.
pub const VOICED_RMS: f64 = 0.1;
/// Spacing of the random spectral-envelope anchors.
pub const ENVELOPE_ANCHOR_S: f64 = 0.1;

const FIR_HALF: usize = 32;
const FIR_GRID: usize = 128;
const PEAK_LIMIT: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordKind {
    Synthetic,
    PseudoReal,
    Real,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Valid,
    Test,
}

/// Everything needed to render one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceSpec {
    pub seed: u64,
    pub pulses: PulseTrainSpec,
    /// Gains in dB, `[anchor][band]`, one anchor every `ENVELOPE_ANCHOR_S`.
    pub envelope_db: Vec<Vec<f64>>,
    /// Static noise colouring in dB per noise band.
    pub noise_db: Vec<f64>,
    pub snr_db: f64,
    /// Multiplies the noise level; 0 removes the noise.
    pub noise_gain: f64,
    pub speaker_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub audio: AudioBuffer,
    pub gci: Option<GciList>,
    pub f0_hz: Vec<f64>,
    pub rd: Vec<f64>,
    pub voiced: Vec<bool>,
    pub frame_hop: f64,
    pub env64: MelEnvelope,
    pub env16: MelEnvelope,
    /// Present for synthetic records only.
    pub pulse_target: Option<PulseSignal>,
    /// Gain applied to the unit-amplitude source; pulse signals are in
    /// the same units as the audio through this factor.
    pub source_gain: f64,
    pub split: SplitTag,
    pub kind: RecordKind,
    pub speaker_id: String,
    pub spec: Option<UtteranceSpec>,
}

impl UtteranceRecord {
    pub fn duration(&self) -> f64 {
        self.audio.duration()
    }

    pub fn is_voiced_at(&self, t: f64) -> bool {
        if t < 0.0 {
            return false;
        }
        let f = (t / self.frame_hop).floor() as usize;
        self.voiced.get(f).copied().unwrap_or(false)
    }

    fn validate(&self) -> Result<()> {
        let n = self.voiced.len();
        if self.f0_hz.len() != n || self.rd.len() != n {
            return invalid(format!("{}: track lengths differ", self.id));
        }
        if (n as f64) * self.frame_hop < self.duration() - 1e-6 {
            return invalid(format!("{}: tracks do not cover the audio", self.id));
        }
        if self.audio.sample_rate != AUDIO_RATE {
            return invalid(format!("{}: audio rate {} Hz, expected {AUDIO_RATE}", self.id, self.audio.sample_rate));
        }
        if (self.kind == RecordKind::Synthetic) != self.pulse_target.is_some() {
            return invalid(format!("{}: pulse target must be present exactly for synthetic records", self.id));
        }
        if self.env64.n_bands != SPEECH_BANDS || self.env16.n_bands != NOISE_BANDS {
            return invalid(format!("{}: envelope band counts", self.id));
        }
        if let Some(g) = &self.gci {
            if g.times().iter().any(|&t| t < 0.0 || t > self.duration()) {
                return invalid(format!("{}: GCI outside the utterance", self.id));
            }
        }
        Ok(())
    }
}

/// Draws a random utterance description of `duration_s` seconds.
pub fn random_utterance_spec(seed: u64, duration_s: f64) -> Result<UtteranceSpec> {
    if !(1.0..=10.0).contains(&duration_s) {
        return invalid(format!("duration {duration_s} s outside [1, 10]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (duration_s / FRAME_HOP_S).ceil() as usize;
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let mut voicing = Vec::with_capacity(n);
    let mut voiced = rng.random_bool(0.5);
    while voicing.len() < n {
        let ms = if voiced { rng.random_range(100.0..500.0) } else { rng.random_range(50.0..300.0) };
        let frames = ((ms / 1000.0 / FRAME_HOP_S).round() as usize).max(1);
        voicing.extend(std::iter::repeat(voiced).take(frames));
        voiced = !voiced;
    }
    voicing.truncate(n);

    let (lo, hi) = (F0_MIN.ln(), F0_MAX.ln());
    let base_f0 = rng.random_range(90f64.ln()..250f64.ln());
    let base_rd = rng.random_range(0.6..2.0);
    let (mut f0_walk, mut f0_smooth) = (0.0, 0.0);
    let (mut rd_walk, mut rd_smooth) = (0.0, 0.0);
    let mut f0_track = Vec::with_capacity(n);
    let mut rd_track = Vec::with_capacity(n);
    for _ in 0..n {
        f0_walk = 0.98 * f0_walk + 0.03 * normal(&mut rng);
        f0_smooth = 0.9 * f0_smooth + 0.1 * f0_walk;
        rd_walk = 0.98 * rd_walk + 0.05 * normal(&mut rng);
        rd_smooth = 0.9 * rd_smooth + 0.1 * rd_walk;
        f0_track.push((base_f0 + f0_smooth).clamp(lo, hi).exp());
        rd_track.push((base_rd + rd_smooth * 2.0).clamp(RD_MIN, RD_MAX));
    }

    let n_anchor = (duration_s / ENVELOPE_ANCHOR_S).ceil() as usize + 1;
    let tilt = rng.random_range(-6.0..0.0);
    let bumps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.random_range(4.0..56.0), rng.random_range(3.0..8.0), rng.random_range(-6.0..6.0)))
        .collect();
    let envelope_db = (0..n_anchor)
        .map(|_| {
            let drift: Vec<f64> = bumps.iter().map(|_| rng.random_range(-2.0..2.0)).collect();
            (0..SPEECH_BANDS)
                .map(|b| {
                    let x = b as f64;
                    let mut g = tilt * x / (SPEECH_BANDS - 1) as f64;
                    for ((c, w, a), d) in bumps.iter().zip(&drift) {
                        g += a * (-0.5 * ((x - c - d) / w).powi(2)).exp();
                    }
                    g
                })
                .collect()
        })
        .collect();
    let noise_tilt = rng.random_range(-6.0..6.0);
    let noise_db = (0..NOISE_BANDS).map(|b| noise_tilt * b as f64 / (NOISE_BANDS - 1) as f64).collect();
    let snr_db = rng.random_range(10.0..30.0);

    Ok(UtteranceSpec {
        seed,
        pulses: PulseTrainSpec {
            f0_track,
            rd_track,
            voicing,
            frame_hop: FRAME_HOP_S,
            ee: 1.0,
            duration: duration_s,
        },
        envelope_db,
        noise_db,
        snr_db,
        noise_gain: 1.0,
        speaker_id: "spk0".to_string(),
    })
}

/// Intermediate signals of one rendering, before level normalisation.
#[derive(Clone, Debug)]
pub struct SynthParts {
    /// Unit-amplitude flow derivative.
    pub excitation: AudioBuffer,
    /// Envelope-filtered excitation.
    pub voiced: AudioBuffer,
    pub noise: AudioBuffer,
    /// Flow in `ee * ms`.
    pub flow: AudioBuffer,
    pub gci: GciList,
}

/// Zero-phase FIR taps (`2 * FIR_HALF + 1`) for a magnitude response given
/// in dB at mel band centres, linearly interpolated on the mel axis.
fn design_fir(band_db: &[f64], centres_mel: &[f64]) -> Vec<f64> {
    let n_grid = FIR_GRID / 2 + 1;
    let amp: Vec<f64> = (0..n_grid)
        .map(|k| {
            let m = hz_to_mel(k as f64 * AUDIO_RATE as f64 / FIR_GRID as f64);
            let db = interp_clamped(centres_mel, band_db, m);
            10f64.powf(db / 20.0)
        })
        .collect();
    (0..=2 * FIR_HALF)
        .map(|i| {
            let m = i as f64 - FIR_HALF as f64;
            let mut acc = amp[0] + amp[n_grid - 1] * (PI * m).cos();
            for (k, a) in amp.iter().enumerate().take(n_grid - 1).skip(1) {
                acc += 2.0 * a * (2.0 * PI * k as f64 * m / FIR_GRID as f64).cos();
            }
            let win = 0.5 * (1.0 + (PI * m / (FIR_HALF + 1) as f64).cos());
            acc / FIR_GRID as f64 * win
        })
        .collect()
}

fn interp_clamped(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[xs.len() - 1] {
        return ys[ys.len() - 1];
    }
    let i = xs.partition_point(|&v| v <= x) - 1;
    let w = (x - xs[i]) / (xs[i + 1] - xs[i]);
    ys[i] * (1.0 - w) + ys[i + 1] * w
}

/// Filters with a different zero-phase FIR per 5 ms block.
fn time_varying_fir(x: &[f64], taps_at: impl Fn(usize) -> Vec<f64>, block: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    let mut start = 0;
    while start < x.len() {
        let end = (start + block).min(x.len());
        let h = taps_at(start / block);
        for (n, out) in y.iter_mut().enumerate().take(end).skip(start) {
            let mut acc = 0.0;
            for (i, hv) in h.iter().enumerate() {
                let idx = n as isize + FIR_HALF as isize - i as isize;
                if idx >= 0 && (idx as usize) < x.len() {
                    acc += hv * x[idx as usize];
                }
            }
            *out = acc;
        }
        start = end;
    }
    y
}

fn envelope_at(spec: &UtteranceSpec, t: f64) -> Vec<f64> {
    let pos = (t / ENVELOPE_ANCHOR_S).max(0.0);
    let last = spec.envelope_db.len() - 1;
    let i = (pos.floor() as usize).min(last);
    let j = (i + 1).min(last);
    let w = (pos - i as f64).clamp(0.0, 1.0);
    spec.envelope_db[i].iter().zip(&spec.envelope_db[j]).map(|(a, b)| a * (1.0 - w) + b * w).collect()
}

fn validate_spec(spec: &UtteranceSpec) -> Result<()> {
    spec.pulses.validate()?;
    if spec.envelope_db.is_empty() || spec.envelope_db.iter().any(|r| r.len() != SPEECH_BANDS) {
        return invalid("envelope anchors must have 64 bands");
    }
    if spec.noise_db.len() != NOISE_BANDS {
        return invalid("noise colouring must have 16 bands");
    }
    if !(spec.noise_gain >= 0.0) || !spec.snr_db.is_finite() {
        return invalid("noise gain and SNR must be finite and non-negative");
    }
    Ok(())
}

/// Renders the separate source, voiced and noise signals of `spec`.
pub fn synth_parts(spec: &UtteranceSpec, perturbation: &Perturbation) -> Result<SynthParts> {
    validate_spec(spec)?;
    let rendered = render_pulse_train_perturbed(&spec.pulses, AUDIO_RATE, perturbation)?;
    let len = rendered.derivative.len();
    let block = (FRAME_HOP_S * AUDIO_RATE as f64).round() as usize;
    let speech_mel: Vec<f64> = mel_band_centers(SPEECH_BANDS, AUDIO_RATE).into_iter().map(hz_to_mel).collect();
    let voiced = time_varying_fir(
        &rendered.derivative.samples,
        |b| design_fir(&envelope_at(spec, b as f64 * FRAME_HOP_S), &speech_mel),
        block,
    );

    let noise_mel: Vec<f64> = mel_band_centers(NOISE_BANDS, AUDIO_RATE).into_iter().map(hz_to_mel).collect();
    let noise_taps = design_fir(&spec.noise_db, &noise_mel);
    let white = white_noise(len, spec.seed ^ 0x6e6f_6973_655f_7372, AUDIO_RATE);
    let mut noise = time_varying_fir(&white.samples, |_| noise_taps.clone(), len.max(1));
    let rms = (noise.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
    let level = spec.noise_gain * VOICED_RMS * 10f64.powf(-spec.snr_db / 20.0);
    if rms > 0.0 {
        noise.iter_mut().for_each(|v| *v *= level / rms);
    }
    Ok(SynthParts {
        excitation: rendered.derivative,
        voiced: AudioBuffer::new(voiced, AUDIO_RATE)?,
        noise: AudioBuffer::new(noise, AUDIO_RATE)?,
        flow: rendered.flow,
        gci: rendered.gci,
    })
}

/// Renders `spec` into a synthetic record with exact annotations.
///
/// The voiced component is scaled to `VOICED_RMS`; when the mix would
/// exceed the peak limit the whole mix is scaled down, and both factors
/// are folded into `source_gain`.
pub fn synth_utterance(spec: &UtteranceSpec) -> Result<UtteranceRecord> {
    render_record(spec, &Perturbation::default(), RecordKind::Synthetic)
}

fn render_record(spec: &UtteranceSpec, perturbation: &Perturbation, kind: RecordKind) -> Result<UtteranceRecord> {
    let parts = synth_parts(spec, perturbation)?;
    let vrms = parts.voiced.rms();
    let mut gain = if vrms > 0.0 { VOICED_RMS / vrms } else { 1.0 };
    let mut noise = parts.noise.samples;
    let mut audio: Vec<f64> = parts.voiced.samples.iter().zip(&noise).map(|(v, n)| v * gain + n).collect();
    let peak = audio.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > PEAK_LIMIT {
        let k = PEAK_LIMIT / peak;
        audio.iter_mut().for_each(|v| *v *= k);
        noise.iter_mut().for_each(|v| *v *= k);
        gain *= k;
        log::debug!("utterance {}: mix scaled by {k:.4} to avoid clipping", spec.seed);
    }
    let audio = AudioBuffer::new(audio, AUDIO_RATE)?;
    let noise = AudioBuffer::new(noise, AUDIO_RATE)?;
    let env64 = mel_band_envelope(&audio, SPEECH_BANDS, ENV_WINDOW_MS, ENV_HOP_MS)?;
    let env16 = mel_band_envelope(&noise, NOISE_BANDS, ENV_WINDOW_MS, ENV_HOP_MS)?;
    let pulse_target = match kind {
        RecordKind::Synthetic => {
            let scaled: Vec<f64> = parts.flow.samples.iter().map(|v| v * gain).collect();
            Some(PulseSignal::from_audio_rate(&scaled)?)
        }
        _ => None,
    };
    Ok(UtteranceRecord {
        id: format!("utt{:08}", spec.seed),
        audio,
        gci: Some(parts.gci),
        f0_hz: spec.pulses.f0_track.clone(),
        rd: spec.pulses.rd_track.clone(),
        voiced: spec.pulses.voicing.clone(),
        frame_hop: spec.pulses.frame_hop,
        env64,
        env16,
        pulse_target,
        source_gain: gain,
        split: SplitTag::Train,
        kind,
        speaker_id: spec.speaker_id.clone(),
        spec: Some(spec.clone()),
    })
}

/// Re-renders `record` with jitter, shimmer and return-phase morphing.
/// The result is pseudo-real: its GCIs are the perturbed closure instants
/// and it carries no pulse target.
pub fn perturb_utterance(
    record: &UtteranceRecord,
    jitter_pct: f64,
    shimmer_pct: f64,
    shape_morph: f64,
    seed: u64,
) -> Result<UtteranceRecord> {
    let p = Perturbation { jitter_pct, shimmer_pct, shape_morph, seed };
    p.validate()?;
    let Some(spec) = &record.spec else {
        return invalid(format!("{}: record has no rendering description", record.id));
    };
    let mut out = if p.is_identity() {
        let mut r = record.clone();
        r.kind = RecordKind::PseudoReal;
        r.pulse_target = None;
        r
    } else {
        render_record(spec, &p, RecordKind::PseudoReal)?
    };
    out.id = record.id.clone();
    out.split = record.split;
    Ok(out)
}

/// Unit-source LF pulses rendered from the record's f0, Rd and voicing
/// tracks, at the pulse rate and scaled like the record's audio.
pub fn reference_pulses(record: &UtteranceRecord) -> Result<PulseSignal> {
    let spec = PulseTrainSpec {
        f0_track: record.f0_hz.clone(),
        rd_track: record.rd.clone(),
        voicing: record.voiced.clone(),
        frame_hop: record.frame_hop,
        ee: 1.0,
        duration: record.duration(),
    };
    let r = render_pulse_train_perturbed(&spec, AUDIO_RATE, &Perturbation::default())?;
    let scaled: Vec<f64> = r.flow.samples.iter().map(|v| v * record.source_gain).collect();
    PulseSignal::from_audio_rate(&scaled)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub wav: String,
    pub sidecar: String,
    pub split: SplitTag,
    pub kind: RecordKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return invalid(format!("duplicate utterance id {}", e.id));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    gci_times_s: Option<Vec<f64>>,
    f0_hz: Vec<f64>,
    rd: Vec<f64>,
    voiced: Vec<bool>,
    frame_hop_s: f64,
    env64: Vec<Vec<f64>>,
    env16: Vec<Vec<f64>>,
    kind: RecordKind,
    speaker_id: String,
    split: SplitTag,
    source_gain: f64,
    env_hop_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pulse_target: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spec: Option<UtteranceSpec>,
}

fn load_err(entry: &str, reason: impl ToString) -> GciError {
    GciError::Load { entry: entry.to_string(), reason: reason.to_string() }
}

pub fn write_wav(path: &Path, audio: &AudioBuffer) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_io = |e: hound::Error| std::io::Error::other(e.to_string());
    let mut w = hound::WavWriter::create(path, spec).map_err(to_io)?;
    for &v in &audio.samples {
        let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(q).map_err(to_io)?;
    }
    w.finalize().map_err(to_io)?;
    Ok(())
}

/// Reads a mono 16-bit PCM WAV file.
pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let name = path.display().to_string();
    let reader = hound::WavReader::open(path).map_err(|e| load_err(&name, e))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(load_err(&name, "expected mono 16-bit PCM"));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| load_err(&name, e))?;
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Writes the records as `<id>.wav` + `<id>.json` and a manifest.
pub fn write_dataset(dir: &Path, seed: u64, records: &[UtteranceRecord]) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        r.validate()?;
        let wav = format!("{}.wav", r.id);
        let sidecar = format!("{}.json", r.id);
        write_wav(&dir.join(&wav), &r.audio)?;
        let sc = Sidecar {
            gci_times_s: r.gci.as_ref().map(|g| g.times().to_vec()),
            f0_hz: r.f0_hz.clone(),
            rd: r.rd.clone(),
            voiced: r.voiced.clone(),
            frame_hop_s: r.frame_hop,
            env64: r.env64.frames.clone(),
            env16: r.env16.frames.clone(),
            kind: r.kind,
            speaker_id: r.speaker_id.clone(),
            split: r.split,
            source_gain: r.source_gain,
            env_hop_s: r.env64.frame_hop,
            pulse_target: r.pulse_target.as_ref().map(|p| p.samples.clone()),
            spec: r.spec.clone(),
        };
        let text = serde_json::to_string(&sc).map_err(|e| load_err(&r.id, e))?;
        fs::write(dir.join(&sidecar), text)?;
        entries.push(ManifestEntry { id: r.id.clone(), wav, sidecar, split: r.split, kind: r.kind });
    }
    let manifest = DatasetManifest { seed, entries };
    manifest.validate()?;
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    manifest.validate()?;
    let text = serde_json::to_string_pretty(manifest).map_err(|e| load_err(MANIFEST_FILE, e))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

/// A dataset on disk; records are loaded on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| load_err(MANIFEST_FILE, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| load_err(MANIFEST_FILE, e))?;
    manifest.validate()?;
    for e in &manifest.entries {
        for f in [&e.wav, &e.sidecar] {
            if !dir.join(f).is_file() {
                return Err(load_err(&e.id, format!("missing file {f}")));
            }
        }
    }
    Ok(Dataset { dir: dir.to_path_buf(), manifest })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    pub fn load(&self, index: usize) -> Result<UtteranceRecord> {
        let e = self
            .manifest
            .entries
            .get(index)
            .ok_or_else(|| GciError::InvalidArgument(format!("entry {index} out of range")))?;
        let audio = read_wav(&self.dir.join(&e.wav)).map_err(|err| load_err(&e.id, err))?;
        let text = fs::read_to_string(self.dir.join(&e.sidecar)).map_err(|err| load_err(&e.id, err))?;
        let sc: Sidecar = serde_json::from_str(&text).map_err(|err| load_err(&e.id, err))?;
        let gci = sc.gci_times_s.map(GciList::new).transpose().map_err(|err| load_err(&e.id, err))?;
        let pulse_target = sc
            .pulse_target
            .map(|s| PulseSignal::from_samples(s))
            .transpose()
            .map_err(|err| load_err(&e.id, err))?;
        let record = UtteranceRecord {
            id: e.id.clone(),
            audio,
            gci,
            f0_hz: sc.f0_hz,
            rd: sc.rd,
            voiced: sc.voiced,
            frame_hop: sc.frame_hop_s,
            env64: MelEnvelope { frames: sc.env64, n_bands: SPEECH_BANDS, frame_hop: sc.env_hop_s },
            env16: MelEnvelope { frames: sc.env16, n_bands: NOISE_BANDS, frame_hop: sc.env_hop_s },
            pulse_target,
            source_gain: sc.source_gain,
            split: e.split,
            kind: sc.kind,
            speaker_id: sc.speaker_id,
            spec: sc.spec,
        };
        if record.kind != e.kind {
            return Err(load_err(&e.id, "kind differs between manifest and sidecar"));
        }
        if record.env64.frames.iter().any(|f| f.len() != SPEECH_BANDS)
            || record.env16.frames.iter().any(|f| f.len() != NOISE_BANDS)
        {
            return Err(load_err(&e.id, "envelope band count"));
        }
        record.validate().map_err(|err| load_err(&e.id, err))?;
        Ok(record)
    }

    pub fn load_all(&self) -> Result<Vec<UtteranceRecord>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }

    pub fn load_where(&self, pred: impl Fn(&ManifestEntry) -> bool) -> Result<Vec<UtteranceRecord>> {
        (0..self.len()).filter(|&i| pred(&self.manifest.entries[i])).map(|i| self.load(i)).collect()
    }
}

impl PulseSignal {
    /// A pulse-rate signal aligned like the rendered targets.
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        PulseSignal::new(samples, crate::dsp::PULSE_RATE, crate::dsp::PULSE_OFFSET_S)
    }
}

/// Assigns train/valid/test tags by shuffling ids with `seed`.
pub fn split_dataset(manifest: &DatasetManifest, fractions: [f64; 3], seed: u64) -> Result<DatasetManifest> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return invalid(format!("split fractions {fractions:?} must be non-negative and sum to 1"));
    }
    manifest.validate()?;
    let n = manifest.entries.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_valid = ((fractions[0] + fractions[1]) * n as f64).round() as usize - n_train;
    let mut out = manifest.clone();
    for (rank, &i) in order.iter().enumerate() {
        out.entries[i].split = if rank < n_train {
            SplitTag::Train
        } else if rank < n_train + n_valid {
            SplitTag::Valid
        } else {
            SplitTag::Test
        };
    }
    Ok(out)
}
