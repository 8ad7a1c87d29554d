//! GCI extraction by peak picking and the identification metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::{upsample_cubic, AudioBuffer, PulseSignal, AUDIO_RATE};
use crate::error::{invalid, GciError, Result};
use crate::lf_model::GciList;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeakPicking {
    /// Fraction of the robust peak scale a minimum must exceed.
    pub threshold: f64,
    /// Percentile of minimum magnitudes used as the peak scale.
    pub scale_percentile: f64,
    pub min_distance_s: f64,
}

impl Default for PeakPicking {
    fn default() -> Self {
        Self { threshold: 0.1, scale_percentile: 95.0, min_distance_s: 0.0016 }
    }
}

/// Per-frame voicing decisions.
#[derive(Clone, Debug, PartialEq)]
pub struct VoicingMask {
    pub voiced: Vec<bool>,
    pub frame_hop: f64,
}

impl VoicingMask {
    pub fn is_voiced(&self, t: f64) -> bool {
        t >= 0.0 && self.voiced.get((t / self.frame_hop).floor() as usize).copied().unwrap_or(false)
    }
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = (p / 100.0 * (sorted.len() - 1) as f64).clamp(0.0, (sorted.len() - 1) as f64);
    let (i, w) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - w) + sorted[i + 1] * w
    } else {
        sorted[i]
    }
}

/// Times of the significant negative peaks of `d`, whose sample `i` lies
/// at `t0 + i / rate` seconds. Peak positions are refined by parabolic
/// interpolation.
pub fn pick_negative_peaks(d: &[f64], t0: f64, rate: f64, cfg: &PeakPicking) -> Vec<f64> {
    if d.len() < 3 {
        return Vec::new();
    }
    let minima: Vec<usize> =
        (1..d.len() - 1).filter(|&i| d[i] < 0.0 && d[i] < d[i - 1] && d[i] <= d[i + 1]).collect();
    if minima.is_empty() {
        return Vec::new();
    }
    let mut mags: Vec<f64> = minima.iter().map(|&i| -d[i]).collect();
    mags.sort_by(f64::total_cmp);
    let limit = -cfg.threshold * percentile(&mags, cfg.scale_percentile);
    let mut strong: Vec<usize> = minima.into_iter().filter(|&i| d[i] < limit).collect();
    strong.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
    let min_gap = cfg.min_distance_s * rate;
    let mut kept: Vec<usize> = Vec::new();
    for i in strong {
        if kept.iter().all(|&k| (k as f64 - i as f64).abs() >= min_gap) {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept.into_iter()
        .map(|i| {
            let (a, b, c) = (d[i - 1], d[i], d[i + 1]);
            let den = a - 2.0 * b + c;
            let shift = if den > 0.0 { (0.5 * (a - c) / den).clamp(-0.5, 0.5) } else { 0.0 };
            t0 + (i as f64 + shift) / rate
        })
        .collect()
}

/// GCIs from a predicted glottal flow: cubic-spline upsampling to the audio
/// rate, first difference, then negative-peak picking.
pub fn flow_to_gci(pulses: &PulseSignal, voicing: Option<&VoicingMask>) -> Result<GciList> {
    flow_to_gci_with(pulses, voicing, &PeakPicking::default())
}

pub fn flow_to_gci_with(pulses: &PulseSignal, voicing: Option<&VoicingMask>, cfg: &PeakPicking) -> Result<GciList> {
    if pulses.is_empty() {
        return invalid("empty pulse signal");
    }
    let factor = (AUDIO_RATE / pulses.sample_rate).max(1) as usize;
    let rate = (pulses.sample_rate as usize * factor) as f64;
    let up = upsample_cubic(&pulses.samples, factor)?;
    let diff: Vec<f64> = up.windows(2).map(|w| w[1] - w[0]).collect();
    // a difference sample sits between its two source samples
    let t0 = pulses.offset + 0.5 / rate;
    let mut times = pick_negative_peaks(&diff, t0, rate, cfg);
    if let Some(mask) = voicing {
        times.retain(|&t| mask.is_voiced(t));
    }
    dedup_increasing(&mut times);
    GciList::new(times)
}

fn dedup_increasing(times: &mut Vec<f64>) {
    times.dedup_by(|b, a| *b <= *a);
}

/// Which slope of the EGG marks closure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EggPolarity {
    /// Contact rises at closure: peaks of the derivative.
    Rising,
    /// Contact is recorded inverted: troughs of the derivative.
    Falling,
}

/// Reference GCIs from an electroglottograph signal by peak picking on its
/// derivative.
pub fn egg_to_gci(egg: &AudioBuffer, polarity: EggPolarity) -> Result<GciList> {
    if egg.is_empty() {
        return Ok(GciList::empty());
    }
    let sign = match polarity {
        EggPolarity::Rising => -1.0,
        EggPolarity::Falling => 1.0,
    };
    let d: Vec<f64> = egg.samples.windows(2).map(|w| sign * (w[1] - w[0])).collect();
    let rate = egg.sample_rate as f64;
    let mut times = pick_negative_peaks(&d, 0.5 / rate, rate, &PeakPicking::default());
    dedup_increasing(&mut times);
    GciList::new(times)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GciMatchResult {
    /// `(reference, detection)` pairs.
    pub identified: Vec<(f64, f64)>,
    pub missed: Vec<f64>,
    pub false_alarms: Vec<f64>,
    /// Cycles holding two or more detections.
    pub multi_hit_cycles: usize,
    pub n_ref: usize,
    pub n_det: usize,
}

fn check_sorted(xs: &[f64], what: &str) -> Result<()> {
    if xs.windows(2).any(|w| !(w[1] >= w[0])) || xs.iter().any(|v| !v.is_finite()) {
        return invalid(format!("{what} times must be finite and sorted"));
    }
    Ok(())
}

/// Matches detections to reference cycles.
///
/// Cycle `i` spans from the midpoint with the previous reference to the
/// midpoint with the next one; the outer cycles extend by half the adjacent
/// period (a lone reference owns the whole axis). A cycle with exactly one
/// detection is identified and with none is missed. A cycle with several
/// detections is neither: all its detections count as false alarms, as do
/// detections outside every cycle.
pub fn associate(detected: &[f64], reference: &[f64]) -> Result<GciMatchResult> {
    check_sorted(detected, "detected")?;
    check_sorted(reference, "reference")?;
    let n = reference.len();
    let mut out = GciMatchResult { n_ref: n, n_det: detected.len(), ..Default::default() };
    if n == 0 {
        out.false_alarms = detected.to_vec();
        return Ok(out);
    }
    let bound = |i: usize| -> (f64, f64) {
        let lo = if i > 0 {
            0.5 * (reference[i - 1] + reference[i])
        } else if n > 1 {
            reference[0] - 0.5 * (reference[1] - reference[0])
        } else {
            f64::NEG_INFINITY
        };
        let hi = if i + 1 < n {
            0.5 * (reference[i] + reference[i + 1])
        } else if n > 1 {
            reference[n - 1] + 0.5 * (reference[n - 1] - reference[n - 2])
        } else {
            f64::INFINITY
        };
        (lo, hi)
    };
    let mut hits: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut cycle = 0;
    for &d in detected {
        while cycle < n && d >= bound(cycle).1 {
            cycle += 1;
        }
        if cycle < n && d >= bound(cycle).0 {
            hits[cycle].push(d);
        } else {
            out.false_alarms.push(d);
        }
    }
    for (i, h) in hits.into_iter().enumerate() {
        match h.len() {
            0 => out.missed.push(reference[i]),
            1 => out.identified.push((reference[i], h[0])),
            _ => {
                out.multi_hit_cycles += 1;
                out.false_alarms.extend(h);
            }
        }
    }
    out.false_alarms.sort_by(f64::total_cmp);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportScope {
    File,
    Speaker,
    Total,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GciReport {
    /// Identification rate, percent of reference GCIs.
    pub idr: f64,
    /// Miss rate, percent.
    pub mr: f64,
    /// False alarm rate, percent.
    pub far: f64,
    /// Standard deviation of the timing error of identified GCIs, ms.
    pub ida: f64,
    pub scope: ReportScope,
    /// False when there were no reference GCIs.
    pub defined: bool,
}

pub fn compute_metrics(m: &GciMatchResult) -> GciReport {
    if m.n_ref == 0 {
        return GciReport { idr: 0.0, mr: 0.0, far: 0.0, ida: 0.0, scope: ReportScope::File, defined: false };
    }
    let n = m.n_ref as f64;
    let errs: Vec<f64> = m.identified.iter().map(|(r, d)| (d - r) * 1000.0).collect();
    let ida = if errs.is_empty() {
        0.0
    } else {
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / errs.len() as f64).sqrt()
    };
    GciReport {
        idr: 100.0 * m.identified.len() as f64 / n,
        mr: 100.0 * m.missed.len() as f64 / n,
        far: 100.0 * m.false_alarms.len() as f64 / n,
        ida,
        scope: ReportScope::File,
        defined: true,
    }
}

/// Detection versus reference in one call.
pub fn evaluate_lists(detected: &GciList, reference: &GciList) -> Result<(GciMatchResult, GciReport)> {
    let m = associate(detected.times(), reference.times())?;
    let r = compute_metrics(&m);
    Ok((m, r))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileReport {
    pub file: String,
    pub speaker: String,
    pub report: GciReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub speakers: BTreeMap<String, GciReport>,
    pub total: GciReport,
}

fn mean_report(reports: &[GciReport], scope: ReportScope) -> GciReport {
    let n = reports.len() as f64;
    let avg = |f: fn(&GciReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    GciReport {
        idr: avg(|r| r.idr),
        mr: avg(|r| r.mr),
        far: avg(|r| r.far),
        ida: avg(|r| r.ida),
        scope,
        defined: true,
    }
}

/// Averages files within each speaker, then speakers with equal weight.
/// Undefined file reports and speakers without any defined file are left
/// out.
pub fn aggregate(files: &[FileReport]) -> Result<Aggregate> {
    let mut by_speaker: BTreeMap<&str, Vec<GciReport>> = BTreeMap::new();
    for f in files {
        let entry = by_speaker.entry(f.speaker.as_str()).or_default();
        if f.report.defined {
            entry.push(f.report);
        } else {
            log::warn!("{}: no reference GCIs, excluded from aggregation", f.file);
        }
    }
    let mut speakers = BTreeMap::new();
    for (spk, reps) in by_speaker {
        if reps.is_empty() {
            log::warn!("speaker {spk} has no defined report, excluded");
            continue;
        }
        speakers.insert(spk.to_string(), mean_report(&reps, ReportScope::Speaker));
    }
    if speakers.is_empty() {
        return Err(GciError::InvalidArgument("no defined reports to aggregate".into()));
    }
    let per: Vec<GciReport> = speakers.values().copied().collect();
    Ok(Aggregate { speakers, total: mean_report(&per, ReportScope::Total) })
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub report: GciReport,
}

pub const REPORT_HEADER: [&str; 5] = ["model", "IDR", "MR", "FAR", "IDA"];

/// Writes a tab-separated table with columns model, IDR, MR, FAR, IDA in
/// the given row order.
pub fn emit_report(rows: &[ReportRow], path: &Path) -> Result<()> {
    fs::write(path, format_report(rows))?;
    Ok(())
}

pub fn format_report(rows: &[ReportRow]) -> String {
    let mut s = REPORT_HEADER.join("\t");
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{:.2}\t{:.2}\t{:.2}\t{:.3}",
            r.model, r.report.idr, r.report.mr, r.report.far, r.report.ida
        );
    }
    s
}

pub fn parse_report(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split('\t').collect();
    if header != REPORT_HEADER {
        return invalid(format!("unexpected report header {header:?}"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let cols: Vec<&str> = l.split('\t').collect();
            if cols.len() != 5 {
                return invalid(format!("malformed report line {l:?}"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| GciError::InvalidArgument(format!("{s:?}: {e}")));
            Ok(ReportRow {
                model: cols[0].to_string(),
                report: GciReport {
                    idr: num(cols[1])?,
                    mr: num(cols[2])?,
                    far: num(cols[3])?,
                    ida: num(cols[4])?,
                    scope: ReportScope::Total,
                    defined: true,
                },
            })
        })
        .collect()
}

/// Writes GCI times, one value in seconds per line.
pub fn write_gci_text(path: &Path, gci: &GciList) -> Result<()> {
    let mut s = String::new();
    for t in gci.times() {
        let _ = writeln!(s, "{t:.6}");
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_gci_text(path: &Path) -> Result<GciList> {
    let name = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| GciError::Load { entry: name.clone(), reason: e.to_string() })?;
    let times = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| GciError::Load { entry: name.clone(), reason: e.to_string() })?;
    GciList::new(times).map_err(|e| GciError::Load { entry: name, reason: e.to_string() })
}
