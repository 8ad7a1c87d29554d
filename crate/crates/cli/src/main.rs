use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use gci_core::corpus::{
    perturb_utterance, random_utterance_spec, read_dataset, read_wav, synth_utterance, write_dataset, Dataset,
    RecordKind, SplitTag, UtteranceRecord,
};
use gci_core::gci_eval::{
    aggregate, emit_report, evaluate_lists, flow_to_gci, format_report, parse_report, read_gci_text, write_gci_text,
    FileReport, ReportRow, VoicingMask,
};
use gci_core::models::{reference_configs, toy_configs, Analyzer, AnalyzerConfig, Synthesizer, SynthesizerConfig};
use gci_core::trainer::{
    evaluate_analyzer, joint_train, kv_apply, kv_format, kv_set, load_analyzer, load_synthesizer, prepare,
    pretrain_analyzer, pretrain_synthesizer, CheckpointPolicy, TrainConfig, TrainLogEntry,
};
use gci_core::GciError;

/// Environment variable naming the default run-config file.
const CONFIG_ENV: &str = "GCI_CONFIG";
const MODELS_FILE: &str = "models.json";

#[derive(Parser, Debug)]
#[command(name = "gci", version, about = "Glottal closure instant detection by analysis-synthesis")]
struct Cli {
    /// Run-config file of `key = value` lines (defaults to $GCI_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one run-config key, e.g. `--set train.step2.lr=2e-5`. Flags win over the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Reduced network widths and the desk-scale schedule.
    #[arg(long, global = true)]
    toy: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus, optionally with a pseudo-real part.
    SynthData(SynthDataArgs),
    /// Step 1: train the analyzer and/or synthesizer on synthetic speech.
    Pretrain(PretrainArgs),
    /// Step 2: joint analysis-synthesis refinement.
    Train(TrainArgs),
    /// Predict glottal flow and GCIs for a WAV file or a dataset.
    Analyze(AnalyzeArgs),
    /// Score detections or checkpoints against annotated GCIs.
    Evaluate(EvaluateArgs),
    /// Merge report tables into one.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthDataArgs {
    /// Number of synthetic utterances.
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Utterance length in seconds, within [1, 10].
    #[arg(long, default_value_t = 2.0)]
    duration: f64,
    /// Add `n` pseudo-real utterances, e.g. `jitter=5,shimmer=3,morph=0.5`.
    #[arg(long)]
    perturb: Option<String>,
    /// Train, valid and test fractions.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    split: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Target {
    Analyzer,
    Synth,
    Both,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long, value_enum, default_value_t = Target::Both)]
    target: Target,
    /// Dataset directory (defaults to `paths.data`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint directory (defaults to `paths.checkpoints`).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Continue from the last checkpoint of an interrupted run.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Train without the A-spectral regulariser.
    #[arg(long)]
    ablate_a_spectral: bool,
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Analyzer checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Single 16 kHz WAV file.
    #[arg(long, conflicts_with = "data")]
    wav: Option<PathBuf>,
    /// Dataset directory; every utterance is analysed with its voicing.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Dataset with reference GCIs.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory of `<id>.gci.txt` detection files.
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Analyzer checkpoints to compare, as `name=path`.
    #[arg(long = "model", value_name = "NAME=PATH")]
    models: Vec<String>,
    /// Split to score.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Record kind to score.
    #[arg(long, value_enum, default_value_t = KindArg::PseudoReal)]
    kind: KindArg,
    /// Report table path (defaults to `paths.reports/report.tsv`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum KindArg {
    Synthetic,
    PseudoReal,
    Real,
    All,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Report tables to merge.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Paths {
    data: String,
    checkpoints: String,
    reports: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ModelSizes {
    analyzer_channels: u64,
    synth_residual: u64,
    synth_skip: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RunConfig {
    paths: Paths,
    toy: bool,
    models: ModelSizes,
    train: TrainConfig,
}

impl RunConfig {
    fn new(toy: bool) -> Self {
        let (a, s) = if toy { toy_configs() } else { reference_configs() };
        Self {
            paths: Paths { data: "data".into(), checkpoints: "checkpoints".into(), reports: "reports".into() },
            toy,
            models: ModelSizes {
                analyzer_channels: a.channels as u64,
                synth_residual: s.residual_channels as u64,
                synth_skip: s.skip_channels as u64,
            },
            train: if toy { TrainConfig::toy() } else { TrainConfig::default() },
        }
    }

    fn model_configs(&self) -> (AnalyzerConfig, SynthesizerConfig) {
        let m = &self.models;
        (
            gci_core::models::analyzer_config(m.analyzer_channels as usize),
            gci_core::models::synthesizer_config(m.synth_residual as usize, m.synth_skip as usize),
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SavedModels {
    analyzer: AnalyzerConfig,
    synth: SynthesizerConfig,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Abort(String),
}

impl From<GciError> for Failure {
    fn from(e: GciError) -> Self {
        match e {
            GciError::Collapse(_) => Failure::Abort(e.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Abort(m)) => {
            eprintln!("training aborted: {m}");
            ExitCode::from(3)
        }
    }
}

fn load_run_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let path = cli.config.clone().or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut text = String::new();
    if let Some(p) = &path {
        text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", p.display())))?;
    }
    // the toy flag picks the base before file and flag overrides apply
    let file_toy = text.lines().any(|l| l.split_once('=').is_some_and(|(k, v)| k.trim() == "toy" && v.trim() == "true"));
    let mut cfg = RunConfig::new(cli.toy || file_toy);
    kv_apply(&mut cfg, &text).map_err(|e| Failure::Usage(e.to_string()))?;
    for o in &cli.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        kv_set(&mut cfg, k.trim(), v.trim()).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    cfg.train.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn run(cli: Cli) -> CmdResult {
    let cfg = load_run_config(&cli)?;
    match cli.command {
        Command::SynthData(a) => cmd_synth_data(&a),
        Command::Pretrain(a) => cmd_pretrain(&cfg, &a),
        Command::Train(a) => cmd_train(&cfg, &a),
        Command::Analyze(a) => cmd_analyze(&a),
        Command::Evaluate(a) => cmd_evaluate(&cfg, &a),
        Command::Report(a) => cmd_report(&cfg, &a),
    }
}

fn parse_perturb(s: &str) -> Result<(f64, f64, f64), Failure> {
    let (mut j, mut sh, mut m) = (0.0, 0.0, 0.0);
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| Failure::Usage(format!("bad perturbation {part:?}")))?;
        let v: f64 = v.trim().parse().map_err(|_| Failure::Usage(format!("bad number in {part:?}")))?;
        match k.trim() {
            "jitter" => j = v,
            "shimmer" => sh = v,
            "morph" => m = v,
            other => return Err(Failure::Usage(format!("unknown perturbation {other:?}"))),
        }
    }
    Ok((j, sh, m))
}

fn parse_fractions(s: &str) -> Result<[f64; 3], Failure> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::Usage(format!("bad split {s:?}")))?;
    let f: [f64; 3] = v.try_into().map_err(|_| Failure::Usage("split needs three fractions".into()))?;
    if f.iter().any(|x| *x < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Failure::Usage("split fractions must be non-negative and sum to 1".into()));
    }
    Ok(f)
}

/// Split tag for position `i` of `n` under `fractions`.
fn split_of(i: usize, n: usize, f: [f64; 3]) -> SplitTag {
    let n_train = (f[0] * n as f64).round() as usize;
    let n_valid = (f[1] * n as f64).round() as usize;
    if i < n_train {
        SplitTag::Train
    } else if i < n_train + n_valid {
        SplitTag::Valid
    } else {
        SplitTag::Test
    }
}

fn cmd_synth_data(a: &SynthDataArgs) -> CmdResult {
    if a.n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    let fractions = parse_fractions(&a.split)?;
    let perturb = a.perturb.as_deref().map(parse_perturb).transpose()?;
    let base = a.seed.wrapping_mul(1_000_003);
    let mut records = Vec::new();
    for i in 0..a.n {
        let mut r = synth_utterance(&random_utterance_spec(base.wrapping_add(i as u64), a.duration)?)?;
        r.id = format!("syn{i:05}");
        r.split = split_of(i, a.n, fractions);
        records.push(r);
    }
    if let Some((j, s, m)) = perturb {
        for i in 0..a.n {
            let seed = base.wrapping_add((a.n + i) as u64);
            let clean = synth_utterance(&random_utterance_spec(seed, a.duration)?)?;
            let mut r = perturb_utterance(&clean, j, s, m, seed)?;
            r.id = format!("pr{i:05}");
            r.split = split_of(i, a.n, fractions);
            records.push(r);
        }
    }
    let manifest = write_dataset(&a.out, a.seed, &records)?;
    log::info!("wrote {} utterances to {}", manifest.entries.len(), a.out.display());
    Ok(())
}

fn open_dataset(path: &Path) -> Result<Dataset, Failure> {
    Ok(read_dataset(path)?)
}

fn load_kind(ds: &Dataset, kind: RecordKind, split: SplitTag) -> Result<Vec<UtteranceRecord>, Failure> {
    Ok(ds.load_where(|e| e.kind == kind && e.split == split)?)
}

fn training_log(dir: &Path) -> Result<impl FnMut(&TrainLogEntry), Failure> {
    use std::io::Write;
    fs::create_dir_all(dir)?;
    let mut file = fs::OpenOptions::new().create(true).append(true).open(dir.join("train.log"))?;
    Ok(move |e: &TrainLogEntry| {
        let _ = writeln!(file, "{e}");
        if e.phase.ends_with("epoch") {
            log::info!("{e}");
        }
    })
}

fn write_run_files(dir: &Path, cfg: &RunConfig) -> CmdResult {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("run.cfg"), kv_format(cfg))?;
    let (analyzer, synth) = cfg.model_configs();
    let text = serde_json::to_string_pretty(&SavedModels { analyzer, synth }).expect("configs serialise");
    fs::write(dir.join(MODELS_FILE), text)?;
    Ok(())
}

/// Model configurations saved next to a checkpoint, falling back to the
/// run config.
fn saved_models(ckpt_dir: &Path, cfg: Option<&RunConfig>) -> Result<SavedModels, Failure> {
    let path = ckpt_dir.join(MODELS_FILE);
    if path.exists() {
        let text = fs::read_to_string(&path)?;
        return serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())));
    }
    match cfg {
        Some(c) => {
            let (analyzer, synth) = c.model_configs();
            Ok(SavedModels { analyzer, synth })
        }
        None => Err(Failure::Data(format!("{} not found", path.display()))),
    }
}

fn cmd_pretrain(cfg: &RunConfig, a: &PretrainArgs) -> CmdResult {
    let data = a.data.clone().unwrap_or_else(|| PathBuf::from(&cfg.paths.data));
    let ckpt = a.ckpt.clone().unwrap_or_else(|| PathBuf::from(&cfg.paths.checkpoints));
    let ds = open_dataset(&data)?;
    let train = prepare(&load_kind(&ds, RecordKind::Synthetic, SplitTag::Train)?)?;
    let valid = prepare(&load_kind(&ds, RecordKind::Synthetic, SplitTag::Valid)?)?;
    if train.is_empty() {
        return Err(Failure::Data(format!("{} has no synthetic training utterances", data.display())));
    }
    write_run_files(&ckpt, cfg)?;
    let (acfg, scfg) = cfg.model_configs();
    let policy = CheckpointPolicy { dir: Some(ckpt.clone()), every_epochs: 1, resume: a.resume };
    let mut log = training_log(&ckpt)?;
    if matches!(a.target, Target::Analyzer | Target::Both) {
        let analyzer = Analyzer::new(acfg, cfg.train.seed)?;
        pretrain_analyzer(analyzer, &train, &valid, &cfg.train, &policy, &mut log)?;
        log::info!("analyzer written to {}", ckpt.join("analyzer.ckpt").display());
    }
    if matches!(a.target, Target::Synth | Target::Both) {
        let synth = Synthesizer::new(scfg, cfg.train.seed.wrapping_add(1))?;
        pretrain_synthesizer(synth, &train, &valid, &cfg.train, &policy, &mut log)?;
        log::info!("synthesizer written to {}", ckpt.join("synth.ckpt").display());
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig, a: &TrainArgs) -> CmdResult {
    let data = a.data.clone().unwrap_or_else(|| PathBuf::from(&cfg.paths.data));
    let ckpt = a.ckpt.clone().unwrap_or_else(|| PathBuf::from(&cfg.paths.checkpoints));
    let mut train_cfg = cfg.train.clone();
    train_cfg.ablate_a_spectral |= a.ablate_a_spectral;
    let ds = open_dataset(&data)?;
    let mut real_train = load_kind(&ds, RecordKind::PseudoReal, SplitTag::Train)?;
    real_train.extend(load_kind(&ds, RecordKind::Real, SplitTag::Train)?);
    let mut real_valid = load_kind(&ds, RecordKind::PseudoReal, SplitTag::Valid)?;
    real_valid.extend(load_kind(&ds, RecordKind::Real, SplitTag::Valid)?);
    if real_train.is_empty() {
        return Err(Failure::Data(format!("{} has no pseudo-real or real training utterances", data.display())));
    }
    let synthetic = load_kind(&ds, RecordKind::Synthetic, SplitTag::Train)?;
    let models = saved_models(&ckpt, Some(cfg))?;
    let analyzer = load_analyzer(&ckpt.join("analyzer.ckpt"), models.analyzer)?;
    let synth = load_synthesizer(&ckpt.join("synth.ckpt"), models.synth)?;
    let policy = CheckpointPolicy { dir: Some(ckpt.clone()), every_epochs: 1, resume: a.resume };
    let mut log = training_log(&ckpt)?;
    let out = joint_train(
        analyzer,
        synth,
        &prepare(&real_train)?,
        &prepare(&real_valid)?,
        &prepare(&synthetic)?,
        &train_cfg,
        &policy,
        &mut log,
    )?;
    log::info!("joint training finished after {} steps ({} updates)", out.steps, out.updates);
    Ok(())
}

fn analyzer_from_checkpoint(path: &Path) -> Result<Analyzer<f32>, Failure> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let models = saved_models(dir, None)?;
    Ok(load_analyzer(path, models.analyzer)?)
}

fn write_pulses(path: &Path, samples: &[f64]) -> CmdResult {
    let mut text = String::with_capacity(samples.len() * 12);
    for v in samples {
        text.push_str(&format!("{v:.8e}\n"));
    }
    fs::write(path, text)?;
    Ok(())
}

fn cmd_analyze(a: &AnalyzeArgs) -> CmdResult {
    let analyzer = analyzer_from_checkpoint(&a.checkpoint)?;
    fs::create_dir_all(&a.out)?;
    match (&a.wav, &a.data) {
        (Some(wav), None) => {
            let audio = read_wav(wav)?;
            if audio.sample_rate != gci_core::dsp::AUDIO_RATE {
                return Err(Failure::Data(format!(
                    "{} is sampled at {} Hz; the analyzer needs 16000 Hz audio",
                    wav.display(),
                    audio.sample_rate
                )));
            }
            let stem = wav.file_stem().and_then(|s| s.to_str()).unwrap_or("audio");
            let pulses = analyzer.analyze(&audio)?;
            write_pulses(&a.out.join(format!("{stem}.pulses.txt")), &pulses.samples)?;
            write_gci_text(&a.out.join(format!("{stem}.gci.txt")), &flow_to_gci(&pulses, None)?)?;
        }
        (None, Some(data)) => {
            let ds = open_dataset(data)?;
            for i in 0..ds.len() {
                let r = ds.load(i)?;
                let pulses = analyzer.analyze(&r.audio)?;
                let mask = VoicingMask { voiced: r.voiced.clone(), frame_hop: r.frame_hop };
                write_pulses(&a.out.join(format!("{}.pulses.txt", r.id)), &pulses.samples)?;
                write_gci_text(&a.out.join(format!("{}.gci.txt", r.id)), &flow_to_gci(&pulses, Some(&mask))?)?;
            }
        }
        _ => return Err(Failure::Usage("analyze needs exactly one of --wav or --data".into())),
    }
    Ok(())
}

fn selected(ds: &Dataset, split: SplitArg, kind: KindArg) -> Result<Vec<UtteranceRecord>, Failure> {
    let split_ok = |s: SplitTag| match split {
        SplitArg::All => true,
        SplitArg::Train => s == SplitTag::Train,
        SplitArg::Valid => s == SplitTag::Valid,
        SplitArg::Test => s == SplitTag::Test,
    };
    let kind_ok = |k: RecordKind| match kind {
        KindArg::All => true,
        KindArg::Synthetic => k == RecordKind::Synthetic,
        KindArg::PseudoReal => k == RecordKind::PseudoReal,
        KindArg::Real => k == RecordKind::Real,
    };
    Ok(ds.load_where(|e| split_ok(e.split) && kind_ok(e.kind))?)
}

fn cmd_evaluate(cfg: &RunConfig, a: &EvaluateArgs) -> CmdResult {
    let data = a.data.clone().unwrap_or_else(|| PathBuf::from(&cfg.paths.data));
    let ds = open_dataset(&data)?;
    let records: Vec<UtteranceRecord> =
        selected(&ds, a.split, a.kind)?.into_iter().filter(|r| r.gci.is_some()).collect();
    if records.is_empty() {
        return Err(Failure::Data("no annotated utterances in the selection".into()));
    }
    let mut rows = Vec::new();
    let mut detail = Vec::new();
    if let Some(dir) = &a.detections {
        let mut files = Vec::new();
        for r in &records {
            let det = read_gci_text(&dir.join(format!("{}.gci.txt", r.id)))?;
            let (_, report) = evaluate_lists(&det, r.gci.as_ref().expect("filtered"))?;
            files.push(FileReport { file: r.id.clone(), speaker: r.speaker_id.clone(), report });
        }
        let agg = aggregate(&files)?;
        rows.push(ReportRow { model: "detections".into(), report: agg.total });
        detail.push(("detections".to_string(), files));
    }
    for m in &a.models {
        let (name, path) =
            m.split_once('=').ok_or_else(|| Failure::Usage(format!("--model expects NAME=PATH, got {m:?}")))?;
        let analyzer = analyzer_from_checkpoint(Path::new(path))?;
        let (files, agg) = evaluate_analyzer(&analyzer, &records)?;
        rows.push(ReportRow { model: name.to_string(), report: agg.total });
        detail.push((name.to_string(), files));
    }
    if rows.is_empty() {
        return Err(Failure::Usage("evaluate needs --detections or at least one --model".into()));
    }
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.paths.reports).join("report.tsv"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    emit_report(&rows, &out)?;
    let sidecar = serde_json::to_string_pretty(&detail).expect("reports serialise");
    fs::write(out.with_extension("json"), sidecar)?;
    print!("{}", format_report(&rows));
    if rows.iter().any(|r| !r.report.defined) {
        return Err(Failure::Data("metrics undefined: no reference GCIs were scored".into()));
    }
    Ok(())
}

fn cmd_report(cfg: &RunConfig, a: &ReportArgs) -> CmdResult {
    let mut rows = Vec::new();
    for p in &a.inputs {
        let text = fs::read_to_string(p)?;
        rows.extend(parse_report(&text)?);
    }
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.paths.reports).join("summary.tsv"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    emit_report(&rows, &out)?;
    print!("{}", format_report(&rows));
    Ok(())
}
