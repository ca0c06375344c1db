//! The `prismflow` command: one verb per pipeline stage.
//!
//! Every verb writes its outputs atomically and records the resolved
//! configuration next to them: inside the header of checkpoints, as the first
//! record of JSON-lines reports, and in a `<out>.meta.json` sidecar for CSV
//! files.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use prismflow::artifact::write_atomic;
use prismflow::checkpoint;
use prismflow::config::RunConfig;
use prismflow::datasets::{
    diagnostic_report, gen_bimodal_frequency, gen_sines, gen_velocity_mixture_diagnostic,
    load_csv, parse_mask_csv, save_csv, BimodalParams, Dataset, DiagnosticSpec, SinesParams,
    WindowMode,
};
use prismflow::experts::expert_spectra;
use prismflow::metrics::{
    correlational_score, discriminative_score, predictive_score, MetricReport,
};
use prismflow::numcore::rng::streams;
use prismflow::numcore::RngStream;
use prismflow::sampler::{
    export_samples, generate, generate_conditional_batch, ConditionMask, SampleMode,
};
use prismflow::spectra::{exact_dmd_with, spectral_overlap, DmdOptions, DmdSpectrum};
use prismflow::trainer::{fit, LambdaSchedule};
use prismflow::Error;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "PRISMFLOW_CONFIG";

#[derive(Debug, Parser)]
#[command(name = "prismflow", version, about = "Flow-matching time-series generator with routed Koopman experts")]
pub struct Cli {
    /// TOML config with optional [model], [objective], [train], [sampler]
    /// and [metrics] sections. Flags override file values.
    #[arg(long, global = true, env = CONFIG_ENV, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Log more (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a CSV dataset and write a checkpoint.
    Train(TrainArgs),
    /// Draw unconditional samples from a checkpoint.
    Sample(SampleArgs),
    /// Fill in the unobserved entries of windows (mask 1 = observed).
    Impute(ConditionArgs),
    /// Continue windows from their first timesteps.
    Forecast(ForecastArgs),
    /// Score generated windows against real ones (JSON-lines report).
    Eval(EvalArgs),
    /// DMD eigenvalues of real/generated data, or of the expert operators.
    Dmd(DmdArgs),
    /// Velocity-energy report for the two-mode diagnostic set.
    Diagnose(DiagnoseArgs),
    /// Write a synthetic dataset as CSV.
    GenData(GenDataArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Data CSV: header row of channel names, windows separated by blank lines.
    #[arg(long, value_name = "CSV")]
    pub data: PathBuf,
    /// Cut sliding windows of this many rows instead of using blocks as windows.
    #[arg(long)]
    pub window: Option<usize>,
    /// Rows between sliding windows.
    #[arg(long, default_value_t = 1, requires = "window")]
    pub stride: usize,
    #[arg(long)]
    pub seed: u64,
    /// Checkpoint path [default: the data path with extension .prfl].
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Training report [default: <out>.report.jsonl].
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Number of Koopman experts K.
    #[arg(long)]
    pub experts: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Weight of the router prior in the winner score.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub alpha_wta: Option<f64>,
    #[arg(long)]
    pub alpha_bal: Option<f64>,
    /// Time weighting of the expert terms: constant or linear-ramp.
    #[arg(long)]
    pub lambda: Option<LambdaSchedule>,
    /// Train on raw values instead of min-max normalized ones.
    #[arg(long)]
    pub no_normalize: bool,
}

/// Sampler flags shared by the generating verbs.
#[derive(Debug, Args)]
pub struct SamplerFlags {
    /// Euler steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Residual strength; 0 gives plain flow-matching sampling.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lambda: Option<LambdaSchedule>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_name = "CSV")]
    pub out: PathBuf,
    /// Also write the routed expert of every sample and step as CSV.
    #[arg(long, value_name = "CSV")]
    pub routing: Option<PathBuf>,
    #[command(flatten)]
    pub sampler: SamplerFlags,
}

#[derive(Debug, Args)]
pub struct ConditionArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Windows in the data CSV format; unobserved cells may hold any number.
    #[arg(long, value_name = "CSV")]
    pub observed: PathBuf,
    /// 0/1 CSV with the same layout as --observed.
    #[arg(long, value_name = "CSV")]
    pub mask: PathBuf,
    #[command(flatten)]
    pub guided: GuidedFlags,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "CSV")]
    pub observed: PathBuf,
    /// 0/1 CSV with the same layout as --observed.
    #[arg(long, value_name = "CSV", required_unless_present = "history", conflicts_with = "history")]
    pub mask: Option<PathBuf>,
    /// Observe the first H timesteps of every window.
    #[arg(long, value_name = "H")]
    pub history: Option<usize>,
    #[command(flatten)]
    pub guided: GuidedFlags,
}

#[derive(Debug, Args)]
pub struct GuidedFlags {
    /// Guidance strength.
    #[arg(long)]
    pub eta_g: Option<f64>,
    /// Backpropagate guidance through the network instead of the identity.
    #[arg(long)]
    pub exact_guidance: bool,
    /// Keep generated values on observed entries instead of the observations.
    #[arg(long)]
    pub no_clamp: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "CSV")]
    pub out: PathBuf,
    #[command(flatten)]
    pub sampler: SamplerFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricKind {
    Disc,
    Pred,
    Corr,
    Spectral,
}

impl MetricKind {
    fn name(self) -> &'static str {
        match self {
            MetricKind::Disc => "discriminative",
            MetricKind::Pred => "predictive",
            MetricKind::Corr => "correlational",
            MetricKind::Spectral => "spectral_overlap",
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "CSV")]
    pub real: PathBuf,
    #[arg(long, value_name = "CSV")]
    pub gen: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "disc,pred,corr,spectral")]
    pub metrics: Vec<MetricKind>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report file [default: stdout only].
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub dmd: DmdFlags,
}

#[derive(Debug, Args)]
pub struct DmdFlags {
    /// DMD truncation rank [default: min(10, numerical rank)].
    #[arg(long)]
    pub rank: Option<usize>,
    /// Consecutive steps stacked per DMD snapshot.
    #[arg(long, default_value_t = 1)]
    pub delay: usize,
}

#[derive(Debug, Args)]
pub struct DmdArgs {
    #[arg(long, value_name = "CSV", required_unless_present = "experts")]
    pub real: Option<PathBuf>,
    #[arg(long, value_name = "CSV", conflicts_with = "experts")]
    pub gen: Option<PathBuf>,
    /// Export the eigenvalues of each expert operator of --checkpoint.
    #[arg(long, requires = "checkpoint", conflicts_with = "real")]
    pub experts: bool,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "CSV")]
    pub out: PathBuf,
    #[command(flatten)]
    pub dmd: DmdFlags,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Comma-separated key=value pairs over c, w, n and dim.
    #[arg(long, default_value = "c=2,w=0.5")]
    pub spec: DiagnosticSpec,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    /// Independent sines per channel with random frequency and phase.
    Sines,
    /// Pure tones at one of two frequencies.
    Bimodal,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub kind: DataKind,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// Sines frequency range in cycles per window.
    #[arg(long)]
    pub freq_min: Option<f64>,
    #[arg(long)]
    pub freq_max: Option<f64>,
    /// Bimodal frequencies in cycles per window.
    #[arg(long)]
    pub f_low: Option<f64>,
    #[arg(long)]
    pub f_high: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "CSV")]
    pub out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Parses `argv` (including the program name) without running anything.
pub fn parse_args<I, T>(argv: I) -> Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    Cli::try_parse_from(argv)
}

/// Runs one command, printing results to stdout. Returns the exit status:
/// 0 on success, 1 on usage errors, 2 on runtime errors.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with_output(argv, &mut std::io::stdout().lock())
}

pub fn run_with_output<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match parse_args(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    init_logging(cli.verbose);
    match dispatch(&cli, out) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Outcome<()> {
    let base = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Train(a) => train(a, base, out),
        Command::Sample(a) => sample(a, base, out),
        Command::Impute(a) => {
            let conds = masked_conditions(&a.observed, &a.mask)?;
            conditional(&a.checkpoint, conds, &a.guided, SampleMode::Imputation, base, out)
        }
        Command::Forecast(a) => {
            let conds = match (&a.mask, a.history) {
                (Some(mask), _) => masked_conditions(&a.observed, mask)?,
                (None, Some(h)) => load_csv(&a.observed, WindowMode::Blocks)?
                    .windows()
                    .iter()
                    .map(|w| ConditionMask::forecast(w, h))
                    .collect::<prismflow::Result<_>>()?,
                (None, None) => return Err(Failure::Usage("forecast needs --mask or --history".into())),
            };
            conditional(&a.checkpoint, conds, &a.guided, SampleMode::Forecasting, base, out)
        }
        Command::Eval(a) => eval(a, base, out),
        Command::Dmd(a) => dmd(a, out),
        Command::Diagnose(a) => diagnose(a, out),
        Command::GenData(a) => gen_data(a, out),
    }
}

fn load_config(path: Option<&Path>) -> Outcome<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    RunConfig::from_toml(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))
}

fn checked(cfg: RunConfig) -> Outcome<RunConfig> {
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn emit(out: &mut dyn Write, record: &Value) -> Outcome<()> {
    writeln!(out, "{record}").map_err(|e| Failure::Runtime(Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    }))
}

fn json_lines(records: &[Value]) -> String {
    records.iter().map(|r| format!("{r}\n")).collect()
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

/// Writes a CSV artifact and its metadata sidecar; a failed sidecar write
/// removes the CSV again.
fn write_with_meta(path: &Path, write: impl FnOnce(&Path) -> prismflow::Result<()>, meta: &Value) -> Outcome<()> {
    write(path)?;
    let body = serde_json::to_vec_pretty(meta).expect("metadata serializes");
    if let Err(e) = write_atomic(&sidecar_path(path), &body) {
        let _ = std::fs::remove_file(path);
        return Err(e.into());
    }
    Ok(())
}

fn to_json(v: &impl serde::Serialize) -> Value {
    serde_json::to_value(v).expect("config serializes")
}

fn train(a: &TrainArgs, mut cfg: RunConfig, out: &mut dyn Write) -> Outcome<()> {
    cfg.train.seed = a.seed;
    set(&mut cfg.train.epochs, a.epochs);
    set(&mut cfg.train.batch_size, a.batch_size);
    set(&mut cfg.train.lr, a.lr);
    set(&mut cfg.model.experts, a.experts);
    set(&mut cfg.model.hidden, a.hidden);
    set(&mut cfg.model.latent_dim, a.latent_dim);
    set(&mut cfg.objective.wta.beta, a.beta);
    set(&mut cfg.objective.alpha_wta, a.alpha_wta);
    set(&mut cfg.objective.alpha_bal, a.alpha_bal);
    set(&mut cfg.objective.lambda, a.lambda);
    if a.no_normalize {
        cfg.train.normalize = false;
    }
    let mode = match a.window {
        Some(seq_len) => WindowMode::Sliding {
            seq_len,
            stride: a.stride,
        },
        None => WindowMode::Blocks,
    };
    let data = load_csv(&a.data, mode)?;
    cfg.model.seq_len = data.seq_len();
    cfg.model.channels = data.channels();
    let mut cfg = checked(cfg)?;

    let ckpt = a.out.clone().unwrap_or_else(|| a.data.with_extension("prfl"));
    let report_path = a.report.clone().unwrap_or_else(|| {
        let mut p = ckpt.as_os_str().to_owned();
        p.push(".report.jsonl");
        PathBuf::from(p)
    });

    let (model, report) = fit(&data, &cfg.training())?;
    cfg.model = model.config.clone();
    let resolved = json!({
        "command": "train",
        "data": a.data,
        "window": a.window,
        "stride": a.stride,
        "config": to_json(&cfg),
    });
    checkpoint::save(&ckpt, &model, &resolved)?;
    write_atomic(&report_path, report.to_json_lines().as_bytes())?;
    let last = report.epochs.last();
    emit(
        out,
        &json!({
            "record": "trained",
            "checkpoint": ckpt,
            "report": report_path,
            "epochs": report.epochs.len(),
            "final_total": last.map(|e| e.total),
            "expert_usage": last.map(|e| e.expert_usage.clone()),
        }),
    )
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_sampler_flags(cfg: &mut RunConfig, f: &SamplerFlags) {
    set(&mut cfg.sampler.steps, f.steps);
    set(&mut cfg.sampler.gamma, f.gamma);
    set(&mut cfg.sampler.lambda, f.lambda);
}

fn sample(a: &SampleArgs, mut cfg: RunConfig, out: &mut dyn Write) -> Outcome<()> {
    apply_sampler_flags(&mut cfg, &a.sampler);
    cfg.sampler.mode = SampleMode::Unconditional;
    let cfg = checked(cfg)?;
    let ck = checkpoint::load(&a.checkpoint)?;
    let rng = RngStream::new(a.seed, streams::SAMPLE);
    let generated = generate(&ck.model, a.n, &cfg.sampler, &rng)?;
    let meta = json!({
        "command": "sample",
        "checkpoint": a.checkpoint,
        "n": a.n,
        "seed": a.seed,
        "sampler": to_json(&cfg.sampler),
        "training": ck.resolved,
    });
    write_with_meta(&a.out, |p| export_samples(&generated.batch, p), &meta)?;
    if let Some(path) = &a.routing {
        let dt = cfg.sampler.dt();
        let mut csv = String::from("sample,step,t,expert\n");
        for (i, steps) in generated.winners.iter().enumerate() {
            for (j, k) in steps.iter().enumerate() {
                writeln!(csv, "{i},{j},{},{k}", j as f64 * dt).expect("writing to a string");
            }
        }
        write_with_meta(path, |p| write_atomic(p, csv.as_bytes()), &meta)?;
    }
    emit(out, &json!({ "record": "sampled", "out": a.out, "n": a.n }))
}

fn masked_conditions(observed: &Path, mask: &Path) -> Outcome<Vec<ConditionMask>> {
    let data = load_csv(observed, WindowMode::Blocks)?;
    let text = std::fs::read_to_string(mask).map_err(|e| Error::Io { path: mask.to_path_buf(), source: e })?;
    let blocks = parse_mask_csv(&text).map_err(|e| annotate_path(e, mask))?;
    if blocks.len() != data.len() {
        return Err(Error::Contract(format!(
            "mask has {} windows, observed data has {}",
            blocks.len(),
            data.len()
        ))
        .into());
    }
    data.windows()
        .iter()
        .zip(blocks)
        .map(|(w, b)| {
            let flat: Vec<bool> = b.into_iter().flatten().collect();
            Ok(ConditionMask::from_window(w, flat)?)
        })
        .collect()
}

fn annotate_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Parse {
            line,
            column,
            message,
        } => Error::Parse {
            line,
            column,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}

fn conditional(
    checkpoint_path: &Path,
    conds: Vec<ConditionMask>,
    g: &GuidedFlags,
    mode: SampleMode,
    mut cfg: RunConfig,
    out: &mut dyn Write,
) -> Outcome<()> {
    apply_sampler_flags(&mut cfg, &g.sampler);
    set(&mut cfg.sampler.eta_g, g.eta_g);
    if g.exact_guidance {
        cfg.sampler.exact_guidance = true;
    }
    if g.no_clamp {
        cfg.sampler.clamp_observed = false;
    }
    cfg.sampler.mode = mode;
    let cfg = checked(cfg)?;
    let ck = checkpoint::load(checkpoint_path)?;
    let conds = match &ck.model.normalization {
        Some(stats) => conds
            .iter()
            .map(|c| c.normalized(stats))
            .collect::<prismflow::Result<Vec<_>>>()?,
        None => conds,
    };
    let rng = RngStream::new(g.seed, streams::SAMPLE);
    let generated = generate_conditional_batch(&ck.model, &conds, &cfg.sampler, &rng)?;
    let verb = if mode == SampleMode::Imputation { "impute" } else { "forecast" };
    let meta = json!({
        "command": verb,
        "checkpoint": checkpoint_path,
        "seed": g.seed,
        "sampler": to_json(&cfg.sampler),
        "training": ck.resolved,
    });
    write_with_meta(&g.out, |p| export_samples(&generated.batch, p), &meta)?;
    emit(out, &json!({ "record": verb, "out": g.out, "windows": conds.len() }))
}

fn load_pair(real: &Path, gen: &Path) -> Outcome<(Dataset, Dataset)> {
    let real = load_csv(real, WindowMode::Blocks)?;
    let gen = load_csv(gen, WindowMode::Blocks)?;
    if real.seq_len() != gen.seq_len() || real.channels() != gen.channels() {
        return Err(Error::Shape(format!(
            "real windows are {}x{}, generated ones {}x{}",
            real.seq_len(),
            real.channels(),
            gen.seq_len(),
            gen.channels()
        ))
        .into());
    }
    Ok((real, gen))
}

fn dmd_options(f: &DmdFlags) -> Outcome<DmdOptions> {
    if f.delay == 0 || f.rank == Some(0) {
        return Err(Failure::Usage("--delay and --rank must be >= 1".into()));
    }
    Ok(DmdOptions {
        rank: f.rank,
        delay: f.delay,
    })
}

fn eval(a: &EvalArgs, cfg: RunConfig, out: &mut dyn Write) -> Outcome<()> {
    let cfg = checked(cfg)?;
    let opts = dmd_options(&a.dmd)?;
    let (real, gen) = load_pair(&a.real, &a.gen)?;
    let settings = json!({
        "metrics": to_json(&cfg.metrics),
        "dmd": { "rank": opts.rank, "delay": opts.delay },
    });
    let mut records = vec![json!({
        "record": "config",
        "command": "eval",
        "real": a.real,
        "gen": a.gen,
        "seed": a.seed,
        "settings": settings,
    })];
    for (i, kind) in a.metrics.iter().enumerate() {
        let mut rng = RngStream::new(a.seed, streams::METRIC).derive(i as u64);
        let report = match kind {
            MetricKind::Disc => {
                let o = discriminative_score(&real, &gen, &cfg.metrics, &mut rng)?;
                let mut r = MetricReport::new(kind.name(), o.score, &settings, a.seed)?;
                r.auxiliary.insert("accuracy".into(), o.accuracy);
                r.auxiliary.insert("test_size".into(), o.test_size as f64);
                r
            }
            MetricKind::Pred => {
                let v = predictive_score(&real, &gen, &cfg.metrics, &mut rng)?;
                MetricReport::new(kind.name(), v, &settings, a.seed)?
            }
            MetricKind::Corr => {
                let o = correlational_score(&real, &gen)?;
                let mut r = MetricReport::new(kind.name(), o.score, &settings, a.seed)?;
                r.warnings = o.warnings;
                r
            }
            MetricKind::Spectral => {
                let rs = exact_dmd_with(real.windows(), &opts)?;
                let gs = exact_dmd_with(gen.windows(), &opts)?;
                let mut r = MetricReport::new(kind.name(), spectral_overlap(&rs, &gs)?, &settings, a.seed)?;
                r.auxiliary.insert("real_rank".into(), rs.rank as f64);
                r.auxiliary.insert("gen_rank".into(), gs.rank as f64);
                r.warnings = rs.warnings.into_iter().chain(gs.warnings).collect();
                r
            }
        };
        let mut v = to_json(&report);
        v["record"] = json!("metric");
        records.push(v);
    }
    for r in &records[1..] {
        emit(out, r)?;
    }
    if let Some(path) = &a.out {
        write_atomic(path, json_lines(&records).as_bytes())?;
    }
    Ok(())
}

fn spectrum_rows(csv: &mut String, source: &str, s: &DmdSpectrum) {
    for (l, amp) in s.eigenvalues.iter().zip(&s.amplitudes) {
        writeln!(csv, "{source},{},{},{amp}", l.re, l.im).expect("writing to a string");
    }
}

fn dmd(a: &DmdArgs, out: &mut dyn Write) -> Outcome<()> {
    if a.experts {
        let path = a.checkpoint.as_deref().expect("clap requires --checkpoint");
        let ck = checkpoint::load(path)?;
        let mut csv = String::from("expert,re,im\n");
        for (k, l) in expert_spectra(&ck.model.bank)? {
            writeln!(csv, "{k},{},{}", l.re, l.im).expect("writing to a string");
        }
        let meta = json!({ "command": "dmd", "experts": true, "checkpoint": path, "training": ck.resolved });
        write_with_meta(&a.out, |p| write_atomic(p, csv.as_bytes()), &meta)?;
        return emit(out, &json!({ "record": "expert_spectra", "out": a.out, "experts": ck.model.bank.experts() }));
    }
    let opts = dmd_options(&a.dmd)?;
    let real_path = a.real.as_deref().expect("clap requires --real");
    let mut csv = String::from("source,re,im,amplitude\n");
    let mut summary = json!({
        "record": "summary",
        "command": "dmd",
        "real": real_path,
        "gen": a.gen,
        "rank": opts.rank,
        "delay": opts.delay,
    });
    let real_spec = match &a.gen {
        Some(gen_path) => {
            let (real, gen) = load_pair(real_path, gen_path)?;
            let rs = exact_dmd_with(real.windows(), &opts)?;
            let gs = exact_dmd_with(gen.windows(), &opts)?;
            spectrum_rows(&mut csv, "gen", &gs);
            summary["overlap"] = json!(spectral_overlap(&rs, &gs)?);
            summary["gen_rank"] = json!(gs.rank);
            summary["gen_warnings"] = json!(gs.warnings);
            rs
        }
        None => exact_dmd_with(load_csv(real_path, WindowMode::Blocks)?.windows(), &opts)?,
    };
    spectrum_rows(&mut csv, "real", &real_spec);
    summary["real_rank"] = json!(real_spec.rank);
    summary["real_warnings"] = json!(real_spec.warnings);
    // Put the real rows first.
    let (head, body) = csv.split_once('\n').expect("header line");
    let (gen_rows, real_rows): (Vec<&str>, Vec<&str>) = body.lines().partition(|l| l.starts_with("gen,"));
    let csv = std::iter::once(head)
        .chain(real_rows)
        .chain(gen_rows)
        .fold(String::new(), |mut s, l| {
            s.push_str(l);
            s.push('\n');
            s
        });
    write_with_meta(&a.out, |p| write_atomic(p, csv.as_bytes()), &summary)?;
    emit(out, &summary)
}

fn diagnose(a: &DiagnoseArgs, out: &mut dyn Write) -> Outcome<()> {
    let mut rng = RngStream::new(a.seed, streams::DATA);
    let pairs = gen_velocity_mixture_diagnostic(&a.spec, &mut rng)?;
    let report = diagnostic_report(&a.spec, &pairs);
    let mut record = to_json(&report);
    record["record"] = json!("diagnostic");
    record["spec"] = to_json(&a.spec);
    record["seed"] = json!(a.seed);
    if let Some(path) = &a.out {
        write_atomic(path, format!("{record}\n").as_bytes())?;
    }
    emit(out, &record)
}

fn gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Outcome<()> {
    let mut rng = RngStream::new(a.seed, streams::DATA);
    let (data, params) = match a.kind {
        DataKind::Sines => {
            let mut p = SinesParams::default();
            set(&mut p.n, a.n);
            set(&mut p.seq_len, a.seq_len);
            set(&mut p.channels, a.channels);
            set(&mut p.freq.0, a.freq_min);
            set(&mut p.freq.1, a.freq_max);
            (gen_sines(&p, &mut rng)?, to_json(&p))
        }
        DataKind::Bimodal => {
            let mut p = BimodalParams::default();
            set(&mut p.n, a.n);
            set(&mut p.seq_len, a.seq_len);
            set(&mut p.channels, a.channels);
            set(&mut p.f_low, a.f_low);
            set(&mut p.f_high, a.f_high);
            (gen_bimodal_frequency(&p, &mut rng)?, to_json(&p))
        }
    };
    let meta = json!({
        "command": "gen-data",
        "kind": format!("{:?}", a.kind).to_lowercase(),
        "seed": a.seed,
        "params": params,
        "labels": data.labels(),
    });
    write_with_meta(&a.out, |p| save_csv(&data, p), &meta)?;
    emit(out, &json!({ "record": "generated", "out": a.out, "windows": data.len() }))
}
