//! Command-line front end.
//!
//! Every command that writes files also writes `manifest.json` next to them:
//! the parsed arguments, input digests and output digests. `smec replay`
//! re-runs a manifest into a fresh directory and compares the outputs.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{AdapterStack, Compressor};
use crate::dataset::{
    load_embeddings_auto, load_qrels, random_signal_dims, save_embeddings, save_qrels, synth_planted, EmbeddingFormat,
    EmbeddingSet, PlantedSpec,
};
use crate::error::SmecError;
use crate::evaluation::{
    achievement_rate, evaluate_retrieval, identity_compressor, matched_joint_config, mean_ndcg, pca_fit, run_ablation,
    run_memory_sweep, ware_for_set, DEFAULT_WARE_SAMPLE, NDCG_K,
};
use crate::grad::{ratio_checks, scaling_probe, ProbeLoss};
use crate::memory::{DEFAULT_CAPACITY, DEFAULT_NEIGHBOR_K};
use crate::trainer::{
    train_mrl, train_smrl, StageReport, StepRecord, TrainConfig, TrainData, TrainMode, TrainObserver,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const MANIFEST: &str = "manifest.json";
pub const THREADS_ENV: &str = "SMEC_THREADS";

#[derive(Debug, Parser)]
#[command(name = "smec", version, about = "Sequential Matryoshka embedding compression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Train a compressor (staged or joint).
    Train(TrainArgs),
    /// nDCG@10 of compressed retrieval at one dimension.
    Eval(EvalArgs),
    /// Gradient, importance and ablation experiments.
    Analyze(AnalyzeArgs),
    /// Write a planted synthetic dataset.
    Synth(SynthArgs),
    /// Compress an embedding file with a checkpoint or a PCA fit.
    Export(ExportArgs),
    /// Re-run a manifest into a new directory and compare outputs.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Smrl,
    Mrl,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DataArgs {
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub docs: PathBuf,
    #[arg(long)]
    pub qrels: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainOpts {
    #[arg(long, value_enum, default_value = "smrl")]
    pub mode: ModeArg,
    /// Comma-separated dims, input dim first.
    #[arg(long, value_delimiter = ',', required = true)]
    pub trajectory: Vec<usize>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_CAPACITY)]
    pub memory_size: usize,
    #[arg(long, default_value_t = DEFAULT_NEIGHBOR_K)]
    pub neighbor_k: usize,
    #[arg(long)]
    pub pair_top_k: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// 0 disables early stopping.
    #[arg(long, default_value_t = 3)]
    pub patience: usize,
    /// Epoch cap per stage (per run in joint mode).
    #[arg(long, default_value_t = 20)]
    pub epoch_cap: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub min_delta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    /// Prefix truncation instead of learned selection.
    #[arg(long)]
    pub no_ads: bool,
    /// In-batch unsupervised pairs instead of cross-batch memory.
    #[arg(long)]
    pub no_memory: bool,
}

impl TrainOpts {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            mode: match self.mode {
                ModeArg::Smrl => TrainMode::Smrl,
                ModeArg::Mrl => TrainMode::Mrl,
            },
            trajectory: self.trajectory.clone(),
            batch_size: self.batch_size,
            epochs_per_stage: self.epoch_cap,
            learning_rate: self.lr,
            alpha: self.alpha,
            memory_capacity: self.memory_size,
            use_memory: !self.no_memory,
            adaptive_selection: !self.no_ads,
            neighbor_k: self.neighbor_k,
            pair_top_k: self.pair_top_k,
            patience: self.patience,
            min_delta: self.min_delta,
            val_fraction: self.val_fraction,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub opts: TrainOpts,
    /// Continue from a staged checkpoint; its dims must prefix the trajectory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Without a checkpoint the raw embeddings are scored.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Defaults to the smallest dim the checkpoint produces.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, default_value_t = NDCG_K)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AnalyzeArgs {
    #[command(subcommand)]
    pub what: AnalyzeCommand,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnalyzeCommand {
    /// Per-step gradient variance of staged and joint training at matched epochs.
    Gradients(ExperimentArgs),
    /// Per-dimension WARE ranking, plus achievement rates for a checkpoint.
    Ware(WareArgs),
    /// Five-row component ablation.
    Ablation(ExperimentArgs),
    /// Step time and quality across memory sizes.
    MemorySweep(SweepArgs),
    /// Gradient magnitude versus output dimension.
    Scaling(ScalingArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub opts: TrainOpts,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [100usize, 1000, 5000])]
    pub sizes: Vec<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct WareArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WARE_SAMPLE)]
    pub sample: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Staged checkpoint whose selections are scored against the ranking.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossArg {
    Mse,
    Ce,
    Rank,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ScalingArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [16usize, 32, 64, 128])]
    pub dims: Vec<usize>,
    #[arg(long, value_enum, default_value = "mse")]
    pub loss: LossArg,
    #[arg(long, default_value_t = 500)]
    pub trials: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatArg {
    Binary,
    Jsonl,
}

impl FormatArg {
    fn format(self) -> EmbeddingFormat {
        match self {
            FormatArg::Binary => EmbeddingFormat::Binary,
            FormatArg::Jsonl => EmbeddingFormat::Jsonl,
        }
    }

    fn extension(self) -> &'static str {
        match self {
            FormatArg::Binary => "smec",
            FormatArg::Jsonl => "jsonl",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Number of signal dims, drawn at random from the seed.
    #[arg(long, default_value_t = 16, conflicts_with = "signal_dims")]
    pub signal: usize,
    /// Explicit signal dims.
    #[arg(long, value_delimiter = ',')]
    pub signal_dims: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 200)]
    pub n_queries: usize,
    #[arg(long, default_value_t = 2000)]
    pub n_docs: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "binary")]
    pub format: FormatArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ExportArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, required_unless_present = "pca", conflicts_with = "pca")]
    pub checkpoint: Option<PathBuf>,
    /// Fit PCA on the input embeddings instead of using a checkpoint.
    #[arg(long)]
    pub pca: bool,
    #[arg(long)]
    pub dim: usize,
    #[arg(long, value_enum, default_value = "binary")]
    pub format: FormatArg,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub name: String,
    pub sha256: String,
    /// Holds wall-clock measurements, so replays are not expected to match.
    #[serde(default)]
    pub timing: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: Command,
    pub seed: Option<u64>,
    pub config: Option<TrainConfig>,
    pub inputs: Vec<FileDigest>,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| SmecError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

/// A failure with its exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<SmecError> for CliError {
    fn from(e: SmecError) -> Self {
        let msg = e.to_string();
        match e {
            SmecError::InvalidArgument(_) | SmecError::InvalidState(_) => CliError::Config(msg),
            SmecError::Format(_) | SmecError::Io { .. } | SmecError::Degenerate(_) => CliError::Data(msg),
            SmecError::NonFinite { .. } => CliError::Numeric(msg),
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::Data(format!("writing {}: {e}", path.display()))
}

type CliResult<T> = Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {}", e.message());
        return e.exit_code();
    }
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    // A pool configured earlier in the same process is kept.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs one command, writing its outputs and manifest.
pub fn execute(command: &Command) -> CliResult<()> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => match &a.what {
            AnalyzeCommand::Gradients(x) => cmd_gradients(x, command),
            AnalyzeCommand::Ware(x) => cmd_ware(x, command),
            AnalyzeCommand::Ablation(x) => cmd_ablation(x, command),
            AnalyzeCommand::MemorySweep(x) => cmd_memory_sweep(x, command),
            AnalyzeCommand::Scaling(x) => cmd_scaling(x, command),
        },
        Command::Synth(a) => cmd_synth(a),
        Command::Export(a) => cmd_export(a),
        Command::Replay(a) => cmd_replay(a),
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut f = BufReader::new(File::open(path).map_err(|e| SmecError::io(path, e))?);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| SmecError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Output directory plus the artifacts written into it so far.
struct RunOutput {
    dir: PathBuf,
    artifacts: Vec<(String, bool)>,
}

impl RunOutput {
    fn create(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| SmecError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn record(&mut self, name: &str, timing: bool) {
        if !self.artifacts.iter().any(|(n, _)| n == name) {
            self.artifacts.push((name.to_string(), timing));
        }
    }

    fn write_text(&mut self, name: &str, text: &str) -> CliResult<()> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| SmecError::io(&path, e))?;
        self.record(name, false);
        Ok(())
    }

    fn csv(&mut self, name: &str, timing: bool) -> CliResult<(csv::Writer<File>, PathBuf)> {
        let path = self.path(name);
        let w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        self.record(name, timing);
        Ok((w, path))
    }

    fn finish(
        self,
        command: &Command,
        seed: Option<u64>,
        config: Option<TrainConfig>,
        inputs: &[&Path],
    ) -> CliResult<()> {
        let inputs = inputs
            .iter()
            .map(|p| {
                Ok(FileDigest {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<CliResult<_>>()?;
        let artifacts = self
            .artifacts
            .iter()
            .map(|(name, timing)| {
                Ok(Artifact {
                    name: name.clone(),
                    sha256: sha256_file(&self.path(name))?,
                    timing: *timing,
                })
            })
            .collect::<CliResult<_>>()?;
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.clone(),
            seed,
            config,
            inputs,
            artifacts,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Data(e.to_string()))?;
        let path = self.path(MANIFEST);
        fs::write(&path, text + "\n").map_err(|e| SmecError::io(&path, e))?;
        Ok(())
    }
}

fn flush(mut w: csv::Writer<File>, path: &Path) -> CliResult<()> {
    w.flush()
        .map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))
}

fn load_data(data: &DataArgs, val_fraction: f64) -> CliResult<TrainData> {
    let queries = load_embeddings_auto(&data.queries)?;
    let docs = load_embeddings_auto(&data.docs)?;
    let qrels = load_qrels(&data.qrels)?;
    Ok(TrainData::new(queries, docs, qrels, val_fraction)?)
}

/// Writes checkpoints as stages complete and keeps per-step epochs for reports.
struct CheckpointWriter<'a> {
    out: &'a mut RunOutput,
    epochs: Vec<usize>,
}

impl TrainObserver for CheckpointWriter<'_> {
    fn on_step(&mut self, record: &StepRecord<'_>) {
        self.epochs.push(record.epoch);
    }

    fn on_stage_complete(&mut self, stack: &AdapterStack, _report: &StageReport) -> crate::error::Result<()> {
        let name = format!("stage_{}.ckpt", stack.len() - 1);
        stack.save(&self.out.path(&name))?;
        self.out.record(&name, false);
        Ok(())
    }
}

fn stage_csv_header(report: &StageReport) -> Vec<String> {
    let mut header: Vec<String> = ["step", "epoch", "train_loss", "grad_variance"]
        .map(String::from)
        .to_vec();
    if let Some(first) = report.grad_stats.first() {
        header.extend(first.group_means.iter().map(|(l, _)| format!("mean_abs_grad {l}")));
    }
    header
}

fn write_stage_reports(out: &mut RunOutput, stage: usize, report: &StageReport, epochs: &[usize]) -> CliResult<()> {
    let (mut w, path) = out.csv(&format!("stage_{stage}_steps.csv"), false)?;
    w.write_record(stage_csv_header(report))
        .map_err(|e| csv_err(&path, e))?;
    for (i, (stats, loss)) in report.grad_stats.iter().zip(&report.train_losses).enumerate() {
        let mut row = vec![
            stats.step.to_string(),
            epochs.get(i).map(ToString::to_string).unwrap_or_default(),
            loss.to_string(),
            stats.total_variance.to_string(),
        ];
        row.extend(stats.group_means.iter().map(|(_, v)| v.to_string()));
        w.write_record(&row).map_err(|e| csv_err(&path, e))?;
    }
    flush(w, &path)?;

    let (mut w, path) = out.csv(&format!("stage_{stage}_val.csv"), false)?;
    w.write_record(["epoch", "val_loss"]).map_err(|e| csv_err(&path, e))?;
    for (e, v) in report.val_losses.iter().enumerate() {
        w.write_record([e.to_string(), v.to_string()])
            .map_err(|e| csv_err(&path, e))?;
    }
    flush(w, &path)
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let cfg = a.opts.config();
    cfg.validate()?;
    println!("seed {}", cfg.seed);
    let data = load_data(&a.data, cfg.val_fraction)?;
    let resume = match &a.resume {
        None => None,
        Some(p) => match Compressor::load(p)? {
            Compressor::Stack(s) => Some(s),
            Compressor::Mrl(_) => {
                return Err(CliError::Config(format!(
                    "{} is a joint-training checkpoint; only staged checkpoints can be resumed",
                    p.display()
                )))
            }
        },
    };
    if resume.is_some() && cfg.mode == TrainMode::Mrl {
        return Err(CliError::Config("--resume requires --mode smrl".into()));
    }
    let mut out = RunOutput::create(&a.out)?;
    let first_stage = resume.as_ref().map_or(0, AdapterStack::len);
    let mut writer = CheckpointWriter {
        out: &mut out,
        epochs: Vec::new(),
    };
    let reports = match cfg.mode {
        TrainMode::Smrl => train_smrl(resume, &data, &cfg, &mut writer)?.1,
        TrainMode::Mrl => {
            let (adapter, report) = train_mrl(&data, &cfg, &mut writer)?;
            let path = writer.out.path("mrl.ckpt");
            Compressor::Mrl(adapter).save(&path)?;
            writer.out.record("mrl.ckpt", false);
            vec![report]
        }
    };
    let epochs = std::mem::take(&mut writer.epochs);
    let mut offset = 0;
    for (i, r) in reports.iter().enumerate() {
        write_stage_reports(&mut out, first_stage + i, r, &epochs[offset..offset + r.steps])?;
        offset += r.steps;
        println!(
            "stage {} {}->{}: {} steps, {} epochs, final val loss {:.6}",
            first_stage + i,
            r.in_dim,
            r.out_dim,
            r.steps,
            r.epochs,
            r.final_val_loss
        );
    }
    let mut inputs = vec![a.data.queries.as_path(), a.data.docs.as_path(), a.data.qrels.as_path()];
    if let Some(p) = &a.resume {
        inputs.push(p);
    }
    out.finish(&Command::Train(a.clone()), Some(cfg.seed), Some(cfg), &inputs)
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let queries = load_embeddings_auto(&a.data.queries)?;
    let docs = load_embeddings_auto(&a.data.docs)?;
    let qrels = load_qrels(&a.data.qrels)?;
    let compressor = match &a.checkpoint {
        Some(p) => Compressor::load(p)?,
        None => identity_compressor(queries.dim())?,
    };
    if compressor.input_dim() != queries.dim() || compressor.input_dim() != docs.dim() {
        return Err(CliError::Data(format!(
            "checkpoint expects dim {}, queries have {} and docs {}",
            compressor.input_dim(),
            queries.dim(),
            docs.dim()
        )));
    }
    let dims = compressor.dims();
    let dim = a.dim.unwrap_or(*dims.last().expect("non-empty dims"));
    if !dims.contains(&dim) {
        return Err(CliError::Config(format!(
            "dim {dim} not available; checkpoint dims are {dims:?}"
        )));
    }
    if a.k == 0 {
        return Err(CliError::Config("--k must be at least 1".into()));
    }
    let rows: Vec<usize> = (0..queries.len()).collect();
    let scores = evaluate_retrieval(&compressor, &queries, &docs, &qrels, &rows, dim, a.k)?;
    let mean = mean_ndcg(&scores);
    let mut out = RunOutput::create(&a.out)?;
    let (mut w, path) = out.csv(&format!("eval_dim{dim}.csv"), false)?;
    w.write_record(["query_id", &format!("ndcg@{}", a.k), "zero_relevant"])
        .map_err(|e| csv_err(&path, e))?;
    for s in &scores {
        w.write_record([s.query_id.as_str(), &s.ndcg.to_string(), &s.zero_relevant.to_string()])
            .map_err(|e| csv_err(&path, e))?;
    }
    w.write_record(["mean", &mean.to_string(), ""])
        .map_err(|e| csv_err(&path, e))?;
    flush(w, &path)?;
    let flagged = scores.iter().filter(|s| s.zero_relevant).count();
    println!(
        "dim {dim}: mean nDCG@{} {mean:.6} over {} queries ({flagged} without relevant docs)",
        a.k,
        scores.len()
    );
    let mut inputs = vec![a.data.queries.as_path(), a.data.docs.as_path(), a.data.qrels.as_path()];
    if let Some(p) = &a.checkpoint {
        inputs.push(p);
    }
    out.finish(&Command::Eval(a.clone()), None, None, &inputs)
}

fn data_inputs(d: &DataArgs) -> [&Path; 3] {
    [d.queries.as_path(), d.docs.as_path(), d.qrels.as_path()]
}

fn cmd_gradients(a: &ExperimentArgs, command: &Command) -> CliResult<()> {
    let staged = TrainConfig {
        mode: TrainMode::Smrl,
        ..a.opts.config()
    };
    staged.validate()?;
    println!("seed {}", staged.seed);
    let data = load_data(&a.data, staged.val_fraction)?;
    let joint = matched_joint_config(&staged);
    let (_, smrl_reports) = train_smrl(None, &data, &staged, &mut crate::trainer::NoopObserver)?;
    let (_, mrl_report) = train_mrl(&data, &joint, &mut crate::trainer::NoopObserver)?;

    let mut out = RunOutput::create(&a.out)?;
    let (mut w, path) = out.csv("gradient_variance.csv", false)?;
    w.write_record(["mode", "stage", "step", "train_loss", "grad_variance"])
        .map_err(|e| csv_err(&path, e))?;
    let (mut g, gpath) = out.csv("gradient_groups.csv", false)?;
    g.write_record(["mode", "stage", "step", "group", "mean_abs_grad"])
        .map_err(|e| csv_err(&gpath, e))?;
    let runs = smrl_reports
        .iter()
        .enumerate()
        .map(|(i, r)| ("smrl", i, r))
        .chain(std::iter::once(("mrl", 0, &mrl_report)));
    for (mode, stage, r) in runs {
        for (s, loss) in r.grad_stats.iter().zip(&r.train_losses) {
            w.write_record([
                mode,
                &stage.to_string(),
                &s.step.to_string(),
                &loss.to_string(),
                &s.total_variance.to_string(),
            ])
            .map_err(|e| csv_err(&path, e))?;
            for (label, v) in &s.group_means {
                g.write_record([mode, &stage.to_string(), &s.step.to_string(), label, &v.to_string()])
                    .map_err(|e| csv_err(&gpath, e))?;
            }
        }
    }
    flush(w, &path)?;
    flush(g, &gpath)?;
    let (mut v, vpath) = out.csv("validation_loss.csv", false)?;
    v.write_record(["mode", "stage", "epoch", "val_loss"])
        .map_err(|e| csv_err(&vpath, e))?;
    for (i, r) in smrl_reports.iter().enumerate() {
        for (e, loss) in r.val_losses.iter().enumerate() {
            v.write_record(["smrl", &i.to_string(), &e.to_string(), &loss.to_string()])
                .map_err(|e| csv_err(&vpath, e))?;
        }
    }
    for (e, loss) in mrl_report.val_losses.iter().enumerate() {
        v.write_record(["mrl", "0", &e.to_string(), &loss.to_string()])
            .map_err(|e| csv_err(&vpath, e))?;
    }
    flush(v, &vpath)?;
    println!(
        "staged final val loss {:.6}, joint final val loss {:.6}",
        smrl_reports.last().map_or(f64::NAN, |r| r.final_val_loss),
        mrl_report.final_val_loss
    );
    out.finish(command, Some(staged.seed), Some(staged), &data_inputs(&a.data))
}

fn cmd_ware(a: &WareArgs, command: &Command) -> CliResult<()> {
    println!("seed {}", a.seed);
    if a.sample == 0 {
        return Err(CliError::Config("--sample must be at least 1".into()));
    }
    let set = load_embeddings_auto(&a.embeddings)?;
    if set.len() < 2 {
        return Err(CliError::Data(format!(
            "{} needs at least two rows",
            a.embeddings.display()
        )));
    }
    let report = ware_for_set(&set, a.sample, a.seed)?;
    let mut out = RunOutput::create(&a.out)?;
    let map: serde_json::Map<String, serde_json::Value> = report
        .values
        .iter()
        .enumerate()
        .map(|(d, v)| (d.to_string(), serde_json::json!(v)))
        .collect();
    let text =
        serde_json::to_string_pretty(&serde_json::Value::Object(map)).map_err(|e| CliError::Data(e.to_string()))?;
    out.write_text("ware.json", &(text + "\n"))?;
    let (mut w, path) = out.csv("ware.csv", false)?;
    w.write_record(["rank", "dimension", "ware", "excluded_pairs"])
        .map_err(|e| csv_err(&path, e))?;
    for (rank, &d) in report.ranking.iter().enumerate() {
        w.write_record([
            rank.to_string(),
            d.to_string(),
            report.values[d].to_string(),
            report.excluded[d].to_string(),
        ])
        .map_err(|e| csv_err(&path, e))?;
    }
    flush(w, &path)?;

    let mut inputs = vec![a.embeddings.as_path()];
    if let Some(ck) = &a.checkpoint {
        let stack = match Compressor::load(ck)? {
            Compressor::Stack(s) => s,
            Compressor::Mrl(_) => return Err(CliError::Config("achievement rates need a staged checkpoint".into())),
        };
        if stack.input_dim() != set.dim() {
            return Err(CliError::Data(format!(
                "checkpoint input dim {} differs from embedding dim {}",
                stack.input_dim(),
                set.dim()
            )));
        }
        let (mut w, path) = out.csv("achievement.csv", false)?;
        w.write_record(["dim", "selected_rate", "prefix_rate"])
            .map_err(|e| csv_err(&path, e))?;
        for s in 0..stack.len() {
            let kept = stack.composed_indices(s)?;
            let n = kept.len();
            let prefix: Vec<usize> = (0..n).collect();
            let rate = achievement_rate(&kept, &report.ranking, n)?;
            let base = achievement_rate(&prefix, &report.ranking, n)?;
            w.write_record([n.to_string(), rate.to_string(), base.to_string()])
                .map_err(|e| csv_err(&path, e))?;
            println!("dim {n}: achievement {rate:.3} (prefix {base:.3})");
        }
        flush(w, &path)?;
        inputs.push(ck);
    }
    out.finish(command, Some(a.seed), None, &inputs)
}

fn cmd_ablation(a: &ExperimentArgs, command: &Command) -> CliResult<()> {
    let cfg = TrainConfig {
        mode: TrainMode::Smrl,
        ..a.opts.config()
    };
    cfg.validate()?;
    println!("seed {}", cfg.seed);
    let data = load_data(&a.data, cfg.val_fraction)?;
    let table = run_ablation(&data, &cfg)?;
    let mut out = RunOutput::create(&a.out)?;
    let (mut w, path) = out.csv("ablation.csv", false)?;
    let mut header = vec!["variant".to_string()];
    header.extend(table.dims.iter().map(|d| format!("ndcg@10 dim {d}")));
    w.write_record(&header).map_err(|e| csv_err(&path, e))?;
    for row in &table.rows {
        let mut rec = vec![row.name.clone()];
        rec.extend(row.ndcg.iter().map(ToString::to_string));
        w.write_record(&rec).map_err(|e| csv_err(&path, e))?;
        println!(
            "{:<10} {}",
            row.name,
            row.ndcg.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" ")
        );
    }
    flush(w, &path)?;
    out.finish(command, Some(cfg.seed), Some(cfg), &data_inputs(&a.data))
}

fn cmd_memory_sweep(a: &SweepArgs, command: &Command) -> CliResult<()> {
    let cfg = a.experiment.opts.config();
    cfg.validate()?;
    println!("seed {}", cfg.seed);
    let data = load_data(&a.experiment.data, cfg.val_fraction)?;
    let rows = run_memory_sweep(&data, &cfg, &a.sizes)?;
    let mut out = RunOutput::create(&a.experiment.out)?;
    let (mut w, path) = out.csv("memory_sweep.csv", true)?;
    for r in &rows {
        w.serialize(r).map_err(|e| csv_err(&path, e))?;
        println!(
            "memory {:>6}: {:.3} ms/step, mean bank {:.0}, nDCG@10 {:.4}",
            r.memory_size,
            r.mean_step_secs * 1e3,
            r.mean_bank_len,
            r.ndcg_at_10
        );
    }
    flush(w, &path)?;
    out.finish(command, Some(cfg.seed), Some(cfg), &data_inputs(&a.experiment.data))
}

fn cmd_scaling(a: &ScalingArgs, command: &Command) -> CliResult<()> {
    println!("seed {}", a.seed);
    let loss = match a.loss {
        LossArg::Mse => ProbeLoss::Mse,
        LossArg::Ce => ProbeLoss::Ce,
        LossArg::Rank => ProbeLoss::Rank,
    };
    let rows = scaling_probe(&a.dims, loss, a.trials, a.seed)?;
    let mut out = RunOutput::create(&a.out)?;
    let (mut w, path) = out.csv("scaling.csv", false)?;
    w.write_record(["dim", "mean_projection_norm", "mean_grad_norm"])
        .map_err(|e| csv_err(&path, e))?;
    for r in &rows {
        w.write_record([r.dim.to_string(), r.mean_norm.to_string(), r.mean_grad.to_string()])
            .map_err(|e| csv_err(&path, e))?;
    }
    flush(w, &path)?;
    let (mut w, path) = out.csv("scaling_ratios.csv", false)?;
    w.write_record(["dim_a", "dim_b", "measured_ratio", "predicted_ratio", "rel_error"])
        .map_err(|e| csv_err(&path, e))?;
    for c in ratio_checks(&rows) {
        w.write_record([
            c.dim_a.to_string(),
            c.dim_b.to_string(),
            c.measured.to_string(),
            c.predicted.to_string(),
            c.rel_error.to_string(),
        ])
        .map_err(|e| csv_err(&path, e))?;
        println!(
            "{} vs {}: measured {:.4}, predicted {:.4}",
            c.dim_a, c.dim_b, c.measured, c.predicted
        );
    }
    flush(w, &path)?;
    out.finish(command, Some(a.seed), None, &[])
}

fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    println!("seed {}", a.seed);
    let signal_dims = match &a.signal_dims {
        Some(d) => d.clone(),
        None => random_signal_dims(a.dim, a.signal, a.seed)?,
    };
    let spec = PlantedSpec {
        total_dim: a.dim,
        signal_dims,
        noise_scale: a.noise,
        n_queries: a.n_queries,
        n_docs: a.n_docs,
        seed: a.seed,
    };
    let p = synth_planted(&spec)?;
    let mut out = RunOutput::create(&a.out)?;
    for (stem, set) in [("queries", &p.queries), ("docs", &p.docs)] {
        let name = format!("{stem}.{}", a.format.extension());
        save_embeddings(set, &out.path(&name), a.format.format())?;
        out.record(&name, false);
    }
    save_qrels(&p.qrels, &out.path("qrels.tsv"))?;
    out.record("qrels.tsv", false);
    let text = serde_json::to_string_pretty(&spec).map_err(|e| CliError::Data(e.to_string()))?;
    out.write_text("planted.json", &(text + "\n"))?;
    println!("signal dims {:?}", spec.signal_dims);
    out.finish(&Command::Synth(a.clone()), Some(a.seed), None, &[])
}

fn cmd_export(a: &ExportArgs) -> CliResult<()> {
    let set = load_embeddings_auto(&a.embeddings)?;
    let compressed = if a.pca {
        if a.dim > set.dim() {
            return Err(CliError::Config(format!(
                "--dim {} exceeds embedding dim {}",
                a.dim,
                set.dim()
            )));
        }
        pca_fit(&set, a.dim)?.transform(&set)?
    } else {
        let path = a.checkpoint.as_ref().expect("clap requires a checkpoint without --pca");
        let c = Compressor::load(path)?;
        if !c.dims().contains(&a.dim) {
            return Err(CliError::Config(format!(
                "dim {} not available; checkpoint dims are {:?}",
                a.dim,
                c.dims()
            )));
        }
        if c.input_dim() != set.dim() {
            return Err(CliError::Data(format!(
                "checkpoint expects dim {}, embeddings have {}",
                c.input_dim(),
                set.dim()
            )));
        }
        let rows: Vec<Vec<f64>> = (0..set.len())
            .map(|i| c.embed(set.row(i), a.dim))
            .collect::<crate::error::Result<_>>()?;
        EmbeddingSet::from_rows(set.ids().to_vec(), &rows)?
    };
    let mut out = RunOutput::create(&a.out)?;
    let name = format!("embeddings_dim{}.{}", a.dim, a.format.extension());
    save_embeddings(&compressed, &out.path(&name), a.format.format())?;
    out.record(&name, false);
    println!("wrote {} rows at dim {}", compressed.len(), a.dim);
    let mut inputs = vec![a.embeddings.as_path()];
    if let Some(p) = &a.checkpoint {
        inputs.push(p);
    }
    out.finish(&Command::Export(a.clone()), None, None, &inputs)
}

/// Points every output path of `command` at `out`.
fn retarget(command: &Command, out: &Path) -> CliResult<Command> {
    let mut c = command.clone();
    let slot = match &mut c {
        Command::Train(a) => &mut a.out,
        Command::Eval(a) => &mut a.out,
        Command::Synth(a) => &mut a.out,
        Command::Export(a) => &mut a.out,
        Command::Analyze(a) => match &mut a.what {
            AnalyzeCommand::Gradients(x) | AnalyzeCommand::Ablation(x) => &mut x.out,
            AnalyzeCommand::Ware(x) => &mut x.out,
            AnalyzeCommand::MemorySweep(x) => &mut x.experiment.out,
            AnalyzeCommand::Scaling(x) => &mut x.out,
        },
        Command::Replay(_) => return Err(CliError::Config("a replay manifest cannot itself be replayed".into())),
    };
    *slot = out.to_path_buf();
    Ok(c)
}

fn cmd_replay(a: &ReplayArgs) -> CliResult<()> {
    let manifest = RunManifest::load(&a.manifest)?;
    for input in &manifest.inputs {
        let now = sha256_file(Path::new(&input.path))?;
        if now != input.sha256 {
            return Err(CliError::Data(format!(
                "input {} changed since the recorded run",
                input.path
            )));
        }
    }
    let command = retarget(&manifest.command, &a.out)?;
    execute(&command)?;
    let mut mismatched = Vec::new();
    for art in manifest.artifacts.iter().filter(|x| !x.timing) {
        let path = a.out.join(&art.name);
        let got = if path.exists() {
            sha256_file(&path)?
        } else {
            String::new()
        };
        if got != art.sha256 {
            mismatched.push(art.name.clone());
        }
    }
    let skipped = manifest.artifacts.iter().filter(|x| x.timing).count();
    if mismatched.is_empty() {
        println!(
            "replay matches: {} artifacts identical ({skipped} timing artifacts skipped)",
            manifest.artifacts.len() - skipped
        );
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "replay differs in {}",
            mismatched.join(", ")
        )))
    }
}
