//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 when a command fails at runtime, 2 on a usage
//! error (bad flags, missing required arguments, unreadable config syntax).

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{
    apply_missing_pattern, generate_synthetic, read_embeddings, write_embeddings, EmbeddingSet, MissingMode, Modality,
    SyntheticSpec,
};
use crate::dit::Gating;
use crate::evaluation::gates::probe_batch;
use crate::evaluation::{
    ablation_matrix, category_similarity, evaluate_cell, gate_statistics, robustness_sweep, BenchConfig, Benchmark,
    Completion, EvalReport, GateReport, Variant,
};
use crate::restoration::{complete_dataset, pca_project, record_trajectory, sample_seed, Snapshot};
use crate::schedule::DdimPlan;
use crate::training::{TrainConfig, TrainData, TrainReport, TrainState};

pub const SEED_ENV: &str = "FEATRESTORE_SEED";

#[derive(Debug, Parser)]
#[command(name = "featrestore", version, about = "Restore missing image/text embeddings with feature-space diffusion")]
pub struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic benchmark as train/test FEMB files.
    GenData(GenDataArgs),
    /// Train the two restoration models and save a checkpoint.
    Train(TrainArgs),
    /// Apply a missing pattern and fill the gaps from a checkpoint.
    Restore(RestoreArgs),
    /// Score restored against zero-filled completion at one missing rate.
    Eval(EvalArgs),
    /// Missing-rate robustness sweep.
    Sweep(SweepArgs),
    /// Gate activation statistics of a checkpoint.
    GateStats(GateStatsArgs),
    /// Train and score the ablation variants.
    Ablate(AblateArgs),
    /// PCA projection of intermediate restoration states.
    Trajectory(TrajectoryArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Synthetic spec in TOML or JSON; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for train.femb and test.femb.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config in TOML or JSON; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// FEMB file; its complete pairs are the training data.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path; a `.report.json` is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mutual: Option<Switch>,
    #[arg(long)]
    pub gating: Option<Gating>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub tau: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RestoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Missing rate in percent applied before restoring.
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
    #[arg(long, value_enum, default_value_t = MissingMode::MissingBoth)]
    pub mode: MissingMode,
    /// DDIM steps.
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Benchmark config (probe, DDIM steps, restoration) in TOML or JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Train split FEMB file.
    #[arg(long)]
    pub train: PathBuf,
    /// Test split FEMB file.
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub probe_epochs: Option<usize>,
    /// Output directory for report.json and CSV tables.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub bench: BenchArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 70.0)]
    pub eta: f64,
    #[arg(long, value_enum, default_value_t = MissingMode::MissingBoth)]
    pub mode: MissingMode,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub bench: BenchArgs,
    /// One checkpoint per seed; the cell seed is the checkpoint's training seed.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [10.0, 30.0, 50.0, 70.0, 90.0])]
    pub etas: Vec<f64>,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [MissingMode::MissingBoth])]
    pub modes: Vec<MissingMode>,
    /// Worker threads for independent cells.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct GateStatsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// FEMB file whose complete pairs form the probe batch.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub bench: BenchArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 70.0)]
    pub eta: f64,
    #[arg(long, value_enum, default_value_t = MissingMode::MissingBoth)]
    pub mode: MissingMode,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct TrajectoryArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Modality to restore; the other one is the condition.
    #[arg(long, value_enum, default_value_t = ModalityArg::Image)]
    pub restore: ModalityArg,
    /// Samples to trace.
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    Image,
    Text,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Image => Modality::Image,
            ModalityArg::Text => Modality::Text,
        }
    }
}

/// A command failure and the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Restore(a) => restore_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::GateStats(a) => gate_stats_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Trajectory(a) => trajectory_cmd(a),
    }
}

/// Reads a TOML or JSON file (by extension; TOML otherwise) as a JSON value.
fn read_config_value(path: &Path) -> CliResult<serde_json::Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let value = if is_json {
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
    } else {
        let t: toml::Value = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        serde_json::to_value(t)?
    };
    Ok(value)
}

fn parse_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<(T, serde_json::Value)> {
    match path {
        None => Ok((T::default(), serde_json::Value::Null)),
        Some(p) => {
            let v = read_config_value(p)?;
            let cfg = serde_json::from_value(v.clone()).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            Ok((cfg, v))
        }
    }
}

/// Flag, then config file, then the environment, then 0.
fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> CliResult<u64> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn file_seed(v: &serde_json::Value) -> Option<u64> {
    v.get("seed").and_then(|s| s.as_u64())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let (mut spec, raw): (SyntheticSpec, _) = parse_config(a.config.as_deref())?;
    if let Some(v) = a.clusters {
        spec.n_clusters = v;
    }
    if let Some(v) = a.dim {
        spec.d_feature = v;
    }
    if let Some(v) = a.n {
        spec.n_samples = v;
    }
    spec.seed = resolve_seed(a.seed, file_seed(&raw))?;
    log::info!("synthetic spec: {}", serde_json::to_string(&spec)?);
    let data = generate_synthetic(&spec)?;
    std::fs::create_dir_all(&a.out)?;
    write_embeddings(&data.train, &a.out.join("train.femb"))?;
    write_embeddings(&data.test, &a.out.join("test.femb"))?;
    write_json(&a.out.join("spec.json"), &spec)?;
    println!(
        "wrote {} train and {} test samples to {}",
        data.train.len(),
        data.test.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config: &'a TrainConfig,
    seed: u64,
    data: String,
    complete_pairs: usize,
    steps: u64,
    runtime_s: f64,
    report: &'a TrainReport,
}

fn train_cmd(a: TrainArgs) -> CliResult<()> {
    let (mut cfg, raw): (TrainConfig, _) = parse_config(a.config.as_deref())?;
    cfg.seed = resolve_seed(a.seed, file_seed(&raw))?;
    if let Some(m) = a.mutual {
        cfg.mutual_enabled = m == Switch::On;
    }
    if let Some(g) = a.gating {
        cfg.model.gating = g;
    }
    if let Some(v) = a.depth {
        cfg.model.depth = v;
    }
    if let Some(v) = a.d_model {
        cfg.model.d_model = v;
    }
    if let Some(v) = a.tau {
        cfg.tau = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.grad_clip {
        cfg.grad_clip = Some(v);
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    log::info!("train config: {}", serde_json::to_string(&cfg)?);
    let set = read_embeddings(&a.data)?;
    let t0 = Instant::now();
    let (state, report) = crate::training::train(&set, cfg.clone())?;
    save_checkpoint(&state, &a.out)?;
    let summary = TrainSummary {
        config: &cfg,
        seed: cfg.seed,
        data: a.data.display().to_string(),
        complete_pairs: set.complete_only().len(),
        steps: state.step,
        runtime_s: t0.elapsed().as_secs_f64(),
        report: &report,
    };
    write_json(&report_path(&a.out), &summary)?;
    match report.epochs.last() {
        Some(e) => println!(
            "trained {} epochs ({} steps), final total loss {:.5}; checkpoint {}",
            e.epoch,
            state.step,
            e.total,
            a.out.display()
        ),
        None => println!("no training epochs; checkpoint {}", a.out.display()),
    }
    Ok(())
}

fn report_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".report.json");
    PathBuf::from(s)
}

#[derive(Serialize)]
struct RestoreSummary {
    checkpoint: String,
    data: String,
    eta: f64,
    mode: MissingMode,
    steps: usize,
    seed: u64,
    samples: usize,
    restored_image: usize,
    restored_text: usize,
    passed_through: usize,
}

fn restore_cmd(a: RestoreArgs) -> CliResult<()> {
    if a.steps == 0 {
        return Err(CliError::Usage("--steps must be positive".into()));
    }
    let seed = resolve_seed(a.seed, None)?;
    let state = load_checkpoint(&a.checkpoint)?;
    let set = read_embeddings(&a.data)?;
    let masked = apply_missing_pattern(&set.samples, a.eta, a.mode, sample_seed(seed, "pattern"))?;
    let plan = DdimPlan::new(&state.schedule, a.steps)?;
    let (done, counts) = complete_dataset(&masked, &state, &plan, seed, a.batch)?;
    let out = EmbeddingSet {
        samples: done,
        ..set
    };
    write_embeddings(&out, &a.out)?;
    let summary = RestoreSummary {
        checkpoint: a.checkpoint.display().to_string(),
        data: a.data.display().to_string(),
        eta: a.eta,
        mode: a.mode,
        steps: a.steps,
        seed,
        samples: out.len(),
        restored_image: counts.restored_image,
        restored_text: counts.restored_text,
        passed_through: counts.passed_through,
    };
    write_json(&report_path(&a.out), &summary)?;
    println!(
        "restored {} image and {} text features, {} samples unchanged; wrote {}",
        counts.restored_image,
        counts.restored_text,
        counts.passed_through,
        a.out.display()
    );
    Ok(())
}

fn load_bench(b: &BenchArgs) -> CliResult<(Benchmark, BenchConfig)> {
    let (mut cfg, _): (BenchConfig, _) = parse_config(b.config.as_deref())?;
    if let Some(v) = b.steps {
        cfg.ddim_steps = v;
    }
    if let Some(v) = b.probe_epochs {
        cfg.probe.epochs = v;
    }
    if cfg.ddim_steps == 0 {
        return Err(CliError::Usage("DDIM steps must be positive".into()));
    }
    let train = read_embeddings(&b.train)?;
    let test = read_embeddings(&b.test)?;
    let n_classes = train
        .samples
        .iter()
        .chain(&test.samples)
        .map(|s| s.label + 1)
        .max()
        .unwrap_or(0)
        .max(2);
    Ok((Benchmark { train, test, n_classes }, cfg))
}

/// Records the checkpoint's training config in the report config.
fn with_restoration(mut cfg: BenchConfig, state: &TrainState) -> BenchConfig {
    cfg.restoration = state.config.clone();
    cfg
}

fn eval_cmd(a: EvalArgs) -> CliResult<()> {
    let (bench, cfg) = load_bench(&a.bench)?;
    let state = load_checkpoint(&a.checkpoint)?;
    let seed = resolve_seed(a.seed, Some(state.config.seed))?;
    let cfg = with_restoration(cfg, &state);
    let t0 = Instant::now();
    let mut report = EvalReport::new(&cfg, &[seed]);
    for completion in [Completion::Restored, Completion::ZeroFill] {
        report
            .cells
            .push(evaluate_cell(&bench, Some(&state), "checkpoint", a.eta, a.mode, seed, completion, &cfg)?);
    }
    for m in [Modality::Image, Modality::Text] {
        report.similarity.push(category_similarity(&bench, &state, m, seed, &cfg)?);
    }
    report.runtime_s = t0.elapsed().as_secs_f64();
    report.write(&a.bench.out)?;
    for c in &report.cells {
        println!(
            "{:<9} accuracy {:.4} macro-F1 {:.4} cosine {}",
            c.completion.as_str(),
            c.accuracy,
            c.macro_f1,
            c.cosine.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
        );
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> CliResult<()> {
    let (bench, cfg) = load_bench(&a.bench)?;
    if a.etas.iter().any(|e| !(0.0..=100.0).contains(e)) {
        return Err(CliError::Usage("missing rates must lie in [0, 100]".into()));
    }
    let states = a
        .checkpoint
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<crate::Result<Vec<_>>>()?;
    let models: Vec<(u64, &TrainState)> = states.iter().map(|s| (s.config.seed, s)).collect();
    let cfg = with_restoration(cfg, &states[0]);
    let report = robustness_sweep(&bench, &models, &a.etas, &a.modes, &cfg, a.jobs)?;
    report.write(&a.bench.out)?;
    print!("{}", report.sweep_csv());
    Ok(())
}

#[derive(Serialize)]
struct GateSummary {
    checkpoint: String,
    seed: u64,
    n: usize,
    gates: Vec<GateReport>,
}

fn gate_stats_cmd(a: GateStatsArgs) -> CliResult<()> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let seed = resolve_seed(a.seed, None)?;
    let state = load_checkpoint(&a.checkpoint)?;
    let set = read_embeddings(&a.data)?;
    let complete: Vec<_> = set.samples.iter().filter(|s| s.is_complete()).cloned().collect();
    let data = TrainData::from_samples(&complete, &state.norm_image, &state.norm_text)?;
    let mut gates = Vec::new();
    for restores in [Modality::Text, Modality::Image] {
        let (x, t, c) = probe_batch(&state, restores, &data, a.n, seed)?;
        let stats = gate_statistics(state.model(restores), x.view(), &t, c.view())?;
        println!(
            "{} model: mean gate {:.4}, {:.1}% in [0, 0.2], per block {}",
            match restores {
                Modality::Text => "i2t",
                Modality::Image => "t2i",
            },
            stats.mean,
            100.0 * stats.fraction_low,
            stats
                .blocks
                .iter()
                .map(|b| format!("attn {:.4} mlp {:.4}", b.attn_mean, b.mlp_mean))
                .collect::<Vec<_>>()
                .join("; ")
        );
        gates.push(GateReport {
            variant: state.config.model.gating.as_str().into(),
            seed,
            restores,
            stats,
        });
    }
    std::fs::create_dir_all(&a.out)?;
    let summary = GateSummary {
        checkpoint: a.checkpoint.display().to_string(),
        seed,
        n: a.n,
        gates,
    };
    write_json(&a.out.join("gates.json"), &summary)?;
    let mut report = EvalReport::new(&BenchConfig::default(), &[seed]);
    report.gates = summary.gates;
    std::fs::write(a.out.join("gates.csv"), report.gates_csv())?;
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> CliResult<()> {
    let (bench, mut cfg) = load_bench(&a.bench)?;
    if let Some(e) = a.epochs {
        cfg.restoration.epochs = e;
    }
    let report = ablation_matrix(&bench, &Variant::table(), &a.seeds, a.eta, a.mode, &cfg, a.jobs)?;
    report.write(&a.bench.out)?;
    for (name, acc) in report.variant_means() {
        println!("{name:<8} mean accuracy {acc:.4}");
    }
    Ok(())
}

fn trajectory_cmd(a: TrajectoryArgs) -> CliResult<()> {
    if a.n == 0 || a.steps == 0 {
        return Err(CliError::Usage("--n and --steps must be positive".into()));
    }
    let seed = resolve_seed(a.seed, None)?;
    let state = load_checkpoint(&a.checkpoint)?;
    let set = read_embeddings(&a.data)?;
    let target: Modality = a.restore.into();
    let cond_m = target.other();
    let complete: Vec<_> = set.samples.iter().filter(|s| s.is_complete()).collect();
    if complete.len() < 3 {
        return Err(CliError::Runtime(anyhow::anyhow!("trajectory needs at least 3 complete samples")));
    }
    let plan = DdimPlan::new(&state.schedule, a.steps)?;
    let model = state.model(target);
    let every: Vec<Snapshot> = plan
        .steps()
        .iter()
        .rev()
        .map(|&t| Snapshot::Step(t))
        .chain([Snapshot::Final])
        .collect();
    let truth: Vec<_> = complete
        .iter()
        .map(|s| state.norm(target).normalize(s.feature(target).unwrap().view()))
        .collect();
    let reference = ndarray::stack(ndarray::Axis(0), &truth.iter().map(|r| r.view()).collect::<Vec<_>>())
        .map_err(anyhow::Error::from)?;
    let mut csv = String::from("sample,label,step,t,pc1,pc2\n");
    for s in complete.iter().take(a.n) {
        let cond = state.norm(cond_m).normalize(s.feature(cond_m).unwrap().view());
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(sample_seed(seed, &s.id));
        let snaps = record_trajectory(cond.view(), model, &plan, &state.schedule, &mut rng, &every)?;
        let pts = ndarray::stack(ndarray::Axis(0), &snaps.iter().map(|(_, x)| x.view()).collect::<Vec<_>>())
            .map_err(anyhow::Error::from)?;
        let proj = pca_project(reference.view(), pts.view(), 2)?;
        for (k, ((snap, _), p)) in snaps.iter().zip(proj.rows()).enumerate() {
            let t = match snap {
                Snapshot::Step(t) => t.to_string(),
                Snapshot::Final => "final".into(),
            };
            csv.push_str(&format!("{},{},{k},{t},{},{}\n", s.id, s.label, p[0], p[1]));
        }
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&a.out, csv)?;
    println!("wrote trajectories of {} samples to {}", a.n.min(complete.len()), a.out.display());
    Ok(())
}
