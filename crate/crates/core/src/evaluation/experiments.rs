//! Benchmark cells, the missing-rate sweep and the ablation matrix.
//!
//! A cell is one `(variant, eta, mode, seed, completion)` combination: the
//! missing pattern is applied to both splits, the gaps are filled by the
//! restoration models or by zeros, and a fresh probe is trained and scored.
//! Every cell depends only on its own key and the frozen restoration state.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::gates::GateStats;
use super::metrics::{category_similarity_matrix, cosine_alignment};
use super::probe::{train_probe, ProbeConfig, ProbeMetrics};
use crate::data::{apply_missing_pattern, EmbeddingSet, MissingMode, Modality, SamplePair, SyntheticSpec};
use crate::dit::Gating;
use crate::error::{Error, Result};
use crate::restoration::{complete_dataset, sample_seed};
use crate::schedule::DdimPlan;
use crate::training::{train, ArchConfig, TrainConfig, TrainState};

/// Everything a benchmark run depends on besides the seed list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub data: SyntheticSpec,
    pub restoration: TrainConfig,
    pub probe: ProbeConfig,
    pub ddim_steps: usize,
    pub restore_batch: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            data: SyntheticSpec::default(),
            restoration: desk_train_config(),
            probe: ProbeConfig::default(),
            ddim_steps: 50,
            restore_batch: 128,
        }
    }
}

/// Restoration settings sized for a single CPU core.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 100,
        lr: 3e-3,
        batch_size: 32,
        grad_clip: Some(1.0),
        model: ArchConfig {
            d_model: 32,
            depth: 2,
            ..ArchConfig::default()
        },
        ..TrainConfig::default()
    }
}

impl BenchConfig {
    /// FNV-1a of the canonical JSON form, as 16 hex digits.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", sample_seed(0, &json))
    }
}

/// How missing features are filled before the probe sees them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Completion {
    Restored,
    ZeroFill,
}

impl Completion {
    pub fn as_str(self) -> &'static str {
        match self {
            Completion::Restored => "restored",
            Completion::ZeroFill => "zero_fill",
        }
    }
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub gating: Gating,
    pub mutual: bool,
}

impl Variant {
    pub fn new(name: &str, gating: Gating, mutual: bool) -> Self {
        Self {
            name: name.into(),
            gating,
            mutual,
        }
    }

    /// Full gating with mutual learning.
    pub fn ours() -> Self {
        Self::new("ours", Gating::Full, true)
    }

    /// The distinct ablation rows: both readings of "mutual only" are kept,
    /// so gating-off/mutual-on and gating-on/mutual-off each get a row.
    pub fn table() -> Vec<Variant> {
        vec![
            Self::ours(),
            Self::new("mutual", Gating::Base, true),
            Self::new("gating", Gating::Full, false),
            Self::new("base", Gating::Base, false),
            Self::new("adaln", Gating::Adaln, true),
            Self::new("concat", Gating::Concat, true),
        ]
    }

    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        c.model.gating = self.gating;
        c.mutual_enabled = self.mutual;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub variant: String,
    pub eta: f64,
    pub mode: MissingMode,
    pub seed: u64,
    pub completion: Completion,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Mean raw-space cosine of restored test features against the truth.
    pub cosine: Option<f64>,
    /// The same in the restoration model's normalized space.
    pub cosine_normalized: Option<f64>,
    pub restored_train: usize,
    pub restored_test: usize,
    pub runtime_s: f64,
}

/// Train and test splits with every sample complete.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub train: EmbeddingSet,
    pub test: EmbeddingSet,
    pub n_classes: usize,
}

impl Benchmark {
    pub fn synthetic(spec: &SyntheticSpec) -> Result<Self> {
        let d = crate::data::generate_synthetic(spec)?;
        Ok(Self {
            train: d.train,
            test: d.test,
            n_classes: spec.n_clusters,
        })
    }
}

/// Seeds of the pattern and probe for one cell; the restoration noise uses
/// the cell seed directly.
fn cell_seeds(seed: u64) -> (u64, u64) {
    (sample_seed(seed, "pattern/train"), sample_seed(seed, "pattern/test"))
}

/// Trains the restoration pair for one variant on the complete train split.
pub fn train_variant(bench: &Benchmark, variant: &Variant, seed: u64, cfg: &BenchConfig) -> Result<TrainState> {
    let mut tc = variant.apply(&cfg.restoration);
    tc.seed = seed;
    let t0 = Instant::now();
    let (state, _) = train(&bench.train, tc)?;
    log::info!(
        "trained {} seed {seed} in {:.1}s",
        variant.name,
        t0.elapsed().as_secs_f64()
    );
    Ok(state)
}

/// Evaluates one cell. `state` is only read.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_cell(
    bench: &Benchmark,
    state: Option<&TrainState>,
    variant: &str,
    eta: f64,
    mode: MissingMode,
    seed: u64,
    completion: Completion,
    cfg: &BenchConfig,
) -> Result<CellResult> {
    let t0 = Instant::now();
    let (train_seed, test_seed) = cell_seeds(seed);
    let train_m = apply_missing_pattern(&bench.train.samples, eta, mode, train_seed)?;
    let test_m = apply_missing_pattern(&bench.test.samples, eta, mode, test_seed)?;
    let (train_c, test_c, restored_train, restored_test) = match completion {
        Completion::ZeroFill => (train_m, test_m, 0, 0),
        Completion::Restored => {
            let state = state.ok_or_else(|| Error::Contract("restored cell needs a trained model".into()))?;
            let plan = DdimPlan::new(&state.schedule, cfg.ddim_steps)?;
            let (a, ca) = complete_dataset(&train_m, state, &plan, seed, cfg.restore_batch)?;
            let (b, cb) = complete_dataset(&test_m, state, &plan, seed, cfg.restore_batch)?;
            let n = |c: crate::restoration::RestoreCounts| c.restored_image + c.restored_text;
            (a, b, n(ca), n(cb))
        }
    };
    let (cosine, cosine_normalized) = match (completion, state) {
        (Completion::Restored, Some(state)) => restored_cosine(&test_c, &bench.test.samples, state),
        _ => (None, None),
    };
    let mut probe_cfg = cfg.probe.clone();
    probe_cfg.seed = seed;
    let probe = train_probe(&train_c, bench.n_classes, &probe_cfg)?;
    let ProbeMetrics { accuracy, macro_f1, .. } = probe.evaluate(&test_c)?;
    let r = CellResult {
        variant: variant.into(),
        eta,
        mode,
        seed,
        completion,
        accuracy,
        macro_f1,
        cosine,
        cosine_normalized,
        restored_train,
        restored_test,
        runtime_s: t0.elapsed().as_secs_f64(),
    };
    log::info!(
        "cell {} eta {} {} seed {} {}: acc {:.4} f1 {:.4} cos {:?}",
        r.variant,
        r.eta,
        r.mode.as_str(),
        r.seed,
        r.completion.as_str(),
        r.accuracy,
        r.macro_f1,
        r.cosine
    );
    Ok(r)
}

/// Mean cosine of every restored feature in `done` against the same sample in
/// `truth`, in raw and in normalized space. `None` when nothing was restored.
pub fn restored_cosine(done: &[SamplePair], truth: &[SamplePair], state: &TrainState) -> (Option<f64>, Option<f64>) {
    let (mut raw, mut norm, mut n) = (0.0, 0.0, 0usize);
    for (d, t) in done.iter().zip(truth) {
        for m in [Modality::Image, Modality::Text] {
            if !d.is_restored(m) {
                continue;
            }
            let (Some(a), Some(b)) = (d.feature(m), t.feature(m)) else {
                continue;
            };
            raw += cosine_alignment(a.view(), b.view());
            let s = state.norm(m);
            norm += cosine_alignment(s.normalize(a.view()).view(), s.normalize(b.view()).view());
            n += 1;
        }
    }
    if n == 0 {
        (None, None)
    } else {
        (Some(raw / n as f64), Some(norm / n as f64))
    }
}

/// Class-mean cosine matrices of true and restored features of `m` over the
/// test split, every test sample restored from its other modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySimilarity {
    pub modality: Modality,
    pub truth: Vec<Vec<f64>>,
    pub restored: Vec<Vec<f64>>,
}

pub fn category_similarity(
    bench: &Benchmark,
    state: &TrainState,
    m: Modality,
    seed: u64,
    cfg: &BenchConfig,
) -> Result<CategorySimilarity> {
    let masked: Vec<SamplePair> = bench
        .test
        .samples
        .iter()
        .map(|s| {
            let mut s = s.clone();
            *s.feature_mut(m) = None;
            s
        })
        .collect();
    let plan = DdimPlan::new(&state.schedule, cfg.ddim_steps)?;
    let (done, _) = complete_dataset(&masked, state, &plan, seed, cfg.restore_batch)?;
    let labels: Vec<usize> = bench.test.samples.iter().map(|s| s.label).collect();
    let rows = |set: &[SamplePair]| {
        let refs: Vec<&SamplePair> = set.iter().collect();
        crate::data::stack_modality(&refs, m, bench.test.dim(m))
    };
    let to_vec = |a: Array2<f64>| a.rows().into_iter().map(|r| r.to_vec()).collect();
    Ok(CategorySimilarity {
        modality: m,
        truth: to_vec(category_similarity_matrix(rows(&bench.test.samples).view(), &labels, bench.n_classes)?),
        restored: to_vec(category_similarity_matrix(rows(&done).view(), &labels, bench.n_classes)?),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub variant: String,
    pub seed: u64,
    /// Which model: the one restoring this modality.
    pub restores: Modality,
    pub stats: GateStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: BenchConfig,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellResult>,
    #[serde(default)]
    pub gates: Vec<GateReport>,
    #[serde(default)]
    pub similarity: Vec<CategorySimilarity>,
    pub runtime_s: f64,
}

impl EvalReport {
    pub fn new(config: &BenchConfig, seeds: &[u64]) -> Self {
        Self {
            config_hash: config.hash(),
            config: config.clone(),
            seeds: seeds.to_vec(),
            cells: Vec::new(),
            gates: Vec::new(),
            similarity: Vec::new(),
            runtime_s: 0.0,
        }
    }

    /// Mean accuracy over the cells accepted by `keep`.
    pub fn mean_accuracy(&self, keep: impl Fn(&CellResult) -> bool) -> Option<f64> {
        mean(self.cells.iter().filter(|c| keep(c)).map(|c| c.accuracy))
    }

    pub fn mean_cosine(&self, keep: impl Fn(&CellResult) -> bool) -> Option<f64> {
        mean(self.cells.iter().filter(|c| keep(c)).filter_map(|c| c.cosine))
    }

    /// Seed-averaged rows of the sweep, one per `(mode, eta)`.
    pub fn sweep_rows(&self) -> Vec<SweepRow> {
        let mut keys: Vec<(MissingMode, f64)> = Vec::new();
        for c in &self.cells {
            if !keys.iter().any(|&(m, e)| m == c.mode && e == c.eta) {
                keys.push((c.mode, c.eta));
            }
        }
        keys.sort_by(|a, b| mode_rank(a.0).cmp(&mode_rank(b.0)).then(a.1.total_cmp(&b.1)));
        keys.into_iter()
            .map(|(mode, eta)| {
                let pick = |comp: Completion, f: fn(&CellResult) -> f64| {
                    mean(
                        self.cells
                            .iter()
                            .filter(|c| c.mode == mode && c.eta == eta && c.completion == comp)
                            .map(f),
                    )
                };
                SweepRow {
                    mode,
                    eta,
                    restored_accuracy: pick(Completion::Restored, |c| c.accuracy),
                    zero_fill_accuracy: pick(Completion::ZeroFill, |c| c.accuracy),
                    restored_f1: pick(Completion::Restored, |c| c.macro_f1),
                    zero_fill_f1: pick(Completion::ZeroFill, |c| c.macro_f1),
                    cosine: mean(
                        self.cells
                            .iter()
                            .filter(|c| c.mode == mode && c.eta == eta)
                            .filter_map(|c| c.cosine),
                    ),
                }
            })
            .collect()
    }

    /// Seed-averaged accuracy per variant, in first-seen order.
    pub fn variant_means(&self) -> Vec<(String, f64)> {
        let mut names: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !names.contains(&c.variant.as_str()) {
                names.push(&c.variant);
            }
        }
        names
            .into_iter()
            .filter_map(|n| {
                self.mean_accuracy(|c| c.variant == n && c.completion == Completion::Restored)
                    .map(|a| (n.to_string(), a))
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Robustness curve: one row per mode and missing rate.
    pub fn sweep_csv(&self) -> String {
        let mut s = String::from("mode,eta,restored_accuracy,zero_fill_accuracy,restored_f1,zero_fill_f1,cosine\n");
        for r in self.sweep_rows() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.mode.as_str(),
                r.eta,
                opt(r.restored_accuracy),
                opt(r.zero_fill_accuracy),
                opt(r.restored_f1),
                opt(r.zero_fill_f1),
                opt(r.cosine)
            );
        }
        s
    }

    /// Per-channel gate means, then the activation histogram.
    pub fn gates_csv(&self) -> String {
        let mut s = String::from("variant,seed,restores,block,branch,channel,value\n");
        for g in &self.gates {
            let who = format!("{},{},{}", g.variant, g.seed, modality_str(g.restores));
            for b in &g.stats.blocks {
                for (branch, means) in [("attn", &b.attn_channel_mean), ("mlp", &b.mlp_channel_mean)] {
                    for (ch, v) in means.iter().enumerate() {
                        let _ = writeln!(s, "{who},{},{branch},{ch},{v}", b.block);
                    }
                }
            }
            for (bin, count) in g.stats.histogram.iter().enumerate() {
                let _ = writeln!(s, "{who},all,histogram,{bin},{count}");
            }
        }
        s
    }

    pub fn similarity_csv(&self) -> String {
        let mut s = String::from("modality,source,row,col,value\n");
        for sim in &self.similarity {
            for (source, m) in [("truth", &sim.truth), ("restored", &sim.restored)] {
                for (i, row) in m.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        let _ = writeln!(s, "{},{source},{i},{j},{v}", modality_str(sim.modality));
                    }
                }
            }
        }
        s
    }

    pub fn cells_csv(&self) -> String {
        let mut s = String::from("variant,eta,mode,seed,completion,accuracy,macro_f1,cosine,restored_train,restored_test\n");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                c.variant,
                c.eta,
                c.mode.as_str(),
                c.seed,
                c.completion.as_str(),
                c.accuracy,
                c.macro_f1,
                opt(c.cosine),
                c.restored_train,
                c.restored_test
            );
        }
        s
    }

    /// Writes `report.json` plus the CSV tables that have content.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut f = std::fs::File::create(dir.join("report.json"))?;
        f.write_all(self.to_json()?.as_bytes())?;
        f.write_all(b"\n")?;
        let mut tables = vec![("cells.csv", self.cells_csv())];
        if !self.cells.is_empty() {
            tables.push(("robustness.csv", self.sweep_csv()));
        }
        if !self.gates.is_empty() {
            tables.push(("gates.csv", self.gates_csv()));
        }
        if !self.similarity.is_empty() {
            tables.push(("similarity.csv", self.similarity_csv()));
        }
        for (name, body) in tables {
            std::fs::write(dir.join(name), body)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: MissingMode,
    pub eta: f64,
    pub restored_accuracy: Option<f64>,
    pub zero_fill_accuracy: Option<f64>,
    pub restored_f1: Option<f64>,
    pub zero_fill_f1: Option<f64>,
    pub cosine: Option<f64>,
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in it {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn modality_str(m: Modality) -> &'static str {
    match m {
        Modality::Image => "image",
        Modality::Text => "text",
    }
}

fn mode_rank(m: MissingMode) -> usize {
    MissingMode::ALL.iter().position(|&x| x == m).unwrap_or(0)
}

/// A planned cell: which trained state (by index) and which setting.
#[derive(Debug, Clone)]
struct CellSpec {
    state: Option<usize>,
    variant: String,
    eta: f64,
    mode: MissingMode,
    seed: u64,
    completion: Completion,
}

/// Runs cells on up to `jobs` threads; results come back in plan order.
fn run_cells(
    bench: &Benchmark,
    states: &[&TrainState],
    plan: &[CellSpec],
    cfg: &BenchConfig,
    jobs: usize,
) -> Result<Vec<CellResult>> {
    let run = |c: &CellSpec| {
        evaluate_cell(
            bench,
            c.state.map(|i| states[i]),
            &c.variant,
            c.eta,
            c.mode,
            c.seed,
            c.completion,
            cfg,
        )
    };
    let jobs = jobs.max(1).min(plan.len().max(1));
    if jobs == 1 {
        return plan.iter().map(run).collect();
    }
    let mut slots: Vec<Option<Result<CellResult>>> = (0..plan.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                let run = &run;
                scope.spawn(move || {
                    plan.iter()
                        .enumerate()
                        .skip(j)
                        .step_by(jobs)
                        .map(|(i, c)| (i, run(c)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("sweep worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every cell ran")).collect()
}

/// Missing-rate sweep with restored and zero-filled completion for every
/// `(mode, eta, seed)`; `models` pairs each seed with its trained state.
pub fn robustness_sweep(
    bench: &Benchmark,
    models: &[(u64, &TrainState)],
    etas: &[f64],
    modes: &[MissingMode],
    cfg: &BenchConfig,
    jobs: usize,
) -> Result<EvalReport> {
    let t0 = Instant::now();
    let seeds: Vec<u64> = models.iter().map(|(s, _)| *s).collect();
    let states: Vec<&TrainState> = models.iter().map(|(_, m)| *m).collect();
    let mut plan = Vec::new();
    for &mode in modes {
        for &eta in etas {
            for (i, &seed) in seeds.iter().enumerate() {
                for completion in [Completion::Restored, Completion::ZeroFill] {
                    plan.push(CellSpec {
                        state: Some(i),
                        variant: Variant::ours().name,
                        eta,
                        mode,
                        seed,
                        completion,
                    });
                }
            }
        }
    }
    let mut report = EvalReport::new(cfg, &seeds);
    report.cells = run_cells(bench, &states, &plan, cfg, jobs)?;
    report.runtime_s = t0.elapsed().as_secs_f64();
    Ok(report)
}

/// Restored-completion cells for already trained variants at one setting.
pub fn ablation_cells(
    bench: &Benchmark,
    trained: &[(Variant, u64, &TrainState)],
    eta: f64,
    mode: MissingMode,
    cfg: &BenchConfig,
    jobs: usize,
) -> Result<EvalReport> {
    let t0 = Instant::now();
    let states: Vec<&TrainState> = trained.iter().map(|(_, _, s)| *s).collect();
    let plan: Vec<CellSpec> = trained
        .iter()
        .enumerate()
        .map(|(i, (v, seed, _))| CellSpec {
            state: Some(i),
            variant: v.name.clone(),
            eta,
            mode,
            seed: *seed,
            completion: Completion::Restored,
        })
        .collect();
    let mut seeds: Vec<u64> = trained.iter().map(|(_, s, _)| *s).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut report = EvalReport::new(cfg, &seeds);
    report.cells = run_cells(bench, &states, &plan, cfg, jobs)?;
    report.runtime_s = t0.elapsed().as_secs_f64();
    Ok(report)
}

/// Trains every variant for every seed and scores it at one setting.
pub fn ablation_matrix(
    bench: &Benchmark,
    variants: &[Variant],
    seeds: &[u64],
    eta: f64,
    mode: MissingMode,
    cfg: &BenchConfig,
    jobs: usize,
) -> Result<EvalReport> {
    let t0 = Instant::now();
    let mut trained = Vec::new();
    for v in variants {
        for &seed in seeds {
            trained.push((v.clone(), seed, train_variant(bench, v, seed, cfg)?));
        }
    }
    let refs: Vec<(Variant, u64, &TrainState)> = trained.iter().map(|(v, s, st)| (v.clone(), *s, st)).collect();
    let mut report = ablation_cells(bench, &refs, eta, mode, cfg, jobs)?;
    report.runtime_s = t0.elapsed().as_secs_f64();
    Ok(report)
}
