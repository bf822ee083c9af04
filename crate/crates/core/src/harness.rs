//! Experiment harness: expands a config into an (adapter × seed) grid,
//! trains every cell, and writes artifacts under a stable layout:
//!
//! ```text
//! output/
//!   config.json          the configuration exactly as run
//!   inputs.sha256        digests of the config and every dataset split
//!   summary.csv          one aggregate row per adapter kind
//!   seed_<s>/
//!     base/              frozen base weights shared by the seed's cells
//!     <adapter>/         frozen | full | hyper | lora<r>
//!       result.json      training record (config, curve, eval, checksum)
//!       loss.csv         step,lr,loss
//!       checkpoint.json  trainable adapter state only
//!       rank.json/.csv   singular-value report on the weight updates
//!       rank.svg         bar chart of r-hat per layer (optional)
//!       weights/         merged dense weights plus embeddings
//! ```
//!
//! Cells at the same seed share the task data and the base weights, so
//! adapter kinds are compared under identical conditions. Every artifact
//! is a pure function of the config, which makes reruns byte-identical.

use crate::adapters::AdapterKind;
use crate::error::{Error, Result};
use crate::io::{
    fmt_f64, layer_from_checkpoint, parse_error, read_file, sha256_hex, write_file, Checkpoint,
    CheckpointParams, WeightStore,
};
use crate::model::{ArchSpec, Model, ModelSpec};
use crate::rank::{analyze_adapted_model, RANK_ABS_THRESHOLD};
use crate::rng::derive_seed;
use crate::tasks::{make_task, Dataset, TaskInstance, TaskName, TaskSpec};
use crate::train::{loss_curve_csv, train, TrainConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Post-training analysis switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Absolute singular-value threshold for counting update directions.
    #[serde(default = "default_rank_threshold")]
    pub rank_threshold: f64,
    /// Emit rank.svg next to rank.json and rank.csv.
    #[serde(default = "default_true")]
    pub emit_svg: bool,
}

fn default_rank_threshold() -> f64 {
    RANK_ABS_THRESHOLD
}

fn default_true() -> bool {
    true
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            rank_threshold: default_rank_threshold(),
            emit_svg: true,
        }
    }
}

/// One experiment: a model family, a task, and the adapter kinds to
/// compare across a seed grid under a shared training recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub task: TaskSpec,
    /// Adapter kinds compared cell by cell; each becomes one summary row.
    pub adapters: Vec<AdapterKind>,
    pub train: TrainConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    /// Destination directory; a command-line flag may override it.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.adapters.is_empty() {
            return Err(Error::Config("adapters must list at least one kind".into()));
        }
        let mut dirs = BTreeSet::new();
        for kind in &self.adapters {
            if !dirs.insert(adapter_dir_name(*kind)) {
                return Err(Error::Config(format!(
                    "adapter kind {kind} appears twice; each kind gets one summary row"
                )));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one value".into()));
        }
        let unique: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if unique.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        self.task.validate()?;
        self.train.validate()?;
        if !(self.analysis.rank_threshold.is_finite() && self.analysis.rank_threshold > 0.0) {
            return Err(Error::Config(format!(
                "rank_threshold must be positive and finite, got {}",
                self.analysis.rank_threshold
            )));
        }
        // A probe cell exercises the same spec every grid cell will build.
        cell_spec(&self.model, self.adapters[0]).validate()?;
        self.check_task_arch_fit()
    }

    /// Teacher tasks adapt one linear layer of the teacher's shape; token
    /// tasks need a transformer whose vocabulary and context fit the data.
    fn check_task_arch_fit(&self) -> Result<()> {
        match (&self.task.kind, &self.model.arch) {
            (
                TaskName::ScaledTeacher | TaskName::LowRankTeacher,
                ArchSpec::Mlp { widths, .. },
            ) => {
                if widths.as_slice() != [self.task.m, self.task.n] {
                    return Err(Error::Config(format!(
                        "teacher tasks adapt a single {n}x{m} linear layer; \
                         mlp widths must be [{m}, {n}], got {widths:?}",
                        n = self.task.n,
                        m = self.task.m,
                    )));
                }
                Ok(())
            }
            (
                TaskName::SeqCopy | TaskName::SeqSort,
                ArchSpec::TinyTransformer {
                    vocab, max_seq, ..
                },
            ) => {
                if *vocab != self.task.vocab {
                    return Err(Error::Config(format!(
                        "model vocabulary {vocab} does not match the task vocabulary {}",
                        self.task.vocab
                    )));
                }
                if *max_seq < self.task.seq_len {
                    return Err(Error::Config(format!(
                        "model max_seq {max_seq} is shorter than the task sequences ({})",
                        self.task.seq_len
                    )));
                }
                Ok(())
            }
            (TaskName::ScaledTeacher | TaskName::LowRankTeacher, _) => Err(Error::Config(
                "teacher tasks need an mlp architecture".into(),
            )),
            (TaskName::SeqCopy | TaskName::SeqSort, _) => Err(Error::Config(
                "sequence tasks need a tiny_transformer architecture".into(),
            )),
        }
    }
}

/// Parses and validates a config document.
pub fn parse_config(input: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_str(input).map_err(|e| parse_error(input, e))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&read_file(path)?)
}

/// Directory name for an adapter kind: `frozen`, `full`, `hyper`, `lora<r>`.
pub fn adapter_dir_name(kind: AdapterKind) -> String {
    match kind {
        AdapterKind::LoRA { r } => format!("lora{r}"),
        other => other.to_string(),
    }
}

/// The model spec one grid cell trains. An empty adapter map assigns
/// `kind` to every linear layer; otherwise entries marked trainable take
/// `kind` while frozen entries stay frozen.
pub fn cell_spec(model: &ModelSpec, kind: AdapterKind) -> ModelSpec {
    let adapter_map = if model.adapter_map.is_empty() {
        crate::model::uniform_adapter_map(&model.arch, kind)
    } else {
        model
            .adapter_map
            .iter()
            .map(|(name, assigned)| {
                let cell_kind = match assigned {
                    AdapterKind::Frozen => AdapterKind::Frozen,
                    _ => kind,
                };
                (name.clone(), cell_kind)
            })
            .collect()
    };
    ModelSpec {
        arch: model.arch.clone(),
        adapter_map,
        train_embeddings: model.train_embeddings,
        lora: model.lora,
    }
}

/// Scalars in the fully dense model: every linear weight, plus both
/// embedding tables when they train. The denominator of param_fraction.
pub fn dense_param_total(spec: &ModelSpec) -> usize {
    let linear: usize = spec
        .arch
        .layer_shapes()
        .iter()
        .map(|(_, n, m)| n * m)
        .sum();
    let embed = match &spec.arch {
        ArchSpec::TinyTransformer {
            vocab,
            d_model,
            max_seq,
            ..
        } if spec.train_embeddings => (vocab + max_seq) * d_model,
        _ => 0,
    };
    linear + embed
}

/// One summary.csv row: seed-aggregated statistics for one adapter kind.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub adapter: AdapterKind,
    pub trainable_params: usize,
    /// trainable_params over the dense model's scalar count.
    pub param_fraction: f64,
    /// Mean over seeds of final train loss (dense tasks) or eval accuracy
    /// (token tasks).
    pub mean_metric: f64,
    /// Population standard deviation of the same metric.
    pub std_metric: f64,
    /// Mean over seeds of the per-model mean r-hat; None when every layer
    /// was skipped by the rank analysis.
    pub mean_r_hat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub rows: Vec<SummaryRow>,
    /// The exact bytes written to summary.csv.
    pub csv: String,
}

struct CellOutcome {
    adapter: AdapterKind,
    trainable_params: usize,
    metric: f64,
    mean_r_hat: Option<f64>,
}

/// Runs the whole grid and writes all artifacts under `out_dir`.
///
/// Cells run in parallel on `threads` workers (None uses the global
/// pool). A failing cell leaves a `.failed` marker in its directory and
/// the first failure in grid order is returned after every cell has been
/// attempted; summary.csv is only written when all cells succeed.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path, threads: Option<usize>) -> Result<RunSummary> {
    cfg.validate()?;
    let config_json = format!(
        "{}\n",
        serde_json::to_string_pretty(cfg).map_err(|e| Error::Structure(e.to_string()))?
    );
    write_file(&out_dir.join("config.json"), config_json.as_bytes())?;

    // Per-seed pre-pass: hash the datasets and persist the shared base
    // weights so merge and rank tooling can reach them later.
    let mut input_lines = vec![format!("{}  config.json", sha256_hex(config_json.as_bytes()))];
    for &seed in &cfg.seeds {
        let task = cell_task(cfg, seed)?;
        let data = task.dataset();
        input_lines.push(format!(
            "{}  seed_{seed}/train.jsonl",
            sha256_hex(data.to_jsonl(false).as_bytes())
        ));
        input_lines.push(format!(
            "{}  seed_{seed}/eval.jsonl",
            sha256_hex(data.to_jsonl(true).as_bytes())
        ));
        let frozen = Model::build(
            &cell_spec(&cfg.model, AdapterKind::Frozen),
            derive_seed(seed, "model-init", &[]),
            base_store(&task).as_ref(),
        )?;
        frozen
            .effective_weight_store()
            .save(&out_dir.join(format!("seed_{seed}")).join("base"))?;
    }
    write_file(
        &out_dir.join("inputs.sha256"),
        format!("{}\n", input_lines.join("\n")).as_bytes(),
    )?;

    let grid: Vec<(AdapterKind, u64)> = cfg
        .adapters
        .iter()
        .flat_map(|&kind| cfg.seeds.iter().map(move |&seed| (kind, seed)))
        .collect();
    let results: Vec<Result<CellOutcome>> = in_pool(threads, || {
        grid.par_iter()
            .map(|&(kind, seed)| {
                let dir = out_dir
                    .join(format!("seed_{seed}"))
                    .join(adapter_dir_name(kind));
                run_cell(cfg, kind, seed, &dir).map_err(|e| {
                    let note = format!("{kind} seed {seed}: {e}\n");
                    // A marker-write failure must not mask the cell error.
                    let _ = write_file(&dir.join(".failed"), note.as_bytes());
                    e
                })
            })
            .collect()
    })?;

    let mut outcomes = Vec::with_capacity(results.len());
    for result in results {
        outcomes.push(result?);
    }

    let rows = summarize(cfg, &outcomes);
    let csv = summary_csv(&rows);
    write_file(&out_dir.join("summary.csv"), csv.as_bytes())?;
    Ok(RunSummary {
        output_dir: out_dir.to_path_buf(),
        rows,
        csv,
    })
}

fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("could not build a {n}-thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// The task a given grid seed trains on, shared by all its adapter cells.
fn cell_task(cfg: &ExperimentConfig, run_seed: u64) -> Result<TaskInstance> {
    let spec = TaskSpec {
        seed: derive_seed(cfg.task.seed, "cell-task", &[run_seed]),
        ..cfg.task.clone()
    };
    make_task(&spec)
}

/// Teacher tasks pin the single linear layer to the teacher's base
/// weights; token tasks draw fresh weights from the model seed.
fn base_store(task: &TaskInstance) -> Option<WeightStore> {
    match task {
        TaskInstance::Teacher(t) => Some(WeightStore {
            matrices: vec![("fc0".into(), t.w0.clone())],
            meta: serde_json::json!({}),
        }),
        TaskInstance::Seq(_) => None,
    }
}

fn run_cell(
    cfg: &ExperimentConfig,
    kind: AdapterKind,
    seed: u64,
    dir: &Path,
) -> Result<CellOutcome> {
    let task = cell_task(cfg, seed)?;
    let spec = cell_spec(&cfg.model, kind);
    let mut model = Model::build(
        &spec,
        derive_seed(seed, "model-init", &[]),
        base_store(&task).as_ref(),
    )?;
    let train_cfg = TrainConfig {
        seed: derive_seed(cfg.train.seed, "cell", &[seed]),
        ..cfg.train.clone()
    };
    let result = train(&mut model, task.dataset(), &train_cfg)?;
    let rank = analyze_adapted_model(&model, cfg.analysis.rank_threshold)?;

    let pretty =
        serde_json::to_string_pretty(&result).map_err(|e| Error::Structure(e.to_string()))?;
    write_file(&dir.join("result.json"), format!("{pretty}\n").as_bytes())?;
    write_file(
        &dir.join("loss.csv"),
        loss_curve_csv(&result.loss_curve).as_bytes(),
    )?;
    Checkpoint::from_layers(model.layers()).save(&dir.join("checkpoint.json"))?;
    write_file(&dir.join("rank.json"), rank.to_json().as_bytes())?;
    write_file(&dir.join("rank.csv"), rank.to_csv().as_bytes())?;
    if cfg.analysis.emit_svg {
        write_file(&dir.join("rank.svg"), rank.to_svg().as_bytes())?;
    }
    model.effective_weight_store().save(&dir.join("weights"))?;

    let metric = match task.dataset() {
        Dataset::Dense { .. } => result.final_train_loss,
        Dataset::Tokens { .. } => result.eval.accuracy.ok_or_else(|| {
            Error::Structure("token evaluation produced no accuracy".into())
        })?,
    };
    Ok(CellOutcome {
        adapter: kind,
        trainable_params: model.param_count(),
        metric,
        mean_r_hat: rank.mean_r_hat(),
    })
}

fn summarize(cfg: &ExperimentConfig, outcomes: &[CellOutcome]) -> Vec<SummaryRow> {
    let denom = dense_param_total(&cfg.model) as f64;
    cfg.adapters
        .iter()
        .map(|&kind| {
            let cells: Vec<&CellOutcome> =
                outcomes.iter().filter(|c| c.adapter == kind).collect();
            let metrics: Vec<f64> = cells.iter().map(|c| c.metric).collect();
            let mean = metrics.iter().sum::<f64>() / metrics.len() as f64;
            let var = metrics.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
                / metrics.len() as f64;
            let r_hats: Vec<f64> = cells.iter().filter_map(|c| c.mean_r_hat).collect();
            let mean_r_hat = if r_hats.len() == cells.len() {
                Some(r_hats.iter().sum::<f64>() / r_hats.len() as f64)
            } else {
                None
            };
            SummaryRow {
                adapter: kind,
                trainable_params: cells[0].trainable_params,
                param_fraction: cells[0].trainable_params as f64 / denom,
                mean_metric: mean,
                std_metric: var.sqrt(),
                mean_r_hat,
            }
        })
        .collect()
}

fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out =
        String::from("adapter,trainable_params,param_fraction,mean_final_loss_or_acc,std,mean_r_hat\n");
    for row in rows {
        let r_hat = row.mean_r_hat.map(fmt_f64).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{r_hat}",
            row.adapter,
            row.trainable_params,
            fmt_f64(row.param_fraction),
            fmt_f64(row.mean_metric),
            fmt_f64(row.std_metric),
        );
    }
    out
}

/// Applies a checkpoint to the base weights it was trained from and
/// writes the merged dense store. Matrices absent from the checkpoint
/// (frozen layers, embedding tables) pass through unchanged, so the
/// output is a deployable model with no adapter structure left.
pub fn merge(checkpoint: &Path, base_dir: &Path, out_dir: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let base = WeightStore::load(base_dir)?;
    if let Some(name) = ckpt.layers.keys().find(|k| base.get(k).is_none()) {
        return Err(Error::Structure(format!(
            "checkpoint layer {name} has no matching base weight"
        )));
    }
    let mut matrices = Vec::with_capacity(base.matrices.len());
    for (name, matrix) in &base.matrices {
        let merged = match ckpt.layers.get(name) {
            Some(record) => {
                layer_from_checkpoint(name, matrix.clone(), None, record)?.effective_weight()
            }
            None => matrix.clone(),
        };
        matrices.push((name.clone(), merged));
    }
    WeightStore {
        matrices,
        meta: base.meta.clone(),
    }
    .save(out_dir)
}

/// Human-readable checkpoint summary: kind, shape, and parameter count
/// per layer, with value statistics for the stored parameters.
pub fn inspect(checkpoint: &Path) -> Result<String> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut out = String::new();
    let mut total = 0usize;
    for (name, layer) in &ckpt.layers {
        let (n, m) = layer.shape;
        let params = layer.kind.trainable_count(n, m) + layer.bias.as_ref().map_or(0, Vec::len);
        total += params;
        let _ = writeln!(out, "{name}: {} {n}x{m}, {params} params", layer.kind);
        match &layer.params {
            CheckpointParams::Hyper { a, b } => {
                let _ = writeln!(out, "  a {}", vec_stats(a));
                let _ = writeln!(out, "  b {}", vec_stats(b));
            }
            CheckpointParams::Full { w } => {
                let _ = writeln!(out, "  w frobenius {:.6e}", frobenius(w));
            }
            CheckpointParams::LoRA { b, a, alpha, r } => {
                let _ = writeln!(
                    out,
                    "  r {r}, alpha {alpha}, b frobenius {:.6e}, a frobenius {:.6e}",
                    frobenius(b),
                    frobenius(a)
                );
            }
        }
        if let Some(bias) = &layer.bias {
            let _ = writeln!(out, "  bias {}", vec_stats(bias));
        }
    }
    if ckpt.layers.is_empty() {
        out.push_str("no trainable layers\n");
    }
    let _ = writeln!(out, "total trainable params: {total}");
    Ok(out)
}

fn vec_stats(v: &[f64]) -> String {
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    format!("min {min:.6e} max {max:.6e} mean {mean:.6e}")
}

fn frobenius(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::LinearLayer;
    use crate::linalg::Matrix;
    use crate::model::Activation;
    use crate::train::{AdamConfig, Schedule};
    use std::collections::BTreeMap;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            model: ModelSpec {
                arch: ArchSpec::Mlp {
                    widths: vec![5, 6],
                    activation: Activation::Identity,
                },
                adapter_map: BTreeMap::new(),
                train_embeddings: false,
                lora: Default::default(),
            },
            task: TaskSpec {
                kind: TaskName::ScaledTeacher,
                n: 6,
                m: 5,
                r_true: 0,
                vocab: 0,
                seq_len: 0,
                noise_std: 0.0,
                seed: 9,
                n_train: 32,
                n_eval: 8,
            },
            adapters: vec![
                AdapterKind::Frozen,
                AdapterKind::Full,
                AdapterKind::Hyper,
                AdapterKind::LoRA { r: 2 },
            ],
            train: TrainConfig {
                epochs: 60,
                batch_size: 64,
                lr: Some(2e-2),
                warmup_steps: 5,
                schedule: Schedule::Cosine,
                max_grad_norm: Some(1.0),
                adam: AdamConfig::default(),
                seed: 0,
            },
            analysis: AnalysisConfig::default(),
            output_dir: None,
            seeds: vec![1, 2],
        }
    }

    #[test]
    fn grid_run_writes_the_full_layout() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("exp");
        let cfg = tiny_config();
        let summary = run(&cfg, &out, Some(2)).unwrap();

        for file in ["config.json", "inputs.sha256", "summary.csv"] {
            assert!(out.join(file).is_file(), "missing {file}");
        }
        for seed in [1u64, 2] {
            assert!(out.join(format!("seed_{seed}/base/manifest.json")).is_file());
            for adapter in ["frozen", "full", "hyper", "lora2"] {
                let cell = out.join(format!("seed_{seed}/{adapter}"));
                for file in [
                    "result.json",
                    "loss.csv",
                    "checkpoint.json",
                    "rank.json",
                    "rank.csv",
                    "rank.svg",
                ] {
                    assert!(cell.join(file).is_file(), "missing {adapter}/{file}");
                }
                assert!(cell.join("weights/manifest.json").is_file());
                assert!(!cell.join(".failed").exists());
            }
        }

        assert_eq!(summary.rows.len(), 4);
        let hyper = &summary.rows[2];
        assert_eq!(hyper.adapter, AdapterKind::Hyper);
        assert_eq!(hyper.trainable_params, 11);
        assert_eq!(hyper.param_fraction, 11.0 / 30.0);
        let frozen = &summary.rows[0];
        assert_eq!(frozen.trainable_params, 0);
        assert!(frozen.mean_metric.is_finite());
        assert_eq!(frozen.mean_r_hat, Some(0.0));
        let lora = &summary.rows[3];
        assert_eq!(lora.trainable_params, 2 * (5 + 6));

        let lines: Vec<&str> = summary.csv.lines().collect();
        assert_eq!(
            lines[0],
            "adapter,trainable_params,param_fraction,mean_final_loss_or_acc,std,mean_r_hat"
        );
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("frozen,0,"));
        assert!(lines[4].starts_with("lora:2,22,"));
        assert_eq!(
            std::fs::read_to_string(out.join("summary.csv")).unwrap(),
            summary.csv
        );
    }

    #[test]
    fn training_beats_frozen_in_the_summary() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let summary = run(&cfg, dir.path(), None).unwrap();
        let by_kind = |k: AdapterKind| {
            summary
                .rows
                .iter()
                .find(|r| r.adapter == k)
                .unwrap()
                .mean_metric
        };
        assert!(by_kind(AdapterKind::Hyper) < by_kind(AdapterKind::Frozen) / 10.0);
        assert!(by_kind(AdapterKind::Full) < by_kind(AdapterKind::Frozen) / 10.0);
    }

    #[test]
    fn reruns_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let cfg = tiny_config();
        run(&cfg, &a, Some(3)).unwrap();
        run(&cfg, &b, Some(1)).unwrap();
        for file in [
            "summary.csv",
            "inputs.sha256",
            "config.json",
            "seed_1/hyper/result.json",
            "seed_1/hyper/checkpoint.json",
            "seed_2/lora2/weights/fc0.f64",
        ] {
            assert_eq!(
                std::fs::read(a.join(file)).unwrap(),
                std::fs::read(b.join(file)).unwrap(),
                "{file} differs between reruns"
            );
        }
    }

    #[test]
    fn svg_can_be_switched_off() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.adapters = vec![AdapterKind::Hyper];
        cfg.seeds = vec![1];
        cfg.train.epochs = 2;
        cfg.train.warmup_steps = 0;
        cfg.analysis.emit_svg = false;
        run(&cfg, dir.path(), None).unwrap();
        let cell = dir.path().join("seed_1/hyper");
        assert!(cell.join("rank.csv").is_file());
        assert!(!cell.join("rank.svg").exists());
    }

    #[test]
    fn failing_cells_leave_markers_and_no_summary() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.adapters = vec![AdapterKind::Hyper, AdapterKind::Full];
        cfg.seeds = vec![1];
        cfg.train.lr = Some(1e230);
        let err = run(&cfg, dir.path(), Some(2)).unwrap_err();
        assert!(matches!(err, Error::NanLoss { .. }), "got {err:?}");
        assert_eq!(err.exit_code(), 3);
        for adapter in ["hyper", "full"] {
            let marker = dir.path().join(format!("seed_1/{adapter}/.failed"));
            assert!(marker.is_file(), "missing marker for {adapter}");
            let note = std::fs::read_to_string(marker).unwrap();
            assert!(note.contains("seed 1"), "note: {note}");
        }
        assert!(!dir.path().join("summary.csv").exists());
        // The pre-pass artifacts survive for debugging.
        assert!(dir.path().join("inputs.sha256").is_file());
    }

    #[test]
    fn validation_rejects_bad_grids() {
        let configs: Vec<(&str, Box<dyn Fn(&mut ExperimentConfig)>)> = vec![
            ("empty adapters", Box::new(|c| c.adapters.clear())),
            (
                "duplicate adapter",
                Box::new(|c| c.adapters = vec![AdapterKind::Hyper, AdapterKind::Hyper]),
            ),
            ("empty seeds", Box::new(|c| c.seeds.clear())),
            ("duplicate seed", Box::new(|c| c.seeds = vec![4, 4])),
            (
                "teacher with a deep mlp",
                Box::new(|c| {
                    c.model.arch = ArchSpec::Mlp {
                        widths: vec![5, 6, 6],
                        activation: Activation::Identity,
                    }
                }),
            ),
            (
                "teacher with transposed widths",
                Box::new(|c| {
                    c.model.arch = ArchSpec::Mlp {
                        widths: vec![6, 5],
                        activation: Activation::Identity,
                    }
                }),
            ),
            (
                "zero rank threshold",
                Box::new(|c| c.analysis.rank_threshold = 0.0),
            ),
        ];
        for (label, mutate) in configs {
            let mut cfg = tiny_config();
            mutate(&mut cfg);
            let err = cfg.validate().unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{label}: got {err:?}");
        }
    }

    #[test]
    fn sequence_tasks_must_fit_the_transformer() {
        let mut cfg = tiny_config();
        cfg.task = TaskSpec {
            kind: TaskName::SeqCopy,
            n: 0,
            m: 0,
            r_true: 0,
            vocab: 8,
            seq_len: 3,
            noise_std: 0.0,
            seed: 5,
            n_train: 16,
            n_eval: 4,
        };
        // An mlp cannot consume tokens.
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        cfg.model.arch = ArchSpec::TinyTransformer {
            vocab: 9,
            d_model: 8,
            n_layers: 1,
            n_heads: 1,
            d_ff: 16,
            max_seq: 3,
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("vocabulary"), "{err}");

        cfg.model.arch = ArchSpec::TinyTransformer {
            vocab: 8,
            d_model: 8,
            n_layers: 1,
            n_heads: 1,
            d_ff: 16,
            max_seq: 2,
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("max_seq"), "{err}");
    }

    #[test]
    fn transformer_grid_reports_accuracy() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.task = TaskSpec {
            kind: TaskName::SeqCopy,
            n: 0,
            m: 0,
            r_true: 0,
            vocab: 8,
            seq_len: 3,
            noise_std: 0.0,
            seed: 5,
            n_train: 24,
            n_eval: 8,
        };
        cfg.model.arch = ArchSpec::TinyTransformer {
            vocab: 8,
            d_model: 8,
            n_layers: 1,
            n_heads: 1,
            d_ff: 16,
            max_seq: 3,
        };
        cfg.adapters = vec![AdapterKind::Hyper];
        cfg.seeds = vec![1];
        cfg.train.epochs = 3;
        cfg.train.warmup_steps = 1;
        cfg.train.lr = Some(1e-3);
        let summary = run(&cfg, dir.path(), None).unwrap();
        let row = &summary.rows[0];
        assert!((0.0..=1.0).contains(&row.mean_metric), "{row:?}");
        assert!(dir.path().join("seed_1/base/embed.f64").is_file());
        assert!(dir.path().join("seed_1/base/pos.f64").is_file());
    }

    #[test]
    fn unknown_config_keys_are_rejected_with_a_position() {
        let err = parse_config(r#"{"modell": 3}"#).unwrap_err();
        match err {
            Error::Parse { message, offset } => {
                assert!(message.contains("modell"), "{message}");
                assert!(offset > 0);
            }
            other => panic!("expected a parse error, got {other:?}"),
        }
        assert_eq!(
            parse_config(r#"{"modell": 3}"#).unwrap_err().exit_code(),
            4
        );
    }

    #[test]
    fn cell_specs_preserve_frozen_layers() {
        let arch = ArchSpec::Mlp {
            widths: vec![4, 4, 4],
            activation: Activation::Relu,
        };
        let mut map = BTreeMap::new();
        map.insert("fc0".to_string(), AdapterKind::Frozen);
        map.insert("fc1".to_string(), AdapterKind::Full);
        let model = ModelSpec {
            arch: arch.clone(),
            adapter_map: map,
            train_embeddings: false,
            lora: Default::default(),
        };
        let spec = cell_spec(&model, AdapterKind::Hyper);
        assert_eq!(spec.adapter_map["fc0"], AdapterKind::Frozen);
        assert_eq!(spec.adapter_map["fc1"], AdapterKind::Hyper);

        let uniform = ModelSpec {
            arch,
            adapter_map: BTreeMap::new(),
            train_embeddings: false,
            lora: Default::default(),
        };
        let spec = cell_spec(&uniform, AdapterKind::LoRA { r: 3 });
        assert_eq!(spec.adapter_map.len(), 2);
        assert!(spec
            .adapter_map
            .values()
            .all(|k| *k == AdapterKind::LoRA { r: 3 }));
    }

    #[test]
    fn merged_weights_match_the_trained_store() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("exp");
        let mut cfg = tiny_config();
        cfg.adapters = vec![AdapterKind::Hyper, AdapterKind::LoRA { r: 2 }];
        cfg.seeds = vec![1];
        run(&cfg, &out, None).unwrap();

        for adapter in ["hyper", "lora2"] {
            let merged_dir = dir.path().join(format!("merged_{adapter}"));
            merge(
                &out.join(format!("seed_1/{adapter}/checkpoint.json")),
                &out.join("seed_1/base"),
                &merged_dir,
            )
            .unwrap();
            let merged = WeightStore::load(&merged_dir).unwrap();
            let trained =
                WeightStore::load(&out.join(format!("seed_1/{adapter}/weights"))).unwrap();
            assert_eq!(merged.matrices, trained.matrices, "{adapter}");

            // Merging again from the same inputs reproduces the bytes.
            let again = dir.path().join(format!("merged_{adapter}_again"));
            merge(
                &out.join(format!("seed_1/{adapter}/checkpoint.json")),
                &out.join("seed_1/base"),
                &again,
            )
            .unwrap();
            for file in ["manifest.json", "fc0.f64"] {
                assert_eq!(
                    std::fs::read(merged_dir.join(file)).unwrap(),
                    std::fs::read(again.join(file)).unwrap()
                );
            }
        }
    }

    #[test]
    fn merge_rejects_a_checkpoint_with_no_base() {
        let dir = tempfile::tempdir().unwrap();
        let w0 = Matrix::from_fn(3, 2, |i, j| (i + j) as f64 + 1.0).unwrap();
        let layer = LinearLayer::hyper("fc0", w0, None, false).unwrap();
        let ckpt_path = dir.path().join("checkpoint.json");
        Checkpoint::from_layers([&layer]).save(&ckpt_path).unwrap();

        let base_dir = dir.path().join("base");
        WeightStore {
            matrices: vec![("other".into(), Matrix::from_fn(3, 2, |_, _| 1.0).unwrap())],
            meta: serde_json::json!({}),
        }
        .save(&base_dir)
        .unwrap();

        let err = merge(&ckpt_path, &base_dir, &dir.path().join("out")).unwrap_err();
        assert!(matches!(err, Error::Structure(_)), "{err:?}");
    }

    #[test]
    fn inspect_reports_layer_stats() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("exp");
        let mut cfg = tiny_config();
        cfg.adapters = vec![AdapterKind::Hyper];
        cfg.seeds = vec![1];
        run(&cfg, &out, None).unwrap();

        let text = inspect(&out.join("seed_1/hyper/checkpoint.json")).unwrap();
        assert!(text.contains("fc0: hyper 6x5, 11 params"), "{text}");
        assert!(text.contains("a min"), "{text}");
        assert!(text.contains("b min"), "{text}");
        assert!(text.contains("total trainable params: 11"), "{text}");

        let frozen = LinearLayer::frozen("fc0", Matrix::from_fn(2, 2, |_, _| 1.0).unwrap(), None).unwrap();
        let empty_path = dir.path().join("empty.json");
        Checkpoint::from_layers([&frozen]).save(&empty_path).unwrap();
        let text = inspect(&empty_path).unwrap();
        assert!(text.contains("no trainable layers"), "{text}");
        assert!(text.contains("total trainable params: 0"), "{text}");
    }

    #[test]
    fn config_documents_round_trip() {
        let cfg = tiny_config();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back = parse_config(&json).unwrap();
        assert_eq!(cfg, back);

        // A minimal document leans on every default.
        let minimal = r#"{
            "model": {"arch": {"kind": "mlp", "widths": [5, 6], "activation": "identity"}},
            "task": {"kind": "scaled_teacher", "n": 6, "m": 5, "seed": 9,
                     "n_train": 32, "n_eval": 8},
            "adapters": ["hyper", "lora:2"],
            "train": {"epochs": 60, "batch_size": 64},
            "seeds": [1]
        }"#;
        let cfg = parse_config(minimal).unwrap();
        assert_eq!(cfg.analysis, AnalysisConfig::default());
        assert_eq!(cfg.adapters[1], AdapterKind::LoRA { r: 2 });
        assert!(cfg.model.adapter_map.is_empty());
        assert_eq!(cfg.output_dir, None);
    }
}
