//! Run configuration, experiment drivers, CSV export and plots.
//!
//! A run is described by one flat `key = value` TOML file ([`RunConfig`]).
//! Output goes under `$CPC_OUT_ROOT` (or `out_root` in the file, or
//! `./runs`), in `<experiment>-<config hash>/`:
//!
//! ```text
//! config.toml                      resolved configuration
//! <label>/config.toml              resolved configuration of one arm
//! <label>/seed<k>/epochs.csv       per-epoch losses and Dice
//! <label>/seed<k>/metrics.csv      final per-sample, per-entity scores
//! <label>/seed<k>/{last,best}/     checkpoints
//! curves.csv, summary.csv          tables behind every plot
//! ```
//!
//! Every experiment starts from one shared warm-up of the segmentation
//! model on base classes, cached under `warmup-<hash>/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bilevel::{
    self, prepare_eval, prepare_train, Arm, BiLevel, BiLevelConfig, EpochLog, FineTune, HyperMode, Schedule, TrainData,
    TrainOptions, WarmupConfig,
};
use crate::capl;
use crate::checkpoint::Checkpoint;
use crate::minisam::{MiniSam, ModelConfig};
use crate::objectives::{consistency_spread, MetricsReport, SegLossKind, SplitTag};
use crate::params::ParamStore;
use crate::promptkit::PromptMode;
use crate::synthgen::{generate_split, make_dataset, mix_seed, ClassVocabulary, DatasetConfig, SceneGeometry, SplitName};
use crate::{Error, Result};

/// Environment variable naming the output root.
pub const OUT_ROOT_ENV: &str = "CPC_OUT_ROOT";
pub const DEFAULT_OUT_ROOT: &str = "runs";
pub const CURVES_FILE: &str = "curves.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Flat run configuration. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: String,
    /// Output root; empty means `$CPC_OUT_ROOT` or `./runs`.
    pub out_root: String,
    pub seeds: Vec<u64>,

    pub vocab_size: usize,
    pub n_train: usize,
    pub n_test_base: usize,
    pub n_test_target: usize,
    pub max_entities: usize,
    /// Scenes used by the irrelevance-correlation audit.
    pub n_audit: usize,

    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
    pub pixel_dim: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,

    pub warmup_samples: usize,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub warmup_jitter: f64,
    pub warmup_seed: u64,

    pub arm: Arm,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda_en: f64,
    pub lambda_xi: f64,
    pub n_t: usize,
    pub mode: HyperMode,
    pub schedule: Schedule,
    pub fine_tune: FineTune,
    pub epochs: usize,
    pub batch_size: usize,
    pub prompt_mode: PromptMode,
    pub train_jitter: f64,
    pub seg_loss: SegLossKind,

    /// Jitter of the biased evaluation prompts.
    pub biased_jitter: f64,
    /// Parameter snapshots taken for the gradient-variance trend.
    pub snapshots: usize,
    pub lambda_en_grid: Vec<f64>,
    pub lambda_xi_grid: Vec<f64>,
    pub lora_rank_grid: Vec<usize>,
    pub train_size_grid: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let b = BiLevelConfig::default();
        RunConfig {
            experiment: "run".into(),
            out_root: String::new(),
            seeds: vec![0, 1, 2, 3, 4],
            vocab_size: 9,
            n_train: 50,
            n_test_base: 48,
            n_test_target: 48,
            max_entities: 4,
            n_audit: 200,
            image_size: m.image_size,
            patch: m.patch,
            dim: m.dim,
            heads: m.heads,
            depth: m.depth,
            mlp_hidden: m.mlp_hidden,
            pixel_dim: m.pixel_dim,
            lora_rank: m.lora_rank,
            lora_alpha: m.lora_alpha,
            warmup_samples: 128,
            warmup_epochs: 50,
            warmup_lr: 2e-3,
            warmup_jitter: 0.05,
            warmup_seed: 1000,
            arm: b.arm,
            inner_steps: b.inner_steps,
            inner_lr: b.inner_lr,
            outer_lr: b.outer_lr,
            weight_decay: b.weight_decay,
            beta1: b.beta1,
            beta2: b.beta2,
            eps: b.eps,
            lambda_en: b.lambda_en,
            lambda_xi: b.lambda_xi,
            n_t: b.n_t,
            mode: b.mode,
            schedule: b.schedule,
            fine_tune: b.fine_tune,
            epochs: 30,
            batch_size: b.batch_size,
            prompt_mode: b.prompt_mode,
            train_jitter: b.train_jitter,
            seg_loss: SegLossKind::SoftDice,
            biased_jitter: 0.25,
            snapshots: 5,
            lambda_en_grid: vec![0.0, 0.2, 0.6, 1.0],
            lambda_xi_grid: vec![0.0, 0.2, 0.4, 0.8],
            lora_rank_grid: vec![1, 2, 4, 8],
            train_size_grid: vec![32, 16],
        }
    }
}

fn hash_text(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string()
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Applies `key=value` overrides; values are parsed as TOML and fall
    /// back to plain strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let (k, v) = (k.trim(), v.trim());
            let value = toml::from_str::<toml::Table>(&format!("x = {v}"))
                .ok()
                .and_then(|mut t| t.remove("x"))
                .unwrap_or_else(|| toml::Value::String(v.to_string()));
            table.insert(k.to_string(), value);
        }
        Self::from_toml_str(&toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serialises")
    }

    /// First 16 hex digits of the SHA-256 of the resolved file. The output
    /// root is not part of it.
    pub fn hash(&self) -> String {
        hash_text(&RunConfig { out_root: String::new(), ..self.clone() }.to_toml())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.experiment.is_empty() || self.experiment.contains(['/', '\\']) {
            return Err(Error::Config(format!("bad experiment name `{}`", self.experiment)));
        }
        if self.n_train == 0 || self.n_test_base == 0 {
            return Err(Error::Config("train and base-test splits must be non-empty".into()));
        }
        if !(self.biased_jitter >= 0.0) {
            return Err(Error::Config("biased_jitter must be non-negative".into()));
        }
        self.model().validate()?;
        self.bilevel(0).validate()?;
        if self.lambda_en_grid.iter().chain(&self.lambda_xi_grid).any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("sweep weights must be non-negative".into()));
        }
        if self.lora_rank_grid.contains(&0) || self.train_size_grid.contains(&0) {
            return Err(Error::Config("sweep sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            patch: self.patch,
            dim: self.dim,
            heads: self.heads,
            depth: self.depth,
            mlp_hidden: self.mlp_hidden,
            pixel_dim: self.pixel_dim,
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
        }
    }

    pub fn dataset(&self, seed: u64) -> DatasetConfig {
        DatasetConfig {
            vocab_size: self.vocab_size,
            n_train: self.n_train,
            n_test_base: self.n_test_base,
            n_test_target: self.n_test_target,
            geometry: SceneGeometry { height: self.image_size, width: self.image_size, max_entities: self.max_entities },
            seed,
        }
    }

    pub fn bilevel(&self, seed: u64) -> BiLevelConfig {
        BiLevelConfig {
            arm: self.arm,
            inner_steps: self.inner_steps,
            inner_lr: self.inner_lr,
            outer_lr: self.outer_lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            lambda_en: self.lambda_en,
            lambda_xi: self.lambda_xi,
            n_t: self.n_t,
            mode: self.mode,
            schedule: self.schedule,
            fine_tune: self.fine_tune,
            epochs: self.epochs,
            batch_size: self.batch_size,
            prompt_mode: self.prompt_mode,
            train_jitter: self.train_jitter,
            seg_loss: self.seg_loss,
            seed,
        }
    }

    pub fn warmup(&self) -> WarmupConfig {
        WarmupConfig {
            epochs: self.warmup_epochs,
            lr: self.warmup_lr,
            jitter: self.warmup_jitter,
            ..WarmupConfig::default()
        }
    }

    pub fn out_root(&self) -> PathBuf {
        if !self.out_root.is_empty() {
            return PathBuf::from(&self.out_root);
        }
        std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_root().join(format!("{}-{}", self.experiment, self.hash()))
    }

    /// Hash of everything the warm-up depends on.
    fn warmup_hash(&self) -> String {
        let key = format!(
            "{:?}|{}|{}|{}|{}|{}|{}|{}",
            ModelConfig { lora_rank: 0, lora_alpha: 0.0, ..self.model() },
            self.vocab_size,
            self.max_entities,
            self.warmup_samples,
            self.warmup_epochs,
            self.warmup_lr,
            self.warmup_jitter,
            self.warmup_seed
        );
        hash_text(&key)
    }
}

/// Writes `text` to `path`, creating parent directories.
fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Segmentation parameters after the shared warm-up. With `cache` the
/// result is stored under `<out root>/warmup-<hash>/` and reused.
pub fn pretrained(config: &RunConfig, cache: bool) -> Result<ParamStore> {
    let hash = config.warmup_hash();
    let dir = config.out_root().join(format!("warmup-{hash}"));
    if cache && dir.exists() {
        return Ok(Checkpoint::load(&dir, Some(&hash))?.arrays);
    }
    let model = MiniSam::new(config.model())?;
    let vocab = ClassVocabulary::standard(config.vocab_size)?;
    let dc = config.dataset(config.warmup_seed);
    let scenes = generate_split(&dc, &vocab, SplitName::Warmup, &vocab.base_ids(), config.warmup_samples)?;
    let mut params = model.init_params(config.warmup_seed);
    let curve = bilevel::warmup(&model, &mut params, &scenes, &config.warmup(), config.warmup_seed)?;
    if cache {
        let mut c = Checkpoint::new(hash.as_str(), config.warmup_epochs as u64, config.warmup_seed, params.clone());
        c.meta.insert("final_loss".into(), format!("{:.6}", curve.last().copied().unwrap_or(f64::NAN)));
        c.save(&dir)?;
    }
    Ok(params)
}

/// One trained arm of one seed.
#[derive(Debug, Clone)]
pub struct ArmRun {
    pub label: String,
    pub seed: u64,
    pub config: RunConfig,
    pub log: Vec<EpochLog>,
    /// Parameters before training (adapters and learner included).
    pub init: ParamStore,
    pub params: ParamStore,
    pub snapshots: Vec<(usize, ParamStore)>,
    pub data: TrainData,
    pub wall_seconds: f64,
}

impl ArmRun {
    pub fn trainer(&self) -> Result<BiLevel> {
        BiLevel::new(MiniSam::new(self.config.model())?, self.config.bilevel(self.seed))
    }
}

/// Builds the frozen-trunk data of one seed.
pub fn prepare_data(config: &RunConfig, model: &MiniSam, params: &ParamStore, seed: u64) -> Result<TrainData> {
    let ds = make_dataset(&config.dataset(seed))?;
    let b = config.bilevel(seed);
    Ok(TrainData {
        train: prepare_train(model, params, &ds.train, &b)?,
        base: prepare_eval(model, params, &ds.test_base, config.prompt_mode, 0.0, seed)?,
        target: prepare_eval(model, params, &ds.test_target, config.prompt_mode, 0.0, seed)?,
    })
}

/// Evenly spaced epochs (1-based, last included) for `n` snapshots.
fn snapshot_epochs(epochs: usize, n: usize) -> Vec<usize> {
    if n == 0 || epochs == 0 {
        return vec![];
    }
    let mut v: Vec<usize> = (1..=n).map(|i| (i * epochs).div_ceil(n).max(1)).collect();
    v.dedup();
    v
}

/// Trains one arm from the warm-up parameters. With `dir` the log,
/// checkpoints, final metrics and resolved config are written there.
pub fn train_arm(config: &RunConfig, pretrained: &ParamStore, seed: u64, label: &str, dir: Option<&Path>) -> Result<ArmRun> {
    config.validate()?;
    let model = MiniSam::new(config.model())?;
    let data = prepare_data(config, &model, pretrained, seed)?;
    let bl = BiLevel::new(model, config.bilevel(seed))?;
    let state = bl.initial_state(pretrained.clone());
    let init = state.params.clone();
    let hash = config.hash();
    if let Some(d) = dir {
        write_file(&d.join("config.toml"), &config.to_toml())?;
    }
    let options = TrainOptions {
        out_dir: dir.map(Path::to_path_buf),
        config_hash: hash.clone(),
        stop_at: None,
        snapshot_epochs: snapshot_epochs(config.epochs, config.snapshots),
    };
    let started = Instant::now();
    let out = bl.train(state, &data, &options)?;
    let wall_seconds = started.elapsed().as_secs_f64();
    if let Some(d) = dir {
        let mut report = bilevel::evaluate(&bl.model, &out.state.params, config.arm, &data.base, SplitTag::Base)?;
        report.rows.extend(bilevel::evaluate(&bl.model, &out.state.params, config.arm, &data.target, SplitTag::Target)?.rows);
        report.write_csv(&d.join("metrics.csv"), seed, &hash, label)?;
    }
    log::info!("{label} seed {seed}: {} epochs in {wall_seconds:.1}s", out.log.len());
    Ok(ArmRun {
        label: label.to_string(),
        seed,
        config: config.clone(),
        log: out.log,
        init,
        params: out.state.params,
        snapshots: out.snapshots,
        data,
        wall_seconds,
    })
}

/// Summary of one arm and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub label: String,
    pub seed: u64,
    pub config_hash: String,
    pub log: Vec<EpochLog>,
    pub final_base: f64,
    pub final_target: f64,
    pub peak_target: f64,
    pub peak_epoch: usize,
    /// Consistency spread of the per-distribution training losses at the
    /// final parameters.
    pub spread: f64,
    pub wall_seconds: f64,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Per-distribution segmentation losses over the whole training split.
pub fn distribution_losses(run: &ArmRun, params: &ParamStore) -> Result<Vec<f64>> {
    let bl = run.trainer()?;
    let all: Vec<_> = run.data.train.iter().collect();
    Ok(bl.batch_losses(params, &all, false)?.seg)
}

impl ArmResult {
    pub fn from_run(run: &ArmRun) -> Result<Self> {
        let last = run.log.last().ok_or_else(|| Error::Config("no epochs were trained".into()))?;
        let (peak_epoch, peak_target) = run
            .log
            .iter()
            .map(|r| (r.epoch, r.target_dice))
            .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        Ok(ArmResult {
            label: run.label.clone(),
            seed: run.seed,
            config_hash: run.config.hash(),
            log: run.log.clone(),
            final_base: last.base_dice,
            final_target: last.target_dice,
            peak_target,
            peak_epoch,
            spread: consistency_spread(&distribution_losses(run, &run.params)?),
            wall_seconds: run.wall_seconds,
        })
    }
}

/// All arms and seeds of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub name: String,
    pub runs: Vec<ArmResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub seeds: usize,
    pub final_target: (f64, f64),
    pub final_base: (f64, f64),
    pub peak_target: (f64, f64),
    pub spread: (f64, f64),
    pub wall_seconds: f64,
}

impl ExperimentResult {
    /// Labels in first-appearance order.
    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.runs {
            if !out.contains(&r.label) {
                out.push(r.label.clone());
            }
        }
        out
    }

    pub fn arm(&self, label: &str) -> Vec<&ArmResult> {
        self.runs.iter().filter(|r| r.label == label).collect()
    }

    pub fn run(&self, label: &str, seed: u64) -> Option<&ArmResult> {
        self.runs.iter().find(|r| r.label == label && r.seed == seed)
    }

    /// Seed-mean base and target Dice per epoch.
    pub fn mean_curve(&self, label: &str) -> Vec<(usize, f64, f64)> {
        let runs = self.arm(label);
        let len = runs.iter().map(|r| r.log.len()).min().unwrap_or(0);
        (0..len)
            .map(|i| {
                let n = runs.len() as f64;
                let b = runs.iter().map(|r| r.log[i].base_dice).sum::<f64>() / n;
                let t = runs.iter().map(|r| r.log[i].target_dice).sum::<f64>() / n;
                (runs[0].log[i].epoch, b, t)
            })
            .collect()
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        self.labels()
            .into_iter()
            .map(|label| {
                let runs = self.arm(&label);
                let col = |f: fn(&ArmResult) -> f64| mean_std(&runs.iter().map(|r| f(r)).collect::<Vec<_>>());
                SummaryRow {
                    seeds: runs.len(),
                    final_target: col(|r| r.final_target),
                    final_base: col(|r| r.final_base),
                    peak_target: col(|r| r.peak_target),
                    spread: col(|r| r.spread),
                    wall_seconds: runs.iter().map(|r| r.wall_seconds).sum(),
                    label,
                }
            })
            .collect()
    }

    /// Writes `curves.csv` and `summary.csv` into `dir`.
    pub fn write_tables(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_curves(&dir.join(CURVES_FILE), &self.runs)?;
        write_summary(&dir.join(SUMMARY_FILE), &self.runs)
    }
}

fn write_curves(path: &Path, runs: &[ArmResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["label", "seed", "config_hash", "epoch", "base_dice", "target_dice"])?;
    for r in runs {
        for row in &r.log {
            w.write_record([
                r.label.clone(),
                r.seed.to_string(),
                r.config_hash.clone(),
                row.epoch.to_string(),
                format!("{:.6}", row.base_dice),
                format!("{:.6}", row.target_dice),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_summary(path: &Path, runs: &[ArmResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "label",
        "seed",
        "config_hash",
        "final_base_dice",
        "final_target_dice",
        "peak_target_dice",
        "peak_epoch",
        "spread",
    ])?;
    for r in runs {
        w.write_record([
            r.label.clone(),
            r.seed.to_string(),
            r.config_hash.clone(),
            format!("{:.6}", r.final_base),
            format!("{:.6}", r.final_target),
            format!("{:.6}", r.peak_target),
            r.peak_epoch.to_string(),
            format!("{:.6}", r.spread),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains every `(label, config)` variant on every seed of `base`, writing
/// under `<run dir>/<label>/seed<k>/` when `out` is given.
pub fn run_variants(
    name: &str,
    base: &RunConfig,
    variants: &[(String, RunConfig)],
    pretrained: &ParamStore,
    out: Option<&Path>,
) -> Result<ExperimentResult> {
    let mut runs = Vec::new();
    for seed in &base.seeds {
        for (label, cfg) in variants {
            let dir = out.map(|o| o.join(label).join(format!("seed{seed}")));
            if let Some(o) = out {
                write_file(&o.join(label).join("config.toml"), &cfg.to_toml())?;
            }
            let run = train_arm(cfg, pretrained, *seed, label, dir.as_deref())?;
            runs.push(ArmResult::from_run(&run)?);
        }
    }
    let result = ExperimentResult { name: name.to_string(), runs };
    if let Some(o) = out {
        write_file(&o.join("config.toml"), &base.to_toml())?;
        result.write_tables(o)?;
    }
    Ok(result)
}

/// Base and target Dice curves with and without the prompt learner.
pub fn run_generalization_curve(config: &RunConfig, pretrained: &ParamStore, out: Option<&Path>) -> Result<ExperimentResult> {
    if config.n_test_target == 0 {
        return Err(Error::Config("the generalisation curve needs a target split".into()));
    }
    let variants = vec![
        ("without-capl".to_string(), RunConfig { arm: Arm::Fixed, ..config.clone() }),
        ("with-capl".to_string(), RunConfig { arm: Arm::Causal, ..config.clone() }),
    ];
    let result = run_variants("generalization", config, &variants, pretrained, out)?;
    if let Some(o) = out {
        plot_csv(&o.join(CURVES_FILE), PlotKind::Curve, &o.join("generalization.svg"))?;
    }
    Ok(result)
}

/// Target Dice under clean and biased evaluation prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasReport {
    pub seed: u64,
    pub clean_dice: f64,
    pub biased_dice: f64,
    /// Mean over samples of the standard deviation of per-entity Dice.
    pub clean_entity_spread: f64,
    pub biased_entity_spread: f64,
}

fn entity_spread(report: &MetricsReport) -> f64 {
    let mut by_sample: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in &report.rows {
        by_sample.entry(r.sample).or_default().push(r.dice);
    }
    let spreads: Vec<f64> = by_sample.values().filter(|v| v.len() > 1).map(|v| mean_std(v).1).collect();
    if spreads.is_empty() {
        0.0
    } else {
        spreads.iter().sum::<f64>() / spreads.len() as f64
    }
}

/// Evaluates trained parameters on the target split with clean prompts and
/// with prompts jittered by `config.biased_jitter`.
pub fn prompt_bias_study(config: &RunConfig, params: &ParamStore, seed: u64) -> Result<BiasReport> {
    let model = MiniSam::new(config.model())?;
    let ds = make_dataset(&config.dataset(seed))?;
    if ds.test_target.is_empty() {
        return Err(Error::Config("prompt bias study needs a target split".into()));
    }
    let eval = |jitter: f64| -> Result<MetricsReport> {
        let samples = prepare_eval(&model, params, &ds.test_target, config.prompt_mode, jitter, seed)?;
        bilevel::evaluate(&model, params, config.arm, &samples, SplitTag::Target)
    };
    let clean = eval(0.0)?;
    let biased = eval(config.biased_jitter)?;
    Ok(BiasReport {
        seed,
        clean_dice: clean.mean_dice(None),
        biased_dice: biased.mean_dice(None),
        clean_entity_spread: entity_spread(&clean),
        biased_entity_spread: entity_spread(&biased),
    })
}

/// Trains `config.arm` on every seed and runs [`prompt_bias_study`].
pub fn run_prompt_bias_study(config: &RunConfig, pretrained: &ParamStore, out: Option<&Path>) -> Result<Vec<BiasReport>> {
    let mut reports = Vec::new();
    for &seed in &config.seeds {
        let dir = out.map(|o| o.join(config.arm.as_str()).join(format!("seed{seed}")));
        let run = train_arm(config, pretrained, seed, config.arm.as_str(), dir.as_deref())?;
        reports.push(prompt_bias_study(config, &run.params, seed)?);
    }
    if let Some(o) = out {
        fs::create_dir_all(o).map_err(|e| Error::io(o, e))?;
        let path = o.join("prompt_bias.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["seed", "config_hash", "clean_dice", "biased_dice", "clean_entity_spread", "biased_entity_spread"])?;
        for r in &reports {
            w.write_record([
                r.seed.to_string(),
                config.hash(),
                format!("{:.6}", r.clean_dice),
                format!("{:.6}", r.biased_dice),
                format!("{:.6}", r.clean_entity_spread),
                format!("{:.6}", r.biased_entity_spread),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(reports)
}

/// Ablation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// fixed, learnable, task and causal prompts.
    Arms,
    LambdaEn,
    LambdaXi,
    LoraRank,
    PromptType,
    /// LoRA against full decoder fine-tuning.
    FineTune,
    /// The learner on a frozen segmentation model.
    PlugAndPlay,
    TrainSize,
    /// Update order, distribution count and inner depth.
    Schedules,
}

impl Ablation {
    pub const ALL: &'static [Ablation] = &[
        Ablation::Arms,
        Ablation::LambdaEn,
        Ablation::LambdaXi,
        Ablation::LoraRank,
        Ablation::PromptType,
        Ablation::FineTune,
        Ablation::PlugAndPlay,
        Ablation::TrainSize,
        Ablation::Schedules,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Arms => "arms",
            Ablation::LambdaEn => "lambda-en",
            Ablation::LambdaXi => "lambda-xi",
            Ablation::LoraRank => "lora-rank",
            Ablation::PromptType => "prompt-type",
            Ablation::FineTune => "fine-tune",
            Ablation::PlugAndPlay => "plug-and-play",
            Ablation::TrainSize => "train-size",
            Ablation::Schedules => "schedules",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .iter()
            .copied()
            .find(|a| a.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

/// Labelled configurations of one ablation.
pub fn ablation_variants(config: &RunConfig, study: Ablation) -> Vec<(String, RunConfig)> {
    let c = || config.clone();
    match study {
        Ablation::Arms => Arm::ALL.iter().map(|a| (a.to_string(), RunConfig { arm: *a, ..c() })).collect(),
        Ablation::LambdaEn => config
            .lambda_en_grid
            .iter()
            .map(|v| (format!("lambda-en-{v}"), RunConfig { arm: Arm::Causal, lambda_en: *v, ..c() }))
            .collect(),
        Ablation::LambdaXi => config
            .lambda_xi_grid
            .iter()
            .map(|v| (format!("lambda-xi-{v}"), RunConfig { arm: Arm::Causal, lambda_xi: *v, ..c() }))
            .collect(),
        Ablation::LoraRank => config
            .lora_rank_grid
            .iter()
            .map(|r| (format!("rank-{r}"), RunConfig { fine_tune: FineTune::Lora, lora_rank: *r, lora_alpha: *r as f64, ..c() }))
            .collect(),
        Ablation::PromptType => [PromptMode::Point, PromptMode::Box]
            .iter()
            .map(|m| (m.to_string(), RunConfig { prompt_mode: *m, ..c() }))
            .collect(),
        Ablation::FineTune => [FineTune::Lora, FineTune::Full]
            .iter()
            .map(|f| (f.to_string(), RunConfig { fine_tune: *f, ..c() }))
            .collect(),
        Ablation::PlugAndPlay => vec![
            ("bare".into(), RunConfig { arm: Arm::Fixed, fine_tune: FineTune::Frozen, ..c() }),
            ("bare+capl".into(), RunConfig { arm: Arm::Causal, fine_tune: FineTune::Frozen, ..c() }),
        ],
        Ablation::TrainSize => config
            .train_size_grid
            .iter()
            .map(|n| (format!("train-{n}"), RunConfig { n_train: *n, ..c() }))
            .collect(),
        Ablation::Schedules => vec![
            ("m1".into(), RunConfig { schedule: Schedule::InnerFirst, ..c() }),
            ("m2".into(), RunConfig { schedule: Schedule::InnerFirst, n_t: 4, ..c() }),
            ("m3".into(), RunConfig { schedule: Schedule::OuterFirst, ..c() }),
            ("m4".into(), RunConfig { schedule: Schedule::InnerFirst, inner_steps: 5, ..c() }),
        ],
    }
}

pub fn run_ablation(config: &RunConfig, study: Ablation, pretrained: &ParamStore, out: Option<&Path>) -> Result<ExperimentResult> {
    let variants = ablation_variants(config, study);
    for (_, v) in &variants {
        v.validate()?;
    }
    let result = run_variants(study.as_str(), config, &variants, pretrained, out)?;
    if let Some(o) = out {
        plot_csv(&o.join(SUMMARY_FILE), PlotKind::Summary, &o.join(format!("{}.svg", study.as_str())))?;
    }
    Ok(result)
}

/// Consistency read-outs of one trained arm.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub seed: u64,
    /// Per-distribution loss spread at the trained parameters.
    pub spread: f64,
    /// The same before training.
    pub spread_untrained: f64,
    /// With every prompt distribution jitter-free.
    pub spread_zero_jitter: f64,
    /// Mean |correlation| between decoder prompt tokens and irrelevant
    /// factors, before and after training.
    pub irrelevance_init: f64,
    pub irrelevance_trained: f64,
    /// `(epoch, normalised across-distribution gradient variance)`.
    pub gradient_variance: Vec<(usize, f64)>,
    /// Least-squares slope of the gradient variance against epoch.
    pub gradient_variance_slope: f64,
}

fn slope(points: &[(usize, f64)]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 as f64 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 as f64 - mx).powi(2)).sum();
    sxy / sxx
}

/// Irrelevance correlation of `params` over the audit scenes.
pub fn irrelevance_correlation(run: &ArmRun, params: &ParamStore) -> Result<f64> {
    let cfg = &run.config;
    let model = MiniSam::new(cfg.model())?;
    let vocab = ClassVocabulary::standard(cfg.vocab_size)?;
    let dc = cfg.dataset(mix_seed(run.seed, 0xA0D1));
    let mut pool = vocab.base_ids();
    pool.extend(vocab.target_ids());
    let scenes = generate_split(&dc, &vocab, SplitName::TestBase, &pool, cfg.n_audit)?;
    let samples = prepare_eval(&model, params, &scenes, cfg.prompt_mode, 0.0, run.seed)?;
    let (tokens, factors) = bilevel::prompt_readout(&model, params, cfg.arm, &samples)?;
    capl::irrelevance_correlation(&tokens, &factors)
}

/// Audits a trained arm.
pub fn consistency_audit(run: &ArmRun) -> Result<AuditReport> {
    let bl = run.trainer()?;
    let spread = consistency_spread(&distribution_losses(run, &run.params)?);
    let spread_untrained = consistency_spread(&distribution_losses(run, &run.init)?);
    let model = MiniSam::new(run.config.model())?;
    let ds = make_dataset(&run.config.dataset(run.seed))?;
    let clean = prepare_train(&model, &run.params, &ds.train, &BiLevelConfig { train_jitter: 0.0, ..bl.config.clone() })?;
    let all: Vec<_> = clean.iter().collect();
    let spread_zero_jitter = consistency_spread(&bl.batch_losses(&run.params, &all, false)?.seg);
    let mut gradient_variance = Vec::new();
    if !bl.learner_names(&run.params).is_empty() {
        let batch: Vec<_> = run.data.train.iter().take(16).collect();
        for (epoch, p) in &run.snapshots {
            gradient_variance.push((*epoch, bl.confounder_gradient_variance(p, &batch)?));
        }
    }
    Ok(AuditReport {
        seed: run.seed,
        spread,
        spread_untrained,
        spread_zero_jitter,
        irrelevance_init: irrelevance_correlation(run, &run.init)?,
        irrelevance_trained: irrelevance_correlation(run, &run.params)?,
        gradient_variance_slope: slope(&gradient_variance),
        gradient_variance,
    })
}

/// Trains `config.arm` on every seed and audits it.
pub fn run_consistency_audit(config: &RunConfig, pretrained: &ParamStore, out: Option<&Path>) -> Result<Vec<AuditReport>> {
    let mut reports = Vec::new();
    for &seed in &config.seeds {
        let dir = out.map(|o| o.join(config.arm.as_str()).join(format!("seed{seed}")));
        let run = train_arm(config, pretrained, seed, config.arm.as_str(), dir.as_deref())?;
        reports.push(consistency_audit(&run)?);
    }
    if let Some(o) = out {
        fs::create_dir_all(o).map_err(|e| Error::io(o, e))?;
        let path = o.join("audit.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record([
            "seed",
            "config_hash",
            "spread",
            "spread_untrained",
            "spread_zero_jitter",
            "irrelevance_init",
            "irrelevance_trained",
            "gradient_variance_slope",
        ])?;
        for r in &reports {
            w.write_record([
                r.seed.to_string(),
                config.hash(),
                format!("{:.6}", r.spread),
                format!("{:.6}", r.spread_untrained),
                format!("{:.6e}", r.spread_zero_jitter),
                format!("{:.6}", r.irrelevance_init),
                format!("{:.6}", r.irrelevance_trained),
                format!("{:.6e}", r.gradient_variance_slope),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(reports)
}

/// Collects every `<label>/seed<k>/epochs.csv` below `run_dir` into
/// `export/curves.csv` and `export/summary.csv` and renders
/// `export/curves.svg`. Rows are sorted by label, seed and epoch.
pub fn export(run_dir: &Path) -> Result<PathBuf> {
    let mut runs = Vec::new();
    let mut labels: Vec<PathBuf> = read_dirs(run_dir)?;
    labels.sort();
    for label_dir in labels {
        let label = label_dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if label == "export" {
            continue;
        }
        let mut seeds: Vec<(u64, PathBuf)> = read_dirs(&label_dir)?
            .into_iter()
            .filter_map(|p| {
                let s = p.file_name()?.to_str()?.strip_prefix("seed")?.parse().ok()?;
                Some((s, p))
            })
            .collect();
        seeds.sort();
        for (seed, dir) in seeds {
            let path = dir.join(bilevel::LOG_FILE);
            if !path.exists() {
                continue;
            }
            let log = bilevel::read_epoch_log(&path)?;
            let Some(last) = log.last().cloned() else { continue };
            let hash = read_column(&path, "config_hash")?.into_iter().next().unwrap_or_default();
            let (peak_epoch, peak_target) =
                log.iter().map(|r| (r.epoch, r.target_dice)).fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            runs.push(ArmResult {
                label: label.clone(),
                seed,
                config_hash: hash,
                final_base: last.base_dice,
                final_target: last.target_dice,
                peak_target,
                peak_epoch,
                spread: consistency_spread(&last.seg_per_group),
                wall_seconds: log.iter().map(|r| r.wall_seconds).sum(),
                log,
            });
        }
    }
    if runs.is_empty() {
        return Err(Error::Data(format!("no epoch logs below {}", run_dir.display())));
    }
    let out = run_dir.join("export");
    let result = ExperimentResult { name: "export".into(), runs };
    result.write_tables(&out)?;
    plot_csv(&out.join(CURVES_FILE), PlotKind::Curve, &out.join("curves.svg"))?;
    Ok(out)
}

fn read_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    Ok(out)
}

fn read_column(path: &Path, column: &str) -> Result<Vec<String>> {
    let mut r = csv::Reader::from_path(path)?;
    let idx = r
        .headers()?
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| Error::Schema { column: column.into(), path: path.to_path_buf() })?;
    let mut out = Vec::new();
    for rec in r.records() {
        out.push(rec?.get(idx).unwrap_or_default().to_string());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// Seed-mean base and target Dice per epoch and label, from a curves
    /// table.
    Curve,
    /// Seed-mean final target Dice per label, from a summary table.
    Summary,
}

impl std::str::FromStr for PlotKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "curve" => Ok(PlotKind::Curve),
            "summary" => Ok(PlotKind::Summary),
            other => Err(Error::Config(format!("unknown plot kind `{other}` (expected curve or summary)"))),
        }
    }
}

fn numeric(path: &Path, column: &str) -> Result<Vec<f64>> {
    read_column(path, column)?
        .into_iter()
        .map(|v| v.parse().map_err(|_| Error::Data(format!("non-numeric `{column}` value `{v}` in {}", path.display()))))
        .collect()
}

type Series = (String, Vec<(f64, f64)>);

/// Series drawn by [`plot_csv`], computed from the table alone.
pub fn plot_series(csv_path: &Path, kind: PlotKind) -> Result<Vec<Series>> {
    let labels = read_column(csv_path, "label")?;
    let mut order: Vec<String> = Vec::new();
    for l in &labels {
        if !order.contains(l) {
            order.push(l.clone());
        }
    }
    match kind {
        PlotKind::Curve => {
            let epochs = numeric(csv_path, "epoch")?;
            let base = numeric(csv_path, "base_dice")?;
            let target = numeric(csv_path, "target_dice")?;
            let mut series = Vec::new();
            for label in &order {
                for (name, values) in [("base", &base), ("target", &target)] {
                    let mut acc: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
                    for i in (0..labels.len()).filter(|&i| &labels[i] == label) {
                        let e = acc.entry(epochs[i] as i64).or_insert((0.0, 0));
                        e.0 += values[i];
                        e.1 += 1;
                    }
                    let pts = acc.into_iter().map(|(e, (s, n))| (e as f64, s / n as f64)).collect();
                    series.push((format!("{label} {name}"), pts));
                }
            }
            Ok(series)
        }
        PlotKind::Summary => {
            let target = numeric(csv_path, "final_target_dice")?;
            let pts = order
                .iter()
                .enumerate()
                .map(|(k, label)| {
                    let v: Vec<f64> = (0..labels.len()).filter(|&i| &labels[i] == label).map(|i| target[i]).collect();
                    (k as f64, mean_std(&v).0)
                })
                .collect();
            Ok(vec![("final target dice".to_string(), pts)])
        }
    }
}

/// Renders a table as an SVG line chart; returns the number of series.
pub fn plot_csv(csv_path: &Path, kind: PlotKind, out: &Path) -> Result<usize> {
    let series = plot_series(csv_path, kind)?;
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (_, pts) in &series {
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if !x0.is_finite() {
        return Err(Error::Data(format!("{} has no rows to plot", csv_path.display())));
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-3);
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let draw_err = |e: &dyn std::fmt::Display| Error::Data(format!("plot {}: {e}", out.display()));
    let root = SVGBackend::new(out, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(|e| draw_err(&e))?;
    chart.configure_mesh().draw().map_err(|e| draw_err(&e))?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| draw_err(&e))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled()))).map_err(|e| draw_err(&e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| draw_err(&e))?;
    root.present().map_err(|e| draw_err(&e))?;
    Ok(series.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            seeds: vec![0],
            n_train: 4,
            n_test_base: 2,
            n_test_target: 2,
            n_audit: 6,
            image_size: 16,
            patch: 4,
            dim: 8,
            heads: 2,
            depth: 1,
            mlp_hidden: 8,
            pixel_dim: 4,
            lora_rank: 2,
            lora_alpha: 2.0,
            max_entities: 2,
            warmup_samples: 4,
            warmup_epochs: 1,
            epochs: 2,
            batch_size: 2,
            snapshots: 2,
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_round_trips_and_hashes() {
        let c = RunConfig::default();
        let text = c.to_toml();
        assert!(text.contains("lambda_en = 0.6"));
        assert!(text.contains("arm = \"causal\""));
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 16);
        let other = c.with_overrides(&["lambda_en=0.2".into()]).unwrap();
        assert_ne!(other.hash(), c.hash());
        assert_eq!(other.lambda_en, 0.2);
        let moved = RunConfig { out_root: "/elsewhere".into(), ..c.clone() };
        assert_eq!(moved.hash(), c.hash());
    }

    #[test]
    fn partial_files_take_defaults() {
        let c = RunConfig::from_toml_str("experiment = \"x\"\nseeds = [3]\narm = \"task\"\n").unwrap();
        assert_eq!(c.seeds, vec![3]);
        assert_eq!(c.arm, Arm::Task);
        assert_eq!(c.outer_lr, 5e-3);
        assert_eq!(c.n_t, 2);
    }

    #[test]
    fn bad_files_are_config_errors() {
        for text in ["nonsense_key = 1", "arm = \"bogus\"", "seeds = []", "lambda_xi = -1.0", "heads = 3", "n_t = 1"] {
            let e = RunConfig::from_toml_str(text).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{text}: {e}");
        }
        assert!(RunConfig::default().with_overrides(&["no_equals".into()]).is_err());
    }

    #[test]
    fn out_root_prefers_the_file() {
        let c = RunConfig { out_root: "/tmp/x".into(), ..RunConfig::default() };
        assert_eq!(c.out_root(), PathBuf::from("/tmp/x"));
        assert!(c.run_dir().starts_with("/tmp/x"));
    }

    #[test]
    fn snapshots_are_spread_over_training() {
        assert_eq!(snapshot_epochs(30, 5), vec![6, 12, 18, 24, 30]);
        assert_eq!(snapshot_epochs(2, 5), vec![1, 2]);
        assert!(snapshot_epochs(0, 5).is_empty());
    }

    #[test]
    fn ablations_cover_the_sweeps() {
        let c = RunConfig::default();
        let en: Vec<f64> = ablation_variants(&c, Ablation::LambdaEn).iter().map(|v| v.1.lambda_en).collect();
        assert!(en.contains(&0.6));
        let xi: Vec<f64> = ablation_variants(&c, Ablation::LambdaXi).iter().map(|v| v.1.lambda_xi).collect();
        assert!(xi.contains(&0.4));
        assert_eq!(ablation_variants(&c, Ablation::Arms).len(), 4);
        let sched = ablation_variants(&c, Ablation::Schedules);
        assert_eq!(sched[1].1.n_t, 4);
        assert_eq!(sched[3].1.inner_steps, 5);
        let sizes: Vec<usize> = ablation_variants(&c, Ablation::TrainSize).iter().map(|v| v.1.n_train).collect();
        assert_eq!(sizes, vec![32, 16]);
        for a in Ablation::ALL {
            assert_eq!(a.as_str().parse::<Ablation>().unwrap(), *a);
        }
        assert_eq!("nope".parse::<Ablation>().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn curve_plot_from_a_hand_written_table() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("c.csv");
        fs::write(
            &csv,
            "label,seed,config_hash,epoch,base_dice,target_dice\n\
             a,0,h,1,0.5,0.3\na,0,h,2,0.6,0.35\nb,0,h,1,0.55,0.31\n",
        )
        .unwrap();
        let n = plot_csv(&csv, PlotKind::Curve, &dir.path().join("c.svg")).unwrap();
        assert_eq!(n, 4);
        assert!(fs::read_to_string(dir.path().join("c.svg")).unwrap().contains("<svg"));
        fs::write(&csv, "label,seed,epoch,base_dice\na,0,1,0.5\n").unwrap();
        match plot_csv(&csv, PlotKind::Curve, &dir.path().join("d.svg")) {
            Err(Error::Schema { column, .. }) => assert_eq!(column, "target_dice"),
            other => panic!("expected a schema error, got {other:?}"),
        }
    }

    #[test]
    fn generalization_needs_a_target_split() {
        let c = RunConfig { n_test_target: 0, ..small() };
        assert!(matches!(run_generalization_curve(&c, &ParamStore::new(), None), Err(Error::Config(_))));
    }

    #[test]
    fn small_experiment_exports_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig { out_root: dir.path().to_string_lossy().into(), ..small() };
        let pre = pretrained(&c, true).unwrap();
        assert_eq!(pretrained(&c, true).unwrap(), pre);
        let run_dir = c.run_dir();
        let result = run_generalization_curve(&c, &pre, Some(&run_dir)).unwrap();
        assert_eq!(result.labels(), vec!["without-capl", "with-capl"]);
        assert_eq!(result.mean_curve("with-capl").len(), 2);
        assert_eq!(plot_series(&run_dir.join(CURVES_FILE), PlotKind::Curve).unwrap().len(), 4);
        assert!(run_dir.join("with-capl/seed0/best").exists());
        assert!(run_dir.join("with-capl/seed0/metrics.csv").exists());
        let out = export(&run_dir).unwrap();
        let first = fs::read(out.join(CURVES_FILE)).unwrap();
        let first_summary = fs::read(out.join(SUMMARY_FILE)).unwrap();
        export(&run_dir).unwrap();
        assert_eq!(fs::read(out.join(CURVES_FILE)).unwrap(), first);
        assert_eq!(fs::read(out.join(SUMMARY_FILE)).unwrap(), first_summary);
    }

    #[test]
    fn audit_and_bias_study_on_a_small_run() {
        let c = small();
        let pre = pretrained(&c, false).unwrap();
        let run = train_arm(&c, &pre, 0, "causal", None).unwrap();
        let a = consistency_audit(&run).unwrap();
        assert!(a.spread_zero_jitter < 1e-6, "{a:?}");
        assert_eq!(a.gradient_variance.len(), 2);
        assert!(a.irrelevance_init.is_finite() && a.irrelevance_trained.is_finite());
        let clean = prompt_bias_study(&RunConfig { biased_jitter: 0.0, ..c.clone() }, &run.params, 0).unwrap();
        assert_eq!(clean.clean_dice.to_bits(), clean.biased_dice.to_bits());
        let last = run.log.last().unwrap().target_dice;
        assert_eq!(clean.clean_dice.to_bits(), last.to_bits());
    }
}
