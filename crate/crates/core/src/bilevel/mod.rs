//! Bi-level training of the prompt learner and the segmentation model.
//!
//! Parameters fall into three groups:
//!
//! * learner parameters (`capl.*`), the inner variable;
//! * fine-tuned segmentation parameters: LoRA adapters, prompt embeddings
//!   and the mask head (or the whole decoder in full fine-tuning mode);
//! * frozen parameters: the image trunk, the Fourier prompt features and,
//!   in LoRA mode, the base decoder weights.
//!
//! One outer step on a batch runs `K` plain gradient-descent steps of the
//! learner objective from the current learner weights, evaluates the outer
//! objective at the result, and back-propagates through the inner steps by
//! reverse recursion `v <- v - eta * H_k v` (one Hessian-vector product per
//! inner step). The learner keeps its inner-loop weights and then takes an
//! Adam step along the hypergradient; the segmentation parameters take an
//! Adam step along their direct gradient.
//!
//! Every sample gets its own graph and gradients are summed in batch order,
//! so runs are reproducible bit for bit.

pub mod adam;
#[cfg(test)]
mod tests;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use cpc_autograd::{grad, Graph, Mat, Var};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{AdamHyper, AdamState};

use crate::capl::{self, CalibrationTensor, CaplConfig};
use crate::checkpoint::Checkpoint;
use crate::minisam::{lora, AttentionRecord, ImageFeatures, MiniSam, SegOutput};
use crate::objectives::{self, MetricsReport, SegLossKind, SplitTag};
use crate::params::{gaussian, Bound, ParamStore};
use crate::promptkit::{annotate, make_prompt_groups, PromptAnnotation, PromptGroup, PromptMode};
use crate::synthgen::{mix_seed, SceneSample};
use crate::{Error, Result};

macro_rules! named_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name { $(#[serde(rename = $text)] $variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " `{}` (expected one of: {})"),
                        other,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

named_enum! {
    /// Which parts of the prompt learner are active and how they are trained.
    ///
    /// * `fixed`: no learner; only the segmentation parameters are tuned.
    /// * `learnable`: reweighting gates trained by the outer loss alone.
    /// * `task`: gates trained through the inner consistency loss, no
    ///   calibration and no entity term.
    /// * `causal`: gates and attention calibration with the full inner and
    ///   outer objectives.
    Arm { Fixed => "fixed", Learnable => "learnable", Task => "task", Causal => "causal" }
}

named_enum! {
    /// How the learner gradient treats the inner loop.
    HyperMode { Unrolled => "unrolled", FirstOrder => "first-order" }
}

named_enum! {
    /// Order of the two updates inside one step.
    Schedule { InnerFirst => "inner-first", OuterFirst => "outer-first" }
}

named_enum! {
    /// Segmentation parameters tuned alongside the learner; `frozen` tunes
    /// none of them.
    FineTune { Lora => "lora", Full => "full", Frozen => "frozen" }
}

impl Arm {
    pub fn uses_gates(self) -> bool {
        self != Arm::Fixed
    }

    pub fn uses_calibration(self) -> bool {
        self == Arm::Causal
    }

    pub fn has_inner(self) -> bool {
        matches!(self, Arm::Task | Arm::Causal)
    }

    /// Parameter prefixes of the learner for this arm.
    pub fn learner_prefixes(self) -> &'static [&'static str] {
        match self {
            Arm::Fixed => &[],
            Arm::Learnable | Arm::Task => &["capl.task."],
            Arm::Causal => &["capl."],
        }
    }
}

impl FineTune {
    pub fn prefixes(self) -> &'static [&'static str] {
        match self {
            FineTune::Lora => &["lora.", "prompt.", "head."],
            FineTune::Full => &["dec.", "prompt.", "head."],
            FineTune::Frozen => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiLevelConfig {
    pub arm: Arm,
    /// Inner gradient-descent steps `K`.
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Weight of the entity loss in the outer objective.
    pub lambda_en: f64,
    /// Weight of the attention sparsity term inside the entity loss.
    pub lambda_xi: f64,
    /// Prompt distributions per sample.
    pub n_t: usize,
    pub mode: HyperMode,
    pub schedule: Schedule,
    pub fine_tune: FineTune,
    pub epochs: usize,
    pub batch_size: usize,
    pub prompt_mode: PromptMode,
    /// Relative prompt jitter of the training distributions.
    pub train_jitter: f64,
    pub seg_loss: SegLossKind,
    pub seed: u64,
}

impl Default for BiLevelConfig {
    fn default() -> Self {
        BiLevelConfig {
            arm: Arm::Causal,
            inner_steps: 1,
            inner_lr: 0.1,
            outer_lr: 5e-3,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda_en: 0.6,
            lambda_xi: 0.4,
            n_t: 2,
            mode: HyperMode::Unrolled,
            schedule: Schedule::InnerFirst,
            fine_tune: FineTune::Lora,
            epochs: 100,
            batch_size: 8,
            prompt_mode: PromptMode::Box,
            train_jitter: 0.1,
            seg_loss: SegLossKind::Nll,
            seed: 0,
        }
    }
}

impl BiLevelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.inner_steps == 0 {
            return fail("inner_steps must be at least 1".into());
        }
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return fail(format!("inner_lr must be finite and non-negative, got {}", self.inner_lr));
        }
        if !(self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            return fail(format!("outer_lr must be positive, got {}", self.outer_lr));
        }
        if !(self.weight_decay >= 0.0) || !(self.lambda_en >= 0.0) || !(self.lambda_xi >= 0.0) {
            return fail("weight decay and loss weights must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return fail("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.n_t < 2 {
            return fail(format!("n_t must be at least 2, got {}", self.n_t));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.train_jitter >= 0.0) {
            return fail(format!("train_jitter must be non-negative, got {}", self.train_jitter));
        }
        Ok(())
    }

    /// Outer weight of the entity loss; only the causal arm has one.
    pub fn effective_lambda_en(&self) -> f64 {
        if self.arm.uses_calibration() {
            self.lambda_en
        } else {
            0.0
        }
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.outer_lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Parameters, optimiser moments and counters. Batch order is a function
/// of `(seed, epoch)`, so no generator state needs saving.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLevelState {
    pub params: ParamStore,
    pub adam: AdamState,
    pub step: u64,
    pub epoch: usize,
}

impl BiLevelState {
    pub fn new(params: ParamStore) -> Self {
        BiLevelState { params, adam: AdamState::default(), step: 0, epoch: 0 }
    }

    pub fn to_checkpoint(&self, config_hash: &str, seed: u64) -> Checkpoint {
        let mut arrays = self.params.clone();
        arrays.merge(&self.adam.to_store());
        let mut c = Checkpoint::new(config_hash, self.step, seed, arrays);
        c.meta.insert("epoch".into(), self.epoch.to_string());
        c.meta.insert("adam_t".into(), self.adam.t.to_string());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| -> Result<u64> {
            c.meta
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("manifest lacks a numeric `{k}`")))
        };
        let params: ParamStore = c.arrays.iter().filter(|(k, _)| !k.starts_with("adam.")).map(|(k, v)| (k.clone(), v.clone())).collect();
        Ok(BiLevelState {
            params,
            adam: AdamState::from_store(&c.arrays, meta("adam_t")?),
            step: c.step,
            epoch: meta("epoch")? as usize,
        })
    }
}

/// A training sample with frozen-trunk features and its fixed prompt
/// distributions.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub features: ImageFeatures,
    /// `(H*W) x n_entities` binary truth.
    pub truth: Mat,
    pub group: PromptGroup,
}

/// An evaluation sample with one prompt annotation.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub features: ImageFeatures,
    pub masks: Vec<Array2<bool>>,
    pub class_ids: Vec<usize>,
    pub annotation: PromptAnnotation,
    /// Scene-level irrelevant factor values.
    pub irrelevant: [f64; 4],
}

/// Seed of the prompt distributions of one sample.
pub fn prompt_seed(seed: u64, sample_seed: u64) -> u64 {
    mix_seed(mix_seed(seed, 0x9B0F), sample_seed)
}

pub fn prepare_train(
    model: &MiniSam,
    params: &ParamStore,
    samples: &[SceneSample],
    config: &BiLevelConfig,
) -> Result<Vec<TrainSample>> {
    samples
        .iter()
        .map(|s| {
            let masks: Vec<_> = s.entities.iter().map(|e| e.mask.clone()).collect();
            Ok(TrainSample {
                features: model.encode_image(params, &s.image)?,
                truth: objectives::truth_matrix(&masks),
                group: make_prompt_groups(
                    s,
                    config.n_t,
                    config.prompt_mode,
                    config.train_jitter,
                    prompt_seed(config.seed, s.seed),
                )?,
            })
        })
        .collect()
}

pub fn prepare_eval(
    model: &MiniSam,
    params: &ParamStore,
    samples: &[SceneSample],
    mode: PromptMode,
    jitter: f64,
    seed: u64,
) -> Result<Vec<EvalSample>> {
    samples
        .iter()
        .map(|s| {
            Ok(EvalSample {
                features: model.encode_image(params, &s.image)?,
                masks: s.entities.iter().map(|e| e.mask.clone()).collect(),
                class_ids: s.class_ids(),
                annotation: annotate(s, mode, jitter, prompt_seed(seed, s.seed))?,
                irrelevant: crate::synthgen::factor_probe(s).irrelevant_values(),
            })
        })
        .collect()
}

/// Everything one decoder pass produces.
pub struct Pass<'g> {
    pub seg: SegOutput<'g>,
    pub record: AttentionRecord<'g>,
    /// Prompt tokens after reweighting (plain encoding without a learner).
    pub prompts: Var<'g>,
    pub calibration: Option<CalibrationTensor<'g>>,
}

/// Prompt encoding, optional reweighting and calibration, then the decoder.
pub fn run_pass<'g>(
    model: &MiniSam,
    g: &'g Graph,
    p: &Bound<'g>,
    arm: Arm,
    tokens: Var<'g>,
    pixels: Var<'g>,
    annotation: &PromptAnnotation,
) -> Result<Pass<'g>> {
    let mut prompts = model.encode_prompts(g, p, annotation)?;
    if arm.uses_gates() {
        prompts = capl::reweight_prompts(p, prompts)?;
    }
    let calibration = if arm.uses_calibration() {
        Some(capl::emit_calibration(g, p, prompts, tokens, model.layout(annotation.len()))?)
    } else {
        None
    };
    let (seg, record) = model.forward(p, tokens, pixels, prompts, calibration.as_ref())?;
    Ok(Pass { seg, record, prompts, calibration })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Objective {
    Inner,
    Outer,
}

/// Loss terms of one sample on a graph.
struct Terms<'g> {
    seg: Vec<Var<'g>>,
    entity: Option<Var<'g>>,
}

/// Batch-averaged loss values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchLosses {
    /// Segmentation loss under each prompt distribution.
    pub seg: Vec<f64>,
    pub entity: f64,
    /// Value of the objective that was differentiated.
    pub objective: f64,
}

impl BatchLosses {
    pub fn task(&self) -> f64 {
        self.seg.iter().sum()
    }
}

/// Result of the inner loop: `thetas[k]` are the learner weights before
/// inner step `k`, `thetas[K]` the final ones.
#[derive(Debug, Clone)]
pub struct InnerResult {
    pub thetas: Vec<ParamStore>,
    pub losses: Vec<f64>,
}

impl InnerResult {
    pub fn last(&self) -> &ParamStore {
        self.thetas.last().expect("at least the starting point")
    }
}

/// Loss values of one outer step, measured where the outer objective was
/// evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub losses: BatchLosses,
    pub inner_losses: Vec<f64>,
}

/// One row of the per-epoch log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub seg_per_group: Vec<f64>,
    pub task: f64,
    pub entity: f64,
    pub outer: f64,
    pub base_dice: f64,
    pub target_dice: f64,
    pub wall_seconds: f64,
}

pub const LOG_FILE: &str = "epochs.csv";

/// Header of the per-epoch log for `n_t` prompt distributions.
pub fn log_header(n_t: usize) -> Vec<String> {
    let mut h = vec!["epoch".to_string()];
    h.extend((1..=n_t).map(|i| format!("l_sam_d{i}")));
    h.extend(
        ["l_task", "l_entity", "outer_total", "base_dice", "target_dice", "wall_seconds", "seed", "config_hash"]
            .map(String::from),
    );
    h
}

pub fn write_epoch_log(path: &Path, rows: &[EpochLog], n_t: usize, seed: u64, config_hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(log_header(n_t))?;
    for r in rows {
        let mut rec = vec![r.epoch.to_string()];
        rec.extend(r.seg_per_group.iter().map(|v| v.to_string()));
        rec.extend(
            [r.task, r.entity, r.outer, r.base_dice, r.target_dice, r.wall_seconds].iter().map(|v| v.to_string()),
        );
        rec.push(seed.to_string());
        rec.push(config_hash.to_string());
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema { column: name.to_string(), path: path.to_path_buf() })
    };
    let seg_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("l_sam_d"))
        .map(|(i, _)| i)
        .collect();
    let idx = [
        col("epoch")?,
        col("l_task")?,
        col("l_entity")?,
        col("outer_total")?,
        col("base_dice")?,
        col("target_dice")?,
        col("wall_seconds")?,
    ];
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Data(format!("non-numeric value in column {} of {}", headers[i].to_string(), path.display())))
        };
        out.push(EpochLog {
            epoch: num(idx[0])? as usize,
            seg_per_group: seg_cols.iter().map(|&i| num(i)).collect::<Result<_>>()?,
            task: num(idx[1])?,
            entity: num(idx[2])?,
            outer: num(idx[3])?,
            base_dice: num(idx[4])?,
            target_dice: num(idx[5])?,
            wall_seconds: num(idx[6])?,
        });
    }
    Ok(out)
}

/// Best checkpoint seen so far, by target Dice.
#[derive(Debug, Clone, PartialEq)]
pub struct Best {
    pub epoch: usize,
    pub target_dice: f64,
    pub params: ParamStore,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Run directory for logs and checkpoints.
    pub out_dir: Option<std::path::PathBuf>,
    pub config_hash: String,
    /// Stop after this many epochs (counted from zero), for resumption.
    pub stop_at: Option<usize>,
    /// Keep a copy of the parameters at the end of these epochs.
    pub snapshot_epochs: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub state: BiLevelState,
    pub best: Option<Best>,
    pub snapshots: Vec<(usize, ParamStore)>,
}

/// Evaluation and training data of one run.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Vec<TrainSample>,
    pub base: Vec<EvalSample>,
    pub target: Vec<EvalSample>,
}

pub struct BiLevel {
    pub model: MiniSam,
    pub config: BiLevelConfig,
}

impl BiLevel {
    pub fn new(model: MiniSam, config: BiLevelConfig) -> Result<Self> {
        config.validate()?;
        Ok(BiLevel { model, config })
    }

    /// Adds fresh adapters (LoRA mode) and learner parameters (arms with a
    /// learner) to a segmentation parameter store.
    pub fn initial_state(&self, mut params: ParamStore) -> BiLevelState {
        let seed = self.config.seed;
        if self.config.fine_tune == FineTune::Lora && params.names_with_prefix(&["lora."]).is_empty() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x10AA));
            lora::insert_adapters(&mut params, &lora::init_adapters(&self.model.config, &mut rng));
        }
        if self.config.arm.uses_gates() && params.names_with_prefix(&["capl."]).is_empty() {
            let cfg = CaplConfig::for_model(&self.model.config);
            params.merge(&capl::init_params(&self.model.config, &cfg, mix_seed(seed, 0xCA91)));
        }
        BiLevelState::new(params)
    }

    pub fn learner_names(&self, params: &ParamStore) -> Vec<String> {
        params.names_with_prefix(self.config.arm.learner_prefixes())
    }

    pub fn segmentation_names(&self, params: &ParamStore) -> Vec<String> {
        params.names_with_prefix(self.config.fine_tune.prefixes())
    }

    /// Learner and segmentation names, sorted.
    pub fn trainable_names(&self, params: &ParamStore) -> Vec<String> {
        let mut names = self.learner_names(params);
        names.extend(self.segmentation_names(params));
        names.sort();
        names.dedup();
        names
    }

    fn sample_terms<'g>(&self, g: &'g Graph, p: &Bound<'g>, s: &TrainSample) -> Result<Terms<'g>> {
        let tokens = g.constant(s.features.tokens.clone());
        let pixels = g.constant(s.features.pixels.clone());
        let with_entity = self.config.arm.uses_calibration();
        let upsample = self.model.upsample_matrix();
        let mut seg = Vec::with_capacity(s.group.len());
        let mut entity: Option<Var<'g>> = None;
        for ann in &s.group.annotations {
            let pass = run_pass(&self.model, g, p, self.config.arm, tokens, pixels, ann)?;
            seg.push(objectives::seg_loss(pass.seg.logits, &s.truth, self.config.seg_loss)?);
            if with_entity {
                let e = objectives::entity_loss(g, &pass.record, &s.truth, self.config.lambda_xi, &upsample)?;
                entity = Some(match entity {
                    Some(acc) => acc + e,
                    None => e,
                });
            }
        }
        let entity = entity.map(|e| e.scale(1.0 / s.group.len() as f64));
        Ok(Terms { seg, entity })
    }

    fn objective<'g>(&self, terms: &Terms<'g>, which: Objective) -> Var<'g> {
        let sum = terms.seg[1..].iter().fold(terms.seg[0], |a, b| a + *b);
        match which {
            Objective::Inner => match terms.entity {
                Some(e) => sum + e,
                None => sum,
            },
            Objective::Outer => {
                let mean = sum.scale(1.0 / terms.seg.len() as f64);
                let lambda = self.config.effective_lambda_en();
                match terms.entity {
                    Some(e) if lambda > 0.0 => mean + e.scale(lambda),
                    _ => mean,
                }
            }
        }
    }

    /// Batch-mean objective and its gradient with respect to `wrt`.
    fn batch_grad(
        &self,
        params: &ParamStore,
        batch: &[&TrainSample],
        which: Objective,
        wrt: &[String],
    ) -> Result<(BatchLosses, ParamStore)> {
        let n = batch.len() as f64;
        let mut losses = BatchLosses { seg: vec![0.0; self.config.n_t], ..Default::default() };
        let mut acc: Vec<Mat> = Vec::new();
        for s in batch {
            let g = Graph::new();
            let p = params.bind(&g, |name| wrt.binary_search_by(|w| w.as_str().cmp(name)).is_ok());
            let terms = self.sample_terms(&g, &p, s)?;
            let loss = self.objective(&terms, which);
            for (i, v) in terms.seg.iter().enumerate() {
                losses.seg[i] += v.item() / n;
            }
            losses.entity += terms.entity.map_or(0.0, |e| e.item()) / n;
            losses.objective += loss.item() / n;
            if wrt.is_empty() {
                continue;
            }
            let vars: Vec<Var> = wrt.iter().map(|w| p.get(w)).collect();
            let grads = grad(loss, &vars, false);
            if acc.is_empty() {
                acc = grads.iter().map(|v| v.value().as_ref() / n).collect();
            } else {
                for (a, v) in acc.iter_mut().zip(&grads) {
                    a.scaled_add(1.0 / n, v.value().as_ref());
                }
            }
        }
        Ok((losses, wrt.iter().cloned().zip(acc).collect()))
    }

    /// Batch-mean Hessian-vector product of the inner objective with
    /// respect to the learner.
    fn batch_hvp(&self, params: &ParamStore, batch: &[&TrainSample], names: &[String], v: &ParamStore) -> Result<ParamStore> {
        let n = batch.len() as f64;
        let mut acc: Vec<Mat> = Vec::new();
        for s in batch {
            let g = Graph::new();
            let p = params.bind(&g, |name| names.binary_search_by(|w| w.as_str().cmp(name)).is_ok());
            let terms = self.sample_terms(&g, &p, s)?;
            let loss = self.objective(&terms, Objective::Inner);
            let vars: Vec<Var> = names.iter().map(|w| p.get(w)).collect();
            let first = grad(loss, &vars, true);
            let mut dot: Option<Var> = None;
            for (gv, name) in first.iter().zip(names) {
                let term = (*gv * g.constant(v.get(name).expect("direction").clone())).sum();
                dot = Some(match dot {
                    Some(d) => d + term,
                    None => term,
                });
            }
            let hv = grad(dot.expect("non-empty learner"), &vars, false);
            if acc.is_empty() {
                acc = hv.iter().map(|x| x.value().as_ref() / n).collect();
            } else {
                for (a, x) in acc.iter_mut().zip(&hv) {
                    a.scaled_add(1.0 / n, x.value().as_ref());
                }
            }
        }
        Ok(names.iter().cloned().zip(acc).collect())
    }

    /// Batch-mean loss values without gradients.
    pub fn batch_losses(&self, params: &ParamStore, batch: &[&TrainSample], outer: bool) -> Result<BatchLosses> {
        let which = if outer { Objective::Outer } else { Objective::Inner };
        Ok(self.batch_grad(params, batch, which, &[])?.0)
    }

    /// `K` gradient-descent steps on the learner objective with the
    /// segmentation parameters held fixed.
    pub fn inner_step(&self, params: &ParamStore, batch: &[&TrainSample], step: u64) -> Result<InnerResult> {
        let names = self.learner_names(params);
        let mut thetas = vec![params.subset(self.config.arm.learner_prefixes())];
        let mut losses = Vec::with_capacity(self.config.inner_steps);
        let mut work = params.clone();
        for k in 0..self.config.inner_steps {
            work.merge(&thetas[k]);
            let (l, g) = self.batch_grad(&work, batch, Objective::Inner, &names)?;
            if !l.objective.is_finite() || !g.all_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("inner step {k}: learner loss {} or its gradient is not finite", l.objective),
                });
            }
            losses.push(l.objective);
            let mut next = thetas[k].clone();
            for (name, gv) in g.iter() {
                next.get_mut(name).expect("learner weight").scaled_add(-self.config.inner_lr, gv);
            }
            thetas.push(next);
        }
        Ok(InnerResult { thetas, losses })
    }

    /// Gradient of the outer objective after the inner loop: the learner part
    /// goes through the inner steps (unrolled mode) or treats the inner
    /// result as independent of its start (first-order mode); the
    /// segmentation part is direct.
    pub fn hypergradient(
        &self,
        params: &ParamStore,
        inner: &InnerResult,
        batch: &[&TrainSample],
    ) -> Result<(BatchLosses, ParamStore)> {
        let mut at = params.clone();
        at.merge(inner.last());
        let names = self.trainable_names(params);
        let (losses, mut grads) = self.batch_grad(&at, batch, Objective::Outer, &names)?;
        let learner = self.learner_names(params);
        if self.config.mode == HyperMode::Unrolled && self.config.inner_lr > 0.0 && !learner.is_empty() {
            let mut v = grads.subset(self.config.arm.learner_prefixes());
            let mut work = params.clone();
            for k in (0..inner.thetas.len() - 1).rev() {
                work.merge(&inner.thetas[k]);
                let hv = self.batch_hvp(&work, batch, &learner, &v)?;
                for (name, h) in hv.iter() {
                    v.get_mut(name).expect("learner direction").scaled_add(-self.config.inner_lr, h);
                }
            }
            grads.merge(&v);
        }
        Ok((losses, grads))
    }

    fn apply_outer(&self, state: &mut BiLevelState, grads: &ParamStore, losses: &BatchLosses) -> Result<()> {
        if !losses.objective.is_finite() || !grads.all_finite() {
            return Err(Error::Divergence {
                step: state.step,
                detail: format!("outer loss {} or its gradient is not finite", losses.objective),
            });
        }
        state.adam.update(&mut state.params, grads, &self.config.adam());
        if !state.params.all_finite() {
            return Err(Error::Divergence { step: state.step, detail: "parameters became non-finite".into() });
        }
        Ok(())
    }

    /// One training step on `batch` following the configured schedule.
    pub fn outer_step(&self, state: &mut BiLevelState, batch: &[&TrainSample]) -> Result<StepReport> {
        let has_inner = self.config.arm.has_inner();
        let report = match self.config.schedule {
            Schedule::InnerFirst => {
                let inner = if has_inner {
                    self.inner_step(&state.params, batch, state.step)?
                } else {
                    InnerResult { thetas: vec![state.params.subset(self.config.arm.learner_prefixes())], losses: vec![] }
                };
                let (losses, grads) = self.hypergradient(&state.params, &inner, batch)?;
                state.params.merge(inner.last());
                self.apply_outer(state, &grads, &losses)?;
                StepReport { losses, inner_losses: inner.losses }
            }
            Schedule::OuterFirst => {
                let names = self.trainable_names(&state.params);
                let (losses, grads) = self.batch_grad(&state.params, batch, Objective::Outer, &names)?;
                self.apply_outer(state, &grads, &losses)?;
                let mut inner_losses = vec![];
                if has_inner {
                    let inner = self.inner_step(&state.params, batch, state.step)?;
                    state.params.merge(inner.last());
                    inner_losses = inner.losses;
                }
                StepReport { losses, inner_losses }
            }
        };
        state.step += 1;
        Ok(report)
    }

    /// Batch order of one epoch.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(self.config.seed, 0xE90C), epoch as u64));
        order.shuffle(&mut rng);
        order
    }

    /// Runs one epoch and returns its loss means.
    pub fn run_epoch(&self, state: &mut BiLevelState, data: &[TrainSample]) -> Result<BatchLosses> {
        let order = self.epoch_order(data.len(), state.epoch);
        let batches: Vec<&[usize]> = order.chunks(self.config.batch_size).collect();
        let mut mean = BatchLosses { seg: vec![0.0; self.config.n_t], ..Default::default() };
        let w = 1.0 / batches.len() as f64;
        for chunk in batches {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &data[i]).collect();
            let r = self.outer_step(state, &batch)?;
            for (m, v) in mean.seg.iter_mut().zip(&r.losses.seg) {
                *m += w * v;
            }
            mean.entity += w * r.losses.entity;
            mean.objective += w * r.losses.objective;
        }
        state.epoch += 1;
        Ok(mean)
    }

    /// Trains from `state` until the configured epoch count (or
    /// `options.stop_at`), evaluating both test splits after each epoch.
    ///
    /// With an output directory the log, the latest state (`last/`) and the
    /// best-target-Dice parameters (`best/`) are written after every epoch;
    /// on divergence the latest good state is kept there and the error is
    /// returned.
    pub fn train(&self, mut state: BiLevelState, data: &TrainData, options: &TrainOptions) -> Result<TrainOutcome> {
        if data.train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let end = options.stop_at.unwrap_or(self.config.epochs).min(self.config.epochs);
        let mut log = Vec::new();
        let mut best = match &options.out_dir {
            Some(dir) if state.epoch > 0 => load_best(&dir.join("best"), &options.config_hash)?,
            _ => None,
        };
        if let Some(dir) = &options.out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            if state.epoch > 0 && path.exists() {
                log = read_epoch_log(&path)?;
                log.truncate(state.epoch);
            }
        }
        let mut snapshots = Vec::new();
        while state.epoch < end {
            let started = Instant::now();
            let before = state.clone();
            let losses = match self.run_epoch(&mut state, &data.train) {
                Ok(l) => l,
                Err(e) => {
                    if let Some(dir) = &options.out_dir {
                        before.to_checkpoint(&options.config_hash, self.config.seed).save(&dir.join("last"))?;
                    }
                    return Err(e);
                }
            };
            let base_dice = evaluate(&self.model, &state.params, self.config.arm, &data.base, SplitTag::Base)?.mean_dice(None);
            let target_dice =
                evaluate(&self.model, &state.params, self.config.arm, &data.target, SplitTag::Target)?.mean_dice(None);
            let row = EpochLog {
                epoch: state.epoch,
                task: losses.task(),
                seg_per_group: losses.seg,
                entity: losses.entity,
                outer: losses.objective,
                base_dice,
                target_dice,
                wall_seconds: started.elapsed().as_secs_f64(),
            };
            log::info!(
                "epoch {} outer {:.4} task {:.4} base {:.3} target {:.3}",
                row.epoch,
                row.outer,
                row.task,
                row.base_dice,
                row.target_dice
            );
            if best.as_ref().is_none_or(|b| target_dice > b.target_dice) {
                best = Some(Best { epoch: state.epoch, target_dice, params: state.params.clone() });
            }
            if options.snapshot_epochs.contains(&state.epoch) {
                snapshots.push((state.epoch, state.params.clone()));
            }
            log.push(row);
            if let Some(dir) = &options.out_dir {
                write_epoch_log(&dir.join(LOG_FILE), &log, self.config.n_t, self.config.seed, &options.config_hash)?;
                state.to_checkpoint(&options.config_hash, self.config.seed).save(&dir.join("last"))?;
                if let Some(b) = &best {
                    if b.epoch == state.epoch {
                        save_best(b, &dir.join("best"), &options.config_hash, self.config.seed)?;
                    }
                }
            }
        }
        Ok(TrainOutcome { log, state, best, snapshots })
    }

    /// Across-distribution spread of the per-distribution learner gradients
    /// of the task loss: `mean_i |g_i - mean g|^2 / (mean_i |g_i|)^2`.
    pub fn confounder_gradient_variance(&self, params: &ParamStore, batch: &[&TrainSample]) -> Result<f64> {
        let names = self.learner_names(params);
        if names.is_empty() {
            return Err(Error::Config(format!("arm `{}` has no learner parameters", self.config.arm)));
        }
        let n_t = self.config.n_t;
        let mut per: Vec<Vec<f64>> = vec![Vec::new(); n_t];
        for s in batch {
            let g = Graph::new();
            let p = params.bind(&g, |name| names.binary_search_by(|w| w.as_str().cmp(name)).is_ok());
            let terms = self.sample_terms(&g, &p, s)?;
            let vars: Vec<Var> = names.iter().map(|w| p.get(w)).collect();
            for (i, seg) in terms.seg.iter().enumerate() {
                let flat: Vec<f64> = grad(*seg, &vars, false).iter().flat_map(|v| v.value().iter().copied().collect::<Vec<_>>()).collect();
                if per[i].is_empty() {
                    per[i] = flat;
                } else {
                    per[i].iter_mut().zip(&flat).for_each(|(a, b)| *a += b);
                }
            }
        }
        Ok(normalized_spread(&per))
    }
}

/// `mean_i |x_i - mean x|^2 / (mean_i |x_i|)^2`, zero for all-zero inputs.
pub fn normalized_spread(vectors: &[Vec<f64>]) -> f64 {
    let n = vectors.len() as f64;
    let dim = vectors[0].len();
    let mean: Vec<f64> = (0..dim).map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n).collect();
    let var = vectors.iter().map(|v| v.iter().zip(&mean).map(|(a, m)| (a - m).powi(2)).sum::<f64>()).sum::<f64>() / n;
    let norm = vectors.iter().map(|v| v.iter().map(|a| a * a).sum::<f64>().sqrt()).sum::<f64>() / n;
    if norm == 0.0 {
        0.0
    } else {
        var / (norm * norm)
    }
}

fn save_best(best: &Best, dir: &Path, config_hash: &str, seed: u64) -> Result<()> {
    let mut c = Checkpoint::new(config_hash, best.epoch as u64, seed, best.params.clone());
    c.meta.insert("epoch".into(), best.epoch.to_string());
    c.meta.insert("target_dice".into(), best.target_dice.to_string());
    c.save(dir)
}

fn load_best(dir: &Path, config_hash: &str) -> Result<Option<Best>> {
    if !dir.exists() {
        return Ok(None);
    }
    let c = Checkpoint::load(dir, Some(config_hash))?;
    let get = |k: &str| c.meta.get(k).ok_or_else(|| Error::Checkpoint(format!("best checkpoint lacks `{k}`")));
    Ok(Some(Best {
        epoch: get("epoch")?.parse().map_err(|_| Error::Checkpoint("bad epoch".into()))?,
        target_dice: get("target_dice")?.parse().map_err(|_| Error::Checkpoint("bad target_dice".into()))?,
        params: c.arrays,
    }))
}

/// Per-entity Dice and IoU of thresholded predictions.
pub fn evaluate(model: &MiniSam, params: &ParamStore, arm: Arm, samples: &[EvalSample], split: SplitTag) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for (i, s) in samples.iter().enumerate() {
        let g = Graph::new();
        let p = params.bind(&g, |_| false);
        let pass = run_pass(model, &g, &p, arm, g.constant(s.features.tokens.clone()), g.constant(s.features.pixels.clone()), &s.annotation)?;
        for (k, pred) in pass.seg.masks().iter().enumerate() {
            report.push(i, k, s.class_ids[k], split, pred, &s.masks[k])?;
        }
    }
    Ok(report)
}

/// Attention read-outs on evaluation samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionStats {
    /// Mean image-to-token attention on entity tokens, over layers and heads.
    pub image_prompt_mass: f64,
    /// Mean IoU between the thresholded attention masks of distinct entities.
    pub pairwise_mask_iou: f64,
    /// Mean absolute calibration entry (zero without calibration).
    pub calibration_abs: f64,
}

pub fn attention_stats(model: &MiniSam, params: &ParamStore, arm: Arm, samples: &[EvalSample]) -> Result<AttentionStats> {
    let upsample = model.upsample_matrix();
    let (mut mass, mut mass_n) = (0.0, 0usize);
    let (mut iou, mut iou_n) = (0.0, 0usize);
    let (mut cal, mut cal_n) = (0.0, 0usize);
    for s in samples {
        let g = Graph::new();
        let p = params.bind(&g, |_| false);
        let pass = run_pass(model, &g, &p, arm, g.constant(s.features.tokens.clone()), g.constant(s.features.pixels.clone()), &s.annotation)?;
        let n = pass.record.n_entities();
        let mut masks = Vec::with_capacity(n);
        for e in 0..n {
            for m in objectives::image_prompt_slices(&pass.record, e) {
                let v = m.value();
                mass += v.iter().map(|x| x.abs()).sum::<f64>();
                mass_n += v.len();
            }
            let soft = capl::entity_attention_mask(&g, &pass.record, e, &upsample)?.value();
            masks.push(Array2::from_shape_fn((model.config.image_size, model.config.image_size), |(y, x)| {
                soft[[y * model.config.image_size + x, 0]] >= 0.5
            }));
        }
        for a in 0..n {
            for b in a + 1..n {
                iou += objectives::iou_score(&masks[a], &masks[b])?;
                iou_n += 1;
            }
        }
        if let Some(c) = &pass.calibration {
            cal += c.mean_abs();
            cal_n += 1;
        }
    }
    let avg = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(AttentionStats {
        image_prompt_mass: avg(mass, mass_n),
        pairwise_mask_iou: avg(iou, iou_n),
        calibration_abs: avg(cal, cal_n),
    })
}

/// Decoder output prompt tokens (one row per entity) with the scene's
/// irrelevant factors, for the irrelevance-correlation statistic.
pub fn prompt_readout(model: &MiniSam, params: &ParamStore, arm: Arm, samples: &[EvalSample]) -> Result<(Vec<Vec<f64>>, Vec<[f64; 4]>)> {
    let mut tokens = Vec::new();
    let mut factors = Vec::new();
    for s in samples {
        let g = Graph::new();
        let p = params.bind(&g, |_| false);
        let pass = run_pass(model, &g, &p, arm, g.constant(s.features.tokens.clone()), g.constant(s.features.pixels.clone()), &s.annotation)?;
        let t = pass.seg.tokens.value();
        for row in t.rows() {
            tokens.push(row.to_vec());
            factors.push(s.irrelevant);
        }
    }
    Ok((tokens, factors))
}

/// Warm-up of the whole segmentation model on base classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub jitter: f64,
    pub prompt_mode: PromptMode,
    pub seg_loss: SegLossKind,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig {
            epochs: 20,
            lr: 2e-3,
            batch_size: 8,
            jitter: 0.05,
            prompt_mode: PromptMode::Box,
            seg_loss: SegLossKind::Nll,
        }
    }
}

/// Trains trunk, prompt encoder, decoder and head from scratch; returns the
/// mean loss per epoch. Prompts are redrawn every epoch.
pub fn warmup(model: &MiniSam, params: &mut ParamStore, samples: &[SceneSample], config: &WarmupConfig, seed: u64) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Config("warm-up set is empty".into()));
    }
    let prefixes = ["trunk.", "prompt.", "dec.", "head."];
    let names = params.names_with_prefix(&prefixes);
    let hp = AdamHyper { lr: config.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
    let mut adam = AdamState::default();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, 0x3A53), epoch as u64)));
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let n = chunk.len() as f64;
            let mut acc: Vec<Mat> = Vec::new();
            for &i in chunk {
                let s = &samples[i];
                let ann = annotate(s, config.prompt_mode, config.jitter, mix_seed(mix_seed(seed, epoch as u64), s.seed))?;
                let masks: Vec<_> = s.entities.iter().map(|e| e.mask.clone()).collect();
                let truth = objectives::truth_matrix(&masks);
                let g = Graph::new();
                let p = params.bind(&g, |name| prefixes.iter().any(|x| name.starts_with(x)));
                let (tokens, pixels) = model.encode_image_graph(&g, &p, &s.image)?;
                let pass = run_pass(model, &g, &p, Arm::Fixed, tokens, pixels, &ann)?;
                let loss = objectives::seg_loss(pass.seg.logits, &truth, config.seg_loss)?;
                total += loss.item();
                let vars: Vec<Var> = names.iter().map(|w| p.get(w)).collect();
                let grads = grad(loss, &vars, false);
                if acc.is_empty() {
                    acc = grads.iter().map(|v| v.value().as_ref() / n).collect();
                } else {
                    for (a, v) in acc.iter_mut().zip(&grads) {
                        a.scaled_add(1.0 / n, v.value().as_ref());
                    }
                }
            }
            let grads: ParamStore = names.iter().cloned().zip(acc).collect();
            if !grads.all_finite() {
                return Err(Error::Divergence { step: epoch as u64, detail: "warm-up gradient is not finite".into() });
            }
            adam.update(params, &grads, &hp);
        }
        let mean = total / samples.len() as f64;
        log::info!("warm-up epoch {epoch}: loss {mean:.4}");
        curve.push(mean);
    }
    Ok(curve)
}

/// Hypergradient fidelity against central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct HypergradReport {
    pub inner_steps: usize,
    pub inner_lr: f64,
    /// Learner coordinates compared.
    pub coordinates: usize,
    /// Parameters of the whole model, learner included.
    pub model_params: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub seconds: f64,
}

/// Magnitude below which relative errors are measured against this floor.
pub const REL_ERR_FLOOR: f64 = 1e-6;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Compares the unrolled hypergradient of the outer objective with central
/// finite differences over every learner coordinate, on the smallest model
/// configuration and two synthetic scenes. All parameters, the learner
/// included, are random and non-zero.
pub fn hypergrad_check(inner_steps: usize, inner_lr: f64, seed: u64) -> Result<HypergradReport> {
    use crate::synthgen::{sample_scene, standard_factors, with_domain, ClassVocabulary, FactorDomain, SceneGeometry};

    let started = Instant::now();
    let mcfg = crate::minisam::ModelConfig::tiny();
    let model = MiniSam::new(mcfg)?;
    let config = BiLevelConfig {
        arm: Arm::Causal,
        inner_steps,
        inner_lr,
        mode: HyperMode::Unrolled,
        batch_size: 2,
        train_jitter: 0.1,
        seed,
        ..BiLevelConfig::default()
    };
    let vocab = ClassVocabulary::standard(3)?;
    let factors = with_domain(standard_factors(), "radius", FactorDomain::Interval { lo: 2.5, hi: 4.0 });
    let geometry = SceneGeometry { height: mcfg.image_size, width: mcfg.image_size, max_entities: 2 };
    let scenes = (0..2)
        .map(|i| sample_scene(mix_seed(seed, i), &vocab, &factors, &vocab.base_ids(), geometry))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x4E55));
    let mut params = model.init_params(seed);
    let bl = BiLevel::new(model, config)?;
    let mut state = bl.initial_state(params.clone());
    // every learner and adapter weight random, so no term vanishes
    for name in state.params.names_with_prefix(&["capl.", "lora."]) {
        let shape = state.params.get(&name).expect("present").dim();
        state.params.insert(name, gaussian(&mut rng, shape.0, shape.1, 0.5));
    }
    params = state.params;
    let model_params = params.total_count();
    let data = prepare_train(&bl.model, &params, &scenes, &bl.config)?;
    let batch: Vec<&TrainSample> = data.iter().collect();

    let inner = bl.inner_step(&params, &batch, 0)?;
    let (_, grads) = bl.hypergradient(&params, &inner, &batch)?;

    let outer_after_inner = |p: &ParamStore| -> Result<f64> {
        let inner = bl.inner_step(p, &batch, 0)?;
        let mut at = p.clone();
        at.merge(inner.last());
        Ok(bl.batch_losses(&at, &batch, true)?.objective)
    };
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut coordinates = 0;
    for name in bl.learner_names(&params) {
        let analytic = grads.get(&name).expect("learner gradient").clone();
        for idx in 0..analytic.len() {
            let (r, c) = (idx / analytic.ncols(), idx % analytic.ncols());
            let mut plus = params.clone();
            plus.get_mut(&name).expect("present")[[r, c]] += FD_STEP;
            let mut minus = params.clone();
            minus.get_mut(&name).expect("present")[[r, c]] -= FD_STEP;
            let fd = (outer_after_inner(&plus)? - outer_after_inner(&minus)?) / (2.0 * FD_STEP);
            let a = analytic[[r, c]];
            let abs = (a - fd).abs();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / a.abs().max(fd.abs()).max(REL_ERR_FLOOR));
            coordinates += 1;
        }
    }
    Ok(HypergradReport {
        inner_steps,
        inner_lr,
        coordinates,
        model_params,
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        seconds: started.elapsed().as_secs_f64(),
    })
}
