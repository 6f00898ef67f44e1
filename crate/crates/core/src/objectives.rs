//! Segmentation losses, the consistency and entity losses, and Dice/IoU.
//!
//! The pixel loss is the binary negative log-likelihood
//! `mean(softplus(z) - y z)`, which equals binary cross-entropy of
//! `sigmoid(z)` without forming the logarithm explicitly.

use std::path::Path;
use std::rc::Rc;

use cpc_autograd::{Graph, Mat, SparseMatrix, Var};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::capl::entity_attention_mask;
use crate::minisam::AttentionRecord;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegLossKind {
    Nll,
    SoftDice,
}

/// Stacks binary masks as the columns of an `(H*W) x n` 0/1 matrix.
pub fn truth_matrix(masks: &[Array2<bool>]) -> Mat {
    let (h, w) = masks.first().map_or((0, 0), |m| m.dim());
    Mat::from_shape_fn((h * w, masks.len()), |(i, k)| if masks[k][[i / w, i % w]] { 1.0 } else { 0.0 })
}

fn check_truth(logits: Var<'_>, truth: &Mat) -> Result<()> {
    if logits.shape() != truth.dim() {
        return Err(Error::Contract(format!("logits {:?} vs truth {:?}", logits.shape(), truth.dim())));
    }
    if truth.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::Data("truth mask is not binary".into()));
    }
    Ok(())
}

/// Mean over prompts and pixels of the per-pixel loss.
pub fn seg_loss<'g>(logits: Var<'g>, truth: &Mat, kind: SegLossKind) -> Result<Var<'g>> {
    check_truth(logits, truth)?;
    let g = logits.graph();
    match kind {
        SegLossKind::Nll => {
            let y = g.constant(truth.clone());
            Ok((logits.softplus() - y * logits).mean())
        }
        SegLossKind::SoftDice => {
            let probs = logits.sigmoid();
            soft_dice_loss(probs, truth)
        }
    }
}

/// `1 - (2 sum(p y) + 1) / (sum p + sum y + 1)` per column, averaged over
/// columns.
pub fn soft_dice_loss<'g>(probs: Var<'g>, truth: &Mat) -> Result<Var<'g>> {
    if probs.shape() != truth.dim() {
        return Err(Error::Contract(format!("prediction {:?} vs truth {:?}", probs.shape(), truth.dim())));
    }
    let g = probs.graph();
    let y = g.constant(truth.clone());
    let inter = (probs * y).sum_rows().scale(2.0).add_scalar(1.0);
    let denom = (probs.sum_rows() + y.sum_rows()).add_scalar(1.0);
    let ratio = inter * denom.powf(-1.0);
    Ok(ratio.scale(-1.0).add_scalar(1.0).mean())
}

/// Mean absolute value over a set of maps, normalised by entry count.
/// Linear in the maps' magnitudes.
pub fn l1_term<'g>(maps: &[Var<'g>]) -> Var<'g> {
    assert!(!maps.is_empty(), "l1 over nothing");
    let count: usize = maps.iter().map(|m| m.shape().0 * m.shape().1).sum();
    let mut total: Option<Var<'g>> = None;
    for m in maps {
        let s = m.abs().sum();
        total = Some(match total {
            Some(t) => t + s,
            None => s,
        });
    }
    total.expect("non-empty").scale(1.0 / count as f64)
}

/// Attention entries tied to prompt `e` that the sparsity penalty acts on:
/// its image-to-token column and its token self-attention column, in every
/// layer and head.
pub fn entity_attention_slices<'g>(record: &AttentionRecord<'g>, e: usize) -> Vec<Var<'g>> {
    let token = record.token_of_entity(e);
    let mut out = Vec::new();
    for l in &record.layers {
        for m in l.image_prompt.iter().chain(&l.prompt_prompt) {
            out.push(m.slice_cols(token, 1));
        }
    }
    out
}

/// Image-to-token entity columns only.
pub fn image_prompt_slices<'g>(record: &AttentionRecord<'g>, e: usize) -> Vec<Var<'g>> {
    let token = record.token_of_entity(e);
    record.layers.iter().flat_map(|l| l.image_prompt.iter().map(move |m| m.slice_cols(token, 1))).collect()
}

/// Sum over entities of the soft-Dice loss between the entity's attention
/// mask and its ground truth, plus `lambda_xi` times the L1 of its
/// attention slices.
pub fn entity_loss<'g>(
    g: &'g Graph,
    record: &AttentionRecord<'g>,
    truth: &Mat,
    lambda_xi: f64,
    upsample: &Rc<SparseMatrix>,
) -> Result<Var<'g>> {
    if !(lambda_xi >= 0.0) {
        return Err(Error::Config(format!("lambda_xi must be non-negative, got {lambda_xi}")));
    }
    let n = record.n_entities();
    if truth.ncols() != n {
        return Err(Error::Contract(format!("{} truth masks for {n} prompts", truth.ncols())));
    }
    let mut total: Option<Var<'g>> = None;
    for e in 0..n {
        let mask = entity_attention_mask(g, record, e, upsample)?;
        let col = truth.column(e).to_owned().insert_axis(ndarray::Axis(1));
        let mut term = soft_dice_loss(mask, &col)?;
        if lambda_xi > 0.0 {
            term = term + l1_term(&entity_attention_slices(record, e)).scale(lambda_xi);
        }
        total = Some(match total {
            Some(t) => t + term,
            None => term,
        });
    }
    Ok(total.expect("at least one entity"))
}

/// Sum and components of the per-distribution segmentation losses.
pub fn task_consistency_loss<'g>(components: &[Var<'g>]) -> Result<(Var<'g>, Vec<f64>)> {
    if components.len() < 2 {
        return Err(Error::Config(format!("consistency needs at least 2 distributions, got {}", components.len())));
    }
    let shape = components[0].shape();
    if components.iter().any(|c| c.shape() != shape || shape != (1, 1)) {
        return Err(Error::Data("per-distribution losses must be scalars".into()));
    }
    let mut sum = components[0];
    for c in &components[1..] {
        sum = sum + *c;
    }
    Ok((sum, components.iter().map(|c| c.item()).collect()))
}

/// `max_i |L_i - mean| / mean`.
pub fn consistency_spread(components: &[f64]) -> f64 {
    let mean = components.iter().sum::<f64>() / components.len() as f64;
    if mean == 0.0 {
        return 0.0;
    }
    components.iter().map(|l| (l - mean).abs()).fold(0.0, f64::max) / mean
}

fn counts(a: &Array2<bool>, b: &Array2<bool>) -> Result<(usize, usize, usize)> {
    if a.dim() != b.dim() {
        return Err(Error::Contract(format!("mask shapes {:?} and {:?} differ", a.dim(), b.dim())));
    }
    let mut inter = 0;
    let mut na = 0;
    let mut nb = 0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    Ok((inter, na, nb))
}

/// `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice_score(pred: &Array2<bool>, truth: &Array2<bool>) -> Result<f64> {
    let (i, a, b) = counts(pred, truth)?;
    Ok(if a + b == 0 { 1.0 } else { 2.0 * i as f64 / (a + b) as f64 })
}

/// `|A∩B| / |A∪B|`; two empty masks score 1.
pub fn iou_score(pred: &Array2<bool>, truth: &Array2<bool>) -> Result<f64> {
    let (i, a, b) = counts(pred, truth)?;
    let union = a + b - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitTag {
    Base,
    Target,
}

impl SplitTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitTag::Base => "base",
            SplitTag::Target => "target",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub sample: usize,
    pub entity: usize,
    pub class_id: usize,
    pub split: SplitTag,
    pub dice: f64,
    pub iou: f64,
    pub pred_pixels: usize,
    pub truth_pixels: usize,
}

/// Per-entity scores of one evaluation pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn push(&mut self, sample: usize, entity: usize, class_id: usize, split: SplitTag, pred: &Array2<bool>, truth: &Array2<bool>) -> Result<()> {
        let (_, a, b) = counts(pred, truth)?;
        self.rows.push(MetricRow {
            sample,
            entity,
            class_id,
            split,
            dice: dice_score(pred, truth)?,
            iou: iou_score(pred, truth)?,
            pred_pixels: a,
            truth_pixels: b,
        });
        Ok(())
    }

    fn mean_of(&self, split: Option<SplitTag>, f: impl Fn(&MetricRow) -> f64) -> f64 {
        let v: Vec<f64> = self.rows.iter().filter(|r| split.is_none_or(|s| r.split == s)).map(f).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    /// Per-entity-then-mean Dice.
    pub fn mean_dice(&self, split: Option<SplitTag>) -> f64 {
        self.mean_of(split, |r| r.dice)
    }

    pub fn mean_iou(&self, split: Option<SplitTag>) -> f64 {
        self.mean_of(split, |r| r.iou)
    }

    /// Dice over pooled pixel counts of the split.
    pub fn pooled_dice(&self, split: Option<SplitTag>) -> f64 {
        let rows = self.rows.iter().filter(|r| split.is_none_or(|s| r.split == s));
        let (mut inter2, mut total) = (0.0, 0.0);
        for r in rows {
            // dice * (|A|+|B|) recovers 2|A∩B|
            inter2 += r.dice * (r.pred_pixels + r.truth_pixels) as f64;
            total += (r.pred_pixels + r.truth_pixels) as f64;
        }
        if total == 0.0 {
            1.0
        } else {
            inter2 / total
        }
    }

    /// Writes one CSV row per sample and entity, tagged with seed and config
    /// hash.
    pub fn write_csv(&self, path: &Path, seed: u64, config_hash: &str, label: &str) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["label", "seed", "config_hash", "split", "sample", "entity", "class_id", "dice", "iou"])?;
        for r in &self.rows {
            w.write_record([
                label.to_string(),
                seed.to_string(),
                config_hash.to_string(),
                r.split.as_str().to_string(),
                r.sample.to_string(),
                r.entity.to_string(),
                r.class_id.to_string(),
                format!("{:.6}", r.dice),
                format!("{:.6}", r.iou),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Loss components of one evaluation or training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Segmentation loss under each prompt distribution.
    pub seg_per_group: Vec<f64>,
    pub task: f64,
    pub entity: f64,
    pub outer: f64,
    pub lambda_xi: f64,
    pub lambda_en: f64,
}

impl LossReport {
    pub fn is_valid(&self) -> bool {
        let parts = self.seg_per_group.iter().chain([&self.task, &self.entity, &self.outer]);
        let ok = parts.into_iter().all(|v| v.is_finite() && *v >= 0.0);
        ok && (self.task - self.seg_per_group.iter().sum::<f64>()).abs() <= 1e-6
    }
}
