//! Causal prompt learner.
//!
//! Two small MLPs:
//!
//! * the task module maps each prompt token to multiplicative gates in
//!   `(0, 2)`; the last layer starts at zero so every gate starts at 1;
//! * the entity module maps each prompt token to a short code per attention
//!   slot and combines it with a linear projection of the image tokens,
//!   giving additive pre-softmax biases for the token-to-image and
//!   image-to-token maps. Token self-attention always receives zeros, and so
//!   does the sink token. The last layer starts at zero, so the calibration
//!   starts at exactly zero.
//!
//! Parameters live under `capl.task.*` and `capl.entity.*`.

use std::rc::Rc;

use cpc_autograd::{Graph, Mat, SparseMatrix, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::minisam::{AttentionLayout, AttentionRecord, ModelConfig};
use crate::params::{glorot, Bound, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaplConfig {
    /// Hidden width of both MLPs; the model dimension by default.
    pub hidden: usize,
    /// Length of the per-slot token code and image projection.
    pub code_dim: usize,
}

impl CaplConfig {
    pub fn for_model(model: &ModelConfig) -> Self {
        CaplConfig { hidden: model.dim, code_dim: if model.dim >= 16 { 4 } else { 2 } }
    }

    /// Calibrated slots: token-to-image and image-to-token per layer and head.
    pub fn slots(model: &ModelConfig) -> usize {
        2 * model.depth * model.heads
    }
}

/// Zero-output initialisation: gates of exactly 1 and a zero calibration.
pub fn init_params(model: &ModelConfig, config: &CaplConfig, seed: u64) -> ParamStore {
    let d = model.dim;
    let h = config.hidden;
    let out = CaplConfig::slots(model) * config.code_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    s.insert("capl.task.w1", glorot(&mut rng, d, h));
    s.insert("capl.task.b1", Mat::zeros((1, h)));
    s.insert("capl.task.w2", Mat::zeros((h, d)));
    s.insert("capl.task.b2", Mat::zeros((1, d)));
    s.insert("capl.entity.w1", glorot(&mut rng, d, h));
    s.insert("capl.entity.b1", Mat::zeros((1, h)));
    s.insert("capl.entity.w2", Mat::zeros((h, out)));
    s.insert("capl.entity.b2", Mat::zeros((1, out)));
    s.insert("capl.entity.image", glorot(&mut rng, d, config.code_dim));
    s
}

/// Gates in `(0, 2)` for each prompt token.
pub fn gates<'g>(p: &Bound<'g>, prompts: Var<'g>) -> Result<Var<'g>> {
    let w1 = p.get("capl.task.w1");
    if w1.shape().0 != prompts.shape().1 {
        return Err(Error::Contract(format!(
            "prompt dim {} does not match task module input {}",
            prompts.shape().1,
            w1.shape().0
        )));
    }
    let hidden = prompts.matmul(w1).add_row(p.get("capl.task.b1")).tanh();
    Ok(hidden.matmul(p.get("capl.task.w2")).add_row(p.get("capl.task.b2")).sigmoid().scale(2.0))
}

/// Token-wise reweighting `gate_k * token_k`.
pub fn reweight_prompts<'g>(p: &Bound<'g>, prompts: Var<'g>) -> Result<Var<'g>> {
    Ok(prompts * gates(p, prompts)?)
}

/// Additive pre-softmax biases for one decoder layer, one entry per head.
#[derive(Clone)]
pub struct LayerCalibration<'g> {
    /// `T x T`, always zero.
    pub prompt_prompt: Vec<Var<'g>>,
    /// `T x P`.
    pub prompt_image: Vec<Var<'g>>,
    /// `P x T`.
    pub image_prompt: Vec<Var<'g>>,
}

#[derive(Clone)]
pub struct CalibrationTensor<'g> {
    pub layers: Vec<LayerCalibration<'g>>,
    pub layout: AttentionLayout,
}

impl<'g> CalibrationTensor<'g> {
    /// All-zero calibration for `layout`.
    pub fn zeros(g: &'g Graph, layout: AttentionLayout) -> Self {
        let (t, p) = (layout.tokens, layout.patches);
        let layers = (0..layout.depth)
            .map(|_| LayerCalibration {
                prompt_prompt: (0..layout.heads).map(|_| g.constant(Mat::zeros((t, t)))).collect(),
                prompt_image: (0..layout.heads).map(|_| g.constant(Mat::zeros((t, p)))).collect(),
                image_prompt: (0..layout.heads).map(|_| g.constant(Mat::zeros((p, t)))).collect(),
            })
            .collect();
        CalibrationTensor { layers, layout }
    }

    pub fn check_layout(&self, layout: &AttentionLayout) -> Result<()> {
        let bad = || Err(Error::Contract(format!("calibration layout {:?} does not match {:?}", self.layout, layout)));
        if self.layout != *layout || self.layers.len() != layout.depth {
            return bad();
        }
        let (t, p) = (layout.tokens, layout.patches);
        for l in &self.layers {
            let ok = l.prompt_prompt.len() == layout.heads
                && l.prompt_image.len() == layout.heads
                && l.image_prompt.len() == layout.heads
                && l.prompt_prompt.iter().all(|v| v.shape() == (t, t))
                && l.prompt_image.iter().all(|v| v.shape() == (t, p))
                && l.image_prompt.iter().all(|v| v.shape() == (p, t));
            if !ok {
                return bad();
            }
        }
        Ok(())
    }

    /// Entries belonging to prompt `e`: its token-to-image row and its
    /// image-to-token column in every layer and head.
    pub fn entity_slice(&self, e: usize) -> Vec<Var<'g>> {
        let token = e + 1;
        let mut out = Vec::new();
        for l in &self.layers {
            for v in &l.prompt_image {
                out.push(v.slice_rows(token, 1));
            }
            for v in &l.image_prompt {
                out.push(v.slice_cols(token, 1));
            }
        }
        out
    }

    /// Mean absolute entry over the non-zero blocks (value only).
    pub fn mean_abs(&self) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for l in &self.layers {
            for v in l.prompt_image.iter().chain(&l.image_prompt) {
                let m = v.value();
                total += m.iter().map(|x| x.abs()).sum::<f64>();
                count += m.len();
            }
        }
        total / count.max(1) as f64
    }
}

/// Emits the calibration for `prompts` (`n x d`, already reweighted) over
/// `image_tokens` (`P x d`).
pub fn emit_calibration<'g>(
    g: &'g Graph,
    p: &Bound<'g>,
    prompts: Var<'g>,
    image_tokens: Var<'g>,
    layout: AttentionLayout,
) -> Result<CalibrationTensor<'g>> {
    let n = prompts.shape().0;
    let code = p.get("capl.entity.image").shape().1;
    let slots = 2 * layout.depth * layout.heads;
    if layout.tokens != n + 1 || image_tokens.shape().0 != layout.patches {
        return Err(Error::Contract(format!(
            "layout {layout:?} does not match {n} prompts over {} patches",
            image_tokens.shape().0
        )));
    }
    if p.get("capl.entity.w2").shape().1 != slots * code {
        return Err(Error::Contract("entity module output does not match the attention layout".into()));
    }
    let hidden = prompts.matmul(p.get("capl.entity.w1")).add_row(p.get("capl.entity.b1")).tanh();
    let codes = hidden.matmul(p.get("capl.entity.w2")).add_row(p.get("capl.entity.b2"));
    let z = image_tokens.matmul(p.get("capl.entity.image"));
    let t = layout.tokens;
    let mut layers = Vec::with_capacity(layout.depth);
    for l in 0..layout.depth {
        let mut pi = Vec::with_capacity(layout.heads);
        let mut ip = Vec::with_capacity(layout.heads);
        for h in 0..layout.heads {
            let slot = (l * layout.heads + h) * 2;
            let c_pi = codes.slice_cols(slot * code, code);
            let c_ip = codes.slice_cols((slot + 1) * code, code);
            pi.push(c_pi.matmul_nt(z).tanh().pad_rows(1, t));
            ip.push(z.matmul_nt(c_ip).tanh().pad_cols(1, t));
        }
        layers.push(LayerCalibration {
            prompt_prompt: (0..layout.heads).map(|_| g.constant(Mat::zeros((t, t)))).collect(),
            prompt_image: pi,
            image_prompt: ip,
        });
    }
    Ok(CalibrationTensor { layers, layout })
}

/// Soft spatial mask of prompt `e`: its image-to-token attention column
/// averaged over heads and layers, upsampled to full resolution and
/// min-max normalised. A constant map becomes all zeros. Returned as an
/// `(H*W) x 1` column.
pub fn entity_attention_mask<'g>(
    g: &'g Graph,
    record: &AttentionRecord<'g>,
    e: usize,
    upsample: &Rc<SparseMatrix>,
) -> Result<Var<'g>> {
    if e >= record.n_entities() {
        return Err(Error::Contract(format!("entity {e} out of range ({} prompts)", record.n_entities())));
    }
    let token = record.token_of_entity(e);
    let mut acc: Option<Var<'g>> = None;
    let mut count = 0usize;
    for layer in &record.layers {
        for m in &layer.image_prompt {
            let col = m.slice_cols(token, 1);
            acc = Some(match acc {
                Some(a) => a + col,
                None => col,
            });
            count += 1;
        }
    }
    let mean = acc.expect("at least one layer").scale(1.0 / count as f64);
    let up = mean.sparse_left(Rc::clone(upsample), false);
    let lo = up.min_all();
    let hi = up.max_all();
    let range = hi.item() - lo.item();
    if !(range > 1e-12) {
        log::debug!("entity {e}: constant attention map, returning zeros");
        return Ok(g.constant(Mat::zeros(up.shape())));
    }
    let rows = up.shape().0;
    Ok((up - lo.broadcast_scalar(rows, 1)) * (hi - lo).powf(-1.0).broadcast_scalar(rows, 1))
}

/// Mean absolute Pearson correlation between every prompt coordinate and
/// every irrelevant factor, over paired rows. Pairs where either side is
/// constant are skipped; with none left the result is zero.
pub fn irrelevance_correlation(prompts: &[Vec<f64>], factors: &[[f64; 4]]) -> Result<f64> {
    if prompts.len() != factors.len() {
        return Err(Error::Contract(format!("{} prompt rows but {} factor rows", prompts.len(), factors.len())));
    }
    if prompts.len() < 2 {
        return Err(Error::Data("correlation needs at least two rows".into()));
    }
    let dim = prompts[0].len();
    if prompts.iter().any(|r| r.len() != dim) {
        return Err(Error::Contract("prompt rows differ in length".into()));
    }
    let n = prompts.len() as f64;
    let centred = |xs: Vec<f64>| {
        let m = xs.iter().sum::<f64>() / n;
        let c: Vec<f64> = xs.iter().map(|x| x - m).collect();
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        (c, norm)
    };
    let fs: Vec<_> = (0..4).map(|k| centred(factors.iter().map(|f| f[k]).collect())).collect();
    let (mut total, mut count) = (0.0, 0usize);
    for j in 0..dim {
        let (x, xn) = centred(prompts.iter().map(|r| r[j]).collect());
        for (f, fnorm) in &fs {
            if xn < 1e-12 || *fnorm < 1e-12 {
                continue;
            }
            let dot: f64 = x.iter().zip(f).map(|(a, b)| a * b).sum();
            total += (dot / (xn * fnorm)).abs();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Parameter count of the learner for a model configuration.
pub fn param_count(model: &ModelConfig, config: &CaplConfig) -> usize {
    init_params(model, config, 0).total_count()
}
