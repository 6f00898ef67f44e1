//! Low-rank adapters on decoder attention projections.
//!
//! An adapter for projection `dec.L.B.wq` lives under
//! `lora.dec.L.B.wq.down` (`d x r`) and `lora.dec.L.B.wq.up` (`r x d`).
//! The effective weight is `W + (alpha / r) * down * up`.

use cpc_autograd::{Mat, Var};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::params::{gaussian, Bound, ParamStore};
use crate::{Error, Result};

pub const BLOCKS: [&str; 3] = ["self", "p2i", "i2p"];
/// Adapted projections inside each attention block.
pub const TARGETS: [&str; 2] = ["wq", "wv"];

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// Name of the adapted base weight, e.g. `dec.0.p2i.wq`.
    pub target: String,
    pub down: Mat,
    pub up: Mat,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.down.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.down.len() + self.up.len()
    }
}

pub fn down_name(target: &str) -> String {
    format!("lora.{target}.down")
}

pub fn up_name(target: &str) -> String {
    format!("lora.{target}.up")
}

/// Names of every projection that receives an adapter.
pub fn adapted_projections(config: &ModelConfig) -> Vec<String> {
    let mut out = Vec::new();
    for l in 0..config.depth {
        for b in BLOCKS {
            for t in TARGETS {
                out.push(format!("dec.{l}.{b}.{t}"));
            }
        }
    }
    out
}

/// Fresh adapters: Gaussian `down`, zero `up`.
pub fn init_adapters(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<LoraAdapter> {
    let d = config.dim;
    let r = config.lora_rank;
    adapted_projections(config)
        .into_iter()
        .map(|target| LoraAdapter {
            target,
            down: gaussian(rng, d, r, 1.0 / (d as f64).sqrt()),
            up: Mat::zeros((r, d)),
            scale: config.lora_alpha / r as f64,
        })
        .collect()
}

/// Stores adapters under their `lora.` names.
pub fn insert_adapters(store: &mut ParamStore, adapters: &[LoraAdapter]) {
    for a in adapters {
        store.insert(down_name(&a.target), a.down.clone());
        store.insert(up_name(&a.target), a.up.clone());
    }
}

/// Reads adapters back out of a store.
pub fn extract_adapters(store: &ParamStore, config: &ModelConfig) -> Vec<LoraAdapter> {
    adapted_projections(config)
        .into_iter()
        .filter_map(|target| {
            let down = store.get(&down_name(&target))?.clone();
            let up = store.get(&up_name(&target))?.clone();
            let scale = config.lora_alpha / down.ncols() as f64;
            Some(LoraAdapter { target, down, up, scale })
        })
        .collect()
}

/// Merged weights: every adapted projection replaced by its effective value.
/// The base store is left untouched.
pub fn apply_lora(base: &ParamStore, adapters: &[LoraAdapter]) -> Result<ParamStore> {
    let mut out = base.clone();
    for a in adapters {
        let w = base
            .get(&a.target)
            .ok_or_else(|| Error::Config(format!("adapter targets unknown projection `{}`", a.target)))?;
        if a.down.nrows() != w.nrows() || a.up.ncols() != w.ncols() || a.down.ncols() != a.up.nrows() {
            return Err(Error::Config(format!("adapter for `{}` has mismatched shapes", a.target)));
        }
        let delta = a.down.dot(&a.up) * a.scale;
        out.insert(a.target.clone(), w + &delta);
        out.remove(&down_name(&a.target));
        out.remove(&up_name(&a.target));
    }
    Ok(out)
}

/// Effective projection on the graph; plain weight when no adapter is bound.
pub fn effective<'g>(bound: &Bound<'g>, target: &str, alpha: f64) -> Var<'g> {
    let w = bound.get(target);
    match (bound.try_get(&down_name(target)), bound.try_get(&up_name(target))) {
        (Some(down), Some(up)) => {
            let r = down.shape().1;
            w + down.matmul(up).scale(alpha / r as f64)
        }
        _ => w,
    }
}
