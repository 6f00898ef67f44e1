//! Causal prompt calibration for promptable multi-entity segmentation, at
//! desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`synthgen`]: synthetic multi-entity scenes with known causal and
//!   irrelevant generating factors.
//! * [`promptkit`]: point/box prompt annotation and randomly perturbed
//!   prompt groups.
//! * [`minisam`]: a small promptable segmentation transformer with LoRA
//!   adapters and exposed attention maps.
//! * [`capl`]: the causal prompt learner (prompt reweighting gates plus an
//!   attention-calibration emitter).
//! * [`objectives`]: segmentation losses, consistency and entity losses,
//!   Dice/IoU.
//! * [`bilevel`]: inner/outer optimisation, training loop, hypergradient
//!   checking.
//! * [`runhub`]: configuration, experiments, CSV export and plots.

pub mod bilevel;
pub mod capl;
pub mod checkpoint;
mod error;
pub mod minisam;
pub mod objectives;
pub mod params;
pub mod promptkit;
pub mod runhub;
pub mod synthgen;

pub use error::{Error, Result};
