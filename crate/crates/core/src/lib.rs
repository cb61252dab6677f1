//! Group-relative policy optimization for agentic tool use, with tool-call
//! resampling from failed rollouts' thinking prefixes.
//!
//! The crate is organized around a small synthetic environment in which a
//! tabular policy either answers directly or commits to a tool call:
//!
//! - [`trajectory`]: step/segment data model, subgroups, prefixes, log format.
//! - [`policy_env`]: environment, tabular softmax policy, samplers.
//! - [`advantage`]: group-normalized advantages, clipped surrogate, gradient.
//! - [`axpo`]: trigger detection, prefix ranking, budgeted resampling, and the
//!   assembly of the per-step advantage streams.
//! - [`coverage`]: closed-form and Monte Carlo coverage of raw vs. prefix-fixed sampling.
//! - [`diagnostics`]: training-dynamics metrics recomputed from trajectory logs.
//! - [`harness`]: configuration, training driver, gradient check, run comparison.

pub mod advantage;
pub mod axpo;
pub mod coverage;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod policy_env;
pub mod rng;
pub mod trajectory;

pub use error::{Error, Result};
