//! Single-shot uncertainty estimation for LLM answers to tabular
//! entity-linking prompts.
//!
//! The warm-up workflow collects `N` generations per prompt, turns them into
//! normalized Predictive / Semantic Entropy targets ([`measures`]), extracts
//! token-level features from each single generation ([`features`]) and fits
//! a bagged regression forest ([`forest`]) that later scores a new answer
//! from one generation alone. [`eval`] holds the ROC, budget-correction and
//! sweep analyses; [`synth`] generates traces with known ground truth and
//! the brute-force oracles the tests compare against.

pub mod digest;
pub mod error;
pub mod eval;
pub mod features;
pub mod forest;
pub mod measures;
pub mod stats;
pub mod synth;
pub mod trace;

pub use error::{Error, Result};
