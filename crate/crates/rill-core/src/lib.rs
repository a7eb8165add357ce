//! Differentiable logic losses for rule-regularised classifiers.
//!
//! The crate turns first-order implication rules into differentiable
//! penalties and trains small classifiers against them:
//!
//! - [`logic`] — rule DSL, syntax trees, connective reduction, completion
//!   transforms and knowledge-base subsampling;
//! - [`tape`] — a reverse-mode autodiff tape over scalars and dense
//!   matrices, sized for MLPs plus logic expressions;
//! - [`fuzzy`] — implication operators (Reichenbach, Łukasiewicz, sigmoidal
//!   smoothing), quantifier aggregation and numeric bias diagnostics;
//! - [`loss`] — likelihood-to-loss mapping, the reduction transforms
//!   (L2 / hinge / L2+hinge), an enumeration-based weighted-model-counting
//!   loss, and empirical risk assembly;
//! - [`nn`] / [`train`] — multi-head MLPs, AdamW and momentum SGD with step
//!   schedules, and the combined-objective training loop.
//!
//! Everything here is pure computation on `alloc`; file formats, datasets
//! and the command line live in the companion `rill-cli` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod fuzzy;
pub mod logic;
pub mod loss;
pub mod nn;
pub mod tape;
