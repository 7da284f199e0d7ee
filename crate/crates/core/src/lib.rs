//! Miniature document-VQA transformer with an interpretability-guided
//! compression toolkit.
//!
//! The crate implements a small encoder–decoder transformer that answers
//! questions about synthetic "documents" (grids of glyph tokens), plus the
//! machinery to take it apart and shrink it:
//!
//! - [`tensor`] — dense f64 tensors with tape-based reverse-mode autodiff,
//!   sized for models that train on one CPU core in minutes.
//! - [`model`] — the encoder–decoder itself; every decoder sub-layer and
//!   attention head is individually maskable, skippable, and hookable.
//! - [`synthdocs`] — synthetic document/question generator covering four
//!   behavioral regimes (transcription, keyword lookup, key-value lookup,
//!   case sensitivity) with controlled corruption for patching experiments.
//! - [`interp`] — the analysis toolkit: skipping sweeps, three-run activation
//!   patching, logit-lens token reprojection, attention-head statistics,
//!   exhaustive pathway search, and retrieval-hypothesis classification.
//! - [`compress`] — structured surgery (sub-layers, heads), analysis-guided
//!   two-stage prune recipes, enumeration and magnitude baselines, and a
//!   parameter/FLOPs accountant.
//! - [`distill`] — knowledge-distillation trainer (cross-entropy plus
//!   temperature-softened KL against a frozen teacher) and the plain
//!   supervised trainer used to produce teachers.
//! - [`evalmetrics`] — normalized-Levenshtein answer scoring (ANLS), exact
//!   match, perplexity, and model-to-model comparison tables.
//! - [`report`] — line-delimited structured report records shared by the
//!   pipeline stages, plus text table rendering.
//! - [`gradcheck`] — finite-difference gradient checking used throughout the
//!   test suites.
//!
//! Everything is deterministic given explicit seeds: generation, training,
//! analysis, and reports reproduce byte-for-byte.

pub mod compress;
pub mod distill;
pub mod error;
pub mod evalmetrics;
pub mod gradcheck;
pub mod interp;
pub mod model;
pub mod report;
pub mod synthdocs;
pub mod tensor;

pub use error::{Error, Result};
