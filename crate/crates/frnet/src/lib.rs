//! Context-aware feature refinement for factorization-machine CTR models.
//!
//! The crate trains a binary click predictor over multi-field categorical
//! data. Each instance's embedding matrix is re-represented per context by
//! two information extraction units (a simplified self-attention unit times
//! a contextual MLP vector) whose outputs drive a complementary selection
//! gate, and the refined matrix feeds a factorization-machine scoring head.
//! Everything runs on a small reverse-mode tape; no external ML framework
//! is involved.
//!
//! Modules, bottom up:
//!
//! * [`tensor`] / [`tape`] — dense row-major tensors and reverse-mode
//!   autodiff with exact-shape contracts.
//! * [`data`] — delimited-text ingestion, per-field vocabularies with
//!   rare-token folding, reproducible splits.
//! * [`refine`] — the refinement network itself plus its ablation variants.
//! * [`model`] — embedding table, FM scoring head, composed predictor.
//! * [`train`] — cross-entropy objective, Adam, plateau scheduling, the
//!   epoch loop.
//! * [`metrics`] — AUC with tied ranks, logloss, gate-weight statistics.
//! * [`checkpoint`] — binary named-tensor snapshots.
//! * [`config`] — run configuration and the `key = value` file format.
//! * [`synth`] — a planted-structure dataset generator for desk-scale runs.
//! * [`check`] — central finite-difference verification of every adjoint.

pub mod check;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod refine;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
