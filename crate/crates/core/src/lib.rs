//! Recurrent aligned network (RAN) for cross-domain pedestrian trajectory
//! prediction.
//!
//! The library trains a trajectory predictor on two (or more) source domains
//! at once and aligns their hidden feature spaces step by step, so that the
//! learned representation transfers to scenes never seen during training.
//! The pipeline is:
//!
//! 1. [`traj`] — canonical trajectory data model: scene tables, observation
//!    windows, neighbor extraction.
//! 2. [`ingest`] — trajectory file parsing, train/test splitting, and a
//!    synthetic multi-domain generator for desk-scale experiments.
//! 3. [`diffnum`] — a small reverse-mode autodiff substrate (dense 2-D
//!    tensors, Adam, checkpoints) that the model runs on.
//! 4. [`encoder`] — stepwise social attention plus a GRU encoder producing
//!    per-step hidden states.
//! 5. [`align`] — domain discrepancy measures and alignment strategies,
//!    selected by name at runtime.
//! 6. [`decode`] / [`train`] — mixture-of-experts decoding, winner-take-all
//!    prediction loss, and the dual-source training loop.
//! 7. [`eval`] — best-of-K ADE/FDE metrics, cross-domain evaluation, and
//!    feature-space export (CSV + PCA scatter SVG).

pub mod align;
pub mod decode;
pub mod diffnum;
pub mod encoder;
pub mod model;
pub mod train;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod traj;

pub use error::{Error, Result};
