//! Desk-scale laboratory for cross-modal attention guided unlearning (CAGUL)
//! on a miniature vision-language model.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] — dense f32 tensors with a reverse-mode tape, finite-difference
//!   gradient checking, and SGD/Adam steps.
//! - [`dataset`] — synthetic private/non-private VQA corpus generator with
//!   forget/retain split logic and on-disk manifest format.
//! - [`vlm`] — the toy VLM: patch embedder, projector, transformer language
//!   model with either cross-attention or joint self-attention wiring,
//!   training, greedy generation, and checkpointing.
//! - [`probe`] — cross-modal attention extraction, the averaged score vector
//!   alpha, and bottom-k visual token selection.
//! - [`cagul`] — discriminator + visual token encoder unlearning stack trained
//!   against a frozen backbone.
//! - [`baselines`] — finetuning-based unlearning baselines (GA, GA+GD, GA+KL,
//!   PO+GD, Retrain) with early stopping.
//! - [`metrics`] — ROUGE-L, Exact Match, MinK, APE, Truth Ratio, and
//!   efficiency counters.
//! - [`harness`] — experiment orchestration, CSV/table reporting, sweeps.

pub mod baselines;
pub mod cagul;
pub mod dataset;
pub mod error;
// WIP pub mod harness;
pub mod metrics;
pub mod probe;
pub mod rng;
pub mod tensor;
pub mod vlm;

pub use error::{CoreError, Result};
