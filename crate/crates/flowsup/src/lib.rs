//! A desk-scale training laboratory for semi-supervised optical flow.
//!
//! The crate trains a small recurrent flow estimator (the *student*) on a
//! synthetic two-domain benchmark and compares self-supervision strategies for
//! adapting it to an unlabeled target domain. The centerpiece is the *flow
//! supervisor*: a separately-parameterized decoder that sees privileged
//! (full, clean) frames plus the student's own outputs and produces
//! residual-corrected pseudo-labels.
//!
//! Everything differentiable runs on a small reverse-mode tape ([`autodiff`])
//! over `f64` arrays, which keeps gradient-path contracts (stop-gradients,
//! parameter separation) checkable exactly and finite-difference verification
//! honest.
//!
//! Module map:
//!
//! - [`autodiff`] — reverse-mode tape and the differentiable operators
//! - [`data`] — synthetic scene generation, cropping/augmentation, padding,
//!   `.flo`/PNG/manifest I/O
//! - [`model`] — the recurrent student network and the flow-supervisor decoder
//! - [`losses`] — supervised/self-supervised/unsupervised objectives
//! - [`teachers`] — pluggable teacher strategies (fs, self, EMA, fixed, unsup)
//! - [`train`] — pretraining and semi-supervised fine-tuning loops
//! - [`eval`] — EPE / Fl-all metrics, sweeps, plots and summary tables
//! - [`exp`] — the two-domain benchmark experiment used by the CLI and tests

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod exp;
pub mod losses;
pub mod model;
pub mod teachers;
pub mod train;

pub use error::{Error, Result};
