//! Recurrent multi-object video object segmentation.
//!
//! An encoder produces a feature pyramid per frame; a hierarchical decoder of
//! ConvLSTMs emits one mask per prediction slot, recurring over slots within a
//! frame (spatial) and over frames for each slot (temporal). Everything needed
//! to train it end-to-end lives here: a small reverse-mode autograd engine,
//! soft-IoU Hungarian matching, a synthetic moving-shapes video corpus, and
//! region/contour evaluation.

pub mod assign;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod predictions;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
