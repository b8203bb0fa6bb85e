//! A desk-scale laboratory for multi-domain incremental semantic
//! segmentation.
//!
//! The crate trains a small segmentation network on a sequence of visually
//! distinct synthetic domains, one domain at a time, and measures how much
//! each training regime forgets. The centerpiece is a dynamic encoder
//! whose residual units share their convolution kernels across domains
//! while keeping per-domain 1x1 adapters and batch-norm branches, combined
//! with an incremental optimization protocol (reduced learning rate on
//! shared weights plus a distillation term on previous-domain outputs).
//!
//! Modules build bottom-up: [`tensor`] is a minimal autodiff engine,
//! [`model`] the segmentation network, [`data`] the synthetic multi-domain
//! generator, [`trainer`] the incremental protocol, [`baselines`] the
//! comparison regimes, [`eval`] the metric stack, and [`commands`] the
//! CLI entry points.

pub mod baselines;
pub mod commands;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// Label value that marks pixels excluded from losses and metrics.
pub const IGNORE_INDEX: u8 = 255;
