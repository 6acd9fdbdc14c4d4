//! Confidence-gated training for multi-exit networks.
//!
//! A multi-exit network attaches a classifier head after several backbone
//! blocks. Training scales each exit's per-sample loss by a gate that depends
//! on how earlier exits did on that sample (hard or soft confidence gating),
//! or by fixed per-exit weights for the baseline. Inference stops at the first
//! exit whose top-class probability reaches a threshold.

pub mod cli;
pub mod data;
pub mod error;
pub mod gating;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
