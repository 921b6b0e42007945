//! Infrared small target detection with prior-knowledge local contrast attention.
//!
//! The crate is organised bottom-up:
//!
//! * [`lca`] computes the parameter-free local contrast distance maps and the
//!   attention weights derived from them.
//! * [`nn`] is a small reverse-mode autodiff engine with exactly the layers the
//!   network needs.
//! * [`model`] assembles the U-shaped network and counts its parameters/FLOPs.
//! * [`metrics`] implements IoU, target-level Pd, pixel-level Fa and ROC sweeps.
//! * [`data`] loads image/mask pairs, augments them and generates synthetic scenes.
//! * [`gradcheck`] compares tape gradients with central finite differences.
//! * [`train`] holds the Soft-IoU loss, Adam, the learning-rate schedule and the
//!   training loop.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod lca;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
