//! Multi-modal brain tumor segmentation that stays usable when MR sequences
//! are missing.
//!
//! The pipeline encodes each available sequence with its own encoder,
//! synthesizes a surrogate "M5" volume (the voxel-wise average of whatever is
//! missing), constrains the five bottleneck representations to be linearly
//! predictable from one another, and fuses everything with channel and
//! spatial attention before a deeply supervised decoder.
//!
//! Everything runs on the CPU through a small reverse-mode autodiff engine
//! in [`nn`].

pub mod correlation;
pub mod dropout;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod pipeline;
pub mod volumes;

pub use error::{Error, Result};
