//! Multimodal point-cloud descriptors.
//!
//! A sparse voxel U-Net encodes point structure, a small strided CNN encodes
//! an RGB view of the same fragment, and single-head cross-attention adds
//! image texture to every abstract point before decoding. The crate also
//! carries the training loss, descriptor activation maps, registration and
//! the evaluation protocol.

// Oracles in the unit tests index explicitly to mirror the formulas they check.
#![cfg_attr(test, allow(clippy::needless_range_loop, clippy::type_complexity))]

pub mod autodiff;
pub mod dam;
pub mod data;
pub mod error;
pub mod fusion;
pub mod image;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod registration;
pub mod sparse;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::DenseTensor;
