//! Reciprocal feature evolution for glass-like object segmentation.
//!
//! A small, CPU-friendly implementation: synthetic scene generation, a toy
//! multi-scale encoder, the two-branch cascade with selective mutual
//! evolution and structurally attentive refinement, joint losses, metrics and
//! an SGD trainer. Everything runs on a built-in reverse-mode autograd.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod sar;
pub mod sme;
pub mod synthdata;
pub mod trainer;
pub mod viz;
pub mod tensor;

pub use config::{Ablation, Config};
pub use error::{Error, Result};
pub use network::{Network, NetworkOutput};
