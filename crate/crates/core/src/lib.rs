//! Rotation-equivariant conditional diffusion for multi-focus image fusion.

pub mod autodiff;
pub mod dataio;
pub mod diffusion;
pub mod eq_ops;
pub mod error;
pub mod group_action;
pub mod harness;
pub mod rng;
pub mod scalar;
pub mod training;
pub mod unet;

pub use error::{Error, Result};
