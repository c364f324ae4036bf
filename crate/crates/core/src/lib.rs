//! Kronecker-factored low-rank control adapters for a toy text-to-image
//! diffusion model.

pub mod control;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod kron_adapter;
pub mod losses;
pub mod nn;
pub mod numerics;
pub mod par;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
