//! Out-of-distribution scoring from Fisher-preconditioned score gradients of
//! a small convolutional VAE.

pub mod tensor;
pub mod autodiff;
pub mod data;
pub mod vae;
pub mod fisher;
pub mod rose;
pub mod formats;
pub mod eval;
mod hash;

pub use hash::digest64;
