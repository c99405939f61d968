//! Reflection generation for composite images.
//!
//! A composite image is a background with a foreground object pasted in but
//! no reflection. This crate predicts where the missing reflection belongs
//! (rotated-box regression plus a reflection-type classifier), conditions a
//! small denoising diffusion model on that placement and on type-aware
//! reference features, and synthesizes the reflection. A procedural scene
//! generator provides training tuples with exact ground truth, and the
//! evaluation module scores generations with global/local RMSE and SSIM.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod aux_encoder;
pub mod ckpt;
pub mod conditioning;
pub mod diffusion;
pub mod img;
pub mod nn;

pub use error::{Error, Result};
