//! Text-driven texturing of UV-mapped triangle meshes with latent diffusion.
//!
//! Multiple orthographic views of a mesh are denoised jointly against a
//! single spherical-harmonic latent texture, then made consistent by latent
//! inversion and baked into an RGB texture by weighted backprojection. The
//! denoiser and decoder sit behind [`backend::Backend`]; a closed-form toy
//! backend ships for testing and a framed TCP protocol reaches real models.

pub mod backend;
pub mod camera;
pub mod config;
pub mod error;
pub mod export;
pub mod image;
pub mod inversion;
pub mod math;
pub mod mesh;
pub mod pipeline;
pub mod raster;
pub mod schedule;
pub mod sh;

pub use error::{Error, Result};
