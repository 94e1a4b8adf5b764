//! Denoiser and decoder backends.
//!
//! A backend predicts guided noise for a batch of latents and decodes latents
//! to RGB, optionally with a vector-Jacobian product through the decoder. The
//! toy backend runs in-process; the remote backend speaks the framed wire
//! protocol in [`protocol`] to an external model server.

pub mod probe;
pub mod protocol;
mod remote;
pub mod server;
mod toy;

use std::str::FromStr;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::image::Image;

pub use remote::RemoteBackend;
pub use toy::{depth_key, ToyBackend, ToyDecoder, TOY_DECODER_BIAS, TOY_MIXING};

/// Latent channels of every supported backend.
pub const LATENT_CHANNELS: usize = 4;
/// Decoded pixels per latent pixel along each side.
pub const LATENT_SCALE: usize = 8;
/// Environment variable consulted for the backend address.
pub const BACKEND_ENV: &str = "MESHTEX_BACKEND";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseRequest {
    /// `B` latents of shape `h × w × C`.
    pub latents: Vec<Image>,
    /// Training timestep of the current sampling step.
    pub timestep_index: u32,
    pub alpha_bar_t: f64,
    /// One prompt per latent, modifiers already appended.
    pub prompts: Vec<String>,
    /// Optional `H_d × W_d × 1` disparity-like maps in `[0, 1]`.
    pub depth_maps: Option<Vec<Image>>,
    pub guidance_scale: f64,
}

impl DenoiseRequest {
    pub fn validate(&self) -> Result<()> {
        let b = self.latents.len();
        if b == 0 {
            return Err(Error::ShapeMismatch("empty latent batch".into()));
        }
        if self.prompts.len() != b {
            return Err(Error::ShapeMismatch(format!(
                "{b} latents but {} prompts",
                self.prompts.len()
            )));
        }
        check_batch(&self.latents, "latent")?;
        if let Some(depth) = &self.depth_maps {
            if depth.len() != b {
                return Err(Error::ShapeMismatch(format!(
                    "{b} latents but {} depth maps",
                    depth.len()
                )));
            }
            check_batch(depth, "depth map")?;
            if depth[0].channels() != 1 {
                return Err(Error::ShapeMismatch("depth maps must have one channel".into()));
            }
        }
        if !(self.alpha_bar_t > 0.0 && self.alpha_bar_t <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha_bar_t {} outside (0, 1]",
                self.alpha_bar_t
            )));
        }
        Ok(())
    }
}

/// Checks a batch is non-empty, uniformly shaped and finite.
pub(crate) fn check_batch(batch: &[Image], what: &str) -> Result<()> {
    let Some(first) = batch.first() else {
        return Err(Error::ShapeMismatch(format!("empty {what} batch")));
    };
    for (i, img) in batch.iter().enumerate() {
        if !img.same_shape(first) {
            return Err(Error::ShapeMismatch(format!(
                "{what} {i} has shape {:?}, expected {:?}",
                img.shape(),
                first.shape()
            )));
        }
        if !img.is_finite() {
            return Err(Error::NonFinite(format!("{what} {i}")));
        }
    }
    Ok(())
}

pub trait Backend: Send + Sync {
    fn name(&self) -> String;

    /// Guided noise prediction, one output per input latent.
    fn predict_noise(&self, request: &DenoiseRequest) -> Result<Vec<Image>>;

    /// Decodes `h × w × C` latents to `8h × 8w × 3` RGB.
    fn decode(&self, latents: &[Image]) -> Result<Vec<Image>>;

    /// Transpose Jacobian of [`Backend::decode`] at `latents` applied to `cotangent`.
    fn decode_pullback(&self, latents: &[Image], cotangent: &[Image]) -> Result<Vec<Image>>;
}

/// Backend selector accepted by the command line: `toy` or `remote:<host:port>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Toy,
    Remote(String),
}

impl FromStr for BackendSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "toy" {
            Ok(BackendSpec::Toy)
        } else if let Some(addr) = s.strip_prefix("remote:") {
            if addr.is_empty() {
                return Err(Error::InvalidConfig("remote backend needs host:port".into()));
            }
            Ok(BackendSpec::Remote(addr.to_string()))
        } else {
            Err(Error::InvalidConfig(format!(
                "unknown backend {s:?} (expected toy or remote:<host:port>)"
            )))
        }
    }
}

/// Instantiates the backend; the toy backend uses prompt-hashed targets.
pub fn connect(spec: &BackendSpec, seed: u64, timeout: Duration) -> Result<Box<dyn Backend>> {
    match spec {
        BackendSpec::Toy => Ok(Box::new(ToyBackend::new(seed))),
        BackendSpec::Remote(addr) => Ok(Box::new(RemoteBackend::connect(addr, timeout)?)),
    }
}
