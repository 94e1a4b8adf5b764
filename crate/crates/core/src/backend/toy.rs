//! Closed-form toy backend for oracle tests.
//!
//! The denoiser knows a hidden target latent `T` per request and returns the
//! exact noise `ε̂ = (x_t − √ᾱ·T)/√(1 − ᾱ)` that a perfect model would
//! predict, so deterministic sampling lands on `T`. The decoder is affine:
//! a fixed 4→3 channel mix, 8× nearest upsampling and a 0.5 bias.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{check_batch, Backend, DenoiseRequest, LATENT_CHANNELS, LATENT_SCALE};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::fnv1a64;

/// Latent-to-RGB mixing, row `c` holding latent channel `c`'s RGB contribution.
pub const TOY_MIXING: [[f64; 3]; 4] = [
    [0.298, 0.207, 0.208],
    [0.187, 0.286, 0.173],
    [-0.158, 0.189, 0.264],
    [-0.184, -0.271, -0.473],
];

pub const TOY_DECODER_BIAS: f64 = 0.5;

/// Hash of a depth map's `f32` bit patterns; keys depth-conditioned targets.
pub fn depth_key(depth: &Image) -> u64 {
    let mut bytes = Vec::with_capacity(depth.data().len() * 4 + 24);
    for d in depth.shape() {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in depth.data() {
        bytes.extend_from_slice(&(*v as f32).to_bits().to_le_bytes());
    }
    fnv1a64(&bytes)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ToyDecoder;

impl ToyDecoder {
    pub fn decode(&self, latent: &Image) -> Result<Image> {
        if latent.channels() != LATENT_CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "toy decoder expects {LATENT_CHANNELS} latent channels, got {}",
                latent.channels()
            )));
        }
        let (h, w) = (latent.height(), latent.width());
        let mut out = Image::zeros(h * LATENT_SCALE, w * LATENT_SCALE, 3);
        for y in 0..h {
            for x in 0..w {
                let l = latent.pixel(y * w + x);
                let mut rgb = [TOY_DECODER_BIAS; 3];
                for (c, row) in TOY_MIXING.iter().enumerate() {
                    for j in 0..3 {
                        rgb[j] += l[c] * row[j];
                    }
                }
                for dy in 0..LATENT_SCALE {
                    for dx in 0..LATENT_SCALE {
                        let i = (y * LATENT_SCALE + dy) * w * LATENT_SCALE + x * LATENT_SCALE + dx;
                        out.pixel_mut(i).copy_from_slice(&rgb);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Transpose of the linear part of [`ToyDecoder::decode`].
    pub fn pullback(&self, cotangent: &Image) -> Result<Image> {
        let (hh, ww) = (cotangent.height(), cotangent.width());
        if cotangent.channels() != 3 || hh % LATENT_SCALE != 0 || ww % LATENT_SCALE != 0 {
            return Err(Error::ShapeMismatch(format!(
                "cotangent shape {:?} is not an 8x-upsampled RGB image",
                cotangent.shape()
            )));
        }
        let (h, w) = (hh / LATENT_SCALE, ww / LATENT_SCALE);
        let mut out = Image::zeros(h, w, LATENT_CHANNELS);
        for yy in 0..hh {
            for xx in 0..ww {
                let g = cotangent.pixel(yy * ww + xx);
                let dst = out.pixel_mut((yy / LATENT_SCALE) * w + xx / LATENT_SCALE);
                for (c, row) in TOY_MIXING.iter().enumerate() {
                    dst[c] += row[0] * g[0] + row[1] * g[1] + row[2] * g[2];
                }
            }
        }
        Ok(out)
    }

    /// Right inverse of the decoder: block-averages `rgb` to latent resolution
    /// and maps each pixel through the mixing pseudo-inverse, so decoding the
    /// result reproduces any blockwise-constant image.
    pub fn encode(&self, rgb: &Image) -> Result<Image> {
        let (hh, ww) = (rgb.height(), rgb.width());
        if rgb.channels() != 3 || hh % LATENT_SCALE != 0 || ww % LATENT_SCALE != 0 {
            return Err(Error::ShapeMismatch(format!(
                "cannot encode image of shape {:?}",
                rgb.shape()
            )));
        }
        let pinv = pseudo_inverse();
        let (h, w) = (hh / LATENT_SCALE, ww / LATENT_SCALE);
        let block = (LATENT_SCALE * LATENT_SCALE) as f64;
        let mut out = Image::zeros(h, w, LATENT_CHANNELS);
        for y in 0..h {
            for x in 0..w {
                let mut mean = [0.0; 3];
                for dy in 0..LATENT_SCALE {
                    for dx in 0..LATENT_SCALE {
                        let p = rgb.pixel((y * LATENT_SCALE + dy) * ww + x * LATENT_SCALE + dx);
                        for j in 0..3 {
                            mean[j] += p[j];
                        }
                    }
                }
                let centred = mean.map(|m| m / block - TOY_DECODER_BIAS);
                let dst = out.pixel_mut(y * w + x);
                for c in 0..LATENT_CHANNELS {
                    dst[c] = (0..3).map(|j| pinv[c][j] * centred[j]).sum();
                }
            }
        }
        Ok(out)
    }
}

/// `Aᵀ(AAᵀ)⁻¹` for the 3×4 map `A[j][c] = TOY_MIXING[c][j]`.
fn pseudo_inverse() -> [[f64; 3]; 4] {
    let m = &TOY_MIXING;
    let mut g = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            g[i][j] = (0..4).map(|c| m[c][i] * m[c][j]).sum();
        }
    }
    let det = g[0][0] * (g[1][1] * g[2][2] - g[1][2] * g[2][1])
        - g[0][1] * (g[1][0] * g[2][2] - g[1][2] * g[2][0])
        + g[0][2] * (g[1][0] * g[2][1] - g[1][1] * g[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (a, b) = ((j + 1) % 3, (j + 2) % 3);
            let (c, d) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (g[a][c] * g[b][d] - g[a][d] * g[b][c]) / det;
        }
    }
    let mut p = [[0.0; 3]; 4];
    for c in 0..4 {
        for j in 0..3 {
            p[c][j] = (0..3).map(|k| m[c][k] * inv[k][j]).sum();
        }
    }
    p
}

/// Toy denoiser plus toy decoder.
///
/// Targets are looked up by depth map first, then by prompt; otherwise a
/// standard normal target is drawn from a generator keyed by the seed and the
/// prompt hash.
#[derive(Debug, Clone, Default)]
pub struct ToyBackend {
    seed: u64,
    prompt_targets: HashMap<String, Image>,
    depth_targets: HashMap<u64, Image>,
    decoder: ToyDecoder,
}

impl ToyBackend {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn with_target(mut self, prompt: impl Into<String>, target: Image) -> Self {
        self.prompt_targets.insert(prompt.into(), target);
        self
    }

    /// Registers a target for requests whose depth map matches `depth` bit for
    /// bit after narrowing to `f32`.
    pub fn with_depth_target(mut self, depth: &Image, target: Image) -> Self {
        self.depth_targets.insert(depth_key(depth), target);
        self
    }

    pub fn decoder(&self) -> &ToyDecoder {
        &self.decoder
    }

    /// Target latent for one batch item of the given shape.
    pub fn target(&self, prompt: &str, depth: Option<&Image>, shape: [usize; 3]) -> Result<Image> {
        let found = depth
            .and_then(|d| self.depth_targets.get(&depth_key(d)))
            .or_else(|| self.prompt_targets.get(prompt));
        if let Some(t) = found {
            if t.shape() != shape {
                return Err(Error::BackendShape(format!(
                    "toy target has shape {:?}, request latents are {shape:?}",
                    t.shape()
                )));
            }
            return Ok(t.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a64(prompt.as_bytes()));
        let [h, w, c] = shape;
        let data = (0..h * w * c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Image::from_vec(h, w, c, data)
    }
}

/// `ε̂` that sends `x_t` to `target` under deterministic sampling.
pub(crate) fn target_noise(x: &Image, target: &Image, alpha_bar: f64) -> Image {
    if alpha_bar >= 1.0 {
        return Image::zeros(x.height(), x.width(), x.channels());
    }
    let sa = alpha_bar.sqrt();
    let s1 = (1.0 - alpha_bar).sqrt();
    let data = x
        .data()
        .iter()
        .zip(target.data())
        .map(|(xv, tv)| (xv - sa * tv) / s1)
        .collect();
    Image::from_vec(x.height(), x.width(), x.channels(), data).expect("same shape")
}

impl Backend for ToyBackend {
    fn name(&self) -> String {
        format!("toy(seed={})", self.seed)
    }

    fn predict_noise(&self, request: &DenoiseRequest) -> Result<Vec<Image>> {
        request.validate()?;
        request
            .latents
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let depth = request.depth_maps.as_ref().map(|d| &d[i]);
                let target = self.target(&request.prompts[i], depth, x.shape())?;
                Ok(target_noise(x, &target, request.alpha_bar_t))
            })
            .collect()
    }

    fn decode(&self, latents: &[Image]) -> Result<Vec<Image>> {
        check_batch(latents, "latent")?;
        latents.iter().map(|l| self.decoder.decode(l)).collect()
    }

    fn decode_pullback(&self, latents: &[Image], cotangent: &[Image]) -> Result<Vec<Image>> {
        check_batch(latents, "latent")?;
        check_batch(cotangent, "cotangent")?;
        if latents.len() != cotangent.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} latents but {} cotangents",
                latents.len(),
                cotangent.len()
            )));
        }
        let [h, w, _] = latents[0].shape();
        if cotangent[0].shape() != [h * LATENT_SCALE, w * LATENT_SCALE, 3] {
            return Err(Error::ShapeMismatch(format!(
                "cotangent shape {:?} does not match decoded shape",
                cotangent[0].shape()
            )));
        }
        cotangent.iter().map(|g| self.decoder.pullback(g)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(seed: u64, h: usize, w: usize, c: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, c, |_, _, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn zero_latent_decodes_to_mid_gray() {
        let img = ToyDecoder.decode(&Image::zeros(2, 3, 4)).unwrap();
        assert_eq!(img.shape(), [16, 24, 3]);
        assert!(img.data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn basis_latent_decodes_to_mixing_row() {
        for k in 0..4 {
            let mut l = Image::zeros(1, 1, 4);
            l.set(0, 0, k, 1.0);
            let img = ToyDecoder.decode(&l).unwrap();
            for i in 0..64 {
                for j in 0..3 {
                    assert_eq!(img.pixel(i)[j], 0.5 + TOY_MIXING[k][j]);
                }
            }
        }
    }

    #[test]
    fn encode_is_right_inverse() {
        let rgb = Image::from_fn(16, 16, 3, |y, x, c| 0.2 + 0.1 * ((y / 8) * 2 + x / 8 + c) as f64);
        let back = ToyDecoder.decode(&ToyDecoder.encode(&rgb).unwrap()).unwrap();
        assert!(back.max_abs_diff(&rgb) < 1e-12);
    }

    #[test]
    fn pullback_matches_finite_differences() {
        let x = random_image(1, 2, 2, 4);
        let g = random_image(2, 16, 16, 3);
        let grad = ToyDecoder.pullback(&g).unwrap();
        let f = |l: &Image| -> f64 {
            let d = ToyDecoder.decode(l).unwrap();
            d.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-3;
        for i in 0..x.data().len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - grad.data()[i]).abs() < 1e-9 * (1.0 + fd.abs()));
        }
        let zero = ToyDecoder.pullback(&Image::zeros(16, 16, 3)).unwrap();
        assert!(zero.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn predict_noise_inverts_forward_noising() {
        let b = ToyBackend::new(0).with_target("p", random_image(3, 4, 4, 4));
        let t = b.target("p", None, [4, 4, 4]).unwrap();
        let eps = random_image(4, 4, 4, 4);
        let a: f64 = 0.37;
        let x = Image::from_vec(
            4,
            4,
            4,
            t.data().iter().zip(eps.data()).map(|(t, e)| a.sqrt() * t + (1.0 - a).sqrt() * e).collect(),
        )
        .unwrap();
        let req = DenoiseRequest {
            latents: vec![x.clone(), x],
            timestep_index: 400,
            alpha_bar_t: a,
            prompts: vec!["p".into(), "p".into()],
            depth_maps: None,
            guidance_scale: 7.5,
        };
        let out = b.predict_noise(&req).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out[0].max_abs_diff(&eps) < 1e-12);
        assert!(out[0].bit_eq(&out[1]));
        let req = DenoiseRequest { alpha_bar_t: 1.0, ..req };
        assert!(b.predict_noise(&req).unwrap()[0].data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hashed_targets_are_deterministic_and_prompt_specific() {
        let b = ToyBackend::new(9);
        let a1 = b.target("cat", None, [3, 3, 4]).unwrap();
        let a2 = b.target("cat", None, [3, 3, 4]).unwrap();
        let d = b.target("dog", None, [3, 3, 4]).unwrap();
        assert!(a1.bit_eq(&a2));
        assert!(a1.max_abs_diff(&d) > 0.0);
        assert!(ToyBackend::new(10).target("cat", None, [3, 3, 4]).unwrap().max_abs_diff(&a1) > 0.0);
    }

    #[test]
    fn depth_targets_take_precedence() {
        let depth = Image::from_fn(16, 16, 1, |y, x, _| (y * 16 + x) as f64 / 256.0);
        let t = random_image(5, 2, 2, 4);
        let b = ToyBackend::new(0)
            .with_target("p", Image::zeros(2, 2, 4))
            .with_depth_target(&depth, t.clone());
        assert!(b.target("p", Some(&depth), [2, 2, 4]).unwrap().bit_eq(&t));
        assert!(b.target("p", None, [2, 2, 4]).unwrap().data().iter().all(|v| *v == 0.0));
    }

    proptest! {
        #[test]
        fn decoder_adjoint_identity(seed in any::<u64>()) {
            let x = random_image(seed, 3, 2, 4);
            let y = random_image(seed ^ 0xabcdef, 24, 16, 3);
            let dx = ToyDecoder.decode(&x).unwrap();
            let lhs: f64 = dx.data().iter().zip(y.data()).map(|(a, b)| (a - TOY_DECODER_BIAS) * b).sum();
            let py = ToyDecoder.pullback(&y).unwrap();
            let rhs: f64 = x.data().iter().zip(py.data()).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
        }
    }
}
