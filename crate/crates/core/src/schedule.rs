//! Deterministic DDIM sampling, seeded noise and consistent 2D diffusion.
//!
//! Sampling step `k` (run from `n − 1` down to 0) uses training timestep
//! `t_k = k·⌊1000/n⌋ + 1` and `ᾱ_k = ᾱ(t_k)` from the scaled-linear schedule.
//! The last step targets `ᾱ = 1`, i.e. it returns the predicted clean latent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backend::{Backend, DenoiseRequest};
use crate::error::{Error, Result};
use crate::image::{mean_of, Image, Mask};

pub const TRAIN_TIMESTEPS: usize = 1000;
pub const BETA_START: f64 = 0.00085;
pub const BETA_END: f64 = 0.012;
pub const STEPS_OFFSET: usize = 1;
pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_GUIDANCE: f64 = 7.5;

/// Cumulative products `ᾱ(t)` of the scaled-linear training schedule.
pub fn training_alpha_bar() -> Vec<f64> {
    let (s, e) = (BETA_START.sqrt(), BETA_END.sqrt());
    let last = (TRAIN_TIMESTEPS - 1) as f64;
    let mut acc = 1.0;
    (0..TRAIN_TIMESTEPS)
        .map(|i| {
            let b = s + (e - s) * i as f64 / last;
            acc *= 1.0 - b * b;
            acc
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    timesteps: Vec<u32>,
    alpha_bar: Vec<f64>,
    guidance_scale: f64,
}

impl DiffusionSchedule {
    /// `num_steps` strided steps; at most `TRAIN_TIMESTEPS − 1` so every
    /// timestep stays distinct.
    pub fn new(num_steps: usize, guidance_scale: f64) -> Result<Self> {
        if num_steps == 0 || num_steps >= TRAIN_TIMESTEPS {
            return Err(Error::InvalidConfig(format!(
                "diffusion steps must lie in 1..{TRAIN_TIMESTEPS}, got {num_steps}"
            )));
        }
        if !(guidance_scale >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "guidance scale must be at least 1, got {guidance_scale}"
            )));
        }
        let train = training_alpha_bar();
        let ratio = TRAIN_TIMESTEPS / num_steps;
        let timesteps: Vec<u32> = (0..num_steps).map(|k| (k * ratio + STEPS_OFFSET) as u32).collect();
        let alpha_bar = timesteps.iter().map(|&t| train[t as usize]).collect();
        Ok(Self {
            timesteps,
            alpha_bar,
            guidance_scale,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.timesteps.len()
    }

    /// `ᾱ` per step index, strictly decreasing in the index.
    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn timesteps(&self) -> &[u32] {
        &self.timesteps
    }

    pub fn guidance_scale(&self) -> f64 {
        self.guidance_scale
    }

    /// Step indices in sampling order, noisiest first.
    pub fn sampling_order(&self) -> impl Iterator<Item = usize> {
        (0..self.num_steps()).rev()
    }

    /// `ᾱ` after taking step `k`.
    pub fn prev_alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bar[k - 1]
        }
    }
}

/// One deterministic DDIM update from `ᾱ_t` to `ᾱ_prev`.
pub fn ddim_step(x: &Image, eps: &Image, alpha_bar: f64, alpha_bar_prev: f64) -> Result<Image> {
    if !x.same_shape(eps) {
        return Err(Error::ShapeMismatch(format!(
            "latent {:?} vs noise {:?}",
            x.shape(),
            eps.shape()
        )));
    }
    let (sa, s1) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let (pa, p1) = (alpha_bar_prev.sqrt(), (1.0 - alpha_bar_prev).sqrt());
    let data = x
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&xv, &e)| {
            let x0 = (xv - s1 * e) / sa;
            pa * x0 + p1 * e
        })
        .collect();
    Image::from_vec(x.height(), x.width(), x.channels(), data)
}

/// Standard normal field from the generator seeded with `seed` on `stream`.
pub fn gaussian_image(seed: u64, stream: u64, height: usize, width: usize, channels: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let data = (0..height * width * channels)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Image::from_vec(height, width, channels, data).expect("length matches")
}

/// Stream used for the shared field; independent field `i` uses `i + 1`.
const SHARED_STREAM: u64 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBundle {
    pub shared: Image,
    pub independent: Vec<Image>,
    pub mask: Mask,
    pub seed: u64,
}

impl NoiseBundle {
    pub fn generate(seed: u64, count: usize, shape: [usize; 3], mask: Mask) -> Result<Self> {
        let [h, w, c] = shape;
        if (mask.height(), mask.width()) != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "mask is {}x{}, latents are {h}x{w}",
                mask.height(),
                mask.width()
            )));
        }
        Ok(Self {
            shared: gaussian_image(seed, SHARED_STREAM, h, w, c),
            independent: (0..count)
                .map(|i| gaussian_image(seed, i as u64 + 1, h, w, c))
                .collect(),
            mask,
            seed,
        })
    }
}

/// `where(mask, shared, independent_i)` per image, optionally plus an encoded
/// seed latent.
pub fn initial_latents(bundle: &NoiseBundle, encoded_seed: Option<&Image>) -> Result<Vec<Image>> {
    let shape = bundle.shared.shape();
    let (h, w) = (shape[0], shape[1]);
    if (bundle.mask.height(), bundle.mask.width()) != (h, w) {
        return Err(Error::ShapeMismatch("mask does not match latent size".into()));
    }
    if let Some(s) = encoded_seed {
        s.ensure_shape(shape, "encoded seed latent")?;
    }
    bundle
        .independent
        .iter()
        .map(|ind| {
            ind.ensure_shape(shape, "independent noise")?;
            let mut out = ind.clone();
            for i in 0..h * w {
                if bundle.mask.get(i) {
                    out.pixel_mut(i).copy_from_slice(bundle.shared.pixel(i));
                }
            }
            if let Some(s) = encoded_seed {
                for (o, v) in out.data_mut().iter_mut().zip(s.data()) {
                    *o += v;
                }
            }
            Ok(out)
        })
        .collect()
}

/// Inside the mask, pulls each stepped latent toward the batch mean:
/// `α·U′ᵢ + (1 − α)·mean`. Outside the mask latents pass through.
pub fn consistent_step(stepped: &[Image], mask: &Mask, alpha: f64) -> Result<Vec<Image>> {
    if stepped.is_empty() {
        return Ok(Vec::new());
    }
    let [h, w, c] = stepped[0].shape();
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "mask is {}x{}, latents are {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    if alpha == 1.0 || stepped.len() == 1 {
        return Ok(stepped.to_vec());
    }
    let mean = mean_of(stepped)?;
    Ok(stepped
        .iter()
        .map(|u| {
            let mut out = u.clone();
            for i in 0..h * w {
                if mask.get(i) {
                    let m = mean.pixel(i);
                    for (o, mv) in out.pixel_mut(i).iter_mut().zip(&m[..c]) {
                        *o = alpha * *o + (1.0 - alpha) * mv;
                    }
                }
            }
            out
        })
        .collect())
}

/// Parses `full`, `empty` or `center:<lo>:<hi>` (half-open pixel range on
/// both axes) into a mask.
pub fn parse_mask_spec(spec: &str, height: usize, width: usize) -> Result<Mask> {
    let bad = || Error::InvalidConfig(format!("invalid mask spec {spec:?}"));
    match spec {
        "full" => Ok(Mask::full(height, width)),
        "empty" => Ok(Mask::empty(height, width)),
        "center" => Ok(Mask::center_crop(height, width, height / 4, 3 * height / 4)),
        _ => {
            let rest = spec.strip_prefix("center:").ok_or_else(bad)?;
            let (lo, hi) = rest.split_once(':').ok_or_else(bad)?;
            let lo: usize = lo.parse().map_err(|_| bad())?;
            let hi: usize = hi.parse().map_err(|_| bad())?;
            if lo >= hi || hi > height.min(width) {
                return Err(bad());
            }
            Ok(Mask::center_crop(height, width, lo, hi))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Consistent2dOutput {
    pub latents: Vec<Image>,
    pub images: Vec<Image>,
}

/// Runs consistent diffusion from explicit initial latents.
pub fn run_consistent_2d_from(
    prompts: &[String],
    initial: Vec<Image>,
    mask: &Mask,
    alpha: f64,
    schedule: &DiffusionSchedule,
    backend: &dyn Backend,
) -> Result<Consistent2dOutput> {
    if prompts.is_empty() || prompts.len() != initial.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} prompts for {} latents",
            prompts.len(),
            initial.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let mut latents = initial;
    for k in schedule.sampling_order() {
        let a = schedule.alpha_bar()[k];
        let eps = backend.predict_noise(&DenoiseRequest {
            latents: latents.clone(),
            timestep_index: schedule.timesteps()[k],
            alpha_bar_t: a,
            prompts: prompts.to_vec(),
            depth_maps: None,
            guidance_scale: schedule.guidance_scale(),
        })?;
        if eps.len() != latents.len() {
            return Err(Error::BackendShape(format!(
                "{} noise predictions for {} latents",
                eps.len(),
                latents.len()
            )));
        }
        let stepped = latents
            .iter()
            .zip(&eps)
            .map(|(x, e)| ddim_step(x, e, a, schedule.prev_alpha_bar(k)))
            .collect::<Result<Vec<_>>>()?;
        latents = consistent_step(&stepped, mask, alpha)?;
    }
    let images = backend.decode(&latents)?;
    Ok(Consistent2dOutput { latents, images })
}

/// Consistent diffusion of `prompts` with structured initial noise from `seed`.
pub fn run_consistent_2d(
    prompts: &[String],
    mask: &Mask,
    alpha: f64,
    schedule: &DiffusionSchedule,
    backend: &dyn Backend,
    seed: u64,
    latent_shape: [usize; 3],
) -> Result<Consistent2dOutput> {
    let bundle = NoiseBundle::generate(seed, prompts.len(), latent_shape, mask.clone())?;
    let initial = initial_latents(&bundle, None)?;
    run_consistent_2d_from(prompts, initial, mask, alpha, schedule, backend)
}
