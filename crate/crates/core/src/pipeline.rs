//! End-to-end mesh texturing.
//!
//! All views are denoised jointly against one spherical-harmonic latent
//! texture. Each step renders every view from the texture, takes one DDIM
//! step per view with the backend's noise prediction, and refits the texture
//! to the stepped views. The final views are made consistent by latent
//! inversion, decoded, and backprojected into the RGB texture.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::backend::{Backend, DenoiseRequest, LATENT_CHANNELS};
use crate::camera::{annotate_views, fibonacci_views, view_prompt, CameraView, HALF_EXTENT_FACTOR, ORBIT_RADIUS_FACTOR};
use crate::config::{BackgroundFill, PipelineConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::inversion::run_inversion;
use crate::mesh::Mesh;
use crate::raster::{backproject, rasterize, render_latent, Accumulator, RenderMaps};
use crate::schedule::{ddim_step, gaussian_image};
use crate::sh::{blended_fit, fit_weighted, ShTexture, TexelSamples};

// Generator streams; each view and step draws from its own stream.
const STREAM_INIT_VIEW: u64 = 1 << 32;
const STREAM_INIT_SHARED: u64 = 2 << 32;
const STREAM_BACKGROUND: u64 = 3 << 32;

/// Cameras, prompts and the static per-view rasterizations.
#[derive(Debug, Clone)]
pub struct PreparedViews {
    pub views: Vec<CameraView>,
    pub prompts: Vec<String>,
    /// At latent resolution against the latent texture.
    pub latent_maps: Vec<RenderMaps>,
    /// At decoded resolution against the RGB texture.
    pub rgb_maps: Vec<RenderMaps>,
    /// Decoded-resolution depth, already narrowed to `f32` precision.
    pub depth: Vec<Image>,
}

/// Builds and rasterizes the configured view set.
pub fn prepare_views(mesh: &Mesh, config: &PipelineConfig) -> Result<PreparedViews> {
    config.validate()?;
    let r = mesh.bounding_radius();
    if !(r > 0.0) {
        return Err(Error::NoCoverage);
    }
    let mut views = fibonacci_views(
        config.views.count,
        config.views.mode,
        ORBIT_RADIUS_FACTOR * r,
        HALF_EXTENT_FACTOR * r,
        config.views.resolution,
    );
    annotate_views(&mut views, config.front_axis(), config.views.front_importance);
    let prompts = views
        .iter()
        .map(|v| view_prompt(&config.prompt, v.prompt_modifier))
        .collect();
    let latent_res = config.latent_resolution();
    let maps: Vec<(RenderMaps, RenderMaps)> = views
        .par_iter()
        .map(|v| {
            (
                rasterize(mesh, &v.with_resolution(latent_res), config.latent_texture_size),
                rasterize(mesh, v, config.rgb_texture_size),
            )
        })
        .collect();
    let (latent_maps, rgb_maps): (Vec<_>, Vec<_>) = maps.into_iter().unzip();
    let depth = rgb_maps
        .iter()
        .map(|m| {
            let d = m.depth().iter().map(|&v| f64::from(v as f32)).collect();
            Image::from_vec(m.resolution(), m.resolution(), 1, d)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedViews {
        views,
        prompts,
        latent_maps,
        rgb_maps,
        depth,
    })
}

/// Progress passed to an observer after every diffusion step.
pub struct StepInfo<'a> {
    pub step: usize,
    pub timestep: u32,
    pub alpha_bar: f64,
    pub texture: &'a ShTexture,
    pub stepped: &'a [Image],
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub timestep: u32,
    pub alpha_bar: f64,
    /// `Σ_v ‖W_v ⊗ (Render(v, U) − x′_v)‖₂` after the refit.
    pub residual: f64,
    pub max_abs_l1: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ViewReport {
    pub position: [f64; 3],
    pub prompt: String,
    pub importance: f64,
    pub foreground_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct InversionReport {
    pub skipped: bool,
    pub steps: usize,
    pub lr: f64,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Timings {
    pub prepare: f64,
    pub diffusion: f64,
    pub inversion: f64,
    pub bake: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub backend: String,
    pub prompt: String,
    pub seed: u64,
    pub sh_order: u32,
    pub alpha: f64,
    pub latent_texture_size: usize,
    pub rgb_texture_size: usize,
    pub views: Vec<ViewReport>,
    pub steps: Vec<StepReport>,
    pub latent_coverage_fraction: f64,
    pub rgb_coverage_fraction: f64,
    pub uncovered_rgb_texels: usize,
    pub fill_value: f64,
    pub inversion: InversionReport,
    pub timings: Timings,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// `rgb_texture_size² × 3`, uncovered texels at the fill value.
    pub texture: Image,
    pub covered: Vec<bool>,
    pub latent_texture: ShTexture,
    /// Per-view latents after inversion.
    pub latents: Vec<Image>,
    pub report: Report,
}

fn initial_texture(prep: &PreparedViews, config: &PipelineConfig) -> Result<ShTexture> {
    let t = config.latent_texture_size;
    let seed = config.diffusion.seed;
    let tex0 = if config.diffusion.shared_init {
        ShTexture::from_constant_image(&gaussian_image(seed, STREAM_INIT_SHARED, t, t, LATENT_CHANNELS))?
    } else {
        let mut samples = TexelSamples::new(t, LATENT_CHANNELS);
        for (v, maps) in prep.latent_maps.iter().enumerate() {
            let res = maps.resolution();
            let noise = gaussian_image(seed, STREAM_INIT_VIEW + v as u64, res, res, LATENT_CHANNELS);
            samples.gather(maps, &noise)?;
        }
        fit_weighted(&samples, 0, 0.0, None)?
    };
    tex0.with_order(config.sh_order)
}

fn background(
    config: &PipelineConfig,
    step: usize,
    view: usize,
    res: usize,
    alpha_bar: f64,
    previous: Option<&Image>,
) -> Image {
    match (config.diffusion.background, previous) {
        (BackgroundFill::Carry, Some(prev)) => prev.clone(),
        _ => {
            let stream = STREAM_BACKGROUND + (step as u64) * 4096 + view as u64;
            let s = (1.0 - alpha_bar).sqrt();
            gaussian_image(config.diffusion.seed, stream, res, res, LATENT_CHANNELS).map(|v| s * v)
        }
    }
}

fn weighted_residual(maps: &RenderMaps, rendered: &Image, target: &Image) -> f64 {
    let mut acc = 0.0;
    for i in 0..maps.pixel_count() {
        let w = maps.weight()[i];
        if w > 0.0 && maps.mask()[i] {
            for (a, b) in rendered.pixel(i).iter().zip(target.pixel(i)) {
                let d = w * (a - b);
                acc += d * d;
            }
        }
    }
    acc.sqrt()
}

fn coverage_fraction(maps: &[RenderMaps], size: usize) -> f64 {
    let mut hit = vec![false; size * size];
    for m in maps {
        for (t, w) in m.texel_weight_sums().iter().enumerate() {
            if *w > 0.0 {
                hit[t] = true;
            }
        }
    }
    hit.iter().filter(|h| **h).count() as f64 / (size * size) as f64
}

/// Textures `mesh` with `backend`, calling `observer` after every step.
pub fn texture_mesh_with_observer(
    mesh: &Mesh,
    config: &PipelineConfig,
    backend: &dyn Backend,
    mut observer: impl FnMut(&StepInfo<'_>),
) -> Result<PipelineOutput> {
    let t_start = Instant::now();
    let schedule = config.schedule()?;
    let prep = prepare_views(mesh, config)?;
    let latent_coverage = coverage_fraction(&prep.latent_maps, config.latent_texture_size);
    if latent_coverage == 0.0 {
        return Err(Error::NoCoverage);
    }
    let n_views = prep.views.len();
    let latent_res = config.latent_resolution();
    let mut timings = Timings {
        prepare: t_start.elapsed().as_secs_f64(),
        ..Timings::default()
    };

    let t_diff = Instant::now();
    let mut texture = initial_texture(&prep, config)?;
    let mut stepped: Option<Vec<Image>> = match config.diffusion.background {
        BackgroundFill::Carry => Some(
            (0..n_views)
                .map(|v| {
                    gaussian_image(
                        config.diffusion.seed,
                        STREAM_INIT_VIEW + v as u64,
                        latent_res,
                        latent_res,
                        LATENT_CHANNELS,
                    )
                })
                .collect(),
        ),
        BackgroundFill::Noise => None,
    };
    let mut step_reports = Vec::with_capacity(schedule.num_steps());
    for (step, k) in schedule.sampling_order().enumerate() {
        let t_step = Instant::now();
        let a = schedule.alpha_bar()[k];
        let a_prev = schedule.prev_alpha_bar(k);
        let rendered = prep
            .latent_maps
            .par_iter()
            .enumerate()
            .map(|(v, maps)| {
                let bg = background(config, step, v, latent_res, a, stepped.as_ref().map(|s| &s[v]));
                render_latent(maps, &texture, Some(&bg))
            })
            .collect::<Result<Vec<_>>>()?;
        let eps = backend.predict_noise(&DenoiseRequest {
            latents: rendered.clone(),
            timestep_index: schedule.timesteps()[k],
            alpha_bar_t: a,
            prompts: prep.prompts.clone(),
            depth_maps: Some(prep.depth.clone()),
            guidance_scale: schedule.guidance_scale(),
        })?;
        if eps.len() != n_views {
            return Err(Error::BackendShape(format!(
                "{} noise predictions for {n_views} views",
                eps.len()
            )));
        }
        let new_stepped = rendered
            .par_iter()
            .zip(eps.par_iter())
            .map(|(x, e)| ddim_step(x, e, a, a_prev))
            .collect::<Result<Vec<_>>>()?;
        let per_view = prep
            .latent_maps
            .par_iter()
            .zip(new_stepped.par_iter())
            .map(|(maps, img)| {
                let mut s = TexelSamples::new(config.latent_texture_size, LATENT_CHANNELS);
                s.gather(maps, img)?;
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut samples = TexelSamples::new(config.latent_texture_size, LATENT_CHANNELS);
        for s in &per_view {
            samples.extend(s);
        }
        texture = blended_fit(&samples, config.sh_order, config.diffusion.alpha, config.ridge, Some(&texture))?;
        if !texture.is_finite() {
            return Err(Error::NonFinite(format!("latent texture at step {step}")));
        }
        let residual: f64 = prep
            .latent_maps
            .par_iter()
            .zip(new_stepped.par_iter())
            .map(|(maps, x)| Ok(weighted_residual(maps, &render_latent(maps, &texture, None)?, x)))
            .collect::<Result<Vec<f64>>>()?
            .iter()
            .sum();
        observer(&StepInfo {
            step,
            timestep: schedule.timesteps()[k],
            alpha_bar: a,
            texture: &texture,
            stepped: &new_stepped,
            residual,
        });
        step_reports.push(StepReport {
            step,
            timestep: schedule.timesteps()[k],
            alpha_bar: a,
            residual,
            max_abs_l1: texture.max_abs_l1(),
            seconds: t_step.elapsed().as_secs_f64(),
        });
        stepped = Some(new_stepped);
    }
    let last = stepped.expect("at least one diffusion step");
    let final_latents = prep
        .latent_maps
        .par_iter()
        .zip(last.par_iter())
        .map(|(maps, bg)| render_latent(maps, &texture, Some(bg)))
        .collect::<Result<Vec<_>>>()?;
    timings.diffusion = t_diff.elapsed().as_secs_f64();

    let t_inv = Instant::now();
    let skip = config.inversion.skip || config.inversion.steps == 0;
    let (latents, losses) = if skip {
        (final_latents, Vec::new())
    } else {
        let out = run_inversion(
            final_latents,
            &prep.rgb_maps,
            backend,
            config.inversion.steps,
            config.inversion.lr,
        )?;
        (out.latents, out.losses)
    };
    timings.inversion = t_inv.elapsed().as_secs_f64();

    let t_bake = Instant::now();
    let decoded = backend.decode(&latents)?;
    let per_view = prep
        .rgb_maps
        .par_iter()
        .zip(decoded.par_iter())
        .map(|(maps, img)| {
            let mut acc = Accumulator::new(config.rgb_texture_size, 3);
            backproject(maps, img, &mut acc)?;
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = Accumulator::new(config.rgb_texture_size, 3);
    for a in &per_view {
        acc.merge(a);
    }
    let (rgb, covered) = acc.resolve(config.fill_value);
    if !rgb.is_finite() {
        return Err(Error::NonFinite("decoded RGB texture".into()));
    }
    let n_covered = covered.iter().filter(|c| **c).count();
    timings.bake = t_bake.elapsed().as_secs_f64();
    timings.total = t_start.elapsed().as_secs_f64();

    let report = Report {
        backend: backend.name(),
        prompt: config.prompt.clone(),
        seed: config.diffusion.seed,
        sh_order: config.sh_order,
        alpha: config.diffusion.alpha,
        latent_texture_size: config.latent_texture_size,
        rgb_texture_size: config.rgb_texture_size,
        views: prep
            .views
            .iter()
            .zip(&prep.prompts)
            .zip(&prep.latent_maps)
            .map(|((v, p), m)| ViewReport {
                position: v.position.to_array(),
                prompt: p.clone(),
                importance: v.importance,
                foreground_fraction: m.foreground_count() as f64 / m.pixel_count() as f64,
            })
            .collect(),
        steps: step_reports,
        latent_coverage_fraction: latent_coverage,
        rgb_coverage_fraction: n_covered as f64 / covered.len() as f64,
        uncovered_rgb_texels: covered.len() - n_covered,
        fill_value: config.fill_value,
        inversion: InversionReport {
            skipped: skip,
            steps: if skip { 0 } else { config.inversion.steps },
            lr: config.inversion.lr,
            losses,
        },
        timings,
    };
    Ok(PipelineOutput {
        texture: rgb,
        covered,
        latent_texture: texture,
        latents,
        report,
    })
}

pub fn texture_mesh(mesh: &Mesh, config: &PipelineConfig, backend: &dyn Backend) -> Result<PipelineOutput> {
    texture_mesh_with_observer(mesh, config, backend, |_| {})
}
