//! Latent inversion for cross-view consistency.
//!
//! Every view's latent is decoded and backprojected into RGB texture space.
//! The weighted mean over all views, `L̄`, is the consensus texture. Each view
//! then descends the smoothed ℓ1 distance between its own backprojection and
//! `L̄`, differentiated through backprojection and the decoder with `L̄` held
//! fixed. `L̄` is recomputed before every step.

use rayon::prelude::*;

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::raster::{backproject, Accumulator, RenderMaps};

/// Smoothing of the ℓ1 loss, `√(r² + ε²) − ε`.
pub const L1_SMOOTHING: f64 = 1e-6;
pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_LEARNING_RATE: f64 = 0.05;

const RGB: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct InversionState {
    pub latents: Vec<Image>,
    pub step: usize,
    pub learning_rate: f64,
    pub max_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionOutcome {
    pub latents: Vec<Image>,
    /// Total loss before each step, then once more after the last update.
    pub losses: Vec<f64>,
}

fn check_inputs(latents: &[Image], maps: &[RenderMaps]) -> Result<usize> {
    if latents.len() != maps.len() || latents.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} latents for {} views",
            latents.len(),
            maps.len()
        )));
    }
    let size = maps[0].texture_size();
    if maps.iter().any(|m| m.texture_size() != size) {
        return Err(Error::ShapeMismatch("views address different texture sizes".into()));
    }
    Ok(size)
}

fn view_accumulators(decoded: &[Image], maps: &[RenderMaps], size: usize) -> Result<Vec<Accumulator>> {
    decoded
        .par_iter()
        .zip(maps.par_iter())
        .map(|(img, m)| {
            let mut acc = Accumulator::new(size, RGB);
            backproject(m, img, &mut acc)?;
            Ok(acc)
        })
        .collect()
}

fn merge_all(accs: &[Accumulator], size: usize) -> Accumulator {
    let mut total = Accumulator::new(size, RGB);
    for a in accs {
        total.merge(a);
    }
    total
}

/// Weighted mean texture of all decoded views and its coverage flags.
pub fn average_texture(
    latents: &[Image],
    maps: &[RenderMaps],
    backend: &dyn Backend,
) -> Result<(Image, Vec<bool>)> {
    let size = check_inputs(latents, maps)?;
    let decoded = backend.decode(latents)?;
    let accs = view_accumulators(&decoded, maps, size)?;
    Ok(merge_all(&accs, size).resolve(0.0))
}

/// Loss of one view against `target` and the loss gradient with respect to
/// that view's decoded pixels.
fn view_loss_and_cotangent(
    acc: &Accumulator,
    maps: &RenderMaps,
    target: &Image,
) -> (f64, Image) {
    let (own, covered) = acc.resolve(0.0);
    let n = covered.iter().filter(|c| **c).count() * RGB;
    let res = maps.resolution();
    let mut cot = Image::zeros(res, res, RGB);
    if n == 0 {
        return (0.0, cot);
    }
    let eps = L1_SMOOTHING;
    let mut loss = 0.0;
    let mut dtex = vec![0.0; own.data().len()];
    for (t, &cov) in covered.iter().enumerate() {
        if !cov {
            continue;
        }
        for c in 0..RGB {
            let r = own.pixel(t)[c] - target.pixel(t)[c];
            let s = (r * r + eps * eps).sqrt();
            loss += s - eps;
            dtex[t * RGB + c] = r / s / n as f64;
        }
    }
    let wsum = acc.weight_sum();
    for i in 0..maps.pixel_count() {
        let w = maps.weight()[i];
        if let (Some(t), true) = (maps.texel_index(i), w > 0.0) {
            let k = w / wsum[t];
            for (o, g) in cot.pixel_mut(i).iter_mut().zip(&dtex[t * RGB..(t + 1) * RGB]) {
                *o = k * g;
            }
        }
    }
    (loss / n as f64, cot)
}

/// Total loss `Σ_v mean ℓ1(backproject_v(decode(L_v)) − target)` and its
/// gradient with respect to every latent, `target` held fixed.
pub fn loss_and_gradient(
    latents: &[Image],
    maps: &[RenderMaps],
    target: &Image,
    backend: &dyn Backend,
) -> Result<(f64, Vec<Image>)> {
    let size = check_inputs(latents, maps)?;
    target.ensure_shape([size, size, RGB], "consensus texture")?;
    let decoded = backend.decode(latents)?;
    let accs = view_accumulators(&decoded, maps, size)?;
    let (loss, grad) = loss_and_gradient_from(latents, &accs, maps, target, backend)?;
    Ok((loss, grad))
}

fn loss_and_gradient_from(
    latents: &[Image],
    accs: &[Accumulator],
    maps: &[RenderMaps],
    target: &Image,
    backend: &dyn Backend,
) -> Result<(f64, Vec<Image>)> {
    let per_view: Vec<(f64, Image)> = accs
        .par_iter()
        .zip(maps.par_iter())
        .map(|(a, m)| view_loss_and_cotangent(a, m, target))
        .collect();
    let loss = per_view.iter().map(|(l, _)| l).sum();
    let cot: Vec<Image> = per_view.into_iter().map(|(_, c)| c).collect();
    let grad = backend.decode_pullback(latents, &cot)?;
    Ok((loss, grad))
}

/// Total loss only, with `target` fixed.
pub fn loss(latents: &[Image], maps: &[RenderMaps], target: &Image, backend: &dyn Backend) -> Result<f64> {
    let size = check_inputs(latents, maps)?;
    let decoded = backend.decode(latents)?;
    let accs = view_accumulators(&decoded, maps, size)?;
    Ok(accs
        .iter()
        .zip(maps)
        .map(|(a, m)| view_loss_and_cotangent(a, m, target).0)
        .sum())
}

/// One joint descent step of every view. Returns the loss before the update.
pub fn inversion_step(
    state: &mut InversionState,
    maps: &[RenderMaps],
    backend: &dyn Backend,
) -> Result<f64> {
    let size = check_inputs(&state.latents, maps)?;
    let decoded = backend.decode(&state.latents)?;
    let accs = view_accumulators(&decoded, maps, size)?;
    let (target, _) = merge_all(&accs, size).resolve(0.0);
    let (loss, grad) = loss_and_gradient_from(&state.latents, &accs, maps, &target, backend)?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "inversion step {} (loss {loss}, learning rate {})",
            state.step, state.learning_rate
        )));
    }
    let eta = state.learning_rate;
    if eta != 0.0 {
        for (l, g) in state.latents.iter_mut().zip(&grad) {
            for (x, d) in l.data_mut().iter_mut().zip(g.data()) {
                *x -= eta * d;
            }
        }
    }
    state.step += 1;
    Ok(loss)
}

/// Runs `steps` inversion steps with learning rate `lr`.
pub fn run_inversion(
    latents: Vec<Image>,
    maps: &[RenderMaps],
    backend: &dyn Backend,
    steps: usize,
    lr: f64,
) -> Result<InversionOutcome> {
    if !(lr >= 0.0) {
        return Err(Error::InvalidConfig(format!("learning rate must be non-negative, got {lr}")));
    }
    check_inputs(&latents, maps)?;
    if steps == 0 {
        return Ok(InversionOutcome {
            latents,
            losses: Vec::new(),
        });
    }
    let mut state = InversionState {
        latents,
        step: 0,
        learning_rate: lr,
        max_steps: steps,
    };
    let mut losses = Vec::with_capacity(steps + 1);
    while state.step < state.max_steps {
        losses.push(inversion_step(&mut state, maps, backend)?);
    }
    let (target, _) = average_texture(&state.latents, maps, backend)?;
    losses.push(loss(&state.latents, maps, &target, backend)?);
    Ok(InversionOutcome {
        latents: state.latents,
        losses,
    })
}
