//! Spherical-harmonic latent textures.
//!
//! Each texel stores, per latent channel, the coefficients of a real SH
//! expansion of order 0 or 1 over viewing direction. The basis is scaled so
//! the ℓ=0 function is exactly 1, which makes an order-0 texture an ordinary
//! latent texture. The ℓ=1 functions are `k₁·(y, z, x)` in `m = −1, 0, 1`
//! order with `k₁ = √3`, the ratio of the orthonormal degree-1 and degree-0
//! constants.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::raster::{Accumulator, RenderMaps};
use crate::image::Image;

/// Degree-1 basis scale relative to the degree-0 function.
pub const SH_L1_SCALE: f64 = 1.732_050_807_568_877_2;

/// Default ridge on the degree-1 coefficients.
pub const DEFAULT_RIDGE: f64 = 1e-4;

/// Coefficients per texel-channel for `order`.
pub fn coeff_count(order: u32) -> usize {
    ((order + 1) * (order + 1)) as usize
}

fn check_order(order: u32) -> Result<()> {
    if order > 1 {
        Err(Error::UnsupportedOrder(order))
    } else {
        Ok(())
    }
}

/// Real SH basis values at unit direction `dir`.
pub fn sh_basis(dir: Vec3, order: u32) -> Result<Vec<f64>> {
    check_order(order)?;
    let full = basis4(dir);
    Ok(full[..coeff_count(order)].to_vec())
}

fn basis4(d: Vec3) -> [f64; 4] {
    [1.0, SH_L1_SCALE * d.y, SH_L1_SCALE * d.z, SH_L1_SCALE * d.x]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShTexture {
    order: u32,
    size: usize,
    channels: usize,
    /// Layout: texel (row-major), then channel, then coefficient.
    coeffs: Vec<f64>,
}

impl ShTexture {
    pub fn zeros(order: u32, size: usize, channels: usize) -> Result<Self> {
        check_order(order)?;
        Ok(Self {
            order,
            size,
            channels,
            coeffs: vec![0.0; size * size * channels * coeff_count(order)],
        })
    }

    pub fn from_coeffs(order: u32, size: usize, channels: usize, coeffs: Vec<f64>) -> Result<Self> {
        check_order(order)?;
        let expected = size * size * channels * coeff_count(order);
        if coeffs.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "expected {expected} coefficients, got {}",
                coeffs.len()
            )));
        }
        Ok(Self {
            order,
            size,
            channels,
            coeffs,
        })
    }

    /// Order-0 texture whose coefficients are the texel values of `image`.
    pub fn from_constant_image(image: &Image) -> Result<Self> {
        if image.height() != image.width() {
            return Err(Error::ShapeMismatch("latent texture must be square".into()));
        }
        Self::from_coeffs(0, image.height(), image.channels(), image.data().to_vec())
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn coeffs_per_channel(&self) -> usize {
        coeff_count(self.order)
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    fn texel_stride(&self) -> usize {
        self.channels * self.coeffs_per_channel()
    }

    /// All coefficients of flat texel `t`, channel-major.
    pub fn texel_coeffs(&self, t: usize) -> &[f64] {
        let s = self.texel_stride();
        &self.coeffs[t * s..(t + 1) * s]
    }

    pub fn texel_coeffs_mut(&mut self, t: usize) -> &mut [f64] {
        let s = self.texel_stride();
        &mut self.coeffs[t * s..(t + 1) * s]
    }

    /// Per-channel value at texel `(x, y)` seen from `dir`.
    pub fn evaluate(&self, texel: [usize; 2], dir: Vec3) -> Result<Vec<f64>> {
        let [x, y] = texel;
        if x >= self.size || y >= self.size {
            return Err(Error::OutOfRange {
                x,
                y,
                size: self.size,
            });
        }
        let basis = sh_basis(dir, self.order)?;
        let mut out = vec![0.0; self.channels];
        self.evaluate_flat_into(y * self.size + x, &basis, &mut out);
        Ok(out)
    }

    /// Evaluates flat texel `t` against a precomputed basis vector.
    pub fn evaluate_flat_into(&self, t: usize, basis: &[f64], out: &mut [f64]) {
        let k = self.coeffs_per_channel();
        for (c, o) in self.texel_coeffs(t).chunks_exact(k).zip(out.iter_mut()) {
            *o = c.iter().zip(basis).map(|(a, b)| a * b).sum();
        }
    }

    /// The ℓ=0 coefficients as a `size × size × C` image.
    pub fn order0_image(&self) -> Image {
        let k = self.coeffs_per_channel();
        let data = self.coeffs.iter().step_by(k).copied().collect();
        Image::from_vec(self.size, self.size, self.channels, data).expect("shape is consistent")
    }

    /// Same texture re-expressed at `order`, padding or dropping ℓ≥1 terms.
    pub fn with_order(&self, order: u32) -> Result<Self> {
        check_order(order)?;
        let (from, to) = (self.coeffs_per_channel(), coeff_count(order));
        let mut out = Self::zeros(order, self.size, self.channels)?;
        let n = from.min(to);
        for (src, dst) in self.coeffs.chunks_exact(from).zip(out.coeffs.chunks_exact_mut(to)) {
            dst[..n].copy_from_slice(&src[..n]);
        }
        Ok(out)
    }

    /// Largest magnitude among the ℓ≥1 coefficients (0 for order 0).
    pub fn max_abs_l1(&self) -> f64 {
        let k = self.coeffs_per_channel();
        self.coeffs
            .chunks_exact(k)
            .flat_map(|c| c[1..].iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|v| v.is_finite())
    }
}

/// Weighted `(direction, value)` observations keyed by flat texel index.
#[derive(Debug, Clone, PartialEq)]
pub struct TexelSamples {
    size: usize,
    channels: usize,
    texel: Vec<usize>,
    dir: Vec<Vec3>,
    weight: Vec<f64>,
    values: Vec<f64>,
}

impl TexelSamples {
    pub fn new(size: usize, channels: usize) -> Self {
        Self {
            size,
            channels,
            texel: Vec::new(),
            dir: Vec::new(),
            weight: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.texel.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texel.is_empty()
    }

    /// # Panics
    /// If the texel is out of range, `value` has the wrong length or the
    /// weight is negative.
    pub fn push(&mut self, texel: usize, dir: Vec3, value: &[f64], weight: f64) {
        assert!(texel < self.size * self.size, "texel {texel} out of range");
        assert_eq!(value.len(), self.channels);
        assert!(weight >= 0.0, "negative sample weight");
        self.texel.push(texel);
        self.dir.push(dir);
        self.weight.push(weight);
        self.values.extend_from_slice(value);
    }

    /// Adds every weighted foreground pixel of one view.
    pub fn gather(&mut self, maps: &RenderMaps, image: &Image) -> Result<()> {
        if maps.texture_size() != self.size {
            return Err(Error::ShapeMismatch(format!(
                "maps address {0}x{0} texels, samples expect {1}x{1}",
                maps.texture_size(),
                self.size
            )));
        }
        let res = maps.resolution();
        image.ensure_shape([res, res, self.channels], "sampled view")?;
        let dir = maps.view_dir();
        for i in 0..maps.pixel_count() {
            let w = maps.weight()[i];
            if let (Some(t), true) = (maps.texel_index(i), w > 0.0) {
                self.push(t, dir, image.pixel(i), w);
            }
        }
        Ok(())
    }

    pub fn extend(&mut self, other: &TexelSamples) {
        assert_eq!((self.size, self.channels), (other.size, other.channels));
        self.texel.extend_from_slice(&other.texel);
        self.dir.extend_from_slice(&other.dir);
        self.weight.extend_from_slice(&other.weight);
        self.values.extend_from_slice(&other.values);
    }

    /// `(texel, direction, value, weight)` in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, Vec3, &[f64], f64)> + '_ {
        let c = self.channels;
        (0..self.len()).map(move |i| {
            (
                self.texel[i],
                self.dir[i],
                &self.values[i * c..(i + 1) * c],
                self.weight[i],
            )
        })
    }

    pub fn total_weight(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.size * self.size];
        for (&t, &wt) in self.texel.iter().zip(&self.weight) {
            w[t] += wt;
        }
        w
    }
}

/// Order-0 fit: the weighted mean per texel, with the accumulator's exact
/// handling of agreeing samples.
fn fit_order0(samples: &TexelSamples, prior: Option<&ShTexture>) -> Result<ShTexture> {
    let mut acc = Accumulator::new(samples.size, samples.channels);
    for (t, _, v, w) in samples.iter() {
        acc.add(t, v, w);
    }
    let (mean, covered) = acc.resolve(0.0);
    let mut out = ShTexture::from_constant_image(&mean)?;
    let c = samples.channels;
    for (t, cov) in covered.iter().enumerate() {
        if !cov {
            let keep = match prior {
                Some(p) => {
                    let k = p.coeffs_per_channel();
                    p.texel_coeffs(t).iter().step_by(k).copied().collect()
                }
                None => vec![0.0; c],
            };
            out.texel_coeffs_mut(t).copy_from_slice(&keep);
        }
    }
    Ok(out)
}

/// Solves the 3×3 symmetric positive definite system `a x = b` for `nrhs`
/// right-hand sides by Cholesky factorisation. Returns false when a pivot is
/// not positive.
fn cholesky_solve3(a: &[f64; 9], rhs: &mut [f64], nrhs: usize) -> bool {
    let mut l = [0.0f64; 9];
    let scale = (0..3).map(|i| a[i * 4].abs()).fold(0.0, f64::max);
    for j in 0..3 {
        let mut d = a[j * 4];
        for k in 0..j {
            d -= l[j * 3 + k] * l[j * 3 + k];
        }
        if !(d > 1e-13 * scale) {
            return false;
        }
        let d = d.sqrt();
        l[j * 4] = d;
        for i in j + 1..3 {
            let mut s = a[i * 3 + j];
            for k in 0..j {
                s -= l[i * 3 + k] * l[j * 3 + k];
            }
            l[i * 3 + j] = s / d;
        }
    }
    for r in 0..nrhs {
        let b = &mut rhs[r * 3..(r + 1) * 3];
        for i in 0..3 {
            let mut s = b[i];
            for k in 0..i {
                s -= l[i * 3 + k] * b[k];
            }
            b[i] = s / l[i * 4];
        }
        for i in (0..3).rev() {
            let mut s = b[i];
            for k in i + 1..3 {
                s -= l[k * 3 + i] * b[k];
            }
            b[i] = s / l[i * 4];
        }
    }
    true
}

/// Per-texel weighted ridge least squares.
///
/// For each texel and channel this minimises
/// `Σ wᵢ (basis(dᵢ)·c − vᵢ)² + λ Σ_{ℓ≥1} c²`. The ridge leaves the ℓ=0
/// coefficient unpenalised, so it is eliminated first: the ℓ=1 part solves
/// the weighted-centered 3×3 system and `c₀` restores the weighted mean. A
/// texel seen from one direction therefore fits its mean exactly. With
/// `λ = 0` a rank-deficient texel falls back to a vanishing ridge. Texels
/// with no weight copy `prior`, or stay zero.
pub fn fit_weighted(
    samples: &TexelSamples,
    order: u32,
    ridge: f64,
    prior: Option<&ShTexture>,
) -> Result<ShTexture> {
    check_order(order)?;
    if !(ridge >= 0.0) {
        return Err(Error::InvalidConfig(format!("ridge must be non-negative, got {ridge}")));
    }
    if let Some(p) = prior {
        if (p.size, p.channels, p.order) != (samples.size, samples.channels, order) {
            return Err(Error::ShapeMismatch(format!(
                "prior texture is order {} {}x{}x{}, fit is order {order} {}x{}x{}",
                p.order, p.size, p.size, p.channels, samples.size, samples.size, samples.channels
            )));
        }
    }
    if order == 0 {
        return fit_order0(samples, prior);
    }

    let c = samples.channels;
    let texels = samples.size * samples.size;
    // First pass: weighted means of the ℓ=1 basis and of every channel.
    let mut wsum = vec![0.0f64; texels];
    let mut bmean = vec![[0.0f64; 3]; texels];
    let mut vmean = vec![0.0f64; texels * c];
    for (t, d, v, w) in samples.iter() {
        if w == 0.0 {
            continue;
        }
        let b = basis4(d);
        wsum[t] += w;
        for i in 0..3 {
            bmean[t][i] += w * b[i + 1];
        }
        for ch in 0..c {
            vmean[t * c + ch] += w * v[ch];
        }
    }
    for t in 0..texels {
        if wsum[t] > 0.0 {
            for i in 0..3 {
                bmean[t][i] /= wsum[t];
            }
            for ch in 0..c {
                vmean[t * c + ch] /= wsum[t];
            }
        }
    }
    // Second pass: centered scatter and right-hand sides.
    let mut scatter = vec![[0.0f64; 9]; texels];
    let mut rhs = vec![0.0f64; texels * 3 * c];
    for (t, d, v, w) in samples.iter() {
        if w == 0.0 {
            continue;
        }
        let b = basis4(d);
        let db = [b[1] - bmean[t][0], b[2] - bmean[t][1], b[3] - bmean[t][2]];
        let a = &mut scatter[t];
        for i in 0..3 {
            for j in 0..3 {
                a[i * 3 + j] += w * db[i] * db[j];
            }
        }
        let r = &mut rhs[t * 3 * c..(t + 1) * 3 * c];
        for ch in 0..c {
            let dv = v[ch] - vmean[t * c + ch];
            for i in 0..3 {
                r[ch * 3 + i] += w * db[i] * dv;
            }
        }
    }

    let mut out = ShTexture::zeros(1, samples.size, c)?;
    out.coeffs
        .par_chunks_mut(4 * c)
        .zip(rhs.par_chunks_mut(3 * c))
        .enumerate()
        .for_each(|(t, (dst, r))| {
            if wsum[t] == 0.0 {
                if let Some(p) = prior {
                    dst.copy_from_slice(p.texel_coeffs(t));
                }
                return;
            }
            let mut a = scatter[t];
            for i in 0..3 {
                a[i * 4] += ridge;
            }
            let trace: f64 = (0..3).map(|i| scatter[t][i * 4]).sum();
            let mut jitter = 1e-12 * trace.max(wsum[t]);
            let original = r.to_vec();
            loop {
                if cholesky_solve3(&a, r, c) {
                    break;
                }
                r.copy_from_slice(&original);
                for i in 0..3 {
                    a[i * 4] += jitter;
                }
                jitter *= 1e3;
            }
            let bm = bmean[t];
            for ch in 0..c {
                let c1 = &r[ch * 3..(ch + 1) * 3];
                let o = &mut dst[ch * 4..(ch + 1) * 4];
                o[0] = vmean[t * c + ch] - (bm[0] * c1[0] + bm[1] * c1[1] + bm[2] * c1[2]);
                o[1..].copy_from_slice(c1);
            }
        });
    Ok(out)
}

/// The blended update `(1 − α)·fit_N + α·embed(fit_0)`.
///
/// At order 0 this is just the order-0 fit. At `α = 1` every ℓ≥1 coefficient
/// comes out exactly zero, wherever the texel was observed.
pub fn blended_fit(
    samples: &TexelSamples,
    order: u32,
    alpha: f64,
    ridge: f64,
    prior: Option<&ShTexture>,
) -> Result<ShTexture> {
    check_order(order)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if order == 0 {
        return fit_weighted(samples, 0, ridge, prior);
    }
    let prior0 = prior.map(|p| p.with_order(0)).transpose()?;
    let fit0 = fit_weighted(samples, 0, 0.0, prior0.as_ref())?;
    let fit1 = fit_weighted(samples, order, ridge, prior)?;
    let wsum = samples.total_weight();
    let k = coeff_count(order);
    let c = samples.channels;
    let mut out = fit1;
    for (t, &w) in wsum.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let base = fit0.texel_coeffs(t);
        let dst = out.texel_coeffs_mut(t);
        for ch in 0..c {
            let row = &mut dst[ch * k..(ch + 1) * k];
            row[0] = (1.0 - alpha) * row[0] + alpha * base[ch];
            for v in &mut row[1..] {
                *v *= 1.0 - alpha;
            }
        }
    }
    Ok(out)
}
