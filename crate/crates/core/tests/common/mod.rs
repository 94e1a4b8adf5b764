//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use meshtex_core::backend::ToyBackend;
use meshtex_core::camera::ViewMode;
use meshtex_core::config::PipelineConfig;
use meshtex_core::image::Image;
use meshtex_core::math::Vec3;
use meshtex_core::mesh::Mesh;
use meshtex_core::pipeline::prepare_views;
use meshtex_core::raster::sample_texture;

/// Ground-truth colour of a surface point.
pub fn gt_color(p: Vec3) -> [f64; 3] {
    [0.5 + 0.25 * p.x, 0.5 + 0.25 * p.y, 0.5 + 0.25 * p.z]
}

fn barycentric(uv: [[f64; 2]; 3], p: [f64; 2]) -> Option<[f64; 3]> {
    let [a, b, c] = uv;
    let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
    if det.abs() < 1e-15 {
        return None;
    }
    let l1 = ((p[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (p[1] - a[1])) / det;
    let l2 = ((b[0] - a[0]) * (p[1] - a[1]) - (p[0] - a[0]) * (b[1] - a[1])) / det;
    Some([1.0 - l1 - l2, l1, l2])
}

/// Bakes `gt_color` into a `size²` RGB texture by locating every texel
/// centre in UV space. Texels whose centre misses every face take the
/// clamped barycentric point of the least-outside nearby face, so chart
/// borders carry plausible values too. Everything else is 0.
pub fn bake_gt_texture(mesh: &Mesh, size: usize) -> Image {
    let n = size * size;
    let mut best = vec![f64::INFINITY; n];
    let mut out = Image::zeros(size, size, 3);
    let s = size as f64;
    for f in 0..mesh.face_count() {
        let uv = mesh.face_uvs()[f];
        let tri = mesh.triangle(f);
        let (mut u0, mut u1, mut v0, mut v1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for q in uv {
            u0 = u0.min(q[0]);
            u1 = u1.max(q[0]);
            v0 = v0.min(q[1]);
            v1 = v1.max(q[1]);
        }
        let tx0 = ((u0 * s).floor() as i64 - 1).max(0) as usize;
        let tx1 = ((u1 * s).ceil() as i64 + 1).min(size as i64 - 1) as usize;
        let ty0 = (((1.0 - v1) * s).floor() as i64 - 1).max(0) as usize;
        let ty1 = (((1.0 - v0) * s).ceil() as i64 + 1).min(size as i64 - 1) as usize;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                let p = [(tx as f64 + 0.5) / s, 1.0 - (ty as f64 + 0.5) / s];
                let Some(l) = barycentric(uv, p) else { continue };
                let outside = -l.iter().cloned().fold(f64::INFINITY, f64::min);
                let dist = outside.max(0.0);
                let t = ty * size + tx;
                if dist >= best[t] {
                    continue;
                }
                best[t] = dist;
                let mut c = l.map(|x| x.max(0.0));
                let sum: f64 = c.iter().sum();
                c = c.map(|x| x / sum);
                let pos = tri[0] * c[0] + tri[1] * c[1] + tri[2] * c[2];
                out.pixel_mut(t).copy_from_slice(&gt_color(pos));
            }
        }
    }
    out
}

/// Config used by the end-to-end oracle runs.
pub fn oracle_config() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.prompt = "oracle".into();
    c.views.count = 8;
    c.views.mode = ViewMode::Hemisphere;
    c.views.resolution = 512;
    c.latent_texture_size = 128;
    c.rgb_texture_size = 256;
    c.diffusion.steps = 50;
    c.inversion.steps = 200;
    c
}

/// Toy backend whose per-view denoising target is the encoded rendering of
/// `gt` from that view, keyed by the view's depth map.
pub fn oracle_backend(mesh: &Mesh, config: &PipelineConfig, gt: &Image, seed: u64) -> ToyBackend {
    let prep = prepare_views(mesh, config).expect("views");
    let mut backend = ToyBackend::new(seed);
    for (maps, depth) in prep.rgb_maps.iter().zip(&prep.depth) {
        let render = sample_texture(maps, gt, 0.5).expect("render");
        let target = backend.decoder().encode(&render).expect("encode");
        backend = backend.with_depth_target(depth, target);
    }
    backend
}

/// PSNR in dB over the flagged texels, peak 1.
pub fn psnr(a: &Image, b: &Image, mask: &[bool]) -> f64 {
    let (mut se, mut n) = (0.0, 0usize);
    for (t, &m) in mask.iter().enumerate() {
        if m {
            for (x, y) in a.pixel(t).iter().zip(b.pixel(t)) {
                se += (x - y) * (x - y);
                n += 1;
            }
        }
    }
    if n == 0 {
        return f64::NAN;
    }
    -10.0 * (se / n as f64).log10()
}
