//! Writing textures, textured meshes and debug rasters.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::mesh::{write_obj, Mesh, ObjWriteOptions};
use crate::raster::RenderMaps;
use crate::sh::ShTexture;

pub const TEXTURE_FILE: &str = "texture.png";
pub const MESH_FILE: &str = "mesh_out.obj";
pub const MATERIAL_FILE: &str = "mesh_out.mtl";
const MATERIAL_NAME: &str = "texture";

/// Clamps to `[0, 1]` and rounds half up to 8 bits.
pub fn quantize(v: f64) -> Result<u8> {
    if v.is_nan() {
        return Err(Error::NonFinite("texel value is NaN".into()));
    }
    Ok((v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
}

fn quantize_all(values: &[f64]) -> Result<Vec<u8>> {
    values.iter().map(|&v| quantize(v)).collect()
}

/// Writes a 3-channel image as 8-bit RGB PNG. Nothing is written if any value
/// is NaN.
pub fn write_png(image: &Image, path: &Path) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "PNG export needs 3 channels, got {}",
            image.channels()
        )));
    }
    let bytes = quantize_all(image.data())?;
    let img = RgbImage::from_raw(image.width() as u32, image.height() as u32, bytes)
        .ok_or_else(|| Error::ShapeMismatch("image buffer size".into()))?;
    img.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

fn write_gray(values: &[f64], side: usize, path: &Path) -> Result<()> {
    let bytes = quantize_all(values)?;
    let img = GrayImage::from_raw(side as u32, side as u32, bytes)
        .ok_or_else(|| Error::ShapeMismatch("image buffer size".into()))?;
    img.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

/// Paths written by [`export_textured_mesh`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportedFiles {
    pub texture: PathBuf,
    pub mesh: PathBuf,
    pub material: PathBuf,
}

/// Writes `texture.png`, `mesh_out.obj` and `mesh_out.mtl` into `dir`.
pub fn export_textured_mesh(mesh: &Mesh, texture: &Image, dir: &Path) -> Result<ExportedFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ExportedFiles {
        texture: dir.join(TEXTURE_FILE),
        mesh: dir.join(MESH_FILE),
        material: dir.join(MATERIAL_FILE),
    };
    write_png(texture, &files.texture)?;
    let obj = write_obj(
        mesh,
        &ObjWriteOptions {
            material: Some((MATERIAL_FILE.into(), MATERIAL_NAME.into())),
        },
    );
    fs::write(&files.mesh, obj).map_err(|e| Error::io(&files.mesh, e))?;
    let mtl = format!("newmtl {MATERIAL_NAME}\nKa 1 1 1\nKd 1 1 1\nKs 0 0 0\nmap_Kd {TEXTURE_FILE}\n");
    fs::write(&files.material, mtl).map_err(|e| Error::io(&files.material, e))?;
    Ok(files)
}

/// Dumps a view's depth, mask and weight maps as grayscale PNGs named
/// `<prefix>_depth.png`, `<prefix>_mask.png` and `<prefix>_weight.png`.
pub fn write_maps_debug(maps: &RenderMaps, dir: &Path, prefix: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let side = maps.resolution();
    let mask: Vec<f64> = maps.mask().iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let max_w = maps.weight().iter().cloned().fold(0.0, f64::max);
    let weight: Vec<f64> = if max_w > 0.0 {
        maps.weight().iter().map(|w| w / max_w).collect()
    } else {
        maps.weight().to_vec()
    };
    write_gray(maps.depth(), side, &dir.join(format!("{prefix}_depth.png")))?;
    write_gray(&mask, side, &dir.join(format!("{prefix}_mask.png")))?;
    write_gray(&weight, side, &dir.join(format!("{prefix}_weight.png")))
}

/// Raw coefficient dump: four little-endian `u32` (width, height, channels,
/// order) followed by every coefficient as little-endian `f32` in texel,
/// channel, coefficient order.
pub fn write_sh_planes(texture: &ShTexture, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(16 + texture.coeffs().len() * 4);
    for v in [texture.size(), texture.size(), texture.channels(), texture.order() as usize] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for c in texture.coeffs() {
        out.extend_from_slice(&(*c as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}
