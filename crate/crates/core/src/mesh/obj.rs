use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::Mesh;
use crate::error::{Error, Result};
use crate::math::Vec3;

pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text)
}

/// Parses OBJ text into a normalized mesh.
///
/// Only `v`, `vt` and `f` records matter; normals, groups, smoothing and
/// material statements are skipped. Every face corner must carry a `vt` index.
pub fn parse_obj(text: &str) -> Result<Mesh> {
    let mut positions: Vec<Vec3> = Vec::new();
    let mut uvs: Vec<[f64; 2]> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    let mut face_uvs: Vec<[[f64; 2]; 3]> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut parts = line.split_whitespace();
        let Some(tag) = parts.next() else { continue };
        match tag {
            "v" => {
                let c = parse_floats(parts, 3, line_no)?;
                positions.push(Vec3::new(c[0], c[1], c[2]));
            }
            "vt" => {
                let c = parse_floats(parts, 1, line_no)?;
                uvs.push([c[0], c.get(1).copied().unwrap_or(0.0)]);
            }
            "f" => {
                let mut corners = Vec::new();
                for token in parts {
                    corners.push(parse_corner(token, positions.len(), uvs.len(), line_no)?);
                }
                if corners.len() < 3 {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("face with {} corners", corners.len()),
                    });
                }
                for k in 1..corners.len() - 1 {
                    let tri = [corners[0], corners[k], corners[k + 1]];
                    faces.push(tri.map(|(v, _)| v as u32));
                    face_uvs.push(tri.map(|(_, t)| uvs[t]));
                }
            }
            _ => {}
        }
    }
    Mesh::new(positions, faces, face_uvs)
}

fn parse_floats<'a>(
    parts: impl Iterator<Item = &'a str>,
    min: usize,
    line: usize,
) -> Result<Vec<f64>> {
    let values = parts
        .map(|p| {
            p.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("invalid number {p:?}"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if values.len() < min {
        return Err(Error::Parse {
            line,
            message: format!("expected at least {min} numbers, found {}", values.len()),
        });
    }
    Ok(values)
}

/// Parses `v/vt[/vn]` into zero-based `(vertex, uv)` indices.
fn parse_corner(token: &str, nv: usize, nt: usize, line: usize) -> Result<(usize, usize)> {
    let mut fields = token.split('/');
    let v = fields.next().unwrap_or("");
    let vt = fields.next().unwrap_or("");
    if vt.is_empty() {
        return Err(Error::MissingUv { line });
    }
    Ok((
        resolve_index(v, nv, line, "vertex")?,
        resolve_index(vt, nt, line, "texture coordinate")?,
    ))
}

fn resolve_index(field: &str, count: usize, line: usize, what: &str) -> Result<usize> {
    let raw: i64 = field.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {what} index {field:?}"),
    })?;
    let resolved = if raw > 0 {
        raw - 1
    } else if raw < 0 {
        count as i64 + raw
    } else {
        -1
    };
    if resolved < 0 || resolved as usize >= count {
        return Err(Error::Parse {
            line,
            message: format!("{what} index {raw} out of range ({count} defined)"),
        });
    }
    Ok(resolved as usize)
}

#[derive(Debug, Clone, Default)]
pub struct ObjWriteOptions {
    /// Emits `mtllib <name>` and `usemtl <material>` when set.
    pub material: Option<(String, String)>,
}

/// Serializes `v`, `vt` and `f v/vt` records with LF endings and nine
/// significant digits. Identical UV pairs share one `vt` record.
pub fn write_obj(mesh: &Mesh, options: &ObjWriteOptions) -> String {
    let mut out = String::new();
    if let Some((lib, mat)) = &options.material {
        let _ = writeln!(out, "mtllib {lib}");
        let _ = writeln!(out, "usemtl {mat}");
    }
    for v in mesh.vertices() {
        let _ = writeln!(out, "v {} {} {}", sig9(v.x), sig9(v.y), sig9(v.z));
    }
    let mut uv_index: HashMap<[u64; 2], usize> = HashMap::new();
    let mut corner_uv = Vec::with_capacity(mesh.face_count() * 3);
    for tri in mesh.face_uvs() {
        for uv in tri {
            let key = uv.map(f64::to_bits);
            let next = uv_index.len();
            let id = *uv_index.entry(key).or_insert_with(|| {
                let _ = writeln!(out, "vt {} {}", sig9(uv[0]), sig9(uv[1]));
                next
            });
            corner_uv.push(id);
        }
    }
    for (f, face) in mesh.faces().iter().enumerate() {
        let _ = writeln!(
            out,
            "f {}/{} {}/{} {}/{}",
            face[0] + 1,
            corner_uv[3 * f] + 1,
            face[1] + 1,
            corner_uv[3 * f + 1] + 1,
            face[2] + 1,
            corner_uv[3 * f + 2] + 1
        );
    }
    out
}

/// Rounds to nine significant digits and prints the shortest decimal form.
fn sig9(x: f64) -> String {
    let rounded: f64 = format!("{x:.8e}").parse().unwrap_or(x);
    if rounded == 0.0 {
        "0".to_string()
    } else {
        format!("{rounded}")
    }
}
