//! Triangle meshes with per-corner UV coordinates.
//!
//! Meshes come from Wavefront OBJ files (`v`, `vt` and `f` records; everything
//! else is ignored). Polygons are fan-triangulated, UVs outside `[0, 1]` are
//! wrapped to their fractional part, and positions are recentred so the
//! bounding box sits at the origin with its longest side equal to 2.

mod obj;
pub mod primitives;

use crate::error::{Error, Result};
use crate::math::Vec3;

pub use obj::{load_mesh, parse_obj, write_obj, ObjWriteOptions};

/// Cross products shorter than this fraction of the squared edge scale mark a
/// triangle as degenerate.
const DEGENERATE_RELATIVE: f64 = 1e-12;

/// Normalized meshes are left alone when already within this tolerance, which
/// makes normalization idempotent bit for bit.
const NORMALIZED_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    face_uvs: Vec<[[f64; 2]; 3]>,
    /// `None` marks a degenerate face; the rasterizer gives it zero weight.
    face_normals: Vec<Option<Vec3>>,
}

impl Mesh {
    /// Builds a validated, normalized mesh.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>, face_uvs: Vec<[[f64; 2]; 3]>) -> Result<Self> {
        let mut mesh = Self::new_raw(vertices, faces, face_uvs)?;
        mesh.normalize();
        Ok(mesh)
    }

    /// Builds a validated mesh without touching vertex positions.
    pub fn new_raw(
        vertices: Vec<Vec3>,
        faces: Vec<[u32; 3]>,
        face_uvs: Vec<[[f64; 2]; 3]>,
    ) -> Result<Self> {
        if faces.len() != face_uvs.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} faces but {} UV triples",
                faces.len(),
                face_uvs.len()
            )));
        }
        let n = vertices.len();
        for (i, f) in faces.iter().enumerate() {
            if f.iter().any(|&v| v as usize >= n) {
                return Err(Error::ShapeMismatch(format!(
                    "face {i} references a vertex beyond {n}"
                )));
            }
        }
        if let Some(v) = vertices.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("vertex {v:?}")));
        }
        let face_uvs = face_uvs
            .into_iter()
            .map(|tri| tri.map(|uv| uv.map(wrap_uv)))
            .collect();
        let mut mesh = Self {
            vertices,
            faces,
            face_uvs,
            face_normals: Vec::new(),
        };
        mesh.recompute_normals();
        Ok(mesh)
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn face_uvs(&self) -> &[[[f64; 2]; 3]] {
        &self.face_uvs
    }

    pub fn face_normals(&self) -> &[Option<Vec3>] {
        &self.face_normals
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn is_degenerate(&self, face: usize) -> bool {
        self.face_normals[face].is_none()
    }

    pub fn triangle(&self, face: usize) -> [Vec3; 3] {
        self.faces[face].map(|i| self.vertices[i as usize])
    }

    pub fn face_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.triangle(face);
        0.5 * (b - a).cross(c - a).length()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.face_count()).map(|f| self.face_area(f)).sum()
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        bounds(&self.vertices)
    }

    /// Largest vertex distance from the origin.
    pub fn bounding_radius(&self) -> f64 {
        self.vertices.iter().map(|v| v.length()).fold(0.0, f64::max)
    }

    /// Centres the bounding box at the origin and scales its longest side to 2.
    pub fn normalize(&mut self) {
        let (lo, hi) = self.bounds();
        let extent = (hi - lo).max_element();
        if !(extent > 0.0) {
            return;
        }
        let center = (lo + hi) * 0.5;
        let already = center.x.abs().max(center.y.abs()).max(center.z.abs())
            <= NORMALIZED_TOLERANCE
            && (extent - 2.0).abs() <= NORMALIZED_TOLERANCE;
        if already {
            return;
        }
        let scale = 2.0 / extent;
        for v in &mut self.vertices {
            *v = (*v - center) * scale;
        }
        self.recompute_normals();
    }

    fn recompute_normals(&mut self) {
        self.face_normals = self
            .faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| self.vertices[i as usize]);
                compute_face_normal(a, b, c).ok()
            })
            .collect();
    }
}

/// Unit normal of triangle `abc` by the right-hand rule.
pub fn compute_face_normal(a: Vec3, b: Vec3, c: Vec3) -> Result<Vec3> {
    let e1 = b - a;
    let e2 = c - a;
    let n = e1.cross(e2);
    let scale = e1.dot(e1).max(e2.dot(e2)).max((c - b).dot(c - b));
    let len = n.length();
    if !(len > DEGENERATE_RELATIVE * scale) {
        return Err(Error::DegenerateFace);
    }
    Ok(n / len)
}

/// Values already in `[0, 1]` are kept, so `u = 1.0` stays on the right edge.
fn wrap_uv(u: f64) -> f64 {
    if (0.0..=1.0).contains(&u) {
        u
    } else {
        u - u.floor()
    }
}

fn bounds(points: &[Vec3]) -> (Vec3, Vec3) {
    let inf = f64::INFINITY;
    points.iter().fold(
        (Vec3::new(inf, inf, inf), Vec3::new(-inf, -inf, -inf)),
        |(lo, hi), &p| (lo.min(p), hi.max(p)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normal_of_xy_triangle_is_plus_z() {
        let n = compute_face_normal(Vec3::ZERO, Vec3::X, Vec3::Y).unwrap();
        assert_eq!(n, Vec3::Z);
    }

    #[test]
    fn winding_flip_negates_normal() {
        let n = compute_face_normal(Vec3::ZERO, Vec3::Y, Vec3::X).unwrap();
        assert_eq!(n, -Vec3::Z);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let r = compute_face_normal(Vec3::ZERO, Vec3::X, Vec3::X * 2.0);
        assert!(matches!(r, Err(Error::DegenerateFace)));
    }

    #[test]
    fn degenerate_faces_are_kept_and_flagged() {
        let verts = vec![Vec3::ZERO, Vec3::X, Vec3::Y, Vec3::X * 2.0];
        let faces = vec![[0, 1, 2], [0, 1, 3]];
        let uvs = vec![[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]; 2];
        let m = Mesh::new(verts, faces, uvs).unwrap();
        assert_eq!(m.face_count(), 2);
        assert!(!m.is_degenerate(0));
        assert!(m.is_degenerate(1));
    }

    #[test]
    fn uvs_outside_unit_range_wrap() {
        assert_eq!(wrap_uv(1.25), 0.25);
        assert_eq!(wrap_uv(-0.25), 0.75);
        assert_eq!(wrap_uv(1.0), 1.0);
        assert_eq!(wrap_uv(0.0), 0.0);
    }

    #[test]
    fn normalization_centres_and_scales() {
        let verts = vec![
            Vec3::new(1.0, 1.0, 1.0),
            Vec3::new(5.0, 2.0, 1.0),
            Vec3::new(1.0, 3.0, 2.0),
        ];
        let m = Mesh::new(verts, vec![[0, 1, 2]], vec![[[0.0; 2]; 3]]).unwrap();
        let (lo, hi) = m.bounds();
        assert!(((lo + hi) * 0.5).length() < 1e-15);
        assert!(((hi - lo).max_element() - 2.0).abs() < 1e-15);
        let mut again = m.clone();
        again.normalize();
        assert_eq!(again, m);
    }

    #[test]
    fn out_of_range_index_rejected() {
        let r = Mesh::new(vec![Vec3::ZERO], vec![[0, 1, 2]], vec![[[0.0; 2]; 3]]);
        assert!(matches!(r, Err(Error::ShapeMismatch(_))));
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(
            pts in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0), 3..12),
        ) {
            let verts: Vec<Vec3> = pts.iter().map(|&(x, y, z)| Vec3::new(x, y, z)).collect();
            let faces: Vec<[u32; 3]> = (1..verts.len() as u32 - 1).map(|i| [0, i, i + 1]).collect();
            let uvs = vec![[[0.0; 2]; 3]; faces.len()];
            let Ok(m) = Mesh::new(verts, faces, uvs) else { return Ok(()) };
            let mut again = m.clone();
            again.normalize();
            prop_assert_eq!(again.vertices(), m.vertices());
        }
    }
}
