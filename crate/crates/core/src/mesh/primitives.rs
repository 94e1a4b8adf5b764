//! Procedural test meshes.

use std::f64::consts::PI;

use super::Mesh;
use crate::math::Vec3;

/// Latitude/longitude sphere with an equirectangular UV layout.
///
/// `v = 1` at the north pole (+Y), `u` runs with longitude. The seam column is
/// duplicated so UVs stay continuous inside every triangle; the collapsed
/// triangles at the poles are omitted.
pub fn uv_sphere(segments: usize, rings: usize) -> Mesh {
    let segments = segments.max(3);
    let rings = rings.max(2);
    let mut vertices = Vec::with_capacity((segments + 1) * (rings + 1));
    let mut uvs = Vec::with_capacity(vertices.capacity());
    for r in 0..=rings {
        let theta = PI * r as f64 / rings as f64;
        for s in 0..=segments {
            let phi = 2.0 * PI * s as f64 / segments as f64;
            vertices.push(Vec3::new(
                theta.sin() * phi.cos(),
                theta.cos(),
                -theta.sin() * phi.sin(),
            ));
            uvs.push([s as f64 / segments as f64, 1.0 - r as f64 / rings as f64]);
        }
    }
    let idx = |r: usize, s: usize| r * (segments + 1) + s;
    let mut faces = Vec::new();
    let mut face_uvs = Vec::new();
    let mut push = |tri: [usize; 3]| {
        faces.push(tri.map(|i| i as u32));
        face_uvs.push(tri.map(|i| uvs[i]));
    };
    for r in 0..rings {
        for s in 0..segments {
            let (a, b, c, d) = (idx(r, s), idx(r + 1, s), idx(r + 1, s + 1), idx(r, s + 1));
            if r != 0 {
                push([a, b, d]);
            }
            if r != rings - 1 {
                push([b, c, d]);
            }
        }
    }
    Mesh::new(vertices, faces, face_uvs).expect("sphere construction is valid")
}

/// Axis-aligned cube whose six faces each occupy one cell of a 3×3 UV atlas.
///
/// Cell `(i, j)` spans `u ∈ [i/3, (i+1)/3]`, `v ∈ [j/3, (j+1)/3]`. Faces map
/// +X, −X, +Y to row 0 and −Y, +Z, −Z to row 1; row 2 is unused.
pub fn atlas_cube() -> Mesh {
    let vertices = vec![
        Vec3::new(-1.0, -1.0, -1.0),
        Vec3::new(1.0, -1.0, -1.0),
        Vec3::new(1.0, 1.0, -1.0),
        Vec3::new(-1.0, 1.0, -1.0),
        Vec3::new(-1.0, -1.0, 1.0),
        Vec3::new(1.0, -1.0, 1.0),
        Vec3::new(1.0, 1.0, 1.0),
        Vec3::new(-1.0, 1.0, 1.0),
    ];
    let quads: [([u32; 4], (usize, usize)); 6] = [
        ([5, 1, 2, 6], (0, 0)),
        ([0, 4, 7, 3], (1, 0)),
        ([7, 6, 2, 3], (2, 0)),
        ([0, 1, 5, 4], (0, 1)),
        ([4, 5, 6, 7], (1, 1)),
        ([1, 0, 3, 2], (2, 1)),
    ];
    let mut faces = Vec::new();
    let mut face_uvs = Vec::new();
    for (q, (i, j)) in quads {
        let (u0, u1) = (i as f64 / 3.0, (i + 1) as f64 / 3.0);
        let (v0, v1) = (j as f64 / 3.0, (j + 1) as f64 / 3.0);
        let uv = [[u0, v0], [u1, v0], [u1, v1], [u0, v1]];
        faces.push([q[0], q[1], q[2]]);
        face_uvs.push([uv[0], uv[1], uv[2]]);
        faces.push([q[0], q[2], q[3]]);
        face_uvs.push([uv[0], uv[2], uv[3]]);
    }
    Mesh::new(vertices, faces, face_uvs).expect("cube construction is valid")
}

/// Square in the plane `z = 0` spanning `[-1, 1]²`, facing +Z, UV-mapped to
/// the whole unit square.
pub fn quad() -> Mesh {
    let vertices = vec![
        Vec3::new(-1.0, -1.0, 0.0),
        Vec3::new(1.0, -1.0, 0.0),
        Vec3::new(1.0, 1.0, 0.0),
        Vec3::new(-1.0, 1.0, 0.0),
    ];
    let faces = vec![[0, 1, 2], [0, 2, 3]];
    let face_uvs = vec![
        [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]],
        [[0.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
    ];
    Mesh::new_raw(vertices, faces, face_uvs).expect("quad construction is valid")
}
