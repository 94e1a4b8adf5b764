//! Orthographic view generation.
//!
//! Cameras orbit the origin on a fibonacci lattice (full sphere or upper
//! hemisphere) or on an equally spaced circle in the XZ plane. Each camera
//! looks at the origin and carries a prompt modifier derived from its angle to
//! the mesh's front axis.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::math::Vec3;

/// Orbit radius as a multiple of the mesh bounding radius.
pub const ORBIT_RADIUS_FACTOR: f64 = 2.5;
/// Orthographic half extent as a multiple of the mesh bounding radius.
pub const HALF_EXTENT_FACTOR: f64 = 1.1;

const FRONT_CONE_COS: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    #[default]
    Sphere,
    Hemisphere,
    XzPlane,
}

impl FromStr for ViewMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "sphere" => Ok(ViewMode::Sphere),
            "hemisphere" => Ok(ViewMode::Hemisphere),
            "xz_plane" | "xz" => Ok(ViewMode::XzPlane),
            other => Err(Error::InvalidConfig(format!("unknown view mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptModifier {
    Front,
    Back,
    Side,
    None,
}

impl PromptModifier {
    pub fn as_str(self) -> Option<&'static str> {
        match self {
            PromptModifier::Front => Some("front"),
            PromptModifier::Back => Some("back"),
            PromptModifier::Side => Some("side"),
            PromptModifier::None => None,
        }
    }
}

impl fmt::Display for PromptModifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str().unwrap_or("none"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub position: Vec3,
    pub forward: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub ortho_half_extent: f64,
    pub resolution: usize,
    pub prompt_modifier: PromptModifier,
    pub importance: f64,
}

impl CameraView {
    /// Camera at `position` looking at the origin.
    pub fn look_at_origin(position: Vec3, half_extent: f64, resolution: usize) -> Self {
        let forward = (-position).normalize();
        let mut right = forward.cross(Vec3::Y);
        if right.length() < 1e-9 {
            right = forward.cross(Vec3::Z);
        }
        let right = right.normalize();
        let up = right.cross(forward).normalize();
        Self {
            position,
            forward,
            right,
            up,
            ortho_half_extent: half_extent,
            resolution,
            prompt_modifier: PromptModifier::None,
            importance: 1.0,
        }
    }

    /// Unit vector from the scene toward the camera; the direction at which
    /// spherical harmonic textures are evaluated for this view.
    pub fn view_direction(&self) -> Vec3 {
        -self.forward
    }

    /// Same camera at a different pixel resolution.
    pub fn with_resolution(&self, resolution: usize) -> Self {
        Self {
            resolution,
            ..self.clone()
        }
    }
}

/// Golden-angle spherical fibonacci lattice of `n` unit vectors.
///
/// Point `i` sits at height `y = 1 - 2(i + ½)/n` and azimuth `i · π(3 - √5)`.
pub fn fibonacci_directions(n: usize) -> Vec<Vec3> {
    let golden_angle = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).max(0.0).sqrt();
            let phi = golden_angle * i as f64;
            Vec3::new(r * phi.cos(), y, r * phi.sin())
        })
        .collect()
}

/// Generates `n` orthographic views orbiting the origin at `radius`.
///
/// # Panics
/// If `n` is zero.
pub fn fibonacci_views(
    n: usize,
    mode: ViewMode,
    radius: f64,
    half_extent: f64,
    resolution: usize,
) -> Vec<CameraView> {
    assert!(n >= 1, "at least one view is required");
    let dirs: Vec<Vec3> = match mode {
        ViewMode::Sphere => fibonacci_directions(n),
        ViewMode::Hemisphere => fibonacci_directions(n)
            .into_iter()
            .map(|d| Vec3::new(d.x, d.y.abs(), d.z).normalize())
            .collect(),
        ViewMode::XzPlane => (0..n)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / n as f64;
                Vec3::new(a.cos(), 0.0, a.sin())
            })
            .collect(),
    };
    dirs.into_iter()
        .map(|d| CameraView::look_at_origin(d * radius, half_extent, resolution))
        .collect()
}

/// Classifies a view as front, back or side relative to the mesh's front axis
/// with a 45° cone around each pole.
pub fn assign_prompt_modifier(view: &CameraView, front_axis: Vec3) -> PromptModifier {
    let facing = view.forward.dot(-front_axis);
    if facing > FRONT_CONE_COS {
        PromptModifier::Front
    } else if facing < -FRONT_CONE_COS {
        PromptModifier::Back
    } else {
        PromptModifier::Side
    }
}

/// Assigns modifiers to every view and multiplies the importance of the view
/// most directly facing the front by `front_importance`.
pub fn annotate_views(views: &mut [CameraView], front_axis: Vec3, front_importance: f64) {
    let front_axis = front_axis.normalize();
    for v in views.iter_mut() {
        v.prompt_modifier = assign_prompt_modifier(v, front_axis);
    }
    let best = views
        .iter()
        .enumerate()
        .map(|(i, v)| (i, v.forward.dot(-front_axis)))
        .fold(None, |acc: Option<(usize, f64)>, (i, d)| match acc {
            Some((_, bd)) if bd >= d => acc,
            _ => Some((i, d)),
        });
    if let Some((i, _)) = best {
        views[i].importance *= front_importance;
    }
}

/// Assembles the per-view prompt, `"<prompt>, <modifier> view"`.
pub fn view_prompt(prompt: &str, modifier: PromptModifier) -> String {
    match modifier.as_str() {
        Some(m) => format!("{prompt}, {m} view"),
        None => prompt.to_string(),
    }
}
