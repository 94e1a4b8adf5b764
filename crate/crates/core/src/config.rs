//! Pipeline configuration, read from JSON with every key optional.
//!
//! ```json
//! {
//!   "views": {"count": 8, "mode": "hemisphere", "front_axis": [0, 0, 1],
//!             "front_importance": 1.0, "resolution": 512},
//!   "diffusion": {"steps": 50, "guidance_scale": 7.5, "alpha": 0.9, "seed": 0},
//!   "inversion": {"steps": 200, "lr": 0.05},
//!   "latent_texture_size": 128,
//!   "rgb_texture_size": 1024,
//!   "sh_order": 1
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::LATENT_SCALE;
use crate::camera::ViewMode;
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::schedule::{DiffusionSchedule, DEFAULT_GUIDANCE, DEFAULT_STEPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewConfig {
    pub count: usize,
    pub mode: ViewMode,
    pub front_axis: [f64; 3],
    pub front_importance: f64,
    /// Decoded image side in pixels; latents are an eighth of this.
    pub resolution: usize,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            count: 8,
            mode: ViewMode::Sphere,
            front_axis: [0.0, 0.0, 1.0],
            front_importance: 1.0,
            resolution: 512,
        }
    }
}

/// Latent fill behind the mesh in rendered views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundFill {
    /// Fresh noise scaled to the current noise level each step.
    #[default]
    Noise,
    /// The previous step's denoised background.
    Carry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    /// Weight of the order-0 fit in the blended SH update.
    pub alpha: f64,
    pub seed: u64,
    pub background: BackgroundFill,
    /// Draw initial noise directly in texture space instead of fitting
    /// independent per-view noise.
    pub shared_init: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            guidance_scale: DEFAULT_GUIDANCE,
            alpha: 0.9,
            seed: 0,
            background: BackgroundFill::Noise,
            shared_init: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub steps: usize,
    pub lr: f64,
    pub skip: bool,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: crate::inversion::DEFAULT_STEPS,
            lr: crate::inversion::DEFAULT_LEARNING_RATE,
            skip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub prompt: String,
    pub views: ViewConfig,
    pub diffusion: DiffusionConfig,
    pub inversion: InversionConfig,
    pub latent_texture_size: usize,
    pub rgb_texture_size: usize,
    pub sh_order: u32,
    pub ridge: f64,
    /// Value written to RGB texels no view observed.
    pub fill_value: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            prompt: String::new(),
            views: ViewConfig::default(),
            diffusion: DiffusionConfig::default(),
            inversion: InversionConfig::default(),
            latent_texture_size: 128,
            rgb_texture_size: 1024,
            sh_order: 1,
            ridge: crate::sh::DEFAULT_RIDGE,
            fill_value: 0.5,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.views.count == 0 {
            return fail("views.count must be at least 1".into());
        }
        if self.views.resolution == 0 || self.views.resolution % LATENT_SCALE != 0 {
            return fail(format!(
                "views.resolution must be a positive multiple of {LATENT_SCALE}, got {}",
                self.views.resolution
            ));
        }
        if Vec3::from_array(self.views.front_axis).try_normalize().is_none() {
            return fail("views.front_axis must be a non-zero vector".into());
        }
        if !(self.views.front_importance >= 0.0) {
            return fail("views.front_importance must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.diffusion.alpha) {
            return fail(format!("diffusion.alpha must lie in [0, 1], got {}", self.diffusion.alpha));
        }
        if self.latent_texture_size == 0 || self.rgb_texture_size == 0 {
            return fail("texture sizes must be at least 1".into());
        }
        if self.sh_order > 1 {
            return Err(Error::UnsupportedOrder(self.sh_order));
        }
        if !(self.ridge >= 0.0) {
            return fail("ridge must be non-negative".into());
        }
        if !(self.inversion.lr >= 0.0) {
            return fail("inversion.lr must be non-negative".into());
        }
        if !self.fill_value.is_finite() {
            return fail("fill_value must be finite".into());
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::new(self.diffusion.steps, self.diffusion.guidance_scale)
    }

    pub fn latent_resolution(&self) -> usize {
        self.views.resolution / LATENT_SCALE
    }

    pub fn front_axis(&self) -> Vec3 {
        Vec3::from_array(self.views.front_axis).normalize()
    }
}
