//! Run configuration: synthetic scene, model, optimiser and schedule.
//!
//! Every struct deserialises with defaults for missing fields, so a config
//! file only needs the values it changes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use slpt_core::diffcore::AdamConfig;
use slpt_core::model::ModelConfig;
use slpt_core::{Error, Result};

/// Primitive shapes available to the scene generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Sphere,
    Box,
    Plane,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    /// Surface samples in `P_raw`.
    pub n_points: usize,
    pub objects: Vec<Primitive>,
    /// Square image side in pixels.
    pub image_size: usize,
    pub fov_deg: f64,
    pub camera_radius: f64,
    pub elevation_deg: f64,
    /// Cameras on the ring, training and held-out together.
    pub views: usize,
    /// Ring indices kept out of training.
    pub heldout: Vec<usize>,
    /// Opacity of every ground-truth splat.
    pub splat_opacity: f64,
    /// Ground-truth splat radius as a multiple of the mean point spacing.
    pub splat_scale: f64,
    /// Semantic embedding width.
    pub s_sem: usize,
    /// Amplitude of the smooth colour variation across each surface.
    pub color_variation: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_points: 4096,
            objects: vec![Primitive::Plane, Primitive::Sphere, Primitive::Box],
            image_size: 64,
            fov_deg: 60.0,
            camera_radius: 1.6,
            elevation_deg: 35.0,
            views: 10,
            heldout: vec![2, 7],
            splat_opacity: 0.9,
            splat_scale: 1.0,
            s_sem: 16,
            color_variation: 0.1,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.objects.is_empty() {
            return fail("a scene needs at least one object".into());
        }
        if self.n_points < self.objects.len() {
            return fail(format!("{} points cannot cover {} objects", self.n_points, self.objects.len()));
        }
        if self.image_size == 0 || self.s_sem == 0 || self.views == 0 {
            return fail("image size, semantic width and view count must be positive".into());
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return fail(format!("field of view {} is outside (0, 180)", self.fov_deg));
        }
        // the normalised scene must stay in front of every camera
        if !(self.camera_radius > 1.0) {
            return fail(format!("camera radius {} must exceed 1", self.camera_radius));
        }
        if !(self.splat_opacity > 0.0 && self.splat_opacity <= 1.0) {
            return fail(format!("splat opacity {} is outside (0, 1]", self.splat_opacity));
        }
        if !(self.splat_scale > 0.0) || !(self.color_variation >= 0.0) {
            return fail("splat scale must be positive and colour variation non-negative".into());
        }
        let mut seen = vec![false; self.views];
        for &k in &self.heldout {
            if k >= self.views || seen[k] {
                return fail(format!("held-out view {k} is out of range or repeated"));
            }
            seen[k] = true;
        }
        if self.heldout.len() == self.views {
            return fail("every view is held out".into());
        }
        Ok(())
    }

    /// Ring indices used for training, ascending.
    pub fn train_views(&self) -> Vec<usize> {
        (0..self.views).filter(|k| !self.heldout.contains(k)).collect()
    }

    /// Focal length in pixels for the square image.
    pub fn focal(&self) -> f64 {
        0.5 * self.image_size as f64 / (0.5 * self.fov_deg.to_radians()).tan()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Seeds parameter init, batch sampling and latent noise.
    pub seed: u64,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub steps: usize,
    /// Views rendered per step.
    pub batch_views: usize,
    /// Intermediate checkpoint period; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let mut model = ModelConfig::default();
        model.heads.s_sem = SceneConfig::default().s_sem;
        Self {
            seed: 0,
            scene: SceneConfig::default(),
            model,
            adam: AdamConfig {
                lr: 5e-3,
                ..AdamConfig::default()
            },
            steps: 2000,
            batch_views: 2,
            checkpoint_every: 500,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        if self.model.heads.s_sem != self.scene.s_sem {
            return Err(Error::Config(format!(
                "semantic head width {} differs from scene embedding width {}",
                self.model.heads.s_sem, self.scene.s_sem
            )));
        }
        if self.model.codec.m_sparse > self.scene.n_points {
            return Err(Error::Config(format!(
                "{} sparse points requested from {} input points",
                self.model.codec.m_sparse, self.scene.n_points
            )));
        }
        let train = self.scene.train_views().len();
        if self.batch_views == 0 || self.batch_views > train {
            return Err(Error::Config(format!(
                "batch of {} views from {train} training views",
                self.batch_views
            )));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.adam.lr)));
        }
        Ok(())
    }

    /// Reads a JSON config; missing fields take their defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the compact JSON form, lowercase hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        TrainingConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_json_keeps_defaults() {
        let cfg = TrainingConfig::from_json(r#"{"steps": 7, "scene": {"n_points": 512}}"#).unwrap();
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.scene.n_points, 512);
        assert_eq!(cfg.scene.image_size, 64);
        assert_eq!(cfg.model, TrainingConfig::default().model);
    }

    #[test]
    fn json_roundtrip_preserves_hash() {
        let cfg = TrainingConfig::default();
        let back = TrainingConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn hash_tracks_changes() {
        let mut cfg = TrainingConfig::default();
        let h = cfg.hash();
        cfg.model.plvae_enabled = false;
        assert_ne!(h, cfg.hash());
    }

    #[test]
    fn inconsistent_widths_rejected() {
        let mut cfg = TrainingConfig::default();
        cfg.scene.s_sem = 8;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = TrainingConfig::default();
        cfg.scene.heldout = vec![3, 3];
        assert!(cfg.validate().is_err());
        let mut cfg = TrainingConfig::default();
        cfg.batch_views = 9;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_fields_are_errors() {
        assert!(TrainingConfig::from_json(r#"{"stepz": 3}"#).is_err());
        assert!(TrainingConfig::from_json(r#"{"scene": {"view": 3}}"#).is_err());
        assert!(TrainingConfig::from_json("[1, 2]").is_err());
    }
}
