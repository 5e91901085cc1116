use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which detector-head weights are used (and whether they train) during
/// fusion training: `Trained` updates the head, the frozen variants pin it
/// to the RGB or X single-modality checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezeMode {
    Trained,
    FrozenRgb,
    FrozenX,
}

impl FreezeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tr" | "trained" => Ok(FreezeMode::Trained),
            "rh" | "frozen-rgb" => Ok(FreezeMode::FrozenRgb),
            "th" | "frozen-x" => Ok(FreezeMode::FrozenX),
            other => Err(Error::Config(format!(
                "unknown head mode `{other}` (expected tr, rh or th)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Cbam,
    Eca,
}

impl FusionKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cbam" => Ok(FusionKind::Cbam),
            "eca" => Ok(FusionKind::Eca),
            other => Err(Error::Config(format!(
                "unknown fusion module kind `{other}` (expected cbam or eca)"
            ))),
        }
    }
}

/// Full experiment configuration. Serialized verbatim into every checkpoint
/// so a run can be re-created from config + seed alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub image_size: usize,
    /// Per-modality pyramid channel width.
    pub cfeat: usize,
    pub taxonomy: Vec<String>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_mode: FreezeMode,
    pub fusion_kind: FusionKind,
    /// Percent of the training split used for fusion training.
    pub fraction: f64,
    pub excluded_scene: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            image_size: 128,
            cfeat: 8,
            taxonomy: vec!["day".into(), "night".into(), "fog".into()],
            lr: 1e-3,
            epochs: 50,
            batch_size: 8,
            seed: 42,
            freeze_mode: FreezeMode::FrozenX,
            fusion_kind: FusionKind::Cbam,
            fraction: 100.0,
            excluded_scene: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 128 != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of 128",
                self.image_size
            )));
        }
        if self.cfeat == 0 {
            return Err(Error::Config("cfeat must be >= 1".into()));
        }
        if self.taxonomy.is_empty() {
            return Err(Error::Config("taxonomy must not be empty".into()));
        }
        if !(0.0..=100.0).contains(&self.fraction) || self.fraction == 0.0 {
            return Err(Error::Config(format!(
                "fraction {} must be in (0, 100]",
                self.fraction
            )));
        }
        if let Some(scene) = &self.excluded_scene {
            if !self.taxonomy.iter().any(|s| s == scene) {
                return Err(Error::UnknownScene(scene.clone()));
            }
            if self.taxonomy.len() < 2 {
                return Err(Error::Config("cannot exclude the only scene".into()));
            }
        }
        Ok(())
    }

    pub fn scene_index(&self, label: &str) -> Result<usize> {
        self.taxonomy
            .iter()
            .position(|s| s == label)
            .ok_or_else(|| Error::UnknownScene(label.to_string()))
    }
}
