//! JSON model configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{Anchors, PanetConfig};
use crate::rfcr::RfcrConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_resolution: usize,
    pub width_multiplier: f32,
    pub truncate_last: usize,
    pub num_classes: usize,
    pub rfcr: RfcrConfig,
    pub panet: PanetConfig,
    /// Per-scale priors in input pixels; `None` rescales the reference set.
    pub anchors: Option<Anchors>,
    pub conf_thresh: f32,
    pub nms_iou: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_resolution: 320,
            width_multiplier: 0.75,
            truncate_last: 2,
            num_classes: 20,
            rfcr: RfcrConfig::default(),
            panet: PanetConfig::default(),
            anchors: None,
            conf_thresh: 0.25,
            nms_iou: 0.45,
        }
    }
}

impl ModelConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = std::fs::read_to_string(p)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", p.display())))?;
        Self::parse(&text)
    }

    /// Output strides of the detection head.
    pub fn output_strides(&self) -> &[usize] {
        &self.rfcr.output_strides
    }

    pub fn anchors(&self) -> Anchors {
        self.anchors
            .clone()
            .unwrap_or_else(|| Anchors::default_for(self.input_resolution))
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.input_resolution;
        if r == 0 || r % 32 != 0 {
            return Err(Error::Config(format!("input_resolution {r} is not a positive multiple of 32")));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::Config(format!("width_multiplier {} must be > 0", self.width_multiplier)));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.conf_thresh) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config("conf_thresh and nms_iou must lie in [0, 1]".into()));
        }
        self.rfcr.validate()?;
        let strides = self.output_strides();
        if strides.iter().any(|&s| s > r) {
            return Err(Error::Config(format!("output stride exceeds input_resolution {r}")));
        }
        let anchors = self.anchors();
        anchors.validate(strides.len())?;
        if anchors.per_scale() != 3 {
            return Err(Error::Config(format!(
                "anchors: expected 3 per scale, got {}",
                anchors.per_scale()
            )));
        }
        Ok(())
    }
}
