//! Run configuration: one JSON-loadable struct collecting every knob the
//! benchmark exposes, plus the content hash that ties reports back to the
//! exact configuration that produced them.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::actuator::{make_instrument, InstrumentModel};
use crate::control::MotionTiming;
use crate::datapipe::Hyperparameters;
use crate::error::{Error, Result};
use crate::policy::TrainingConfig;
use crate::render::{Camera, PerceptionModel};
use crate::supervisor::DemoProfile;

/// Everything a full run depends on. Every field has a default, so a config
/// file only needs the fields it overrides.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub camera: Camera,
    pub hyper: Hyperparameters,
    pub training: TrainingConfig,
    pub demo: DemoProfile,
    pub timing: MotionTiming,
    pub perception: PerceptionModel,
    /// Instruments under test; the first is the training instrument for
    /// both the policy and the calibrated baseline.
    pub instruments: Vec<InstrumentModel>,
    pub demos_per_peg: usize,
    pub trials: usize,
    pub servo_max_steps: usize,
    /// Command samples driven through an instrument to fit its observer.
    pub calibration_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            camera: Camera::default(),
            hyper: Hyperparameters::default(),
            training: TrainingConfig::default(),
            demo: DemoProfile::default(),
            timing: MotionTiming::default(),
            perception: PerceptionModel::default(),
            instruments: ["A", "B", "C"]
                .iter()
                .map(|p| make_instrument(p).expect("stock presets exist"))
                .collect(),
            demos_per_peg: 15,
            trials: 10,
            servo_max_steps: 50,
            calibration_samples: 400,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        self.hyper.validate()?;
        self.training.validate()?;
        self.demo.validate(&self.hyper)?;
        if !self.camera.covers_board() {
            return bad("camera frame does not cover the peg board");
        }
        if self.instruments.is_empty() {
            return bad("at least one instrument is required");
        }
        if self.demos_per_peg < 1 {
            return bad("demos_per_peg must be at least 1");
        }
        if self.trials < 1 {
            return bad("trials must be at least 1");
        }
        if self.servo_max_steps < 1 {
            return bad("servo_max_steps must be at least 1");
        }
        if self.calibration_samples < 10 {
            return bad("calibration_samples must be at least 10");
        }
        Ok(())
    }

    pub fn instrument(&self, name: &str) -> Result<&InstrumentModel> {
        let want = name.trim().to_ascii_uppercase();
        self.instruments
            .iter()
            .find(|i| i.name.to_ascii_uppercase() == want)
            .ok_or_else(|| Error::Config(format!("no instrument named {name:?} in config")))
    }

    /// Hex SHA-256 of the canonical (compact JSON) serialization. Field
    /// order is the struct order, so equal configs hash equally and any
    /// change to any knob changes the hash.
    pub fn sha256(&self) -> String {
        let canon = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canon);
        let mut out = String::with_capacity(64);
        for b in digest {
            use std::fmt::Write;
            write!(out, "{b:02x}").expect("hex into string");
        }
        out
    }
}
