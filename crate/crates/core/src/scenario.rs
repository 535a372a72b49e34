//! Scenario files: world, drones, noise and estimator settings for one run.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ba::BaConfig;
use crate::ekf::EkfConfig;
use crate::geom::{DroneId, Pose6D};
use crate::mapstore::MapConfig;
use crate::swarm::policy::PolicyConfig;
use crate::worldsim::{CameraParams, NoiseConfig, World};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Inprocess,
    Tcp,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransportConfig {
    pub kind: TransportKind,
    /// Station port for `tcp`; 0 picks a free port.
    pub port: u16,
}

fn default_cameras() -> Vec<CameraParams> {
    CameraParams::default_pair()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroneSpec {
    pub id: DroneId,
    /// True start pose in world coordinates. It is also the origin of the
    /// drone's own map frame.
    pub start_pose: Pose6D,
    #[serde(default = "default_cameras")]
    pub cameras: Vec<CameraParams>,
}

fn default_tick_rate() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Simulated seconds.
    pub duration: f64,
    #[serde(default = "default_tick_rate")]
    pub tick_rate: f64,
    pub world: World,
    pub drones: Vec<DroneSpec>,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub ekf: EkfConfig,
    #[serde(default)]
    pub map: MapConfig,
    #[serde(default)]
    pub ba: BaConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub transport: TransportConfig,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let mut s: Scenario = serde_json::from_str(text)?;
        s.world.markers.sort_by_key(|m| m.id);
        s.drones.sort_by_key(|d| d.id);
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.tick_rate
    }

    pub fn ticks(&self) -> u64 {
        (self.duration * self.tick_rate).round() as u64
    }

    /// Process noise from the config, or matched to the odometry noise.
    pub fn process_noise(&self) -> [f64; 6] {
        self.ekf.process_noise.unwrap_or_else(|| {
            EkfConfig::matched_process_noise(
                self.noise.velocity_sigma,
                self.noise.rate_sigma,
                self.dt(),
            )
        })
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if !(self.duration.is_finite() && self.duration >= 0.0) {
            return bad(format!(
                "duration {} must be finite and non-negative",
                self.duration
            ));
        }
        if !(self.tick_rate.is_finite() && self.tick_rate >= 2.0) {
            return bad(format!(
                "tick_rate {} must be at least 2 Hz",
                self.tick_rate
            ));
        }
        self.world
            .validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        if self.drones.is_empty() {
            return bad("at least one drone is required".into());
        }
        let mut ids = BTreeSet::new();
        for d in &self.drones {
            if !ids.insert(d.id) {
                return bad(format!("duplicate {}", d.id));
            }
            if !self.world.bounds.contains(&d.start_pose.t) {
                return bad(format!("{} starts outside the flight volume", d.id));
            }
            if d.cameras.is_empty() || !d.cameras.iter().all(CameraParams::is_valid) {
                return bad(format!("{} needs at least one valid camera", d.id));
            }
        }
        if !self.noise.is_valid() {
            return bad("noise parameters must be finite, non-negative and dropout < 1".into());
        }
        if let Some(q) = self.ekf.process_noise {
            if q.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return bad("process noise must be finite and non-negative".into());
            }
        }
        if self
            .ekf
            .initial_sigma
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return bad("initial sigma must be finite and non-negative".into());
        }
        if self.map.fuse_limit == 0 {
            return bad("map.fuse_limit must be at least 1".into());
        }
        if self.ba.keyposes_per_run == 0 || self.ba.max_iterations == 0 {
            return bad("ba.keyposes_per_run and ba.max_iterations must be positive".into());
        }
        self.policy.validate().map_err(ScenarioError::Invalid)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (with `seed` replaced by the run seed).
    pub fn digest(&self, seed: u64) -> String {
        let mut s = self.clone();
        s.seed = seed;
        let canonical = serde_json::to_string(&s).expect("scenario serializes");
        let hash = Sha256::digest(canonical.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}
