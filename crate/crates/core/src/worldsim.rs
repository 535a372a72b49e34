//! Ground-truth world, drone kinematics and pose-level sensor simulation.

use std::collections::BTreeSet;
use std::f64::consts::FRAC_PI_2;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ekf::DetectionNoiseParams;
use crate::geom::{wrap_angle, DroneId, MarkerId, Pose6D};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("time step {0} outside (0, 0.5] s")]
    BadTimeStep(f64),
    #[error("non-finite velocity command")]
    NonFiniteCommand,
    #[error("duplicate marker id {0}")]
    DuplicateMarker(MarkerId),
    #[error("marker id {0} exceeds 1023")]
    InvalidMarkerId(MarkerId),
    #[error("marker {0} lies outside the flight volume")]
    MarkerOutOfBounds(MarkerId),
    #[error("empty or inverted bounds")]
    BadBounds,
}

/// Axis-aligned flight volume in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bounds {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn clamp(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::from_fn(|i, _| p[i].clamp(self.min[i], self.max[i]))
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|i| {
            self.min[i].is_finite() && self.max[i].is_finite() && self.min[i] < self.max[i]
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    pub id: MarkerId,
    pub pose: Pose6D,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub bounds: Bounds,
    pub markers: Vec<Marker>,
}

impl World {
    pub fn new(bounds: Bounds, mut markers: Vec<Marker>) -> Result<Self, SimError> {
        markers.sort_by_key(|m| m.id);
        let world = Self { bounds, markers };
        world.validate()?;
        Ok(world)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !self.bounds.is_valid() {
            return Err(SimError::BadBounds);
        }
        let mut seen = BTreeSet::new();
        for m in &self.markers {
            if !m.id.is_valid() {
                return Err(SimError::InvalidMarkerId(m.id));
            }
            if !seen.insert(m.id) {
                return Err(SimError::DuplicateMarker(m.id));
            }
            if !self.bounds.contains(&m.pose.t) {
                return Err(SimError::MarkerOutOfBounds(m.id));
            }
        }
        Ok(())
    }

    pub fn marker(&self, id: MarkerId) -> Option<&Marker> {
        self.markers.iter().find(|m| m.id == id)
    }
}

/// A body-mounted camera. Camera frame: +z boresight, +x right, +y down.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub name: String,
    /// Camera pose in the body frame (body: +x forward, +y left, +z up).
    pub extrinsics: Pose6D,
    pub fov_half_angle: f64,
    pub max_range: f64,
}

impl CameraParams {
    pub fn forward(fov_half_angle: f64, max_range: f64) -> Self {
        // columns: camera x, y, z expressed in the body frame
        let r = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
        Self {
            name: "forward".into(),
            extrinsics: Pose6D::new(Vector3::zeros(), rotation_from_matrix(&r)),
            fov_half_angle,
            max_range,
        }
    }

    pub fn downward(fov_half_angle: f64, max_range: f64) -> Self {
        let r = Matrix3::new(0.0, -1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, -1.0);
        Self {
            name: "downward".into(),
            extrinsics: Pose6D::new(Vector3::zeros(), rotation_from_matrix(&r)),
            fov_half_angle,
            max_range,
        }
    }

    pub fn default_pair() -> Vec<CameraParams> {
        vec![Self::forward(0.6, 4.0), Self::downward(0.5, 3.0)]
    }

    pub fn is_valid(&self) -> bool {
        self.fov_half_angle > 0.0
            && self.fov_half_angle < FRAC_PI_2
            && self.max_range > 0.0
            && self.max_range.is_finite()
            && self.extrinsics.is_finite()
    }

    /// Whether a point given in camera coordinates lies inside the cone and range.
    pub fn sees(&self, p: &Vector3<f64>) -> bool {
        let range = p.norm();
        if !(range > 0.0) || range > self.max_range || p.z <= 0.0 {
            return false;
        }
        (p.z / range).clamp(-1.0, 1.0).acos() <= self.fov_half_angle
    }
}

fn rotation_from_matrix(m: &Matrix3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(*m))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroneTruth {
    pub drone_id: DroneId,
    pub pose: Pose6D,
    pub body_velocity: Vector3<f64>,
    pub yaw_rate: f64,
}

impl DroneTruth {
    pub fn at_rest(drone_id: DroneId, pose: Pose6D) -> Self {
        Self {
            drone_id,
            pose,
            body_velocity: Vector3::zeros(),
            yaw_rate: 0.0,
        }
    }
}

/// Body-frame velocity plus yaw rate, the abstraction of the vehicle's maneuver set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityCommand {
    pub body_velocity: Vector3<f64>,
    pub yaw_rate: f64,
}

impl VelocityCommand {
    pub fn hover() -> Self {
        Self {
            body_velocity: Vector3::zeros(),
            yaw_rate: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.body_velocity.iter().all(|v| v.is_finite()) && self.yaw_rate.is_finite()
    }
}

/// One camera-frame observation of a marker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkerDetection {
    pub drone_id: DroneId,
    pub marker_id: MarkerId,
    /// Marker pose in the camera frame.
    pub rel_pose: Pose6D,
    pub range: f64,
    pub timestamp: f64,
    /// Pose of the observing camera in the body frame.
    pub extrinsics: Pose6D,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdometryReading {
    pub drone_id: DroneId,
    pub body_velocity: Vector3<f64>,
    pub euler_rates: Vector3<f64>,
    pub dt: f64,
    pub timestamp: f64,
}

/// Simulator noise. Detection noise shares its parameters with the filter's
/// observation model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub detection: DetectionNoiseParams,
    /// Per-axis std of odometry body velocity, m/s.
    pub velocity_sigma: f64,
    /// Per-axis std of odometry Euler rates, rad/s.
    pub rate_sigma: f64,
    /// Probability that a visible marker is missed.
    pub dropout: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            detection: DetectionNoiseParams::default(),
            velocity_sigma: 0.05,
            rate_sigma: 0.02,
            dropout: 0.05,
        }
    }
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        Self {
            detection: DetectionNoiseParams::zero(),
            velocity_sigma: 0.0,
            rate_sigma: 0.0,
            dropout: 0.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.detection.is_valid()
            && self.velocity_sigma >= 0.0
            && self.rate_sigma >= 0.0
            && (0.0..1.0).contains(&self.dropout)
    }
}

/// Per-drone random stream. Each drone draws from its own ChaCha stream, so
/// the order in which drones are scheduled cannot change any draw.
#[derive(Clone, Debug)]
pub struct DroneRng(ChaCha8Rng);

impl DroneRng {
    pub fn new(seed: u64, drone: DroneId) -> Self {
        Self::with_stream(seed, u64::from(drone.0))
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self(rng)
    }

    pub fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    pub fn normal3(&mut self) -> Vector3<f64> {
        let x = self.normal();
        let y = self.normal();
        let z = self.normal();
        Vector3::new(x, y, z)
    }

    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }
}

/// First-order kinematics with roll and pitch pinned to zero.
pub fn step_drone(
    truth: &DroneTruth,
    cmd: &VelocityCommand,
    dt: f64,
    bounds: &Bounds,
) -> Result<DroneTruth, SimError> {
    if !(dt > 0.0 && dt <= 0.5) {
        return Err(SimError::BadTimeStep(dt));
    }
    if !cmd.is_finite() {
        return Err(SimError::NonFiniteCommand);
    }
    let yaw = truth.pose.euler()[2];
    let heading = crate::geom::rotation_z(yaw);
    let t = bounds.clamp(&(truth.pose.t + heading * cmd.body_velocity * dt));
    let new_yaw = wrap_angle(yaw + cmd.yaw_rate * dt);
    Ok(DroneTruth {
        drone_id: truth.drone_id,
        pose: Pose6D::from_euler([t.x, t.y, t.z], [0.0, 0.0, new_yaw]),
        body_velocity: cmd.body_velocity,
        yaw_rate: cmd.yaw_rate,
    })
}

/// Simulated output of the vision layer: marker poses in camera coordinates.
///
/// Noise is applied as a random perturbation of the camera pose
/// (`rel = (C ∘ N)⁻¹ ∘ M`), so the drone pose recovered from a detection
/// carries exactly the per-axis σ of the detection noise model.
pub fn sense_markers(
    truth: &DroneTruth,
    world: &World,
    cameras: &[CameraParams],
    noise: &NoiseConfig,
    timestamp: f64,
    rng: &mut DroneRng,
) -> Vec<MarkerDetection> {
    let mut out = Vec::new();
    for cam in cameras {
        let cam_pose = truth.pose.compose(&cam.extrinsics);
        let cam_inv = cam_pose.inverse();
        for marker in &world.markers {
            let rel_true = cam_inv.compose(&marker.pose);
            if !cam.sees(&rel_true.t) {
                continue;
            }
            let dropped = rng.uniform() < noise.dropout;
            let (sp, sa) = noise.detection.sigmas(rel_true.t.norm());
            let dt = rng.normal3() * sp;
            let dr = rng.normal3() * sa;
            if dropped {
                continue;
            }
            let perturb = Pose6D::new(dt, UnitQuaternion::from_scaled_axis(dr));
            let rel_pose = if sp == 0.0 && sa == 0.0 {
                rel_true
            } else {
                perturb.inverse().compose(&rel_true)
            };
            if !cam.sees(&rel_pose.t) {
                continue;
            }
            out.push(MarkerDetection {
                drone_id: truth.drone_id,
                marker_id: marker.id,
                range: rel_pose.t.norm(),
                rel_pose,
                timestamp,
                extrinsics: cam.extrinsics,
            });
        }
    }
    out
}

/// Finite-difference body velocity and Euler rates, plus Gaussian noise.
pub fn sense_odometry(
    prev: &DroneTruth,
    curr: &DroneTruth,
    dt: f64,
    noise: &NoiseConfig,
    timestamp: f64,
    rng: &mut DroneRng,
) -> OdometryReading {
    let world_vel = (curr.pose.t - prev.pose.t) / dt;
    let body_velocity = prev.pose.q.inverse() * world_vel;
    let e0 = prev.pose.euler();
    let e1 = curr.pose.euler();
    let rates = Vector3::from_fn(|i, _| wrap_angle(e1[i] - e0[i]) / dt);
    let nv = rng.normal3() * noise.velocity_sigma;
    let nw = rng.normal3() * noise.rate_sigma;
    OdometryReading {
        drone_id: curr.drone_id,
        body_velocity: body_velocity + nv,
        euler_rates: rates + nw,
        dt,
        timestamp,
    }
}
