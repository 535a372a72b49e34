//! Per-drone extended Kalman filter over `(x, y, z, alpha, beta, gamma)`.
//!
//! Prediction integrates odometry body velocities and Euler rates; the update
//! consumes a full pose observation derived from one known marker (H = I).

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{
    euler_rate_matrix, euler_rotation_partials, euler_to_rotation, skew, wrap_angle, Covariance6,
    FrameId, MarkerId, Pose6D,
};
use crate::mapstore::MapEntry;
use crate::worldsim::{MarkerDetection, OdometryReading};

/// 0.999 quantile of the χ² distribution with 6 degrees of freedom.
pub const CHI2_6_999: f64 = 22.457_744_484_825_323;

/// Smallest per-axis standard deviation reported by [`detection_noise`].
const MIN_SIGMA: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum EkfError {
    #[error("odometry contains non-finite values")]
    NonFiniteOdometry,
    #[error("odometry time step must be positive, got {0}")]
    BadTimeStep(f64),
    #[error("detection of {detected} cannot be matched against map entry {entry}")]
    MarkerMismatch { detected: MarkerId, entry: MarkerId },
    #[error("observation frame {obs} differs from filter frame {state}")]
    FrameMismatch { state: FrameId, obs: FrameId },
}

/// Range-dependent detection noise: `sigma = a + b * range` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionNoiseParams {
    pub a_pos: f64,
    pub b_pos: f64,
    pub a_ang: f64,
    pub b_ang: f64,
}

impl Default for DetectionNoiseParams {
    fn default() -> Self {
        Self {
            a_pos: 0.02,
            b_pos: 0.01,
            a_ang: 0.01,
            b_ang: 0.005,
        }
    }
}

impl DetectionNoiseParams {
    pub fn zero() -> Self {
        Self {
            a_pos: 0.0,
            b_pos: 0.0,
            a_ang: 0.0,
            b_ang: 0.0,
        }
    }

    /// Raw `(position, angle)` standard deviations at `range`.
    pub fn sigmas(&self, range: f64) -> (f64, f64) {
        (
            self.a_pos + self.b_pos * range,
            self.a_ang + self.b_ang * range,
        )
    }

    pub fn is_valid(&self) -> bool {
        [self.a_pos, self.b_pos, self.a_ang, self.b_ang]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
    }
}

/// Diagonal observation covariance for one detection; axes are independent.
pub fn detection_noise(det: &MarkerDetection, params: &DetectionNoiseParams) -> Covariance6 {
    detection_noise_at(det.range, params)
}

pub fn detection_noise_at(range: f64, params: &DetectionNoiseParams) -> Covariance6 {
    let (sp, sa) = params.sigmas(range.max(0.0));
    let vp = sp.max(MIN_SIGMA).powi(2);
    let va = sa.max(MIN_SIGMA).powi(2);
    Covariance6::from_diagonal([vp, vp, vp, va, va, va])
}

/// Covariance of a detection's `(x, y, z, alpha, beta, gamma)` relative pose.
///
/// The per-axis noise perturbs the camera pose, so the marker translation
/// seen from the camera also moves with the attitude error (lever arm
/// `rel.t`), and the Euler angles pick up the attitude error through the
/// rate matrix.
pub fn relative_pose_covariance(rel: &Pose6D, params: &DetectionNoiseParams) -> Covariance6 {
    let base = detection_noise_at(rel.t.norm(), params);
    let e = rel.euler();
    let Some(w_inv) = euler_rate_matrix(e)
        .try_inverse()
        .filter(|_| e[1].cos().abs() > 1e-3)
    else {
        return base;
    };
    let mut j = Matrix6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-Matrix3::identity()));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(&rel.t));
    j.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(-w_inv * rel.rotation().transpose()));
    Covariance6(j * base.0 * j.transpose()).symmetrized()
}

/// Jacobians of `a ∘ b` in `(x, y, z, alpha, beta, gamma)` with respect to
/// the parameters of `a` and of `b`. `None` near gimbal lock of the result.
pub fn compose_jacobians(a: &Pose6D, b: &Pose6D) -> Option<(Matrix6<f64>, Matrix6<f64>)> {
    let c = a.compose(b);
    let ec = c.euler();
    if ec[1].cos().abs() <= 1e-3 {
        return None;
    }
    let wc_inv = euler_rate_matrix(ec).try_inverse()?;
    let wa = euler_rate_matrix(a.euler());
    let wb = euler_rate_matrix(b.euler());
    let ra = a.rotation();
    let rb = b.rotation();
    let mut ja = Matrix6::identity();
    ja.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-ra * skew(&b.t) * wa));
    ja.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(wc_inv * rb.transpose() * wa));
    let mut jb = Matrix6::zeros();
    jb.fixed_view_mut::<3, 3>(0, 0).copy_from(&ra);
    jb.fixed_view_mut::<3, 3>(3, 3).copy_from(&(wc_inv * wb));
    Some((ja, jb))
}

/// First-order covariance of `a ∘ b` for independent `a` and `b`.
///
/// Near gimbal lock this falls back to adding `cov_b` rotated into `a`'s frame.
pub fn compose_covariance(
    a: &Pose6D,
    cov_a: &Covariance6,
    b: &Pose6D,
    cov_b: &Covariance6,
) -> Covariance6 {
    match compose_jacobians(a, b) {
        Some((ja, jb)) => {
            Covariance6(ja * cov_a.0 * ja.transpose() + jb * cov_b.0 * jb.transpose()).symmetrized()
        }
        None => *cov_a + cov_b.transport(&a.rotation()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EkfConfig {
    /// Diagonal process noise per second. When absent it is derived from the
    /// odometry noise and tick length.
    pub process_noise: Option<[f64; 6]>,
    /// Initial per-axis standard deviation. The start pose defines the
    /// drone's frame, so zero is exact.
    pub initial_sigma: [f64; 6],
    pub gating: bool,
    pub gate_threshold: f64,
}

impl Default for EkfConfig {
    fn default() -> Self {
        Self {
            process_noise: None,
            initial_sigma: [0.0; 6],
            gating: true,
            gate_threshold: CHI2_6_999,
        }
    }
}

impl EkfConfig {
    /// Process noise matching white odometry noise sampled every `dt` seconds.
    pub fn matched_process_noise(velocity_sigma: f64, rate_sigma: f64, dt: f64) -> [f64; 6] {
        let qv = velocity_sigma * velocity_sigma * dt;
        let qw = rate_sigma * rate_sigma * dt;
        [qv, qv, qv, qw, qw, qw]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EkfState {
    pub mean: Vector6<f64>,
    pub cov: Covariance6,
    pub frame: FrameId,
    pub timestamp: f64,
    #[serde(default)]
    pub rejected_updates: u64,
}

impl EkfState {
    pub fn new(pose: &Pose6D, cov: Covariance6, frame: FrameId, timestamp: f64) -> Self {
        Self {
            mean: pose.to_vector(),
            cov,
            frame,
            timestamp,
            rejected_updates: 0,
        }
    }

    pub fn pose(&self) -> Pose6D {
        Pose6D::from_vector(&self.mean)
    }

    pub fn euler(&self) -> [f64; 3] {
        [self.mean[3], self.mean[4], self.mean[5]]
    }
}

/// A drone pose observation in its global frame, derived from one marker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseObservation {
    pub pose: Pose6D,
    pub cov: Covariance6,
    pub source_marker: MarkerId,
}

/// The motion map: world-frame integration of body velocity and Euler rates.
pub fn motion_model(
    mean: &Vector6<f64>,
    body_velocity: &Vector3<f64>,
    euler_rates: &Vector3<f64>,
    dt: f64,
) -> Vector6<f64> {
    let e = [mean[3], mean[4], mean[5]];
    let dp = euler_to_rotation(e) * body_velocity * dt;
    let mut out = *mean;
    for i in 0..3 {
        out[i] += dp[i];
        out[3 + i] = wrap_angle(mean[3 + i] + euler_rates[i] * dt);
    }
    out
}

/// Analytic Jacobian of [`motion_model`] with respect to the state.
pub fn motion_jacobian(mean: &Vector6<f64>, body_velocity: &Vector3<f64>, dt: f64) -> Matrix6<f64> {
    let partials = euler_rotation_partials([mean[3], mean[4], mean[5]]);
    let mut f = Matrix6::identity();
    for (j, d) in partials.iter().enumerate() {
        let col = d * body_velocity * dt;
        for i in 0..3 {
            f[(i, 3 + j)] = col[i];
        }
    }
    f
}

pub fn predict(
    state: &EkfState,
    odo: &OdometryReading,
    process_noise: &[f64; 6],
) -> Result<EkfState, EkfError> {
    if !(odo
        .body_velocity
        .iter()
        .chain(odo.euler_rates.iter())
        .all(|v| v.is_finite())
        && odo.dt.is_finite())
    {
        return Err(EkfError::NonFiniteOdometry);
    }
    if odo.dt <= 0.0 {
        return Err(EkfError::BadTimeStep(odo.dt));
    }
    let f = motion_jacobian(&state.mean, &odo.body_velocity, odo.dt);
    let q = Matrix6::from_diagonal(&Vector6::from(*process_noise)) * odo.dt;
    let cov = Covariance6(f * state.cov.0 * f.transpose() + q).symmetrized();
    Ok(EkfState {
        mean: motion_model(&state.mean, &odo.body_velocity, &odo.euler_rates, odo.dt),
        cov,
        frame: state.frame,
        timestamp: odo.timestamp,
        rejected_updates: state.rejected_updates,
    })
}

/// Drone pose implied by seeing a mapped marker, with combined covariance.
///
/// The detection noise and the marker's map covariance are propagated through
/// the pose chain to first order, so the marker's attitude uncertainty shows
/// up in the drone position through the camera-to-marker lever arm.
pub fn observation_from_marker(
    det: &MarkerDetection,
    entry: &MapEntry,
    params: &DetectionNoiseParams,
) -> Result<PoseObservation, EkfError> {
    if det.marker_id != entry.marker_id {
        return Err(EkfError::MarkerMismatch {
            detected: det.marker_id,
            entry: entry.marker_id,
        });
    }
    let camera = entry.pose.compose(&det.rel_pose.inverse());
    let pose = camera.compose(&det.extrinsics.inverse());
    // the detection noise perturbs the camera pose: camera = truth ∘ N
    let zero = Covariance6::zeros();
    let from_map = compose_covariance(&entry.pose, &entry.cov, &det.rel_pose.inverse(), &zero);
    let camera_cov = compose_covariance(
        &camera,
        &from_map,
        &Pose6D::identity(),
        &detection_noise(det, params),
    );
    let cov = compose_covariance(&camera, &camera_cov, &det.extrinsics.inverse(), &zero);
    Ok(PoseObservation {
        pose,
        cov,
        source_marker: det.marker_id,
    })
}

/// Jacobian of the drone pose from [`observation_from_marker`] with respect
/// to the marker's map pose.
pub fn marker_jacobian(det: &MarkerDetection, entry: &MapEntry) -> Option<Matrix6<f64>> {
    let tail = det.rel_pose.inverse().compose(&det.extrinsics.inverse());
    compose_jacobians(&entry.pose, &tail).map(|(ja, _)| ja)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UpdateOutcome {
    Accepted { mahalanobis_sq: f64 },
    Rejected { mahalanobis_sq: f64 },
}

impl UpdateOutcome {
    pub fn accepted(&self) -> bool {
        matches!(self, UpdateOutcome::Accepted { .. })
    }
}

/// Innovation `z - mean` with wrapped angle components.
pub fn innovation(mean: &Vector6<f64>, z: &Vector6<f64>) -> Vector6<f64> {
    let mut r = z - mean;
    for i in 3..6 {
        r[i] = wrap_angle(r[i]);
    }
    r
}

/// EKF update with an identity measurement model (Joseph form).
pub fn update(
    state: &EkfState,
    obs: &PoseObservation,
    config: &EkfConfig,
) -> (EkfState, UpdateOutcome) {
    let (state, outcome, _) = update_correlated(state, obs, &Matrix6::zeros(), config);
    (state, outcome)
}

/// [`update`] for an observation whose error is correlated with the filter
/// error. `cross` is `Cov(mean - truth, obs - truth)`; it is nonzero when the
/// observation comes from a marker that was itself mapped from this drone's
/// estimates. Returns the gain so the caller can carry other correlations
/// forward; the gain is zero on rejection.
pub fn update_correlated(
    state: &EkfState,
    obs: &PoseObservation,
    cross: &Matrix6<f64>,
    config: &EkfConfig,
) -> (EkfState, UpdateOutcome, Matrix6<f64>) {
    let z = obs.pose.to_vector();
    let r = innovation(&state.mean, &z);
    let p = state.cov.0;
    let s = p + obs.cov.0 - cross - cross.transpose();
    let rejected = |d2: f64| {
        let mut out = state.clone();
        out.rejected_updates += 1;
        (
            out,
            UpdateOutcome::Rejected { mahalanobis_sq: d2 },
            Matrix6::zeros(),
        )
    };
    let Some(s_inv) = s.try_inverse() else {
        return rejected(f64::INFINITY);
    };
    let d2 = (r.transpose() * s_inv * r)[(0, 0)];
    if !(d2 >= 0.0) || (config.gating && !(d2 <= config.gate_threshold)) {
        return rejected(d2);
    }
    let k = (p - cross) * s_inv;
    let mut mean = state.mean + k * r;
    for i in 3..6 {
        mean[i] = wrap_angle(mean[i]);
    }
    let ikh = Matrix6::identity() - k;
    let mixed = ikh * cross * k.transpose();
    let cov = Covariance6(
        ikh * p * ikh.transpose() + k * obs.cov.0 * k.transpose() + mixed + mixed.transpose(),
    )
    .symmetrized();
    (
        EkfState {
            mean,
            cov,
            frame: state.frame,
            timestamp: state.timestamp,
            rejected_updates: state.rejected_updates,
        },
        UpdateOutcome::Accepted { mahalanobis_sq: d2 },
        k,
    )
}
