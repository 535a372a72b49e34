//! The shared marker map: one entry per marker, each bound to a coordinate frame.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix3, Matrix6, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Covariance6, DroneId, FrameId, MarkerId, Pose6D};

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("marker {0} is already mapped")]
    DuplicateMarker(MarkerId),
    #[error("marker id {0} is outside 0..=1023")]
    InvalidMarkerId(MarkerId),
    #[error("marker {0} is not mapped")]
    MissingMarker(MarkerId),
    #[error("frame {0} is not live")]
    DeadFrame(FrameId),
    #[error("{0} is already registered")]
    DroneExists(DroneId),
    #[error("{0} is not registered")]
    UnknownDrone(DroneId),
    #[error("cannot merge frame {0} with itself")]
    SelfMerge(FrameId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    /// Observations fused into a new marker before its pose is frozen.
    pub fuse_limit: u32,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self { fuse_limit: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapEntry {
    pub marker_id: MarkerId,
    pub frame: FrameId,
    pub pose: Pose6D,
    pub cov: Covariance6,
    pub obs_count: u32,
    pub last_seen: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FuseOutcome {
    Fused,
    Frozen,
}

/// Entries keyed by marker id plus frame membership of every drone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalMap {
    entries: BTreeMap<MarkerId, MapEntry>,
    frames: BTreeMap<FrameId, BTreeSet<DroneId>>,
    fuse_limit: u32,
}

impl GlobalMap {
    pub fn new(config: &MapConfig) -> Self {
        Self {
            entries: BTreeMap::new(),
            frames: BTreeMap::new(),
            fuse_limit: config.fuse_limit,
        }
    }

    pub fn fuse_limit(&self) -> u32 {
        self.fuse_limit
    }

    /// Creates `frame` (if needed) and places `drone` in it.
    pub fn register_drone(&mut self, drone: DroneId, frame: FrameId) -> Result<(), MapError> {
        if self.frame_of(drone).is_some() {
            return Err(MapError::DroneExists(drone));
        }
        self.frames.entry(frame).or_default().insert(drone);
        Ok(())
    }

    pub fn frame_of(&self, drone: DroneId) -> Option<FrameId> {
        self.frames
            .iter()
            .find(|(_, ds)| ds.contains(&drone))
            .map(|(f, _)| *f)
    }

    pub fn is_live(&self, frame: FrameId) -> bool {
        self.frames.contains_key(&frame)
    }

    pub fn live_frames(&self) -> Vec<FrameId> {
        self.frames.keys().copied().collect()
    }

    pub fn drones_in(&self, frame: FrameId) -> Vec<DroneId> {
        self.frames
            .get(&frame)
            .map(|d| d.iter().copied().collect())
            .unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, marker: MarkerId) -> Option<&MapEntry> {
        self.entries.get(&marker)
    }

    pub fn entries(&self) -> impl Iterator<Item = &MapEntry> {
        self.entries.values()
    }

    pub fn entries_in(&self, frame: FrameId) -> impl Iterator<Item = &MapEntry> {
        self.entries.values().filter(move |e| e.frame == frame)
    }

    pub fn snapshot(&self) -> Vec<MapEntry> {
        self.entries.values().cloned().collect()
    }

    pub fn insert_marker(
        &mut self,
        frame: FrameId,
        marker: MarkerId,
        pose: Pose6D,
        cov: Covariance6,
        t: f64,
    ) -> Result<(), MapError> {
        if !marker.is_valid() {
            return Err(MapError::InvalidMarkerId(marker));
        }
        if !self.is_live(frame) {
            return Err(MapError::DeadFrame(frame));
        }
        if self.entries.contains_key(&marker) {
            return Err(MapError::DuplicateMarker(marker));
        }
        self.entries.insert(
            marker,
            MapEntry {
                marker_id: marker,
                frame,
                pose,
                cov: cov.symmetrized(),
                obs_count: 1,
                last_seen: t,
            },
        );
        Ok(())
    }

    /// Fuses a new observation (already in the entry's frame) into a marker.
    /// Once `fuse_limit` observations have been absorbed the pose is frozen
    /// and only `last_seen` moves.
    pub fn fuse_observation(
        &mut self,
        marker: MarkerId,
        pose: &Pose6D,
        cov: &Covariance6,
        t: f64,
    ) -> Result<FuseOutcome, MapError> {
        let limit = self.fuse_limit;
        let entry = self
            .entries
            .get_mut(&marker)
            .ok_or(MapError::MissingMarker(marker))?;
        entry.last_seen = entry.last_seen.max(t);
        if entry.obs_count >= limit {
            return Ok(FuseOutcome::Frozen);
        }
        let (p, c) = fuse_poses(&entry.pose, &entry.cov, pose, cov);
        entry.pose = p;
        entry.cov = c;
        entry.obs_count += 1;
        Ok(FuseOutcome::Fused)
    }

    /// Overwrites an entry's pose, e.g. after bundle adjustment.
    pub fn set_pose(&mut self, marker: MarkerId, pose: Pose6D) -> Result<(), MapError> {
        let entry = self
            .entries
            .get_mut(&marker)
            .ok_or(MapError::MissingMarker(marker))?;
        entry.pose = pose;
        Ok(())
    }

    /// Replaces an entry's pose and covariance, as after bundle adjustment.
    pub fn set_estimate(
        &mut self,
        marker: MarkerId,
        pose: Pose6D,
        cov: Covariance6,
    ) -> Result<(), MapError> {
        let entry = self
            .entries
            .get_mut(&marker)
            .ok_or(MapError::MissingMarker(marker))?;
        entry.pose = pose;
        entry.cov = cov;
        Ok(())
    }

    /// Re-expresses every entry of `loser` in `winner` coordinates through
    /// `rt` and moves the loser's drones. Returns the moved marker ids and drones.
    pub(crate) fn absorb_frame(
        &mut self,
        winner: FrameId,
        loser: FrameId,
        rt: &Pose6D,
    ) -> Result<(Vec<MarkerId>, Vec<DroneId>), MapError> {
        if winner == loser {
            return Err(MapError::SelfMerge(winner));
        }
        if !self.is_live(winner) {
            return Err(MapError::DeadFrame(winner));
        }
        let drones = self
            .frames
            .remove(&loser)
            .ok_or(MapError::DeadFrame(loser))?;
        let rot = rt.rotation();
        let mut moved = Vec::new();
        for e in self.entries.values_mut().filter(|e| e.frame == loser) {
            e.pose = rt.compose(&e.pose);
            e.cov = e.cov.transport(&rot);
            e.frame = winner;
            moved.push(e.marker_id);
        }
        let set = self.frames.entry(winner).or_default();
        set.extend(drones.iter().copied());
        Ok((moved, drones.into_iter().collect()))
    }

    /// Applies `delta ∘ pose` to the listed entries (frame unchanged).
    pub(crate) fn retransform(&mut self, markers: &[MarkerId], delta: &Pose6D) {
        let rot = delta.rotation();
        for id in markers {
            if let Some(e) = self.entries.get_mut(id) {
                e.pose = delta.compose(&e.pose);
                e.cov = e.cov.transport(&rot);
            }
        }
    }

    /// Checks store-wide invariants; returns a description of the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for (frame, drones) in &self.frames {
            for d in drones {
                if !seen.insert(*d) {
                    return Err(format!(
                        "{d} belongs to more than one frame (second: {frame})"
                    ));
                }
            }
        }
        for (id, e) in &self.entries {
            if *id != e.marker_id {
                return Err(format!("entry keyed {id} holds {}", e.marker_id));
            }
            if !self.is_live(e.frame) {
                return Err(format!("{id} bound to dead frame {}", e.frame));
            }
            if !e.cov.is_psd(1e-9) {
                return Err(format!("{id} covariance not PSD"));
            }
        }
        Ok(())
    }
}

/// Fuses two independent estimates of one marker pose.
///
/// Position: information-weighted, computed in the equivalent gain form
/// `Σ = Σa (Σa + Σb)⁻¹ Σb` so one exact (zero-covariance) input is allowed.
/// Orientation: spherical interpolation toward `b` with weight
/// `tr(Σa_ang) / (tr(Σa_ang) + tr(Σb_ang))`. Position/angle cross terms are dropped.
pub fn fuse_poses(
    a: &Pose6D,
    a_cov: &Covariance6,
    b: &Pose6D,
    b_cov: &Covariance6,
) -> (Pose6D, Covariance6) {
    let (pos_cov, gain) = fuse_block(&a_cov.position_block(), &b_cov.position_block());
    let t = a.t + gain * (b.t - a.t);
    let (ang_cov, _) = fuse_block(&a_cov.angle_block(), &b_cov.angle_block());

    let ta = a_cov.angle_block().trace();
    let tb = b_cov.angle_block().trace();
    let w = if ta + tb > 0.0 { ta / (ta + tb) } else { 0.5 };
    let q =
        a.q.try_slerp(&b.q, w, 1e-12)
            .unwrap_or(if w < 0.5 { a.q } else { b.q });

    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&pos_cov);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&ang_cov);
    (Pose6D::new(t, q), Covariance6(m))
}

/// Returns the fused covariance and the gain `Σa (Σa + Σb)⁺`.
///
/// The pseudo-inverse handles singular inputs: along a direction where both
/// are exact the gain is zero and `a` is kept.
fn fuse_block(a: &Matrix3<f64>, b: &Matrix3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    let sum = SymmetricEigen::new(0.5 * (a + b + (a + b).transpose()));
    let tol = 1e-12 * sum.eigenvalues.amax();
    let inv_values = sum.eigenvalues.map(|l| if l > tol { 1.0 / l } else { 0.0 });
    let inv = sum.eigenvectors * Matrix3::from_diagonal(&inv_values) * sum.eigenvectors.transpose();
    let gain = a * inv;
    let fused = gain * b;
    (0.5 * (fused + fused.transpose()), gain)
}
