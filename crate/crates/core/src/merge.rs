//! Cross-frame marker matching, rigid frame-to-frame transforms and frame merging.

use std::collections::BTreeSet;

use nalgebra::{Matrix3, Matrix3xX, Matrix6, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ekf::EkfState;
use crate::geom::{quaternion_mean, skew, Covariance6, DroneId, FrameId, MarkerId, Pose6D};
use crate::mapstore::{GlobalMap, MapError};

/// Corrections smaller than this (meters) are not applied by refinement.
pub const REFINE_EPS_POSITION: f64 = 1e-3;
/// Corrections smaller than this (radians) are not applied by refinement.
pub const REFINE_EPS_ANGLE: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum MergeError {
    #[error("at least one matched pair is required")]
    NoPairs,
    #[error("matched poses contain non-finite values")]
    NonFinite,
    #[error("transform maps {from} -> {to}, expected {loser} -> {winner}")]
    WrongDirection {
        from: FrameId,
        to: FrameId,
        loser: FrameId,
        winner: FrameId,
    },
    #[error(transparent)]
    Map(#[from] MapError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMethod {
    /// Orthogonal Procrustes on centered positions.
    Kabsch,
    /// Averaged per-pair full-pose candidates.
    Orientation,
}

/// Rigid `b -> a` transform fitted to matched pose pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct RigidEstimate {
    pub rt: Pose6D,
    pub residual: f64,
    pub support: usize,
    /// Least-squares scale diagnostic; a metric map should stay near 1.
    pub scale: f64,
    pub method: EstimateMethod,
}

impl RigidEstimate {
    pub fn scale_plausible(&self) -> bool {
        (0.95..=1.05).contains(&self.scale)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTransform {
    pub from: FrameId,
    pub to: FrameId,
    /// Maps `from` coordinates into `to` coordinates.
    pub rt: Pose6D,
    pub residual: f64,
    pub support: usize,
    pub scale: f64,
    /// Uncertainty of `rt`, expressed about `pivot`.
    pub cov: Covariance6,
    /// Centroid of the matched markers in `to` coordinates.
    pub pivot: [f64; 3],
}

impl FrameTransform {
    /// Transform in the opposite direction (covariance and pivot re-expressed).
    pub fn reversed(&self) -> FrameTransform {
        let inv = self.rt.inverse();
        let pivot = inv.transform_point(&Vector3::from(self.pivot));
        FrameTransform {
            from: self.to,
            to: self.from,
            rt: inv,
            residual: self.residual,
            support: self.support,
            scale: if self.scale > 0.0 {
                1.0 / self.scale
            } else {
                self.scale
            },
            cov: self.cov.transport(&inv.rotation()),
            pivot: [pivot.x, pivot.y, pivot.z],
        }
    }

    /// Re-expresses a filter state held in `from` coordinates.
    ///
    /// The transform's own uncertainty is added with a lever arm from the pivot.
    pub fn apply_to_state(&self, state: &EkfState) -> EkfState {
        let pose = self.rt.compose(&state.pose());
        let lever = pose.t - Vector3::from(self.pivot);
        let mut j = Matrix6::identity();
        j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&lever)));
        let cov = state.cov.transport(&self.rt.rotation()).0 + j * self.cov.0 * j.transpose();
        EkfState {
            mean: pose.to_vector(),
            cov: Covariance6(cov).symmetrized(),
            frame: self.to,
            timestamp: state.timestamp,
            rejected_updates: state.rejected_updates,
        }
    }
}

/// A cross-frame observation waiting to be matched.
#[derive(Clone, Debug, PartialEq)]
pub struct PendingObservation {
    pub frame: FrameId,
    pub marker: MarkerId,
}

/// Marker ids mapped in `frame_a` that `frame_b` has observed (or mapped).
pub fn find_matches(
    map: &GlobalMap,
    frame_a: FrameId,
    frame_b: FrameId,
    pending: &[PendingObservation],
) -> Vec<MarkerId> {
    let seen_by_b: BTreeSet<MarkerId> = pending
        .iter()
        .filter(|p| p.frame == frame_b)
        .map(|p| p.marker)
        .chain(map.entries_in(frame_b).map(|e| e.marker_id))
        .collect();
    map.entries_in(frame_a)
        .map(|e| e.marker_id)
        .filter(|id| seen_by_b.contains(id))
        .collect()
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().fold(Vector3::zeros(), |acc, p| acc + p) / points.len() as f64
}

/// Fits the rigid transform `rt` with `pose_in_a ≈ rt ∘ pose_in_b`.
///
/// Three or more pairs with non-collinear positions use Kabsch on the
/// positions; anything else averages the per-pair candidates
/// `pose_in_a ∘ pose_in_b⁻¹` (chordal quaternion mean, then the
/// least-squares translation for that rotation).
pub fn estimate_transform(pairs: &[(Pose6D, Pose6D)]) -> Result<RigidEstimate, MergeError> {
    if pairs.is_empty() {
        return Err(MergeError::NoPairs);
    }
    if pairs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(MergeError::NonFinite);
    }
    let pa: Vec<Vector3<f64>> = pairs.iter().map(|(a, _)| a.t).collect();
    let pb: Vec<Vector3<f64>> = pairs.iter().map(|(_, b)| b.t).collect();
    let ca = centroid(&pa);
    let cb = centroid(&pb);
    let da: Vec<Vector3<f64>> = pa.iter().map(|p| p - ca).collect();
    let db: Vec<Vector3<f64>> = pb.iter().map(|p| p - cb).collect();
    let spread_a: f64 = da.iter().map(|d| d.norm_squared()).sum();
    let spread_b: f64 = db.iter().map(|d| d.norm_squared()).sum();

    let planar_enough = pairs.len() >= 3 && {
        let sv = Matrix3xX::from_columns(&db)
            .svd(false, false)
            .singular_values;
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|x, y| y.total_cmp(x));
        s[0] > 1e-9 && s[1] > 1e-9 * s[0].max(1.0)
    };

    let (rt, scale, method) = if planar_enough {
        let mut h = Matrix3::zeros();
        for (x, y) in db.iter().zip(&da) {
            h += x * y.transpose();
        }
        let svd = h.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let v = v_t.transpose();
        let d = (v * u.transpose()).determinant().signum();
        let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
        let r = v * fix * u.transpose();
        let sv = svd.singular_values;
        // singular values come sorted descending; the sign fix hits the smallest
        let traced = sv[0] + sv[1] + d * sv[2];
        let scale = if spread_b > 0.0 {
            traced / spread_b
        } else {
            1.0
        };
        let q = nalgebra::UnitQuaternion::from_rotation_matrix(
            &nalgebra::Rotation3::from_matrix_unchecked(r),
        );
        let t = ca - q * cb;
        (Pose6D::new(t, q), scale, EstimateMethod::Kabsch)
    } else {
        let qs: Vec<_> = pairs
            .iter()
            .map(|(a, b)| a.compose(&b.inverse()).q)
            .collect();
        let q = quaternion_mean(&qs).ok_or(MergeError::NoPairs)?;
        let t = ca - q * cb;
        let scale = if spread_b > 1e-18 {
            (spread_a / spread_b).sqrt()
        } else {
            1.0
        };
        (Pose6D::new(t, q), scale, EstimateMethod::Orientation)
    };

    let residual = rms_residual(&rt, pairs);
    if !(0.95..=1.05).contains(&scale) {
        log::warn!("frame alignment scale diagnostic {scale:.4} outside [0.95, 1.05]");
    }
    Ok(RigidEstimate {
        rt,
        residual,
        support: pairs.len(),
        scale,
        method,
    })
}

/// RMS position error of `rt ∘ b` against `a` over the pairs.
pub fn rms_residual(rt: &Pose6D, pairs: &[(Pose6D, Pose6D)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let sum: f64 = pairs
        .iter()
        .map(|(a, b)| (a.t - rt.transform_point(&b.t)).norm_squared())
        .sum();
    (sum / pairs.len() as f64).sqrt()
}

/// Outcome of [`merge_frames`], broadcast so nodes can remap their filters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeNotice {
    pub winner: FrameId,
    pub loser: FrameId,
    pub transform: FrameTransform,
    pub moved_markers: Vec<MarkerId>,
    pub reassigned_drones: Vec<DroneId>,
}

/// Folds `loser` into `winner` using `transform` (which maps loser -> winner).
///
/// Marker ids are unique across the store, so the two frames never hold the
/// same marker and no duplicate fusion is needed here.
pub fn merge_frames(
    map: &mut GlobalMap,
    winner: FrameId,
    loser: FrameId,
    transform: &FrameTransform,
) -> Result<MergeNotice, MergeError> {
    if winner == loser {
        return Err(MapError::SelfMerge(winner).into());
    }
    if transform.from != loser || transform.to != winner {
        return Err(MergeError::WrongDirection {
            from: transform.from,
            to: transform.to,
            loser,
            winner,
        });
    }
    let (moved_markers, reassigned_drones) = map.absorb_frame(winner, loser, &transform.rt)?;
    Ok(MergeNotice {
        winner,
        loser,
        transform: transform.clone(),
        moved_markers,
        reassigned_drones,
    })
}

/// One matched marker: its pose in winner coordinates and in the original
/// loser coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub marker: MarkerId,
    pub in_winner: Pose6D,
    pub in_loser: Pose6D,
}

/// Bookkeeping for one merge, kept so the transform can be refined when the
/// two former frames share more markers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub winner: FrameId,
    pub loser: FrameId,
    /// Transform currently applied to the loser's markers.
    pub applied: Pose6D,
    pub pairs: Vec<MatchPair>,
    pub new_pairs: Vec<MatchPair>,
    pub winner_markers: BTreeSet<MarkerId>,
    pub loser_markers: BTreeSet<MarkerId>,
    pub winner_drones: BTreeSet<DroneId>,
    pub loser_drones: BTreeSet<DroneId>,
}

impl MergeRecord {
    fn has_pair(&self, marker: MarkerId) -> bool {
        self.pairs
            .iter()
            .chain(&self.new_pairs)
            .any(|p| p.marker == marker)
    }

    /// Offers an observation made after the merge (poses in current winner
    /// coordinates). Returns true if it forms a new cross-frame match.
    pub fn offer(
        &mut self,
        drone: DroneId,
        marker: MarkerId,
        observed: &Pose6D,
        entry: &Pose6D,
    ) -> bool {
        if self.has_pair(marker) {
            return false;
        }
        let to_loser = self.applied.inverse();
        let pair = if self.loser_drones.contains(&drone) && self.winner_markers.contains(&marker) {
            MatchPair {
                marker,
                in_winner: *entry,
                in_loser: to_loser.compose(observed),
            }
        } else if self.winner_drones.contains(&drone) && self.loser_markers.contains(&marker) {
            MatchPair {
                marker,
                in_winner: *observed,
                in_loser: to_loser.compose(entry),
            }
        } else {
            return false;
        };
        self.new_pairs.push(pair);
        true
    }

    /// Follows the winner frame into a later merge.
    pub fn rebase(&mut self, loser: FrameId, winner: FrameId, rt: &Pose6D) {
        if self.winner != loser {
            return;
        }
        self.winner = winner;
        self.applied = rt.compose(&self.applied);
        for p in self.pairs.iter_mut().chain(self.new_pairs.iter_mut()) {
            p.in_winner = rt.compose(&p.in_winner);
        }
    }

    fn all_pairs(&self) -> Vec<(Pose6D, Pose6D)> {
        self.pairs
            .iter()
            .chain(&self.new_pairs)
            .map(|p| (p.in_winner, p.in_loser))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub winner: FrameId,
    pub loser: FrameId,
    /// Correction applied on top of the previous transform (winner coordinates).
    pub delta: Pose6D,
    pub residual_before: f64,
    pub residual_after: f64,
    pub support: usize,
    pub moved_markers: Vec<MarkerId>,
}

/// Re-estimates a merge transform once new matches have appeared.
///
/// The correction is applied to the former loser markers only when it beats
/// the current transform on the enlarged match set and exceeds the
/// `REFINE_EPS_*` thresholds.
pub fn refine_transform(map: &mut GlobalMap, record: &mut MergeRecord) -> Option<Refinement> {
    if record.new_pairs.is_empty() {
        return None;
    }
    let pairs = record.all_pairs();
    record.pairs.append(&mut record.new_pairs);
    let residual_before = rms_residual(&record.applied, &pairs);
    let est = estimate_transform(&pairs).ok()?;
    if est.residual > residual_before {
        return None;
    }
    let delta = est.rt.compose(&record.applied.inverse());
    if delta.t.norm() <= REFINE_EPS_POSITION && delta.q.angle() <= REFINE_EPS_ANGLE {
        return None;
    }
    let moved: Vec<MarkerId> = record
        .loser_markers
        .iter()
        .copied()
        .filter(|id| map.lookup(*id).is_some_and(|e| e.frame == record.winner))
        .collect();
    map.retransform(&moved, &delta);
    record.applied = est.rt;
    Some(Refinement {
        winner: record.winner,
        loser: record.loser,
        delta,
        residual_before,
        residual_after: est.residual,
        support: est.support,
        moved_markers: moved,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapstore::MapConfig;
    use std::f64::consts::FRAC_PI_2;

    fn marker_pose(x: f64, y: f64, z: f64) -> Pose6D {
        Pose6D::from_euler([x, y, z], [FRAC_PI_2, 0.0, -FRAC_PI_2])
    }

    fn two_frame_map() -> GlobalMap {
        let mut m = GlobalMap::new(&MapConfig::default());
        m.register_drone(DroneId(0), FrameId(0)).unwrap();
        m.register_drone(DroneId(1), FrameId(1)).unwrap();
        m
    }

    #[test]
    fn matches_are_sorted_intersection() {
        let mut m = two_frame_map();
        for id in [3, 9, 14, 20] {
            m.insert_marker(
                FrameId(0),
                MarkerId(id),
                Pose6D::identity(),
                Covariance6::zeros(),
                0.0,
            )
            .unwrap();
        }
        let pending: Vec<_> = [14, 3, 9, 30]
            .iter()
            .map(|&id| PendingObservation {
                frame: FrameId(1),
                marker: MarkerId(id),
            })
            .collect();
        assert_eq!(
            find_matches(&m, FrameId(0), FrameId(1), &pending),
            vec![MarkerId(3), MarkerId(9), MarkerId(14)]
        );
        assert!(find_matches(&m, FrameId(0), FrameId(1), &[]).is_empty());
    }

    #[test]
    fn identity_related_frames() {
        let pairs: Vec<_> = [[0.0, 0.0, 1.0], [2.0, 0.0, 1.0], [0.0, 3.0, 2.0]]
            .iter()
            .map(|p| (marker_pose(p[0], p[1], p[2]), marker_pose(p[0], p[1], p[2])))
            .collect();
        let est = estimate_transform(&pairs).unwrap();
        assert_eq!(est.method, EstimateMethod::Kabsch);
        assert!(est.rt.t.norm() < 1e-12 && est.rt.q.angle() < 1e-12);
        assert!(est.residual < 1e-12);
        assert!((est.scale - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_pair_uses_orientation() {
        let rt = Pose6D::from_euler([1.0, -2.0, 0.5], [0.0, 0.0, 0.7]);
        let b = marker_pose(1.0, 1.0, 1.0);
        let est = estimate_transform(&[(rt.compose(&b), b)]).unwrap();
        assert_eq!(est.method, EstimateMethod::Orientation);
        let (dt, da) = est.rt.distance_to(&rt);
        assert!(dt < 1e-12 && da < 1e-12);
        assert_eq!(estimate_transform(&[]), Err(MergeError::NoPairs));
    }

    #[test]
    fn reflection_is_corrected() {
        // a mirrored point set still yields a proper rotation
        let b = [
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [1.0, 1.0, 1.0],
        ];
        let pairs: Vec<_> = b
            .iter()
            .map(|p| {
                (
                    Pose6D::from_translation(p[0], p[1], -p[2]),
                    Pose6D::from_translation(p[0], p[1], p[2]),
                )
            })
            .collect();
        let est = estimate_transform(&pairs).unwrap();
        assert!((est.rt.rotation().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wrong_direction_is_rejected() {
        let mut m = two_frame_map();
        let ft = FrameTransform {
            from: FrameId(0),
            to: FrameId(1),
            rt: Pose6D::identity(),
            residual: 0.0,
            support: 1,
            scale: 1.0,
            cov: Covariance6::zeros(),
            pivot: [0.0; 3],
        };
        assert!(matches!(
            merge_frames(&mut m, FrameId(0), FrameId(1), &ft),
            Err(MergeError::WrongDirection { .. })
        ));
        assert_eq!(
            merge_frames(&mut m, FrameId(0), FrameId(0), &ft),
            Err(MergeError::Map(MapError::SelfMerge(FrameId(0))))
        );
    }

    #[test]
    fn empty_loser_just_disappears() {
        let mut m = GlobalMap::new(&MapConfig::default());
        m.register_drone(DroneId(0), FrameId(0)).unwrap();
        m.register_drone(DroneId(1), FrameId(1)).unwrap();
        m.insert_marker(
            FrameId(0),
            MarkerId(1),
            marker_pose(1.0, 0.0, 1.0),
            Covariance6::zeros(),
            0.0,
        )
        .unwrap();
        let before = m.lookup(MarkerId(1)).cloned();
        let ft = FrameTransform {
            from: FrameId(1),
            to: FrameId(0),
            rt: Pose6D::from_translation(3.0, 0.0, 0.0),
            residual: 0.0,
            support: 1,
            scale: 1.0,
            cov: Covariance6::zeros(),
            pivot: [0.0; 3],
        };
        let n = merge_frames(&mut m, FrameId(0), FrameId(1), &ft).unwrap();
        assert!(n.moved_markers.is_empty());
        assert_eq!(m.live_frames().len(), 1);
        assert_eq!(m.lookup(MarkerId(1)).cloned(), before);
    }

    #[test]
    fn apply_to_state_maps_mean() {
        let ft = FrameTransform {
            from: FrameId(1),
            to: FrameId(0),
            rt: Pose6D::from_euler([1.0, 0.0, 0.0], [0.0, 0.0, FRAC_PI_2]),
            residual: 0.0,
            support: 1,
            scale: 1.0,
            cov: Covariance6::zeros(),
            pivot: [0.0; 3],
        };
        let s = EkfState::new(
            &Pose6D::from_translation(1.0, 0.0, 0.0),
            Covariance6::from_diagonal([1.0, 2.0, 3.0, 0.1, 0.1, 0.1]),
            FrameId(1),
            0.0,
        );
        let out = ft.apply_to_state(&s);
        assert_eq!(out.frame, FrameId(0));
        assert!((out.pose().t - Vector3::new(1.0, 1.0, 0.0)).norm() < 1e-12);
        assert!((out.cov.0[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((out.mean[5] - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn refine_without_new_pairs_is_noop() {
        let mut m = two_frame_map();
        let mut rec = MergeRecord {
            winner: FrameId(0),
            loser: FrameId(1),
            applied: Pose6D::identity(),
            pairs: vec![],
            new_pairs: vec![],
            winner_markers: BTreeSet::new(),
            loser_markers: BTreeSet::new(),
            winner_drones: BTreeSet::new(),
            loser_drones: BTreeSet::new(),
        };
        assert!(refine_transform(&mut m, &mut rec).is_none());
    }
}
