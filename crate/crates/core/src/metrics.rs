//! Ground-truth error metrics for a finished run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geom::{DroneId, FrameId, MarkerId, Pose6D};
use crate::mapstore::MapEntry;
use crate::merge::estimate_transform;
use crate::report::{FrameLink, FrameOrigin, RunReport, TrajectorySample};
use crate::swarm::station::BaRun;
use crate::worldsim::Marker;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: FrameId,
    pub markers: usize,
    /// Fitted transform taking this frame's coordinates to world coordinates.
    pub alignment: Option<Pose6D>,
    pub position_rmse: Option<f64>,
    pub orientation_rmse: Option<f64>,
    /// Position RMSE when the frame is placed at its true origin instead of fitted.
    pub origin_position_rmse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroneMetrics {
    pub drone_id: DroneId,
    pub samples: usize,
    /// Absolute trajectory error (position RMSE) after alignment.
    pub ate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub marker_count: usize,
    pub frames_remaining: usize,
    pub marker_position_rmse: Option<f64>,
    pub marker_orientation_rmse: Option<f64>,
    pub origin_position_rmse: Option<f64>,
    pub per_frame: Vec<FrameMetrics>,
    pub drones: Vec<DroneMetrics>,
    pub merge_count: usize,
    pub refinement_count: usize,
    pub ba_runs: usize,
    pub ba_iterations: usize,
}

impl Metrics {
    pub fn empty() -> Self {
        Self {
            marker_count: 0,
            frames_remaining: 0,
            marker_position_rmse: None,
            marker_orientation_rmse: None,
            origin_position_rmse: None,
            per_frame: Vec::new(),
            drones: Vec::new(),
            merge_count: 0,
            refinement_count: 0,
            ba_runs: 0,
            ba_iterations: 0,
        }
    }
}

fn rms(sum_sq: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| (sum_sq / n as f64).sqrt())
}

/// Errors of a map against the true marker poses, one frame at a time.
///
/// Each frame is aligned to the world with a rigid fit over all of its
/// markers; the pooled figures combine the per-frame residuals.
pub fn marker_metrics(
    map: &[MapEntry],
    truth: &[Marker],
    live_frames: &[FrameId],
    origins: &[FrameOrigin],
) -> Vec<FrameMetrics> {
    let truth: BTreeMap<MarkerId, Pose6D> = truth.iter().map(|m| (m.id, m.pose)).collect();
    let origin: BTreeMap<FrameId, Pose6D> = origins.iter().map(|o| (o.frame, o.pose)).collect();
    let mut frames: Vec<FrameId> = live_frames.to_vec();
    frames.extend(map.iter().map(|e| e.frame));
    frames.sort();
    frames.dedup();
    frames
        .into_iter()
        .map(|frame| {
            let pairs: Vec<(Pose6D, Pose6D)> = map
                .iter()
                .filter(|e| e.frame == frame)
                .filter_map(|e| truth.get(&e.marker_id).map(|t| (*t, e.pose)))
                .collect();
            let alignment = estimate_transform(&pairs).ok().map(|e| e.rt);
            let (mut sp, mut so) = (0.0, 0.0);
            if let Some(a) = &alignment {
                for (t, e) in &pairs {
                    let aligned = a.compose(e);
                    sp += (t.t - aligned.t).norm_squared();
                    so += (t.q.inverse() * aligned.q).angle().powi(2);
                }
            }
            let origin_rmse = origin.get(&frame).and_then(|o| {
                let s: f64 = pairs
                    .iter()
                    .map(|(t, e)| (t.t - o.transform_point(&e.t)).norm_squared())
                    .sum();
                rms(s, pairs.len())
            });
            FrameMetrics {
                frame,
                markers: pairs.len(),
                position_rmse: alignment.and_then(|_| rms(sp, pairs.len())),
                orientation_rmse: alignment.and_then(|_| rms(so, pairs.len())),
                alignment,
                origin_position_rmse: origin_rmse,
            }
        })
        .collect()
}

fn resolve(chain: &[FrameLink], frame: FrameId) -> (FrameId, Pose6D) {
    chain
        .iter()
        .find(|l| l.from == frame)
        .map(|l| (l.to, l.rt))
        .unwrap_or((frame, Pose6D::identity()))
}

/// Per-drone trajectory error, with each estimate carried into its final
/// frame and then into the world by that frame's alignment (or its true
/// origin when the frame holds no markers).
pub fn trajectory_metrics(
    samples: &[TrajectorySample],
    chain: &[FrameLink],
    frames: &[FrameMetrics],
    origins: &[FrameOrigin],
) -> Vec<DroneMetrics> {
    let mut acc: BTreeMap<DroneId, (f64, usize)> = BTreeMap::new();
    for s in samples {
        let (live, to_live) = resolve(chain, s.frame);
        let to_world = frames
            .iter()
            .find(|f| f.frame == live)
            .and_then(|f| f.alignment)
            .or_else(|| origins.iter().find(|o| o.frame == live).map(|o| o.pose));
        let slot = acc.entry(s.drone_id).or_insert((0.0, 0));
        if let Some(w) = to_world {
            let p = w.compose(&to_live).transform_point(&s.estimate.t);
            slot.0 += (s.truth.t - p).norm_squared();
            slot.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(drone_id, (sum, n))| DroneMetrics {
            drone_id,
            samples: n,
            ate: rms(sum, n),
        })
        .collect()
}

pub fn compute_metrics(report: &RunReport) -> Metrics {
    let per_frame = marker_metrics(
        &report.final_map,
        &report.truth_markers,
        &report.live_frames,
        &report.frame_origins,
    );
    let drones = trajectory_metrics(
        &report.trajectories,
        &report.frame_chain,
        &per_frame,
        &report.frame_origins,
    );
    let n: usize = per_frame
        .iter()
        .filter(|f| f.alignment.is_some())
        .map(|f| f.markers)
        .sum();
    let pooled = |get: fn(&FrameMetrics) -> Option<f64>| {
        let s: f64 = per_frame
            .iter()
            .filter_map(|f| get(f).map(|r| r * r * f.markers as f64))
            .sum();
        rms(s, n)
    };
    let n_origin: usize = per_frame
        .iter()
        .filter(|f| f.origin_position_rmse.is_some())
        .map(|f| f.markers)
        .sum();
    let s_origin: f64 = per_frame
        .iter()
        .filter_map(|f| f.origin_position_rmse.map(|r| r * r * f.markers as f64))
        .sum();
    Metrics {
        marker_count: report.final_map.len(),
        frames_remaining: report.live_frames.len(),
        marker_position_rmse: pooled(|f| f.position_rmse),
        marker_orientation_rmse: pooled(|f| f.orientation_rmse),
        origin_position_rmse: rms(s_origin, n_origin),
        per_frame,
        drones,
        merge_count: report.merges.len(),
        refinement_count: report.refinements.len(),
        ba_runs: report.ba_runs.iter().filter(|r| r.report.is_some()).count(),
        ba_iterations: report
            .ba_runs
            .iter()
            .filter_map(|r: &BaRun| r.report.as_ref().map(|b| b.iterations))
            .sum(),
    }
}
