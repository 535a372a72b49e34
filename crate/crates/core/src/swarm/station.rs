//! The ground station: map building, frame merging, keypose log and
//! bundle adjustment, driven by one serialized message queue.

use std::collections::{BTreeMap, BTreeSet};

use crossbeam_channel::Receiver;
use nalgebra::{Matrix6, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::ba::{optimize, BaConfig, BaProblem, BaReport, Keypose};
use crate::ekf::{compose_covariance, detection_noise, DetectionNoiseParams, EkfState};
use crate::geom::{quaternion_mean, Covariance6, DroneId, FrameId, MarkerId, Pose6D};
use crate::mapstore::{GlobalMap, MapConfig};
use crate::merge::{
    estimate_transform, find_matches, merge_frames, refine_transform, FrameTransform, MatchPair,
    MergeNotice, MergeRecord, PendingObservation, Refinement,
};
use crate::swarm::protocol::{
    decode, encode, Envelope, ProtocolMessage, Sender, SeqGuard, Sequencer,
};
use crate::swarm::transport::LineSink;
use crate::worldsim::MarkerDetection;

#[derive(Clone, Debug, PartialEq)]
pub struct StationConfig {
    pub map: MapConfig,
    pub ba: BaConfig,
    pub detection: DetectionNoiseParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub time: f64,
    /// Drone whose observation closed the gap between the frames.
    pub drone: DroneId,
    pub marker: MarkerId,
    pub notice: MergeNotice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementEvent {
    pub time: f64,
    pub refinement: Refinement,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaTrigger {
    Merge,
    Keyposes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaRun {
    pub time: f64,
    pub frame: FrameId,
    pub trigger: BaTrigger,
    pub keyposes: usize,
    pub markers: usize,
    pub report: Option<BaReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StationLog {
    pub merges: Vec<MergeEvent>,
    pub refinements: Vec<RefinementEvent>,
    pub ba_runs: Vec<BaRun>,
    pub handled: u64,
    pub dropped: u64,
}

pub struct GroundStation {
    map: GlobalMap,
    config: StationConfig,
    keyposes: Vec<Keypose>,
    since_ba: usize,
    guard: SeqGuard,
    seq: Sequencer,
    outboxes: BTreeMap<DroneId, Box<dyn LineSink>>,
    /// Dead frame -> (live frame, transform into it).
    chain: BTreeMap<FrameId, (FrameId, Pose6D)>,
    records: Vec<MergeRecord>,
    pending: BTreeMap<(FrameId, MarkerId), (Pose6D, Covariance6)>,
    latest: BTreeMap<DroneId, EkfState>,
    finished: BTreeSet<DroneId>,
    log: StationLog,
    clock: f64,
    dirty: bool,
}

impl GroundStation {
    pub fn new(config: StationConfig) -> Self {
        Self {
            map: GlobalMap::new(&config.map),
            config,
            keyposes: Vec::new(),
            since_ba: 0,
            guard: SeqGuard::default(),
            seq: Sequencer::new(Sender::Station),
            outboxes: BTreeMap::new(),
            chain: BTreeMap::new(),
            records: Vec::new(),
            pending: BTreeMap::new(),
            latest: BTreeMap::new(),
            finished: BTreeSet::new(),
            log: StationLog::default(),
            clock: 0.0,
            dirty: false,
        }
    }

    pub fn attach(&mut self, drone: DroneId, sink: Box<dyn LineSink>) {
        self.outboxes.insert(drone, sink);
    }

    pub fn map(&self) -> &GlobalMap {
        &self.map
    }

    pub fn log(&self) -> &StationLog {
        &self.log
    }

    pub fn keyposes(&self) -> &[Keypose] {
        &self.keyposes
    }

    pub fn latest_state(&self, drone: DroneId) -> Option<&EkfState> {
        self.latest.get(&drone)
    }

    pub fn finished(&self) -> &BTreeSet<DroneId> {
        &self.finished
    }

    /// Dead frames mapped to the live frame that absorbed them.
    pub fn frame_chain(&self) -> &BTreeMap<FrameId, (FrameId, Pose6D)> {
        &self.chain
    }

    /// Live frame holding `frame`'s content and the transform into it.
    pub fn resolve(&self, frame: FrameId) -> (FrameId, Pose6D) {
        self.chain
            .get(&frame)
            .copied()
            .unwrap_or((frame, Pose6D::identity()))
    }

    /// Handles every queued line, then broadcasts one map snapshot if the map changed.
    pub fn drain(&mut self, inbox: &Receiver<String>) -> usize {
        let mut n = 0;
        while let Ok(line) = inbox.try_recv() {
            self.handle_line(&line);
            n += 1;
        }
        self.flush();
        n
    }

    pub fn flush(&mut self) {
        if self.dirty {
            self.dirty = false;
            let entries = self.map.snapshot();
            self.broadcast(ProtocolMessage::MapSnapshot { entries });
        }
    }

    pub fn handle_line(&mut self, line: &str) {
        match decode(line) {
            Ok(env) => self.handle(env),
            Err(e) => {
                self.log.dropped += 1;
                log::warn!("station dropping message: {e}");
            }
        }
    }

    pub fn handle(&mut self, env: Envelope) {
        if !self.guard.accept(&env) {
            self.log.dropped += 1;
            log::debug!(
                "station ignoring replayed sequence {} from {:?}",
                env.seq,
                env.sender
            );
            return;
        }
        self.log.handled += 1;
        match env.msg {
            ProtocolMessage::Hello { drone_id, .. } => self.hello(drone_id),
            ProtocolMessage::MarkerObs {
                drone_id,
                detection,
                ekf_pose,
                ekf_cov,
                timestamp,
                frame,
            } => self.marker_obs(drone_id, &detection, &ekf_pose, &ekf_cov, timestamp, frame),
            ProtocolMessage::PoseReport { drone_id, state } => {
                self.clock = self.clock.max(state.timestamp);
                self.latest.insert(drone_id, state);
            }
            ProtocolMessage::KeyposeCommit { keypose } => self.keypose_commit(keypose),
            ProtocolMessage::Shutdown => {
                if let Sender::Drone(d) = env.sender {
                    self.finished.insert(d);
                }
            }
            ProtocolMessage::MapSnapshot { .. } | ProtocolMessage::FrameMerged { .. } => {
                self.log.dropped += 1;
                log::warn!(
                    "station received a station-only message from {:?}",
                    env.sender
                );
            }
        }
    }

    fn broadcast(&mut self, msg: ProtocolMessage) {
        let line = encode(&self.seq.wrap(msg));
        let mut lost = Vec::new();
        for (drone, sink) in self.outboxes.iter_mut() {
            if let Err(e) = sink.send_line(&line) {
                log::warn!("station lost link to {drone}: {e}");
                lost.push(*drone);
            }
        }
        for d in lost {
            self.outboxes.remove(&d);
        }
    }

    fn hello(&mut self, drone: DroneId) {
        if self.map.frame_of(drone).is_some() {
            return;
        }
        let frame = FrameId(drone.0);
        if self.chain.contains_key(&frame) {
            log::warn!("{drone} cannot reuse dead frame {frame}");
            return;
        }
        if let Err(e) = self.map.register_drone(drone, frame) {
            log::warn!("registering {drone}: {e}");
        }
    }

    fn known_drone(&self, drone: DroneId) -> bool {
        if self.map.frame_of(drone).is_none() {
            log::warn!("message from unregistered {drone} dropped");
            return false;
        }
        true
    }

    fn marker_obs(
        &mut self,
        drone: DroneId,
        det: &MarkerDetection,
        ekf_pose: &Pose6D,
        ekf_cov: &Covariance6,
        t: f64,
        frame: FrameId,
    ) {
        if !self.known_drone(drone) || !ekf_pose.is_finite() || !det.rel_pose.is_finite() {
            self.log.dropped += 1;
            return;
        }
        self.clock = self.clock.max(t);
        let (frame, to_live) = self.resolve(frame);
        let drone_pose = to_live.compose(ekf_pose);
        let camera = drone_pose.compose(&det.extrinsics);
        let observed = camera.compose(&det.rel_pose);
        let camera_cov = compose_covariance(
            &drone_pose,
            &ekf_cov.transport(&to_live.rotation()),
            &det.extrinsics,
            &Covariance6::zeros(),
        );
        // the detection noise is a perturbation of the camera pose
        let zero = Covariance6::zeros();
        let noisy_camera_cov = compose_covariance(
            &camera,
            &camera_cov,
            &Pose6D::identity(),
            &detection_noise(det, &self.config.detection),
        );
        let cov = compose_covariance(&camera, &noisy_camera_cov, &det.rel_pose, &zero);
        let marker = det.marker_id;

        let existing = self.map.lookup(marker).map(|e| (e.frame, e.pose));
        match existing {
            None => {
                if let Err(e) = self.map.insert_marker(frame, marker, observed, cov, t) {
                    log::warn!("inserting {marker}: {e}");
                    return;
                }
                self.dirty = true;
            }
            Some((f, entry_pose)) if f == frame => {
                match self.map.fuse_observation(marker, &observed, &cov, t) {
                    Ok(_) => self.dirty = true,
                    Err(e) => log::warn!("fusing {marker}: {e}"),
                }
                self.offer(drone, marker, &observed, &entry_pose);
            }
            Some((other, _)) => {
                self.pending.insert((frame, marker), (observed, cov));
                self.merge(drone, marker, other, frame);
            }
        }
    }

    fn offer(&mut self, drone: DroneId, marker: MarkerId, observed: &Pose6D, entry: &Pose6D) {
        let mut offered = false;
        for r in self.records.iter_mut() {
            offered |= r.offer(drone, marker, observed, entry);
        }
        if !offered {
            return;
        }
        for r in self.records.iter_mut() {
            if let Some(refinement) = refine_transform(&mut self.map, r) {
                log::info!(
                    "refined merge {} -> {} (support {}, residual {:.4} -> {:.4})",
                    refinement.loser,
                    refinement.winner,
                    refinement.support,
                    refinement.residual_before,
                    refinement.residual_after
                );
                // stale observations from the old loser frame now land through the refined transform
                if let Some(link) = self.chain.get_mut(&r.loser) {
                    if link.0 == r.winner {
                        link.1 = r.applied;
                    }
                }
                self.dirty = true;
                self.log.refinements.push(RefinementEvent {
                    time: self.clock,
                    refinement,
                });
            }
        }
    }

    /// Folds the frames of `observer_frame` and `marker_frame` together.
    fn merge(
        &mut self,
        drone: DroneId,
        marker: MarkerId,
        marker_frame: FrameId,
        observer_frame: FrameId,
    ) {
        let pending: Vec<PendingObservation> = self
            .pending
            .keys()
            .map(|(f, m)| PendingObservation {
                frame: *f,
                marker: *m,
            })
            .collect();
        let matches = find_matches(&self.map, marker_frame, observer_frame, &pending);
        let winner = marker_frame.min(observer_frame);
        let loser = marker_frame.max(observer_frame);
        let mut pairs = Vec::new();
        let mut covs = Vec::new();
        let mut match_pairs = Vec::new();
        for m in &matches {
            let entry = self.map.lookup(*m).expect("matched marker is mapped");
            let Some((obs, obs_cov)) = self.pending.get(&(observer_frame, *m)) else {
                continue;
            };
            let (w, wc, l, lc) = if winner == marker_frame {
                (entry.pose, &entry.cov, *obs, obs_cov)
            } else {
                (*obs, obs_cov, entry.pose, &entry.cov)
            };
            pairs.push((w, l));
            covs.push((wc.clone(), lc.clone()));
            match_pairs.push(MatchPair {
                marker: *m,
                in_winner: w,
                in_loser: l,
            });
        }
        let est = match estimate_transform(&pairs) {
            Ok(e) => e,
            Err(e) => {
                log::warn!("cannot align frames {loser} -> {winner}: {e}");
                return;
            }
        };
        let n = pairs.len() as f64;
        let rot = est.rt.rotation();
        let mut cov = Matrix6::zeros();
        for (wc, lc) in &covs {
            cov += wc.0 + lc.transport(&rot).0;
        }
        let pivot = pairs.iter().fold(Vector3::zeros(), |acc, (w, _)| acc + w.t) / n;
        let transform = FrameTransform {
            from: loser,
            to: winner,
            rt: est.rt,
            residual: est.residual,
            support: est.support,
            scale: est.scale,
            cov: Covariance6(cov / (n * n)).symmetrized(),
            pivot: [pivot.x, pivot.y, pivot.z],
        };
        let winner_markers: BTreeSet<MarkerId> =
            self.map.entries_in(winner).map(|e| e.marker_id).collect();
        let loser_markers: BTreeSet<MarkerId> =
            self.map.entries_in(loser).map(|e| e.marker_id).collect();
        let winner_drones: BTreeSet<DroneId> = self.map.drones_in(winner).into_iter().collect();
        let loser_drones: BTreeSet<DroneId> = self.map.drones_in(loser).into_iter().collect();
        let notice = match merge_frames(&mut self.map, winner, loser, &transform) {
            Ok(n) => n,
            Err(e) => {
                log::warn!("merge {loser} -> {winner} failed: {e}");
                return;
            }
        };
        log::info!(
            "merged frame {loser} into {winner} on {marker} (support {}, residual {:.4})",
            est.support,
            est.residual
        );
        let rt = est.rt;
        for r in self.records.iter_mut() {
            r.rebase(loser, winner, &rt);
        }
        self.records.push(MergeRecord {
            winner,
            loser,
            applied: rt,
            pairs: match_pairs,
            new_pairs: Vec::new(),
            winner_markers,
            loser_markers,
            winner_drones,
            loser_drones,
        });
        for k in self.keyposes.iter_mut().filter(|k| k.frame == loser) {
            k.pose = rt.compose(&k.pose);
            k.cov = k.cov.transport(&rot);
            k.frame = winner;
        }
        for link in self.chain.values_mut().filter(|l| l.0 == loser) {
            *link = (winner, rt.compose(&link.1));
        }
        self.chain.insert(loser, (winner, rt));
        let old = std::mem::take(&mut self.pending);
        for ((f, m), (pose, c)) in old {
            let (f, pose, c) = if f == loser {
                (winner, rt.compose(&pose), c.transport(&rot))
            } else {
                (f, pose, c)
            };
            if self.map.lookup(m).is_some_and(|e| e.frame != f) {
                self.pending.insert((f, m), (pose, c));
            }
        }
        self.log.merges.push(MergeEvent {
            time: self.clock,
            drone,
            marker,
            notice,
        });
        self.broadcast(ProtocolMessage::FrameMerged {
            loser,
            winner,
            rt: transform,
        });
        self.dirty = true;
        self.run_ba(winner, BaTrigger::Merge);
    }

    fn keypose_commit(&mut self, mut kp: Keypose) {
        if !self.known_drone(kp.drone_id) || !kp.pose.is_finite() || kp.observations.is_empty() {
            self.log.dropped += 1;
            return;
        }
        self.clock = self.clock.max(kp.timestamp);
        let (frame, to_live) = self.resolve(kp.frame);
        kp.pose = to_live.compose(&kp.pose);
        kp.cov = kp.cov.transport(&to_live.rotation());
        kp.frame = frame;
        for o in &kp.observations {
            let Some(entry) = self.map.lookup(o.marker_id).filter(|e| e.frame == frame) else {
                continue;
            };
            let entry_pose = entry.pose;
            let observed = kp.pose.compose(&o.extrinsics).compose(&o.rel_pose);
            self.offer(kp.drone_id, o.marker_id, &observed, &entry_pose);
        }
        self.keyposes.push(kp);
        self.since_ba += 1;
        if self.since_ba >= self.config.ba.keyposes_per_run {
            self.since_ba = 0;
            for f in self.map.live_frames() {
                self.run_ba(f, BaTrigger::Keyposes);
            }
        }
    }

    /// Bundle adjustment over one frame's keyposes; the map is only touched on success.
    pub fn run_ba(&mut self, frame: FrameId, trigger: BaTrigger) {
        if !self.config.ba.enabled {
            return;
        }
        let mut idx: Vec<usize> = (0..self.keyposes.len())
            .filter(|i| self.keyposes[*i].frame == frame)
            .collect();
        idx.sort_by(|a, b| {
            let (ka, kb) = (&self.keyposes[*a], &self.keyposes[*b]);
            ka.drone_id
                .cmp(&kb.drone_id)
                .then(ka.timestamp.total_cmp(&kb.timestamp))
        });
        let mut used = Vec::new();
        let mut kps = Vec::new();
        let mut markers = BTreeMap::new();
        for i in idx {
            let mut k = self.keyposes[i].clone();
            k.observations.retain(|o| {
                self.map
                    .lookup(o.marker_id)
                    .is_some_and(|e| e.frame == frame && e.obs_count >= self.map.fuse_limit())
            });
            if k.observations.is_empty() {
                continue;
            }
            for o in &k.observations {
                markers.insert(
                    o.marker_id,
                    self.map.lookup(o.marker_id).expect("filtered").pose,
                );
            }
            used.push(i);
            kps.push(k);
        }
        if kps.len() < 2 {
            return;
        }
        let (nk, nm) = (kps.len(), markers.len());
        let mut run = BaRun {
            time: self.clock,
            frame,
            trigger,
            keyposes: nk,
            markers: nm,
            report: None,
            error: None,
        };
        let solved = BaProblem::new(kps, markers).and_then(|p| optimize(&p, &self.config.ba));
        match solved {
            Ok(sol) => {
                // The anchor pins the solution to one keypose and its few noisy
                // sightings. Place it instead where it best fits all the
                // keypose estimates it started from.
                let gauge =
                    refit_gauge(used.iter().map(|i| &self.keyposes[*i].pose), &sol.keyposes);
                let zero = Covariance6::zeros();
                for (id, pose) in &sol.markers {
                    let adjusted = gauge.compose(pose);
                    let result = match sol.marker_covariances.get(id) {
                        Some(cov) => {
                            let cov = compose_covariance(&gauge, &zero, pose, cov);
                            self.map.set_estimate(*id, adjusted, cov)
                        }
                        None => self.map.set_pose(*id, adjusted),
                    };
                    if let Err(e) = result {
                        log::warn!("applying adjustment to {id}: {e}");
                    }
                }
                for (i, pose) in used.iter().zip(&sol.keyposes) {
                    self.keyposes[*i].pose = gauge.compose(pose);
                }
                // pairs recorded before adjustment no longer describe the map
                self.records.retain(|r| r.winner != frame);
                log::info!(
                    "bundle adjustment in frame {frame}: {nk} keyposes, {nm} markers, cost {:.4e} -> {:.4e} in {} iterations",
                    sol.report.initial_cost,
                    sol.report.final_cost,
                    sol.report.iterations
                );
                run.report = Some(sol.report);
                self.dirty = true;
            }
            Err(e) => {
                log::warn!("bundle adjustment in frame {frame} aborted: {e}");
                run.error = Some(e.to_string());
            }
        }
        self.log.ba_runs.push(run);
    }
}

/// Rigid transform taking adjusted keyposes back onto their prior estimates:
/// mean attitude offset, then the centroid shift under that rotation.
fn refit_gauge<'a>(prior: impl Iterator<Item = &'a Pose6D>, adjusted: &[Pose6D]) -> Pose6D {
    let prior: Vec<&Pose6D> = prior.collect();
    let offsets: Vec<UnitQuaternion<f64>> = prior
        .iter()
        .zip(adjusted)
        .map(|(p, a)| p.q * a.q.inverse())
        .collect();
    let Some(q) = quaternion_mean(&offsets) else {
        return Pose6D::identity();
    };
    let n = adjusted.len() as f64;
    let cp: Vector3<f64> = prior.iter().map(|p| p.t).sum::<Vector3<f64>>() / n;
    let ca: Vector3<f64> = adjusted.iter().map(|a| a.t).sum::<Vector3<f64>>() / n;
    Pose6D::new(cp - q * ca, q)
}
