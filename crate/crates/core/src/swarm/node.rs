//! The per-drone node: sensory processing, value judgment, world modeling and
//! behavior generation, run once per tick.

use std::collections::BTreeMap;

use crossbeam_channel::{Receiver, TryRecvError};

use crate::ba::{select_keypose, BaConfig, Keypose, KeyposeObservation};
use nalgebra::Matrix6;

use crate::ekf::{
    compose_jacobians, detection_noise, marker_jacobian, motion_jacobian, observation_from_marker,
    predict, update_correlated, DetectionNoiseParams, EkfConfig, EkfState,
};
use crate::geom::{DroneId, MarkerId, Pose6D};
use crate::mapstore::MapEntry;
use crate::swarm::policy::{choose_destination, PolicyState};
use crate::swarm::protocol::{
    decode, encode, Envelope, ProtocolMessage, Sender, SeqGuard, Sequencer,
};
use crate::swarm::transport::LineSink;
use crate::worldsim::{MarkerDetection, OdometryReading, VelocityCommand};

#[derive(Clone, Debug, PartialEq)]
pub struct NodeConfig {
    pub ekf: EkfConfig,
    pub process_noise: [f64; 6],
    pub detection: DetectionNoiseParams,
    pub ba: BaConfig,
    pub fuse_limit: u32,
}

#[derive(Clone, Debug)]
pub struct NodeInputs {
    pub odometry: OdometryReading,
    pub detections: Vec<MarkerDetection>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TickReport {
    pub command: Option<VelocityCommand>,
    pub updates: usize,
    pub rejected: usize,
    pub forwarded: usize,
    pub keypose: bool,
    pub merged: bool,
}

pub struct NavptsNode {
    drone_id: DroneId,
    ekf: EkfState,
    policy: PolicyState,
    map_view: BTreeMap<MarkerId, MapEntry>,
    /// `Cov(ekf error, map error)` for each frozen marker the filter has used,
    /// with the map pose it was linearized at. Repeated sightings of one marker
    /// share its map error, so they must not count as independent.
    cross: BTreeMap<MarkerId, (Pose6D, Matrix6<f64>)>,
    outbox: Box<dyn LineSink>,
    inbox: Receiver<String>,
    seq: Sequencer,
    guard: SeqGuard,
    connected: bool,
    shutdown: bool,
    config: NodeConfig,
    last_keypose: Option<Pose6D>,
}

impl NavptsNode {
    /// Creates the node and announces it to the station.
    pub fn new(
        drone_id: DroneId,
        ekf: EkfState,
        policy: PolicyState,
        config: NodeConfig,
        outbox: Box<dyn LineSink>,
        inbox: Receiver<String>,
    ) -> Self {
        let mut node = Self {
            drone_id,
            ekf,
            policy,
            map_view: BTreeMap::new(),
            cross: BTreeMap::new(),
            outbox,
            inbox,
            seq: Sequencer::new(Sender::Drone(drone_id)),
            guard: SeqGuard::default(),
            connected: true,
            shutdown: false,
            config,
            last_keypose: None,
        };
        node.hello();
        node
    }

    pub fn drone_id(&self) -> DroneId {
        self.drone_id
    }

    pub fn ekf(&self) -> &EkfState {
        &self.ekf
    }

    pub fn map_view(&self) -> &BTreeMap<MarkerId, MapEntry> {
        &self.map_view
    }

    pub fn is_connected(&self) -> bool {
        self.connected
    }

    pub fn shutdown_requested(&self) -> bool {
        self.shutdown
    }

    fn hello(&mut self) {
        let start_pose = self.ekf.pose();
        self.send(ProtocolMessage::Hello {
            drone_id: self.drone_id,
            start_pose,
        });
    }

    fn send(&mut self, msg: ProtocolMessage) {
        if !self.connected {
            return;
        }
        let line = encode(&self.seq.wrap(msg));
        if let Err(e) = self.outbox.send_line(&line) {
            log::warn!("{}: link to station lost: {e}", self.drone_id);
            self.connected = false;
        }
    }

    /// Announces the end of the run to the station.
    pub fn finish(&mut self) {
        self.send(ProtocolMessage::Shutdown);
    }

    pub fn tick(&mut self, inputs: &NodeInputs) -> TickReport {
        let mut report = TickReport::default();
        if !self.connected && self.outbox.reconnect() {
            log::info!("{}: reconnected", self.drone_id);
            self.connected = true;
            self.hello();
        }

        // VJ: predict, then correct with frozen local markers or forward
        match predict(&self.ekf, &inputs.odometry, &self.config.process_noise) {
            Ok(s) => {
                let f = motion_jacobian(
                    &self.ekf.mean,
                    &inputs.odometry.body_velocity,
                    inputs.odometry.dt,
                );
                for (_, c) in self.cross.values_mut() {
                    *c = f * *c;
                }
                self.ekf = s;
            }
            Err(e) => log::warn!("{}: predict skipped: {e}", self.drone_id),
        }
        for det in &inputs.detections {
            let usable = self
                .map_view
                .get(&det.marker_id)
                .filter(|e| e.frame == self.ekf.frame && e.obs_count >= self.config.fuse_limit);
            match usable {
                Some(entry) => match observation_from_marker(det, entry, &self.config.detection) {
                    Ok(obs) => {
                        let jm = marker_jacobian(det, entry);
                        let cross = match (jm, self.cross.get(&det.marker_id)) {
                            (Some(j), Some((_, c))) => c * j.transpose(),
                            _ => Matrix6::zeros(),
                        };
                        let (s, outcome, k) =
                            update_correlated(&self.ekf, &obs, &cross, &self.config.ekf);
                        self.ekf = s;
                        if outcome.accepted() {
                            report.updates += 1;
                            let ikh = Matrix6::identity() - k;
                            for (_, c) in self.cross.values_mut() {
                                *c = ikh * *c;
                            }
                            if let Some(j) = jm {
                                let slot = self
                                    .cross
                                    .entry(det.marker_id)
                                    .or_insert((entry.pose, Matrix6::zeros()));
                                slot.1 += k * j * entry.cov.0;
                            }
                        } else {
                            report.rejected += 1;
                        }
                    }
                    Err(e) => log::warn!("{}: {e}", self.drone_id),
                },
                None => {
                    report.forwarded += 1;
                    self.send(ProtocolMessage::MarkerObs {
                        drone_id: self.drone_id,
                        detection: det.clone(),
                        ekf_pose: self.ekf.pose(),
                        ekf_cov: self.ekf.cov.clone(),
                        timestamp: inputs.odometry.timestamp,
                        frame: self.ekf.frame,
                    });
                }
            }
        }
        let pose = self.ekf.pose();
        if select_keypose(
            &pose,
            self.last_keypose.as_ref(),
            !inputs.detections.is_empty(),
            &self.config.ba,
        ) {
            self.last_keypose = Some(pose);
            report.keypose = true;
            let observations = inputs
                .detections
                .iter()
                .map(|d| KeyposeObservation {
                    marker_id: d.marker_id,
                    rel_pose: d.rel_pose,
                    noise: detection_noise(d, &self.config.detection),
                    extrinsics: d.extrinsics,
                })
                .collect();
            self.send(ProtocolMessage::KeyposeCommit {
                keypose: Keypose {
                    drone_id: self.drone_id,
                    frame: self.ekf.frame,
                    pose,
                    cov: self.ekf.cov.clone(),
                    timestamp: inputs.odometry.timestamp,
                    observations,
                },
            });
        }
        self.send(ProtocolMessage::PoseReport {
            drone_id: self.drone_id,
            state: self.ekf.clone(),
        });

        // WM: frame merges and map snapshots from the station
        report.merged = self.drain_inbox();

        // BG
        report.command = Some(if self.connected && !self.shutdown {
            choose_destination(&mut self.policy, &self.ekf.pose())
        } else {
            VelocityCommand::hover()
        });
        report
    }

    fn drain_inbox(&mut self) -> bool {
        let mut merged = false;
        loop {
            let line = match self.inbox.try_recv() {
                Ok(l) => l,
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => {
                    if self.connected {
                        log::warn!("{}: station channel closed", self.drone_id);
                    }
                    self.connected = false;
                    break;
                }
            };
            match decode(&line) {
                Ok(env) => merged |= self.apply(env),
                Err(e) => log::warn!("{}: dropping message: {e}", self.drone_id),
            }
        }
        merged
    }

    /// Re-expresses the tracked correlations after the filter's frame is
    /// mapped through `rt`.
    fn remap_cross(&mut self, rt: &Pose6D) {
        let pose = self.ekf.pose();
        let Some((_, jx)) = compose_jacobians(rt, &pose) else {
            self.cross.clear();
            return;
        };
        let mut out = BTreeMap::new();
        for (id, (m, c)) in std::mem::take(&mut self.cross) {
            if let Some((_, jm)) = compose_jacobians(rt, &m) {
                out.insert(id, (rt.compose(&m), jx * c * jm.transpose()));
            }
        }
        self.cross = out;
    }

    fn apply(&mut self, env: Envelope) -> bool {
        if !self.guard.accept(&env) {
            log::debug!(
                "{}: stale sequence {} from {:?}",
                self.drone_id,
                env.seq,
                env.sender
            );
            return false;
        }
        match env.msg {
            ProtocolMessage::FrameMerged { loser, winner, rt } => {
                for e in self.map_view.values_mut().filter(|e| e.frame == loser) {
                    e.pose = rt.rt.compose(&e.pose);
                    e.cov = e.cov.transport(&rt.rt.rotation());
                    e.frame = winner;
                }
                if self.ekf.frame != loser {
                    return false;
                }
                if rt.from != loser || rt.to != winner {
                    log::warn!("{}: inconsistent FrameMerged dropped", self.drone_id);
                    return false;
                }
                self.remap_cross(&rt.rt);
                self.ekf = rt.apply_to_state(&self.ekf);
                self.policy.transform(&rt.rt);
                self.last_keypose = self.last_keypose.map(|k| rt.rt.compose(&k));
                log::info!("{}: frame {loser} merged into {winner}", self.drone_id);
                true
            }
            ProtocolMessage::MapSnapshot { entries } => {
                self.map_view = entries.into_iter().map(|e| (e.marker_id, e)).collect();
                let (view, frame) = (&self.map_view, self.ekf.frame);
                self.cross
                    .retain(|id, _| view.get(id).is_some_and(|e| e.frame == frame));
                false
            }
            ProtocolMessage::Shutdown => {
                self.shutdown = true;
                false
            }
            other => {
                log::debug!(
                    "{}: ignoring {:?}",
                    self.drone_id,
                    std::mem::discriminant(&other)
                );
                false
            }
        }
    }
}
