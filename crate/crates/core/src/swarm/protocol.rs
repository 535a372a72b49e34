//! Wire protocol: newline-delimited JSON envelopes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ba::Keypose;
use crate::ekf::EkfState;
use crate::geom::{Covariance6, DroneId, FrameId, Pose6D};
use crate::mapstore::MapEntry;
use crate::merge::FrameTransform;
use crate::worldsim::MarkerDetection;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sender {
    Station,
    Drone(DroneId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ProtocolMessage {
    Hello {
        drone_id: DroneId,
        start_pose: Pose6D,
    },
    MarkerObs {
        drone_id: DroneId,
        detection: MarkerDetection,
        ekf_pose: Pose6D,
        ekf_cov: Covariance6,
        timestamp: f64,
        /// Frame the EKF pose is expressed in when the message was sent.
        frame: FrameId,
    },
    PoseReport {
        drone_id: DroneId,
        state: EkfState,
    },
    MapSnapshot {
        entries: Vec<MapEntry>,
    },
    FrameMerged {
        loser: FrameId,
        winner: FrameId,
        rt: FrameTransform,
    },
    KeyposeCommit {
        keypose: Keypose,
    },
    Shutdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub seq: u64,
    pub sender: Sender,
    pub msg: ProtocolMessage,
}

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("malformed frame: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("frame contains an embedded newline")]
    EmbeddedNewline,
}

/// One line of UTF-8 JSON, without the trailing newline.
pub fn encode(env: &Envelope) -> String {
    serde_json::to_string(env).expect("protocol values always serialize")
}

pub fn decode(line: &str) -> Result<Envelope, CodecError> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let line = line.strip_suffix('\r').unwrap_or(line);
    if line.contains('\n') {
        return Err(CodecError::EmbeddedNewline);
    }
    Ok(serde_json::from_str(line)?)
}

/// Numbers outgoing envelopes for one sender.
#[derive(Clone, Debug)]
pub struct Sequencer {
    sender: Sender,
    next: u64,
}

impl Sequencer {
    pub fn new(sender: Sender) -> Self {
        Self { sender, next: 1 }
    }

    pub fn wrap(&mut self, msg: ProtocolMessage) -> Envelope {
        let seq = self.next;
        self.next += 1;
        Envelope {
            seq,
            sender: self.sender,
            msg,
        }
    }
}

/// Rejects envelopes whose sequence number does not advance per sender.
#[derive(Clone, Debug, Default)]
pub struct SeqGuard {
    last: BTreeMap<Sender, u64>,
}

impl SeqGuard {
    pub fn accept(&mut self, env: &Envelope) -> bool {
        match self.last.get(&env.sender) {
            Some(&last) if env.seq <= last => false,
            _ => {
                self.last.insert(env.sender, env.seq);
                true
            }
        }
    }
}
