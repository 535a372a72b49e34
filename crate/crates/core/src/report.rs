//! Run reports and the files exported from them.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geom::{Covariance6, DroneId, FrameId, MarkerId, Pose6D};
use crate::mapstore::MapEntry;
use crate::metrics::{compute_metrics, Metrics};
use crate::scenario::Scenario;
use crate::swarm::runner::RunMode;
use crate::swarm::station::{BaRun, GroundStation, MergeEvent, RefinementEvent};
use crate::worldsim::Marker;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub tick: u64,
    pub sim_time: f64,
    pub drone_id: DroneId,
    pub truth: Pose6D,
    /// Filter estimate in `frame` coordinates.
    pub estimate: Pose6D,
    pub frame: FrameId,
    pub cov_trace: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub ekf_updates: u64,
    pub ekf_rejected: u64,
    pub forwarded_observations: u64,
    pub keyposes: u64,
    pub station_handled: u64,
    pub station_dropped: u64,
}

impl RunStats {
    pub fn add(&mut self, o: &RunStats) {
        self.ekf_updates += o.ekf_updates;
        self.ekf_rejected += o.ekf_rejected;
        self.forwarded_observations += o.forwarded_observations;
        self.keyposes += o.keyposes;
        self.station_handled += o.station_handled;
        self.station_dropped += o.station_dropped;
    }
}

/// A dead frame and the transform into the live frame that absorbed it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameLink {
    pub from: FrameId,
    pub to: FrameId,
    pub rt: Pose6D,
}

/// True world pose of a frame's origin (the start pose of the drone that opened it).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameOrigin {
    pub frame: FrameId,
    pub pose: Pose6D,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario_name: String,
    pub scenario_digest: String,
    pub seed: u64,
    pub mode: RunMode,
    pub tick_rate: f64,
    pub ticks: u64,
    pub truth_markers: Vec<Marker>,
    pub frame_origins: Vec<FrameOrigin>,
    pub frame_chain: Vec<FrameLink>,
    pub live_frames: Vec<FrameId>,
    pub final_map: Vec<MapEntry>,
    pub trajectories: Vec<TrajectorySample>,
    pub merges: Vec<MergeEvent>,
    pub refinements: Vec<RefinementEvent>,
    pub ba_runs: Vec<BaRun>,
    pub stats: RunStats,
    pub metrics: Metrics,
}

/// One row of `map.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapFileEntry {
    pub marker_id: MarkerId,
    pub frame: FrameId,
    pub pose: Pose6D,
    pub cov: Covariance6,
    pub obs_count: u32,
}

pub const TRAJECTORY_HEADER: &str = "tick,sim_time,drone_id,source,x,y,z,alpha,beta,gamma";

impl RunReport {
    pub fn assemble(
        scenario: &Scenario,
        seed: u64,
        mode: RunMode,
        station: &GroundStation,
        trajectories: Vec<TrajectorySample>,
        mut stats: RunStats,
    ) -> Self {
        stats.station_handled = station.log().handled;
        stats.station_dropped = station.log().dropped;
        let log = station.log().clone();
        let mut report = Self {
            scenario_name: scenario.name.clone(),
            scenario_digest: scenario.digest(seed),
            seed,
            mode,
            tick_rate: scenario.tick_rate,
            ticks: scenario.ticks(),
            truth_markers: scenario.world.markers.clone(),
            frame_origins: scenario
                .drones
                .iter()
                .map(|d| FrameOrigin {
                    frame: FrameId(d.id.0),
                    pose: d.start_pose,
                })
                .collect(),
            frame_chain: station
                .frame_chain()
                .iter()
                .map(|(from, (to, rt))| FrameLink {
                    from: *from,
                    to: *to,
                    rt: *rt,
                })
                .collect(),
            live_frames: station.map().live_frames(),
            final_map: station.map().snapshot(),
            trajectories,
            merges: log.merges,
            refinements: log.refinements,
            ba_runs: log.ba_runs,
            stats,
            metrics: Metrics::empty(),
        };
        report.metrics = compute_metrics(&report);
        report
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Live frame and transform for estimates recorded in `frame`.
    pub fn resolve(&self, frame: FrameId) -> (FrameId, Pose6D) {
        self.frame_chain
            .iter()
            .find(|l| l.from == frame)
            .map(|l| (l.to, l.rt))
            .unwrap_or((frame, Pose6D::identity()))
    }

    pub fn map_file(&self) -> Vec<MapFileEntry> {
        self.final_map
            .iter()
            .map(|e| MapFileEntry {
                marker_id: e.marker_id,
                frame: e.frame,
                pose: e.pose,
                cov: e.cov.clone(),
                obs_count: e.obs_count,
            })
            .collect()
    }

    /// Truth rows in world coordinates, estimate rows in final-frame coordinates.
    pub fn trajectories_csv(&self) -> String {
        let mut out = String::from(TRAJECTORY_HEADER);
        out.push('\n');
        for s in &self.trajectories {
            let (_, to_live) = self.resolve(s.frame);
            let est = to_live.compose(&s.estimate);
            for (source, p) in [("truth", &s.truth), ("estimate", &est)] {
                let e = p.euler();
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{}",
                    s.tick, s.sim_time, s.drone_id.0, source, p.t.x, p.t.y, p.t.z, e[0], e[1], e[2]
                )
                .expect("writing to a string");
            }
        }
        out
    }

    /// Writes map.json, trajectories.csv, report.json and metrics.json.
    pub fn write_artifacts(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        let map = serde_json::to_string_pretty(&self.map_file()).map_err(io::Error::other)?;
        fs::write(dir.join("map.json"), map + "\n")?;
        fs::write(dir.join("trajectories.csv"), self.trajectories_csv())?;
        fs::write(dir.join("report.json"), self.to_json() + "\n")?;
        let metrics = serde_json::to_string_pretty(&self.metrics).map_err(io::Error::other)?;
        fs::write(dir.join("metrics.json"), metrics + "\n")?;
        Ok(())
    }
}
