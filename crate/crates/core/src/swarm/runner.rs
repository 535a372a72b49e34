//! Scenario execution in lockstep or threaded mode.

use std::net::{SocketAddr, TcpListener};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ekf::EkfState;
use crate::geom::{Covariance6, FrameId, Pose6D};
use crate::report::{RunReport, RunStats, TrajectorySample};
use crate::scenario::{DroneSpec, Scenario, ScenarioError, TransportKind};
use crate::swarm::node::{NavptsNode, NodeConfig, NodeInputs, TickReport};
use crate::swarm::policy::PolicyState;
use crate::swarm::station::{GroundStation, StationConfig};
use crate::swarm::transport::{channel_pair, connect_tcp, serve_tcp, ChannelSink, LineSink};
use crate::worldsim::{
    sense_markers, sense_odometry, step_drone, DroneRng, DroneTruth, SimError, VelocityCommand,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    #[default]
    Lockstep,
    Threaded,
}

impl std::str::FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lockstep" => Ok(RunMode::Lockstep),
            "threaded" => Ok(RunMode::Threaded),
            other => Err(format!(
                "unknown mode {other:?} (expected lockstep or threaded)"
            )),
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("simulation failed: {0}")]
    Sim(#[from] SimError),
    #[error("transport failed: {0}")]
    Transport(#[from] std::io::Error),
    #[error("{0}")]
    Runtime(String),
}

/// Ground truth, noise stream and pending command of one simulated drone.
struct DroneSim {
    spec: DroneSpec,
    truth: DroneTruth,
    rng: DroneRng,
    cmd: VelocityCommand,
}

impl DroneSim {
    fn new(spec: &DroneSpec, seed: u64) -> Self {
        Self {
            spec: spec.clone(),
            truth: DroneTruth::at_rest(spec.id, spec.start_pose),
            rng: DroneRng::new(seed, spec.id),
            cmd: VelocityCommand::hover(),
        }
    }

    fn advance(&mut self, scenario: &Scenario, t: f64) -> Result<NodeInputs, SimError> {
        let dt = scenario.dt();
        let next = step_drone(&self.truth, &self.cmd, dt, &scenario.world.bounds)?;
        let odometry = sense_odometry(&self.truth, &next, dt, &scenario.noise, t, &mut self.rng);
        let detections = sense_markers(
            &next,
            &scenario.world,
            &self.spec.cameras,
            &scenario.noise,
            t,
            &mut self.rng,
        );
        self.truth = next;
        Ok(NodeInputs {
            odometry,
            detections,
        })
    }
}

fn node_config(scenario: &Scenario) -> NodeConfig {
    NodeConfig {
        ekf: scenario.ekf.clone(),
        process_noise: scenario.process_noise(),
        detection: scenario.noise.detection,
        ba: scenario.ba.clone(),
        fuse_limit: scenario.map.fuse_limit,
    }
}

fn station_config(scenario: &Scenario) -> StationConfig {
    StationConfig {
        map: scenario.map.clone(),
        ba: scenario.ba.clone(),
        detection: scenario.noise.detection,
    }
}

/// The drone starts at the origin of its own frame.
fn initial_state(scenario: &Scenario, spec: &DroneSpec) -> EkfState {
    let var = scenario.ekf.initial_sigma.map(|s| s * s);
    EkfState::new(
        &Pose6D::identity(),
        Covariance6::from_diagonal(var),
        FrameId(spec.id.0),
        0.0,
    )
}

fn make_node(
    scenario: &Scenario,
    spec: &DroneSpec,
    outbox: Box<dyn LineSink>,
    inbox: Receiver<String>,
) -> NavptsNode {
    let policy = PolicyState::new(&scenario.world.bounds, &spec.start_pose, &scenario.policy);
    NavptsNode::new(
        spec.id,
        initial_state(scenario, spec),
        policy,
        node_config(scenario),
        outbox,
        inbox,
    )
}

fn sample(tick: u64, t: f64, sim: &DroneSim, node: &NavptsNode) -> TrajectorySample {
    TrajectorySample {
        tick,
        sim_time: t,
        drone_id: sim.spec.id,
        truth: sim.truth.pose,
        estimate: node.ekf().pose(),
        frame: node.ekf().frame,
        cov_trace: node.ekf().cov.trace(),
    }
}

fn count(stats: &mut RunStats, r: &TickReport) {
    stats.ekf_updates += r.updates as u64;
    stats.ekf_rejected += r.rejected as u64;
    stats.forwarded_observations += r.forwarded as u64;
    stats.keyposes += u64::from(r.keypose);
}

/// Runs `scenario` with `seed` and assembles the report.
pub fn run_scenario(scenario: &Scenario, seed: u64, mode: RunMode) -> Result<RunReport, RunError> {
    scenario.validate()?;
    let (station, samples, stats) = match mode {
        RunMode::Lockstep => run_lockstep(scenario, seed)?,
        RunMode::Threaded => run_threaded(scenario, seed)?,
    };
    Ok(RunReport::assemble(
        scenario, seed, mode, &station, samples, stats,
    ))
}

type RunOutput = (GroundStation, Vec<TrajectorySample>, RunStats);

fn run_lockstep(scenario: &Scenario, seed: u64) -> Result<RunOutput, RunError> {
    let mut station = GroundStation::new(station_config(scenario));
    let (station_tx, station_rx) = unbounded();
    let mut sims = Vec::new();
    let mut nodes = Vec::new();
    for spec in &scenario.drones {
        let (to_node, node_rx) = channel_pair();
        station.attach(spec.id, Box::new(to_node));
        nodes.push(make_node(
            scenario,
            spec,
            Box::new(ChannelSink(station_tx.clone())),
            node_rx,
        ));
        sims.push(DroneSim::new(spec, seed));
    }
    station.drain(&station_rx);

    let mut samples = Vec::new();
    let mut stats = RunStats::default();
    for tick in 1..=scenario.ticks() {
        let t = tick as f64 * scenario.dt();
        for (sim, node) in sims.iter_mut().zip(nodes.iter_mut()) {
            let inputs = sim.advance(scenario, t)?;
            let r = node.tick(&inputs);
            count(&mut stats, &r);
            sim.cmd = r.command.unwrap_or_else(VelocityCommand::hover);
            samples.push(sample(tick, t, sim, node));
        }
        station.drain(&station_rx);
    }
    for node in nodes.iter_mut() {
        node.finish();
    }
    station.drain(&station_rx);
    Ok((station, samples, stats))
}

struct NodeResult {
    samples: Vec<TrajectorySample>,
    stats: RunStats,
    error: Option<SimError>,
}

fn run_threaded(scenario: &Scenario, seed: u64) -> Result<RunOutput, RunError> {
    let n = scenario.drones.len();
    let ticks = scenario.ticks();
    let barrier = Arc::new(Barrier::new(n + 1));
    let (station_tx, station_rx) = unbounded::<String>();
    let mut station = GroundStation::new(station_config(scenario));

    enum Link {
        InProcess(ChannelSink, Receiver<String>),
        Tcp(SocketAddr),
    }
    let mut links = Vec::new();
    let mut conn_rx = None;
    match scenario.transport.kind {
        TransportKind::Inprocess => {
            for spec in &scenario.drones {
                let (to_node, node_rx) = channel_pair();
                station.attach(spec.id, Box::new(to_node));
                links.push(Link::InProcess(ChannelSink(station_tx.clone()), node_rx));
            }
        }
        TransportKind::Tcp => {
            let listener = TcpListener::bind(("127.0.0.1", scenario.transport.port))?;
            let addr = listener.local_addr()?;
            conn_rx = Some(serve_tcp(listener, station_tx.clone()));
            links.extend(scenario.drones.iter().map(|_| Link::Tcp(addr)));
        }
    }
    drop(station_tx);

    let mut handles = Vec::new();
    for (spec, link) in scenario.drones.iter().zip(links) {
        let (outbox, inbox): (Box<dyn LineSink>, Receiver<String>) = match link {
            Link::InProcess(sink, rx) => (Box::new(sink), rx),
            Link::Tcp(addr) => {
                let (sink, rx) = connect_tcp(addr)?;
                (Box::new(sink), rx)
            }
        };
        let scenario = scenario.clone();
        let spec = spec.clone();
        let barrier = Arc::clone(&barrier);
        handles.push(thread::spawn(move || {
            let mut node = make_node(&scenario, &spec, outbox, inbox);
            let mut sim = DroneSim::new(&spec, seed);
            let mut result = NodeResult {
                samples: Vec::new(),
                stats: RunStats::default(),
                error: None,
            };
            barrier.wait();
            for tick in 1..=ticks {
                let t = tick as f64 * scenario.dt();
                match sim.advance(&scenario, t) {
                    Ok(inputs) => {
                        let r = node.tick(&inputs);
                        count(&mut result.stats, &r);
                        sim.cmd = r.command.unwrap_or_else(VelocityCommand::hover);
                    }
                    Err(e) => {
                        result.error.get_or_insert(e);
                        sim.cmd = VelocityCommand::hover();
                    }
                }
                result.samples.push(sample(tick, t, &sim, &node));
                barrier.wait();
            }
            node.finish();
            result
        }));
    }

    // every drone must have announced itself before the clock starts
    let deadline = Instant::now() + Duration::from_secs(10);
    while (0..n).any(|i| station.map().frame_of(scenario.drones[i].id).is_none()) {
        if let Some(rx) = &conn_rx {
            while let Ok(c) = rx.try_recv() {
                station.attach(c.drone, Box::new(c.sink));
            }
        }
        if let Ok(line) = station_rx.recv_timeout(Duration::from_millis(5)) {
            station.handle_line(&line);
        }
        if Instant::now() > deadline {
            return Err(RunError::Runtime(
                "drones did not connect to the station".into(),
            ));
        }
    }
    if let Some(rx) = &conn_rx {
        while let Ok(c) = rx.try_recv() {
            station.attach(c.drone, Box::new(c.sink));
        }
    }
    barrier.wait();
    for _ in 0..ticks {
        barrier.wait();
        station.drain(&station_rx);
    }
    let deadline = Instant::now() + Duration::from_secs(30);
    while station.finished().len() < n && Instant::now() < deadline {
        match station_rx.recv_timeout(Duration::from_millis(20)) {
            Ok(line) => station.handle_line(&line),
            Err(crossbeam_channel::RecvTimeoutError::Disconnected) => break,
            Err(crossbeam_channel::RecvTimeoutError::Timeout) => {}
        }
    }
    station.drain(&station_rx);

    let mut samples = Vec::new();
    let mut stats = RunStats::default();
    let mut first_error = None;
    for h in handles {
        let r = h
            .join()
            .map_err(|_| RunError::Runtime("a node thread panicked".into()))?;
        samples.extend(r.samples);
        stats.add(&r.stats);
        if first_error.is_none() {
            first_error = r.error;
        }
    }
    if let Some(e) = first_error {
        return Err(e.into());
    }
    samples.sort_by_key(|s| (s.tick, s.drone_id));
    Ok((station, samples, stats))
}
