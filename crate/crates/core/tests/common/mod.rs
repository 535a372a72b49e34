#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use mss_core::ba::{BaProblem, Keypose, KeyposeObservation};
use mss_core::geom::{Covariance6, DroneId, FrameId, MarkerId, Pose6D};
use mss_core::scenario::Scenario;
use mss_core::worldsim::{CameraParams, NoiseConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub fn scenario_path(file: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(file)
}

pub fn bundled(file: &str) -> Scenario {
    Scenario::load(&scenario_path(file)).unwrap()
}

pub fn from_value(v: Value) -> Scenario {
    Scenario::from_json(&v.to_string()).unwrap()
}

pub fn noiseless(mut s: Scenario) -> Scenario {
    s.noise = NoiseConfig::noiseless();
    s
}

fn pose(t: [f64; 3], yaw: f64) -> Value {
    json!({"t": t, "euler": [0.0, 0.0, yaw]})
}

/// A 4 x 4 x 2.5 m room with one floor marker at (2, 2) and drones hovering
/// 1 m above the floor within sight of it.
pub fn one_marker_room(drones: &[([f64; 2], f64)], duration: f64) -> Scenario {
    let drones: Vec<Value> = drones
        .iter()
        .enumerate()
        .map(|(i, (xy, yaw))| json!({"id": i, "start_pose": pose([xy[0], xy[1], 1.0], *yaw)}))
        .collect();
    from_value(json!({
        "name": "one-marker-room",
        "seed": 1,
        "duration": duration,
        "world": {
            "bounds": {"min": [0.0, 0.0, 0.0], "max": [4.0, 4.0, 2.5]},
            "markers": [{"id": 7, "pose": pose([2.0, 2.0, 0.0], 0.4)}]
        },
        "drones": drones,
        "policy": {"altitude": 1.0}
    }))
}

pub fn random_pose(rng: &mut ChaCha8Rng, spread: f64, angle: f64) -> Pose6D {
    Pose6D::from_euler(
        [
            rng.random_range(-spread..spread),
            rng.random_range(-spread..spread),
            rng.random_range(-spread..spread),
        ],
        [
            rng.random_range(-angle..angle),
            rng.random_range(-angle..angle),
            rng.random_range(-angle..angle),
        ],
    )
}

/// Every keypose sees every marker, with exact relative poses.
pub fn synthetic(
    seed: u64,
    keyposes: usize,
    markers: usize,
) -> (BaProblem, Vec<Pose6D>, BTreeMap<MarkerId, Pose6D>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cams = CameraParams::default_pair();
    let truth_markers: BTreeMap<MarkerId, Pose6D> = (0..markers)
        .map(|i| (MarkerId(i as u16 + 1), random_pose(&mut rng, 3.0, 0.8)))
        .collect();
    let truth_keys: Vec<Pose6D> = (0..keyposes)
        .map(|_| random_pose(&mut rng, 2.0, 0.5))
        .collect();
    let noise = Covariance6::from_diagonal([1e-4, 1e-4, 1e-4, 4e-4, 4e-4, 4e-4]);
    let kps = truth_keys
        .iter()
        .enumerate()
        .map(|(i, k)| {
            let extrinsics = cams[i % cams.len()].extrinsics;
            let observations = truth_markers
                .iter()
                .filter_map(|(id, m)| {
                    let rel = k.compose(&extrinsics).inverse().compose(m);
                    (rel.euler()[1].abs() < 1.2).then_some(KeyposeObservation {
                        marker_id: *id,
                        rel_pose: rel,
                        noise: noise.clone(),
                        extrinsics,
                    })
                })
                .collect();
            Keypose {
                drone_id: DroneId(0),
                frame: FrameId(0),
                pose: *k,
                cov: Covariance6::zeros(),
                timestamp: i as f64,
                observations,
            }
        })
        .collect();
    let problem = BaProblem::new(kps, truth_markers.clone()).expect("valid synthetic problem");
    (problem, truth_keys, truth_markers)
}
