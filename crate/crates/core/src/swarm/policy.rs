//! Behavior generation: a sweep over a horizontal grid of waypoints.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geom::{rotation_z, Pose6D};
use crate::worldsim::{Bounds, VelocityCommand};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    /// Target edge length of a grid cell, meters.
    pub cell_size: f64,
    /// Flight altitude of the cell centers, meters.
    pub altitude: f64,
    /// A cell counts as visited once the drone is this close to its center.
    pub visit_radius: f64,
    pub max_speed: f64,
    /// Proportional gain from distance to commanded speed.
    pub gain: f64,
    /// Constant yaw rate that sweeps the forward camera around.
    pub yaw_rate: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            cell_size: 1.5,
            altitude: 1.2,
            visit_radius: 0.3,
            max_speed: 0.5,
            gain: 1.0,
            yaw_rate: 0.4,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [self.cell_size, self.visit_radius, self.max_speed, self.gain];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(
                "policy cell_size, visit_radius, max_speed and gain must be positive".into(),
            );
        }
        if !self.altitude.is_finite() || !self.yaw_rate.is_finite() {
            return Err("policy altitude and yaw_rate must be finite".into());
        }
        Ok(())
    }
}

/// Grid cell centers (row-major) and sweep progress, in the drone's frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub cells: Vec<Vector3<f64>>,
    pub visited: Vec<bool>,
    pub target: Option<usize>,
    pub sweeps: u32,
    config: PolicyConfig,
}

impl PolicyState {
    /// Builds the grid over `bounds` in world coordinates and expresses it
    /// in the frame whose origin is `frame_origin`.
    pub fn new(bounds: &Bounds, frame_origin: &Pose6D, config: &PolicyConfig) -> Self {
        let to_frame = frame_origin.inverse();
        let n = |axis: usize| {
            (((bounds.max[axis] - bounds.min[axis]) / config.cell_size).floor() as usize).max(1)
        };
        let (nx, ny) = (n(0), n(1));
        let z = config.altitude.clamp(bounds.min[2], bounds.max[2]);
        let mut cells = Vec::with_capacity(nx * ny);
        for iy in 0..ny {
            for ix in 0..nx {
                let x =
                    bounds.min[0] + (ix as f64 + 0.5) * (bounds.max[0] - bounds.min[0]) / nx as f64;
                let y =
                    bounds.min[1] + (iy as f64 + 0.5) * (bounds.max[1] - bounds.min[1]) / ny as f64;
                cells.push(to_frame.transform_point(&Vector3::new(x, y, z)));
            }
        }
        Self::from_cells(cells, config)
    }

    pub fn from_cells(cells: Vec<Vector3<f64>>, config: &PolicyConfig) -> Self {
        Self {
            visited: vec![false; cells.len()],
            cells,
            target: None,
            sweeps: 0,
            config: config.clone(),
        }
    }

    /// Re-expresses the waypoints after the drone's frame was merged.
    pub fn transform(&mut self, rt: &Pose6D) {
        for c in &mut self.cells {
            *c = rt.transform_point(c);
        }
    }

    fn nearest_unvisited(&self, p: &Vector3<f64>) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in self.cells.iter().enumerate() {
            if self.visited[i] {
                continue;
            }
            let d = (c - p).norm();
            // strict comparison keeps the lowest index on ties
            if best.is_none_or(|(_, bd)| d < bd - 1e-12) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    }
}

/// Next velocity command toward the current waypoint.
pub fn choose_destination(state: &mut PolicyState, pose: &Pose6D) -> VelocityCommand {
    if state.cells.is_empty() {
        return VelocityCommand::hover();
    }
    let cfg = state.config.clone();
    for (i, c) in state.cells.iter().enumerate() {
        if (c - pose.t).norm() <= cfg.visit_radius {
            state.visited[i] = true;
        }
    }
    if state.visited.iter().all(|v| *v) {
        state.visited.iter_mut().for_each(|v| *v = false);
        state.sweeps += 1;
        // the cell we are sitting on stays done so the sweep moves on
        for (i, c) in state.cells.iter().enumerate() {
            if (c - pose.t).norm() <= cfg.visit_radius {
                state.visited[i] = true;
            }
        }
        if state.visited.iter().all(|v| *v) {
            state.visited.iter_mut().for_each(|v| *v = false);
        }
    }
    if state.target.is_none_or(|t| state.visited[t]) {
        state.target = state.nearest_unvisited(&pose.t);
    }
    let Some(target) = state.target else {
        return VelocityCommand::hover();
    };
    let delta = state.cells[target] - pose.t;
    let dist = delta.norm();
    let speed = (cfg.gain * dist).min(cfg.max_speed);
    let world_vel = if dist > 0.0 {
        delta * (speed / dist)
    } else {
        Vector3::zeros()
    };
    let yaw = pose.euler()[2];
    VelocityCommand {
        body_velocity: rotation_z(-yaw) * world_vel,
        yaw_rate: cfg.yaw_rate,
    }
}
