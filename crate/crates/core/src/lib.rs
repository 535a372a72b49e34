//! Cooperative marker-map building for a team of simulated quadrotors.
//!
//! Each drone localizes with an EKF fed by odometry and fiducial-marker
//! detections; a ground station keeps the shared marker map, merges
//! per-drone coordinate frames once they share a marker, and refines the
//! merged map with keypose bundle adjustment.

pub mod ba;
pub mod ekf;
pub mod geom;
pub mod mapstore;
pub mod merge;
pub mod metrics;
pub mod plot;
pub mod report;
pub mod scenario;
pub mod swarm;
pub mod worldsim;
