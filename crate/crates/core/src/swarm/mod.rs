//! Drone nodes, the ground station and the protocol between them.

pub mod node;
pub mod policy;
pub mod protocol;
pub mod runner;
pub mod station;
pub mod transport;
