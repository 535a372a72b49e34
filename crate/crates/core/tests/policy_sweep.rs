use mss_core::geom::Pose6D;
use mss_core::swarm::policy::{choose_destination, PolicyConfig, PolicyState};
use mss_core::worldsim::Bounds;
use nalgebra::Vector3;

fn two_by_two() -> PolicyState {
    let bounds = Bounds {
        min: [0.0, 0.0, 0.0],
        max: [2.0, 2.0, 2.0],
    };
    let cfg = PolicyConfig {
        cell_size: 1.0,
        altitude: 1.0,
        ..PolicyConfig::default()
    };
    PolicyState::new(&bounds, &Pose6D::identity(), &cfg)
}

/// Teleports onto each chosen target and records the order of arrival.
fn visit_order(state: &mut PolicyState, start: Vector3<f64>, steps: usize) -> Vec<usize> {
    let mut at = start;
    let mut order = Vec::new();
    for _ in 0..steps {
        choose_destination(state, &Pose6D::from_translation(at.x, at.y, at.z));
        let target = state.target.expect("a sweep always has a target");
        order.push(target);
        at = state.cells[target];
    }
    order
}

#[test]
fn two_by_two_from_corner_goes_nearest_first_with_index_ties() {
    // cells: 0 (0.5, 0.5), 1 (1.5, 0.5), 2 (0.5, 1.5), 3 (1.5, 1.5)
    // from cell 0, cells 1 and 2 tie at 1 m and the lower index wins; from 1, cell 3 is nearest
    let mut s = two_by_two();
    let order = visit_order(&mut s, Vector3::new(0.5, 0.5, 1.0), 3);
    assert_eq!(order, vec![1, 3, 2]);
}

#[test]
fn sweep_restarts_and_keeps_moving() {
    let mut s = two_by_two();
    let order = visit_order(&mut s, Vector3::new(0.5, 0.5, 1.0), 12);
    assert!(s.sweeps >= 3);
    assert!(
        order.windows(2).all(|w| w[0] != w[1]),
        "policy stalled: {order:?}"
    );
}

#[test]
fn command_speed_is_bounded_far_from_target() {
    let mut s = two_by_two();
    let cmd = choose_destination(&mut s, &Pose6D::from_translation(-30.0, 40.0, 1.0));
    assert!((cmd.body_velocity.norm() - PolicyConfig::default().max_speed).abs() < 1e-12);
}
