mod common;

use common::{random_pose, synthetic};
use mss_core::ba::{optimize, BaConfig, BaProblem, Keypose, KeyposeObservation, Termination};
use mss_core::geom::{Covariance6, DroneId, FrameId, MarkerId, Pose6D};
use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn numeric_jacobian(problem: &BaProblem, vars: &[Vector6<f64>]) -> DMatrix<f64> {
    let base = problem.residuals_at(vars).values;
    let h = 1e-6;
    let mut j = DMatrix::zeros(base.len(), 6 * vars.len());
    for v in 0..vars.len() {
        for c in 0..6 {
            let mut plus = vars.to_vec();
            let mut minus = vars.to_vec();
            plus[v][c] += h;
            minus[v][c] -= h;
            let d = (problem.residuals_at(&plus).values - problem.residuals_at(&minus).values)
                / (2.0 * h);
            j.column_mut(6 * v + c).copy_from(&d);
        }
    }
    j
}

#[test]
fn analytic_jacobian_matches_finite_differences() {
    let (problem, _, _) = synthetic(11, 4, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vars: Vec<Vector6<f64>> = problem
        .initial_state()
        .iter()
        .map(|v| v + Vector6::from_fn(|_, _| rng.random_range(-0.05..0.05)))
        .collect();
    let analytic = problem.residuals_at(&vars).to_dense();
    let numeric = numeric_jacobian(&problem, &vars);
    let scale = numeric.amax().max(1.0);
    let err = (&analytic - &numeric).amax();
    assert!(err < 1e-5 * scale, "jacobian mismatch {err}");
}

#[test]
fn jacobian_has_two_blocks_per_row() {
    let (problem, _, _) = synthetic(3, 3, 4);
    let res = problem.residuals();
    assert_eq!(res.num_columns(), 6 * (3 - 1) + 6 * 4);
    let dense = res.to_dense();
    let rows = res.values.len() / 6;
    let mut per_row = vec![0usize; rows];
    for (row, _, _) in &res.blocks {
        per_row[*row] += 1;
    }
    for (row, count) in per_row.iter().enumerate() {
        assert!(*count == 1 || *count == 2, "row {row} has {count} blocks");
        let nonzero_blocks = (0..res.num_variables)
            .filter(|v| dense.view((6 * row, 6 * v), (6, 6)).amax() > 0.0)
            .count();
        assert!(nonzero_blocks <= 2);
    }
}

#[test]
fn residuals_are_gauge_invariant() {
    let (problem, _, _) = synthetic(21, 3, 4);
    let shift = Pose6D::from_translation(1.5, -2.0, 0.7);
    let turn = Pose6D::from_euler([0.3, 0.1, -0.2], [0.2, -0.3, 1.1]);
    for (g, tol) in [(shift, 1e-10), (turn, 1e-9)] {
        let mut moved = problem.clone();
        for k in &mut moved.keyposes {
            k.pose = g.compose(&k.pose);
        }
        for m in moved.markers.values_mut() {
            *m = g.compose(m);
        }
        let a = problem.residuals().values;
        let b = moved.residuals().values;
        assert!((a - b).amax() < tol);
    }
}

#[test]
fn already_optimal_problem_stops_immediately() {
    let (problem, _, _) = synthetic(8, 3, 3);
    let sol = optimize(&problem, &BaConfig::default()).unwrap();
    assert!(sol.report.iterations <= 1);
    assert!(sol.report.final_cost < 1e-20);
}

#[test]
fn recovers_perturbed_poses() {
    let (mut problem, keys, markers) = synthetic(42, 6, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for k in problem.keyposes.iter_mut().skip(1) {
        k.pose = k.pose.compose(&random_pose(&mut rng, 0.1, 0.05));
    }
    for m in problem.markers.values_mut() {
        *m = m.compose(&random_pose(&mut rng, 0.1, 0.05));
    }
    let sol = optimize(&problem, &BaConfig::default()).unwrap();
    assert!(sol.report.final_cost < 1e-12 * sol.report.initial_cost.max(1.0));
    for w in sol.report.cost_trace.windows(2) {
        assert!(w[1] < w[0]);
    }
    assert!(sol.report.cost_trace.first().copied().unwrap_or(0.0) < sol.report.initial_cost);
    assert_ne!(sol.report.termination, Termination::MaxIterations);
    for (est, truth) in sol.keyposes.iter().zip(&keys) {
        let (dt, da) = est.distance_to(truth);
        assert!(dt < 1e-6 && da < 1e-6);
    }
    for (id, truth) in &markers {
        let (dt, da) = sol.markers[id].distance_to(truth);
        assert!(dt < 1e-6 && da < 1e-6);
    }
}

#[test]
fn anchor_keypose_stays_fixed() {
    let (mut problem, _, _) = synthetic(7, 4, 3);
    let anchor = problem.keyposes[0].pose;
    for m in problem.markers.values_mut() {
        *m = m.compose(&Pose6D::from_translation(0.05, 0.0, 0.0));
    }
    let sol = optimize(&problem, &BaConfig::default()).unwrap();
    assert_eq!(sol.keyposes[0], anchor);
}

/// Residuals with every keypose (anchor included) and marker set from `vars`.
fn residuals_free(problem: &BaProblem, vars: &[Vector6<f64>]) -> DVector<f64> {
    let mut p = problem.clone();
    let nk = p.keyposes.len();
    for (k, v) in p.keyposes.iter_mut().zip(vars) {
        k.pose = Pose6D::from_vector(v);
    }
    for (m, v) in p.markers.values_mut().zip(&vars[nk..]) {
        *m = Pose6D::from_vector(v);
    }
    p.residuals().values
}

#[test]
fn marker_covariances_match_dense_inverse() {
    let (mut problem, _, _) = synthetic(31, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (i, k) in problem.keyposes.iter_mut().enumerate() {
        let a = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-0.05..0.05));
        k.cov = Covariance6(
            Matrix6::from_fn(|r, c| (&a * a.transpose())[(r, c)])
                + Matrix6::identity() * 1e-4 * (i + 1) as f64,
        );
        for o in &mut k.observations {
            let n = Pose6D::from_euler(
                [0.0; 3].map(|_| rng.random_range(-0.01..0.01)),
                [0.0; 3].map(|_| rng.random_range(-0.02..0.02)),
            );
            o.rel_pose = n.inverse().compose(&o.rel_pose);
        }
    }
    let sol = optimize(&problem, &BaConfig::default()).unwrap();
    assert_eq!(sol.marker_covariances.len(), problem.markers.len());

    // dense oracle at the solution: finite-difference Jacobian over all
    // keyposes and markers, plus each keypose prior scaled by the count
    let mut at = problem.clone();
    for (k, p) in at.keyposes.iter_mut().zip(&sol.keyposes) {
        k.pose = *p;
    }
    at.markers = sol.markers.clone();
    let vars: Vec<Vector6<f64>> = at
        .keyposes
        .iter()
        .map(|k| k.pose.to_vector())
        .chain(at.markers.values().map(|m| m.to_vector()))
        .collect();
    let n = 6 * vars.len();
    let base = residuals_free(&at, &vars);
    let mut j = DMatrix::zeros(base.len(), n);
    let h = 1e-6;
    for v in 0..vars.len() {
        for c in 0..6 {
            let mut plus = vars.clone();
            let mut minus = vars.clone();
            plus[v][c] += h;
            minus[v][c] -= h;
            let d = (residuals_free(&at, &plus) - residuals_free(&at, &minus)) / (2.0 * h);
            j.column_mut(6 * v + c).copy_from(&d);
        }
    }
    let mut info = j.transpose() * &j;
    let nk = at.keyposes.len();
    for (i, k) in at.keyposes.iter().enumerate() {
        let prior = (k.cov.0 * nk as f64).try_inverse().unwrap();
        let mut block = info.view_mut((6 * i, 6 * i), (6, 6));
        block += prior;
    }
    let cov = info.try_inverse().unwrap();
    for (m, (id, c)) in sol.marker_covariances.iter().enumerate() {
        let o = 6 * (nk + m);
        let expect = cov.view((o, o), (6, 6));
        let err = (c.0 - expect).amax() / expect.amax();
        assert!(err < 1e-4, "marker {id}: relative error {err}");
    }
}

#[test]
fn gimbal_locked_relative_pose_is_handled() {
    // a wall marker seen square-on: relative pitch exactly -π/2
    let marker = Pose6D::from_euler([2.0, 0.0, 1.0], [std::f64::consts::FRAC_PI_2, 0.0, 0.0]);
    let extrinsics = Pose6D::from_euler(
        [0.0; 3],
        [
            -std::f64::consts::FRAC_PI_2,
            0.0,
            -std::f64::consts::FRAC_PI_2,
        ],
    );
    let keys = [
        Pose6D::from_translation(0.0, 0.0, 1.0),
        Pose6D::from_translation(0.0, 0.4, 1.0),
        Pose6D::from_translation(-0.5, -0.3, 1.2),
    ];
    let kps: Vec<Keypose> = keys
        .iter()
        .enumerate()
        .map(|(i, k)| Keypose {
            drone_id: DroneId(0),
            frame: FrameId(0),
            pose: *k,
            cov: Covariance6::zeros(),
            timestamp: i as f64,
            observations: vec![KeyposeObservation {
                marker_id: MarkerId(1),
                rel_pose: k.compose(&extrinsics).inverse().compose(&marker),
                noise: Covariance6::from_diagonal([1e-4, 1e-4, 1e-4, 4e-4, 4e-4, 4e-4]),
                extrinsics,
            }],
        })
        .collect();
    let beta = kps[0].observations[0].rel_pose.euler()[1];
    assert!(
        (beta.abs() - std::f64::consts::FRAC_PI_2).abs() < 1e-6,
        "pitch {beta}"
    );

    let exact = BaProblem::new(kps.clone(), [(MarkerId(1), marker)].into_iter().collect()).unwrap();
    let r = exact.residuals();
    assert!(r.values.iter().all(|v| v.is_finite()));
    assert!(r.values.amax() < 1e-8);

    let start = Pose6D::from_euler([2.05, 0.04, 0.97], [1.55, 0.03, -0.02]);
    let moved = BaProblem::new(kps, [(MarkerId(1), start)].into_iter().collect()).unwrap();
    let sol = optimize(&moved, &BaConfig::default()).unwrap();
    let (dt, da) = sol.markers[&MarkerId(1)].distance_to(&marker);
    assert!(dt < 1e-6 && da < 1e-6, "{dt} {da}");
}
