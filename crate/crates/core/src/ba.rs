//! Keypose bundle adjustment over relative marker-pose observations.
//!
//! Variables are the non-anchor keyposes and the observed markers, each
//! parameterized as `(x, y, z, alpha, beta, gamma)`. One residual block per
//! observation compares the predicted marker pose in the camera frame,
//! `(keypose ∘ extrinsics)⁻¹ ∘ marker`, with the measured one: translation
//! difference and the rotation vector of `R_pred R_measᵀ`, whitened by the
//! detection noise carried through the measured lever arm. The rotation
//! vector stays well defined where the relative pose's Euler angles hit
//! gimbal lock, which happens whenever a camera faces a wall marker squarely. Levenberg-Marquardt solves the damped normal equations
//! by eliminating the (block-diagonal) keypose variables first.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{
    Cholesky, DMatrix, DVector, Matrix3, Matrix6, Rotation3, UnitQuaternion, Vector3, Vector6,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{
    euler_rotation_partials, euler_to_rotation, skew, vee, wrap_angle, Covariance6, DroneId,
    FrameId, MarkerId, Pose6D,
};

#[derive(Debug, Error, PartialEq)]
pub enum BaError {
    #[error("problem has no keyposes")]
    NoKeyposes,
    #[error("problem has no free variables")]
    NoVariables,
    #[error("keypose {0} has no observations")]
    UnobservedKeypose(usize),
    #[error("observation of {0} has no marker variable")]
    UnknownMarker(MarkerId),
    #[error("marker {0} is never observed")]
    UnobservedMarker(MarkerId),
    #[error("damped normal equations singular at damping {damping:e}")]
    Singular { damping: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaConfig {
    pub enabled: bool,
    /// Translation (m) since the last keypose that triggers a new one.
    pub keypose_distance: f64,
    /// Rotation (rad) since the last keypose that triggers a new one.
    pub keypose_angle: f64,
    /// Run adjustment after this many new keyposes (and after every merge).
    pub keyposes_per_run: usize,
    pub max_iterations: usize,
    pub min_relative_decrease: f64,
    pub gradient_tolerance: f64,
    /// Initial damping, relative to the diagonal of the normal matrix.
    pub initial_damping: f64,
    pub max_damping: f64,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            keypose_distance: 0.5,
            keypose_angle: 0.35,
            keyposes_per_run: 10,
            max_iterations: 100,
            min_relative_decrease: 1e-9,
            gradient_tolerance: 1e-10,
            initial_damping: 1e-4,
            max_damping: 1e12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyposeObservation {
    pub marker_id: MarkerId,
    pub rel_pose: Pose6D,
    /// Per-axis detection noise: the covariance of the camera-pose
    /// perturbation behind `rel_pose`.
    pub noise: Covariance6,
    pub extrinsics: Pose6D,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypose {
    pub drone_id: DroneId,
    pub frame: FrameId,
    pub pose: Pose6D,
    /// Filter covariance of `pose` when it was recorded.
    #[serde(default)]
    pub cov: Covariance6,
    pub timestamp: f64,
    pub observations: Vec<KeyposeObservation>,
}

/// New keypose when moved or turned enough since the last one, and a marker is in view.
pub fn select_keypose(
    current: &Pose6D,
    last: Option<&Pose6D>,
    marker_visible: bool,
    config: &BaConfig,
) -> bool {
    if !marker_visible {
        return false;
    }
    match last {
        None => true,
        Some(last) => {
            let (dt, da) = last.distance_to(current);
            dt > config.keypose_distance || da > config.keypose_angle
        }
    }
}

/// Keyposes plus marker variables; keypose 0 is the gauge anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct BaProblem {
    pub keyposes: Vec<Keypose>,
    pub markers: BTreeMap<MarkerId, Pose6D>,
}

struct Obs {
    keypose: usize,
    marker: usize,
    measured: Pose6D,
    extrinsics: Pose6D,
    whiten: Matrix6<f64>,
}

/// Residual vector and block-sparse Jacobian.
#[derive(Clone, Debug)]
pub struct Residuals {
    pub values: DVector<f64>,
    /// `(observation index, variable index, 6×6 block)`.
    pub blocks: Vec<(usize, usize, Matrix6<f64>)>,
    pub num_variables: usize,
}

impl Residuals {
    pub fn num_columns(&self) -> usize {
        6 * self.num_variables
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.values.len(), self.num_columns());
        for (row, var, b) in &self.blocks {
            j.view_mut((6 * row, 6 * var), (6, 6)).copy_from(b);
        }
        j
    }

    pub fn cost(&self) -> f64 {
        0.5 * self.values.norm_squared()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Gradient,
    RelativeDecrease,
    MaxIterations,
    /// Every step was rejected up to the damping ceiling.
    Stalled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaReport {
    pub iterations: usize,
    pub accepted_steps: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub damping_trace: Vec<f64>,
    /// Cost after each accepted step.
    pub cost_trace: Vec<f64>,
    pub termination: Termination,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaSolution {
    pub keyposes: Vec<Pose6D>,
    pub markers: BTreeMap<MarkerId, Pose6D>,
    /// Marginal covariance of each marker at the solution, from the
    /// Gauss-Newton Hessian with the anchor released and every keypose held
    /// by its own covariance. Empty when that system is singular.
    pub marker_covariances: BTreeMap<MarkerId, Covariance6>,
    pub report: BaReport,
}

impl BaProblem {
    pub fn new(
        keyposes: Vec<Keypose>,
        markers: BTreeMap<MarkerId, Pose6D>,
    ) -> Result<Self, BaError> {
        if keyposes.is_empty() {
            return Err(BaError::NoKeyposes);
        }
        let mut observed = BTreeSet::new();
        for (i, k) in keyposes.iter().enumerate() {
            if k.observations.is_empty() {
                return Err(BaError::UnobservedKeypose(i));
            }
            for o in &k.observations {
                if !markers.contains_key(&o.marker_id) {
                    return Err(BaError::UnknownMarker(o.marker_id));
                }
                observed.insert(o.marker_id);
            }
        }
        if let Some(m) = markers.keys().find(|m| !observed.contains(m)) {
            return Err(BaError::UnobservedMarker(*m));
        }
        let p = Self { keyposes, markers };
        if p.num_variables() == 0 {
            return Err(BaError::NoVariables);
        }
        Ok(p)
    }

    pub fn num_variables(&self) -> usize {
        self.keyposes.len() - 1 + self.markers.len()
    }

    fn marker_ids(&self) -> Vec<MarkerId> {
        self.markers.keys().copied().collect()
    }

    /// Initial variable vector: free keyposes first, then markers by id.
    pub fn initial_state(&self) -> Vec<Vector6<f64>> {
        self.keyposes[1..]
            .iter()
            .map(|k| k.pose.to_vector())
            .chain(self.markers.values().map(|m| m.to_vector()))
            .collect()
    }

    fn observations(&self) -> Vec<Obs> {
        let ids = self.marker_ids();
        let mut out = Vec::new();
        for (ki, k) in self.keyposes.iter().enumerate() {
            for o in &k.observations {
                let mi = ids.binary_search(&o.marker_id).expect("validated marker");
                out.push(Obs {
                    keypose: ki,
                    marker: mi,
                    measured: o.rel_pose,
                    extrinsics: o.extrinsics,
                    whiten: whitening(&residual_covariance(&o.noise, &o.rel_pose.t)),
                });
            }
        }
        out
    }

    /// Residuals and Jacobian at the problem's own poses.
    pub fn residuals(&self) -> Residuals {
        self.residuals_at(&self.initial_state())
    }

    /// Residuals and Jacobian at an explicit variable vector.
    pub fn residuals_at(&self, vars: &[Vector6<f64>]) -> Residuals {
        evaluate(self, &self.observations(), vars, true)
    }

    pub fn cost_at(&self, vars: &[Vector6<f64>]) -> f64 {
        evaluate(self, &self.observations(), vars, false).cost()
    }

    fn unpack(&self, vars: &[Vector6<f64>]) -> BaSolution {
        let nk = self.keyposes.len() - 1;
        let mut keyposes = vec![self.keyposes[0].pose];
        keyposes.extend(vars[..nk].iter().map(Pose6D::from_vector));
        let markers = self
            .marker_ids()
            .into_iter()
            .zip(vars[nk..].iter())
            .map(|(id, v)| (id, Pose6D::from_vector(v)))
            .collect();
        BaSolution {
            keyposes,
            markers,
            marker_covariances: BTreeMap::new(),
            report: BaReport {
                iterations: 0,
                accepted_steps: 0,
                initial_cost: 0.0,
                final_cost: 0.0,
                damping_trace: vec![],
                cost_trace: vec![],
                termination: Termination::Gradient,
            },
        }
    }
}

/// Covariance of one residual block given the detection noise: with
/// `rel = N⁻¹ ∘ rel_true`, the residual is `(t_N - [t]ₓ n, n)` to first order.
pub fn residual_covariance(noise: &Covariance6, t: &Vector3<f64>) -> Covariance6 {
    let mut g = Matrix6::identity();
    g.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(t)));
    Covariance6(g * noise.0 * g.transpose()).symmetrized()
}

/// Inverse of the left Jacobian of SO(3) at rotation vector `phi`.
fn left_jacobian_inverse(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    let c = if theta < 1e-6 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - 0.5 * k + c * k * k
}

fn whitening(cov: &Covariance6) -> Matrix6<f64> {
    match Cholesky::new(cov.symmetrized().0) {
        Some(ch) => ch.l().try_inverse().unwrap_or_else(Matrix6::identity),
        None => {
            let d = Vector6::from_fn(|i, _| 1.0 / cov.0[(i, i)].max(1e-12).sqrt());
            Matrix6::from_diagonal(&d)
        }
    }
}

fn evaluate(problem: &BaProblem, obs: &[Obs], vars: &[Vector6<f64>], jacobian: bool) -> Residuals {
    evaluate_gauge(problem, obs, vars, jacobian, false)
}

/// With `free_anchor` the first keypose is a variable too and `vars` starts with it.
fn evaluate_gauge(
    problem: &BaProblem,
    obs: &[Obs],
    vars: &[Vector6<f64>],
    jacobian: bool,
    free_anchor: bool,
) -> Residuals {
    let shift = usize::from(free_anchor);
    let nk = problem.keyposes.len() - 1 + shift;
    let anchor = problem.keyposes[0].pose.to_vector();
    let mut values = DVector::zeros(6 * obs.len());
    let mut blocks = Vec::new();
    for (row, o) in obs.iter().enumerate() {
        let kv = if o.keypose == 0 && !free_anchor {
            &anchor
        } else {
            &vars[o.keypose + shift - 1]
        };
        let mv = &vars[nk + o.marker];
        let (r, jk, jm) = observation_residual(kv, mv, &o.extrinsics, &o.measured, jacobian);
        values.rows_mut(6 * row, 6).copy_from(&(o.whiten * r));
        if jacobian {
            if o.keypose > 0 || free_anchor {
                blocks.push((row, o.keypose + shift - 1, o.whiten * jk));
            }
            blocks.push((row, nk + o.marker, o.whiten * jm));
        }
    }
    Residuals {
        values,
        blocks,
        num_variables: problem.num_variables() + 6 * shift,
    }
}

/// Unwhitened residual of one observation and its Jacobians with respect to
/// the keypose and marker 6-vectors.
fn observation_residual(
    keypose: &Vector6<f64>,
    marker: &Vector6<f64>,
    extrinsics: &Pose6D,
    measured: &Pose6D,
    jacobian: bool,
) -> (Vector6<f64>, Matrix6<f64>, Matrix6<f64>) {
    let ek = [keypose[3], keypose[4], keypose[5]];
    let em = [marker[3], marker[4], marker[5]];
    let rk = euler_to_rotation(ek);
    let rm = euler_to_rotation(em);
    let re = extrinsics.rotation();
    let tk = Vector3::new(keypose[0], keypose[1], keypose[2]);
    let tm = Vector3::new(marker[0], marker[1], marker[2]);
    let a = re.transpose() * rk.transpose();
    let rp = a * rm;
    let diff = tm - tk;
    let tp = re.transpose() * (rk.transpose() * diff - extrinsics.t);
    // through a quaternion: the trace-based angle turns NaN when rounding pushes
    // the trace past 3
    let phi = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
        rp * measured.rotation().transpose(),
    ))
    .scaled_axis();

    let mut r = Vector6::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&(tp - measured.t));
    r.fixed_rows_mut::<3>(3).copy_from(&phi);
    if !jacobian {
        return (r, Matrix6::zeros(), Matrix6::zeros());
    }

    let jl_inv = left_jacobian_inverse(&phi);
    let dk = euler_rotation_partials(ek);
    let dm = euler_rotation_partials(em);

    let mut jk = Matrix6::zeros();
    let mut jm = Matrix6::zeros();
    jk.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-a));
    jm.fixed_view_mut::<3, 3>(0, 0).copy_from(&a);
    for j in 0..3 {
        let dtp = re.transpose() * dk[j].transpose() * diff;
        jk.fixed_view_mut::<3, 1>(0, 3 + j).copy_from(&dtp);
        let drp = re.transpose() * dk[j].transpose() * rm;
        jk.fixed_view_mut::<3, 1>(3, 3 + j)
            .copy_from(&(jl_inv * vee(&(drp * rp.transpose()))));
        let drp = a * dm[j];
        jm.fixed_view_mut::<3, 1>(3, 3 + j)
            .copy_from(&(jl_inv * vee(&(drp * rp.transpose()))));
    }
    (r, jk, jm)
}

/// Levenberg-Marquardt on the problem. Accepted steps strictly decrease the cost.
pub fn optimize(problem: &BaProblem, config: &BaConfig) -> Result<BaSolution, BaError> {
    let obs = problem.observations();
    let nk = problem.keyposes.len() - 1;
    let nm = problem.markers.len();
    let mut vars = problem.initial_state();
    let mut res = evaluate(problem, &obs, &vars, true);
    let initial_cost = res.cost();
    let mut cost = initial_cost;
    let mut lambda = config.initial_damping;
    let mut report = BaReport {
        iterations: 0,
        accepted_steps: 0,
        initial_cost,
        final_cost: cost,
        damping_trace: vec![],
        cost_trace: vec![],
        termination: Termination::MaxIterations,
    };

    let mut normal = NormalEquations::build(&res, nk, nm);
    loop {
        if normal.gradient_norm() < config.gradient_tolerance {
            report.termination = Termination::Gradient;
            break;
        }
        if report.iterations >= config.max_iterations {
            report.termination = Termination::MaxIterations;
            break;
        }
        report.iterations += 1;
        report.damping_trace.push(lambda);
        let step = loop {
            match normal.solve(lambda) {
                Some(s) => break s,
                None => {
                    lambda *= 10.0;
                    if lambda > config.max_damping {
                        return Err(BaError::Singular { damping: lambda });
                    }
                }
            }
        };
        let trial: Vec<Vector6<f64>> = vars
            .iter()
            .zip(step.iter())
            .map(|(v, d)| {
                let mut n = v + d;
                for i in 3..6 {
                    n[i] = wrap_angle(n[i]);
                }
                n
            })
            .collect();
        let trial_cost = evaluate(problem, &obs, &trial, false).cost();
        if trial_cost < cost {
            let decrease = (cost - trial_cost) / cost.max(f64::MIN_POSITIVE);
            vars = trial;
            cost = trial_cost;
            report.accepted_steps += 1;
            report.cost_trace.push(cost);
            lambda = (lambda / 10.0).max(1e-15);
            res = evaluate(problem, &obs, &vars, true);
            normal = NormalEquations::build(&res, nk, nm);
            if decrease < config.min_relative_decrease {
                report.termination = Termination::RelativeDecrease;
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > config.max_damping {
                report.termination = Termination::Stalled;
                break;
            }
        }
    }
    report.final_cost = cost;
    let mut sol = problem.unpack(&vars);
    sol.report = report;
    if let Some(blocks) = marker_marginals(problem, &obs, &vars) {
        sol.marker_covariances = problem
            .marker_ids()
            .into_iter()
            .zip(blocks)
            .map(|(id, c)| (id, Covariance6(c).symmetrized()))
            .collect();
    }
    Ok(sol)
}

/// Marker marginals with every keypose free but tied to its recorded pose.
/// Keypose errors along one trajectory are strongly correlated, so together
/// they are taken to pin the gauge no better than a single keypose: each prior
/// covariance is scaled by the keypose count.
fn marker_marginals(
    problem: &BaProblem,
    obs: &[Obs],
    vars: &[Vector6<f64>],
) -> Option<Vec<Matrix6<f64>>> {
    let nk = problem.keyposes.len();
    let nm = problem.markers.len();
    let mut full = Vec::with_capacity(vars.len() + 1);
    full.push(problem.keyposes[0].pose.to_vector());
    full.extend_from_slice(vars);
    let res = evaluate_gauge(problem, obs, &full, true, true);
    let mut normal = NormalEquations::build(&res, nk, nm);
    for (h, k) in normal.hkk.iter_mut().zip(&problem.keyposes) {
        let mut prior = k.cov.symmetrized().0 * nk as f64;
        for i in 0..6 {
            prior[(i, i)] = prior[(i, i)].max(1e-12);
        }
        *h += prior.try_inverse()?;
    }
    normal.marker_marginals()
}

/// `JᵀJ` and `Jᵀr` split into keypose (block-diagonal) and marker parts.
struct NormalEquations {
    hkk: Vec<Matrix6<f64>>,
    hkm: BTreeMap<(usize, usize), Matrix6<f64>>,
    hmm: DMatrix<f64>,
    gk: Vec<Vector6<f64>>,
    gm: DVector<f64>,
}

impl NormalEquations {
    fn build(res: &Residuals, nk: usize, nm: usize) -> Self {
        let mut hkk = vec![Matrix6::zeros(); nk];
        let mut hkm = BTreeMap::new();
        let mut hmm = DMatrix::zeros(6 * nm, 6 * nm);
        let mut gk = vec![Vector6::zeros(); nk];
        let mut gm = DVector::zeros(6 * nm);
        // blocks arrive grouped by observation row
        let mut by_row: BTreeMap<usize, Vec<(usize, &Matrix6<f64>)>> = BTreeMap::new();
        for (row, var, b) in &res.blocks {
            by_row.entry(*row).or_default().push((*var, b));
        }
        for (row, vars) in by_row {
            let r: Vector6<f64> = res.values.fixed_rows::<6>(6 * row).into_owned();
            for &(vi, bi) in &vars {
                let g = bi.transpose() * r;
                if vi < nk {
                    gk[vi] += g;
                } else {
                    let mut seg = gm.fixed_rows_mut::<6>(6 * (vi - nk));
                    seg += g;
                }
                for &(vj, bj) in &vars {
                    let h = bi.transpose() * bj;
                    match (vi < nk, vj < nk) {
                        (true, true) => hkk[vi] += h,
                        (true, false) => {
                            *hkm.entry((vi, vj - nk)).or_insert_with(Matrix6::zeros) += h
                        }
                        (false, false) => {
                            let mut v = hmm.view_mut((6 * (vi - nk), 6 * (vj - nk)), (6, 6));
                            v += h;
                        }
                        (false, true) => {}
                    }
                }
            }
        }
        Self {
            hkk,
            hkm,
            hmm,
            gk,
            gm,
        }
    }

    fn gradient_norm(&self) -> f64 {
        self.gk
            .iter()
            .map(|g| g.amax())
            .fold(self.gm.amax(), f64::max)
    }

    /// Diagonal blocks of the marker part of `H⁻¹`: the inverse of the
    /// undamped Schur complement.
    fn marker_marginals(&self) -> Option<Vec<Matrix6<f64>>> {
        let nm = self.gm.len() / 6;
        let mut s = self.hmm.clone();
        for (k, h) in self.hkk.iter().enumerate() {
            let a_inv = Cholesky::new(*h)?.inverse();
            let blocks: Vec<_> = self.hkm.range((k, 0)..(k + 1, 0)).collect();
            for &((_, m1), b1) in &blocks {
                let left = b1.transpose() * a_inv;
                for &((_, m2), b2) in &blocks {
                    let mut v = s.view_mut((6 * m1, 6 * m2), (6, 6));
                    v -= left * b2;
                }
            }
        }
        let s = 0.5 * (&s + s.transpose());
        let inv = Cholesky::new(s)?.inverse();
        Some(
            (0..nm)
                .map(|m| inv.fixed_view::<6, 6>(6 * m, 6 * m).into_owned())
                .collect(),
        )
    }

    /// Solves `(H + λ diag(H)) δ = -g` via the Schur complement on markers.
    fn solve(&self, lambda: f64) -> Option<Vec<Vector6<f64>>> {
        let nk = self.hkk.len();
        let nm = self.gm.len() / 6;
        let damp = |m: &Matrix6<f64>| {
            let mut d = *m;
            for i in 0..6 {
                d[(i, i)] += lambda * m[(i, i)].max(1e-12);
            }
            d
        };
        let mut a_inv = Vec::with_capacity(nk);
        for h in &self.hkk {
            a_inv.push(Cholesky::new(damp(h))?.inverse());
        }
        let mut s = self.hmm.clone();
        for i in 0..6 * nm {
            s[(i, i)] += lambda * self.hmm[(i, i)].max(1e-12);
        }
        let mut rhs = -self.gm.clone();
        let mut per_keypose: BTreeMap<usize, Vec<(usize, &Matrix6<f64>)>> = BTreeMap::new();
        for ((k, m), b) in &self.hkm {
            per_keypose.entry(*k).or_default().push((*m, b));
        }
        for (k, blocks) in &per_keypose {
            let ai = &a_inv[*k];
            for &(m1, b1) in blocks {
                let left = b1.transpose() * ai;
                let mut seg = rhs.fixed_rows_mut::<6>(6 * m1);
                seg += left * self.gk[*k];
                for &(m2, b2) in blocks {
                    let mut v = s.view_mut((6 * m1, 6 * m2), (6, 6));
                    v -= left * b2;
                }
            }
        }
        let dm = if nm > 0 {
            let s = 0.5 * (&s + s.transpose());
            Cholesky::new(s)?.solve(&rhs)
        } else {
            DVector::zeros(0)
        };
        let mut out = Vec::with_capacity(nk + nm);
        for k in 0..nk {
            let mut r = -self.gk[k];
            if let Some(blocks) = per_keypose.get(&k) {
                for &(m, b) in blocks {
                    r -= b * dm.fixed_rows::<6>(6 * m);
                }
            }
            out.push(a_inv[k] * r);
        }
        for m in 0..nm {
            out.push(dm.fixed_rows::<6>(6 * m).into_owned());
        }
        Some(out)
    }
}
