//! Keyframe pose graph with preintegrated IMU factors and GPS position
//! factors, solved by Levenberg–Marquardt on the state manifold.
//!
//! Node tangent order is `[δφ, δv, δp]`; rotations are retracted on the right,
//! velocity and position additively. IMU factors are whitened in the frame of
//! their first node, the frame in which the preintegration covariance is
//! expressed.

use nalgebra::{Cholesky, DMatrix, DVector, SMatrix};
use serde::{Deserialize, Serialize};

use crate::correction::{apply_correction, uncertainty_of, CorrectionModel, UncertaintyModel};
use crate::covariance::{propagate_batched, step_terms, StateCov, Transition};
use crate::error::{invalid, Error, Result};
use crate::preintegration::{integrate_increments, predict_state, ImuSequence, Increments, NavState};
use crate::so3::{hat, right_jacobian_inv};
use crate::{Mat3, Mat9, Rotation, Vec3, Vec9};

/// Added to every factor covariance before it is inverted.
pub const COV_REGULARIZATION: f64 = 1e-12;

/// A position fix: seconds, meters, per-axis standard deviation in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsFix {
    pub t: f64,
    pub p: Vec3,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImuFactor {
    pub i: usize,
    pub j: usize,
    pub inc: Increments,
    pub cov: StateCov,
    /// Product of the window's per-frame transitions, used to re-seed the
    /// factor covariance from a node marginal.
    pub transition: Option<Transition>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpsFactor {
    pub node: usize,
    pub p: Vec3,
    /// Position covariance (m²).
    pub cov: Mat3,
}

impl GpsFactor {
    pub fn isotropic(node: usize, p: Vec3, sigma: f64) -> Self {
        Self {
            node,
            p,
            cov: Mat3::identity() * (sigma * sigma),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseGraph {
    pub nodes: Vec<NavState>,
    pub imu_factors: Vec<ImuFactor>,
    pub gps_factors: Vec<GpsFactor>,
    pub gravity: Vec3,
    /// Nodes held at their current value.
    pub anchored: Vec<usize>,
}

impl PoseGraph {
    pub fn new(nodes: Vec<NavState>, gravity: Vec3) -> Self {
        Self {
            nodes,
            imu_factors: Vec::new(),
            gps_factors: Vec::new(),
            gravity,
            anchored: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(invalid("pose graph has no nodes"));
        }
        for f in &self.imu_factors {
            if f.i >= n || f.j >= n || f.i == f.j {
                return Err(invalid(format!("IMU factor ({}, {}) has invalid node indices", f.i, f.j)));
            }
            whitener9(&f.cov.0)?;
        }
        for f in &self.gps_factors {
            if f.node >= n {
                return Err(invalid(format!("GPS factor references node {} of {n}", f.node)));
            }
            whitener3(&f.cov)?;
        }
        for &a in &self.anchored {
            if a >= n {
                return Err(invalid(format!("anchored node {a} out of range")));
            }
        }
        for k in 0..n - 1 {
            if !self.imu_factors.iter().any(|f| f.i == k && f.j == k + 1) {
                return Err(invalid(format!("no IMU factor links nodes {k} and {}", k + 1)));
            }
        }
        if self.gps_factors.is_empty() && self.anchored.is_empty() {
            return Err(invalid("graph needs a GPS factor or an anchored node to fix the gauge"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    pub lambda0: f64,
    pub max_iters: usize,
    /// Relative cost decrease below which an accepted step ends the solve.
    pub cost_tol: f64,
    pub step_tol: f64,
    /// Central-difference Jacobians instead of the analytic ones.
    pub numeric_jacobians: bool,
    /// After convergence, add each window's propagated start-node marginal
    /// to its IMU factor covariance and solve once more.
    pub reseed_covariance: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            lambda0: 1e-4,
            max_iters: 100,
            cost_tol: 1e-9,
            step_tol: 1e-10,
            numeric_jacobians: false,
            reseed_covariance: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    /// Damping used at each iteration.
    pub damping: Vec<f64>,
    /// Whether each iteration's step was accepted.
    pub accepted: Vec<bool>,
    /// Cost at the end of each iteration.
    pub cost_trace: Vec<f64>,
}

/// World-frame IMU residual, predicted minus actual:
/// `[log(R_jᵀ·R_i·ΔR), v_i + gΔt + R_iΔv − v_j, p_i + v_iΔt + ½gΔt² + R_iΔp − p_j]`.
pub fn imu_residual(xi: &NavState, xj: &NavState, inc: &Increments, gravity: &Vec3) -> Vec9 {
    let pred = predict_state(xi, inc, gravity);
    let mut r = Vec9::zeros();
    r.fixed_rows_mut::<3>(0)
        .copy_from(&xj.r.inverse().compose(&pred.r).log());
    r.fixed_rows_mut::<3>(3).copy_from(&(pred.v - xj.v));
    r.fixed_rows_mut::<3>(6).copy_from(&(pred.p - xj.p));
    r
}

/// IMU residual rotated into the frame of node `i`:
/// `[r_φ, R_iᵀ r_v, R_iᵀ r_p]`.
pub fn imu_residual_local(xi: &NavState, xj: &NavState, inc: &Increments, gravity: &Vec3) -> Vec9 {
    let r = imu_residual(xi, xj, inc, gravity);
    let mut out = r;
    out.fixed_rows_mut::<3>(3)
        .copy_from(&xi.r.inverse_rotate(&r.fixed_rows::<3>(3).into()));
    out.fixed_rows_mut::<3>(6)
        .copy_from(&xi.r.inverse_rotate(&r.fixed_rows::<3>(6).into()));
    out
}

/// Local IMU residual with its Jacobians with respect to the tangents of
/// node `i` and node `j`.
pub fn imu_jacobians(xi: &NavState, xj: &NavState, inc: &Increments, gravity: &Vec3) -> (Vec9, Mat9, Mat9) {
    let dt = inc.dt;
    let rho = imu_residual_local(xi, xj, inc, gravity);
    let phi: Vec3 = rho.fixed_rows::<3>(0).into();
    let jr_inv = right_jacobian_inv(&phi);
    let err = xj.r.inverse().compose(&xi.r).compose(&inc.dr);
    let rit = xi.r.matrix().transpose();
    let u = xj.v - xi.v - gravity * dt;
    let s = xj.p - xi.p - xi.v * dt - gravity * (0.5 * dt * dt);

    let mut ji = Mat9::zeros();
    ji.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(jr_inv * inc.dr.matrix().transpose()));
    ji.fixed_view_mut::<3, 3>(3, 0).copy_from(&-hat(&(rit * u)));
    ji.fixed_view_mut::<3, 3>(3, 3).copy_from(&rit);
    ji.fixed_view_mut::<3, 3>(6, 0).copy_from(&-hat(&(rit * s)));
    ji.fixed_view_mut::<3, 3>(6, 3).copy_from(&(rit * dt));
    ji.fixed_view_mut::<3, 3>(6, 6).copy_from(&rit);

    let mut jj = Mat9::zeros();
    jj.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-jr_inv * err.matrix().transpose()));
    jj.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-rit));
    jj.fixed_view_mut::<3, 3>(6, 6).copy_from(&(-rit));
    (rho, ji, jj)
}

/// `p̂ − p`.
pub fn gps_residual(x: &NavState, p_hat: &Vec3) -> Vec3 {
    p_hat - x.p
}

/// `x ⊕ δ`.
pub fn retract(x: &NavState, delta: &Vec9) -> NavState {
    let dphi: Vec3 = delta.fixed_rows::<3>(0).into();
    NavState {
        r: x.r.compose(&Rotation::exp(&dphi)),
        v: x.v + delta.fixed_rows::<3>(3),
        p: x.p + delta.fixed_rows::<3>(6),
        t: x.t,
    }
}

/// Central-difference Jacobians of the local IMU residual.
pub fn imu_jacobians_numeric(xi: &NavState, xj: &NavState, inc: &Increments, gravity: &Vec3) -> (Mat9, Mat9) {
    const H: f64 = 1e-6;
    let mut ji = Mat9::zeros();
    let mut jj = Mat9::zeros();
    for c in 0..9 {
        let mut d = Vec9::zeros();
        d[c] = H;
        let col_i = (imu_residual_local(&retract(xi, &d), xj, inc, gravity)
            - imu_residual_local(&retract(xi, &-d), xj, inc, gravity))
            / (2.0 * H);
        let col_j = (imu_residual_local(xi, &retract(xj, &d), inc, gravity)
            - imu_residual_local(xi, &retract(xj, &-d), inc, gravity))
            / (2.0 * H);
        ji.set_column(c, &col_i);
        jj.set_column(c, &col_j);
    }
    (ji, jj)
}

/// `L⁻¹` for `Σ + εI = L·Lᵀ`; whitened residuals are `L⁻¹·r`.
fn whitener9(cov: &Mat9) -> Result<Mat9> {
    let reg = cov + Mat9::identity() * COV_REGULARIZATION;
    if reg.iter().any(|x| !x.is_finite()) {
        return Err(invalid("factor covariance has non-finite entries"));
    }
    let chol = Cholesky::new(reg).ok_or_else(|| invalid("IMU factor covariance is not positive definite"))?;
    chol.l()
        .try_inverse()
        .ok_or_else(|| invalid("IMU factor covariance is singular"))
}

fn whitener3(cov: &Mat3) -> Result<Mat3> {
    let reg = cov + Mat3::identity() * COV_REGULARIZATION;
    if reg.iter().any(|x| !x.is_finite()) {
        return Err(invalid("factor covariance has non-finite entries"));
    }
    let chol = Cholesky::new(reg).ok_or_else(|| invalid("GPS factor covariance is not positive definite"))?;
    chol.l()
        .try_inverse()
        .ok_or_else(|| invalid("GPS factor covariance is singular"))
}

struct Problem<'a> {
    graph: &'a PoseGraph,
    imu_w: Vec<Mat9>,
    gps_w: Vec<Mat3>,
    /// Column offset of each free node.
    offset: Vec<Option<usize>>,
    dim: usize,
    numeric: bool,
}

impl<'a> Problem<'a> {
    fn new(graph: &'a PoseGraph, numeric: bool) -> Result<Self> {
        let imu_w = graph
            .imu_factors
            .iter()
            .map(|f| whitener9(&f.cov.0))
            .collect::<Result<_>>()?;
        let gps_w = graph
            .gps_factors
            .iter()
            .map(|f| whitener3(&f.cov))
            .collect::<Result<_>>()?;
        let mut offset = Vec::with_capacity(graph.nodes.len());
        let mut dim = 0;
        for k in 0..graph.nodes.len() {
            if graph.anchored.contains(&k) {
                offset.push(None);
            } else {
                offset.push(Some(dim));
                dim += 9;
            }
        }
        Ok(Self {
            graph,
            imu_w,
            gps_w,
            offset,
            dim,
            numeric,
        })
    }

    fn cost(&self, nodes: &[NavState]) -> f64 {
        let g = &self.graph.gravity;
        let imu: f64 = self
            .graph
            .imu_factors
            .iter()
            .zip(&self.imu_w)
            .map(|(f, w)| (w * imu_residual_local(&nodes[f.i], &nodes[f.j], &f.inc, g)).norm_squared())
            .sum();
        let gps: f64 = self
            .graph
            .gps_factors
            .iter()
            .zip(&self.gps_w)
            .map(|(f, w)| (w * gps_residual(&nodes[f.node], &f.p)).norm_squared())
            .sum();
        imu + gps
    }

    /// Gauss–Newton system `(JᵀJ, Jᵀe)` of the whitened residuals.
    fn linearize(&self, nodes: &[NavState]) -> (DMatrix<f64>, DVector<f64>) {
        let mut h = DMatrix::zeros(self.dim, self.dim);
        let mut b = DVector::zeros(self.dim);
        let g = &self.graph.gravity;
        for (f, w) in self.graph.imu_factors.iter().zip(&self.imu_w) {
            let (xi, xj) = (&nodes[f.i], &nodes[f.j]);
            let (rho, ji, jj) = if self.numeric {
                let (ji, jj) = imu_jacobians_numeric(xi, xj, &f.inc, g);
                (imu_residual_local(xi, xj, &f.inc, g), ji, jj)
            } else {
                imu_jacobians(xi, xj, &f.inc, g)
            };
            let e = w * rho;
            let blocks = [(self.offset[f.i], w * ji), (self.offset[f.j], w * jj)];
            accumulate(&mut h, &mut b, &blocks, &e);
        }
        for (f, w) in self.graph.gps_factors.iter().zip(&self.gps_w) {
            let e = w * gps_residual(&nodes[f.node], &f.p);
            let mut j = SMatrix::<f64, 3, 9>::zeros();
            j.fixed_view_mut::<3, 3>(0, 6).copy_from(&(-w));
            accumulate(&mut h, &mut b, &[(self.offset[f.node], j)], &e);
        }
        (h, b)
    }

    fn retract_all(&self, nodes: &[NavState], delta: &DVector<f64>) -> Vec<NavState> {
        nodes
            .iter()
            .zip(&self.offset)
            .map(|(x, off)| match off {
                Some(o) => retract(x, &Vec9::from_iterator(delta.rows(*o, 9).iter().copied())),
                None => *x,
            })
            .collect()
    }
}

fn accumulate<const R: usize>(
    h: &mut DMatrix<f64>,
    b: &mut DVector<f64>,
    blocks: &[(Option<usize>, SMatrix<f64, R, 9>)],
    e: &SMatrix<f64, R, 1>,
) {
    for (oa, ja) in blocks {
        let Some(oa) = *oa else { continue };
        let mut rows = b.rows_mut(oa, 9);
        rows += ja.transpose() * e;
        for (ob, jb) in blocks {
            let Some(ob) = *ob else { continue };
            let mut view = h.view_mut((oa, ob), (9, 9));
            view += ja.transpose() * jb;
        }
    }
}

/// Largest damping tried before the solve is declared failed.
const LAMBDA_MAX: f64 = 1e16;
/// Costs below this are treated as an exact fit.
const COST_FLOOR: f64 = 1e-24;

/// Minimizes `Σ‖e_gps‖²_Σ + Σ‖e_imu‖²_Σ` over the free nodes.
pub fn solve(graph: &PoseGraph, options: &SolveOptions) -> Result<(PoseGraph, SolveReport)> {
    graph.validate()?;
    let (mut out, mut report) = solve_once(graph, options)?;
    if options.reseed_covariance {
        let reseeded = reseed(&out)?;
        let (second, r2) = solve_once(&reseeded, options)?;
        report.iterations += r2.iterations;
        report.final_cost = r2.final_cost;
        report.converged = r2.converged;
        report.damping.extend(r2.damping);
        report.accepted.extend(r2.accepted);
        report.cost_trace.extend(r2.cost_trace);
        out = PoseGraph {
            imu_factors: graph.imu_factors.clone(),
            ..second
        };
    }
    Ok((out, report))
}

fn solve_once(graph: &PoseGraph, options: &SolveOptions) -> Result<(PoseGraph, SolveReport)> {
    let problem = Problem::new(graph, options.numeric_jacobians)?;
    let mut nodes = graph.nodes.clone();
    let mut cost = problem.cost(&nodes);
    if !cost.is_finite() {
        return Err(invalid("initial cost is not finite"));
    }
    let mut report = SolveReport {
        initial_cost: cost,
        final_cost: cost,
        ..SolveReport::default()
    };
    let mut lambda = options.lambda0;
    if cost <= COST_FLOOR || problem.dim == 0 {
        report.converged = true;
        return Ok((graph.clone(), report));
    }
    let (mut h, mut b) = problem.linearize(&nodes);
    while report.iterations < options.max_iters {
        report.iterations += 1;
        report.damping.push(lambda);
        let mut damped = h.clone();
        for k in 0..problem.dim {
            damped[(k, k)] += lambda * h[(k, k)].max(1e-9);
        }
        let Some(chol) = damped.cholesky() else {
            report.accepted.push(false);
            report.cost_trace.push(cost);
            lambda *= 10.0;
            if lambda > LAMBDA_MAX {
                return Err(Error::SolverFailure {
                    reason: "normal equations singular after damping".into(),
                    report: Box::new(report),
                });
            }
            continue;
        };
        let delta = -chol.solve(&b);
        let step = delta.norm();
        let candidate = problem.retract_all(&nodes, &delta);
        let new_cost = problem.cost(&candidate);
        if new_cost.is_finite() && new_cost <= cost {
            report.accepted.push(true);
            report.cost_trace.push(new_cost);
            let decrease = (cost - new_cost) / cost;
            nodes = candidate;
            cost = new_cost;
            lambda *= 0.5;
            if decrease < options.cost_tol || step < options.step_tol || cost <= COST_FLOOR {
                report.converged = true;
                break;
            }
            (h, b) = problem.linearize(&nodes);
        } else {
            report.accepted.push(false);
            report.cost_trace.push(cost);
            lambda *= 10.0;
            if step < options.step_tol {
                report.converged = true;
                break;
            }
            if lambda > LAMBDA_MAX {
                break;
            }
        }
    }
    report.final_cost = cost;
    Ok((
        PoseGraph {
            nodes,
            ..graph.clone()
        },
        report,
    ))
}

/// Marginal covariance of every free node at the current estimate.
pub fn marginals(graph: &PoseGraph) -> Result<Vec<Option<Mat9>>> {
    graph.validate()?;
    let problem = Problem::new(graph, false)?;
    let (h, _) = problem.linearize(&graph.nodes);
    let inv = h
        .cholesky()
        .ok_or_else(|| Error::NumericDomain("information matrix is singular".into()))?
        .inverse();
    Ok(problem
        .offset
        .iter()
        .map(|o| o.map(|o| Mat9::from_iterator(inv.view((o, o), (9, 9)).iter().copied())))
        .collect())
}

fn reseed(graph: &PoseGraph) -> Result<PoseGraph> {
    let marg = marginals(graph)?;
    let mut out = graph.clone();
    for f in &mut out.imu_factors {
        if let (Some(t), Some(m)) = (&f.transition, &marg[f.i]) {
            let a = t.to_dense();
            f.cov = StateCov::symmetrized(f.cov.0 + a * m * a.transpose());
        }
    }
    Ok(out)
}

/// One node per GPS epoch, linked by IMU factors over the samples between
/// epochs. Epoch `t` maps to the first sample at or after `t`; an epoch at
/// the end of the stream maps past the last sample. Node states start from
/// `initial` and are dead-reckoned through the factors.
pub fn keyframe_graph(
    samples: &ImuSequence,
    correction: &CorrectionModel,
    uncertainty: &UncertaintyModel,
    gps: &[GpsFix],
    initial: &NavState,
    gravity: &Vec3,
) -> Result<PoseGraph> {
    const EDGE: f64 = 1e-9;
    if gps.is_empty() {
        return Err(invalid("GPS stream is empty"));
    }
    if samples.len() < 2 {
        return Err(invalid("IMU stream needs at least two samples"));
    }
    let corrected = apply_correction(samples, correction)?;
    let eta = uncertainty_of(samples, uncertainty)?;
    let n = corrected.len();
    let t_start = corrected.samples[0].t;
    let t_end = corrected.end_time().expect("non-empty");

    let mut index = Vec::with_capacity(gps.len());
    for f in gps {
        if f.t < t_start - EDGE || f.t > t_end + EDGE {
            return Err(invalid(format!(
                "GPS epoch {} outside IMU time range [{t_start}, {t_end}]",
                f.t
            )));
        }
        index.push(corrected.samples.partition_point(|s| s.t < f.t - EDGE));
    }
    for w in index.windows(2) {
        if w[1] <= w[0] {
            return Err(invalid("two GPS epochs map to the same IMU sample"));
        }
    }

    let mut nodes = Vec::with_capacity(gps.len());
    let node_time = |k: usize| if k < n { corrected.samples[k].t } else { t_end };
    let mut x = NavState {
        t: node_time(index[0]),
        ..*initial
    };
    nodes.push(x);
    let mut graph = PoseGraph::new(Vec::new(), *gravity);
    for (m, w) in index.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        // include the next sample when present so the last step uses the true gap
        let end = (b + 1).min(n);
        let window = corrected.slice(a..end);
        let incs = integrate_increments(&window)?;
        let covs = propagate_batched(&incs, &window, &eta[a..end], &StateCov::zeros())?;
        let terms = step_terms(&incs, &window)?;
        let last = b - a - 1;
        let transition = terms[..=last]
            .iter()
            .fold(Transition::identity(), |acc, t| Transition::from_terms(t).after(&acc));
        let inc = incs[last];
        x = predict_state(&x, &inc, gravity);
        x.t = node_time(b);
        nodes.push(x);
        graph.imu_factors.push(ImuFactor {
            i: m,
            j: m + 1,
            inc,
            cov: covs[last],
            transition: Some(transition),
        });
    }
    graph.gps_factors = gps
        .iter()
        .enumerate()
        .map(|(i, f)| GpsFactor::isotropic(i, f.p, f.sigma))
        .collect();
    graph.nodes = nodes;
    Ok(graph)
}

/// Rough initial state from the first GPS fixes and the first accelerometer
/// reading: position from the first fix, velocity from the first two fixes,
/// roll and pitch from the measured gravity direction, zero yaw.
pub fn initial_state_from_gps(samples: &ImuSequence, gps: &[GpsFix]) -> Result<NavState> {
    let first = gps.first().ok_or_else(|| invalid("GPS stream is empty"))?;
    let s0 = samples
        .samples
        .first()
        .ok_or_else(|| invalid("IMU stream is empty"))?;
    let v = match gps.get(1) {
        Some(second) => (second.p - first.p) / (second.t - first.t),
        None => Vec3::zeros(),
    };
    let up = s0.acc.normalize();
    let roll = up.y.atan2(up.z);
    let pitch = (-up.x).atan2((up.y * up.y + up.z * up.z).sqrt());
    let r = Rotation::exp(&Vec3::new(0.0, pitch, 0.0)).compose(&Rotation::exp(&Vec3::new(roll, 0.0, 0.0)));
    Ok(NavState::new(r, v, first.p, first.t))
}
