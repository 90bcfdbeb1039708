//! State and covariance losses against ground truth, and the constant-bias
//! fit driven by them.
//!
//! Residuals are `pred ⊖ gt`: `log(R_gtᵀ·R_pred)`, `v_pred − v_gt`,
//! `p_pred − p_gt`.

use nalgebra::{Cholesky, SMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correction::CorrectionModel;
use crate::covariance::{build_a, build_b, NoiseDiag, StateCov};
use crate::dataset::Segment;
use crate::error::{invalid, Error, Result};
use crate::metrics::interpolate;
use crate::preintegration::{predict_state, step_increment, ImuSequence, Increments, NavState};
use crate::so3::right_jacobian_inv;
use crate::{Mat3, Rotation, Vec3, Vec9};

/// Added to covariance blocks before factorization.
pub const COV_REGULARIZATION: f64 = 1e-12;

pub type Mat9x6 = SMatrix<f64, 9, 6>;
pub type Vec6 = SMatrix<f64, 6, 1>;

pub fn huber(r: f64, delta: f64) -> f64 {
    if r <= delta {
        0.5 * r * r
    } else {
        delta * (r - 0.5 * delta)
    }
}

/// Derivative of [`huber`] with respect to `r`.
pub fn huber_slope(r: f64, delta: f64) -> f64 {
    r.min(delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rot: f64,
    pub vel: f64,
    pub pos: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rot: 1.0,
            vel: 1.0,
            pos: 1.0,
        }
    }
}

/// Rotation, velocity and position terms of a loss.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub rot: f64,
    pub vel: f64,
    pub pos: f64,
}

impl LossParts {
    pub fn sum(&self) -> f64 {
        self.rot + self.vel + self.pos
    }
}

/// `[e_r, e_v, e_p]`.
pub fn state_error(pred: &NavState, gt: &NavState) -> (Vec3, Vec3, Vec3) {
    (gt.r.inverse().compose(&pred.r).log(), pred.v - gt.v, pred.p - gt.p)
}

pub fn state_loss_parts(pred: &NavState, gt: &NavState, weights: &LossWeights, delta: f64) -> LossParts {
    let (er, ev, ep) = state_error(pred, gt);
    LossParts {
        rot: weights.rot * huber(er.norm(), delta),
        vel: weights.vel * huber(ev.norm(), delta),
        pos: weights.pos * huber(ep.norm(), delta),
    }
}

pub fn state_loss(pred: &NavState, gt: &NavState, weights: &LossWeights, delta: f64) -> f64 {
    state_loss_parts(pred, gt, weights, delta).sum()
}

/// `½(eᵀΣ⁻¹e + ln det Σ)` with `Σ` regularized by [`COV_REGULARIZATION`].
pub fn gaussian_nll(e: &Vec3, cov: &Mat3) -> Result<f64> {
    let chol = factor(cov)?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(0.5 * (e.dot(&chol.solve(e)) + log_det))
}

/// Gradients of [`gaussian_nll`]: `(Σ⁻¹e, ½(Σ⁻¹ − Σ⁻¹eeᵀΣ⁻¹))`.
pub fn gaussian_nll_grad(e: &Vec3, cov: &Mat3) -> Result<(Vec3, Mat3)> {
    let chol = factor(cov)?;
    let w = chol.solve(e);
    let inv = chol.inverse();
    Ok((w, (inv - w * w.transpose()) * 0.5))
}

fn factor(cov: &Mat3) -> Result<Cholesky<f64, nalgebra::U3>> {
    let reg = cov + Mat3::identity() * COV_REGULARIZATION;
    if reg.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericDomain("covariance block has non-finite entries".into()));
    }
    Cholesky::new(reg).ok_or_else(|| Error::NumericDomain("covariance block is not positive definite".into()))
}

/// Diagonal 3×3 blocks `(Σ^r, Σ^v, Σ^p)`.
pub type CovBlocks = (Mat3, Mat3, Mat3);

pub fn blocks_of(cov: &StateCov) -> CovBlocks {
    crate::covariance::cov_blocks(cov)
}

pub fn cov_loss_parts(pred: &NavState, gt: &NavState, blocks: &CovBlocks) -> Result<LossParts> {
    let (er, ev, ep) = state_error(pred, gt);
    Ok(LossParts {
        rot: gaussian_nll(&er, &blocks.0)?,
        vel: gaussian_nll(&ev, &blocks.1)?,
        pos: gaussian_nll(&ep, &blocks.2)?,
    })
}

pub fn cov_loss(pred: &NavState, gt: &NavState, blocks: &CovBlocks) -> Result<f64> {
    Ok(cov_loss_parts(pred, gt, blocks)?.sum())
}

/// Weight of the covariance loss in [`total_loss`].
pub const DEFAULT_EPSILON: f64 = 1e-3;

pub fn total_loss(state: &LossParts, cov: &LossParts, epsilon: f64) -> f64 {
    state.sum() + epsilon * cov.sum()
}

/// Gradient of [`state_loss`] with respect to the right-perturbed tangent
/// `[δφ, δv, δp]` of `pred` (velocity and position perturbed additively).
pub fn state_loss_grad(pred: &NavState, gt: &NavState, weights: &LossWeights, delta: f64) -> Vec9 {
    let (er, ev, ep) = state_error(pred, gt);
    let unit_slope = |e: &Vec3| {
        let r = e.norm();
        if r == 0.0 {
            Vec3::zeros()
        } else {
            e * (huber_slope(r, delta) / r)
        }
    };
    // Jr⁻¹(e)ᵀ·e = e, so the rotation term needs no Jacobian.
    let mut g = Vec9::zeros();
    g.fixed_rows_mut::<3>(0).copy_from(&(unit_slope(&er) * weights.rot));
    g.fixed_rows_mut::<3>(3).copy_from(&(unit_slope(&ev) * weights.vel));
    g.fixed_rows_mut::<3>(6).copy_from(&(unit_slope(&ep) * weights.pos));
    g
}

/// Gradient of [`cov_loss`] with respect to the tangent of `pred`, blocks
/// held fixed.
pub fn cov_loss_grad(pred: &NavState, gt: &NavState, blocks: &CovBlocks) -> Result<Vec9> {
    let (er, ev, ep) = state_error(pred, gt);
    let (gr, _) = gaussian_nll_grad(&er, &blocks.0)?;
    let (gv, _) = gaussian_nll_grad(&ev, &blocks.1)?;
    let (gp, _) = gaussian_nll_grad(&ep, &blocks.2)?;
    let mut g = Vec9::zeros();
    g.fixed_rows_mut::<3>(0)
        .copy_from(&(right_jacobian_inv(&er).transpose() * gr));
    g.fixed_rows_mut::<3>(3).copy_from(&gv);
    g.fixed_rows_mut::<3>(6).copy_from(&gp);
    Ok(g)
}

/// Gradient of [`total_loss`] with respect to the tangent of `pred`.
pub fn total_loss_grad(
    pred: &NavState,
    gt: &NavState,
    blocks: &CovBlocks,
    weights: &LossWeights,
    delta: f64,
    epsilon: f64,
) -> Result<Vec9> {
    Ok(state_loss_grad(pred, gt, weights, delta) + cov_loss_grad(pred, gt, blocks)? * epsilon)
}

/// Constant biases `[b_g, b_a]` as one vector.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConstantBias {
    pub gyro: Vec3,
    pub acc: Vec3,
}

impl ConstantBias {
    pub fn from_vec(x: &Vec6) -> Self {
        Self {
            gyro: Vec3::new(x[0], x[1], x[2]),
            acc: Vec3::new(x[3], x[4], x[5]),
        }
    }

    pub fn to_vec(&self) -> Vec6 {
        Vec6::from_column_slice(&[self.gyro.x, self.gyro.y, self.gyro.z, self.acc.x, self.acc.y, self.acc.z])
    }

    pub fn model(&self) -> CorrectionModel {
        CorrectionModel::constant_bias(self.gyro, self.acc)
    }
}

/// Step sizes of the finite-difference bias gradient: rad/s for the
/// gyroscope, m/s² for the accelerometer.
pub const FD_STEP_GYRO: f64 = 1e-6;
pub const FD_STEP_ACC: f64 = 1e-5;

/// Integration steps of a segment; the last one reaches the end state.
fn segment_dts(seg: &Segment) -> Vec<f64> {
    let mut dts = seg.imu.dts();
    if let (Some(last), Some(dt)) = (seg.imu.samples.last(), dts.last_mut()) {
        *dt = seg.end.t - last.t;
    }
    dts
}

/// Whole-segment increment with biases removed from the readings.
pub fn segment_increment(seg: &Segment, bias: &ConstantBias) -> Increments {
    segment_dts(seg)
        .iter()
        .zip(&seg.imu.samples)
        .fold(Increments::identity(), |inc, (&dt, s)| {
            let mut c = *s;
            c.gyro -= bias.gyro;
            c.acc -= bias.acc;
            step_increment(&inc, &c, dt)
        })
}

/// [`segment_increment`] with its Jacobian with respect to `[b_g, b_a]` in
/// the `[δφ, δv, δp]` error tangent.
pub fn segment_increment_with_jacobian(seg: &Segment, bias: &ConstantBias) -> (Increments, Mat9x6) {
    let mut inc = Increments::identity();
    let mut jac = Mat9x6::zeros();
    for (&dt, s) in segment_dts(seg).iter().zip(&seg.imu.samples) {
        let gyro = s.gyro - bias.gyro;
        let acc = s.acc - bias.acc;
        let step = Rotation::exp(&(gyro * dt));
        let a = build_a(&inc.dr, &step, &acc, dt);
        let (bg, ba) = build_b(&inc.dr, &gyro, dt);
        let mut b = Mat9x6::zeros();
        b.fixed_columns_mut::<3>(0).copy_from(&bg);
        b.fixed_columns_mut::<3>(3).copy_from(&ba);
        jac = a * jac - b;
        inc = step_increment(&inc, &crate::ImuSample::new(s.t, gyro, acc), dt);
    }
    (inc, jac)
}

/// Predicted end state of a segment.
pub fn predict_segment(seg: &Segment, bias: &ConstantBias, gravity: &Vec3) -> NavState {
    let inc = segment_increment(seg, bias);
    NavState {
        t: seg.end.t,
        ..predict_state(&seg.start, &inc, gravity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub huber_delta: f64,
    pub loss_weights: [f64; 3],
    pub epsilon: f64,
    /// Per-frame noise variances for the covariance term; without them the
    /// objective is the state loss alone.
    #[serde(skip)]
    pub noise: Option<NoiseDiag>,
    #[serde(skip)]
    pub gravity: Vec3,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            epochs: 3000,
            huber_delta: 0.1,
            loss_weights: [1.0, 1.0, 1.0],
            epsilon: DEFAULT_EPSILON,
            noise: None,
            gravity: crate::GRAVITY,
        }
    }
}

impl CalibConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            rot: self.loss_weights[0],
            vel: self.loss_weights[1],
            pos: self.loss_weights[2],
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.huber_delta > 0.0) || !(self.epsilon >= 0.0) {
            return Err(invalid("calibration needs lr > 0, weight_decay ≥ 0, huber_delta > 0, epsilon ≥ 0"));
        }
        if self.loss_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(invalid("loss weights must be nonnegative"));
        }
        Ok(())
    }
}

/// Loss of one segment under `bias`.
pub fn segment_loss(seg: &Segment, bias: &ConstantBias, config: &CalibConfig) -> Result<f64> {
    let pred = predict_segment(seg, bias, &config.gravity);
    let state = state_loss_parts(&pred, &seg.end, &config.weights(), config.huber_delta);
    let cov = match &config.noise {
        Some(eta) if config.epsilon > 0.0 => {
            let sigma = segment_covariance(seg, bias, eta);
            cov_loss_parts(&pred, &seg.end, &blocks_of(&sigma))?
        }
        _ => LossParts::default(),
    };
    Ok(total_loss(&state, &cov, config.epsilon))
}

fn segment_covariance(seg: &Segment, bias: &ConstantBias, eta: &NoiseDiag) -> StateCov {
    let mut sigma = StateCov::zeros();
    let mut dr = Rotation::identity();
    for (&dt, s) in segment_dts(seg).iter().zip(&seg.imu.samples) {
        let gyro = s.gyro - bias.gyro;
        let step = Rotation::exp(&(gyro * dt));
        let a = build_a(&dr, &step, &(s.acc - bias.acc), dt);
        let (bg, ba) = build_b(&dr, &gyro, dt);
        sigma = crate::covariance::step_covariance(&sigma, &a, &bg, &ba, eta).expect("validated noise");
        dr = dr.compose(&step);
    }
    sigma
}

/// Mean segment loss. Segments are evaluated concurrently and summed in
/// order.
pub fn mean_loss(segments: &[Segment], bias: &ConstantBias, config: &CalibConfig) -> Result<f64> {
    let losses: Vec<f64> = segments
        .par_iter()
        .map(|s| segment_loss(s, bias, config))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / segments.len() as f64)
}

/// Central-difference gradient of [`mean_loss`] with the given steps.
pub fn mean_loss_grad_fd(
    segments: &[Segment],
    bias: &ConstantBias,
    config: &CalibConfig,
    steps: (f64, f64),
) -> Result<Vec6> {
    let x = bias.to_vec();
    let mut g = Vec6::zeros();
    for c in 0..6 {
        let h = if c < 3 { steps.0 } else { steps.1 };
        let mut hi = x;
        let mut lo = x;
        hi[c] += h;
        lo[c] -= h;
        let f_hi = mean_loss(segments, &ConstantBias::from_vec(&hi), config)?;
        let f_lo = mean_loss(segments, &ConstantBias::from_vec(&lo), config)?;
        g[c] = (f_hi - f_lo) / (2.0 * h);
    }
    Ok(g)
}

/// Gradient of the mean state loss (covariance term excluded) through the
/// bias Jacobians of the integrator.
pub fn mean_state_loss_grad(segments: &[Segment], bias: &ConstantBias, config: &CalibConfig) -> Vec6 {
    let weights = config.weights();
    let grads: Vec<Vec6> = segments
        .par_iter()
        .map(|seg| {
            let (inc, jac) = segment_increment_with_jacobian(seg, bias);
            let pred = NavState {
                t: seg.end.t,
                ..predict_state(&seg.start, &inc, &config.gravity)
            };
            let g = state_loss_grad(&pred, &seg.end, &weights, config.huber_delta);
            // tangent of the prediction from the increment tangent
            let mut to_pred = SMatrix::<f64, 9, 9>::identity();
            let r = seg.start.r.matrix();
            to_pred.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
            to_pred.fixed_view_mut::<3, 3>(6, 6).copy_from(&r);
            (to_pred * jac).transpose() * g
        })
        .collect();
    grads.iter().sum::<Vec6>() / segments.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub bias: ConstantBias,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
    /// Loss after every accepted step.
    pub loss_trace: Vec<f64>,
    pub rejected_steps: usize,
}

/// Fits constant gyroscope and accelerometer biases by adaptive-moment
/// descent on the mean segment loss with finite-difference gradients. A step
/// that raises the loss is undone and the learning rate halved, so accepted
/// losses never increase.
pub fn fit_constant_bias(segments: &[Segment], config: &CalibConfig) -> Result<FitReport> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const ADAM_EPS: f64 = 1e-8;
    const MIN_LR: f64 = 1e-12;
    if segments.is_empty() {
        return Err(invalid("no training segments"));
    }
    config.validate()?;
    if let Some(eta) = &config.noise {
        eta.validate()?;
    }

    let mut x = Vec6::zeros();
    let mut loss = mean_loss(segments, &ConstantBias::from_vec(&x), config)?;
    if !loss.is_finite() {
        return Err(Error::Diverged {
            iterations: 0,
            last: [0.0; 6],
        });
    }
    let initial_loss = loss;
    let mut trace = vec![loss];
    let mut m = Vec6::zeros();
    let mut v = Vec6::zeros();
    let mut lr = config.lr;
    let mut rejected = 0;
    let mut t = 0;
    let mut iterations = 0;
    while iterations < config.epochs && lr > MIN_LR {
        iterations += 1;
        let mut g = mean_loss_grad_fd(segments, &ConstantBias::from_vec(&x), config, (FD_STEP_GYRO, FD_STEP_ACC))?;
        g += x * config.weight_decay;
        if g.iter().any(|c| !c.is_finite()) {
            return Err(Error::Diverged {
                iterations,
                last: x.into(),
            });
        }
        t += 1;
        m = m * BETA1 + g * (1.0 - BETA1);
        v = v * BETA2 + g.component_mul(&g) * (1.0 - BETA2);
        let m_hat = m / (1.0 - BETA1.powi(t));
        let v_hat = v / (1.0 - BETA2.powi(t));
        let step = m_hat.zip_map(&v_hat, |a, b| a / (b.sqrt() + ADAM_EPS)) * lr;
        let candidate = x - step;
        let new_loss = mean_loss(segments, &ConstantBias::from_vec(&candidate), config)?;
        if !new_loss.is_finite() {
            return Err(Error::Diverged {
                iterations,
                last: x.into(),
            });
        }
        if new_loss <= loss {
            x = candidate;
            loss = new_loss;
            trace.push(loss);
        } else {
            rejected += 1;
            lr *= 0.5;
        }
    }
    Ok(FitReport {
        bias: ConstantBias::from_vec(&x),
        initial_loss,
        final_loss: loss,
        iterations,
        loss_trace: trace,
        rejected_steps: rejected,
    })
}

/// Per-axis variance of the measurement residual left after removing
/// `bias` and the readings implied by ground truth between consecutive
/// samples. Samples whose interval leaves ground-truth coverage are skipped.
pub fn residual_noise(
    imu: &ImuSequence,
    gt: &[NavState],
    bias: &ConstantBias,
    gravity: &Vec3,
) -> Result<NoiseDiag> {
    let mut gyro = Vec::new();
    let mut acc = Vec::new();
    for w in imu.samples.windows(2) {
        let (Some(a), Some(b)) = (interpolate(gt, w[0].t), interpolate(gt, w[1].t)) else {
            continue;
        };
        let dt = w[1].t - w[0].t;
        let true_gyro = a.r.inverse().compose(&b.r).log() / dt;
        let true_acc = a.r.inverse_rotate(&((b.v - a.v) / dt - gravity));
        gyro.push(w[0].gyro - bias.gyro - true_gyro);
        acc.push(w[0].acc - bias.acc - true_acc);
    }
    if gyro.len() < 2 {
        return Err(invalid("too few IMU samples inside ground-truth coverage"));
    }
    let variance = |xs: &[Vec3]| {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<Vec3>() / n;
        xs.iter().map(|x| (x - mean).component_mul(&(x - mean))).sum::<Vec3>() / (n - 1.0)
    };
    Ok(NoiseDiag::new(variance(&gyro), variance(&acc)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn huber_shape() {
        assert_eq!(huber(0.0, 0.3), 0.0);
        let d = 0.1;
        assert_relative_eq!(huber(2.0 * d, d), 1.5 * d * d, epsilon = 1e-15);
        // both branches meet at delta with equal value and slope
        assert!((0.5 * d * d - d * (d - 0.5 * d)).abs() < 1e-12);
        let eps = 1e-7;
        let left = (huber(d, d) - huber(d - eps, d)) / eps;
        let right = (huber(d + eps, d) - huber(d, d)) / eps;
        assert!((left - right).abs() < 1e-6);
        assert_eq!(huber_slope(d, d), d);
    }

    #[test]
    fn pure_rotation_error() {
        let gt = NavState::default();
        let pred = NavState {
            r: Rotation::exp(&Vec3::new(0.0, 0.1, 0.0)),
            ..gt
        };
        let w = LossWeights {
            rot: 1.0,
            vel: 0.0,
            pos: 0.0,
        };
        assert_relative_eq!(state_loss(&pred, &gt, &w, 10.0), 0.005, epsilon = 1e-15);
        assert_eq!(state_loss(&gt, &gt, &LossWeights::default(), 0.1), 0.0);
    }

    #[test]
    fn identity_blocks_at_zero_error() {
        let x = NavState::default();
        let b = (Mat3::identity(), Mat3::identity(), Mat3::identity());
        assert!(cov_loss(&x, &x, &b).unwrap().abs() < 1e-11);
    }

    #[test]
    fn non_pd_block_is_domain_error() {
        let x = NavState::default();
        let b = (-Mat3::identity(), Mat3::identity(), Mat3::identity());
        assert!(matches!(cov_loss(&x, &x, &b), Err(Error::NumericDomain(_))));
    }

    #[test]
    fn nll_minimized_at_mean_square() {
        let e = Vec3::new(0.3, -0.2, 0.6);
        let best = (1..4000)
            .map(|k| k as f64 * 1e-4)
            .min_by(|a, b| {
                let fa = gaussian_nll(&e, &(Mat3::identity() * *a)).unwrap();
                let fb = gaussian_nll(&e, &(Mat3::identity() * *b)).unwrap();
                fa.partial_cmp(&fb).unwrap()
            })
            .unwrap();
        assert!((best - e.norm_squared() / 3.0).abs() < 2e-4);
    }

    #[test]
    fn total_loss_is_linear_in_epsilon() {
        let s = LossParts {
            rot: 0.1,
            vel: 0.2,
            pos: 0.3,
        };
        let c = LossParts {
            rot: -1.0,
            vel: 2.0,
            pos: 4.0,
        };
        assert_eq!(total_loss(&s, &c, 0.0), s.sum());
        assert_relative_eq!(total_loss(&s, &c, 1e-3), 0.6 + 1e-3 * 5.0, epsilon = 1e-15);
        let mid = total_loss(&s, &c, 0.5);
        assert_relative_eq!(mid, 0.5 * (total_loss(&s, &c, 0.0) + total_loss(&s, &c, 1.0)), epsilon = 1e-14);
    }

    #[test]
    fn rotation_loss_is_left_invariant() {
        let q = Rotation::exp(&Vec3::new(0.7, -1.1, 0.4));
        let a = NavState {
            r: Rotation::exp(&Vec3::new(0.1, 0.2, 0.3)),
            ..NavState::default()
        };
        let b = NavState {
            r: Rotation::exp(&Vec3::new(0.15, 0.1, 0.25)),
            ..NavState::default()
        };
        let qa = NavState { r: q.compose(&a.r), ..a };
        let qb = NavState { r: q.compose(&b.r), ..b };
        let w = LossWeights::default();
        assert!((state_loss(&a, &b, &w, 0.1) - state_loss(&qa, &qb, &w, 0.1)).abs() < 1e-10);
    }

    #[test]
    fn empty_training_set() {
        assert!(matches!(
            fit_constant_bias(&[], &CalibConfig::default()),
            Err(Error::InvalidArgument(_))
        ));
    }
}
