//! Preintegration covariance, error order `[δφ, δv, δp]`.
//!
//! Two propagation paths produce the covariance after every frame:
//!
//! * [`propagate_iterative`] applies `Σ' = AΣAᵀ + B_g diag(η_g) B_gᵀ + B_a diag(η_a) B_aᵀ`
//!   one frame at a time with dense 9×9 matrices.
//! * [`propagate_batched`] stacks the transition products with a cumulative
//!   product scan and the per-frame noise terms with a cumulative sum scan:
//!   with `P_j = A_j ⋯ A_0`,
//!   `Σ_{j+1} = P_j (Σ_0 + Σ_{k≤j} P_k⁻¹ Q_k P_k⁻ᵀ) P_jᵀ`.
//!   Every `A_k` has the block form `[[R,0,0],[X,I,0],[Y,τI,I]]`, which is
//!   closed under products and inverses, so the scans run on [`Transition`]
//!   values instead of dense matrices.
//!
//! `η` values are per-frame **variances** of the discrete measurement noise.

use nalgebra::{SMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::preintegration::{ImuSequence, Increments};
use crate::scan::inclusive_scan;
use crate::so3::{hat, right_jacobian};
use crate::{Mat3, Mat9, Rotation, Vec3};

pub type Mat9x3 = SMatrix<f64, 9, 3>;
pub type Mat9x6 = SMatrix<f64, 9, 6>;

const PAR_MAP_MIN: usize = 512;

/// Symmetric 9×9 covariance of `[δφ, δv, δp]` (rad, m/s, m).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateCov(pub Mat9);

impl Default for StateCov {
    fn default() -> Self {
        Self::zeros()
    }
}

impl StateCov {
    pub fn zeros() -> Self {
        Self(Mat9::zeros())
    }

    pub fn matrix(&self) -> &Mat9 {
        &self.0
    }

    pub fn symmetrized(m: Mat9) -> Self {
        Self((m + m.transpose()) * 0.5)
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// Checks symmetry (1e-9 relative) and positive semi-definiteness
    /// (smallest eigenvalue ≥ −1e-10·trace).
    pub fn validate(&self) -> Result<()> {
        let scale = self.0.amax().max(f64::MIN_POSITIVE);
        let asym = (self.0 - self.0.transpose()).amax();
        if asym > 1e-9 * scale {
            return Err(invalid(format!("covariance asymmetric by {asym:e}")));
        }
        let min_eig = SymmetricEigen::new(self.0).eigenvalues.min();
        if min_eig < -1e-10 * self.0.trace().abs() {
            return Err(invalid(format!(
                "covariance not positive semi-definite (min eigenvalue {min_eig:e})"
            )));
        }
        Ok(())
    }

    /// Row-major upper triangle, 45 values.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(45);
        for i in 0..9 {
            for j in i..9 {
                out.push(self.0[(i, j)]);
            }
        }
        out
    }

    pub fn from_upper_triangle(values: &[f64]) -> Result<Self> {
        if values.len() != 45 {
            return Err(invalid(format!(
                "expected 45 upper-triangle values, got {}",
                values.len()
            )));
        }
        let mut m = Mat9::zeros();
        let mut it = values.iter();
        for i in 0..9 {
            for j in i..9 {
                let v = *it.next().expect("length checked");
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Ok(Self(m))
    }
}

/// Rotation, velocity and position diagonal blocks.
pub fn cov_blocks(sigma: &StateCov) -> (Mat3, Mat3, Mat3) {
    let m = &sigma.0;
    (
        m.fixed_view::<3, 3>(0, 0).into_owned(),
        m.fixed_view::<3, 3>(3, 3).into_owned(),
        m.fixed_view::<3, 3>(6, 6).into_owned(),
    )
}

/// Per-frame noise variances for gyroscope ((rad/s)²) and accelerometer ((m/s²)²).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseDiag {
    pub gyro: Vec3,
    pub acc: Vec3,
}

impl NoiseDiag {
    pub fn new(gyro: Vec3, acc: Vec3) -> Self {
        Self { gyro, acc }
    }

    /// From per-axis standard deviations (squared on ingestion).
    pub fn from_std(gyro_std: f64, acc_std: f64) -> Self {
        Self {
            gyro: Vec3::repeat(gyro_std * gyro_std),
            acc: Vec3::repeat(acc_std * acc_std),
        }
    }

    /// From continuous noise densities (unit/√Hz) sampled every `dt` seconds.
    pub fn from_density(gyro_density: f64, acc_density: f64, dt: f64) -> Self {
        Self {
            gyro: Vec3::repeat(gyro_density * gyro_density / dt),
            acc: Vec3::repeat(acc_density * acc_density / dt),
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            gyro: self.gyro * c,
            acc: self.acc * c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .gyro
            .iter()
            .chain(self.acc.iter())
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(invalid(format!("noise variances must be nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// State transition for one frame. `dr_ik` is the increment rotation before
/// the frame, `dr_step` the frame's own rotation.
pub fn build_a(dr_ik: &Rotation, dr_step: &Rotation, acc: &Vec3, dt: f64) -> Mat9 {
    let r = dr_ik.matrix();
    let ra = r * hat(acc);
    let mut a = Mat9::identity();
    a.fixed_view_mut::<3, 3>(0, 0).copy_from(&dr_step.matrix().transpose());
    a.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-ra * dt));
    a.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-ra * (0.5 * dt * dt)));
    a.fixed_view_mut::<3, 3>(6, 3).copy_from(&(Mat3::identity() * dt));
    a
}

/// Noise input matrices `(B_g, B_a)` for one frame.
pub fn build_b(dr_ik: &Rotation, gyro: &Vec3, dt: f64) -> (Mat9x3, Mat9x3) {
    let mut bg = Mat9x3::zeros();
    bg.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(right_jacobian(&(gyro * dt)) * dt));
    let r = dr_ik.matrix();
    let mut ba = Mat9x3::zeros();
    ba.fixed_view_mut::<3, 3>(3, 0).copy_from(&(r * dt));
    ba.fixed_view_mut::<3, 3>(6, 0).copy_from(&(r * (0.5 * dt * dt)));
    (bg, ba)
}

/// One covariance update, symmetrized.
pub fn step_covariance(
    sigma: &StateCov,
    a: &Mat9,
    bg: &Mat9x3,
    ba: &Mat9x3,
    eta: &NoiseDiag,
) -> Result<StateCov> {
    eta.validate()?;
    Ok(step_unchecked(sigma, a, bg, ba, eta))
}

fn step_unchecked(sigma: &StateCov, a: &Mat9, bg: &Mat9x3, ba: &Mat9x3, eta: &NoiseDiag) -> StateCov {
    let gyro_term = bg * Mat3::from_diagonal(&eta.gyro) * bg.transpose();
    let acc_term = ba * Mat3::from_diagonal(&eta.acc) * ba.transpose();
    StateCov::symmetrized(a * sigma.0 * a.transpose() + gyro_term + acc_term)
}

/// Inputs of one frame's covariance update.
#[derive(Debug, Clone, Copy)]
pub struct StepTerms {
    pub dr_before: Rotation,
    pub dr_step: Rotation,
    pub gyro: Vec3,
    pub acc: Vec3,
    pub dt: f64,
}

/// Pairs each sample with the increment rotation accumulated before it.
pub fn step_terms(increments: &[Increments], samples: &ImuSequence) -> Result<Vec<StepTerms>> {
    if increments.len() != samples.len() {
        return Err(invalid(format!(
            "{} increments for {} samples",
            increments.len(),
            samples.len()
        )));
    }
    let dts = samples.dts();
    Ok(samples
        .samples
        .iter()
        .enumerate()
        .map(|(k, s)| StepTerms {
            dr_before: if k == 0 {
                Rotation::identity()
            } else {
                increments[k - 1].dr
            },
            dr_step: Rotation::exp(&(s.gyro * dts[k])),
            gyro: s.gyro,
            acc: s.acc,
            dt: dts[k],
        })
        .collect())
}

fn check_inputs(n: usize, eta: &[NoiseDiag], sigma0: &StateCov) -> Result<()> {
    if n == 0 {
        return Err(invalid("cannot propagate covariance over an empty sequence"));
    }
    if eta.len() != n {
        return Err(invalid(format!("{} noise entries for {n} frames", eta.len())));
    }
    for e in eta {
        e.validate()?;
    }
    sigma0.validate()
}

/// Covariance after each frame, one dense update at a time.
pub fn propagate_iterative(
    increments: &[Increments],
    samples: &ImuSequence,
    eta: &[NoiseDiag],
    sigma0: &StateCov,
) -> Result<Vec<StateCov>> {
    let terms = step_terms(increments, samples)?;
    check_inputs(terms.len(), eta, sigma0)?;
    let mut sigma = *sigma0;
    let mut out = Vec::with_capacity(terms.len());
    for (t, e) in terms.iter().zip(eta) {
        let a = build_a(&t.dr_before, &t.dr_step, &t.acc, t.dt);
        let (bg, ba) = build_b(&t.dr_before, &t.gyro, t.dt);
        sigma = step_unchecked(&sigma, &a, &bg, &ba, e);
        out.push(sigma);
    }
    Ok(out)
}

/// Covariance after each frame from cumulative transition products and
/// cumulative noise sums. Numerically equal to [`propagate_iterative`].
pub fn propagate_batched(
    increments: &[Increments],
    samples: &ImuSequence,
    eta: &[NoiseDiag],
    sigma0: &StateCov,
) -> Result<Vec<StateCov>> {
    let terms = step_terms(increments, samples)?;
    let n = terms.len();
    check_inputs(n, eta, sigma0)?;

    let transitions: Vec<Transition> = map_frames(n, |k| Transition::from_terms(&terms[k]));
    // P_k = A_k ⋯ A_0
    let prefix = inclusive_scan(&transitions, |earlier, later| later.after(earlier));

    let mut noise: Vec<Mat9> = map_frames(n, |k| {
        let g = prefix[k].inverse().apply(&noise_factor(&terms[k], &eta[k]));
        g * g.transpose()
    });
    noise[0] += sigma0.0;
    let accumulated = inclusive_scan(&noise, |a, b| a + b);

    Ok(map_frames(n, |j| {
        let p = &prefix[j];
        let half = p.apply(&accumulated[j]);
        StateCov::symmetrized(p.apply(&half.transpose()))
    }))
}

/// `[B_g·diag(√η_g) | B_a·diag(√η_a)]`, so that `Q = L·Lᵀ`.
fn noise_factor(t: &StepTerms, eta: &NoiseDiag) -> Mat9x6 {
    let (bg, ba) = build_b(&t.dr_before, &t.gyro, t.dt);
    let mut l = Mat9x6::zeros();
    for c in 0..3 {
        l.set_column(c, &(bg.column(c) * eta.gyro[c].sqrt()));
        l.set_column(c + 3, &(ba.column(c) * eta.acc[c].sqrt()));
    }
    l
}

fn map_frames<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    if n >= PAR_MAP_MIN {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

/// A transition matrix of the form `[[R,0,0],[X,I,0],[Y,τI,I]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub rot: Mat3,
    pub vel: Mat3,
    pub pos: Mat3,
    pub tau: f64,
}

impl Transition {
    pub fn identity() -> Self {
        Self {
            rot: Mat3::identity(),
            vel: Mat3::zeros(),
            pos: Mat3::zeros(),
            tau: 0.0,
        }
    }

    pub fn from_terms(t: &StepTerms) -> Self {
        let ra = t.dr_before.matrix() * hat(&t.acc);
        Self {
            rot: t.dr_step.matrix().transpose(),
            vel: -ra * t.dt,
            pos: -ra * (0.5 * t.dt * t.dt),
            tau: t.dt,
        }
    }

    /// `self · earlier`.
    pub fn after(&self, earlier: &Transition) -> Transition {
        Transition {
            rot: self.rot * earlier.rot,
            vel: self.vel * earlier.rot + earlier.vel,
            pos: self.pos * earlier.rot + earlier.vel * self.tau + earlier.pos,
            tau: self.tau + earlier.tau,
        }
    }

    pub fn inverse(&self) -> Transition {
        let rt = self.rot.transpose();
        Transition {
            rot: rt,
            vel: -self.vel * rt,
            pos: (self.vel * self.tau - self.pos) * rt,
            tau: -self.tau,
        }
    }

    /// `self · m` for any 9-row matrix.
    pub fn apply<const C: usize>(&self, m: &SMatrix<f64, 9, C>) -> SMatrix<f64, 9, C> {
        let top = m.fixed_rows::<3>(0);
        let mid = m.fixed_rows::<3>(3);
        let bot = m.fixed_rows::<3>(6);
        let mut out = SMatrix::<f64, 9, C>::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&(self.rot * top));
        out.fixed_rows_mut::<3>(3)
            .copy_from(&(self.vel * top + mid));
        out.fixed_rows_mut::<3>(6)
            .copy_from(&(self.pos * top + mid * self.tau + bot));
        out
    }

    pub fn to_dense(&self) -> Mat9 {
        let mut a = Mat9::identity();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rot);
        a.fixed_view_mut::<3, 3>(3, 0).copy_from(&self.vel);
        a.fixed_view_mut::<3, 3>(6, 0).copy_from(&self.pos);
        a.fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(Mat3::identity() * self.tau));
        a
    }
}
