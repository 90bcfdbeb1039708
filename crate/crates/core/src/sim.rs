//! Synthetic trajectories, IMU synthesis and simulated GPS.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::metrics::interpolate;
use crate::pgo::GpsFix;
use crate::preintegration::{ImuSample, ImuSequence, NavState};
use crate::{Rotation, Vec3};

/// Analytic motion profiles. All of them keep the body x-axis along the
/// direction of travel and the body z-axis up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Motion {
    Rest { position: Vec3, yaw: f64 },
    /// Constant velocity.
    Line { start: Vec3, velocity: Vec3 },
    /// Counter-clockwise horizontal circle.
    Circle { center: Vec3, radius: f64, omega: f64 },
    /// Horizontal lemniscate `(a·sin ωt, a/2·sin 2ωt)`.
    Figure8 { center: Vec3, size: f64, omega: f64 },
}

impl Motion {
    /// Profile with default parameters, by name.
    pub fn named(kind: &str) -> Result<Self> {
        Ok(match kind {
            "rest" => Motion::Rest {
                position: Vec3::zeros(),
                yaw: 0.0,
            },
            "line" => Motion::Line {
                start: Vec3::zeros(),
                velocity: Vec3::new(1.0, 0.0, 0.0),
            },
            "circle" => Motion::Circle {
                center: Vec3::zeros(),
                radius: 5.0,
                omega: 0.5,
            },
            "figure8" => Motion::Figure8 {
                center: Vec3::zeros(),
                size: 5.0,
                omega: 0.3,
            },
            other => {
                return Err(invalid(format!(
                    "unknown trajectory kind '{other}' (expected rest, line, circle or figure8)"
                )))
            }
        })
    }

    /// State at time `t`.
    pub fn state(&self, t: f64) -> NavState {
        match *self {
            Motion::Rest { position, yaw } => NavState::new(Rotation::about_z(yaw), Vec3::zeros(), position, t),
            Motion::Line { start, velocity } => {
                let yaw = velocity.y.atan2(velocity.x);
                NavState::new(Rotation::about_z(yaw), velocity, start + velocity * t, t)
            }
            Motion::Circle { center, radius, omega } => {
                let th = omega * t;
                let p = center + Vec3::new(radius * th.cos(), radius * th.sin(), 0.0);
                let v = Vec3::new(-th.sin(), th.cos(), 0.0) * (radius * omega);
                let yaw = th + std::f64::consts::FRAC_PI_2 * omega.signum();
                NavState::new(Rotation::about_z(yaw), v, p, t)
            }
            Motion::Figure8 { center, size, omega } => {
                let th = omega * t;
                let p = center + Vec3::new(size * th.sin(), 0.5 * size * (2.0 * th).sin(), 0.0);
                let v = Vec3::new(th.cos(), (2.0 * th).cos(), 0.0) * (size * omega);
                NavState::new(Rotation::about_z(v.y.atan2(v.x)), v, p, t)
            }
        }
    }
}

/// Samples `motion` at `rate` Hz over `[0, duration]`, inclusive.
pub fn gen_trajectory(motion: &Motion, duration: f64, rate: f64) -> Result<Vec<NavState>> {
    if !(duration >= 0.0 && duration.is_finite()) || !(rate > 0.0 && rate.is_finite()) {
        return Err(invalid("duration must be nonnegative and rate positive"));
    }
    let n = (duration * rate).round() as usize + 1;
    Ok((0..n).map(|k| motion.state(k as f64 / rate)).collect())
}

/// Per-sample white noise standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImuNoise {
    pub gyro_std: Vec3,
    pub acc_std: Vec3,
}

impl ImuNoise {
    pub fn isotropic(gyro_std: f64, acc_std: f64) -> Self {
        Self {
            gyro_std: Vec3::repeat(gyro_std),
            acc_std: Vec3::repeat(acc_std),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImuBias {
    pub gyro: Vec3,
    pub acc: Vec3,
}

/// Synthesizes one IMU sample per trajectory interval, stamped at the
/// interval start. Body rate comes from the exact relative rotation and the
/// world acceleration from the velocity difference over the interval, so a
/// noiseless stream integrates back to the trajectory with exact rotation and
/// velocity and second-order position error.
pub fn sample_imu(
    traj: &[NavState],
    gravity: &Vec3,
    noise: &ImuNoise,
    bias: &ImuBias,
    seed: u64,
) -> Result<ImuSequence> {
    if traj.len() < 3 {
        return Err(invalid("IMU synthesis needs at least three trajectory samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |std: &Vec3| -> Vec3 {
        let mut n = Vec3::zeros();
        for i in 0..3 {
            let z: f64 = StandardNormal.sample(&mut rng);
            n[i] = z * std[i];
        }
        n
    };
    let mut samples = Vec::with_capacity(traj.len() - 1);
    for w in traj.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let dt = b.t - a.t;
        if !(dt > 0.0) {
            return Err(invalid(format!("trajectory time not increasing at t = {}", a.t)));
        }
        let gyro = a.r.inverse().compose(&b.r).log() / dt;
        let acc = a.r.inverse_rotate(&((b.v - a.v) / dt - gravity));
        samples.push(ImuSample::new(
            a.t,
            gyro + bias.gyro + gauss(&noise.gyro_std),
            acc + bias.acc + gauss(&noise.acc_std),
        ));
    }
    ImuSequence::new(samples)
}

/// Noisy position fixes every `1/rate` seconds starting at the first
/// trajectory sample.
pub fn simulate_gps(traj: &[NavState], rate: f64, sigma: f64, seed: u64) -> Result<Vec<GpsFix>> {
    if !(rate > 0.0 && rate.is_finite()) || !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid("GPS rate must be positive and sigma nonnegative"));
    }
    let (Some(first), Some(last)) = (traj.first(), traj.last()) else {
        return Err(invalid("empty trajectory"));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for m in 0.. {
        let t = first.t + m as f64 / rate;
        if t > last.t + 1e-9 {
            break;
        }
        let Some(s) = interpolate(traj, t) else { break };
        let mut p = s.p;
        for i in 0..3 {
            let z: f64 = StandardNormal.sample(&mut rng);
            p[i] += sigma * z;
        }
        out.push(GpsFix { t, p, sigma });
    }
    Ok(out)
}
