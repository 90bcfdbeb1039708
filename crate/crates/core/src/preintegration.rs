//! Preintegrated IMU increments and world-frame state prediction.
//!
//! Increments are expressed in the frame of the first sample of the window
//! and do not depend on the initial state or on gravity; gravity only enters
//! through [`predict_state`].

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::scan::{cumprod_so3, cumsum_vec3, inclusive_scan};
use crate::{Rotation, Vec3};

/// Maps with fewer elements than this stay on the calling thread.
const PAR_MAP_MIN: usize = 4096;

/// One body-frame IMU reading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    /// Seconds.
    pub t: f64,
    /// Angular rate, rad/s.
    pub gyro: Vec3,
    /// Specific force, m/s².
    pub acc: Vec3,
}

impl ImuSample {
    pub fn new(t: f64, gyro: Vec3, acc: Vec3) -> Self {
        Self { t, gyro, acc }
    }
}

/// A time-ordered IMU stream. `origin_ns` is the absolute timestamp that
/// `t = 0` corresponds to, kept so files can be written back losslessly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImuSequence {
    pub origin_ns: i64,
    pub samples: Vec<ImuSample>,
}

impl ImuSequence {
    pub fn new(samples: Vec<ImuSample>) -> Result<Self> {
        let seq = Self {
            origin_ns: 0,
            samples,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, s) in self.samples.iter().enumerate() {
            if !s.t.is_finite() || s.gyro.iter().chain(s.acc.iter()).any(|c| !c.is_finite()) {
                return Err(invalid(format!("sample {k} has non-finite values")));
            }
            if k > 0 && s.t <= self.samples[k - 1].t {
                return Err(invalid(format!(
                    "timestamps not strictly increasing at sample {k} ({} after {})",
                    s.t,
                    self.samples[k - 1].t
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Per-sample integration step: `t[k+1] − t[k]`, the last one repeated.
    /// A single sample has a zero step.
    pub fn dts(&self) -> Vec<f64> {
        let n = self.samples.len();
        let mut out: Vec<f64> = self.samples.windows(2).map(|w| w[1].t - w[0].t).collect();
        if n > 0 {
            out.push(out.last().copied().unwrap_or(0.0));
        }
        out
    }

    /// Sub-sequence sharing the same time origin.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            origin_ns: self.origin_ns,
            samples: self.samples[range].to_vec(),
        }
    }

    /// Re-expresses timestamps relative to another origin.
    pub fn rebase(&mut self, origin_ns: i64) {
        let shift = (self.origin_ns - origin_ns) as f64 * 1e-9;
        for s in &mut self.samples {
            s.t += shift;
        }
        self.origin_ns = origin_ns;
    }

    /// Time at which integration of the whole stream ends.
    pub fn end_time(&self) -> Option<f64> {
        let last = self.samples.last()?;
        Some(last.t + self.dts().last().copied().unwrap_or(0.0))
    }
}

/// Preintegrated motion `(ΔR, Δv, Δp, Δt)` relative to a window start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Increments {
    pub dr: Rotation,
    pub dv: Vec3,
    pub dp: Vec3,
    pub dt: f64,
}

impl Default for Increments {
    fn default() -> Self {
        Self::identity()
    }
}

impl Increments {
    pub fn identity() -> Self {
        Self {
            dr: Rotation::identity(),
            dv: Vec3::zeros(),
            dp: Vec3::zeros(),
            dt: 0.0,
        }
    }

    /// Concatenates two consecutive windows, `self` first.
    pub fn compose(&self, next: &Increments) -> Increments {
        Increments {
            dr: self.dr.compose(&next.dr),
            dv: self.dv + self.dr.rotate(&next.dv),
            dp: self.dp + self.dv * next.dt + self.dr.rotate(&next.dp),
            dt: self.dt + next.dt,
        }
    }
}

/// World-frame navigation state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    pub r: Rotation,
    pub v: Vec3,
    pub p: Vec3,
    pub t: f64,
}

impl Default for NavState {
    fn default() -> Self {
        Self {
            r: Rotation::identity(),
            v: Vec3::zeros(),
            p: Vec3::zeros(),
            t: 0.0,
        }
    }
}

impl NavState {
    pub fn new(r: Rotation, v: Vec3, p: Vec3, t: f64) -> Self {
        Self { r, v, p, t }
    }
}

/// Every intermediate increment of a corrected IMU stream; entry `k` covers
/// samples `0..=k`. Rotation, velocity and position accumulations all run
/// through the log-depth scans.
pub fn integrate_increments(samples: &ImuSequence) -> Result<Vec<Increments>> {
    if samples.is_empty() {
        return Err(invalid("cannot integrate an empty IMU sequence"));
    }
    samples.validate()?;
    let dts = samples.dts();
    let n = samples.len();

    let steps: Vec<Rotation> = par_map(n, |k| Rotation::exp(&(samples.samples[k].gyro * dts[k])));
    let rot = cumprod_so3(&steps);

    let rot_before = |k: usize| if k == 0 { Rotation::identity() } else { rot[k - 1] };
    let dv_terms: Vec<Vec3> = par_map(n, |k| {
        rot_before(k).rotate(&samples.samples[k].acc) * dts[k]
    });
    let vel = cumsum_vec3(&dv_terms);

    let dp_terms: Vec<Vec3> = par_map(n, |k| {
        let v_before = if k == 0 { Vec3::zeros() } else { vel[k - 1] };
        v_before * dts[k] + dv_terms[k] * (0.5 * dts[k])
    });
    let pos = cumsum_vec3(&dp_terms);
    let elapsed = inclusive_scan(&dts, |a, b| a + b);

    Ok((0..n)
        .map(|k| Increments {
            dr: rot[k],
            dv: vel[k],
            dp: pos[k],
            dt: elapsed[k],
        })
        .collect())
}

/// Frame-by-frame recursion producing the same increments as
/// [`integrate_increments`]; this is the baseline the batched path is timed
/// against.
pub fn integrate_increments_sequential(samples: &ImuSequence) -> Result<Vec<Increments>> {
    if samples.is_empty() {
        return Err(invalid("cannot integrate an empty IMU sequence"));
    }
    samples.validate()?;
    let dts = samples.dts();
    let mut acc = Increments::identity();
    let mut out = Vec::with_capacity(samples.len());
    for (s, &dt) in samples.samples.iter().zip(&dts) {
        acc = step_increment(&acc, s, dt);
        out.push(acc);
    }
    Ok(out)
}

/// Advances an increment by one sample held for `dt` seconds.
pub fn step_increment(inc: &Increments, sample: &ImuSample, dt: f64) -> Increments {
    let acc_rot = inc.dr.rotate(&sample.acc);
    Increments {
        dr: inc.dr.compose(&Rotation::exp(&(sample.gyro * dt))),
        dv: inc.dv + acc_rot * dt,
        dp: inc.dp + inc.dv * dt + acc_rot * (0.5 * dt * dt),
        dt: inc.dt + dt,
    }
}

/// Integrates the whole stream into a single increment.
pub fn integrate_window(samples: &ImuSequence) -> Result<Increments> {
    Ok(*integrate_increments(samples)?.last().expect("non-empty"))
}

/// Propagates a world-frame state through an increment.
pub fn predict_state(x: &NavState, inc: &Increments, gravity: &Vec3) -> NavState {
    let dt = inc.dt;
    NavState {
        r: x.r.compose(&inc.dr),
        v: x.v + gravity * dt + x.r.rotate(&inc.dv),
        p: x.p + x.v * dt + gravity * (0.5 * dt * dt) + x.r.rotate(&inc.dp),
        t: x.t + dt,
    }
}

/// Initial state followed by the predicted state after every increment.
pub fn predict_trajectory(x0: &NavState, incs: &[Increments], gravity: &Vec3) -> Vec<NavState> {
    std::iter::once(*x0)
        .chain(incs.iter().map(|inc| predict_state(x0, inc, gravity)))
        .collect()
}

fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if n >= PAR_MAP_MIN {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}
