//! Trajectory error metrics. Rotation errors are reported in degrees,
//! position errors in meters. No alignment transform is applied.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::dataset::TimeWindow;
use crate::error::{invalid, Result};
use crate::preintegration::NavState;

/// Estimate/ground-truth pairs at common timestamps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub est: NavState,
    pub gt: NavState,
}

/// Samples `gt` at every estimate timestamp. Position and velocity are
/// interpolated linearly, rotation spherically. Estimates outside the ground
/// truth span or inside any mask window are dropped.
pub fn time_align(est: &[NavState], gt: &[NavState], masks: &[TimeWindow]) -> Result<Vec<Pair>> {
    if gt.len() < 2 {
        return Err(invalid("time alignment needs at least two ground-truth samples"));
    }
    Ok(est
        .iter()
        .filter(|e| !masks.iter().any(|m| m.contains(e.t)))
        .filter_map(|e| interpolate(gt, e.t).map(|g| Pair { est: *e, gt: g }))
        .collect())
}

/// Interpolated state at `t`, or `None` outside the covered span.
pub fn interpolate(traj: &[NavState], t: f64) -> Option<NavState> {
    const EDGE: f64 = 1e-9;
    let first = traj.first()?;
    let last = traj.last()?;
    if t < first.t - EDGE || t > last.t + EDGE {
        return None;
    }
    let idx = traj.partition_point(|s| s.t < t);
    if idx < traj.len() && (traj[idx].t - t).abs() <= EDGE {
        return Some(NavState { t, ..traj[idx] });
    }
    if idx == 0 {
        return Some(NavState { t, ..traj[0] });
    }
    if idx >= traj.len() {
        return Some(NavState { t, ..*last });
    }
    let (a, b) = (&traj[idx - 1], &traj[idx]);
    if (t - a.t).abs() <= EDGE {
        return Some(NavState { t, ..*a });
    }
    let s = (t - a.t) / (b.t - a.t);
    Some(NavState {
        r: a.r.slerp(&b.r, s),
        v: a.v + (b.v - a.v) * s,
        p: a.p + (b.p - a.p) * s,
        t,
    })
}

/// Per-interval errors: rotation in degrees, displacement in meters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelativeErrors {
    pub rotation_deg: Vec<f64>,
    pub displacement: Vec<f64>,
}

fn check_paired(est: &[NavState], gt: &[NavState]) -> Result<()> {
    if est.len() != gt.len() {
        return Err(invalid(format!(
            "trajectories not paired: {} estimates vs {} ground-truth states",
            est.len(),
            gt.len()
        )));
    }
    if est.is_empty() {
        return Err(invalid("empty trajectories"));
    }
    Ok(())
}

/// Nominal sample period: the median timestamp step.
fn nominal_period(states: &[NavState]) -> f64 {
    let mut steps: Vec<f64> = states.windows(2).map(|w| w[1].t - w[0].t).collect();
    if steps.is_empty() {
        return 0.0;
    }
    steps.sort_by(f64::total_cmp);
    steps[steps.len() / 2]
}

/// Index pairs `(i, j)` with `t_j` the timestamp nearest `t_i + interval`,
/// kept when it lies within half a sample period.
pub fn interval_pairs(states: &[NavState], interval: f64) -> Vec<(usize, usize)> {
    let half = 0.5 * nominal_period(states) + 1e-9;
    let mut out = Vec::new();
    for i in 0..states.len() {
        let target = states[i].t + interval;
        let j = states.partition_point(|s| s.t < target);
        let best = [j.checked_sub(1), Some(j)]
            .into_iter()
            .flatten()
            .filter(|&k| k < states.len() && k > i)
            .min_by(|&a, &b| {
                (states[a].t - target)
                    .abs()
                    .total_cmp(&(states[b].t - target).abs())
            });
        if let Some(k) = best {
            if (states[k].t - target).abs() <= half {
                out.push((i, k));
            }
        }
    }
    out
}

pub fn relative_errors(est: &[NavState], gt: &[NavState], interval: f64) -> Result<RelativeErrors> {
    check_paired(est, gt)?;
    let mut out = RelativeErrors::default();
    for (i, j) in interval_pairs(gt, interval) {
        let rel_gt = gt[i].r.inverse().compose(&gt[j].r);
        let rel_est = est[i].r.inverse().compose(&est[j].r);
        out.rotation_deg
            .push(rel_est.angle_to(&rel_gt).to_degrees());
        // displacements compared in each trajectory's own frame at i
        let err = gt[i].r.inverse_rotate(&(gt[j].p - gt[i].p)) - est[i].r.inverse_rotate(&(est[j].p - est[i].p));
        out.displacement.push(err.norm());
    }
    if out.rotation_deg.is_empty() {
        return Err(invalid(format!(
            "no sample pairs span an interval of {interval} s"
        )));
    }
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// Relative orientation error, degrees.
pub fn roe(est: &[NavState], gt: &[NavState], interval: f64) -> Result<f64> {
    Ok(mean(&relative_errors(est, gt, interval)?.rotation_deg))
}

/// Relative position error, meters.
pub fn rpe(est: &[NavState], gt: &[NavState], interval: f64) -> Result<f64> {
    Ok(mean(&relative_errors(est, gt, interval)?.displacement))
}

pub fn r_rmse(est: &[NavState], gt: &[NavState], interval: f64) -> Result<f64> {
    Ok(rms(&relative_errors(est, gt, interval)?.rotation_deg))
}

pub fn p_rmse(est: &[NavState], gt: &[NavState], interval: f64) -> Result<f64> {
    Ok(rms(&relative_errors(est, gt, interval)?.displacement))
}

pub fn absolute_errors(est: &[NavState], gt: &[NavState]) -> Result<Vec<f64>> {
    check_paired(est, gt)?;
    Ok(est.iter().zip(gt).map(|(e, g)| (e.p - g.p).norm()).collect())
}

/// Absolute translation error, meters.
pub fn ate(est: &[NavState], gt: &[NavState]) -> Result<f64> {
    Ok(mean(&absolute_errors(est, gt)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    Roe,
    Rpe,
    RRmse,
    PRmse,
    Ate,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Roe, Metric::Rpe, Metric::RRmse, Metric::PRmse, Metric::Ate];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Roe => "roe",
            Metric::Rpe => "rpe",
            Metric::RRmse => "rrmse",
            Metric::PRmse => "prmse",
            Metric::Ate => "ate",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| invalid(format!("unknown metric '{s}' (expected roe, rpe, rrmse, prmse or ate)")))
    }
}

/// Summary of one metric's underlying error samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricStats {
    pub mean: f64,
    pub rmse: f64,
    pub count: usize,
    pub interval_s: Option<f64>,
}

impl MetricStats {
    fn of(values: &[f64], interval_s: Option<f64>) -> Self {
        Self {
            mean: mean(values),
            rmse: rms(values),
            count: values.len(),
            interval_s,
        }
    }

    /// The headline value: the mean for ROE/RPE/ATE, the RMSE for R-RMSE/P-RMSE.
    pub fn value(&self, metric: Metric) -> f64 {
        match metric {
            Metric::RRmse | Metric::PRmse => self.rmse,
            _ => self.mean,
        }
    }
}

/// Report keyed by metric name, in the layout written by `evaluate`.
pub fn evaluate(
    est: &[NavState],
    gt: &[NavState],
    interval: f64,
    metrics: &[Metric],
) -> Result<BTreeMap<String, MetricStats>> {
    let needs_relative = metrics.iter().any(|m| *m != Metric::Ate);
    let rel = if needs_relative {
        Some(relative_errors(est, gt, interval)?)
    } else {
        None
    };
    let mut out = BTreeMap::new();
    for m in metrics {
        let stats = match m {
            Metric::Roe | Metric::RRmse => {
                MetricStats::of(&rel.as_ref().expect("computed").rotation_deg, Some(interval))
            }
            Metric::Rpe | Metric::PRmse => {
                MetricStats::of(&rel.as_ref().expect("computed").displacement, Some(interval))
            }
            Metric::Ate => MetricStats::of(&absolute_errors(est, gt)?, None),
        };
        out.insert(m.name().to_string(), stats);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Rotation, Vec3};
    use approx::assert_relative_eq;

    fn still(n: usize, dt: f64) -> Vec<NavState> {
        (0..n)
            .map(|k| NavState::new(Rotation::identity(), Vec3::zeros(), Vec3::zeros(), k as f64 * dt))
            .collect()
    }

    #[test]
    fn identical_trajectories_score_zero() {
        let gt: Vec<NavState> = (0..300)
            .map(|k| {
                let t = k as f64 * 0.01;
                NavState::new(Rotation::exp(&Vec3::new(0.1 * t, -0.2 * t, t)), Vec3::zeros(), Vec3::new(t, t * t, 0.0), t)
            })
            .collect();
        for m in Metric::ALL {
            let stats = evaluate(&gt, &gt, 1.0, &[m]).unwrap()[m.name()];
            assert_eq!(stats.value(m), 0.0, "{m}");
        }
    }

    #[test]
    fn yaw_drift_of_one_degree_per_second() {
        let gt = still(301, 0.01);
        let est: Vec<NavState> = gt
            .iter()
            .map(|s| NavState { r: Rotation::about_z(s.t.to_radians()), ..*s })
            .collect();
        assert_relative_eq!(roe(&est, &gt, 1.0).unwrap(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(r_rmse(&est, &gt, 1.0).unwrap(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn velocity_error_gives_displacement_error() {
        let gt = still(201, 0.01);
        let est: Vec<NavState> = gt
            .iter()
            .map(|s| NavState { p: Vec3::new(0.1 * s.t, 0.0, 0.0), ..*s })
            .collect();
        assert_relative_eq!(rpe(&est, &gt, 1.0).unwrap(), 0.1, epsilon = 1e-12);
        assert_relative_eq!(p_rmse(&est, &gt, 1.0).unwrap(), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn uniform_offset_ate() {
        let gt = still(10, 0.1);
        let est: Vec<NavState> = gt.iter().map(|s| NavState { p: s.p + Vec3::x(), ..*s }).collect();
        assert_eq!(ate(&est, &gt).unwrap(), 1.0);
    }

    #[test]
    fn single_interval_equals_its_error() {
        let gt = still(2, 1.0);
        let mut est = gt.clone();
        est[1].r = Rotation::about_z(0.25);
        est[1].p = Vec3::new(0.0, 0.3, 0.0);
        let e = relative_errors(&est, &gt, 1.0).unwrap();
        assert_eq!(e.rotation_deg.len(), 1);
        assert_relative_eq!(roe(&est, &gt, 1.0).unwrap(), 0.25f64.to_degrees(), epsilon = 1e-12);
        assert_relative_eq!(r_rmse(&est, &gt, 1.0).unwrap(), 0.25f64.to_degrees(), epsilon = 1e-12);
        assert_relative_eq!(p_rmse(&est, &gt, 1.0).unwrap(), 0.3, epsilon = 1e-15);
    }

    #[test]
    fn interval_longer_than_trajectory_is_an_error() {
        let gt = still(10, 0.1);
        assert!(roe(&gt, &gt, 5.0).is_err());
        assert!(ate(&gt[..3], &gt).is_err());
    }

    #[test]
    fn unknown_metric_name() {
        assert!("rmse".parse::<Metric>().is_err());
        assert_eq!("R-RMSE".replace('-', "").parse::<Metric>().unwrap(), Metric::RRmse);
    }

    #[test]
    fn align_on_identical_timestamps_is_identity() {
        let gt: Vec<NavState> = (0..20)
            .map(|k| NavState::new(Rotation::about_z(0.1 * k as f64), Vec3::x() * k as f64, Vec3::y() * k as f64, 0.1 * k as f64))
            .collect();
        let pairs = time_align(&gt, &gt, &[]).unwrap();
        assert_eq!(pairs.len(), 20);
        for (p, g) in pairs.iter().zip(&gt) {
            assert_eq!(p.gt, *g);
        }
    }

    #[test]
    fn align_interpolates_linear_position_and_slerps() {
        let gt = vec![
            NavState::new(Rotation::identity(), Vec3::zeros(), Vec3::zeros(), 0.0),
            NavState::new(Rotation::about_z(std::f64::consts::FRAC_PI_2), Vec3::x(), Vec3::new(2.0, 4.0, 6.0), 1.0),
        ];
        let est = vec![NavState { t: 0.5, ..NavState::default() }, NavState { t: 1.5, ..NavState::default() }];
        let pairs = time_align(&est, &gt, &[]).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].gt.p, Vec3::new(1.0, 2.0, 3.0));
        assert_relative_eq!(pairs[0].gt.r.angle(), std::f64::consts::FRAC_PI_4, epsilon = 1e-15);
        assert!(time_align(&est, &gt[..1], &[]).is_err());
    }

    #[test]
    fn align_drops_masked_estimates() {
        let gt = still(11, 0.1);
        let pairs = time_align(&gt, &gt, &[TimeWindow::new(0.25, 0.55)]).unwrap();
        assert_eq!(pairs.len(), 8);
    }
}
