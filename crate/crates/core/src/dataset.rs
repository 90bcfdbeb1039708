//! CSV ingestion and output, mask windows and fixed-length training segments.
//!
//! File schemas:
//!
//! * IMU: `timestamp_ns,wx,wy,wz,ax,ay,az` (rad/s, m/s²), header optional.
//! * Ground truth: `timestamp_ns,px,py,pz,qw,qx,qy,qz[,vx,vy,vz,…]`, header
//!   optional, extra columns ignored.
//! * States (estimates): `t,px,py,pz,qw,qx,qy,qz,vx,vy,vz`, `t` in seconds.
//! * GPS: `t,px,py,pz,sigma`, seconds and meters.
//! * Covariances: `t,s00,s01,…,s88`, the row-major upper triangle of each
//!   9×9 state covariance.
//!
//! Nanosecond timestamps are parsed as integers and converted to seconds
//! relative to a stream origin so epoch-scale values keep full precision.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::covariance::StateCov;
use crate::error::{invalid, Error, Result};
use crate::metrics::interpolate;
use crate::pgo::GpsFix;
use crate::preintegration::{ImuSample, ImuSequence, NavState};
use crate::{Rotation, Vec3};

/// Closed time interval `[start, end]` in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: f64,
    pub end: f64,
}

impl TimeWindow {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t <= self.end
    }

    pub fn overlaps(&self, start: f64, end: f64) -> bool {
        start <= self.end && end >= self.start
    }
}

/// A ground-truth or estimated trajectory with its time origin.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub origin_ns: i64,
    pub states: Vec<NavState>,
}

impl Trajectory {
    pub fn new(states: Vec<NavState>) -> Self {
        Self {
            origin_ns: 0,
            states,
        }
    }

    /// Re-expresses timestamps relative to another origin.
    pub fn rebase(&mut self, origin_ns: i64) {
        let shift = (self.origin_ns - origin_ns) as f64 * 1e-9;
        for s in &mut self.states {
            s.t += shift;
        }
        self.origin_ns = origin_ns;
    }
}

pub trait Timestamped {
    fn time(&self) -> f64;
}

impl Timestamped for ImuSample {
    fn time(&self) -> f64 {
        self.t
    }
}

impl Timestamped for NavState {
    fn time(&self) -> f64 {
        self.t
    }
}

impl Timestamped for GpsFix {
    fn time(&self) -> f64 {
        self.t
    }
}

/// Drops items inside any window and returns the remaining contiguous runs.
pub fn apply_masks<T: Timestamped + Clone>(items: &[T], masks: &[TimeWindow]) -> Vec<Vec<T>> {
    let mut runs = Vec::new();
    let mut current = Vec::new();
    for item in items {
        if masks.iter().any(|m| m.contains(item.time())) {
            if !current.is_empty() {
                runs.push(std::mem::take(&mut current));
            }
        } else {
            current.push(item.clone());
        }
    }
    if !current.is_empty() {
        runs.push(current);
    }
    runs
}

/// [`apply_masks`] for an IMU stream, keeping its time origin.
pub fn mask_sequence(seq: &ImuSequence, masks: &[TimeWindow]) -> Vec<ImuSequence> {
    apply_masks(&seq.samples, masks)
        .into_iter()
        .map(|samples| ImuSequence {
            origin_ns: seq.origin_ns,
            samples,
        })
        .collect()
}

/// A training window with interpolated ground truth at both ends.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub imu: ImuSequence,
    pub start: NavState,
    pub end: NavState,
}

/// Fixed-length windows of `length` samples every `stride` samples. Window
/// `[k, k+L)` is anchored at `t_k` and ends at `t_{k+L−1} + dt`; windows whose
/// span touches a mask or leaves ground-truth coverage are skipped.
pub fn segments(
    imu: &ImuSequence,
    gt: &[NavState],
    length: usize,
    stride: usize,
    masks: &[TimeWindow],
) -> Result<Vec<Segment>> {
    if length == 0 || stride == 0 {
        return Err(invalid("segment length and stride must be positive"));
    }
    if gt.len() < 2 {
        return Err(invalid("segments need at least two ground-truth samples"));
    }
    let mut out = Vec::new();
    for run in mask_sequence(imu, masks) {
        if run.len() < length {
            continue;
        }
        let dts = run.dts();
        let mut k = 0;
        while k + length <= run.len() {
            let t0 = run.samples[k].t;
            let t1 = run.samples[k + length - 1].t + dts[k + length - 1];
            let clear = !masks.iter().any(|m| m.overlaps(t0, t1));
            if clear {
                if let (Some(start), Some(end)) = (interpolate(gt, t0), interpolate(gt, t1)) {
                    out.push(Segment {
                        imu: run.slice(k..k + length),
                        start,
                        end,
                    });
                }
            }
            k += stride;
        }
    }
    Ok(out)
}

fn parse_err(path: &Path, row: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        row,
        message: message.into(),
    }
}

/// Reads numeric rows; a first row whose leading field is not an integer is
/// treated as a header. Returns `(row_number, fields)`.
fn read_rows(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        let fields: Vec<String> = rec.iter().map(str::to_string).collect();
        if fields.iter().all(|f| f.is_empty()) {
            continue;
        }
        if i == 0 && fields[0].parse::<i64>().is_err() {
            continue;
        }
        rows.push((i + 1, fields));
    }
    if rows.is_empty() {
        return Err(parse_err(path, 1, "no data rows"));
    }
    Ok(rows)
}

fn parse_f64(path: &Path, row: usize, field: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| parse_err(path, row, format!("'{field}' is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(path, row, format!("non-finite value '{field}'")));
    }
    Ok(v)
}

fn parse_ns(path: &Path, row: usize, field: &str) -> Result<i64> {
    field
        .parse()
        .map_err(|_| parse_err(path, row, format!("'{field}' is not an integer nanosecond timestamp")))
}

fn ns_to_s(ns: i64, origin: i64) -> f64 {
    (ns - origin) as f64 * 1e-9
}

fn s_to_ns(t: f64, origin: i64) -> i64 {
    origin + (t * 1e9).round() as i64
}

pub fn load_imu_csv(path: impl AsRef<Path>) -> Result<ImuSequence> {
    let path = path.as_ref();
    let rows = read_rows(path)?;
    let mut origin = None;
    let mut prev_ns = None;
    let mut samples = Vec::with_capacity(rows.len());
    for (row, f) in rows {
        if f.len() < 7 {
            return Err(parse_err(path, row, format!("expected 7 columns, found {}", f.len())));
        }
        let ns = parse_ns(path, row, &f[0])?;
        if let Some(p) = prev_ns {
            if ns <= p {
                return Err(parse_err(path, row, format!("timestamp {ns} not after {p}")));
            }
        }
        prev_ns = Some(ns);
        let origin = *origin.get_or_insert(ns);
        let vals = f[1..7]
            .iter()
            .map(|x| parse_f64(path, row, x))
            .collect::<Result<Vec<_>>>()?;
        samples.push(ImuSample::new(
            ns_to_s(ns, origin),
            Vec3::new(vals[0], vals[1], vals[2]),
            Vec3::new(vals[3], vals[4], vals[5]),
        ));
    }
    Ok(ImuSequence {
        origin_ns: origin.expect("at least one row"),
        samples,
    })
}

pub fn write_imu_csv(path: impl AsRef<Path>, seq: &ImuSequence) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "timestamp_ns,wx,wy,wz,ax,ay,az")?;
    for s in &seq.samples {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            s_to_ns(s.t, seq.origin_ns),
            s.gyro.x,
            s.gyro.y,
            s.gyro.z,
            s.acc.x,
            s.acc.y,
            s.acc.z
        )?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthOptions {
    /// Rows whose quaternion norm differs from 1 by more than this are
    /// rejected; `None` normalizes any non-degenerate quaternion.
    pub max_quaternion_norm_error: Option<f64>,
}

impl Default for GroundTruthOptions {
    fn default() -> Self {
        Self {
            max_quaternion_norm_error: Some(1e-3),
        }
    }
}

pub fn load_groundtruth_csv(path: impl AsRef<Path>) -> Result<Trajectory> {
    load_groundtruth_csv_with(path, GroundTruthOptions::default())
}

pub fn load_groundtruth_csv_with(path: impl AsRef<Path>, opts: GroundTruthOptions) -> Result<Trajectory> {
    let path = path.as_ref();
    let rows = read_rows(path)?;
    let mut origin = None;
    let mut prev_ns = None;
    let mut states = Vec::with_capacity(rows.len());
    let mut have_velocity = true;
    for (row, f) in rows {
        if f.len() < 8 {
            return Err(parse_err(path, row, format!("expected at least 8 columns, found {}", f.len())));
        }
        let ns = parse_ns(path, row, &f[0])?;
        if let Some(p) = prev_ns {
            if ns <= p {
                return Err(parse_err(path, row, format!("timestamp {ns} not after {p}")));
            }
        }
        prev_ns = Some(ns);
        let origin = *origin.get_or_insert(ns);
        let ncols = if f.len() >= 11 { 10 } else { 7 };
        have_velocity &= f.len() >= 11;
        let vals = f[1..=ncols]
            .iter()
            .map(|x| parse_f64(path, row, x))
            .collect::<Result<Vec<_>>>()?;
        let norm = (vals[3] * vals[3] + vals[4] * vals[4] + vals[5] * vals[5] + vals[6] * vals[6]).sqrt();
        if let Some(tol) = opts.max_quaternion_norm_error {
            if (norm - 1.0).abs() > tol {
                return Err(parse_err(path, row, format!("quaternion norm {norm} is not unit")));
            }
        }
        let r = Rotation::from_quaternion(vals[3], vals[4], vals[5], vals[6])
            .map_err(|e| parse_err(path, row, e.to_string()))?;
        let v = if ncols == 10 {
            Vec3::new(vals[7], vals[8], vals[9])
        } else {
            Vec3::zeros()
        };
        states.push(NavState::new(r, v, Vec3::new(vals[0], vals[1], vals[2]), ns_to_s(ns, origin)));
    }
    if !have_velocity {
        fill_velocity(&mut states);
    }
    Ok(Trajectory {
        origin_ns: origin.expect("at least one row"),
        states,
    })
}

/// Velocity by central differences of position, one-sided at the ends.
pub fn fill_velocity(states: &mut [NavState]) {
    let n = states.len();
    if n < 2 {
        for s in states.iter_mut() {
            s.v = Vec3::zeros();
        }
        return;
    }
    let p: Vec<(f64, Vec3)> = states.iter().map(|s| (s.t, s.p)).collect();
    for k in 0..n {
        let (a, b) = (k.saturating_sub(1), (k + 1).min(n - 1));
        states[k].v = (p[b].1 - p[a].1) / (p[b].0 - p[a].0);
    }
}

pub fn write_groundtruth_csv(path: impl AsRef<Path>, traj: &Trajectory) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "timestamp_ns,px,py,pz,qw,qx,qy,qz,vx,vy,vz")?;
    for s in &traj.states {
        let q = s.r.quaternion();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            s_to_ns(s.t, traj.origin_ns),
            s.p.x,
            s.p.y,
            s.p.z,
            q[0],
            q[1],
            q[2],
            q[3],
            s.v.x,
            s.v.y,
            s.v.z
        )?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct StateRow {
    t: f64,
    px: f64,
    py: f64,
    pz: f64,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    vx: f64,
    vy: f64,
    vz: f64,
}

pub fn write_states_csv(path: impl AsRef<Path>, states: &[NavState]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in states {
        let q = s.r.quaternion();
        w.serialize(StateRow {
            t: s.t,
            px: s.p.x,
            py: s.p.y,
            pz: s.p.z,
            qw: q[0],
            qx: q[1],
            qy: q[2],
            qz: q[3],
            vx: s.v.x,
            vy: s.v.y,
            vz: s.v.z,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_states_csv(path: impl AsRef<Path>) -> Result<Vec<NavState>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in reader.deserialize::<StateRow>().enumerate() {
        let row = i + 2;
        let r = rec.map_err(|e| parse_err(path, row, e.to_string()))?;
        let rot = Rotation::from_quaternion(r.qw, r.qx, r.qy, r.qz)
            .map_err(|e| parse_err(path, row, e.to_string()))?;
        if let Some(prev) = out.last().map(|s: &NavState| s.t) {
            if r.t <= prev {
                return Err(parse_err(path, row, format!("time {} not after {prev}", r.t)));
            }
        }
        out.push(NavState::new(rot, Vec3::new(r.vx, r.vy, r.vz), Vec3::new(r.px, r.py, r.pz), r.t));
    }
    if out.is_empty() {
        return Err(parse_err(path, 1, "no data rows"));
    }
    Ok(out)
}

/// Loads either a states file (header starting with `t,`) or a
/// ground-truth file.
pub fn load_trajectory(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let first = text.lines().next().unwrap_or("").trim_start();
    if first.starts_with("t,") {
        Ok(Trajectory::new(load_states_csv(path)?))
    } else {
        load_groundtruth_csv(path)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GpsRow {
    t: f64,
    px: f64,
    py: f64,
    pz: f64,
    sigma: f64,
}

pub fn write_gps_csv(path: impl AsRef<Path>, fixes: &[GpsFix]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for f in fixes {
        w.serialize(GpsRow {
            t: f.t,
            px: f.p.x,
            py: f.p.y,
            pz: f.p.z,
            sigma: f.sigma,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_gps_csv(path: impl AsRef<Path>) -> Result<Vec<GpsFix>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut out: Vec<GpsFix> = Vec::new();
    for (i, rec) in reader.deserialize::<GpsRow>().enumerate() {
        let row = i + 2;
        let r = rec.map_err(|e| parse_err(path, row, e.to_string()))?;
        if !(r.sigma > 0.0) {
            return Err(parse_err(path, row, format!("sigma must be positive, got {}", r.sigma)));
        }
        if let Some(prev) = out.last() {
            if r.t <= prev.t {
                return Err(parse_err(path, row, format!("time {} not after {}", r.t, prev.t)));
            }
        }
        out.push(GpsFix {
            t: r.t,
            p: Vec3::new(r.px, r.py, r.pz),
            sigma: r.sigma,
        });
    }
    Ok(out)
}

fn cov_header() -> String {
    let mut h = String::from("t");
    for i in 0..9 {
        for j in i..9 {
            h.push_str(&format!(",s{i}{j}"));
        }
    }
    h
}

pub fn write_cov_csv(path: impl AsRef<Path>, rows: &[(f64, StateCov)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{}", cov_header())?;
    for (t, c) in rows {
        write!(w, "{t}")?;
        for v in c.upper_triangle() {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_cov_csv(path: impl AsRef<Path>) -> Result<Vec<(f64, StateCov)>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header = reader.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != cov_header() {
        return Err(parse_err(path, 1, "unexpected covariance header"));
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| parse_err(path, row, e.to_string()))?;
        let vals = rec
            .iter()
            .map(|x| parse_f64(path, row, x))
            .collect::<Result<Vec<_>>>()?;
        let cov = StateCov::from_upper_triangle(&vals[1..]).map_err(|e| parse_err(path, row, e.to_string()))?;
        out.push((vals[0], cov));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn imu_fixture_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "imu.csv",
            "#timestamp [ns],w_x,w_y,w_z,a_x,a_y,a_z\n\
             1403636579758555392,-0.099,0.142,0.025,8.13,-0.37,-2.43\n\
             1403636579763555584,-0.098,0.138,0.024,8.09,-0.38,-2.44\n\
             1403636579768555520,-0.095,0.132,0.021,8.06,-0.38,-2.45\n",
        );
        let seq = load_imu_csv(&p).unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(seq.origin_ns, 1403636579758555392);
        assert_eq!(seq.samples[0].t, 0.0);
        assert!((seq.samples[1].t - 0.005000192).abs() < 1e-15);
        assert!((seq.samples[2].t - 0.010000128).abs() < 1e-15);
        assert_eq!(seq.samples[2].acc, Vec3::new(8.06, -0.38, -2.45));
    }

    #[test]
    fn imu_errors_carry_row_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let empty = write(dir.path(), "empty.csv", "");
        assert!(load_imu_csv(&empty).is_err());
        let back = write(dir.path(), "back.csv", "10,0,0,0,0,0,0\n20,0,0,0,0,0,0\n15,0,0,0,0,0,0\n");
        match load_imu_csv(&back) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("unexpected {other:?}"),
        }
        let bad = write(dir.path(), "bad.csv", "10,0,0,0,0,0,0\n20,0,x,0,0,0,0\n");
        match load_imu_csv(&bad) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
        let short = write(dir.path(), "short.csv", "10,0,0,0\n");
        assert!(load_imu_csv(&short).is_err());
    }

    #[test]
    fn groundtruth_without_velocity_derives_it() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "gt.csv",
            "0,1,2,3,1,0,0,0\n1000000000,1,2,3,1,0,0,0\n2000000000,1,2,3,1,0,0,0\n",
        );
        let traj = load_groundtruth_csv(&p).unwrap();
        assert!(traj.states.iter().all(|s| s.v == Vec3::zeros()));
    }

    #[test]
    fn groundtruth_quaternion_policy() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "gt.csv", "0,0,0,0,2,0,0,0\n5,0,0,0,1,0,0,0\n");
        assert!(load_groundtruth_csv(&p).is_err());
        let lenient = GroundTruthOptions {
            max_quaternion_norm_error: None,
        };
        let traj = load_groundtruth_csv_with(&p, lenient).unwrap();
        assert_eq!(traj.states[0].r, Rotation::identity());
        let zero = write(dir.path(), "zero.csv", "0,0,0,0,0,0,0,0\n");
        assert!(load_groundtruth_csv_with(&zero, lenient).is_err());
    }

    #[test]
    fn rebase_shifts_by_origin_difference() {
        let mut traj = Trajectory {
            origin_ns: 2_500_000_000,
            states: vec![NavState::default()],
        };
        traj.rebase(1_000_000_000);
        assert_eq!(traj.states[0].t, 1.5);
    }

    #[test]
    fn masks() {
        let samples: Vec<ImuSample> = (0..10)
            .map(|k| ImuSample::new(k as f64, Vec3::zeros(), Vec3::zeros()))
            .collect();
        assert_eq!(apply_masks(&samples, &[]), vec![samples.clone()]);
        assert!(apply_masks(&samples, &[TimeWindow::new(-1.0, 100.0)]).is_empty());
        let runs = apply_masks(&samples, &[TimeWindow::new(3.5, 5.5)]);
        assert_eq!(runs.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4]);
    }

    fn uniform(n: usize, dt: f64) -> (ImuSequence, Vec<NavState>) {
        let imu = ImuSequence::new(
            (0..n)
                .map(|k| ImuSample::new(k as f64 * dt, Vec3::zeros(), Vec3::zeros()))
                .collect(),
        )
        .unwrap();
        let gt = (0..n)
            .map(|k| NavState { t: k as f64 * dt, ..NavState::default() })
            .collect();
        (imu, gt)
    }

    #[test]
    fn segment_counting_with_boundary_rule() {
        let (imu, gt) = uniform(5000, 0.005);
        let segs = segments(&imu, &gt, 1000, 1000, &[]).unwrap();
        assert_eq!(segs.len(), 4);
        for (i, s) in segs.iter().enumerate() {
            assert_eq!(s.imu.len(), 1000);
            assert!((s.start.t - i as f64 * 5.0).abs() < 1e-9);
            assert!((s.end.t - (i as f64 + 1.0) * 5.0).abs() < 1e-9);
            s.imu.validate().unwrap();
        }
        // disjoint windows
        for w in segs.windows(2) {
            assert!(w[0].imu.samples.last().unwrap().t < w[1].imu.samples[0].t);
        }
        assert!(segments(&imu.slice(0..999), &gt, 1000, 1000, &[]).unwrap().is_empty());
    }

    #[test]
    fn segments_never_span_a_gap() {
        let (imu, gt) = uniform(5001, 0.005);
        // masks out samples 2000..=2199
        let mask = TimeWindow::new(9.9975, 10.9975);
        let segs = segments(&imu, &gt, 1000, 1000, &[mask]).unwrap();
        // run 1: samples 0..2000 → windows at 0, 1000 (the second ends inside the mask)
        // run 2: samples 2200..5001 → windows at 2200, 3200 (4200 needs gt past the end)
        assert_eq!(segs.len(), 3);
        for s in &segs {
            assert!(!mask.overlaps(s.start.t, s.end.t));
        }
    }

    #[test]
    fn file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let imu = ImuSequence {
            origin_ns: 1_403_636_579_758_555_392,
            samples: (0..20)
                .map(|k| {
                    let x = k as f64;
                    ImuSample::new(
                        k as f64 * 0.005,
                        Vec3::new(0.1 * x.sin(), 1.0 / (x + 3.0), -0.3),
                        Vec3::new(9.81 + x.cos() / 7.0, 0.0, std::f64::consts::PI),
                    )
                })
                .collect(),
        };
        let p = dir.path().join("imu.csv");
        write_imu_csv(&p, &imu).unwrap();
        let back = load_imu_csv(&p).unwrap();
        assert_eq!(back.origin_ns, imu.origin_ns);
        for (a, b) in back.samples.iter().zip(&imu.samples) {
            assert_eq!(a.gyro, b.gyro);
            assert_eq!(a.acc, b.acc);
            assert!((a.t - b.t).abs() < 1e-12);
        }

        let gt = Trajectory {
            origin_ns: 77,
            states: (0..10)
                .map(|k| {
                    NavState::new(
                        Rotation::exp(&Vec3::new(0.1, 0.2, 0.3 * k as f64)),
                        Vec3::new(1.0 / 3.0, 0.0, k as f64),
                        Vec3::new(k as f64, 2.0 / 7.0, 0.5),
                        k as f64 * 0.01,
                    )
                })
                .collect(),
        };
        let p = dir.path().join("gt.csv");
        write_groundtruth_csv(&p, &gt).unwrap();
        let back = load_groundtruth_csv(&p).unwrap();
        assert_eq!(back.origin_ns, 77);
        for (a, b) in back.states.iter().zip(&gt.states) {
            assert_eq!(a.p, b.p);
            assert_eq!(a.v, b.v);
            assert!(a.r.distance(&b.r) < 1e-15);
        }

        let p = dir.path().join("est.csv");
        write_states_csv(&p, &gt.states).unwrap();
        let back = load_trajectory(&p).unwrap();
        assert_eq!(back.states.len(), 10);
        assert_eq!(back.states[3].t, gt.states[3].t);
        assert_eq!(back.states[3].p, gt.states[3].p);

        let fixes = vec![
            GpsFix { t: 0.0, p: Vec3::new(1.0, 2.0, 3.0), sigma: 0.1 },
            GpsFix { t: 1.0, p: Vec3::new(1.5, 2.5, 3.5), sigma: 0.1 },
        ];
        let p = dir.path().join("gps.csv");
        write_gps_csv(&p, &fixes).unwrap();
        assert_eq!(load_gps_csv(&p).unwrap(), fixes);

        let m = crate::Mat9::from_fn(|i, j| (i + j) as f64 * 0.5 + if i == j { 10.0 } else { 0.0 });
        let rows = vec![(0.0, StateCov::zeros()), (0.005, StateCov(m))];
        let p = dir.path().join("cov.csv");
        write_cov_csv(&p, &rows).unwrap();
        assert_eq!(load_cov_csv(&p).unwrap(), rows);
        let header = std::fs::read_to_string(&p).unwrap();
        assert_eq!(header.lines().next().unwrap().split(',').count(), 46);
    }
}
