use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use serde::Serialize;

use preint::bench::{self, BenchGroup};
use preint::correction::{apply_correction, uncertainty_of, CorrectionModel, CorrectionTable, UncertaintyModel};
use preint::covariance::{propagate_batched, propagate_iterative, NoiseDiag, StateCov};
use preint::dataset::{
    load_gps_csv, load_groundtruth_csv, load_imu_csv, load_trajectory, segments, write_cov_csv, write_groundtruth_csv,
    write_gps_csv, write_imu_csv, write_states_csv, Segment, TimeWindow, Trajectory,
};
use preint::losses::{fit_constant_bias, residual_noise, CalibConfig, ConstantBias};
use preint::metrics::{evaluate as evaluate_metrics, interpolate, time_align, Metric, MetricStats};
use preint::pgo::{initial_state_from_gps, keyframe_graph, solve, SolveOptions, SolveReport};
use preint::preintegration::{integrate_increments, predict_trajectory};
use preint::sim::{gen_trajectory, sample_imu, simulate_gps, ImuBias, ImuNoise, Motion};
use preint::{ImuSequence, NavState, Vec3};

use crate::{BenchArgs, CalibrateArgs, EvaluateArgs, FuseArgs, IntegrateArgs, SimulateArgs, UsageError};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| usage(format!("missing required --{flag}")))
}

fn vec3(values: Option<Vec<f64>>, flag: &str) -> Result<Vec3> {
    match values {
        None => Ok(Vec3::zeros()),
        Some(v) if v.len() == 3 && v.iter().all(|c| c.is_finite()) => Ok(Vec3::new(v[0], v[1], v[2])),
        Some(v) => Err(usage(format!("--{flag} needs three finite numbers, got {v:?}"))),
    }
}

fn gravity(magnitude: Option<f64>) -> Result<Vec3> {
    let g = magnitude.unwrap_or(9.81);
    if !(g.is_finite() && g >= 0.0) {
        return Err(usage(format!("--gravity must be a nonnegative magnitude, got {g}")));
    }
    Ok(Vec3::new(0.0, 0.0, -g))
}

fn out_dir(out: Option<PathBuf>) -> Result<PathBuf> {
    let dir = required(out, "out")?;
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn aligned_table(path: &Path, imu: &ImuSequence) -> Result<CorrectionTable> {
    let table = CorrectionTable::read(path).with_context(|| format!("reading {}", path.display()))?;
    table
        .check_aligned(imu)
        .with_context(|| format!("{} does not match the IMU stream", path.display()))?;
    Ok(table)
}

/// Two comma-separated nonnegative numbers after `prefix`.
fn std_pair(s: &str, prefix: &str) -> Result<(f64, f64)> {
    let v: Vec<f64> = s[prefix.len()..]
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| usage(format!("cannot parse --uncertainty '{s}'")))?;
    match v[..] {
        [g, a] if [g, a].iter().all(|x| x.is_finite() && *x >= 0.0) => Ok((g, a)),
        _ => Err(usage(format!("--uncertainty {prefix} needs GYRO,ACC, got '{s}'"))),
    }
}

/// `fixed:G,A` (per-sample standard deviations), `density:G,A` (noise
/// densities, converted with the median sample spacing) or a correction file
/// whose noise columns are used. Falls back to the correction file's noise.
fn uncertainty_model(
    value: Option<&str>,
    correction: Option<&CorrectionTable>,
    imu: &ImuSequence,
) -> Result<Option<UncertaintyModel>> {
    match value {
        Some(s) if s.starts_with("fixed:") => {
            let (g, a) = std_pair(s, "fixed:")?;
            Ok(Some(UncertaintyModel::ConstantDiag(NoiseDiag::from_std(g, a))))
        }
        Some(s) if s.starts_with("density:") => {
            let (g, a) = std_pair(s, "density:")?;
            let mut dts: Vec<f64> = imu.samples.windows(2).map(|w| w[1].t - w[0].t).collect();
            if dts.is_empty() {
                return Err(usage("density noise needs at least two IMU samples"));
            }
            dts.sort_by(f64::total_cmp);
            let dt = dts[dts.len() / 2];
            Ok(Some(UncertaintyModel::ConstantDiag(NoiseDiag::from_density(g, a, dt))))
        }
        Some(path) => Ok(Some(aligned_table(Path::new(path), imu)?.uncertainty())),
        None => Ok(correction.map(CorrectionTable::uncertainty)),
    }
}

fn windows(masks: Option<Vec<[f64; 2]>>) -> Result<Vec<TimeWindow>> {
    masks
        .unwrap_or_default()
        .into_iter()
        .map(|[a, b]| {
            if a.is_finite() && b.is_finite() && a < b {
                Ok(TimeWindow::new(a, b))
            } else {
                Err(usage(format!("mask [{a}, {b}] must have start < end")))
            }
        })
        .collect()
}

pub fn simulate(a: SimulateArgs) -> Result<()> {
    let out = out_dir(a.out)?;
    let motion = Motion::named(a.traj.as_deref().unwrap_or("circle"))?;
    let traj = gen_trajectory(&motion, a.duration.unwrap_or(60.0), a.rate.unwrap_or(200.0))?;
    let bias = ImuBias {
        gyro: vec3(a.gyro_bias, "gyro-bias")?,
        acc: vec3(a.acc_bias, "acc-bias")?,
    };
    let (gyro_std, acc_std) = (a.gyro_std.unwrap_or(0.0), a.acc_std.unwrap_or(0.0));
    if !(gyro_std >= 0.0 && acc_std >= 0.0) {
        return Err(usage("noise standard deviations must be nonnegative"));
    }
    let seed = a.seed.unwrap_or(0);
    let imu = sample_imu(
        &traj,
        &gravity(a.gravity)?,
        &ImuNoise::isotropic(gyro_std, acc_std),
        &bias,
        seed,
    )?;
    let gps = simulate_gps(
        &traj,
        a.gps_rate.unwrap_or(1.0),
        a.gps_sigma.unwrap_or(0.1),
        seed.wrapping_add(1),
    )?;
    write_imu_csv(out.join("imu.csv"), &imu)?;
    write_groundtruth_csv(out.join("gt.csv"), &Trajectory::new(traj))?;
    write_gps_csv(out.join("gps.csv"), &gps)?;
    println!(
        "wrote {} IMU samples and {} GPS fixes to {}",
        imu.len(),
        gps.len(),
        out.display()
    );
    Ok(())
}

pub fn integrate(a: IntegrateArgs) -> Result<()> {
    let imu_path = required(a.imu, "imu")?;
    let mode = a.cov.as_deref().unwrap_or("batched");
    if !matches!(mode, "batched" | "iterative" | "off") {
        return Err(usage(format!("--cov must be batched, iterative or off, got '{mode}'")));
    }
    let g = gravity(a.gravity)?;
    let out = out_dir(a.out)?;

    let imu = load_imu_csv(&imu_path).with_context(|| format!("reading {}", imu_path.display()))?;
    let table = a.correction.as_deref().map(|p| aligned_table(p, &imu)).transpose()?;
    let correction = table.as_ref().map_or(CorrectionModel::Identity, CorrectionTable::correction);
    let mut samples = apply_correction(&imu, &correction)?;
    let mut eta = match mode {
        "off" => None,
        _ => {
            let model = uncertainty_model(a.uncertainty.as_deref(), table.as_ref(), &imu)?
                .ok_or_else(|| usage("covariance propagation needs --uncertainty or --correction"))?;
            Some(uncertainty_of(&samples, &model)?)
        }
    };

    let x0 = match &a.gt {
        Some(path) => {
            let gt = load_trajectory(path).with_context(|| format!("reading {}", path.display()))?;
            samples.rebase(gt.origin_ns);
            let first = samples
                .samples
                .iter()
                .position(|s| interpolate(&gt.states, s.t).is_some())
                .ok_or_else(|| usage("IMU stream does not overlap the ground truth"))?;
            samples = samples.slice(first..samples.len());
            if let Some(e) = &mut eta {
                e.drain(..first);
            }
            interpolate(&gt.states, samples.samples[0].t).expect("inside coverage")
        }
        None => NavState {
            t: samples.samples[0].t,
            ..NavState::default()
        },
    };

    let incs = integrate_increments(&samples)?;
    let est = predict_trajectory(&x0, &incs, &g);
    write_states_csv(out.join("est.csv"), &est)?;
    if let Some(eta) = eta {
        let sigma0 = StateCov::zeros();
        let covs = if mode == "batched" {
            propagate_batched(&incs, &samples, &eta, &sigma0)?
        } else {
            propagate_iterative(&incs, &samples, &eta, &sigma0)?
        };
        let rows: Vec<(f64, StateCov)> = std::iter::once(sigma0)
            .chain(covs)
            .zip(&est)
            .map(|(c, s)| (s.t, c))
            .collect();
        write_cov_csv(out.join("cov.csv"), &rows)?;
    }
    println!("integrated {} samples into {}", samples.len(), out.display());
    Ok(())
}

struct TrainingRun {
    imu: ImuSequence,
    gt: Trajectory,
}

/// `imu.csv` + `gt.csv` in `dir` itself and in each direct subdirectory.
fn training_runs(dir: &Path) -> Result<Vec<TrainingRun>> {
    if !dir.is_dir() {
        return Err(usage(format!("training directory {} does not exist", dir.display())));
    }
    let mut dirs = vec![dir.to_path_buf()];
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    dirs.extend(subdirs);
    let mut runs = Vec::new();
    for d in dirs {
        let (imu, gt) = (d.join("imu.csv"), d.join("gt.csv"));
        if imu.is_file() && gt.is_file() {
            let imu = load_imu_csv(&imu).with_context(|| format!("reading {}", imu.display()))?;
            let mut gt = load_groundtruth_csv(&gt).with_context(|| format!("reading {}", gt.display()))?;
            gt.rebase(imu.origin_ns);
            runs.push(TrainingRun { imu, gt });
        }
    }
    if runs.is_empty() {
        return Err(usage(format!("no imu.csv/gt.csv pairs under {}", dir.display())));
    }
    Ok(runs)
}

#[derive(Serialize)]
struct CalibrationReport {
    bias: ConstantBias,
    noise_std: NoiseStd,
    initial_loss: f64,
    final_loss: f64,
    iterations: usize,
    rejected_steps: usize,
    segments: usize,
}

#[derive(Serialize)]
struct NoiseStd {
    gyro: Vec3,
    acc: Vec3,
}

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    let runs = training_runs(&required(a.train, "train")?)?;
    let length = a.segment_length.unwrap_or(1000);
    let stride = a.stride.unwrap_or(length);
    let g = gravity(a.gravity)?;
    let masks = windows(a.masks)?;
    let defaults = CalibConfig::default();
    let loss_weights = match a.loss_weights.as_deref() {
        None => defaults.loss_weights,
        Some(&[r, v, p]) => [r, v, p],
        Some(w) => return Err(usage(format!("loss_weights needs 3 values, got {}", w.len()))),
    };
    let noise = match a.noise_std.as_deref() {
        None => None,
        Some(&[gs, as_]) => Some(NoiseDiag::from_std(gs, as_)),
        Some(v) => return Err(usage(format!("noise_std needs GYRO_STD,ACC_STD, got {} values", v.len()))),
    };
    let config = CalibConfig {
        lr: a.lr.unwrap_or(defaults.lr),
        weight_decay: a.weight_decay.unwrap_or(defaults.weight_decay),
        epochs: a.epochs.unwrap_or(defaults.epochs),
        huber_delta: a.huber_delta.unwrap_or(defaults.huber_delta),
        loss_weights,
        epsilon: a.epsilon.unwrap_or(defaults.epsilon),
        noise,
        gravity: g,
    };
    let out = out_dir(a.out)?;

    let mut segs: Vec<Segment> = Vec::new();
    for run in &runs {
        segs.extend(segments(&run.imu, &run.gt.states, length, stride, &masks)?);
    }
    if segs.is_empty() {
        return Err(usage(format!("no complete {length}-sample segments in the training data")));
    }
    let fit = fit_constant_bias(&segs, &config)?;

    // residual noise averaged over runs
    let mut gyro_var = Vec3::zeros();
    let mut acc_var = Vec3::zeros();
    for run in &runs {
        let eta = residual_noise(&run.imu, &run.gt.states, &fit.bias, &g)?;
        gyro_var += eta.gyro / runs.len() as f64;
        acc_var += eta.acc / runs.len() as f64;
    }
    let noise = NoiseDiag::new(gyro_var, acc_var);

    let target = match &a.imu {
        Some(p) => load_imu_csv(p).with_context(|| format!("reading {}", p.display()))?,
        None => runs[0].imu.clone(),
    };
    let table = CorrectionTable::from_models(&target, &fit.bias.model(), &UncertaintyModel::ConstantDiag(noise))?;
    table.write(out.join("correction.csv"))?;
    let report = CalibrationReport {
        bias: fit.bias,
        noise_std: NoiseStd {
            gyro: gyro_var.map(f64::sqrt),
            acc: acc_var.map(f64::sqrt),
        },
        initial_loss: fit.initial_loss,
        final_loss: fit.final_loss,
        iterations: fit.iterations,
        rejected_steps: fit.rejected_steps,
        segments: segs.len(),
    };
    write_json(&out.join("calibration.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[derive(Serialize)]
struct FuseReport {
    #[serde(flatten)]
    solve: SolveReport,
    nodes: usize,
    imu_factors: usize,
    gps_factors: usize,
    dropped_fixes: usize,
}

pub fn fuse(a: FuseArgs) -> Result<()> {
    let imu_path = required(a.imu, "imu")?;
    let gps_path = required(a.gps, "gps")?;
    let imu = load_imu_csv(&imu_path).with_context(|| format!("reading {}", imu_path.display()))?;
    let gps_all = load_gps_csv(&gps_path).with_context(|| format!("reading {}", gps_path.display()))?;
    let g = gravity(a.gravity)?;
    let out = out_dir(a.out)?;

    let table = a.correction.as_deref().map(|p| aligned_table(p, &imu)).transpose()?;
    let correction = table.as_ref().map_or(CorrectionModel::Identity, CorrectionTable::correction);
    let uncertainty = uncertainty_model(a.uncertainty.as_deref(), table.as_ref(), &imu)?
        .ok_or_else(|| usage("fuse needs --uncertainty or --correction"))?;

    let t_start = imu.samples[0].t;
    let t_end = imu.end_time().expect("non-empty");
    let gps: Vec<_> = gps_all
        .iter()
        .copied()
        .filter(|f| f.t >= t_start - 1e-9 && f.t <= t_end + 1e-9)
        .collect();
    if gps.is_empty() {
        return Err(usage(format!(
            "no GPS fix inside the IMU time range [{t_start}, {t_end}]"
        )));
    }
    let dropped = gps_all.len() - gps.len();
    if dropped > 0 {
        eprintln!("dropped {dropped} GPS fixes outside the IMU time range");
    }

    let initial = match &a.gt {
        Some(path) => {
            let mut gt = load_trajectory(path).with_context(|| format!("reading {}", path.display()))?;
            gt.rebase(imu.origin_ns);
            interpolate(&gt.states, gps[0].t)
                .ok_or_else(|| usage("ground truth does not cover the first GPS epoch"))?
        }
        None => initial_state_from_gps(&apply_correction(&imu, &correction)?, &gps)?,
    };

    let graph = keyframe_graph(&imu, &correction, &uncertainty, &gps, &initial, &g)?;
    let defaults = SolveOptions::default();
    let options = SolveOptions {
        lambda0: a.lambda0.unwrap_or(defaults.lambda0),
        max_iters: a.max_iters.unwrap_or(defaults.max_iters),
        cost_tol: a.cost_tol.unwrap_or(defaults.cost_tol),
        step_tol: a.step_tol.unwrap_or(defaults.step_tol),
        reseed_covariance: a.reseed.unwrap_or(false),
        ..defaults
    };
    let (solved, report) = solve(&graph, &options)?;
    write_states_csv(out.join("fused.csv"), &solved.nodes)?;
    let converged = report.converged;
    let iterations = report.iterations;
    let summary = FuseReport {
        solve: report,
        nodes: solved.nodes.len(),
        imu_factors: solved.imu_factors.len(),
        gps_factors: solved.gps_factors.len(),
        dropped_fixes: dropped,
    };
    write_json(&out.join("solve_report.json"), &summary)?;
    if !converged {
        anyhow::bail!("pose graph did not converge in {iterations} iterations");
    }
    println!(
        "fused {} keyframes, cost {:.6e} -> {:.6e} in {} iterations",
        summary.nodes, summary.solve.initial_cost, summary.solve.final_cost, iterations
    );
    Ok(())
}

fn is_states_file(path: &Path) -> Result<bool> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("reading {}: {e}", path.display())))?;
    Ok(text.lines().next().unwrap_or("").trim_start().starts_with("t,"))
}

/// Estimate and ground truth on a shared time base: a states file is taken
/// to be in seconds since the first ground-truth timestamp.
fn load_pair(est: &Path, gt: &Path, masks: &[TimeWindow]) -> Result<(Vec<NavState>, Vec<NavState>)> {
    let gt = load_trajectory(gt).with_context(|| format!("reading {}", gt.display()))?;
    let mut est_traj = load_trajectory(est).with_context(|| format!("reading {}", est.display()))?;
    if is_states_file(est)? {
        est_traj.origin_ns = gt.origin_ns;
    } else {
        est_traj.rebase(gt.origin_ns);
    }
    let pairs = time_align(&est_traj.states, &gt.states, masks)?;
    if pairs.is_empty() {
        return Err(usage("estimate and ground truth do not overlap in time"));
    }
    Ok(pairs.into_iter().map(|p| (p.est, p.gt)).unzip())
}

#[derive(Serialize)]
struct MetricEntry {
    value: f64,
    #[serde(flatten)]
    stats: MetricStats,
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let metrics: Vec<Metric> = match &a.metrics {
        Some(names) => names.iter().map(|n| Metric::from_str(n)).collect::<preint::Result<_>>()?,
        None => Metric::ALL.to_vec(),
    };
    let interval = a.interval.unwrap_or(1.0);
    if !(interval > 0.0 && interval.is_finite()) {
        return Err(usage(format!("--interval must be positive, got {interval}")));
    }
    let masks = windows(a.masks)?;
    let (est, gt) = load_pair(&required(a.est, "est")?, &required(a.gt, "gt")?, &masks)?;
    let stats = evaluate_metrics(&est, &gt, interval, &metrics)?;
    let report: std::collections::BTreeMap<String, MetricEntry> = metrics
        .iter()
        .map(|m| {
            let s = stats[m.name()];
            (m.name().to_string(), MetricEntry { value: s.value(*m), stats: s })
        })
        .collect();
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(path) = &a.out {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, format!("{text}\n")).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{text}");
    Ok(())
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let frames = a.frames.unwrap_or_else(|| vec![1, 10, 100, 1000]);
    let groups: Vec<BenchGroup> = match &a.groups {
        Some(names) => names
            .iter()
            .map(|n| {
                BenchGroup::ALL
                    .into_iter()
                    .find(|g| g.name() == n.trim())
                    .ok_or_else(|| usage(format!("unknown bench group '{n}'")))
            })
            .collect::<Result<_>>()?,
        None => BenchGroup::ALL.to_vec(),
    };
    let rows = bench::run(&frames, &groups, a.repeat.unwrap_or(200), a.seed.unwrap_or(0))?;
    let table = bench::format_table(&rows);
    print!("{table}");
    if let Some(out) = a.out {
        let out = out_dir(Some(out))?;
        std::fs::write(out.join("bench.txt"), &table)?;
        std::fs::write(out.join("bench.csv"), bench::plot_csv(&rows))?;
    }
    Ok(())
}
