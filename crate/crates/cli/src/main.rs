mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::{Deserialize, Serialize};

/// Bad flags, unreadable or malformed inputs. Exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// IMU preintegration, calibration, GPS fusion and trajectory evaluation.
#[derive(Parser)]
#[command(name = "preint", version)]
struct Cli {
    /// TOML file with one table per subcommand; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a trajectory with IMU and GPS streams.
    Simulate(SimulateArgs),
    /// Dead-reckon an IMU stream and propagate its covariance.
    Integrate(IntegrateArgs),
    /// Fit constant sensor biases on training data.
    Calibrate(CalibrateArgs),
    /// Fuse IMU and GPS in a keyframe pose graph.
    Fuse(FuseArgs),
    /// Compare an estimate against ground truth.
    Evaluate(EvaluateArgs),
    /// Time the batched and frame-by-frame integrators.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateArgs {
    /// Motion profile [default: circle]
    #[arg(long, value_parser = ["rest", "line", "circle", "figure8"])]
    pub traj: Option<String>,
    /// Seconds [default: 60]
    #[arg(long)]
    pub duration: Option<f64>,
    /// IMU rate in Hz [default: 200]
    #[arg(long)]
    pub rate: Option<f64>,
    /// Gyroscope bias x,y,z in rad/s [default: 0,0,0]
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub gyro_bias: Option<Vec<f64>>,
    /// Accelerometer bias x,y,z in m/s² [default: 0,0,0]
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub acc_bias: Option<Vec<f64>>,
    /// Per-sample gyroscope noise std in rad/s [default: 0]
    #[arg(long)]
    pub gyro_std: Option<f64>,
    /// Per-sample accelerometer noise std in m/s² [default: 0]
    #[arg(long)]
    pub acc_std: Option<f64>,
    /// GPS rate in Hz [default: 1]
    #[arg(long)]
    pub gps_rate: Option<f64>,
    /// GPS noise std in m [default: 0.1]
    #[arg(long)]
    pub gps_sigma: Option<f64>,
    /// Gravity magnitude in m/s² [default: 9.81]
    #[arg(long)]
    pub gravity: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for imu.csv, gt.csv and gps.csv
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegrateArgs {
    #[arg(long)]
    pub imu: Option<PathBuf>,
    /// Ground truth supplying the initial state and the output time base
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Correction file with one row per IMU sample
    #[arg(long)]
    pub correction: Option<PathBuf>,
    /// Noise per sample: a correction file, fixed:GYRO_STD,ACC_STD or
    /// density:GYRO,ACC in unit/√Hz
    #[arg(long)]
    pub uncertainty: Option<String>,
    /// Gravity magnitude in m/s² [default: 9.81]
    #[arg(long)]
    pub gravity: Option<f64>,
    /// Covariance propagation [default: batched]
    #[arg(long, value_parser = ["batched", "iterative", "off"])]
    pub cov: Option<String>,
    /// Output directory for est.csv and cov.csv
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateArgs {
    /// Directory holding imu.csv and gt.csv, directly or in subdirectories
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// IMU stream the correction file is written for [default: first training stream]
    #[arg(long)]
    pub imu: Option<PathBuf>,
    /// Samples per training segment [default: 1000]
    #[arg(long)]
    pub segment_length: Option<usize>,
    /// Samples between segment starts [default: segment length]
    #[arg(long)]
    pub stride: Option<usize>,
    /// [default: 3000]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: 0.0001]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// [default: 0.1]
    #[arg(long)]
    pub huber_delta: Option<f64>,
    /// Weights of the rotation, velocity and position losses [default: 1,1,1]
    #[arg(long, value_delimiter = ',')]
    pub loss_weights: Option<Vec<f64>>,
    /// Per-sample GYRO_STD,ACC_STD; adds the covariance term to the objective
    #[arg(long, value_delimiter = ',')]
    pub noise_std: Option<Vec<f64>>,
    /// Weight of the covariance term [default: 0.001]
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Excluded time window T0,T1 in seconds since the IMU start; repeatable
    #[arg(long = "mask", value_parser = parse_window)]
    pub masks: Option<Vec<[f64; 2]>>,
    /// Gravity magnitude in m/s² [default: 9.81]
    #[arg(long)]
    pub gravity: Option<f64>,
    /// Output directory for correction.csv and calibration.json
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuseArgs {
    #[arg(long)]
    pub imu: Option<PathBuf>,
    #[arg(long)]
    pub gps: Option<PathBuf>,
    /// Correction file with one row per IMU sample
    #[arg(long)]
    pub correction: Option<PathBuf>,
    /// Noise per sample: a correction file, fixed:GYRO_STD,ACC_STD or
    /// density:GYRO,ACC in unit/√Hz
    #[arg(long)]
    pub uncertainty: Option<String>,
    /// Ground truth for the initial state [default: from GPS and gravity]
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Gravity magnitude in m/s² [default: 9.81]
    #[arg(long)]
    pub gravity: Option<f64>,
    /// [default: 100]
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Initial damping [default: 0.0001]
    #[arg(long)]
    pub lambda0: Option<f64>,
    /// Relative cost decrease that ends the solve [default: 1e-9]
    #[arg(long)]
    pub cost_tol: Option<f64>,
    /// Step norm that ends the solve [default: 1e-10]
    #[arg(long)]
    pub step_tol: Option<f64>,
    /// Re-solve with factor covariances seeded from node marginals
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub reseed: Option<bool>,
    /// Output directory for fused.csv and solve_report.json
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub est: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Relative-error interval in seconds [default: 1]
    #[arg(long)]
    pub interval: Option<f64>,
    /// Comma-separated subset of roe,rpe,rrmse,prmse,ate [default: all]
    #[arg(long, value_delimiter = ',')]
    pub metrics: Option<Vec<String>>,
    /// Excluded time window T0,T1 in seconds since the first ground-truth
    /// timestamp; repeatable
    #[arg(long = "mask", value_parser = parse_window)]
    pub masks: Option<Vec<[f64; 2]>>,
    /// Also write the JSON here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchArgs {
    /// Sequence lengths [default: 1,10,100,1000]
    #[arg(long, value_delimiter = ',')]
    pub frames: Option<Vec<usize>>,
    /// [default: 200]
    #[arg(long)]
    pub repeat: Option<usize>,
    /// Subset of iterative,iterative+cov,batched,batched+cov [default: all]
    #[arg(long, value_delimiter = ',')]
    pub groups: Option<Vec<String>>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for bench.txt and bench.csv
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_window(s: &str) -> Result<[f64; 2], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    match v[..] {
        [a, b] if a.is_finite() && b.is_finite() && a < b => Ok([a, b]),
        _ => Err(format!("expected T0,T1 with T0 < T1, got '{s}'")),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let table = cli.config.as_deref().map(config::load).transpose()?;
    let table = table.as_ref();
    match cli.command {
        Command::Simulate(a) => commands::simulate(config::resolve(&a, table, "simulate")?),
        Command::Integrate(a) => commands::integrate(config::resolve(&a, table, "integrate")?),
        Command::Calibrate(a) => commands::calibrate(config::resolve(&a, table, "calibrate")?),
        Command::Fuse(a) => commands::fuse(config::resolve(&a, table, "fuse")?),
        Command::Evaluate(a) => commands::evaluate(config::resolve(&a, table, "evaluate")?),
        Command::Bench(a) => commands::bench(config::resolve(&a, table, "bench")?),
    }
}

fn exit_status(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<preint::Error>() {
            return match e {
                preint::Error::InvalidArgument(_)
                | preint::Error::Parse { .. }
                | preint::Error::Io(_)
                | preint::Error::Csv(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let _ = e.print();
            eprintln!("\n{}", Cli::command().render_usage());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
    }
}
