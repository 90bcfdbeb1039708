//! Wall-clock timing of the batched and frame-by-frame integration paths.

use std::fmt::Write;
use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::covariance::{propagate_batched, propagate_iterative, NoiseDiag, StateCov};
use crate::error::{invalid, Result};
use crate::preintegration::{integrate_increments, integrate_increments_sequential, ImuSample, ImuSequence};
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum BenchGroup {
    Iterative,
    IterativeCov,
    Batched,
    BatchedCov,
}

impl BenchGroup {
    pub const ALL: [BenchGroup; 4] = [
        BenchGroup::Iterative,
        BenchGroup::IterativeCov,
        BenchGroup::Batched,
        BenchGroup::BatchedCov,
    ];

    pub fn is_batched(&self) -> bool {
        matches!(self, BenchGroup::Batched | BenchGroup::BatchedCov)
    }

    pub fn name(&self) -> &'static str {
        match self {
            BenchGroup::Iterative => "iterative",
            BenchGroup::IterativeCov => "iterative+cov",
            BenchGroup::Batched => "batched",
            BenchGroup::BatchedCov => "batched+cov",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub frames: usize,
    pub group: BenchGroup,
    pub repeat: usize,
    pub mean_s: f64,
    /// Sample standard deviation; absent for a single repeat.
    pub std_s: Option<f64>,
}

/// Random 200 Hz stream with per-frame noise variances.
pub fn random_sequence(n: usize, seed: u64) -> (ImuSequence, Vec<NoiseDiag>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = |s: f64| Vec3::new(rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s));
    let samples = (0..n)
        .map(|k| ImuSample::new(k as f64 * 0.005, v(1.0), v(10.0)))
        .collect();
    let eta = (0..n)
        .map(|_| NoiseDiag::new(v(1e-4).abs(), v(1e-2).abs()))
        .collect();
    (ImuSequence { origin_ns: 0, samples }, eta)
}

/// Runs one group once.
pub fn run_group(group: BenchGroup, seq: &ImuSequence, eta: &[NoiseDiag]) -> Result<()> {
    let sigma0 = StateCov::zeros();
    match group {
        BenchGroup::Iterative => {
            black_box(integrate_increments_sequential(seq)?);
        }
        BenchGroup::IterativeCov => {
            let inc = integrate_increments_sequential(seq)?;
            black_box(propagate_iterative(&inc, seq, eta, &sigma0)?);
        }
        BenchGroup::Batched => {
            black_box(integrate_increments(seq)?);
        }
        BenchGroup::BatchedCov => {
            let inc = integrate_increments(seq)?;
            black_box(propagate_batched(&inc, seq, eta, &sigma0)?);
        }
    }
    Ok(())
}

pub fn time_group(group: BenchGroup, frames: usize, repeat: usize, seed: u64) -> Result<BenchRow> {
    if frames == 0 || repeat == 0 {
        return Err(invalid("frames and repeat must be positive"));
    }
    let (seq, eta) = random_sequence(frames, seed);
    let measure = || -> Result<Vec<f64>> {
        run_group(group, &seq, &eta)?;
        (0..repeat)
            .map(|_| {
                let start = Instant::now();
                run_group(group, &seq, &eta).map(|_| start.elapsed().as_secs_f64())
            })
            .collect()
    };
    // the frame-by-frame baseline runs on a single thread
    let times = if group.is_batched() {
        measure()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| invalid(format!("thread pool: {e}")))?
            .install(measure)?
    };
    let mean = times.iter().sum::<f64>() / repeat as f64;
    let std_s = (repeat > 1).then(|| {
        (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (repeat - 1) as f64).sqrt()
    });
    Ok(BenchRow {
        frames,
        group,
        repeat,
        mean_s: mean,
        std_s,
    })
}

/// Every group at every length.
pub fn run(frames: &[usize], groups: &[BenchGroup], repeat: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &n in frames {
        for &g in groups {
            rows.push(time_group(g, n, repeat, seed)?);
        }
    }
    Ok(rows)
}

pub fn format_table(rows: &[BenchRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "threads: batched {}, iterative 1",
        rayon::current_num_threads()
    );
    let _ = writeln!(out, "{:>8}  {:<14}  {:>14}  {:>12}", "frames", "group", "mean_s", "std_s");
    for r in rows {
        let std = r.std_s.map_or("-".to_string(), |s| format!("{s:.3e}"));
        let _ = writeln!(out, "{:>8}  {:<14}  {:>14.3e}  {:>12}", r.frames, r.group.name(), r.mean_s, std);
    }
    out
}

/// `length,group,mean_s,std_s` rows for plotting.
pub fn plot_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("length,group,mean_s,std_s\n");
    for r in rows {
        let std = r.std_s.map_or(String::new(), |s| s.to_string());
        let _ = writeln!(out, "{},{},{},{}", r.frames, r.group.name(), r.mean_s, std);
    }
    out
}
