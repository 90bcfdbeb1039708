use preint::covariance::NoiseDiag;
use preint::dataset::{segments, Segment};
use preint::losses::{fit_constant_bias, mean_loss, residual_noise, CalibConfig, ConstantBias};
use preint::sim::{gen_trajectory, sample_imu, ImuBias, ImuNoise, Motion};
use preint::{Error, NavState, Vec3, GRAVITY};

fn training_set(bias: ImuBias, noise: ImuNoise, seconds: f64, seed: u64) -> Vec<Segment> {
    let traj: Vec<NavState> = gen_trajectory(&Motion::named("figure8").unwrap(), seconds, 200.0).unwrap();
    let imu = sample_imu(&traj, &GRAVITY, &noise, &bias, seed).unwrap();
    segments(&imu, &traj, 200, 200, &[]).unwrap()
}

#[test]
fn unbiased_noiseless_data_fits_zero() {
    let segs = training_set(ImuBias::default(), ImuNoise::default(), 10.0, 1);
    let config = CalibConfig {
        epochs: 200,
        ..CalibConfig::default()
    };
    let report = fit_constant_bias(&segs, &config).unwrap();
    assert!(report.bias.to_vec().norm() < 1e-4, "{:?}", report.bias);
    assert!(report.final_loss <= report.initial_loss);
}

#[test]
fn loss_trace_never_increases() {
    let bias = ImuBias {
        gyro: Vec3::new(0.01, -0.02, 0.0),
        acc: Vec3::new(0.0, 0.05, 0.02),
    };
    let segs = training_set(bias, ImuNoise::isotropic(1e-3, 1e-2), 10.0, 2);
    let config = CalibConfig {
        epochs: 300,
        ..CalibConfig::default()
    };
    let report = fit_constant_bias(&segs, &config).unwrap();
    assert!(report.loss_trace.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(report.loss_trace[0], report.initial_loss);
    assert_eq!(*report.loss_trace.last().unwrap(), report.final_loss);
    assert!(report.final_loss < report.initial_loss);
    assert!(report.iterations <= 300);
}

#[test]
fn covariance_term_needs_noise_and_epsilon() {
    let segs = training_set(ImuBias::default(), ImuNoise::isotropic(1e-3, 1e-2), 5.0, 3);
    let plain = CalibConfig::default();
    let with_cov = CalibConfig {
        noise: Some(NoiseDiag::from_std(1e-3, 1e-2)),
        ..CalibConfig::default()
    };
    let zero = ConstantBias::default();
    let a = mean_loss(&segs, &zero, &plain).unwrap();
    let b = mean_loss(&segs, &zero, &with_cov).unwrap();
    assert!(a.is_finite() && b.is_finite());
    assert_ne!(a, b);
    let no_eps = CalibConfig {
        epsilon: 0.0,
        ..with_cov
    };
    assert_eq!(mean_loss(&segs, &zero, &no_eps).unwrap(), a);
}

#[test]
fn overflowing_learning_rate_diverges() {
    let segs = training_set(ImuBias::default(), ImuNoise::isotropic(1e-3, 1e-2), 5.0, 4);
    let config = CalibConfig {
        lr: f64::MAX,
        epochs: 10,
        ..CalibConfig::default()
    };
    assert!(matches!(fit_constant_bias(&segs, &config), Err(Error::Diverged { .. })));
}

#[test]
fn bad_configuration_is_rejected() {
    let segs = training_set(ImuBias::default(), ImuNoise::default(), 2.0, 5);
    let config = CalibConfig {
        lr: 0.0,
        ..CalibConfig::default()
    };
    assert!(matches!(fit_constant_bias(&segs, &config), Err(Error::InvalidArgument(_))));
    assert!(matches!(fit_constant_bias(&[], &CalibConfig::default()), Err(Error::InvalidArgument(_))));
}

#[test]
fn residual_noise_recovers_injected_variance() {
    let traj = gen_trajectory(&Motion::named("circle").unwrap(), 50.0, 200.0).unwrap();
    let bias = ImuBias {
        gyro: Vec3::new(0.01, 0.0, -0.02),
        acc: Vec3::new(0.1, -0.05, 0.0),
    };
    let imu = sample_imu(&traj, &GRAVITY, &ImuNoise::isotropic(2e-3, 3e-2), &bias, 6).unwrap();
    let known = ConstantBias {
        gyro: bias.gyro,
        acc: bias.acc,
    };
    let eta = residual_noise(&imu, &traj, &known, &GRAVITY).unwrap();
    for k in 0..3 {
        assert!((eta.gyro[k] / 4e-6 - 1.0).abs() < 0.05, "{:?}", eta);
        assert!((eta.acc[k] / 9e-4 - 1.0).abs() < 0.05, "{:?}", eta);
    }
}
