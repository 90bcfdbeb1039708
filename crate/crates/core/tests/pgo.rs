use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use preint::correction::{CorrectionModel, UncertaintyModel};
use preint::covariance::{NoiseDiag, StateCov};
use preint::pgo::{
    gps_residual, imu_residual, keyframe_graph, retract, solve, GpsFix, PoseGraph, SolveOptions,
};
use preint::preintegration::{integrate_window, predict_state, Increments};
use preint::sim::{gen_trajectory, sample_imu, simulate_gps, ImuBias, ImuNoise, Motion};
use preint::{Error, Mat3, NavState, Rotation, Vec3, Vec9, GRAVITY};

fn scenario(duration: f64, noise: ImuNoise, gps_sigma: f64, seed: u64) -> (Vec<NavState>, PoseGraph) {
    let traj = gen_trajectory(&Motion::named("figure8").unwrap(), duration, 200.0).unwrap();
    let imu = sample_imu(&traj, &GRAVITY, &noise, &ImuBias::default(), seed).unwrap();
    let gps = simulate_gps(&traj, 1.0, gps_sigma, seed + 1).unwrap();
    let eta = NoiseDiag::from_std(noise.gyro_std.x.max(1e-4), noise.acc_std.x.max(1e-3));
    let graph = keyframe_graph(
        &imu,
        &CorrectionModel::Identity,
        &UncertaintyModel::ConstantDiag(eta),
        &gps,
        &traj[0],
        &GRAVITY,
    )
    .unwrap();
    (traj, graph)
}

#[test]
fn residual_vanishes_at_prediction() {
    let xi = NavState::new(Rotation::exp(&Vec3::new(0.3, -0.2, 1.0)), Vec3::new(1.0, 2.0, 0.5), Vec3::new(4.0, -1.0, 2.0), 0.0);
    let inc = Increments {
        dr: Rotation::exp(&Vec3::new(0.1, 0.2, -0.4)),
        dv: Vec3::new(0.5, -0.3, 0.2),
        dp: Vec3::new(0.2, 0.1, -0.1),
        dt: 0.7,
    };
    let xj = predict_state(&xi, &inc, &GRAVITY);
    assert!(imu_residual(&xi, &xj, &inc, &GRAVITY).amax() < 1e-10);

    let moved = NavState {
        p: xj.p + Vec3::new(0.1, 0.0, 0.0),
        ..xj
    };
    let r = imu_residual(&xi, &moved, &inc, &GRAVITY);
    assert!((r.fixed_rows::<3>(6) - Vec3::new(-0.1, 0.0, 0.0)).amax() < 1e-12);
    assert!(r.fixed_rows::<6>(0).amax() < 1e-10);
}

#[test]
fn gps_residual_examples() {
    let x = NavState {
        p: Vec3::new(1.0, 2.0, 3.0),
        ..NavState::default()
    };
    assert_eq!(gps_residual(&x, &x.p), Vec3::zeros());
    assert_eq!(gps_residual(&x, &Vec3::new(1.0, 2.0, 4.0)), Vec3::new(0.0, 0.0, 1.0));

    // whitened cost equals the Mahalanobis distance
    let cov = Mat3::new(0.04, 0.01, 0.0, 0.01, 0.09, 0.02, 0.0, 0.02, 0.01);
    let p_hat = Vec3::new(1.3, 1.8, 3.1);
    let r = gps_residual(&x, &p_hat);
    let mahalanobis = r.dot(&(cov.try_inverse().unwrap() * r));
    let mut g = PoseGraph::new(vec![x], GRAVITY);
    g.gps_factors.push(preint::pgo::GpsFactor { node: 0, p: p_hat, cov });
    g.anchored.push(0);
    let (_, report) = solve(&g, &SolveOptions::default()).unwrap();
    assert!((report.initial_cost - mahalanobis).abs() < 1e-9 * mahalanobis);
}

#[test]
fn keyframe_graph_counts_and_composition() {
    let traj = gen_trajectory(&Motion::named("circle").unwrap(), 10.0, 200.0).unwrap();
    let imu = sample_imu(&traj, &GRAVITY, &ImuNoise::isotropic(1e-3, 1e-2), &ImuBias::default(), 3).unwrap();
    let gps = simulate_gps(&traj, 1.0, 0.1, 4).unwrap();
    let unc = UncertaintyModel::ConstantDiag(NoiseDiag::from_std(1e-3, 1e-2));
    let g = keyframe_graph(&imu, &CorrectionModel::Identity, &unc, &gps, &traj[0], &GRAVITY).unwrap();
    assert_eq!(g.nodes.len(), 11);
    assert_eq!(g.imu_factors.len(), 10);
    assert_eq!(g.gps_factors.len(), 11);
    g.validate().unwrap();

    let composed = g
        .imu_factors
        .iter()
        .fold(Increments::identity(), |acc, f| acc.compose(&f.inc));
    let whole = integrate_window(&imu).unwrap();
    assert!(composed.dr.distance(&whole.dr) < 1e-10);
    assert!((composed.dv - whole.dv).amax() < 1e-10);
    assert!((composed.dp - whole.dp).amax() < 1e-9);
    assert!((composed.dt - whole.dt).abs() < 1e-9);
    for f in &g.imu_factors {
        f.cov.validate().unwrap();
        assert!(f.cov.trace() > 0.0);
    }

    assert!(matches!(
        keyframe_graph(&imu, &CorrectionModel::Identity, &unc, &[], &traj[0], &GRAVITY),
        Err(Error::InvalidArgument(_))
    ));
    let late = [GpsFix {
        t: 11.0,
        p: Vec3::zeros(),
        sigma: 0.1,
    }];
    assert!(keyframe_graph(&imu, &CorrectionModel::Identity, &unc, &late, &traj[0], &GRAVITY).is_err());
}

#[test]
fn exact_graph_converges_immediately() {
    let (_, mut g) = scenario(10.0, ImuNoise::default(), 0.0, 5);
    // fixes that agree with the dead-reckoned nodes
    for f in &mut g.gps_factors {
        f.p = g.nodes[f.node].p;
    }
    let (solved, report) = solve(&g, &SolveOptions::default()).unwrap();
    assert!(report.converged);
    assert!(report.iterations <= 2);
    assert!(report.final_cost < 1e-16);
    assert_eq!(solved.nodes.len(), g.nodes.len());
}

#[test]
fn accepted_steps_never_increase_cost() {
    let (traj, g) = scenario(20.0, ImuNoise::isotropic(5e-3, 5e-2), 0.1, 6);
    let (solved, report) = solve(&g, &SolveOptions::default()).unwrap();
    assert!(report.converged);
    assert!(report.final_cost <= report.initial_cost);
    let mut prev = report.initial_cost;
    for (c, ok) in report.cost_trace.iter().zip(&report.accepted) {
        assert!(*c <= prev);
        if *ok {
            prev = *c;
        }
    }
    assert_eq!(report.damping.len(), report.iterations);
    // the fused track stays close to the truth
    for n in &solved.nodes {
        let truth = preint::metrics::interpolate(&traj, n.t).unwrap();
        assert!((n.p - truth.p).norm() < 0.5);
    }
}

#[test]
fn numeric_and_analytic_jacobians_agree_on_the_solution() {
    let (_, g) = scenario(10.0, ImuNoise::isotropic(5e-3, 5e-2), 0.1, 7);
    let (a, ra) = solve(&g, &SolveOptions::default()).unwrap();
    let numeric = SolveOptions {
        numeric_jacobians: true,
        ..SolveOptions::default()
    };
    let (b, rb) = solve(&g, &numeric).unwrap();
    assert!((ra.final_cost - rb.final_cost).abs() < 1e-6 * ra.final_cost.max(1.0));
    for (x, y) in a.nodes.iter().zip(&b.nodes) {
        assert!((x.p - y.p).norm() < 1e-5);
    }
}

#[test]
fn perturbed_initializations_reach_the_same_cost() {
    let (_, g) = scenario(15.0, ImuNoise::isotropic(5e-3, 5e-2), 0.1, 8);
    let opts = SolveOptions {
        cost_tol: 1e-14,
        ..SolveOptions::default()
    };
    let (_, base) = solve(&g, &opts).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..3 {
        let mut p = g.clone();
        for n in &mut p.nodes {
            let mut d = Vec9::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            d *= rng.gen_range(0.0..0.1) / d.norm();
            *n = retract(n, &d);
        }
        let (_, r) = solve(&p, &opts).unwrap();
        assert!((r.final_cost - base.final_cost).abs() < 1e-6, "{} vs {}", r.final_cost, base.final_cost);
    }
}

#[test]
fn inflated_imu_covariance_follows_gps() {
    let (_, mut g) = scenario(10.0, ImuNoise::isotropic(5e-3, 5e-2), 0.1, 10);
    for f in &mut g.imu_factors {
        f.cov = StateCov(f.cov.0 * 1e6);
    }
    let (solved, _) = solve(&g, &SolveOptions::default()).unwrap();
    for f in &g.gps_factors {
        assert!((solved.nodes[f.node].p - f.p).norm() < 2.0 * 0.1);
    }
}

#[test]
fn reseeding_runs_a_second_solve() {
    let (_, g) = scenario(10.0, ImuNoise::isotropic(5e-3, 5e-2), 0.1, 11);
    let (_, plain) = solve(&g, &SolveOptions::default()).unwrap();
    let opts = SolveOptions {
        reseed_covariance: true,
        ..SolveOptions::default()
    };
    let (solved, r) = solve(&g, &opts).unwrap();
    assert!(r.converged);
    assert!(r.iterations >= plain.iterations);
    assert_eq!(solved.imu_factors, g.imu_factors);
}

#[test]
fn invalid_graphs_are_rejected() {
    let (_, g) = scenario(5.0, ImuNoise::isotropic(5e-3, 5e-2), 0.1, 12);
    let mut no_gauge = g.clone();
    no_gauge.gps_factors.clear();
    assert!(matches!(solve(&no_gauge, &SolveOptions::default()), Err(Error::InvalidArgument(_))));
    let mut gap = g.clone();
    gap.imu_factors.remove(1);
    assert!(solve(&gap, &SolveOptions::default()).is_err());
    let mut bad_cov = g.clone();
    bad_cov.imu_factors[0].cov = StateCov(-preint::Mat9::identity());
    assert!(solve(&bad_cov, &SolveOptions::default()).is_err());
    let mut bad_index = g;
    bad_index.gps_factors[0].node = 99;
    assert!(solve(&bad_index, &SolveOptions::default()).is_err());
}

#[test]
fn anchored_graph_without_gps() {
    let (_, mut g) = scenario(5.0, ImuNoise::default(), 0.0, 13);
    g.gps_factors.clear();
    g.anchored.push(0);
    let truth = g.nodes.clone();
    for n in g.nodes.iter_mut().skip(1) {
        n.p += Vec3::new(0.05, -0.02, 0.01);
    }
    let (solved, report) = solve(&g, &SolveOptions::default()).unwrap();
    assert!(report.converged);
    assert_eq!(solved.nodes[0], truth[0]);
    for (a, b) in solved.nodes.iter().zip(&truth) {
        assert!((a.p - b.p).norm() < 1e-6);
    }
}
