//! Monte-Carlo validation of the zeroth-order estimators against the
//! model-based analytic gradient, plus the schedule-level convergence
//! guarantee on a scalar stage subproblem.

mod common;

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{gaussian_matrix, random_system};
use rhpg_core::riccati::{cost_to_go, expected_subproblem_cost, gain_from_value, subproblem_gradient};
use rhpg_core::zeroth_order::{
    one_point_estimate, pg_inner_loop, two_point_estimate, InnerLoopConfig, OracleKind, SampleCost,
};
use rhpg_core::{
    subproblem_cost, CostWeights, InitialStateDistribution, LinearDynamics, Policy, PolicySequence,
    RadiusRule, RhpgSchedule, ScheduleConstants, WarmStart,
};

struct StageSampler<'a> {
    dynamics: &'a LinearDynamics,
    weights: &'a CostWeights,
    dist: &'a InitialStateDistribution,
    tail: &'a PolicySequence,
}

impl SampleCost for StageSampler<'_> {
    type Scenario = DVector<f64>;
    fn draw(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        self.dist.sample(rng)
    }
    fn eval(&self, policy: &Policy, x: &DVector<f64>) -> rhpg_core::Result<f64> {
        subproblem_cost(self.dynamics, self.weights, self.tail, policy, x)
    }
    fn gain_shape(&self) -> (usize, usize) {
        (self.dynamics.input_dim(), self.dynamics.state_dim())
    }
}

fn random_tail(
    dynamics: &LinearDynamics,
    h: usize,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> PolicySequence {
    let gains = (h + 1..horizon)
        .map(|_| {
            Policy::new(gaussian_matrix(dynamics.input_dim(), dynamics.state_dim(), rng) * 0.3)
                .unwrap()
        })
        .collect();
    PolicySequence::new(h + 1, horizon, gains).unwrap()
}

/// The analytic gradient of the expected stage cost matches central finite
/// differences of the trace formula to high relative accuracy.
#[test]
fn analytic_gradient_matches_finite_differences() {
    let (dynamics, weights, _) = random_system(42, 2, 2);
    let sigma0 = DMatrix::identity(2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for h in [0usize, 2] {
        let horizon = 5;
        let tail = random_tail(&dynamics, h, horizon, &mut rng);
        let k = Policy::new(gaussian_matrix(2, 2, &mut rng)).unwrap();
        let grad = subproblem_gradient(&dynamics, &weights, &tail, &k, &sigma0).unwrap();

        let step = 1e-5;
        let mut fd = DMatrix::zeros(2, 2);
        for i in 0..2 {
            for j in 0..2 {
                let mut plus = k.clone();
                plus.gain[(i, j)] += step;
                let mut minus = k.clone();
                minus.gain[(i, j)] -= step;
                let jp = expected_subproblem_cost(&dynamics, &weights, &tail, &plus, &sigma0).unwrap();
                let jm = expected_subproblem_cost(&dynamics, &weights, &tail, &minus, &sigma0).unwrap();
                fd[(i, j)] = (jp - jm) / (2.0 * step);
            }
        }
        let rel = (&grad - &fd).norm() / grad.norm().max(1.0);
        assert!(rel <= 1e-6, "stage {h}: relative gradient gap {rel:.3e}");
    }
}

/// The mean of many two-point estimates at a fixed gain matches the
/// analytic gradient `2 ((R + B^T P B) K - B^T P A) Sigma0` within three
/// Monte-Carlo standard errors, entrywise.
#[test]
fn two_point_mean_matches_analytic_gradient() {
    let (dynamics, weights, _) = random_system(7, 2, 2);
    let dist = InitialStateDistribution::gaussian(DMatrix::identity(2, 2)).unwrap();
    let sigma0 = dist.covariance();
    let mut point_rng = ChaCha8Rng::seed_from_u64(2024);
    let horizon = 6;

    for point in 0..5 {
        let h = point % horizon.min(4);
        let tail = random_tail(&dynamics, h, horizon, &mut point_rng);
        let k = Policy::new(gaussian_matrix(2, 2, &mut point_rng) * 0.5).unwrap();
        let analytic = subproblem_gradient(&dynamics, &weights, &tail, &k, &sigma0).unwrap();

        let sampler = StageSampler { dynamics: &dynamics, weights: &weights, dist: &dist, tail: &tail };
        let draws = 100_000usize;
        let mut mean = DMatrix::zeros(2, 2);
        let mut sq = DMatrix::zeros(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9_000 + point as u64);
        for _ in 0..draws {
            let (g, calls) = two_point_estimate(&sampler, &k, 0.05, &mut rng).unwrap();
            assert_eq!(calls, 2);
            mean += &g;
            sq += g.map(|v| v * v);
        }
        mean /= draws as f64;
        sq /= draws as f64;

        for i in 0..2 {
            for j in 0..2 {
                let var = (sq[(i, j)] - mean[(i, j)] * mean[(i, j)]).max(0.0);
                let se = (var / draws as f64).sqrt();
                let gap = (mean[(i, j)] - analytic[(i, j)]).abs();
                assert!(
                    gap <= 3.0 * se + 1e-12,
                    "point {point} entry ({i},{j}): |{:.5} - {:.5}| = {gap:.3e} > 3 SE = {:.3e}",
                    mean[(i, j)],
                    analytic[(i, j)],
                    3.0 * se
                );
            }
        }
    }
}

/// At a matched gain and radius, the one-point estimator carries no less
/// variance than the two-point estimator.
#[test]
fn one_point_variance_dominates_two_point() {
    let (dynamics, weights, _) = random_system(11, 2, 1);
    let dist = InitialStateDistribution::gaussian(DMatrix::identity(2, 2)).unwrap();
    let mut setup_rng = ChaCha8Rng::seed_from_u64(3);
    let tail = random_tail(&dynamics, 1, 4, &mut setup_rng);
    let sampler = StageSampler { dynamics: &dynamics, weights: &weights, dist: &dist, tail: &tail };
    let k = Policy::new(gaussian_matrix(1, 2, &mut setup_rng) * 0.4).unwrap();

    let draws = 10_000usize;
    let radius = 0.1;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sample_var = |one_point: bool, rng: &mut ChaCha8Rng| -> f64 {
        let mut sum = DMatrix::zeros(1, 2);
        let mut sumsq = 0.0;
        for _ in 0..draws {
            let (g, _) = if one_point {
                one_point_estimate(&sampler, &k, radius, rng).unwrap()
            } else {
                two_point_estimate(&sampler, &k, radius, rng).unwrap()
            };
            sumsq += g.norm_squared();
            sum += g;
        }
        let mean = sum / draws as f64;
        sumsq / draws as f64 - mean.norm_squared()
    };
    let var_two = sample_var(false, &mut rng);
    let var_one = sample_var(true, &mut rng);
    assert!(
        var_one >= var_two,
        "one-point variance {var_one:.3e} fell below two-point {var_two:.3e}"
    );
}

/// On the scalar benchmark stage subproblem, the default epsilon-scaled
/// schedule reaches the stage optimum to within epsilon in at least 90 of
/// 100 seeded runs.
#[test]
fn schedule_reaches_stage_tolerance_with_high_probability() {
    let dynamics = LinearDynamics::scalar(5.0, 0.33).unwrap();
    let weights = CostWeights::scalar(1.0, 1.0, 3.0).unwrap();
    let dist = InitialStateDistribution::gaussian(DMatrix::identity(1, 1)).unwrap();
    let tail = PolicySequence::empty(1); // the last stage: value-to-go is Q_N
    let target = gain_from_value(&cost_to_go(&dynamics, &weights, &tail).unwrap(), &dynamics, &weights)
        .unwrap();

    let epsilon = 0.1;
    let schedule = RhpgSchedule::uniform(
        epsilon,
        0.1,
        1,
        OracleKind::TwoPoint,
        RadiusRule::Sqrt,
        WarmStart::Zero,
        &ScheduleConstants::default(),
    )
    .unwrap();
    let config: InnerLoopConfig = schedule.inner[0];

    let sampler = StageSampler { dynamics: &dynamics, weights: &weights, dist: &dist, tail: &tail };
    let mut hits = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(31_000 + seed);
        let trace = pg_inner_loop(&sampler, &Policy::scalar(0.0), &config, &mut rng).unwrap();
        let err = (trace.final_gain.gain[(0, 0)] - target.gain[(0, 0)]).abs();
        assert_eq!(trace.oracle_calls, 2 * trace.iterations);
        if err <= epsilon {
            hits += 1;
        }
    }
    assert!(hits >= 90, "only {hits}/100 runs reached the stage tolerance");
}

/// Sanity anchor for the sampler used above: its expectation matches the
/// trace formula on a random gain.
#[test]
fn sampled_stage_cost_matches_expectation() {
    let (dynamics, weights, _) = random_system(21, 2, 1);
    let dist = InitialStateDistribution::gaussian(DMatrix::identity(2, 2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tail = random_tail(&dynamics, 0, 4, &mut rng);
    let k = Policy::new(gaussian_matrix(1, 2, &mut rng) * 0.3).unwrap();
    let expected =
        expected_subproblem_cost(&dynamics, &weights, &tail, &k, &dist.covariance()).unwrap();

    let draws = 200_000usize;
    let mut acc = 0.0;
    let mut acc_sq = 0.0;
    for _ in 0..draws {
        let x = dist.sample(&mut rng);
        let j = subproblem_cost(&dynamics, &weights, &tail, &k, &x).unwrap();
        acc += j;
        acc_sq += j * j;
    }
    let mean = acc / draws as f64;
    let se = ((acc_sq / draws as f64 - mean * mean).max(0.0) / draws as f64).sqrt();
    assert!(
        (mean - expected).abs() <= 4.0 * se,
        "sampled mean {mean:.4} vs expectation {expected:.4} (SE {se:.2e})"
    );
}

/// Scalar subproblems make the two-point oracle exact for every radius, so
/// the smoothing radius only matters through the schedule bookkeeping.
#[test]
fn scalar_two_point_is_radius_free() {
    let dynamics = LinearDynamics::scalar(5.0, 0.33).unwrap();
    let weights = CostWeights::scalar(1.0, 1.0, 3.0).unwrap();
    let dist = InitialStateDistribution::deterministic(DVector::from_element(1, 1.0)).unwrap();
    let tail = PolicySequence::empty(1);
    let sampler = StageSampler { dynamics: &dynamics, weights: &weights, dist: &dist, tail: &tail };
    let k = Policy::scalar(1.2);
    let mut reference = None;
    for radius in [1e-3, 0.1, 0.7] {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (g, _) = two_point_estimate(&sampler, &k, radius, &mut rng).unwrap();
        let value = g[(0, 0)];
        match reference {
            None => reference = Some(value),
            Some(r) => assert!((value - r).abs() <= 1e-9 * r.abs()),
        }
    }
}
