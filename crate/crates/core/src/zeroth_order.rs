//! Derivative-free gradient estimation and the inner PG loop: sphere
//! sampling, two-point and one-point oracles, and the plain update
//! `K <- K - eta * g`.

use nalgebra::DMatrix;
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::system::Policy;

/// Default cap on the gain norm before the inner loop aborts.
pub const DEFAULT_DIVERGENCE_GUARD: f64 = 1e6;

/// A direction on the unit Frobenius sphere in gain space.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationDirection {
    pub direction: DMatrix<f64>,
}

impl PerturbationDirection {
    /// Wrap a matrix, checking `|U|_F = 1` to within 1e-12.
    pub fn new(direction: DMatrix<f64>) -> Result<Self> {
        let norm = direction.norm();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!(
                "perturbation direction has Frobenius norm {norm}, expected 1"
            )));
        }
        Ok(Self { direction })
    }
}

/// Uniform draw from the unit Frobenius sphere of `m x n` matrices:
/// independent standard normals scaled to unit norm. An (improbable)
/// underflowing draw is rejected and retried.
pub fn sample_sphere(m: usize, n: usize, rng: &mut dyn RngCore) -> PerturbationDirection {
    assert!(m >= 1 && n >= 1, "degenerate gain shape {m}x{n}");
    loop {
        let g = DMatrix::from_fn(m, n, |_, _| -> f64 { StandardNormal.sample(rng) });
        let norm = g.norm();
        if norm > 1e-150 {
            return PerturbationDirection { direction: g / norm };
        }
    }
}

/// Which estimator the inner loop uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKind {
    TwoPoint,
    OnePoint,
}

/// Inner-loop settings for one subproblem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerLoopConfig {
    pub stepsize: f64,
    pub radius: f64,
    pub iterations: u64,
    pub oracle: OracleKind,
    pub divergence_guard: f64,
}

impl InnerLoopConfig {
    pub fn new(stepsize: f64, radius: f64, iterations: u64, oracle: OracleKind) -> Self {
        Self {
            stepsize,
            radius,
            iterations,
            oracle,
            divergence_guard: DEFAULT_DIVERGENCE_GUARD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stepsize > 0.0) {
            return Err(Error::config("stepsize must be positive"));
        }
        if !(self.radius > 0.0) {
            return Err(Error::config("smoothing radius must be positive"));
        }
        if self.iterations == 0 {
            return Err(Error::config("iteration budget must be at least 1"));
        }
        if !(self.divergence_guard > 0.0) {
            return Err(Error::config("divergence guard must be positive"));
        }
        Ok(())
    }
}

/// One recorded inner-loop iteration, for the JSON-lines trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: u64,
    /// Gain entries, row-major.
    pub gain: Vec<f64>,
    pub oracle_calls: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gain_error: Option<f64>,
}

/// Outcome of one inner loop.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerLoopTrace {
    pub final_gain: Policy,
    pub iterations: u64,
    pub oracle_calls: u64,
    pub stopped_early: bool,
    /// Error at the accepted iterate when a probe was attached.
    pub final_error: Option<f64>,
    /// Per-iteration records when tracing was requested.
    pub records: Option<Vec<IterationRecord>>,
}

/// Single-sample subproblem cost. The estimator draws the per-rollout
/// randomness once (`Scenario`) and may evaluate several gains against the
/// same draw, which is what keeps the two-point difference tight.
pub trait SampleCost {
    type Scenario;

    fn draw(&self, rng: &mut dyn RngCore) -> Self::Scenario;
    fn eval(&self, policy: &Policy, scenario: &Self::Scenario) -> Result<f64>;
    /// Gain shape `(m, n)`.
    fn gain_shape(&self) -> (usize, usize);
}

/// Two-point estimate at `k`: draw one direction `U` and one scenario,
/// evaluate `k + rU` and `k - rU` on the same scenario, and return
/// `(mn / 2r) (J+ - J-) U`. Exactly two cost evaluations.
pub fn two_point_estimate<C: SampleCost>(
    cost: &C,
    k: &Policy,
    radius: f64,
    rng: &mut dyn RngCore,
) -> Result<(DMatrix<f64>, u64)> {
    if !(radius > 0.0) {
        return Err(Error::config("smoothing radius must be positive"));
    }
    let (m, n) = cost.gain_shape();
    let u = sample_sphere(m, n, rng);
    let scenario = cost.draw(rng);
    let plus = Policy::new(&k.gain + &u.direction * radius)?;
    let minus = Policy::new(&k.gain - &u.direction * radius)?;
    let j_plus = cost.eval(&plus, &scenario)?;
    let j_minus = cost.eval(&minus, &scenario)?;
    if !j_plus.is_finite() || !j_minus.is_finite() {
        return Err(Error::EstimationFailure(format!(
            "two-point oracle saw non-finite costs ({j_plus}, {j_minus}) at radius {radius}"
        )));
    }
    let scale = (m * n) as f64 / (2.0 * radius) * (j_plus - j_minus);
    Ok((u.direction * scale, 2))
}

/// One-point estimate at `k`: `(mn / r) J(k + rU) U` on a fresh scenario.
/// Exactly one cost evaluation; noisier than the two-point oracle but
/// usable when paired rollouts are impossible.
pub fn one_point_estimate<C: SampleCost>(
    cost: &C,
    k: &Policy,
    radius: f64,
    rng: &mut dyn RngCore,
) -> Result<(DMatrix<f64>, u64)> {
    if !(radius > 0.0) {
        return Err(Error::config("smoothing radius must be positive"));
    }
    let (m, n) = cost.gain_shape();
    let u = sample_sphere(m, n, rng);
    let scenario = cost.draw(rng);
    let perturbed = Policy::new(&k.gain + &u.direction * radius)?;
    let j = cost.eval(&perturbed, &scenario)?;
    if !j.is_finite() {
        return Err(Error::EstimationFailure(format!(
            "one-point oracle saw a non-finite cost at radius {radius}"
        )));
    }
    let scale = (m * n) as f64 / radius * j;
    Ok((u.direction * scale, 1))
}

/// Anything that can hand the inner loop a gradient direction. The second
/// tuple element is the number of cost-oracle calls consumed.
pub trait GradientSource {
    fn estimate(&self, k: &Policy, rng: &mut dyn RngCore) -> Result<(DMatrix<f64>, u64)>;
}

/// The zeroth-order estimators behind the [`GradientSource`] interface.
pub struct ZerothOrderGradient<'a, C: SampleCost> {
    pub cost: &'a C,
    pub radius: f64,
    pub oracle: OracleKind,
}

impl<C: SampleCost> GradientSource for ZerothOrderGradient<'_, C> {
    fn estimate(&self, k: &Policy, rng: &mut dyn RngCore) -> Result<(DMatrix<f64>, u64)> {
        match self.oracle {
            OracleKind::TwoPoint => two_point_estimate(self.cost, k, self.radius, rng),
            OracleKind::OnePoint => one_point_estimate(self.cost, k, self.radius, rng),
        }
    }
}

/// Deterministic gradient substitute for tests and diagnostics: wraps an
/// exact gradient function and consumes no oracle calls.
pub struct ExactGradient<F: Fn(&Policy) -> Result<DMatrix<f64>>>(pub F);

impl<F: Fn(&Policy) -> Result<DMatrix<f64>>> GradientSource for ExactGradient<F> {
    fn estimate(&self, k: &Policy, _rng: &mut dyn RngCore) -> Result<(DMatrix<f64>, u64)> {
        Ok(((self.0)(k)?, 0))
    }
}

/// Oracle-assisted stopping rule: halt once `probe(K) <= tolerance`.
/// The probe is model-based machinery (it knows the subproblem optimum),
/// so it lives outside the learner's data path and is strictly opt-in.
pub struct StopRule<'a> {
    pub probe: &'a dyn Fn(&Policy) -> f64,
    pub tolerance: f64,
}

/// Run the PG update `K <- K - eta * g` for up to `config.iterations`
/// steps from `k_init`, never projecting or clipping. Counts oracle calls
/// exactly; aborts when the gain norm passes the divergence guard.
pub fn pg_inner_loop_with<G: GradientSource>(
    source: &G,
    k_init: &Policy,
    config: &InnerLoopConfig,
    rng: &mut dyn RngCore,
    stop: Option<&StopRule>,
    record: bool,
) -> Result<InnerLoopTrace> {
    let mut k = k_init.clone();
    let mut calls = 0u64;
    let mut records = record.then(Vec::new);
    let mut final_error = stop.map(|s| (s.probe)(&k));
    let mut iterations = 0u64;
    let mut stopped_early = false;

    if let (Some(err), Some(s)) = (final_error, stop) {
        stopped_early = err <= s.tolerance;
    }

    while iterations < config.iterations && !stopped_early {
        let (gradient, used) = source.estimate(&k, rng)?;
        calls += used;
        k = Policy { gain: &k.gain - gradient * config.stepsize };
        iterations += 1;

        let norm = k.gain.norm();
        if !norm.is_finite() || norm > config.divergence_guard {
            return Err(Error::InnerDivergence {
                stage: None,
                iteration: iterations,
                eta: config.stepsize,
                radius: config.radius,
                gain_norm: norm,
            });
        }
        if let Some(s) = stop {
            let err = (s.probe)(&k);
            final_error = Some(err);
            if err <= s.tolerance {
                stopped_early = true;
            }
        }
        if let Some(recs) = records.as_mut() {
            recs.push(IterationRecord {
                iteration: iterations,
                gain: k.gain.transpose().iter().cloned().collect(), // row-major
                oracle_calls: calls,
                gain_error: final_error,
            });
        }
    }

    Ok(InnerLoopTrace {
        final_gain: k,
        iterations,
        oracle_calls: calls,
        stopped_early,
        final_error,
        records,
    })
}

/// The spec'd entry point: build the configured zeroth-order estimator over
/// `cost` and run the loop.
pub fn pg_inner_loop<C: SampleCost>(
    cost: &C,
    k_init: &Policy,
    config: &InnerLoopConfig,
    rng: &mut dyn RngCore,
) -> Result<InnerLoopTrace> {
    let source = ZerothOrderGradient { cost, radius: config.radius, oracle: config.oracle };
    pg_inner_loop_with(&source, k_init, config, rng, None, false)
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Deterministic scalar cost `J(K) = (K - c)^2 + offset`.
    struct ShiftedQuadratic {
        center: f64,
        offset: f64,
    }

    impl SampleCost for ShiftedQuadratic {
        type Scenario = ();
        fn draw(&self, _rng: &mut dyn RngCore) -> () {}
        fn eval(&self, policy: &Policy, _sc: &()) -> Result<f64> {
            let k = policy.gain[(0, 0)];
            Ok((k - self.center).powi(2) + self.offset)
        }
        fn gain_shape(&self) -> (usize, usize) {
            (1, 1)
        }
    }

    #[test]
    fn sphere_samples_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let u = sample_sphere(2, 3, &mut rng);
            assert!((u.direction.norm() - 1.0).abs() < 1e-12);
            assert!(PerturbationDirection::new(u.direction).is_ok());
        }
    }

    #[test]
    fn sphere_scalar_is_a_fair_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut plus = 0usize;
        let draws = 10_000;
        for _ in 0..draws {
            let u = sample_sphere(1, 1, &mut rng).direction[(0, 0)];
            assert!((u.abs() - 1.0).abs() < 1e-12);
            if u > 0.0 {
                plus += 1;
            }
        }
        let freq = plus as f64 / draws as f64;
        assert!((freq - 0.5).abs() < 0.02, "sign frequency {freq}");
    }

    #[test]
    fn sphere_mean_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut acc = DMatrix::zeros(2, 3);
        let draws = 100_000;
        for _ in 0..draws {
            acc += sample_sphere(2, 3, &mut rng).direction;
        }
        acc /= draws as f64;
        assert!(acc.iter().all(|v| v.abs() < 0.02), "mean {acc}");
    }

    #[test]
    fn two_point_constant_cost_gives_zero() {
        struct Constant;
        impl SampleCost for Constant {
            type Scenario = ();
            fn draw(&self, _rng: &mut dyn RngCore) -> () {}
            fn eval(&self, _policy: &Policy, _sc: &()) -> Result<f64> {
                Ok(42.0)
            }
            fn gain_shape(&self) -> (usize, usize) {
                (2, 2)
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (g, calls) = two_point_estimate(&Constant, &Policy::zeros(2, 2), 0.1, &mut rng).unwrap();
        assert_eq!(calls, 2);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_point_exact_for_scalar_quadratic() {
        let cost = ShiftedQuadratic { center: 2.0, offset: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for radius in [0.01, 0.3, 1.7] {
            let (g, _) = two_point_estimate(&cost, &Policy::scalar(0.0), radius, &mut rng).unwrap();
            assert_relative_eq!(g[(0, 0)], -4.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn two_point_ignores_constant_shifts() {
        let base = ShiftedQuadratic { center: 1.3, offset: 0.0 };
        let shifted = ShiftedQuadratic { center: 1.3, offset: 5e6 };
        let k = Policy::scalar(0.7);
        let mut rng_a = ChaCha8Rng::seed_from_u64(5);
        let mut rng_b = ChaCha8Rng::seed_from_u64(5);
        let (ga, _) = two_point_estimate(&base, &k, 0.2, &mut rng_a).unwrap();
        let (gb, _) = two_point_estimate(&shifted, &k, 0.2, &mut rng_b).unwrap();
        assert_relative_eq!(ga[(0, 0)], gb[(0, 0)], epsilon = 1e-6);
    }

    #[test]
    fn one_point_zero_cost_gives_zero() {
        struct Zero;
        impl SampleCost for Zero {
            type Scenario = ();
            fn draw(&self, _rng: &mut dyn RngCore) -> () {}
            fn eval(&self, _policy: &Policy, _sc: &()) -> Result<f64> {
                Ok(0.0)
            }
            fn gain_shape(&self) -> (usize, usize) {
                (1, 2)
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (g, calls) = one_point_estimate(&Zero, &Policy::zeros(1, 2), 0.5, &mut rng).unwrap();
        assert_eq!(calls, 1);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn one_point_mean_matches_smoothed_gradient() {
        // J(K) = K^2 at K = 1: the smoothed gradient equals 2.
        let cost = ShiftedQuadratic { center: 0.0, offset: 0.0 };
        let k = Policy::scalar(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let (g, _) = one_point_estimate(&cost, &k, 0.1, &mut rng).unwrap();
            acc += g[(0, 0)];
        }
        acc /= draws as f64;
        assert!((acc - 2.0).abs() < 0.05, "one-point mean {acc}");
    }

    #[test]
    fn two_point_propagates_non_finite_costs() {
        struct Blowup;
        impl SampleCost for Blowup {
            type Scenario = ();
            fn draw(&self, _rng: &mut dyn RngCore) -> () {}
            fn eval(&self, _policy: &Policy, _sc: &()) -> Result<f64> {
                Ok(f64::INFINITY)
            }
            fn gain_shape(&self) -> (usize, usize) {
                (1, 1)
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let err = two_point_estimate(&Blowup, &Policy::scalar(0.0), 0.1, &mut rng).unwrap_err();
        assert!(matches!(err, Error::EstimationFailure(_)));
    }

    #[test]
    fn inner_loop_zero_stepsize_counts_calls() {
        let cost = ShiftedQuadratic { center: 2.0, offset: 0.0 };
        let config = InnerLoopConfig {
            stepsize: 0.0,
            radius: 0.1,
            iterations: 25,
            oracle: OracleKind::TwoPoint,
            divergence_guard: DEFAULT_DIVERGENCE_GUARD,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let trace = pg_inner_loop(&cost, &Policy::scalar(0.5), &config, &mut rng).unwrap();
        assert_eq!(trace.final_gain.gain[(0, 0)], 0.5);
        assert_eq!(trace.oracle_calls, 50);
        assert_eq!(trace.iterations, 25);
    }

    #[test]
    fn inner_loop_one_point_call_accounting() {
        let cost = ShiftedQuadratic { center: 0.0, offset: 0.0 };
        let config = InnerLoopConfig {
            stepsize: 1e-3,
            radius: 0.1,
            iterations: 40,
            oracle: OracleKind::OnePoint,
            divergence_guard: DEFAULT_DIVERGENCE_GUARD,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let trace = pg_inner_loop(&cost, &Policy::scalar(0.2), &config, &mut rng).unwrap();
        assert_eq!(trace.oracle_calls, 40);
    }

    #[test]
    fn inner_loop_exact_gradient_linear_rate() {
        // J(K) = (K - 2)^2 has curvature alpha = 2; the exact-gradient
        // update contracts the error by (1 - eta * alpha) per step.
        let eta = 0.1;
        let source = ExactGradient(|p: &Policy| Ok(dmatrix![2.0 * (p.gain[(0, 0)] - 2.0)]));
        let config = InnerLoopConfig::new(eta, 0.1, 30, OracleKind::TwoPoint);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trace = pg_inner_loop_with(&source, &Policy::scalar(0.0), &config, &mut rng, None, false)
            .unwrap();
        let expected = 2.0 + (0.0 - 2.0) * (1.0 - eta * 2.0f64).powi(30);
        assert_relative_eq!(trace.final_gain.gain[(0, 0)], expected, epsilon = 1e-12);
    }

    #[test]
    fn inner_loop_divergence_guard_trips() {
        // Gradient ascent on a quadratic: guaranteed blow-up.
        let source = ExactGradient(|p: &Policy| Ok(dmatrix![-10.0 * (p.gain[(0, 0)] + 3.0)]));
        let config = InnerLoopConfig::new(1.0, 0.1, 10_000, OracleKind::TwoPoint);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let err =
            pg_inner_loop_with(&source, &Policy::scalar(1.0), &config, &mut rng, None, false)
                .unwrap_err();
        assert!(matches!(err, Error::InnerDivergence { .. }), "{err}");
    }

    #[test]
    fn inner_loop_trace_is_seed_deterministic() {
        // Scenario-scaled quadratic so the iterate path depends on the draws.
        struct NoisyQuadratic;
        impl SampleCost for NoisyQuadratic {
            type Scenario = f64;
            fn draw(&self, rng: &mut dyn RngCore) -> f64 {
                let z: f64 = StandardNormal.sample(rng);
                z * z
            }
            fn eval(&self, policy: &Policy, sc: &f64) -> Result<f64> {
                Ok(sc * (policy.gain[(0, 0)] - 1.0).powi(2))
            }
            fn gain_shape(&self) -> (usize, usize) {
                (1, 1)
            }
        }
        let config = InnerLoopConfig::new(0.05, 0.2, 40, OracleKind::TwoPoint);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            pg_inner_loop(&NoisyQuadratic, &Policy::scalar(-1.0), &config, &mut rng).unwrap()
        };
        assert_eq!(run(77), run(77));
        assert_ne!(run(77).final_gain, run(78).final_gain);
    }

    #[test]
    fn stop_rule_halts_and_reports_error() {
        let source = ExactGradient(|p: &Policy| Ok(dmatrix![2.0 * (p.gain[(0, 0)] - 2.0)]));
        let config = InnerLoopConfig::new(0.05, 0.1, 100_000, OracleKind::TwoPoint);
        let probe = |p: &Policy| (p.gain[(0, 0)] - 2.0).abs();
        let stop = StopRule { probe: &probe, tolerance: 1e-3 };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let trace =
            pg_inner_loop_with(&source, &Policy::scalar(0.0), &config, &mut rng, Some(&stop), false)
                .unwrap();
        assert!(trace.stopped_early);
        assert!(trace.final_error.unwrap() <= 1e-3);
        assert!(trace.iterations < 100_000);
    }
}
