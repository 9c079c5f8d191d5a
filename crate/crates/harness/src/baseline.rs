//! Flat (non-receding) zeroth-order PG on the truncated infinite-horizon
//! objective, used to demonstrate the initialization contrast: it needs a
//! stabilizing start, while the receding-horizon learner starts from zero.

use std::time::Instant;

use nalgebra::DVector;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rhpg_core::zeroth_order::{pg_inner_loop, InnerLoopConfig, OracleKind, SampleCost};
use rhpg_core::{
    certify, spectral_norm, AreSolution, Error, InitialStateDistribution, Policy, Result,
    SystemInstance,
};

use crate::config::BaselineConfig;
use crate::sweep::SweepRow;

/// Single-sample truncated infinite-horizon cost of a constant gain:
/// running cost over `horizon` steps, no terminal term, with a blow-up
/// guard so unstable rollouts report `+inf` instead of overflowing.
pub struct TruncatedInfiniteCost<'a> {
    pub instance: &'a SystemInstance,
    pub dist: &'a InitialStateDistribution,
    pub horizon: usize,
}

impl SampleCost for TruncatedInfiniteCost<'_> {
    type Scenario = DVector<f64>;

    fn draw(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        self.dist.sample(rng)
    }

    fn eval(&self, policy: &Policy, x0: &DVector<f64>) -> Result<f64> {
        let dynamics = &self.instance.dynamics;
        let weights = &self.instance.weights;
        let mut x = x0.clone();
        let mut cost = 0.0;
        for _ in 0..self.horizon {
            let u = policy.control(&x);
            cost += (weights.q() * &x).dot(&x) + (weights.r() * &u).dot(&u);
            if !cost.is_finite() || cost > 1e300 {
                return Ok(f64::INFINITY);
            }
            x = dynamics.a() * &x + dynamics.b() * &u;
        }
        Ok(cost)
    }

    fn gain_shape(&self) -> (usize, usize) {
        (self.instance.dynamics.input_dim(), self.instance.dynamics.state_dim())
    }
}

/// One baseline run from `k_init`. Divergence (guard trip or a non-finite
/// cost reaching the estimator) is the expected outcome for bad starts and
/// is reported as a row, not an error.
pub fn run_baseline_vanilla_pg(
    instance: &SystemInstance,
    are: &AreSolution,
    config: &BaselineConfig,
    k_init: &Policy,
    seed: u64,
) -> Result<SweepRow> {
    let start = Instant::now();
    let dist = InitialStateDistribution::gaussian(instance.sigma0.clone())?;
    let cost = TruncatedInfiniteCost { instance, dist: &dist, horizon: config.horizon };
    let inner = InnerLoopConfig::new(
        config.stepsize,
        config.radius,
        config.iterations,
        OracleKind::TwoPoint,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row = |policy_error: f64, calls: u64, stabilizing: bool, diverged: bool| SweepRow {
        epsilon: f64::NAN, // no accuracy target: the baseline runs a fixed budget
        seed,
        policy_error,
        oracle_calls: calls,
        stabilizing,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        diverged,
        horizon: config.horizon,
    };
    match pg_inner_loop(&cost, k_init, &inner, &mut rng) {
        Ok(trace) => {
            let err = spectral_norm(&(&trace.final_gain.gain - &are.gain.gain));
            let stabilizing = certify(&trace.final_gain, &instance.dynamics);
            Ok(row(err, trace.oracle_calls, stabilizing, false))
        }
        Err(Error::InnerDivergence { iteration, .. }) => {
            Ok(row(f64::INFINITY, 2 * iteration, false, true))
        }
        Err(Error::EstimationFailure(_)) => Ok(row(f64::INFINITY, 2, false, true)),
        Err(other) => Err(other),
    }
}
