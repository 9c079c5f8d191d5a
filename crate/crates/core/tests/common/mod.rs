//! Shared helpers for the integration suites.
#![allow(dead_code)] // each suite uses its own subset

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rhpg_core::riccati::{solve_are, AreSolution, DEFAULT_ARE_MAX_ITER, DEFAULT_ARE_TOL};
use rhpg_core::{CostWeights, LinearDynamics};

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut dyn RngCore) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| -> f64 { StandardNormal.sample(rng) })
}

/// A random stabilizable pair with identity weights, rejected until the
/// fixed-point solve succeeds. The open-loop radius is drawn in
/// `[0.3, 1.6]`, so roughly half the instances are open-loop unstable.
pub fn random_system(
    seed: u64,
    n: usize,
    m: usize,
) -> (LinearDynamics, CostWeights, AreSolution) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..100 {
        let mut a = gaussian_matrix(n, n, &mut rng);
        let rho = a
            .complex_eigenvalues()
            .iter()
            .fold(0.0_f64, |acc, ev| acc.max(ev.norm()));
        if rho > 0.0 {
            let target: f64 = rng.random_range(0.3..1.6);
            a *= target / rho;
        }
        let b = gaussian_matrix(n, m, &mut rng);
        let dynamics = LinearDynamics::new(a, b).unwrap();
        let weights = CostWeights::new(
            DMatrix::identity(n, n),
            DMatrix::identity(m, m),
            DMatrix::identity(n, n),
        )
        .unwrap();
        if let Ok(are) = solve_are(&dynamics, &weights, DEFAULT_ARE_TOL, DEFAULT_ARE_MAX_ITER) {
            return (dynamics, weights, are);
        }
    }
    panic!("no stabilizable instance found for seed {seed}");
}

/// Replace the terminal weight, keeping Q and R.
pub fn with_terminal(weights: &CostWeights, qn: DMatrix<f64>) -> CostWeights {
    CostWeights::new(weights.q().clone(), weights.r().clone(), qn).unwrap()
}
