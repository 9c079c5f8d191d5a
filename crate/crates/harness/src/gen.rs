//! Seeded random-instance generation for multi-dimensional tests.

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rhpg_core::riccati::{solve_are, DEFAULT_ARE_MAX_ITER, DEFAULT_ARE_TOL};
use rhpg_core::{CostWeights, Error, LinearDynamics, NoiseModel, Result, SystemDocument};

fn gaussian(rows: usize, cols: usize, rng: &mut dyn RngCore) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| -> f64 { StandardNormal.sample(rng) })
}

/// A random plant with the open-loop spectral radius rescaled to
/// `target_rho`, identity weights and covariance, resampled until the
/// fixed-point solve certifies stabilizability. Gives up after 100
/// consecutive rejections.
pub fn generate_random_system(
    n: usize,
    m: usize,
    target_rho: f64,
    seed: u64,
) -> Result<SystemDocument> {
    if n == 0 || m == 0 {
        return Err(Error::config("dimensions must be at least 1"));
    }
    if !(target_rho >= 0.0) {
        return Err(Error::config("target spectral radius must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eye_n = DMatrix::identity(n, n);
    let weights = CostWeights::new(eye_n.clone(), DMatrix::identity(m, m), eye_n.clone())?;

    for _ in 0..100 {
        let mut a = gaussian(n, n, &mut rng);
        let rho = a
            .complex_eigenvalues()
            .iter()
            .fold(0.0_f64, |acc, ev| acc.max(ev.norm()));
        if target_rho == 0.0 || rho == 0.0 {
            a.fill(0.0);
        } else {
            a *= target_rho / rho;
        }
        let b = gaussian(n, m, &mut rng);
        let dynamics = LinearDynamics::new(a, b)?;
        if solve_are(&dynamics, &weights, DEFAULT_ARE_TOL, DEFAULT_ARE_MAX_ITER).is_ok() {
            return Ok(SystemDocument::from_parts(
                &dynamics,
                &weights,
                &eye_n,
                &NoiseModel::disabled(),
            ));
        }
    }
    Err(Error::numerical(format!(
        "no stabilizable instance in 100 draws for n={n}, m={m}, rho={target_rho}"
    )))
}
