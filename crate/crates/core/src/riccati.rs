//! Model-based ground truth: Riccati difference/algebraic equation solvers,
//! optimal gains, Lyapunov policy evaluation, horizon selection, and
//! stability certificates.
//!
//! Nothing in this module is visible to the learner's data path; it exists
//! for planning, testing, and certification.

use nalgebra::DMatrix;
use serde_json::json;

use crate::error::{Error, Result};
use crate::linalg;
use crate::system::{CostWeights, LinearDynamics, Policy, PolicySequence};

/// Default relative tolerance for the fixed-point solve.
pub const DEFAULT_ARE_TOL: f64 = 1e-10;
/// Default iteration cap for the fixed-point solve.
pub const DEFAULT_ARE_MAX_ITER: usize = 100_000;

/// Backward value recursion output: `P_0..P_N` and the optimal gains.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    /// `values[t]` is `P_t`; `values[N] = Q_N`.
    pub values: Vec<DMatrix<f64>>,
    /// Optimal gains over `0..N`.
    pub gains: PolicySequence,
    pub horizon: usize,
}

impl RiccatiSolution {
    pub fn value_at(&self, t: usize) -> Option<&DMatrix<f64>> {
        self.values.get(t)
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "horizon": self.horizon,
            "P": self.values.iter().map(linalg::matrix_to_rows).collect::<Vec<_>>(),
            "K": self.gains.iter().map(|(_, p)| linalg::matrix_to_rows(&p.gain)).collect::<Vec<_>>(),
        })
    }
}

/// Stabilizing fixed point of the value recursion, with the diagnostics the
/// horizon bound and the stability certificate need.
#[derive(Debug, Clone)]
pub struct AreSolution {
    pub value: DMatrix<f64>,
    pub gain: Policy,
    /// `|P - step(P)|` at the accepted iterate (spectral norm).
    pub residual: f64,
    pub iterations: usize,
    /// `|A - B K*|` in the `P*`-induced norm; provably below one.
    pub closed_loop_norm: f64,
    /// `|A - B K*|` in the spectral norm.
    pub closed_loop_spectral: f64,
    /// `|B|` in the spectral norm.
    pub input_norm: f64,
    /// Condition number of `P*`.
    pub kappa: f64,
}

impl AreSolution {
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "P": linalg::matrix_to_rows(&self.value),
            "K": linalg::matrix_to_rows(&self.gain.gain),
            "residual": self.residual,
            "iterations": self.iterations,
            "closed_loop_norm": self.closed_loop_norm,
            "closed_loop_spectral": self.closed_loop_spectral,
            "input_norm": self.input_norm,
            "kappa": self.kappa,
        })
    }
}

/// One backward step of the value recursion:
/// `Q + A^T P A - A^T P B (R + B^T P B)^{-1} B^T P A`, symmetrized.
pub fn rde_step(
    p_next: &DMatrix<f64>,
    dynamics: &LinearDynamics,
    weights: &CostWeights,
) -> Result<DMatrix<f64>> {
    let n = dynamics.state_dim();
    if p_next.nrows() != n || p_next.ncols() != n {
        return Err(Error::config(format!(
            "P must be {n}x{n}, got {}x{}",
            p_next.nrows(),
            p_next.ncols()
        )));
    }
    let a = dynamics.a();
    let b = dynamics.b();
    let bt_p = b.transpose() * p_next;
    let gram = weights.r() + &bt_p * b; // R pd keeps this invertible for psd P
    let bt_p_a = &bt_p * a;
    let solved = gram
        .lu()
        .solve(&bt_p_a)
        .ok_or_else(|| Error::numerical("R + B^T P B is singular"))?;
    let next = weights.q() + a.transpose() * p_next * a - bt_p_a.transpose() * solved;
    Ok(linalg::symmetrize(&next))
}

/// Optimal gain for a one-step value: `(R + B^T P B)^{-1} B^T P A`.
pub fn gain_from_value(
    p_next: &DMatrix<f64>,
    dynamics: &LinearDynamics,
    weights: &CostWeights,
) -> Result<Policy> {
    let bt_p = dynamics.b().transpose() * p_next;
    let gram = weights.r() + &bt_p * dynamics.b();
    let gain = gram
        .lu()
        .solve(&(&bt_p * dynamics.a()))
        .ok_or_else(|| Error::numerical("R + B^T P B is singular"))?;
    Policy::new(gain)
}

/// Backward recursion over an `N`-step horizon starting from `P_N = Q_N`.
pub fn solve_finite_horizon(
    dynamics: &LinearDynamics,
    weights: &CostWeights,
    horizon: usize,
) -> Result<RiccatiSolution> {
    if horizon == 0 {
        return Err(Error::config("horizon must be at least 1"));
    }
    let mut values = vec![DMatrix::zeros(0, 0); horizon + 1];
    let mut gains = vec![Policy::zeros(0, 0); horizon];
    values[horizon] = weights.qn().clone();
    for t in (0..horizon).rev() {
        gains[t] = gain_from_value(&values[t + 1], dynamics, weights)?;
        values[t] = rde_step(&values[t + 1], dynamics, weights)?;
    }
    Ok(RiccatiSolution {
        values,
        gains: PolicySequence::new(0, horizon, gains)?,
        horizon,
    })
}

/// Fixed-point iteration of the value recursion from `P = Q`, stopping at
/// `|P_{k+1} - P_k| <= tol * |P_k|`. Non-convergence within `max_iter`
/// (or a blow-up) is reported as non-stabilizable/ill-conditioned.
pub fn solve_are(
    dynamics: &LinearDynamics,
    weights: &CostWeights,
    tol: f64,
    max_iter: usize,
) -> Result<AreSolution> {
    solve_are_from(dynamics, weights, weights.q().clone(), tol, max_iter)
}

/// [`solve_are`] with an explicit initial iterate; the accepted fixed point
/// does not depend on it (uniqueness of the stabilizing solution), which
/// the test suite checks.
pub fn solve_are_from(
    dynamics: &LinearDynamics,
    weights: &CostWeights,
    initial: DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<AreSolution> {
    if tol <= 0.0 {
        return Err(Error::config("tolerance must be positive"));
    }
    let mut p = initial;
    for k in 0..max_iter {
        let next = rde_step(&p, dynamics, weights)?;
        let gap = linalg::spectral_norm(&(&next - &p));
        let scale = linalg::spectral_norm(&p);
        if !gap.is_finite() || scale > 1e18 {
            return Err(Error::numerical(
                "value iteration blew up: the pair (A, B) looks non-stabilizable",
            ));
        }
        if gap <= tol * scale {
            return finish_are(next, k + 1, gap, dynamics, weights);
        }
        p = next;
    }
    let residual = linalg::spectral_norm(&(&rde_step(&p, dynamics, weights)? - &p));
    Err(Error::numerical(format!(
        "value iteration did not converge in {max_iter} iterations: \
         not stabilizable or ill-conditioned (last residual {residual:.3e})"
    )))
}

fn finish_are(
    p: DMatrix<f64>,
    iterations: usize,
    residual: f64,
    dynamics: &LinearDynamics,
    weights: &CostWeights,
) -> Result<AreSolution> {
    if !linalg::is_positive_definite(&p) {
        return Err(Error::numerical("fixed point is not positive definite"));
    }
    let gain = gain_from_value(&p, dynamics, weights)?;
    let closed = dynamics.closed_loop(&gain);
    let rho = linalg::spectral_radius(&closed)?;
    if rho >= 1.0 {
        return Err(Error::numerical(format!(
            "fixed point is not stabilizing (rho = {rho:.6})"
        )));
    }
    let closed_loop_norm = linalg::induced_norm(&closed, &p)?;
    if closed_loop_norm >= 1.0 {
        return Err(Error::numerical(format!(
            "closed-loop induced norm {closed_loop_norm:.6} >= 1 contradicts the fixed point"
        )));
    }
    let kappa = linalg::condition_number_pd(&p)?;
    Ok(AreSolution {
        closed_loop_spectral: linalg::spectral_norm(&closed),
        input_norm: linalg::spectral_norm(dynamics.b()),
        value: p,
        gain,
        residual,
        iterations,
        closed_loop_norm,
        kappa,
    })
}

/// Horizon sufficient for the backward recursion's gain at time zero to be
/// within `epsilon` of the infinite-horizon gain:
///
/// `ceil( log(2 |Q_N - P*|_* k(P*) |A-BK*| |B| / (eps lmin(R))) / (2 log(1/|A-BK*|_*)) + 1 )`
///
/// floored at one. The terminal deviation and the contraction factor use
/// the `P*`-induced norm; `|A-BK*|` and `|B|` use the spectral norm. The
/// factor of two inside the logarithm is the margin the end-to-end error
/// split requires; without it the bound comes up short when `Q_N` sits
/// below the fixed point.
pub fn horizon_bound(are: &AreSolution, weights: &CostWeights, epsilon: f64) -> Result<usize> {
    if epsilon <= 0.0 {
        return Err(Error::config("epsilon must be positive"));
    }
    if are.closed_loop_norm >= 1.0 {
        return Err(Error::numerical(
            "closed-loop induced norm >= 1: inconsistent fixed-point solution",
        ));
    }
    let deviation = linalg::induced_norm(&(weights.qn() - &are.value), &are.value)?;
    if deviation <= f64::EPSILON * linalg::spectral_norm(&are.value) {
        return Ok(1); // terminal weight already at the fixed point
    }
    let r_min = linalg::min_eigenvalue_sym(weights.r());
    let arg =
        2.0 * deviation * are.kappa * are.closed_loop_spectral * are.input_norm / (epsilon * r_min);
    if arg <= 1.0 {
        return Ok(1);
    }
    let n0 = 0.5 * arg.ln() / (1.0 / are.closed_loop_norm).ln() + 1.0;
    Ok(n0.ceil().max(1.0) as usize)
}

/// Expected infinite-horizon cost of a fixed policy: `trace(Sigma_0 P_K)`
/// where `P_K` solves `P = (A-BK)^T P (A-BK) + Q + K^T R K`, or `+inf`
/// when the closed loop is not (comfortably) stable.
pub fn lyapunov_cost(
    policy: &Policy,
    dynamics: &LinearDynamics,
    weights: &CostWeights,
    sigma0: &DMatrix<f64>,
) -> Result<f64> {
    let closed = dynamics.closed_loop(policy);
    let rho = linalg::spectral_radius(&closed)?;
    if rho >= 1.0 - 1e-12 {
        return Ok(f64::INFINITY);
    }
    let stage = weights.q() + policy.gain.transpose() * weights.r() * &policy.gain;
    let p = solve_lyapunov(&closed, &stage)?;
    Ok((sigma0 * &p).trace())
}

/// Solve `P = M^T P M + S` for stable `M` and symmetric `S` by doubling,
/// accepting only at relative residual `1e-12`.
pub fn solve_lyapunov(m: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = linalg::symmetrize(s);
    let mut p = s.clone();
    let mut factor = m.clone();
    for _ in 0..256 {
        let update = factor.transpose() * &p * &factor;
        let gap = linalg::spectral_norm(&update);
        p = linalg::symmetrize(&(&p + update));
        factor = &factor * &factor;
        if !linalg::all_finite(&p) {
            return Err(Error::numerical(
                "Lyapunov iteration produced non-finite values",
            ));
        }
        if gap <= 1e-13 * linalg::spectral_norm(&p).max(f64::MIN_POSITIVE) {
            let residual = linalg::spectral_norm(&(&p - &(m.transpose() * &p * m) - &s));
            let scale = linalg::spectral_norm(&p).max(1.0);
            if residual > 1e-12 * scale {
                return Err(Error::numerical(format!(
                    "Lyapunov residual {residual:.3e} too large for scale {scale:.3e}"
                )));
            }
            return Ok(p);
        }
    }
    Err(Error::numerical(
        "Lyapunov iteration did not reach the residual tolerance",
    ))
}

/// Radius of the gain ball around `K*` inside which stability is certified:
/// `(1 - |A - B K*|_*) / |B|`.
pub fn stability_threshold(are: &AreSolution, dynamics: &LinearDynamics) -> f64 {
    (1.0 - are.closed_loop_norm) / linalg::spectral_norm(dynamics.b())
}

/// Membership in the stabilizing set: `rho(A - B K) < 1`.
pub fn certify(policy: &Policy, dynamics: &LinearDynamics) -> bool {
    linalg::spectral_radius(&dynamics.closed_loop(policy))
        .map(|rho| rho < 1.0)
        .unwrap_or(false)
}

/// Value matrix of a frozen gain sequence from `tail.start()` to the
/// horizon, accumulated backward from `Q_N`. An empty tail returns `Q_N`.
pub fn cost_to_go(
    dynamics: &LinearDynamics,
    weights: &CostWeights,
    tail: &PolicySequence,
) -> Result<DMatrix<f64>> {
    let mut p = weights.qn().clone();
    for t in (tail.start()..tail.horizon()).rev() {
        let policy = tail
            .get(t)
            .ok_or_else(|| Error::config(format!("tail is missing the gain at time {t}")))?;
        let closed = dynamics.closed_loop(policy);
        p = linalg::symmetrize(
            &(closed.transpose() * &p * &closed
                + policy.gain.transpose() * weights.r() * &policy.gain
                + weights.q()),
        );
    }
    Ok(p)
}

/// Expected stage-`h` subproblem cost under `x_h ~ (0, Sigma_0)`:
/// `trace(Sigma_0 (Q + K^T R K + (A-BK)^T Ptail (A-BK)))`.
pub fn expected_subproblem_cost(
    dynamics: &LinearDynamics,
    weights: &CostWeights,
    tail: &PolicySequence,
    policy: &Policy,
    sigma0: &DMatrix<f64>,
) -> Result<f64> {
    let p_tail = cost_to_go(dynamics, weights, tail)?;
    let closed = dynamics.closed_loop(policy);
    let inner = weights.q()
        + policy.gain.transpose() * weights.r() * &policy.gain
        + closed.transpose() * &p_tail * &closed;
    Ok((sigma0 * inner).trace())
}

/// Gradient of the expected stage-`h` subproblem cost in the gain:
/// `2 ((R + B^T Ptail B) K - B^T Ptail A) Sigma_0`.
pub fn subproblem_gradient(
    dynamics: &LinearDynamics,
    weights: &CostWeights,
    tail: &PolicySequence,
    policy: &Policy,
    sigma0: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let p_tail = cost_to_go(dynamics, weights, tail)?;
    subproblem_gradient_with_value(dynamics, weights, &p_tail, policy, sigma0)
}

/// Same gradient with the tail value supplied by the caller.
pub fn subproblem_gradient_with_value(
    dynamics: &LinearDynamics,
    weights: &CostWeights,
    p_tail: &DMatrix<f64>,
    policy: &Policy,
    sigma0: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let bt_p = dynamics.b().transpose() * p_tail;
    let gram = weights.r() + &bt_p * dynamics.b();
    Ok((gram * &policy.gain - &bt_p * dynamics.a()) * 2.0 * sigma0)
}
