//! Plants, costs, trajectories, and the simulation primitives the learner
//! queries.
//!
//! All types are immutable after construction and safe to share across
//! threads; randomness always comes in through a caller-owned generator.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Discrete-time linear plant `x_{t+1} = A x_t + B u_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDynamics {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl LinearDynamics {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || a.nrows() == 0 {
            return Err(Error::config(format!(
                "A must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != a.nrows() || b.ncols() == 0 {
            return Err(Error::config(format!(
                "B must have {} rows and at least one column, got {}x{}",
                a.nrows(),
                b.nrows(),
                b.ncols()
            )));
        }
        if !linalg::all_finite(&a) || !linalg::all_finite(&b) {
            return Err(Error::config("system matrices must be finite"));
        }
        Ok(Self { a, b })
    }

    /// Scalar convenience constructor.
    pub fn scalar(a: f64, b: f64) -> Result<Self> {
        Self::new(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, b))
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// State dimension.
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    /// Input dimension.
    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Closed-loop matrix `A - B K`.
    pub fn closed_loop(&self, policy: &Policy) -> DMatrix<f64> {
        &self.a - &self.b * &policy.gain
    }
}

/// Quadratic stage weights `Q > 0`, `R > 0` and terminal weight `Q_N >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    qn: DMatrix<f64>,
}

impl CostWeights {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, qn: DMatrix<f64>) -> Result<Self> {
        let q = linalg::symmetrize(&q);
        let r = linalg::symmetrize(&r);
        let qn = linalg::symmetrize(&qn);
        if !linalg::is_positive_definite(&q) {
            return Err(Error::config("Q must be symmetric positive definite"));
        }
        if !linalg::is_positive_definite(&r) {
            return Err(Error::config("R must be symmetric positive definite"));
        }
        if qn.nrows() != q.nrows() {
            return Err(Error::config("Q_N must match the state dimension"));
        }
        if !linalg::is_positive_semidefinite(&qn) {
            return Err(Error::config("Q_N must be symmetric positive semi-definite"));
        }
        Ok(Self { q, r, qn })
    }

    pub fn scalar(q: f64, r: f64, qn: f64) -> Result<Self> {
        Self::new(
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, r),
            DMatrix::from_element(1, 1, qn),
        )
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn qn(&self) -> &DMatrix<f64> {
        &self.qn
    }
}

/// Distribution of the subproblem initial state.
#[derive(Debug, Clone)]
pub enum InitialStateDistribution {
    /// Zero-mean Gaussian with covariance `Sigma_0 > 0`.
    Gaussian { sigma0: DMatrix<f64>, root: DMatrix<f64> },
    /// A fixed vector, for the deterministic-start variant.
    Deterministic { x0: DVector<f64> },
    /// Uniform over `±sqrt(n) * Sigma_0^{1/2} e_i`; zero mean, covariance
    /// `Sigma_0`, and far lower fourth moments than the Gaussian.
    ScaledBasis { sigma0: DMatrix<f64>, root: DMatrix<f64> },
}

impl InitialStateDistribution {
    pub fn gaussian(sigma0: DMatrix<f64>) -> Result<Self> {
        let sigma0 = linalg::symmetrize(&sigma0);
        if !linalg::is_positive_definite(&sigma0) {
            return Err(Error::config("Sigma_0 must be positive definite"));
        }
        let (root, _) = linalg::sqrt_pd(&sigma0)?;
        Ok(Self::Gaussian { sigma0, root })
    }

    pub fn deterministic(x0: DVector<f64>) -> Result<Self> {
        if !x0.iter().all(|v| v.is_finite()) {
            return Err(Error::config("x0 must be finite"));
        }
        Ok(Self::Deterministic { x0 })
    }

    pub fn scaled_basis(sigma0: DMatrix<f64>) -> Result<Self> {
        let sigma0 = linalg::symmetrize(&sigma0);
        if !linalg::is_positive_definite(&sigma0) {
            return Err(Error::config("Sigma_0 must be positive definite"));
        }
        let (root, _) = linalg::sqrt_pd(&sigma0)?;
        Ok(Self::ScaledBasis { sigma0, root })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Gaussian { sigma0, .. } | Self::ScaledBasis { sigma0, .. } => sigma0.nrows(),
            Self::Deterministic { x0 } => x0.len(),
        }
    }

    /// Covariance of the distribution.
    pub fn covariance(&self) -> DMatrix<f64> {
        match self {
            Self::Gaussian { sigma0, .. } | Self::ScaledBasis { sigma0, .. } => sigma0.clone(),
            Self::Deterministic { x0 } => x0 * x0.transpose(),
        }
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        match self {
            Self::Gaussian { root, .. } => {
                let z = DVector::from_fn(root.nrows(), |_, _| StandardNormal.sample(rng));
                root * z
            }
            Self::Deterministic { x0 } => x0.clone(),
            Self::ScaledBasis { root, .. } => {
                let n = root.nrows();
                let i = (rng.next_u64() % n as u64) as usize;
                let sign = if rng.next_u64() & 1 == 0 { 1.0 } else { -1.0 };
                root.column(i) * (sign * (n as f64).sqrt())
            }
        }
    }
}

/// Additive process noise `w_t ~ N(0, W)`, off by default.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    w: Option<(DMatrix<f64>, DMatrix<f64>)>, // (W, W^{1/2})
}

impl NoiseModel {
    pub fn disabled() -> Self {
        Self { w: None }
    }

    pub fn gaussian(w: DMatrix<f64>) -> Result<Self> {
        let w = linalg::symmetrize(&w);
        if !linalg::is_positive_definite(&w) {
            return Err(Error::config("noise covariance W must be positive definite"));
        }
        let (root, _) = linalg::sqrt_pd(&w)?;
        Ok(Self { w: Some((w, root)) })
    }

    pub fn enabled(&self) -> bool {
        self.w.is_some()
    }

    pub fn covariance(&self) -> Option<&DMatrix<f64>> {
        self.w.as_ref().map(|(w, _)| w)
    }

    /// One noise vector, or `None` when disabled.
    pub fn sample(&self, rng: &mut dyn RngCore) -> Option<DVector<f64>> {
        self.w.as_ref().map(|(_, root)| {
            let z = DVector::from_fn(root.nrows(), |_, _| StandardNormal.sample(rng));
            root * z
        })
    }
}

/// State-feedback gain; the control applied is `u = -K x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub gain: DMatrix<f64>,
}

impl Policy {
    pub fn new(gain: DMatrix<f64>) -> Result<Self> {
        if !linalg::all_finite(&gain) {
            return Err(Error::config("policy gain must be finite"));
        }
        Ok(Self { gain })
    }

    pub fn zeros(m: usize, n: usize) -> Self {
        Self { gain: DMatrix::zeros(m, n) }
    }

    pub fn scalar(k: f64) -> Self {
        Self { gain: DMatrix::from_element(1, 1, k) }
    }

    pub fn control(&self, x: &DVector<f64>) -> DVector<f64> {
        -(&self.gain * x)
    }
}

/// Time-indexed gains covering `start..horizon` contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySequence {
    start: usize,
    horizon: usize,
    gains: Vec<Policy>,
}

impl PolicySequence {
    /// `gains[i]` is the policy applied at time `start + i`; the range must
    /// end exactly at `horizon - 1`.
    pub fn new(start: usize, horizon: usize, gains: Vec<Policy>) -> Result<Self> {
        if start > horizon {
            return Err(Error::config("policy range start exceeds the horizon"));
        }
        if gains.len() != horizon - start {
            return Err(Error::config(format!(
                "expected {} gains covering [{start}, {horizon}), got {}",
                horizon - start,
                gains.len()
            )));
        }
        Ok(Self { start, horizon, gains })
    }

    /// Empty sequence (a tail for the last subproblem).
    pub fn empty(horizon: usize) -> Self {
        Self { start: horizon, horizon, gains: Vec::new() }
    }

    /// Constant gain over `0..horizon`.
    pub fn constant(policy: Policy, horizon: usize) -> Self {
        Self { start: 0, horizon, gains: vec![policy; horizon] }
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    pub fn get(&self, t: usize) -> Option<&Policy> {
        if t < self.start || t >= self.horizon {
            return None;
        }
        self.gains.get(t - self.start)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Policy)> {
        self.gains.iter().enumerate().map(|(i, p)| (self.start + i, p))
    }
}

/// A realized rollout: states `x_h..x_N` and inputs `u_h..u_{N-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub start_index: usize,
}

impl Trajectory {
    pub fn new(states: Vec<DVector<f64>>, inputs: Vec<DVector<f64>>, start_index: usize) -> Result<Self> {
        if states.len() != inputs.len() + 1 {
            return Err(Error::config(format!(
                "trajectory needs one more state than inputs, got {} states and {} inputs",
                states.len(),
                inputs.len()
            )));
        }
        Ok(Self { states, inputs, start_index })
    }

    /// Number of transition steps.
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn terminal_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least one state")
    }

    /// The sub-trajectory starting one step later.
    pub fn suffix(&self) -> Result<Trajectory> {
        if self.inputs.is_empty() {
            return Err(Error::config("cannot take the suffix of a zero-step trajectory"));
        }
        Trajectory::new(
            self.states[1..].to_vec(),
            self.inputs[1..].to_vec(),
            self.start_index + 1,
        )
    }
}

/// Simulate the closed loop from `x_start` under the given time-indexed
/// gains, from `policies.start()` through the horizon. Noise is added per
/// step when the model is enabled.
pub fn rollout(
    dynamics: &LinearDynamics,
    policies: &PolicySequence,
    x_start: &DVector<f64>,
    noise: &NoiseModel,
    rng: &mut dyn RngCore,
) -> Result<Trajectory> {
    if x_start.len() != dynamics.state_dim() {
        return Err(Error::config(format!(
            "start state has dimension {}, plant expects {}",
            x_start.len(),
            dynamics.state_dim()
        )));
    }
    let (h, n) = (policies.start(), policies.horizon());
    let mut states = Vec::with_capacity(n - h + 1);
    let mut inputs = Vec::with_capacity(n - h);
    let mut x = x_start.clone();
    for t in h..n {
        let policy = policies
            .get(t)
            .ok_or_else(|| Error::config(format!("missing gain at time {t}")))?;
        if policy.gain.ncols() != dynamics.state_dim() || policy.gain.nrows() != dynamics.input_dim() {
            return Err(Error::config(format!(
                "gain at time {t} is {}x{}, plant expects {}x{}",
                policy.gain.nrows(),
                policy.gain.ncols(),
                dynamics.input_dim(),
                dynamics.state_dim()
            )));
        }
        let u = policy.control(&x);
        let mut next = dynamics.a() * &x + dynamics.b() * &u;
        if let Some(w) = noise.sample(rng) {
            next += w;
        }
        states.push(x);
        inputs.push(u);
        x = next;
    }
    states.push(x);
    Trajectory::new(states, inputs, h)
}

/// Accumulated quadratic cost of a realized trajectory:
/// running `x^T Q x + u^T R u` plus the terminal `x_N^T Q_N x_N`.
///
/// Inputs are taken as realized, so perturbed-policy rollouts are costed
/// with the inputs that were actually applied.
pub fn finite_horizon_cost(trajectory: &Trajectory, weights: &CostWeights) -> Result<f64> {
    let n = weights.q().nrows();
    let m = weights.r().nrows();
    let mut total = 0.0;
    for (x, u) in trajectory.states.iter().zip(trajectory.inputs.iter()) {
        if x.len() != n || u.len() != m {
            return Err(Error::config("trajectory dimensions do not match the weights"));
        }
        total += quad_form(weights.q(), x) + quad_form(weights.r(), u);
    }
    let xn = trajectory.terminal_state();
    if xn.len() != n {
        return Err(Error::config("terminal state dimension mismatch"));
    }
    total += quad_form(weights.qn(), xn);
    Ok(total)
}

/// One-sample cost of the stage-`h` subproblem: apply `k_h` for one step
/// from `x_h`, follow the frozen tail gains afterwards, and accumulate the
/// running and terminal costs. Deterministic given `(x_h, k_h, tail)`.
pub fn subproblem_cost(
    dynamics: &LinearDynamics,
    weights: &CostWeights,
    tail: &PolicySequence,
    k_h: &Policy,
    x_h: &DVector<f64>,
) -> Result<f64> {
    if x_h.len() != dynamics.state_dim() {
        return Err(Error::config("x_h dimension mismatch"));
    }
    let h = tail
        .start()
        .checked_sub(1)
        .ok_or_else(|| Error::config("tail must start at h + 1 >= 1"))?;
    let n = tail.horizon();

    let mut cost = 0.0;
    let mut x = x_h.clone();
    for t in h..n {
        let policy = if t == h {
            k_h
        } else {
            tail.get(t)
                .ok_or_else(|| Error::config(format!("tail is missing the gain at time {t}")))?
        };
        let u = policy.control(&x);
        cost += quad_form(weights.q(), &x) + quad_form(weights.r(), &u);
        x = dynamics.a() * &x + dynamics.b() * &u;
    }
    cost += quad_form(weights.qn(), &x);
    Ok(cost)
}

/// Draw one initial state.
pub fn sample_initial_state(dist: &InitialStateDistribution, rng: &mut dyn RngCore) -> DVector<f64> {
    dist.sample(rng)
}

fn quad_form(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    (m * v).dot(v)
}

/// JSON document for a full system instance: plant, weights, initial-state
/// covariance, and the optional noise model. Dimensions are inferred from
/// the nested arrays and validated on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemDocument {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    #[serde(rename = "QN")]
    pub qn: Vec<Vec<f64>>,
    #[serde(rename = "Sigma0")]
    pub sigma0: Vec<Vec<f64>>,
    #[serde(default)]
    pub noise: NoiseDocument,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NoiseDocument {
    #[serde(default)]
    pub enabled: bool,
    #[serde(rename = "W", default, skip_serializing_if = "Option::is_none")]
    pub w: Option<Vec<Vec<f64>>>,
}

/// A validated system instance.
#[derive(Debug, Clone)]
pub struct SystemInstance {
    pub dynamics: LinearDynamics,
    pub weights: CostWeights,
    pub sigma0: DMatrix<f64>,
    pub noise: NoiseModel,
}

impl SystemDocument {
    pub fn from_parts(
        dynamics: &LinearDynamics,
        weights: &CostWeights,
        sigma0: &DMatrix<f64>,
        noise: &NoiseModel,
    ) -> Self {
        Self {
            a: linalg::matrix_to_rows(dynamics.a()),
            b: linalg::matrix_to_rows(dynamics.b()),
            q: linalg::matrix_to_rows(weights.q()),
            r: linalg::matrix_to_rows(weights.r()),
            qn: linalg::matrix_to_rows(weights.qn()),
            sigma0: linalg::matrix_to_rows(sigma0),
            noise: NoiseDocument {
                enabled: noise.enabled(),
                w: noise.covariance().map(linalg::matrix_to_rows),
            },
        }
    }

    pub fn parse(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::config(format!("invalid system JSON: {e}")))
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("system document serializes")
    }

    /// Validate and build the typed instance.
    pub fn instantiate(&self) -> Result<SystemInstance> {
        let a = linalg::rows_to_matrix(&self.a, "A")?;
        let b = linalg::rows_to_matrix(&self.b, "B")?;
        let dynamics = LinearDynamics::new(a, b)?;
        let q = linalg::rows_to_matrix(&self.q, "Q")?;
        let r = linalg::rows_to_matrix(&self.r, "R")?;
        let qn = linalg::rows_to_matrix(&self.qn, "QN")?;
        if r.nrows() != dynamics.input_dim() {
            return Err(Error::config("R must match the input dimension"));
        }
        let weights = CostWeights::new(q, r, qn)?;
        if weights.q().nrows() != dynamics.state_dim() {
            return Err(Error::config("Q must match the state dimension"));
        }
        let sigma0 = linalg::rows_to_matrix(&self.sigma0, "Sigma0")?;
        if sigma0.nrows() != dynamics.state_dim() || !linalg::is_positive_definite(&sigma0) {
            return Err(Error::config("Sigma0 must be pd and match the state dimension"));
        }
        let noise = if self.noise.enabled {
            let w = self
                .noise
                .w
                .as_ref()
                .ok_or_else(|| Error::config("noise enabled but W missing"))?;
            let w = linalg::rows_to_matrix(w, "W")?;
            if w.nrows() != dynamics.state_dim() {
                return Err(Error::config("W must match the state dimension"));
            }
            NoiseModel::gaussian(w)?
        } else {
            NoiseModel::disabled()
        };
        Ok(SystemInstance { dynamics, weights, sigma0, noise })
    }
}
