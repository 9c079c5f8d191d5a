//! Model-free learning of linear-quadratic regulators by receding-horizon
//! policy gradient, paired with a model-based Riccati oracle suite for
//! ground truth and certification.
//!
//! The learner decomposes a finite-horizon problem backward in time into
//! one-step quadratic subproblems and solves each with a zeroth-order PG
//! update; see [`rhpg::run_rhpg`]. The oracle side ([`riccati`]) provides
//! the exact solutions, horizon selection, and stability certificates the
//! experiments are judged against, and never touches the learner's data
//! path.

pub mod error;
pub mod linalg;
pub mod rhpg;
pub mod riccati;
pub mod system;
pub mod zeroth_order;

pub use error::{Error, Result};
pub use linalg::{congruence_norm, induced_norm, spectral_norm, spectral_radius};
pub use rhpg::{
    certify_output, run_rhpg, select_horizon, Certifier, HorizonMode, Learner, RadiusRule,
    RhpgReport, RhpgSchedule, ScheduleConstants, WarmStart,
};
pub use riccati::{
    certify, gain_from_value, horizon_bound, lyapunov_cost, rde_step, solve_are,
    solve_finite_horizon, stability_threshold, AreSolution, RiccatiSolution,
};
pub use system::{
    finite_horizon_cost, rollout, sample_initial_state, subproblem_cost, CostWeights,
    InitialStateDistribution, LinearDynamics, NoiseModel, Policy, PolicySequence, SystemDocument,
    SystemInstance, Trajectory,
};
pub use zeroth_order::{
    one_point_estimate, pg_inner_loop, sample_sphere, two_point_estimate, InnerLoopConfig,
    InnerLoopTrace, OracleKind, PerturbationDirection, SampleCost,
};
