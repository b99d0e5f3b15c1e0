//! Risk-sensitive model predictive control for linear systems with convex
//! stage costs and non-Gaussian noise.

/// Library version, recorded in experiment metadata.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod error;
pub mod leqr;
pub mod linalg;
pub mod mpc;
pub mod noise;
pub mod prescient;
pub mod problem;
pub mod planner;
pub mod qp;
pub mod risk;

pub use error::{BreakdownKind, Error, Result};
pub use leqr::{leqr_kkt_solve, LeqrSolution, LeqrSystem};
pub use mpc::{
    evaluate_policy_mc, mpc_step, path_seed, sample_noise_path, simulate_closed_loop, ClosedLoopResult,
    PlannerOptions, PolicyEvaluation, PolicyMode, StepRecord,
};
pub use noise::{NoiseModel, ScalarNoise};
pub use prescient::{assemble_qp, prescient_solve, PrescientSolution};
pub use problem::{
    battery_problem, build_problem, lqr_problem, BaselineLoad, BatteryParams, ControlProblem,
    ProblemConfig, StageCost,
};
pub use risk::{risk_bound_scalar, risk_mc, Affine, ConvexOracle, Quadratic, RiskEstimate, ScalarBound};
pub use qp::{solve_qp, KktResiduals, QpData, QpSolution, SolveStatus, SolverOptions};
pub use planner::{
    certainty_equivalent_plan, risk_averse_ccp, risk_seeking_plan, CcpOptions, CcpResult,
    CcpStatus, SeekingResult, SeekingStatus,
};
