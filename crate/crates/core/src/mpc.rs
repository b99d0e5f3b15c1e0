//! Shrinking-horizon MPC and closed-loop Monte Carlo evaluation.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planner::{
    certainty_equivalent_plan, risk_averse_ccp, risk_seeking_plan, CcpOptions, CcpStatus,
    SeekingStatus,
};
use crate::problem::ControlProblem;
use crate::qp::SolverOptions;
use crate::risk::{risk_mc, RiskEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyMode {
    Neutral,
    Seeking,
    Averse,
}

impl PolicyMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyMode::Neutral => "neutral",
            PolicyMode::Seeking => "seeking",
            PolicyMode::Averse => "averse",
        }
    }
}

impl std::fmt::Display for PolicyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Solver settings shared by every planning call of a policy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerOptions {
    pub solver: SolverOptions,
    pub ccp: CcpOptions,
}

/// What the planner did at one MPC step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub status: String,
    pub ccp_iterations: usize,
    pub bound: f64,
}

/// Plans from `x_t` over periods `t..T` and returns the first input with the
/// step record.
pub fn plan_step(
    problem: &ControlProblem,
    t: usize,
    x_t: &DVector<f64>,
    gamma: f64,
    mode: PolicyMode,
    opts: &PlannerOptions,
) -> Result<(DVector<f64>, StepRecord)> {
    let wrap = |e: Error| Error::Policy {
        step: t,
        source: Box::new(e),
    };
    let tail = problem
        .tail(t)
        .and_then(|p| p.with_initial_state(x_t.clone()))
        .map_err(wrap)?;
    match mode {
        PolicyMode::Neutral => {
            let plan = certainty_equivalent_plan(&tail, &opts.solver).map_err(wrap)?;
            let record = StepRecord {
                status: "optimal".into(),
                ccp_iterations: 0,
                bound: plan.value,
            };
            Ok((plan.u_traj[0].clone(), record))
        }
        PolicyMode::Seeking => {
            let res = risk_seeking_plan(&tail, gamma, &opts.solver).map_err(wrap)?;
            res.ensure_no_breakdown().map_err(wrap)?;
            let record = StepRecord {
                status: match res.status {
                    SeekingStatus::Optimal => "optimal".into(),
                    SeekingStatus::Breakdown => "breakdown".into(),
                },
                ccp_iterations: res.iterations,
                bound: res.bound,
            };
            Ok((res.plan.u_traj[0].clone(), record))
        }
        PolicyMode::Averse => {
            let res = risk_averse_ccp(&tail, gamma, &opts.ccp, &opts.solver).map_err(wrap)?;
            res.ensure_no_breakdown().map_err(wrap)?;
            let record = StepRecord {
                status: match res.status {
                    CcpStatus::Converged => "converged".into(),
                    CcpStatus::StalledMaxIter => "stalled_max_iter".into(),
                    CcpStatus::Breakdown => "breakdown".into(),
                },
                ccp_iterations: res.iterations(),
                bound: res.bound,
            };
            Ok((res.final_plan.u_traj[0].clone(), record))
        }
    }
}

/// The input applied at period `t` from state `x_t`.
pub fn mpc_step(
    problem: &ControlProblem,
    t: usize,
    x_t: &DVector<f64>,
    gamma: f64,
    mode: PolicyMode,
    opts: &PlannerOptions,
) -> Result<DVector<f64>> {
    plan_step(problem, t, x_t, gamma, mode, opts).map(|(u, _)| u)
}

#[derive(Debug, Clone)]
pub struct ClosedLoopResult {
    pub x_realized: Vec<DVector<f64>>,
    pub u_applied: Vec<DVector<f64>>,
    pub w_realized: Vec<DVector<f64>>,
    /// `g_T(x_T) + sum_t g_t(x_t, u_t)`; infinite if a constraint is violated.
    pub cost: f64,
    pub per_step: Vec<StepRecord>,
}

/// `x_{t+1} = A_t x_t + B_t u_t + w_t`.
pub fn propagate(problem: &ControlProblem, t: usize, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
    problem.a(t) * x + problem.b(t) * u + w
}

/// Runs the policy against the noise path `w_path` (one `n`-vector per
/// period).
pub fn simulate_closed_loop(
    problem: &ControlProblem,
    gamma: f64,
    mode: PolicyMode,
    w_path: &[DVector<f64>],
    opts: &PlannerOptions,
) -> Result<ClosedLoopResult> {
    let horizon = problem.horizon();
    if w_path.len() != horizon {
        return Err(Error::dim("noise path", horizon, w_path.len()));
    }
    let n = problem.state_dim();
    if let Some(w) = w_path.iter().find(|w| w.len() != n) {
        return Err(Error::dim("noise path entry", n, w.len()));
    }
    let mut x = vec![problem.x_init().clone()];
    let mut u_applied = Vec::with_capacity(horizon);
    let mut per_step = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let (u, record) = plan_step(problem, t, &x[t], gamma, mode, opts)?;
        let next = propagate(problem, t, &x[t], &u, &w_path[t]);
        x.push(next);
        u_applied.push(u);
        per_step.push(record);
    }
    let cost = problem.trajectory_cost(&x, &u_applied)?;
    Ok(ClosedLoopResult {
        x_realized: x,
        u_applied,
        w_realized: w_path.to_vec(),
        cost,
        per_step,
    })
}

/// SplitMix64 finalizer of `seed` mixed with `index`; the per-path seed.
pub fn path_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One noise path drawn from the problem's per-period models.
pub fn sample_noise_path(problem: &ControlProblem, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..problem.horizon())
        .map(|t| DVector::from_vec(problem.noise(t).draw(&mut rng)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct FailedPath {
    pub index: usize,
    pub breakdown: bool,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct PolicyEvaluation {
    pub mode: PolicyMode,
    pub gamma_policy: f64,
    /// One estimate per evaluation gamma, over successful paths.
    pub estimates: Vec<RiskEstimate>,
    /// Realized cost per path index; `None` for failed paths.
    pub path_costs: Vec<Option<f64>>,
    pub failures: Vec<FailedPath>,
}

impl PolicyEvaluation {
    /// Costs of the successful paths in path order.
    pub fn costs(&self) -> Vec<f64> {
        self.path_costs.iter().flatten().copied().collect()
    }
}

/// Closed-loop Monte Carlo evaluation of one policy under several risk
/// measures. Path `i` uses noise seeded by `path_seed(seed, i)`, so results
/// do not depend on how paths are scheduled across threads.
pub fn evaluate_policy_mc(
    problem: &ControlProblem,
    mode: PolicyMode,
    gamma_policy: f64,
    gamma_eval: &[f64],
    n_paths: usize,
    seed: u64,
    opts: &PlannerOptions,
) -> Result<PolicyEvaluation> {
    if n_paths == 0 {
        return Err(Error::Argument("n_paths must be at least 1".into()));
    }
    let outcomes: Vec<Result<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let w = sample_noise_path(problem, path_seed(seed, i as u64));
            simulate_closed_loop(problem, gamma_policy, mode, &w, opts).map(|r| r.cost)
        })
        .collect();
    let mut path_costs = Vec::with_capacity(n_paths);
    let mut failures = Vec::new();
    let mut first_error = None;
    for (index, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(c) if c.is_finite() => path_costs.push(Some(c)),
            Ok(c) => {
                path_costs.push(None);
                failures.push(FailedPath {
                    index,
                    breakdown: false,
                    message: format!("realized cost {c} (constraint violated)"),
                });
            }
            Err(e) => {
                path_costs.push(None);
                failures.push(FailedPath {
                    index,
                    breakdown: e.is_breakdown(),
                    message: e.to_string(),
                });
                first_error.get_or_insert(e);
            }
        }
    }
    let costs: Vec<f64> = path_costs.iter().flatten().copied().collect();
    if costs.is_empty() {
        return Err(first_error.unwrap_or_else(|| {
            Error::Argument("every simulated path violated a constraint".into())
        }));
    }
    let estimates = gamma_eval
        .iter()
        .map(|&g| risk_mc(&costs, g))
        .collect::<Result<Vec<_>>>()?;
    Ok(PolicyEvaluation {
        mode,
        gamma_policy,
        estimates,
        path_costs,
        failures,
    })
}
