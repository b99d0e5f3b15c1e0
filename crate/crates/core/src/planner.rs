//! Planning modes: certainty-equivalent, risk-seeking and risk-averse.
//!
//! Each planner returns a plan together with a lower bound on the optimal
//! risk-sensitive cost.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{BreakdownKind, Error, Result};
use crate::prescient::{prescient_solve, Assembled, PrescientSolution};
use crate::linalg::SparseMatrix;
use crate::noise::ScalarNoise;
use crate::qp::{dot, solve_qp, QpData, SolveStatus, SolverOptions};
use crate::problem::ControlProblem;

/// `|gamma|` below this is treated as risk-neutral.
pub const RISK_NEUTRAL_TOL: f64 = 1e-9;

/// A `w` update smaller than `FIXED_POINT_FRACTION * eps` (relative to
/// `1 + ||w||_inf`) ends CCP as converged.
const FIXED_POINT_FRACTION: f64 = 0.1;

pub fn is_risk_neutral(gamma: f64) -> bool {
    gamma.abs() < RISK_NEUTRAL_TOL
}

/// Prescient plan at `w = E w`; its value is Jensen's lower bound.
pub fn certainty_equivalent_plan(
    problem: &ControlProblem,
    solver: &SolverOptions,
) -> Result<PrescientSolution> {
    let plan = prescient_solve(problem, &problem.noise_mean(), solver)?;
    plan.ensure_optimal()?;
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CcpOptions {
    pub eps: f64,
    pub stall_window: usize,
    pub max_iter: usize,
    pub breakdown_cap: f64,
}

impl Default for CcpOptions {
    fn default() -> Self {
        CcpOptions {
            eps: 1e-6,
            stall_window: 5,
            max_iter: 100,
            breakdown_cap: 1e12,
        }
    }
}

impl CcpOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || self.stall_window == 0 || !(self.breakdown_cap > 0.0) {
            return Err(Error::Argument(format!("invalid CCP options {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CcpStatus {
    Converged,
    StalledMaxIter,
    Breakdown,
}

#[derive(Debug, Clone)]
pub struct CcpIterate {
    pub k: usize,
    pub w: Vec<f64>,
    pub bound: f64,
    /// `||w^(k) - w^(k-1)||_inf`, zero for `k = 0`.
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct CcpResult {
    pub gamma: f64,
    /// Iterate with the largest bound.
    pub w_star: Vec<f64>,
    pub bound: f64,
    pub history: Vec<CcpIterate>,
    pub status: CcpStatus,
    pub final_plan: PrescientSolution,
    /// Reason for a breakdown status.
    pub detail: Option<String>,
}

impl CcpResult {
    /// Number of `w` updates performed.
    pub fn iterations(&self) -> usize {
        self.history.len().saturating_sub(1)
    }

    /// Turns a breakdown status into an error.
    pub fn ensure_no_breakdown(&self) -> Result<()> {
        match self.status {
            CcpStatus::Breakdown => Err(Error::Breakdown {
                kind: BreakdownKind::Neurotic,
                detail: self.detail.clone().unwrap_or_default(),
            }),
            _ => Ok(()),
        }
    }

    /// Writes `k,bound_k,step` rows with a header.
    pub fn write_history_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "k,bound_k,step_inf")?;
        for it in &self.history {
            writeln!(out, "{},{},{}", it.k, it.bound, it.step)?;
        }
        Ok(())
    }
}

fn inf_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Convex-concave procedure for `sup_w J_pr(w) - rho(w) / gamma`, `gamma > 0`.
///
/// Starting from `w = E w`, each iteration solves the prescient problem,
/// linearizes `J_pr` through its dynamics duals `lambda` and maximizes the
/// linearization exactly: `w <- grad c(gamma lambda)`. Noiseless coordinates
/// stay at their value because their CGF gradient is constant.
pub fn risk_averse_ccp(
    problem: &ControlProblem,
    gamma: f64,
    opts: &CcpOptions,
    solver: &SolverOptions,
) -> Result<CcpResult> {
    opts.validate()?;
    if !gamma.is_finite() || gamma <= -RISK_NEUTRAL_TOL {
        return Err(Error::Argument(format!(
            "risk-averse planning needs gamma > 0, got {gamma}"
        )));
    }
    let mut w = problem.noise_mean();
    if is_risk_neutral(gamma) {
        let plan = certainty_equivalent_plan(problem, solver)?;
        return Ok(CcpResult {
            gamma,
            bound: plan.value,
            history: vec![CcpIterate {
                k: 0,
                w: w.clone(),
                bound: plan.value,
                step: 0.0,
            }],
            w_star: w,
            status: CcpStatus::Converged,
            final_plan: plan,
            detail: None,
        });
    }

    let mut history: Vec<CcpIterate> = Vec::new();
    let mut best: Option<(f64, Vec<f64>, PrescientSolution)> = None;
    let mut status = CcpStatus::StalledMaxIter;
    let mut detail = None;
    let mut step = 0.0;

    for k in 0..=opts.max_iter {
        let plan = prescient_solve(problem, &w, solver)?;
        plan.ensure_optimal()?;
        let bound = plan.value - problem.rate(&w)? / gamma;
        history.push(CcpIterate {
            k,
            w: w.clone(),
            bound,
            step,
        });
        if !bound.is_finite() || bound > opts.breakdown_cap {
            status = CcpStatus::Breakdown;
            detail = Some(format!(
                "bound {bound} exceeds the cap {} at iteration {k}",
                opts.breakdown_cap
            ));
            if best.is_none() {
                best = Some((bound, w.clone(), plan));
            }
            break;
        }
        let lambda = plan.lambda_stacked();
        if best.as_ref().map_or(true, |b| bound > b.0) {
            best = Some((bound, w.clone(), plan));
        }

        let n = history.len();
        if n > opts.stall_window {
            let incs = (n - opts.stall_window..n).map(|i| history[i].bound - history[i - 1].bound);
            if incs.clone().all(|d| d < opts.eps) {
                status = CcpStatus::Converged;
                break;
            }
            if k == opts.max_iter {
                // Increments that stay above eps without shrinking mean the
                // iterates run off to infinity.
                let incs: Vec<f64> = incs.collect();
                if incs.iter().all(|d| *d >= opts.eps) && incs[incs.len() - 1] >= incs[0] {
                    status = CcpStatus::Breakdown;
                    detail = Some(format!(
                        "bound increments are not contracting after {k} iterations (last {})",
                        incs[incs.len() - 1]
                    ));
                }
                break;
            }
        }
        if k == opts.max_iter {
            break;
        }

        let y: Vec<f64> = lambda.iter().map(|l| gamma * l).collect();
        let next = match problem.cgf_grad(&y) {
            Ok(next) => next,
            Err(Error::Domain {
                coordinate, value, ..
            }) => {
                status = CcpStatus::Breakdown;
                detail = Some(format!(
                    "gamma * lambda = {value} leaves the CGF domain at coordinate {coordinate} (period {}, component {})",
                    coordinate / problem.state_dim(),
                    coordinate % problem.state_dim()
                ));
                break;
            }
            Err(e) => return Err(e),
        };
        if next.iter().any(|v| !v.is_finite()) {
            status = CcpStatus::Breakdown;
            detail = Some(format!("non-finite noise iterate at iteration {}", k + 1));
            break;
        }
        step = inf_norm_diff(&next, &w);
        let scale = 1.0 + w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if step <= FIXED_POINT_FRACTION * opts.eps * scale && n > 1 {
            status = CcpStatus::Converged;
            break;
        }
        w = next;
    }

    let (bound, w_star, final_plan) = best.expect("at least one iterate");
    Ok(CcpResult {
        gamma,
        w_star,
        bound,
        history,
        status,
        final_plan,
        detail,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeekingStatus {
    Optimal,
    Breakdown,
}

#[derive(Debug, Clone)]
pub struct SeekingResult {
    pub gamma: f64,
    /// Optimal noise path, including pinned coordinates.
    pub w: Vec<f64>,
    /// `inf_w J_pr(w) - rho(w) / gamma`.
    pub bound: f64,
    /// Prescient plan at `w`; its duals satisfy `w = grad c(gamma lambda)`.
    pub plan: PrescientSolution,
    /// Quadratic subproblems solved.
    pub iterations: usize,
    pub status: SeekingStatus,
    pub detail: Option<String>,
}

impl SeekingResult {
    pub fn ensure_no_breakdown(&self) -> Result<()> {
        match self.status {
            SeekingStatus::Breakdown => Err(Error::Breakdown {
                kind: BreakdownKind::Euphoric,
                detail: self.detail.clone().unwrap_or_default(),
            }),
            SeekingStatus::Optimal => Ok(()),
        }
    }
}

/// Stop once the joint objective decreases by less than this.
const SEEKING_DECREASE_TOL: f64 = 1e-8;
const SEEKING_MAX_ITER: usize = 100;
const SEEKING_CAP: f64 = 1e12;

/// Joint minimization over `(x, u, w)` of the stage costs plus
/// `rho(w) / |gamma|`, `gamma < 0`.
///
/// Gaussian rates are quadratic, so one QP suffices. Other families are
/// handled by sequential quadratic models of `rho` with a halving line search
/// on the exact objective.
pub fn risk_seeking_plan(
    problem: &ControlProblem,
    gamma: f64,
    solver: &SolverOptions,
) -> Result<SeekingResult> {
    if !gamma.is_finite() || gamma >= RISK_NEUTRAL_TOL {
        return Err(Error::Argument(format!(
            "risk-seeking planning needs gamma < 0, got {gamma}"
        )));
    }
    let mean = problem.noise_mean();
    if is_risk_neutral(gamma) {
        let plan = certainty_equivalent_plan(problem, solver)?;
        return Ok(SeekingResult {
            gamma,
            w: mean,
            bound: plan.value,
            plan,
            iterations: 0,
            status: SeekingStatus::Optimal,
            detail: None,
        });
    }
    let kappa = -1.0 / gamma;
    let free: Vec<usize> = (0..problem.noise_len())
        .filter(|&k| !problem.noise_coord(k).is_degenerate())
        .collect();
    let all_gaussian = free
        .iter()
        .all(|&k| matches!(problem.noise_coord(k), ScalarNoise::Gaussian { .. }));
    let base = Assembled::new(problem, &mean)?;
    let nv = base.layout.num_vars();
    let n = problem.state_dim();

    let rate_sum = |w: &[f64]| -> f64 {
        free.iter().map(|&k| problem.noise_coord(k).rate(w[k])).sum()
    };
    let base_quad = SparseMatrix::from_triplets(nv, nv, &base.quad);
    // Exact joint objective: stage costs at the (x, u) part plus the rate.
    let objective = |z: &[f64], w: &[f64]| -> f64 {
        let xu = &z[..nv];
        let mut px = vec![0.0; nv];
        base_quad.mul_vec(xu, &mut px);
        0.5 * dot(xu, &px) + dot(&base.lin, xu) + base.offset + kappa * rate_sum(w)
    };

    let breakdown = |detail: String, plan: PrescientSolution, w: Vec<f64>, it: usize| SeekingResult {
        gamma,
        w,
        bound: f64::NEG_INFINITY,
        plan,
        iterations: it,
        status: SeekingStatus::Breakdown,
        detail: Some(detail),
    };

    // Current iterate: primal vector of the joint problem and full w.
    let mut w = mean.clone();
    let mut current: Option<(Vec<f64>, f64)> = None;
    if !all_gaussian {
        let ce = certainty_equivalent_plan(problem, solver)?;
        let mut z = vec![0.0; nv + free.len()];
        for t in 0..=problem.horizon() {
            z[base.layout.x(t)..base.layout.x(t) + n].copy_from_slice(ce.x_traj[t].as_slice());
        }
        let m = problem.input_dim();
        for t in 0..problem.horizon() {
            z[base.layout.u(t)..base.layout.u(t) + m].copy_from_slice(ce.u_traj[t].as_slice());
        }
        for (j, &k) in free.iter().enumerate() {
            z[nv + j] = w[k];
        }
        current = Some((z, ce.value + kappa * rate_sum(&w)));
    }

    let mut iterations = 0;
    for it in 0..SEEKING_MAX_ITER {
        iterations = it + 1;
        // Quadratic model of kappa * rho around the current w.
        let mut quad = base.quad.clone();
        let mut lin = base.lin.clone();
        lin.resize(nv + free.len(), 0.0);
        let mut offset = base.offset;
        let mut eq = base.eq.clone();
        let mut eq_b = base.eq_b.clone();
        for (j, &k) in free.iter().enumerate() {
            let c = problem.noise_coord(k);
            let wk = w[k];
            let (r, g, h) = match (c.rate_grad(wk), c.rate_hess(wk)) {
                (Some(g), Some(h)) if h.is_finite() && h > 0.0 => (c.rate(wk), g, h),
                _ => {
                    return Err(Error::Domain {
                        coordinate: k,
                        value: wk,
                        detail: "rate function is not twice differentiable here".into(),
                    })
                }
            };
            let col = nv + j;
            quad.push((col, col, kappa * h));
            lin[col] = kappa * (g - h * wk);
            offset += kappa * (r - g * wk + 0.5 * h * wk * wk);
            let row = base.layout.dyn_row(k / n) + k % n;
            eq.push((row, col, 1.0));
            eq_b[row] = 0.0;
        }
        let qp = QpData {
            quad: SparseMatrix::from_triplets(nv + free.len(), nv + free.len(), &quad),
            lin,
            offset,
            eq_a: SparseMatrix::from_triplets(base.layout.num_eq(), nv + free.len(), &eq),
            eq_b,
            in_f: SparseMatrix::from_triplets(base.in_h.len(), nv + free.len(), &base.ineq),
            in_h: base.in_h.clone(),
        };
        let sol = solve_qp(&qp, solver)?;
        match sol.status {
            SolveStatus::Optimal => {}
            SolveStatus::Unbounded => {
                let plan = prescient_solve(problem, &w, solver)?;
                return Ok(breakdown(
                    "joint objective is unbounded below".into(),
                    plan,
                    w,
                    iterations,
                ));
            }
            status => {
                let plan = PrescientSolution::from_qp(&sol, &base.layout);
                plan.ensure_optimal()?;
                return Err(Error::Solver {
                    status,
                    context: "risk-seeking joint problem".into(),
                });
            }
        }
        if sol.objective < -SEEKING_CAP {
            let plan = PrescientSolution::from_qp(&sol, &base.layout);
            return Ok(breakdown(
                format!("joint objective {} below -{SEEKING_CAP}", sol.objective),
                plan,
                w,
                iterations,
            ));
        }
        if all_gaussian {
            for (j, &k) in free.iter().enumerate() {
                w[k] = sol.x[nv + j];
            }
            let plan = PrescientSolution::from_qp(&sol, &base.layout);
            return Ok(SeekingResult {
                gamma,
                bound: sol.objective,
                w,
                plan,
                iterations,
                status: SeekingStatus::Optimal,
                detail: None,
            });
        }

        // Halving line search on the exact objective.
        let (z, f) = current.take().expect("initialized for non-Gaussian noise");
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha > 1e-12 {
            let cand: Vec<f64> = z.iter().zip(&sol.x).map(|(a, b)| a + alpha * (b - a)).collect();
            let mut wc = w.clone();
            for (j, &k) in free.iter().enumerate() {
                wc[k] = cand[nv + j];
            }
            let fc = objective(&cand, &wc);
            if fc.is_finite() && fc <= f {
                accepted = Some((cand, fc, wc));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((cand, fc, wc)) => {
                let decrease = f - fc;
                w = wc;
                current = Some((cand, fc));
                if decrease < SEEKING_DECREASE_TOL {
                    break;
                }
            }
            None => break,
        }
    }
    let plan = prescient_solve(problem, &w, solver)?;
    plan.ensure_optimal()?;
    let bound = plan.value + kappa * rate_sum(&w);
    Ok(SeekingResult {
        gamma,
        w,
        bound,
        plan,
        iterations,
        status: SeekingStatus::Optimal,
        detail: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::lqr_problem;
    use nalgebra::{DMatrix, DVector};

    fn scalar() -> ControlProblem {
        let one = DMatrix::from_element(1, 1, 1.0);
        lqr_problem(&one, &one, &one, &one, &one, 1, &DVector::from_element(1, 1.0)).unwrap()
    }

    fn tight() -> CcpOptions {
        CcpOptions {
            eps: 1e-14,
            ..CcpOptions::default()
        }
    }

    #[test]
    fn certainty_equivalent_value() {
        let plan = certainty_equivalent_plan(&scalar(), &SolverOptions::default()).unwrap();
        assert!((plan.value - 1.5).abs() < 1e-9);
    }

    #[test]
    fn averse_fixed_point() {
        let s = SolverOptions::default();
        let r = risk_averse_ccp(&scalar(), 0.5, &CcpOptions::default(), &s).unwrap();
        assert_eq!(r.status, CcpStatus::Converged);
        assert!((r.bound - 2.0).abs() < 1e-8, "{}", r.bound);
        for pair in r.history.windows(2) {
            assert!(pair[1].bound >= pair[0].bound - 1e-9);
        }
        let r = risk_averse_ccp(&scalar(), 0.5, &tight(), &s).unwrap();
        assert!((r.w_star[0] - 1.0).abs() < 1e-8, "{}", r.w_star[0]);
    }

    #[test]
    fn averse_breakdown_at_threshold() {
        let r = risk_averse_ccp(&scalar(), 1.0, &CcpOptions::default(), &SolverOptions::default())
            .unwrap();
        assert_eq!(r.status, CcpStatus::Breakdown, "{:?}", r.detail);
        assert!(r.ensure_no_breakdown().unwrap_err().is_breakdown());
    }

    #[test]
    fn tiny_gamma_delegates_to_certainty_equivalent() {
        let r = risk_averse_ccp(&scalar(), 1e-12, &CcpOptions::default(), &SolverOptions::default())
            .unwrap();
        assert_eq!(r.history.len(), 1);
        assert!((r.bound - 1.5).abs() < 1e-9);
    }

    #[test]
    fn seeking_scalar() {
        let r = risk_seeking_plan(&scalar(), -1.0, &SolverOptions::default()).unwrap();
        assert_eq!(r.iterations, 1);
        // min_w 1 + (1 + w)^2 / 2 + w^2 / 2
        assert!((r.w[0] + 0.5).abs() < 1e-8);
        assert!((r.bound - 1.25).abs() < 1e-8, "{}", r.bound);
        let lam = r.plan.lambda[0][0];
        assert!((r.w[0] - (-1.0 * lam)).abs() < 1e-8);
    }

    #[test]
    fn seeking_laplace_uses_sequential_models() {
        use crate::noise::{NoiseModel, ScalarNoise};
        let p = scalar();
        let lap = NoiseModel::new(vec![ScalarNoise::laplace(0.0, 0.5).unwrap()]).unwrap();
        let q = ControlProblem::new(
            vec![p.a(0).clone()],
            vec![p.b(0).clone()],
            p.x_init().clone(),
            vec![p.stage(0).clone()],
            p.terminal().clone(),
            vec![lap.clone()],
        )
        .unwrap();
        let r = risk_seeking_plan(&q, -1.0, &SolverOptions::default()).unwrap();
        // Grid oracle for min_w 1 + (1 + w)^2 / 2 + rho(w).
        let c = lap.coords()[0];
        let f = |w: f64| 1.0 + (1.0 + w) * (1.0 + w) / 2.0 + c.rate(w);
        let (mut best_w, mut best) = (0.0, f64::INFINITY);
        for i in 0..=200_000 {
            let w = -2.0 + 4.0 * i as f64 / 200_000.0;
            if f(w) < best {
                best = f(w);
                best_w = w;
            }
        }
        assert!((r.bound - best).abs() < 1e-8, "{} vs {best}", r.bound);
        assert!((r.w[0] - best_w).abs() < 1e-4);
        // Stationarity shared with the averse update.
        let lam = r.plan.lambda[0][0];
        assert!((r.w[0] - c.cgf_grad(-lam).unwrap()).abs() < 1e-6);
    }
}
