//! The prescient problem: the control problem with the noise path fixed.
//!
//! Decision vector `(x_0, ..., x_T, u_0, ..., u_{T-1})`. Equality rows are
//! `x_0 = x_init` followed by `A_t x_t + B_t u_t - x_{t+1} = -w_t`, so the
//! solver's equality dual on the period-`t` rows is `∂J_pr/∂w_t` directly.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::linalg::SparseMatrix;
use crate::problem::ControlProblem;
use crate::qp::{solve_qp, KktResiduals, QpData, QpSolution, SolveStatus, SolverOptions};

/// Column and row offsets of the assembled QP.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    /// First inequality row of each period; the terminal block starts at
    /// `ineq_start[horizon]`.
    pub ineq_start: Vec<usize>,
}

impl Layout {
    fn new(p: &ControlProblem) -> Self {
        let horizon = p.horizon();
        let mut ineq_start = Vec::with_capacity(horizon + 1);
        let mut row = 0;
        for t in 0..horizon {
            ineq_start.push(row);
            row += p.stage(t).ineq_f.nrows();
        }
        ineq_start.push(row);
        Layout {
            n: p.state_dim(),
            m: p.input_dim(),
            horizon,
            ineq_start,
        }
    }

    pub fn x(&self, t: usize) -> usize {
        t * self.n
    }

    pub fn u(&self, t: usize) -> usize {
        self.n * (self.horizon + 1) + t * self.m
    }

    pub fn num_vars(&self) -> usize {
        self.n * (self.horizon + 1) + self.m * self.horizon
    }

    /// First equality row of the period-`t` dynamics.
    pub fn dyn_row(&self, t: usize) -> usize {
        self.n + t * self.n
    }

    pub fn num_eq(&self) -> usize {
        self.n * (self.horizon + 1)
    }

    fn period_of_ineq(&self, row: usize) -> usize {
        match self.ineq_start.binary_search(&row) {
            Ok(mut t) => {
                // Skip periods without inequality rows.
                while t + 1 < self.ineq_start.len() && self.ineq_start[t + 1] == row {
                    t += 1;
                }
                t
            }
            Err(t) => t - 1,
        }
    }
}

/// Sparse pieces of the prescient QP; the noise only enters `eq_b`.
pub(crate) struct Assembled {
    pub layout: Layout,
    pub quad: Vec<(usize, usize, f64)>,
    pub lin: Vec<f64>,
    pub offset: f64,
    pub eq: Vec<(usize, usize, f64)>,
    pub eq_b: Vec<f64>,
    pub ineq: Vec<(usize, usize, f64)>,
    pub in_h: Vec<f64>,
}

impl Assembled {
    pub fn new(p: &ControlProblem, w: &[f64]) -> Result<Self> {
        p.check_noise_len(w)?;
        let lay = Layout::new(p);
        let (n, m, horizon) = (lay.n, lay.m, lay.horizon);
        let nv = lay.num_vars();
        let mut quad = Vec::new();
        let mut lin = vec![0.0; nv];
        let mut offset = 0.0;
        let mut ineq = Vec::new();
        let mut in_h = Vec::new();

        // Maps a local (x, u) index of period t to a global column.
        let col = |t: usize, k: usize| if k < n { lay.x(t) + k } else { lay.u(t) + k - n };
        let mut add_cost = |t: usize, s: &crate::problem::StageCost, terminal: bool| {
            let d = s.dim();
            let c = |k: usize| if terminal { lay.x(horizon) + k } else { col(t, k) };
            for i in 0..d {
                for j in 0..d {
                    let v = s.quad[(i, j)];
                    if v != 0.0 {
                        quad.push((c(i), c(j), 2.0 * v));
                    }
                }
                lin[c(i)] += s.lin[i];
            }
            offset += s.const_off;
            let base = in_h.len();
            for r in 0..s.ineq_f.nrows() {
                for k in 0..d {
                    let v = s.ineq_f[(r, k)];
                    if v != 0.0 {
                        ineq.push((base + r, c(k), v));
                    }
                }
                in_h.push(s.ineq_h[r]);
            }
        };
        for t in 0..horizon {
            add_cost(t, p.stage(t), false);
        }
        add_cost(horizon, p.terminal(), true);

        let mut eq = Vec::new();
        let mut eq_b = vec![0.0; lay.num_eq()];
        for i in 0..n {
            eq.push((i, lay.x(0) + i, 1.0));
            eq_b[i] = p.x_init()[i];
        }
        for t in 0..horizon {
            let row = lay.dyn_row(t);
            let (a, b) = (p.a(t), p.b(t));
            for i in 0..n {
                for j in 0..n {
                    if a[(i, j)] != 0.0 {
                        eq.push((row + i, lay.x(t) + j, a[(i, j)]));
                    }
                }
                for j in 0..m {
                    if b[(i, j)] != 0.0 {
                        eq.push((row + i, lay.u(t) + j, b[(i, j)]));
                    }
                }
                eq.push((row + i, lay.x(t + 1) + i, -1.0));
                eq_b[row + i] = -w[t * n + i];
            }
        }
        Ok(Assembled {
            layout: lay,
            quad,
            lin,
            offset,
            eq,
            eq_b,
            ineq,
            in_h,
        })
    }

    pub fn to_qp(&self, extra_vars: usize) -> QpData {
        let nv = self.layout.num_vars() + extra_vars;
        let mut lin = self.lin.clone();
        lin.resize(nv, 0.0);
        QpData {
            quad: SparseMatrix::from_triplets(nv, nv, &self.quad),
            lin,
            offset: self.offset,
            eq_a: SparseMatrix::from_triplets(self.layout.num_eq(), nv, &self.eq),
            eq_b: self.eq_b.clone(),
            in_f: SparseMatrix::from_triplets(self.in_h.len(), nv, &self.ineq),
            in_h: self.in_h.clone(),
        }
    }
}

/// Assembles the prescient QP for the stacked noise path `w` (length `nT`).
///
/// The equality matrix has full row rank by construction: each dynamics row
/// is the only row containing its `x_{t+1}` entry and the first `n` rows
/// select `x_0`.
pub fn assemble_qp(problem: &ControlProblem, w: &[f64]) -> Result<QpData> {
    Ok(Assembled::new(problem, w)?.to_qp(0))
}

#[derive(Debug, Clone)]
pub struct PrescientSolution {
    /// `J_pr(w)`.
    pub value: f64,
    pub x_traj: Vec<DVector<f64>>,
    pub u_traj: Vec<DVector<f64>>,
    /// Dynamics duals; `lambda[t]` is a subgradient of `J_pr` in `w_t`.
    pub lambda: Vec<DVector<f64>>,
    /// Dual of `x_0 = x_init`.
    pub nu: DVector<f64>,
    pub status: SolveStatus,
    pub kkt_residuals: KktResiduals,
    pub iterations: usize,
    /// Period whose constraints carry the largest weight in the
    /// infeasibility certificate.
    pub infeasible_period: Option<usize>,
}

impl PrescientSolution {
    pub(crate) fn from_qp(sol: &QpSolution, lay: &Layout) -> Self {
        let (n, m, horizon) = (lay.n, lay.m, lay.horizon);
        let x_traj = (0..=horizon)
            .map(|t| DVector::from_column_slice(&sol.x[lay.x(t)..lay.x(t) + n]))
            .collect();
        let u_traj = (0..horizon)
            .map(|t| DVector::from_column_slice(&sol.x[lay.u(t)..lay.u(t) + m]))
            .collect();
        let lambda = (0..horizon)
            .map(|t| DVector::from_column_slice(&sol.y[lay.dyn_row(t)..lay.dyn_row(t) + n]))
            .collect();
        let infeasible_period = match (&sol.certificate, sol.status) {
            (Some(cert), SolveStatus::Infeasible) if !sol.z.is_empty() => {
                let zc = &cert[sol.y.len()..];
                zc.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(row, _)| lay.period_of_ineq(row))
            }
            _ => None,
        };
        PrescientSolution {
            value: sol.objective,
            x_traj,
            u_traj,
            lambda,
            nu: DVector::from_column_slice(&sol.y[..n]),
            status: sol.status,
            kkt_residuals: sol.residuals,
            iterations: sol.iterations,
            infeasible_period,
        }
    }

    /// Stacked `λ`, length `nT`.
    pub fn lambda_stacked(&self) -> Vec<f64> {
        self.lambda.iter().flat_map(|l| l.iter().copied()).collect()
    }

    /// Turns a non-optimal status into a descriptive error.
    pub fn ensure_optimal(&self) -> Result<()> {
        match self.status {
            SolveStatus::Optimal => Ok(()),
            SolveStatus::Infeasible => Err(Error::problem(
                self.infeasible_period,
                "prescient problem is infeasible",
            )),
            status => Err(Error::Solver {
                status,
                context: format!(
                    "prescient problem after {} iterations (residuals {:?})",
                    self.iterations, self.kkt_residuals
                ),
            }),
        }
    }
}

/// Solves the prescient problem at the stacked noise path `w`.
pub fn prescient_solve(
    problem: &ControlProblem,
    w: &[f64],
    opts: &SolverOptions,
) -> Result<PrescientSolution> {
    let asm = Assembled::new(problem, w)?;
    let sol = solve_qp(&asm.to_qp(0), opts)?;
    Ok(PrescientSolution::from_qp(&sol, &asm.layout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{battery_problem, lqr_problem, BaselineLoad, BatteryParams};
    use nalgebra::DMatrix;

    fn scalar() -> ControlProblem {
        let one = DMatrix::from_element(1, 1, 1.0);
        lqr_problem(&one, &one, &one, &one, &one, 1, &DVector::from_element(1, 1.0)).unwrap()
    }

    #[test]
    fn scalar_structure_counts() {
        let qp = assemble_qp(&scalar(), &[0.0]).unwrap();
        assert_eq!(qp.num_vars(), 3);
        assert_eq!(qp.eq_a.nrows(), 2);
    }

    #[test]
    fn noise_only_changes_eq_b() {
        let p = scalar();
        let q0 = assemble_qp(&p, &[0.0]).unwrap();
        let q1 = assemble_qp(&p, &[1.0]).unwrap();
        assert_eq!(q0.quad, q1.quad);
        assert_eq!(q0.eq_a, q1.eq_a);
        assert_eq!(q0.in_f, q1.in_f);
        assert_ne!(q0.eq_b, q1.eq_b);
    }

    #[test]
    fn battery_inequality_rows() {
        let mut params = BatteryParams::with_baseline(BaselineLoad::Hourly(vec![1.0; 24]));
        params.horizon = 2;
        let p = battery_problem(&params).unwrap();
        let qp = assemble_qp(&p, &p.noise_mean()).unwrap();
        assert_eq!(qp.in_f.nrows(), 8);
    }

    #[test]
    fn scalar_values_and_duals() {
        let p = scalar();
        let opts = SolverOptions::default();
        let s = prescient_solve(&p, &[0.0], &opts).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.value - 1.5).abs() < 1e-9);
        assert!((s.u_traj[0][0] + 0.5).abs() < 1e-9);
        assert!((s.lambda[0][0] - 1.0).abs() < 1e-9);
        let s = prescient_solve(&p, &[1.0], &opts).unwrap();
        assert!((s.value - 3.0).abs() < 1e-9);
        assert!((s.lambda[0][0] - 2.0).abs() < 1e-9);
        // Central difference of J_pr(w) = 1 + (1 + w)^2 / 2 at w = 0.
        let h = 1e-5;
        let fp = prescient_solve(&p, &[h], &opts).unwrap().value;
        let fm = prescient_solve(&p, &[-h], &opts).unwrap().value;
        assert!(((fp - fm) / (2.0 * h) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn wrong_noise_length_is_rejected() {
        assert!(matches!(
            prescient_solve(&scalar(), &[0.0, 1.0], &SolverOptions::default()),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn infeasible_period_is_located() {
        // Battery whose load must be met with p_grid ≥ 0 can't be infeasible,
        // so force it with an inline charge target below zero at t = 1.
        use crate::problem::StageCost;
        let mut params = BatteryParams::with_baseline(BaselineLoad::Hourly(vec![1.0; 24]));
        params.horizon = 3;
        let p = battery_problem(&params).unwrap();
        let mut stages: Vec<StageCost> = (0..3).map(|t| p.stage(t).clone()).collect();
        // q_{t+1} ≤ -1
        stages[1].ineq_h[0] = -1.0;
        let bad = ControlProblem::new(
            (0..3).map(|t| p.a(t).clone()).collect(),
            (0..3).map(|t| p.b(t).clone()).collect(),
            p.x_init().clone(),
            stages,
            p.terminal().clone(),
            (0..3).map(|t| p.noise(t).clone()).collect(),
        )
        .unwrap();
        let s = prescient_solve(&bad, &bad.noise_mean(), &SolverOptions::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Infeasible);
        let err = s.ensure_optimal().unwrap_err();
        assert!(err.to_string().contains("infeasible"), "{err}");
        assert_eq!(s.infeasible_period, Some(1));
    }
}
