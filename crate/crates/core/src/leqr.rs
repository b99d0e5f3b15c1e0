//! Exact certainty-equivalent planning for quadratic costs and Gaussian noise.
//!
//! With the multiplier `lambda` of the dynamics the saddle point of
//! `J_pr(w) - rho(w) / gamma` solves one symmetric linear system
//!
//! ```text
//! [ 2Q̄   0    Āᵀ    E0ᵀ ] [ x      ]   [ -q̄_x    ]
//! [ 0    2R̄   B̄ᵀ    0   ] [ u      ] = [ -q̄_u    ]
//! [ Ā    B̄    γΣ̄    0   ] [ lambda ]   [ -mu     ]
//! [ E0   0    0     0   ] [ nu     ]   [ x_init  ]
//! ```
//!
//! and the worst (or best) noise is `w = mu + gamma Sigma lambda`. The system
//! must have exactly `n(T+1) + mT` positive eigenvalues; anything else means
//! the game has no finite value.

use nalgebra::{DMatrix, DVector};

use crate::error::{BreakdownKind, Error, Result};
use crate::linalg::{BunchKaufman, Inertia};
use crate::noise::ScalarNoise;
use crate::planner::is_risk_neutral;
use crate::problem::ControlProblem;

/// Pivots below this fraction of the largest entry count as zero.
const ZERO_PIVOT_TOL: f64 = 1e-11;

/// Assembled block KKT system.
#[derive(Debug, Clone)]
pub struct LeqrSystem {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
    /// Per-coordinate noise means and variances, stacked over periods.
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl LeqrSystem {
    pub fn new(problem: &ControlProblem, gamma: f64) -> Result<Self> {
        check_quadratic(problem)?;
        let n = problem.state_dim();
        let m = problem.input_dim();
        let horizon = problem.horizon();
        let (mean, variance) = noise_moments(problem)?;

        let nx = n * (horizon + 1);
        let nu_ = m * horizon;
        let nl = n * horizon;
        let dim = nx + nu_ + nl + n;
        let xo = |t: usize| t * n;
        let uo = |t: usize| nx + t * m;
        let lo = |t: usize| nx + nu_ + t * n;
        let no = nx + nu_ + nl;

        let mut k = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        let sym = |k: &mut DMatrix<f64>, i: usize, j: usize, v: f64| {
            k[(i, j)] += v;
            if i != j {
                k[(j, i)] += v;
            }
        };

        for t in 0..horizon {
            let st = problem.stage(t);
            // Stage Hessian over (x_t, u_t).
            for i in 0..n + m {
                let gi = if i < n { xo(t) + i } else { uo(t) + i - n };
                rhs[gi] -= st.lin[i];
                for j in 0..=i {
                    let gj = if j < n { xo(t) + j } else { uo(t) + j - n };
                    let v = 2.0 * st.quad[(i, j)];
                    if v != 0.0 {
                        sym(&mut k, gi, gj, v);
                    }
                }
            }
            // Dynamics row block: A x_t + B u_t + gamma Sigma lambda_t - x_{t+1} = -mu_t.
            let (a, b) = (problem.a(t), problem.b(t));
            for i in 0..n {
                let row = lo(t) + i;
                for j in 0..n {
                    if a[(i, j)] != 0.0 {
                        sym(&mut k, row, xo(t) + j, a[(i, j)]);
                    }
                }
                for j in 0..m {
                    if b[(i, j)] != 0.0 {
                        sym(&mut k, row, uo(t) + j, b[(i, j)]);
                    }
                }
                sym(&mut k, row, xo(t + 1) + i, -1.0);
                k[(row, row)] += gamma * variance[t * n + i];
                rhs[row] = -mean[t * n + i];
            }
        }
        let term = problem.terminal();
        for i in 0..n {
            rhs[xo(horizon) + i] -= term.lin[i];
            for j in 0..=i {
                let v = 2.0 * term.quad[(i, j)];
                if v != 0.0 {
                    sym(&mut k, xo(horizon) + i, xo(horizon) + j, v);
                }
            }
            sym(&mut k, no + i, xo(0) + i, 1.0);
            rhs[no + i] = problem.x_init()[i];
        }

        Ok(LeqrSystem {
            n,
            m,
            horizon,
            gamma,
            matrix: k,
            rhs,
            mean,
            variance,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Inertia a well-posed saddle point must have.
    pub fn expected_inertia(&self) -> Inertia {
        let positive = self.n * (self.horizon + 1) + self.m * self.horizon;
        Inertia {
            positive,
            negative: self.dim() - positive,
            zero: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LeqrSolution {
    pub gamma: f64,
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    /// Stacked noise path `w_0, ..., w_{T-1}`.
    pub w: Vec<f64>,
    pub lambda: Vec<f64>,
    pub nu: DVector<f64>,
    /// `J_pr(w)` at the solution.
    pub value: f64,
    /// `J_pr(w) - rho(w) / gamma`.
    pub bound: f64,
}

/// Solves the certainty-equivalent game of a quadratic-Gaussian problem.
///
/// Errors with [`Error::Degenerate`] when the risk-neutral system is already
/// singular or has the wrong inertia, and with [`Error::Breakdown`] when only
/// the `gamma` term spoils the inertia.
pub fn leqr_kkt_solve(problem: &ControlProblem, gamma: f64) -> Result<LeqrSolution> {
    if !gamma.is_finite() {
        return Err(Error::Argument(format!("gamma must be finite, got {gamma}")));
    }
    let g = if is_risk_neutral(gamma) { 0.0 } else { gamma };
    let base = LeqrSystem::new(problem, 0.0)?;
    let want = base.expected_inertia();
    let bk0 = BunchKaufman::factor(&base.matrix, ZERO_PIVOT_TOL);
    let got0 = bk0.inertia();
    if got0 != want {
        return Err(Error::Degenerate(format!(
            "risk-neutral KKT inertia is {got0:?}, expected {want:?}"
        )));
    }
    let (sys, bk) = if g == 0.0 {
        (base, bk0)
    } else {
        let sys = LeqrSystem::new(problem, g)?;
        let bk = BunchKaufman::factor(&sys.matrix, ZERO_PIVOT_TOL);
        let got = bk.inertia();
        if got != want {
            let kind = if g > 0.0 {
                BreakdownKind::Neurotic
            } else {
                BreakdownKind::Euphoric
            };
            return Err(Error::Breakdown {
                kind,
                detail: format!(
                    "KKT inertia at gamma = {g} is (+{}, -{}, 0:{}), expected (+{}, -{}, 0:0)",
                    got.positive, got.negative, got.zero, want.positive, want.negative
                ),
            });
        }
        (sys, bk)
    };

    let sol = bk.solve(sys.rhs.as_slice());
    let (n, m, horizon) = (sys.n, sys.m, sys.horizon);
    let nx = n * (horizon + 1);
    let nl_start = nx + m * horizon;
    let x: Vec<DVector<f64>> = (0..=horizon)
        .map(|t| DVector::from_column_slice(&sol[t * n..(t + 1) * n]))
        .collect();
    let u: Vec<DVector<f64>> = (0..horizon)
        .map(|t| DVector::from_column_slice(&sol[nx + t * m..nx + (t + 1) * m]))
        .collect();
    let lambda = sol[nl_start..nl_start + n * horizon].to_vec();
    let nu = DVector::from_column_slice(&sol[nl_start + n * horizon..]);
    let w: Vec<f64> = (0..n * horizon)
        .map(|k| sys.mean[k] + g * sys.variance[k] * lambda[k])
        .collect();

    let value = problem.trajectory_cost(&x, &u)?;
    let bound = if g == 0.0 {
        value
    } else {
        value - problem.rate(&w)? / g
    };
    Ok(LeqrSolution {
        gamma,
        x,
        u,
        w,
        lambda,
        nu,
        value,
        bound,
    })
}

fn check_quadratic(problem: &ControlProblem) -> Result<()> {
    for t in 0..problem.horizon() {
        if problem.stage(t).ineq_f.nrows() > 0 {
            return Err(Error::Argument(format!(
                "unsupported problem: stage {t} has inequality constraints"
            )));
        }
    }
    if problem.terminal().ineq_f.nrows() > 0 {
        return Err(Error::Argument(
            "unsupported problem: terminal cost has inequality constraints".into(),
        ));
    }
    Ok(())
}

fn noise_moments(problem: &ControlProblem) -> Result<(Vec<f64>, Vec<f64>)> {
    let len = problem.noise_len();
    let mut mean = Vec::with_capacity(len);
    let mut var = Vec::with_capacity(len);
    for k in 0..len {
        match *problem.noise_coord(k) {
            ScalarNoise::Gaussian { mean: mu, variance } => {
                mean.push(mu);
                var.push(variance);
            }
            ScalarNoise::Constant { value } => {
                mean.push(value);
                var.push(0.0);
            }
            other => {
                return Err(Error::Argument(format!(
                    "unsupported noise at coordinate {k}: exact planning needs Gaussian noise, found {other:?}"
                )))
            }
        }
    }
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::lqr_problem;

    fn scalar() -> ControlProblem {
        let one = DMatrix::from_element(1, 1, 1.0);
        lqr_problem(&one, &one, &one, &one, &one, 1, &DVector::from_element(1, 1.0)).unwrap()
    }

    #[test]
    fn system_is_symmetric_with_block_sizes() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 0.9]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::from_element(1, 1, 0.5);
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![0.2, 0.3]));
        let p = lqr_problem(&a, &b, &q, &r, &s, 3, &DVector::from_vec(vec![1.0, -1.0])).unwrap();
        let sys = LeqrSystem::new(&p, 0.4).unwrap();
        // x: 2*4, u: 1*3, lambda: 2*3, nu: 2
        assert_eq!(sys.dim(), 8 + 3 + 6 + 2);
        assert_eq!(sys.matrix, sys.matrix.transpose());
    }

    #[test]
    fn scalar_averse_matches_hand_solution() {
        let s = leqr_kkt_solve(&scalar(), 0.5).unwrap();
        assert!((s.w[0] - 1.0).abs() < 1e-12);
        assert!((s.bound - 2.0).abs() < 1e-12);
        // J_pr(1) = 1 + 4/2
        assert!((s.value - 3.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_threshold_is_breakdown() {
        for g in [1.0, 1.5, 4.0] {
            let err = leqr_kkt_solve(&scalar(), g).unwrap_err();
            assert!(
                matches!(
                    err,
                    Error::Breakdown {
                        kind: BreakdownKind::Neurotic,
                        ..
                    }
                ),
                "{g}: {err}"
            );
        }
        assert!(leqr_kkt_solve(&scalar(), 0.999).is_ok());
    }

    #[test]
    fn scalar_seeking_matches_hand_solution() {
        let s = leqr_kkt_solve(&scalar(), -1.0).unwrap();
        assert!((s.w[0] + 0.5).abs() < 1e-12);
        // 1 + (1/2)^2 / 2 + (1/2)^2 / 2
        assert!((s.bound - 1.25).abs() < 1e-12);
    }

    #[test]
    fn grid_oracle_agrees_on_scalar_bound() {
        // J_pr(w) - w^2 / (2 gamma) with J_pr(w) = 1 + (1 + w)^2 / 2.
        let gamma = 0.3;
        let f = |w: f64| 1.0 + (1.0 + w) * (1.0 + w) / 2.0 - w * w / (2.0 * gamma);
        let best = (0..=200_000)
            .map(|i| -5.0 + 10.0 * i as f64 / 200_000.0)
            .map(f)
            .fold(f64::NEG_INFINITY, f64::max);
        let s = leqr_kkt_solve(&scalar(), gamma).unwrap();
        assert!((s.bound - best).abs() < 1e-8);
    }

    #[test]
    fn tiny_gamma_recovers_certainty_equivalent() {
        for g in [1e-6, -1e-6] {
            let s = leqr_kkt_solve(&scalar(), g).unwrap();
            assert!(s.w[0].abs() < 1e-4);
            assert!((s.bound - 1.5).abs() < 1e-4);
        }
        let s = leqr_kkt_solve(&scalar(), 0.0).unwrap();
        assert_eq!(s.w, vec![0.0]);
        assert!((s.bound - 1.5).abs() < 1e-12);
    }

    #[test]
    fn singular_base_system_is_degenerate() {
        let zero = DMatrix::zeros(1, 1);
        let one = DMatrix::from_element(1, 1, 1.0);
        // R = 0 and Q = 0 leave u free.
        let p = lqr_problem(&one, &one, &zero, &zero, &one, 2, &DVector::from_element(1, 1.0))
            .unwrap();
        assert!(matches!(leqr_kkt_solve(&p, 0.5), Err(Error::Degenerate(_))));
    }
}
