use riskmpc::{build_problem, leqr_kkt_solve, risk_averse_ccp, risk_seeking_plan, CcpOptions, PolicyMode};

use crate::config::ExperimentConfig;
use crate::experiment::RunError;

pub const BOUND_TOL: f64 = 1e-6;
pub const W_TOL: f64 = 1e-5;

/// CCP settings tight enough for the comparison tolerances.
pub fn oracle_ccp_options(base: &CcpOptions) -> CcpOptions {
    CcpOptions {
        eps: base.eps.min(1e-13),
        max_iter: base.max_iter.max(10_000),
        ..*base
    }
}

#[derive(Debug, Clone)]
pub struct OracleRow {
    pub gamma: f64,
    /// `None` when the method reported a breakdown.
    pub iterative: Option<f64>,
    pub kkt: Option<f64>,
    pub w_gap: Option<f64>,
    pub agree: bool,
}

/// Compares CCP (or the risk-seeking planner) with the closed-form KKT
/// solution at every nonzero gamma of the config.
pub fn oracle_check(cfg: &ExperimentConfig) -> Result<Vec<OracleRow>, RunError> {
    let problem = build_problem(&cfg.problem).map_err(|e| RunError::Config(e.to_string()))?;
    riskmpc::LeqrSystem::new(&problem, 0.0).map_err(|e| RunError::Config(e.to_string()))?;
    let mut gammas: Vec<f64> = cfg.bound_gammas().to_vec();
    for p in &cfg.policies {
        if p.mode != PolicyMode::Neutral && !gammas.contains(&p.gamma) {
            gammas.push(p.gamma);
        }
    }
    let ccp = oracle_ccp_options(&cfg.planner.ccp);
    let mut rows = Vec::new();
    for g in gammas {
        let kkt = leqr_kkt_solve(&problem, g);
        if let Err(e) = &kkt {
            if !e.is_breakdown() {
                return Err(RunError::Config(e.to_string()));
            }
        }
        let iterative: Option<(f64, Vec<f64>)> = if g > 0.0 {
            let r = risk_averse_ccp(&problem, g, &ccp, &cfg.planner.solver)
                .map_err(|e| RunError::Config(e.to_string()))?;
            r.ensure_no_breakdown().ok().map(|_| (r.bound, r.w_star))
        } else {
            let r = risk_seeking_plan(&problem, g, &cfg.planner.solver)
                .map_err(|e| RunError::Config(e.to_string()))?;
            r.ensure_no_breakdown().ok().map(|_| (r.bound, r.w))
        };
        let row = match (&iterative, &kkt) {
            (Some((b, w)), Ok(s)) => {
                let gap = w
                    .iter()
                    .zip(s.w.iter())
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                OracleRow {
                    gamma: g,
                    iterative: Some(*b),
                    kkt: Some(s.bound),
                    w_gap: Some(gap),
                    agree: (b - s.bound).abs() <= BOUND_TOL && gap <= W_TOL,
                }
            }
            (None, Err(_)) => OracleRow {
                gamma: g,
                iterative: None,
                kkt: None,
                w_gap: None,
                agree: true,
            },
            (it, k) => OracleRow {
                gamma: g,
                iterative: it.as_ref().map(|p| p.0),
                kkt: k.as_ref().ok().map(|s| s.bound),
                w_gap: None,
                agree: false,
            },
        };
        rows.push(row);
    }
    Ok(rows)
}
