//! Monte Carlo estimates of the risk operator and the generic scalar bound.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BreakdownKind, Error, Result};
use crate::noise::NoiseModel;
use crate::planner::{is_risk_neutral, CcpOptions, CcpStatus};

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
const BOOTSTRAP_SEED: u64 = 0x5EED_B007;

/// Estimate of `R_gamma` with a 95% bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub gamma: f64,
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_samples: usize,
}

impl RiskEstimate {
    pub fn ci_width(&self) -> f64 {
        self.ci_high - self.ci_low
    }

    pub fn contains(&self, v: f64) -> bool {
        self.ci_low <= v && v <= self.ci_high
    }
}

/// `(1/gamma) log mean exp(gamma c)`, or the sample mean when `gamma` is
/// risk-neutral.
pub fn risk_point(costs: &[f64], gamma: f64) -> f64 {
    if is_risk_neutral(gamma) {
        return costs.iter().sum::<f64>() / costs.len() as f64;
    }
    let shift = if gamma > 0.0 {
        costs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    } else {
        costs.iter().copied().fold(f64::INFINITY, f64::min)
    };
    let mean = costs.iter().map(|c| (gamma * (c - shift)).exp()).sum::<f64>() / costs.len() as f64;
    shift + mean.ln() / gamma
}

/// Monte Carlo estimate of `R_gamma` from realized costs.
pub fn risk_mc(costs: &[f64], gamma: f64) -> Result<RiskEstimate> {
    if costs.is_empty() {
        return Err(Error::Argument("risk_mc needs at least one cost".into()));
    }
    if !gamma.is_finite() {
        return Err(Error::Argument(format!("gamma must be finite, got {gamma}")));
    }
    if let Some(i) = costs.iter().position(|c| !c.is_finite()) {
        return Err(Error::Argument(format!("cost {i} is not finite ({})", costs[i])));
    }
    let n = costs.len();
    let value = risk_point(costs, gamma);

    // Resampling only needs the per-sample terms, shifted once.
    let neutral = is_risk_neutral(gamma);
    let shift = if neutral {
        0.0
    } else if gamma > 0.0 {
        costs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    } else {
        costs.iter().copied().fold(f64::INFINITY, f64::min)
    };
    let terms: Vec<f64> = if neutral {
        costs.to_vec()
    } else {
        costs.iter().map(|c| (gamma * (c - shift)).exp()).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(BOOTSTRAP_SEED);
    let mut stats: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| {
            let mut s = 0.0;
            for _ in 0..n {
                s += terms[rng.gen_range(0..n)];
            }
            let mean = s / n as f64;
            if neutral {
                mean
            } else {
                shift + mean.ln() / gamma
            }
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let lo = stats[(0.025 * (BOOTSTRAP_RESAMPLES - 1) as f64).round() as usize];
    let hi = stats[(0.975 * (BOOTSTRAP_RESAMPLES - 1) as f64).round() as usize];
    Ok(RiskEstimate {
        gamma,
        value,
        ci_low: lo.min(value),
        ci_high: hi.max(value),
        n_samples: n,
    })
}

/// Convex function with a subgradient oracle.
pub trait ConvexOracle {
    fn dim(&self) -> usize;
    fn value(&self, z: &[f64]) -> f64;
    fn subgradient(&self, z: &[f64]) -> Vec<f64>;
    /// Hessian where it exists; finite differences of the subgradient are
    /// used otherwise.
    fn hessian(&self, _z: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
}

/// `aᵀz + b`.
#[derive(Debug, Clone)]
pub struct Affine {
    pub a: Vec<f64>,
    pub b: f64,
}

impl ConvexOracle for Affine {
    fn dim(&self) -> usize {
        self.a.len()
    }
    fn value(&self, z: &[f64]) -> f64 {
        self.a.iter().zip(z).map(|(a, z)| a * z).sum::<f64>() + self.b
    }
    fn subgradient(&self, _z: &[f64]) -> Vec<f64> {
        self.a.clone()
    }
    fn hessian(&self, _z: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(self.a.len(), self.a.len()))
    }
}

/// `zᵀPz + qᵀz + r` with `P` PSD.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub r: f64,
}

impl ConvexOracle for Quadratic {
    fn dim(&self) -> usize {
        self.q.len()
    }
    fn value(&self, z: &[f64]) -> f64 {
        let z = DVector::from_column_slice(z);
        z.dot(&(&self.p * &z)) + self.q.dot(&z) + self.r
    }
    fn subgradient(&self, z: &[f64]) -> Vec<f64> {
        let z = DVector::from_column_slice(z);
        let g = (&self.p + self.p.transpose()) * &z + &self.q;
        g.as_slice().to_vec()
    }
    fn hessian(&self, _z: &[f64]) -> Option<DMatrix<f64>> {
        Some(&self.p + self.p.transpose())
    }
}

#[derive(Debug, Clone)]
pub struct ScalarBoundIterate {
    pub k: usize,
    pub z: Vec<f64>,
    pub value: f64,
}

/// Lower bound `(1/gamma) sup_z (gamma f(z) - rho(z))` on `R_gamma(f(w))`.
#[derive(Debug, Clone)]
pub struct ScalarBound {
    pub gamma: f64,
    pub value: f64,
    pub z: Vec<f64>,
    pub history: Vec<ScalarBoundIterate>,
    pub status: CcpStatus,
    pub detail: Option<String>,
}

impl ScalarBound {
    pub fn ensure_no_breakdown(&self) -> Result<()> {
        if self.status != CcpStatus::Breakdown {
            return Ok(());
        }
        let kind = if self.gamma > 0.0 {
            BreakdownKind::Neurotic
        } else {
            BreakdownKind::Euphoric
        };
        Err(Error::Breakdown {
            kind,
            detail: self.detail.clone().unwrap_or_default(),
        })
    }
}

/// Evaluates the rate-function bound on `R_gamma(f(w))`, `w ~ model`.
///
/// For `gamma > 0` the iterates `z <- grad c(gamma g(z))` (with `g` a
/// subgradient of `f`) give nondecreasing values. For `gamma < 0` the problem
/// is `min_z f(z) + rho(z) / |gamma|`, solved by damped Newton.
pub fn risk_bound_scalar(
    f: &dyn ConvexOracle,
    model: &NoiseModel,
    gamma: f64,
    opts: &CcpOptions,
) -> Result<ScalarBound> {
    opts.validate()?;
    if f.dim() != model.dim() {
        return Err(Error::dim("risk_bound_scalar oracle", model.dim(), f.dim()));
    }
    if !gamma.is_finite() {
        return Err(Error::Argument(format!("gamma must be finite, got {gamma}")));
    }
    let mean = model.mean();
    if is_risk_neutral(gamma) {
        let value = f.value(&mean);
        return Ok(ScalarBound {
            gamma,
            value,
            history: vec![ScalarBoundIterate {
                k: 0,
                z: mean.clone(),
                value,
            }],
            z: mean,
            status: CcpStatus::Converged,
            detail: None,
        });
    }
    if gamma > 0.0 {
        ascent(f, model, gamma, opts)
    } else {
        newton(f, model, gamma, opts)
    }
}

fn ascent(f: &dyn ConvexOracle, model: &NoiseModel, gamma: f64, opts: &CcpOptions) -> Result<ScalarBound> {
    let mut z = model.mean();
    let mut history: Vec<ScalarBoundIterate> = Vec::new();
    let mut status = CcpStatus::StalledMaxIter;
    let mut detail = None;
    for k in 0..=opts.max_iter {
        let value = f.value(&z) - model.rate(&z)? / gamma;
        if !value.is_finite() {
            status = CcpStatus::Breakdown;
            detail = Some(format!("iterate overflowed at iteration {k}"));
            break;
        }
        history.push(ScalarBoundIterate {
            k,
            z: z.clone(),
            value,
        });
        if value > opts.breakdown_cap {
            status = CcpStatus::Breakdown;
            detail = Some(format!("bound {value} exceeds the cap at iteration {k}"));
            break;
        }
        let n = history.len();
        if n > opts.stall_window
            && (n - opts.stall_window..n).all(|i| history[i].value - history[i - 1].value < opts.eps)
        {
            status = CcpStatus::Converged;
            break;
        }
        if k == opts.max_iter {
            break;
        }
        let y: Vec<f64> = f.subgradient(&z).iter().map(|g| gamma * g).collect();
        let next = match model.cgf_grad(&y) {
            Ok(v) => v,
            Err(Error::Domain { coordinate, value, .. }) => {
                status = CcpStatus::Breakdown;
                detail = Some(format!(
                    "gamma * subgradient = {value} leaves the CGF domain at coordinate {coordinate}"
                ));
                break;
            }
            Err(e) => return Err(e),
        };
        let scale = 1.0 + z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let step = next.iter().zip(&z).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        z = next;
        if step <= 1e-15 * scale {
            // Fixed point: the next value repeats the current one.
            let value = f.value(&z) - model.rate(&z)? / gamma;
            history.push(ScalarBoundIterate { k: k + 1, z: z.clone(), value });
            status = CcpStatus::Converged;
            break;
        }
    }
    let best = history
        .iter()
        .filter(|it| it.value.is_finite())
        .max_by(|a, b| a.value.total_cmp(&b.value))
        .cloned()
        .unwrap_or_else(|| history[0].clone());
    Ok(ScalarBound {
        gamma,
        value: best.value,
        z: best.z,
        history,
        status,
        detail,
    })
}

fn newton(f: &dyn ConvexOracle, model: &NoiseModel, gamma: f64, opts: &CcpOptions) -> Result<ScalarBound> {
    let kappa = -1.0 / gamma;
    let d = model.dim();
    let pinned: Vec<bool> = model.coords().iter().map(|c| c.is_degenerate()).collect();
    let obj = |z: &[f64]| -> f64 {
        let r = model.rate(z).unwrap_or(f64::INFINITY);
        f.value(z) + kappa * r
    };
    // Stationary point of the linearization at the mean; exact for affine f.
    let mean = model.mean();
    let y: Vec<f64> = f.subgradient(&mean).iter().map(|g| gamma * g).collect();
    let mut z = match model.cgf_grad(&y) {
        Ok(v) if obj(&v).is_finite() && obj(&v) <= obj(&mean) => v,
        _ => mean,
    };
    let mut val = obj(&z);
    let mut history = vec![ScalarBoundIterate {
        k: 0,
        z: z.clone(),
        value: val,
    }];
    let mut status = CcpStatus::StalledMaxIter;
    let mut detail = None;

    for k in 1..=opts.max_iter {
        let g = f.subgradient(&z);
        let hf = f.hessian(&z).unwrap_or_else(|| numeric_hessian(f, &z));
        let mut grad = DVector::zeros(d);
        let mut hess = DMatrix::zeros(d, d);
        for i in 0..d {
            if pinned[i] {
                hess[(i, i)] = 1.0;
                continue;
            }
            let c = &model.coords()[i];
            let (Some(rg), Some(rh)) = (c.rate_grad(z[i]), c.rate_hess(z[i])) else {
                status = CcpStatus::Breakdown;
                detail = Some(format!("iterate left the rate domain at coordinate {i}"));
                break;
            };
            grad[i] = g[i] + kappa * rg;
            for j in 0..d {
                if !pinned[j] {
                    hess[(i, j)] = hf[(i, j)];
                }
            }
            hess[(i, i)] += kappa * rh;
        }
        if status == CcpStatus::Breakdown {
            break;
        }
        let dir = match hess.clone().cholesky() {
            Some(ch) => -ch.solve(&grad),
            None => -grad.clone(),
        };
        let decrement = -grad.dot(&dir);
        if decrement <= 1e-20 * (1.0 + val.abs()) {
            status = CcpStatus::Converged;
            break;
        }
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-12 {
            let cand: Vec<f64> = z.iter().zip(dir.iter()).map(|(a, b)| a + t * b).collect();
            let v = obj(&cand);
            if v.is_finite() && v <= val - 1e-4 * t * decrement {
                accepted = Some((cand, v));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, v)) = accepted else {
            status = CcpStatus::Converged;
            break;
        };
        let dec = val - v;
        z = cand;
        val = v;
        history.push(ScalarBoundIterate {
            k,
            z: z.clone(),
            value: val,
        });
        if val < -opts.breakdown_cap || z.iter().any(|v| v.abs() > opts.breakdown_cap) {
            status = CcpStatus::Breakdown;
            detail = Some(format!("objective {val} is unbounded below at iteration {k}"));
            break;
        }
        if dec < 1e-15 * (1.0 + val.abs()) {
            status = CcpStatus::Converged;
            break;
        }
    }
    Ok(ScalarBound {
        gamma,
        value: val,
        z,
        history,
        status,
        detail,
    })
}

fn numeric_hessian(f: &dyn ConvexOracle, z: &[f64]) -> DMatrix<f64> {
    let d = z.len();
    let mut h = DMatrix::zeros(d, d);
    for j in 0..d {
        let step = 1e-6 * (1.0 + z[j].abs());
        let mut zp = z.to_vec();
        let mut zm = z.to_vec();
        zp[j] += step;
        zm[j] -= step;
        let (gp, gm) = (f.subgradient(&zp), f.subgradient(&zm));
        for i in 0..d {
            h[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
        }
    }
    (&h + h.transpose()) * 0.5
}
