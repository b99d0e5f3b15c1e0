//! Linear-convex stochastic control problems.
//!
//! Dynamics `x_{t+1} = A_t x_t + B_t u_t + w_t` for `t = 0..T-1`, stage costs
//! `g_t(x_t, u_t)` and a terminal cost `g_T(x_T)`. Every cost is a convex
//! quadratic `zᵀ Q z + qᵀ z + r` restricted to a polyhedron `F z ≤ h`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{NoiseModel, ScalarNoise};

/// Most negative eigenvalue accepted for a PSD cost matrix.
pub const PSD_TOL: f64 = -1e-10;
/// Constraint violation tolerated when evaluating a realized cost.
pub const FEASIBILITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct StageCost {
    pub quad: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub const_off: f64,
    pub ineq_f: DMatrix<f64>,
    pub ineq_h: DVector<f64>,
}

impl StageCost {
    pub fn new(
        quad: DMatrix<f64>,
        lin: DVector<f64>,
        const_off: f64,
        ineq_f: DMatrix<f64>,
        ineq_h: DVector<f64>,
    ) -> Result<Self> {
        let s = StageCost {
            quad,
            lin,
            const_off,
            ineq_f,
            ineq_h,
        };
        s.check(s.dim(), None)?;
        Ok(s)
    }

    /// Unconstrained `zᵀ Q z`.
    pub fn quadratic(quad: DMatrix<f64>) -> Result<Self> {
        let d = quad.nrows();
        Self::new(quad, DVector::zeros(d), 0.0, DMatrix::zeros(0, d), DVector::zeros(0))
    }

    pub fn zero(dim: usize) -> Self {
        StageCost {
            quad: DMatrix::zeros(dim, dim),
            lin: DVector::zeros(dim),
            const_off: 0.0,
            ineq_f: DMatrix::zeros(0, dim),
            ineq_h: DVector::zeros(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.quad.nrows()
    }

    fn check(&self, dim: usize, period: Option<usize>) -> Result<()> {
        let err = |msg: String| Err(Error::problem(period, msg));
        if self.quad.nrows() != dim || self.quad.ncols() != dim {
            return err(format!(
                "quad must be {dim}x{dim}, found {}x{}",
                self.quad.nrows(),
                self.quad.ncols()
            ));
        }
        if self.lin.len() != dim {
            return err(format!("lin must have length {dim}, found {}", self.lin.len()));
        }
        if self.ineq_f.ncols() != dim {
            return err(format!("ineq_F must have {dim} columns, found {}", self.ineq_f.ncols()));
        }
        if self.ineq_f.nrows() != self.ineq_h.len() {
            return err(format!(
                "ineq_F has {} rows but ineq_h has length {}",
                self.ineq_f.nrows(),
                self.ineq_h.len()
            ));
        }
        let finite = self.quad.iter().chain(self.lin.iter()).chain(self.ineq_f.iter()).chain(self.ineq_h.iter()).all(|v| v.is_finite())
            && self.const_off.is_finite();
        if !finite {
            return err("stage cost data must be finite".into());
        }
        let scale = 1.0 + self.quad.amax();
        if (&self.quad - self.quad.transpose()).amax() > 1e-12 * scale {
            return err("quad is not symmetric".into());
        }
        if dim > 0 {
            let min_eig = SymmetricEigen::new(self.quad.clone()).eigenvalues.min();
            if min_eig < PSD_TOL {
                return err(format!("quad is not PSD (eigenvalue {min_eig})"));
            }
        }
        Ok(())
    }

    /// Cost at `z`, or `+inf` if `z` violates the polyhedron by more than
    /// [`FEASIBILITY_TOL`] (relative to `1 + |h_i|`).
    pub fn eval(&self, z: &DVector<f64>) -> f64 {
        let fz = &self.ineq_f * z;
        for (v, h) in fz.iter().zip(self.ineq_h.iter()) {
            if v - h > FEASIBILITY_TOL * (1.0 + h.abs()) {
                return f64::INFINITY;
            }
        }
        z.dot(&(&self.quad * z)) + self.lin.dot(z) + self.const_off
    }
}

#[derive(Debug, Clone)]
pub struct ControlProblem {
    n: usize,
    m: usize,
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    x_init: DVector<f64>,
    stage: Vec<StageCost>,
    terminal: StageCost,
    noise: Vec<NoiseModel>,
}

impl ControlProblem {
    /// Validates every period eagerly; errors name the offending period.
    pub fn new(
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        x_init: DVector<f64>,
        stage: Vec<StageCost>,
        terminal: StageCost,
        noise: Vec<NoiseModel>,
    ) -> Result<Self> {
        let horizon = a.len();
        if horizon == 0 {
            return Err(Error::problem(None, "horizon must be at least one period"));
        }
        for (what, len) in [("B", b.len()), ("stage", stage.len()), ("noise", noise.len())] {
            if len != horizon {
                return Err(Error::problem(
                    None,
                    format!("{what} has {len} periods, A has {horizon}"),
                ));
            }
        }
        let n = x_init.len();
        if n == 0 {
            return Err(Error::problem(None, "state dimension must be positive"));
        }
        let m = b[0].ncols();
        for t in 0..horizon {
            let p = Some(t);
            if a[t].shape() != (n, n) {
                return Err(Error::problem(
                    p,
                    format!("A must be {n}x{n}, found {}x{}", a[t].nrows(), a[t].ncols()),
                ));
            }
            if b[t].shape() != (n, m) {
                return Err(Error::problem(
                    p,
                    format!("B must be {n}x{m}, found {}x{}", b[t].nrows(), b[t].ncols()),
                ));
            }
            if a[t].iter().chain(b[t].iter()).any(|v| !v.is_finite()) {
                return Err(Error::problem(p, "dynamics must be finite"));
            }
            stage[t].check(n + m, p)?;
            if noise[t].dim() != n {
                return Err(Error::problem(
                    p,
                    format!("noise has dimension {}, state has {n}", noise[t].dim()),
                ));
            }
            for c in noise[t].coords() {
                c.validate().map_err(|e| Error::problem(p, e.to_string()))?;
            }
        }
        terminal.check(n, Some(horizon))?;
        if x_init.iter().any(|v| !v.is_finite()) {
            return Err(Error::problem(None, "x_init must be finite"));
        }
        Ok(ControlProblem {
            n,
            m,
            a,
            b,
            x_init,
            stage,
            terminal,
            noise,
        })
    }

    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn a(&self, t: usize) -> &DMatrix<f64> {
        &self.a[t]
    }

    pub fn b(&self, t: usize) -> &DMatrix<f64> {
        &self.b[t]
    }

    pub fn x_init(&self) -> &DVector<f64> {
        &self.x_init
    }

    pub fn stage(&self, t: usize) -> &StageCost {
        &self.stage[t]
    }

    pub fn terminal(&self) -> &StageCost {
        &self.terminal
    }

    pub fn noise(&self, t: usize) -> &NoiseModel {
        &self.noise[t]
    }

    /// Length `n T` of a stacked noise path.
    pub fn noise_len(&self) -> usize {
        self.n * self.horizon()
    }

    /// Stacked per-period noise means.
    pub fn noise_mean(&self) -> Vec<f64> {
        self.noise.iter().flat_map(|m| m.mean()).collect()
    }

    /// Coordinate-wise view of the stacked noise.
    pub fn noise_coord(&self, k: usize) -> &ScalarNoise {
        &self.noise[k / self.n].coords()[k % self.n]
    }

    /// `sum_t rho_t(w_t)` for a stacked path.
    pub fn rate(&self, w: &[f64]) -> Result<f64> {
        self.check_noise_len(w)?;
        let mut total = 0.0;
        for (t, chunk) in w.chunks(self.n).enumerate() {
            total += self.noise[t].rate(chunk)?;
        }
        Ok(total)
    }

    /// Stacked `∇c_t(y_t)`.
    pub fn cgf_grad(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_noise_len(y)?;
        let mut out = Vec::with_capacity(y.len());
        for (t, chunk) in y.chunks(self.n).enumerate() {
            let g = self.noise[t].cgf_grad(chunk).map_err(|e| match e {
                Error::Domain {
                    coordinate,
                    value,
                    detail,
                } => Error::Domain {
                    coordinate: t * self.n + coordinate,
                    value,
                    detail: format!("{detail} (period {t})"),
                },
                other => other,
            })?;
            out.extend(g);
        }
        Ok(out)
    }

    pub(crate) fn check_noise_len(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.noise_len() {
            return Err(Error::dim("stacked noise vector", self.noise_len(), w.len()));
        }
        Ok(())
    }

    /// The problem restricted to periods `t..T`, starting from the same
    /// initial state.
    pub fn tail(&self, t: usize) -> Result<ControlProblem> {
        if t >= self.horizon() {
            return Err(Error::Argument(format!(
                "tail start {t} must be below the horizon {}",
                self.horizon()
            )));
        }
        Ok(ControlProblem {
            n: self.n,
            m: self.m,
            a: self.a[t..].to_vec(),
            b: self.b[t..].to_vec(),
            x_init: self.x_init.clone(),
            stage: self.stage[t..].to_vec(),
            terminal: self.terminal.clone(),
            noise: self.noise[t..].to_vec(),
        })
    }

    pub fn with_initial_state(&self, x: DVector<f64>) -> Result<ControlProblem> {
        if x.len() != self.n {
            return Err(Error::dim("initial state", self.n, x.len()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("initial state must be finite".into()));
        }
        let mut p = self.clone();
        p.x_init = x;
        Ok(p)
    }

    /// `g_T(x_T) + sum_t g_t(x_t, u_t)`.
    pub fn trajectory_cost(&self, x: &[DVector<f64>], u: &[DVector<f64>]) -> Result<f64> {
        let horizon = self.horizon();
        if x.len() != horizon + 1 {
            return Err(Error::dim("state trajectory", horizon + 1, x.len()));
        }
        if u.len() != horizon {
            return Err(Error::dim("input trajectory", horizon, u.len()));
        }
        let mut total = self.terminal.eval(&x[horizon]);
        for t in 0..horizon {
            let z = DVector::from_iterator(self.n + self.m, x[t].iter().chain(u[t].iter()).copied());
            total += self.stage[t].eval(&z);
        }
        Ok(total)
    }
}

/// Time-invariant LQR problem with stage cost `xᵀQx + uᵀRu`, terminal cost
/// `xᵀQx` and Gaussian noise `N(0, Sigma)`. `Sigma` must be diagonal.
pub fn lqr_problem(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    horizon: usize,
    x_init: &DVector<f64>,
) -> Result<ControlProblem> {
    let n = a.nrows();
    let m = b.ncols();
    if sigma.shape() != (n, n) {
        return Err(Error::problem(
            None,
            format!("Sigma must be {n}x{n}, found {}x{}", sigma.nrows(), sigma.ncols()),
        ));
    }
    for i in 0..n {
        for j in 0..n {
            if i != j && sigma[(i, j)] != 0.0 {
                return Err(Error::Argument(
                    "unsupported parameter: only diagonal Sigma is supported".into(),
                ));
            }
        }
    }
    if q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::problem(None, "Q must be n x n and R must be m x m"));
    }
    let coords = (0..n)
        .map(|i| {
            if !(sigma[(i, i)] > 0.0) {
                return Err(Error::Argument(format!(
                    "Sigma must be positive definite, diagonal entry {i} is {}",
                    sigma[(i, i)]
                )));
            }
            ScalarNoise::gaussian(0.0, sigma[(i, i)])
        })
        .collect::<Result<Vec<_>>>()?;
    let noise = NoiseModel::new(coords)?;
    let mut quad = DMatrix::zeros(n + m, n + m);
    quad.view_mut((0, 0), (n, n)).copy_from(q);
    quad.view_mut((n, n), (m, m)).copy_from(r);
    let stage = StageCost::quadratic(quad).map_err(|e| relabel(e, None))?;
    let terminal = StageCost::quadratic(q.clone())?;
    ControlProblem::new(
        vec![a.clone(); horizon],
        vec![b.clone(); horizon],
        x_init.clone(),
        vec![stage; horizon],
        terminal,
        vec![noise; horizon],
    )
}

fn relabel(e: Error, period: Option<usize>) -> Error {
    match e {
        Error::Problem { message, .. } => Error::Problem { period, message },
        other => other,
    }
}

/// Baseline load profile of the battery example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BaselineLoad {
    /// 24 values at 00:00, 01:00, ..., 23:00, interpolated linearly and
    /// repeated daily.
    Hourly(Vec<f64>),
    /// One value per period.
    PerPeriod(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatteryParams {
    #[serde(default = "defaults::horizon")]
    pub horizon: usize,
    /// Period length in hours.
    #[serde(default = "defaults::step_hours")]
    pub step_hours: f64,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    /// Standard deviation of the load noise in kW.
    #[serde(default = "defaults::sigma")]
    pub sigma: f64,
    #[serde(default = "defaults::q_init")]
    pub q_init: f64,
    #[serde(default = "defaults::q_max")]
    pub q_max: f64,
    /// Initial load in kW; defaults to the baseline at `t = 0`.
    #[serde(default)]
    pub p_load_init: Option<f64>,
    /// Grid price per period in $/kWh; defaults to the time-of-use schedule.
    #[serde(default)]
    pub prices: Option<Vec<f64>>,
    pub baseline: BaselineLoad,
}

mod defaults {
    pub fn horizon() -> usize {
        300
    }
    pub fn step_hours() -> f64 {
        0.16
    }
    pub fn alpha() -> f64 {
        0.5
    }
    pub fn sigma() -> f64 {
        0.2
    }
    pub fn q_init() -> f64 {
        2.5
    }
    pub fn q_max() -> f64 {
        5.0
    }
}

impl BatteryParams {
    pub fn with_baseline(baseline: BaselineLoad) -> Self {
        BatteryParams {
            horizon: defaults::horizon(),
            step_hours: defaults::step_hours(),
            alpha: defaults::alpha(),
            sigma: defaults::sigma(),
            q_init: defaults::q_init(),
            q_max: defaults::q_max(),
            p_load_init: None,
            prices: None,
            baseline,
        }
    }

    pub fn prices(&self) -> Vec<f64> {
        match &self.prices {
            Some(p) => p.clone(),
            None => time_of_use_prices(self.horizon, self.step_hours),
        }
    }

    pub fn baseline_values(&self) -> Result<Vec<f64>> {
        match &self.baseline {
            BaselineLoad::PerPeriod(v) => {
                if v.len() != self.horizon {
                    return Err(Error::dim("baseline per_period", self.horizon, v.len()));
                }
                Ok(v.clone())
            }
            BaselineLoad::Hourly(v) => {
                if v.len() != 24 {
                    return Err(Error::dim("baseline hourly", 24, v.len()));
                }
                Ok((0..self.horizon)
                    .map(|t| interpolate_daily(v, t as f64 * self.step_hours))
                    .collect())
            }
        }
    }
}

fn interpolate_daily(hourly: &[f64], hours: f64) -> f64 {
    let tau = hours.rem_euclid(24.0);
    let k = (tau.floor() as usize).min(23);
    let frac = tau - k as f64;
    hourly[k] * (1.0 - frac) + hourly[(k + 1) % 24] * frac
}

/// Grid price in $/kWh at hour of day `hour`: 0.15 from 21:00 to 06:00,
/// 0.40 from 13:00 to 19:00 and 0.25 otherwise.
pub fn time_of_use_price(hour: f64) -> f64 {
    let h = hour.rem_euclid(24.0);
    if h >= 21.0 || h < 6.0 {
        0.15
    } else if (13.0..19.0).contains(&h) {
        0.40
    } else {
        0.25
    }
}

/// Prices for periods starting at midnight.
pub fn time_of_use_prices(horizon: usize, step_hours: f64) -> Vec<f64> {
    (0..horizon)
        .map(|t| time_of_use_price(t as f64 * step_hours + 1e-9))
        .collect()
}

/// Battery with state `(q, p_load)` and input `(p_batt, p_grid)`.
///
/// Period `t` requires `0 ≤ q_{t+1} ≤ q_max`, `p_load ≤ p_batt + p_grid` and
/// `p_grid ≥ 0`, and costs `h c_t p_grid`. The load noise has mean
/// `(1 - α) p_base_t`; the charge coordinate is noiseless.
pub fn battery_problem(params: &BatteryParams) -> Result<ControlProblem> {
    let p = params;
    let arg = |msg: String| Err(Error::Argument(msg));
    if p.horizon == 0 {
        return arg("battery horizon must be positive".into());
    }
    if !(p.alpha > 0.0 && p.alpha < 1.0) {
        return arg(format!("alpha must lie in (0, 1), got {}", p.alpha));
    }
    if !(p.q_max > 0.0) || !p.q_max.is_finite() {
        return arg(format!("q_max must be positive, got {}", p.q_max));
    }
    if !(0.0..=p.q_max).contains(&p.q_init) {
        return arg(format!("q_init must lie in [0, q_max], got {}", p.q_init));
    }
    if !(p.step_hours > 0.0) || !p.step_hours.is_finite() {
        return arg(format!("step_hours must be positive, got {}", p.step_hours));
    }
    if !(p.sigma >= 0.0) || !p.sigma.is_finite() {
        return arg(format!("sigma must be nonnegative, got {}", p.sigma));
    }
    let prices = p.prices();
    if prices.len() != p.horizon {
        return Err(Error::dim("battery prices", p.horizon, prices.len()));
    }
    if let Some(t) = prices.iter().position(|c| !c.is_finite() || *c < 0.0) {
        return Err(Error::problem(Some(t), "prices must be finite and nonnegative"));
    }
    let base = p.baseline_values()?;
    if let Some(t) = base.iter().position(|v| !v.is_finite()) {
        return Err(Error::problem(Some(t), "baseline load must be finite"));
    }
    let h = p.step_hours;
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, p.alpha]);
    let b = DMatrix::from_row_slice(2, 2, &[-h, 0.0, 0.0, 0.0]);
    // z = (q, p_load, p_batt, p_grid)
    let f = DMatrix::from_row_slice(
        4,
        4,
        &[
            1.0, 0.0, -h, 0.0, //
            -1.0, 0.0, h, 0.0, //
            0.0, 1.0, -1.0, -1.0, //
            0.0, 0.0, 0.0, -1.0,
        ],
    );
    let hv = DVector::from_vec(vec![p.q_max, 0.0, 0.0, 0.0]);
    let mut stage = Vec::with_capacity(p.horizon);
    let mut noise = Vec::with_capacity(p.horizon);
    for t in 0..p.horizon {
        let lin = DVector::from_vec(vec![0.0, 0.0, 0.0, h * prices[t]]);
        stage.push(StageCost {
            quad: DMatrix::zeros(4, 4),
            lin,
            const_off: 0.0,
            ineq_f: f.clone(),
            ineq_h: hv.clone(),
        });
        let load = ScalarNoise::gaussian_or_constant((1.0 - p.alpha) * base[t], p.sigma * p.sigma)
            .map_err(|e| Error::problem(Some(t), e.to_string()))?;
        noise.push(NoiseModel::new(vec![ScalarNoise::Constant { value: 0.0 }, load])?);
    }
    let p_load0 = p.p_load_init.unwrap_or(base[0]);
    ControlProblem::new(
        vec![a; p.horizon],
        vec![b; p.horizon],
        DVector::from_vec(vec![p.q_init, p_load0]),
        stage,
        StageCost::zero(2),
        noise,
    )
}

/// Row-major matrix as nested lists.
pub type MatrixRows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageCostConfig {
    /// Defaults to zero.
    #[serde(default)]
    pub quad: Option<MatrixRows>,
    #[serde(default)]
    pub lin: Option<Vec<f64>>,
    #[serde(default)]
    pub const_off: f64,
    #[serde(default)]
    pub ineq_f: Option<MatrixRows>,
    #[serde(default)]
    pub ineq_h: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeriodConfig {
    pub a: MatrixRows,
    pub b: MatrixRows,
    pub stage: StageCostConfig,
    pub noise: Vec<ScalarNoise>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineProblem {
    pub x_init: Vec<f64>,
    pub periods: Vec<PeriodConfig>,
    #[serde(default)]
    pub terminal: Option<StageCostConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqrParams {
    pub a: MatrixRows,
    pub b: MatrixRows,
    pub q: MatrixRows,
    pub r: MatrixRows,
    pub sigma: MatrixRows,
    pub horizon: usize,
    pub x_init: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "builder", rename_all = "lowercase")]
pub enum ProblemConfig {
    Inline(InlineProblem),
    Lqr(LqrParams),
    Battery(BatteryParams),
}

fn matrix(rows: &MatrixRows, what: &str, period: Option<usize>) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if let Some(i) = rows.iter().position(|r| r.len() != nc) {
        return Err(Error::problem(
            period,
            format!("{what}: row {i} has {} entries, row 0 has {nc}", rows[i].len()),
        ));
    }
    Ok(DMatrix::from_row_iterator(nr, nc, rows.iter().flatten().copied()))
}

fn stage_from_config(c: &StageCostConfig, dim: usize, period: Option<usize>) -> Result<StageCost> {
    let quad = match &c.quad {
        Some(q) => matrix(q, "quad", period)?,
        None => DMatrix::zeros(dim, dim),
    };
    let lin = c.lin.clone().map_or_else(|| DVector::zeros(dim), DVector::from_vec);
    let ineq_f = match &c.ineq_f {
        Some(f) if !f.is_empty() => matrix(f, "ineq_F", period)?,
        _ => DMatrix::zeros(0, dim),
    };
    let ineq_h = DVector::from_vec(c.ineq_h.clone().unwrap_or_default());
    let s = StageCost {
        quad,
        lin,
        const_off: c.const_off,
        ineq_f,
        ineq_h,
    };
    s.check(dim, period)?;
    Ok(s)
}

/// Builds and validates a problem from its configuration.
pub fn build_problem(config: &ProblemConfig) -> Result<ControlProblem> {
    match config {
        ProblemConfig::Battery(p) => battery_problem(p),
        ProblemConfig::Lqr(p) => {
            let x0 = DVector::from_vec(p.x_init.clone());
            lqr_problem(
                &matrix(&p.a, "A", None)?,
                &matrix(&p.b, "B", None)?,
                &matrix(&p.q, "Q", None)?,
                &matrix(&p.r, "R", None)?,
                &matrix(&p.sigma, "Sigma", None)?,
                p.horizon,
                &x0,
            )
        }
        ProblemConfig::Inline(p) => {
            let n = p.x_init.len();
            let m = p.periods.first().and_then(|pc| pc.b.first()).map_or(0, Vec::len);
            let mut a = Vec::new();
            let mut b = Vec::new();
            let mut stage = Vec::new();
            let mut noise = Vec::new();
            for (t, pc) in p.periods.iter().enumerate() {
                let at = Some(t);
                a.push(matrix(&pc.a, "A", at)?);
                b.push(matrix(&pc.b, "B", at)?);
                stage.push(stage_from_config(&pc.stage, n + m, at)?);
                noise.push(
                    NoiseModel::new(pc.noise.clone()).map_err(|e| Error::problem(at, e.to_string()))?,
                );
            }
            let terminal = match &p.terminal {
                Some(c) => stage_from_config(c, n, Some(p.periods.len()))?,
                None => StageCost::zero(n),
            };
            ControlProblem::new(a, b, DVector::from_vec(p.x_init.clone()), stage, terminal, noise)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_inline(a0: MatrixRows, quad: MatrixRows) -> ProblemConfig {
        let period = |a: MatrixRows| PeriodConfig {
            a,
            b: vec![vec![1.0]],
            stage: StageCostConfig {
                quad: Some(quad.clone()),
                lin: None,
                const_off: 0.0,
                ineq_f: None,
                ineq_h: None,
            },
            noise: vec![ScalarNoise::Gaussian {
                mean: 0.0,
                variance: 1.0,
            }],
        };
        ProblemConfig::Inline(InlineProblem {
            x_init: vec![1.0],
            periods: vec![period(a0), period(vec![vec![1.0]])],
            terminal: None,
        })
    }

    #[test]
    fn valid_two_period_config() {
        let p = build_problem(&scalar_inline(vec![vec![1.0]], vec![vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
        assert_eq!(p.horizon(), 2);
        assert_eq!((p.state_dim(), p.input_dim()), (1, 1));
    }

    #[test]
    fn wrong_shape_names_period_zero() {
        let err = build_problem(&scalar_inline(vec![vec![1.0, 0.0]], vec![vec![1.0, 0.0], vec![0.0, 1.0]]))
            .unwrap_err();
        assert!(matches!(err, Error::Problem { period: Some(0), .. }), "{err}");
        assert!(err.to_string().contains("t=0"));
    }

    #[test]
    fn indefinite_quad_is_rejected() {
        let err = build_problem(&scalar_inline(vec![vec![1.0]], vec![vec![1.0, 0.0], vec![0.0, -0.1]]))
            .unwrap_err();
        assert!(err.to_string().contains("PSD"), "{err}");
    }

    #[test]
    fn lqr_rejects_correlated_noise() {
        let i = DMatrix::identity(2, 2);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let err = lqr_problem(&i, &i, &i, &i, &s, 3, &DVector::zeros(2)).unwrap_err();
        assert!(err.to_string().contains("unsupported"));
    }

    #[test]
    fn tail_composes() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let p = lqr_problem(&one, &one, &one, &one, &one, 6, &DVector::from_element(1, 1.0)).unwrap();
        let a = p.tail(2).unwrap().tail(3).unwrap();
        let b = p.tail(5).unwrap();
        assert_eq!(a.horizon(), 1);
        assert_eq!(a.horizon(), b.horizon());
        assert_eq!(a.stage(0), b.stage(0));
        assert!(p.tail(6).is_err());
    }

    #[test]
    fn time_of_use_schedule() {
        assert_eq!(time_of_use_price(0.0), 0.15);
        assert_eq!(time_of_use_price(5.99), 0.15);
        assert_eq!(time_of_use_price(6.0), 0.25);
        assert_eq!(time_of_use_price(13.0), 0.40);
        assert_eq!(time_of_use_price(18.99), 0.40);
        assert_eq!(time_of_use_price(19.0), 0.25);
        assert_eq!(time_of_use_price(21.0), 0.15);
        assert_eq!(time_of_use_price(24.0 + 14.0), 0.40);
        let prices = time_of_use_prices(300, 0.16);
        assert_eq!(prices.len(), 300);
        // 48 hours of 9.6 minute periods.
        assert!((300.0 * 0.16 - 48.0f64).abs() < 1e-12);
    }

    #[test]
    fn battery_structure_and_noise() {
        let mut params = BatteryParams::with_baseline(BaselineLoad::Hourly(vec![1.0; 24]));
        params.horizon = 2;
        let p = battery_problem(&params).unwrap();
        assert_eq!((p.state_dim(), p.input_dim()), (2, 2));
        assert_eq!(p.stage(0).ineq_f.nrows(), 4);
        assert!(p.noise(0).coords()[0].is_degenerate());
        assert_eq!(p.noise_mean(), vec![0.0, 0.5, 0.0, 0.5]);
        params.sigma = 0.0;
        let p = battery_problem(&params).unwrap();
        assert!(p.noise(1).coords().iter().all(ScalarNoise::is_degenerate));
        params.alpha = 1.0;
        assert!(battery_problem(&params).is_err());
    }

    #[test]
    fn hourly_baseline_interpolates_and_wraps() {
        let mut v = vec![0.0; 24];
        v[23] = 2.0;
        assert_eq!(interpolate_daily(&v, 23.5), 1.0);
        assert_eq!(interpolate_daily(&v, 47.0), 2.0);
        assert_eq!(interpolate_daily(&v, 22.5), 1.0);
    }

    #[test]
    fn infeasible_stage_point_costs_infinity() {
        let s = StageCost::new(
            DMatrix::zeros(1, 1),
            DVector::from_element(1, 1.0),
            0.0,
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 0.0),
        )
        .unwrap();
        assert_eq!(s.eval(&DVector::from_element(1, -2.0)), -2.0);
        assert_eq!(s.eval(&DVector::from_element(1, 1.0)), f64::INFINITY);
    }
}
