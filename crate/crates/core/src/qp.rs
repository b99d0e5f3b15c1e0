//! Convex quadratic programs and a primal-dual interior-point solver.
//!
//! The problem form is
//!
//! ```text
//! minimize    ½ xᵀ P x + cᵀ x + offset
//! subject to  A x = b
//!             F x ≤ h
//! ```
//!
//! with Lagrangian `½xᵀPx + cᵀx + yᵀ(Ax − b) + zᵀ(Fx − h)`, `z ≥ 0`. Under this
//! convention the sensitivity of the optimal value to `b` is `−y`.
//!
//! The solver is Mehrotra's predictor-corrector method. Each Newton system is
//! reduced to the quasi-definite matrix `[P + Fᵀ W F, Aᵀ; A, 0]`, ordered by
//! reverse Cuthill-McKee and factored in band storage. Static and dynamic
//! regularization keep the factorization well defined; iterative refinement
//! against the unregularized system restores accuracy.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{bandwidth, reverse_cuthill_mckee, BandLdl, BandMatrix, SparseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpData {
    /// Symmetric PSD Hessian `P` stored in full.
    pub quad: SparseMatrix,
    pub lin: Vec<f64>,
    pub offset: f64,
    pub eq_a: SparseMatrix,
    pub eq_b: Vec<f64>,
    pub in_f: SparseMatrix,
    pub in_h: Vec<f64>,
}

impl QpData {
    pub fn num_vars(&self) -> usize {
        self.lin.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_vars();
        let check = |what: &str, expected: usize, found: usize| {
            if expected != found {
                Err(Error::dim(what, expected, found))
            } else {
                Ok(())
            }
        };
        check("quad rows", n, self.quad.nrows())?;
        check("quad cols", n, self.quad.ncols())?;
        check("eq_A cols", n, self.eq_a.ncols())?;
        check("eq_b length", self.eq_a.nrows(), self.eq_b.len())?;
        check("in_F cols", n, self.in_f.ncols())?;
        check("in_h length", self.in_f.nrows(), self.in_h.len())?;
        for (i, j, v) in self.quad.triplets() {
            if (self.quad.get(j, i) - v).abs() > 1e-12 * (1.0 + v.abs()) {
                return Err(Error::Argument(format!("quad is not symmetric at ({i}, {j})")));
            }
        }
        let finite = self.lin.iter().chain(&self.eq_b).chain(&self.in_h).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Argument("QP vectors must be finite".into()));
        }
        Ok(())
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut px = vec![0.0; x.len()];
        self.quad.mul_vec(x, &mut px);
        0.5 * dot(x, &px) + dot(&self.lin, x) + self.offset
    }

    /// Writes every block as `i j value` triplets (1-based) under a header
    /// line `% block <name> <rows> <cols> <nnz>`.
    pub fn write_triplets<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        fn mat<W: Write>(out: &mut W, name: &str, m: &SparseMatrix) -> std::io::Result<()> {
            writeln!(out, "% block {name} {} {} {}", m.nrows(), m.ncols(), m.nnz())?;
            for (i, j, v) in m.triplets() {
                writeln!(out, "{} {} {}", i + 1, j + 1, v)?;
            }
            Ok(())
        }
        fn vec<W: Write>(out: &mut W, name: &str, v: &[f64]) -> std::io::Result<()> {
            let nnz = v.iter().filter(|x| **x != 0.0).count();
            writeln!(out, "% block {name} {} 1 {nnz}", v.len())?;
            for (i, x) in v.iter().enumerate().filter(|(_, x)| **x != 0.0) {
                writeln!(out, "{} 1 {}", i + 1, x)?;
            }
            Ok(())
        }
        mat(out, "quad", &self.quad)?;
        vec(out, "lin", &self.lin)?;
        writeln!(out, "% scalar offset {}", self.offset)?;
        mat(out, "eq_A", &self.eq_a)?;
        vec(out, "eq_b", &self.eq_b)?;
        mat(out, "in_F", &self.in_f)?;
        vec(out, "in_h", &self.in_h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KktResiduals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.gap)
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Equality duals.
    pub y: Vec<f64>,
    /// Inequality duals, nonnegative.
    pub z: Vec<f64>,
    pub s: Vec<f64>,
    pub status: SolveStatus,
    pub objective: f64,
    pub iterations: usize,
    pub residuals: KktResiduals,
    /// Farkas direction `(y, z)` for infeasible problems, or a primal ray for
    /// unbounded ones.
    pub certificate: Option<Vec<f64>>,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

const STATIC_REG: f64 = 1e-9;
const DYN_REG_EPS: f64 = 1e-13;
const DYN_REG_DELTA: f64 = 1e-7;
const REFINE_STEPS: usize = 4;
const STEP_FRACTION: f64 = 0.99;
const INFEASIBILITY_TOL: f64 = 1e-8;

/// Reduced KKT system with a fixed sparsity pattern and ordering.
struct Kkt<'a> {
    qp: &'a QpData,
    nv: usize,
    perm: Vec<usize>,
    signs: Vec<f64>,
    /// `P + δI` and `A`, `-δI` in permuted band form.
    base: BandMatrix,
    /// `(row of F, slot, F_ra F_rb)` contributions of `FᵀWF` to the diagonal
    /// and to the lower band.
    diag_updates: Vec<(usize, usize, f64)>,
    lower_updates: Vec<(usize, usize, f64)>,
    band: BandMatrix,
    factor: BandLdl,
    w: Vec<f64>,
    // scratch, padded for the band solver
    buf: Vec<f64>,
    tmp_f: Vec<f64>,
}

impl<'a> Kkt<'a> {
    fn new(qp: &'a QpData) -> Self {
        let nv = qp.num_vars();
        let np = qp.eq_a.nrows();
        let n = nv + np;
        let mut adj = vec![Vec::new(); n];
        for (i, j, _) in qp.quad.triplets() {
            if i != j {
                adj[i].push(j);
            }
        }
        for r in 0..qp.in_f.nrows() {
            let (cols, _) = qp.in_f.row(r);
            for (a, &ca) in cols.iter().enumerate() {
                for &cb in &cols[..a] {
                    adj[ca].push(cb);
                    adj[cb].push(ca);
                }
            }
        }
        for (r, j, _) in qp.eq_a.triplets() {
            adj[nv + r].push(j);
            adj[j].push(nv + r);
        }
        for a in adj.iter_mut() {
            a.sort_unstable();
            a.dedup();
        }
        let perm = reverse_cuthill_mckee(&adj);
        let bw = bandwidth(&adj, &perm);
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let signs = perm.iter().map(|&old| if old < nv { 1.0 } else { -1.0 }).collect();
        let diag_scale = (0..nv).map(|i| qp.quad.get(i, i).abs()).fold(1.0, f64::max);
        let reg = STATIC_REG * diag_scale;

        let mut base = BandMatrix::zeros(n, bw);
        for (i, j, v) in qp.quad.triplets() {
            if i >= j {
                base.add(inv[i], inv[j], v);
            }
        }
        for (r, j, v) in qp.eq_a.triplets() {
            base.add(inv[nv + r], inv[j], v);
        }
        for i in 0..nv {
            base.add(inv[i], inv[i], reg);
        }
        for r in 0..np {
            base.add(inv[nv + r], inv[nv + r], -reg);
        }
        let mut diag_updates = Vec::new();
        let mut lower_updates = Vec::new();
        for r in 0..qp.in_f.nrows() {
            let (cols, vals) = qp.in_f.row(r);
            for a in 0..cols.len() {
                for b in 0..=a {
                    let (i, j) = (inv[cols[a]], inv[cols[b]]);
                    let c = vals[a] * vals[b];
                    if i == j {
                        diag_updates.push((r, i, c));
                    } else {
                        let (i, j) = if i > j { (i, j) } else { (j, i) };
                        lower_updates.push((r, base.slot(i, j), c));
                    }
                }
            }
        }
        Kkt {
            qp,
            nv,
            perm,
            signs,
            band: base.clone(),
            base,
            diag_updates,
            lower_updates,
            factor: BandLdl::new(n, bw),
            w: vec![1.0; qp.in_f.nrows()],
            buf: vec![0.0; n + bw],
            tmp_f: vec![0.0; qp.in_f.nrows()],
        }
    }

    /// Assembles and factors `[P + FᵀWF + δI, Aᵀ; A, −δI]`.
    fn factor(&mut self, w: &[f64]) {
        self.w.copy_from_slice(w);
        let band = &mut self.band;
        band.diag.copy_from_slice(&self.base.diag);
        band.lower.copy_from_slice(&self.base.lower);
        for &(r, i, c) in &self.diag_updates {
            band.diag[i] += w[r] * c;
        }
        for &(r, k, c) in &self.lower_updates {
            band.lower[k] += w[r] * c;
        }
        self.factor.refactor(band, &self.signs, DYN_REG_EPS, DYN_REG_DELTA);
    }

    /// Applies the unregularized reduced matrix.
    fn apply(&mut self, x: &[f64], out: &mut [f64]) {
        let (nv, qp) = (self.nv, self.qp);
        let (xv, xy) = x.split_at(nv);
        let (ov, oy) = out.split_at_mut(nv);
        qp.quad.mul_vec(xv, ov);
        qp.in_f.mul_vec(xv, &mut self.tmp_f);
        for (t, w) in self.tmp_f.iter_mut().zip(&self.w) {
            *t *= w;
        }
        qp.in_f.mul_t_vec_add(&self.tmp_f, ov);
        qp.eq_a.mul_t_vec_add(xy, ov);
        qp.eq_a.mul_vec(xv, oy);
    }

    fn raw_solve(&mut self, rhs: &[f64], out: &mut [f64]) {
        let pad = self.buf.len() - self.perm.len();
        let body = &mut self.buf[pad..];
        for (new, &old) in self.perm.iter().enumerate() {
            body[new] = rhs[old];
        }
        self.factor.solve_padded(&mut self.buf);
        let body = &self.buf[pad..];
        for (new, &old) in self.perm.iter().enumerate() {
            out[old] = body[new];
        }
    }

    /// Solves with up to `refine` steps of iterative refinement.
    fn solve(&mut self, rhs: &[f64], refine: usize) -> Vec<f64> {
        let n = rhs.len();
        let mut sol = vec![0.0; n];
        self.raw_solve(rhs, &mut sol);
        if refine == 0 {
            return sol;
        }
        let rhs_norm = norm_inf(rhs).max(1e-300);
        let mut res = vec![0.0; n];
        let mut corr = vec![0.0; n];
        for _ in 0..refine {
            self.apply(&sol, &mut res);
            for (r, b) in res.iter_mut().zip(rhs) {
                *r = b - *r;
            }
            if norm_inf(&res) <= 1e-12 * rhs_norm {
                break;
            }
            self.raw_solve(&res, &mut corr);
            for (s, c) in sol.iter_mut().zip(&corr) {
                *s += c;
            }
        }
        sol
    }
}

fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(f64::INFINITY, f64::min)
}

/// Solves `qp` to relative tolerance `opts.tol`.
pub fn solve_qp(qp: &QpData, opts: &SolverOptions) -> Result<QpSolution> {
    qp.validate()?;
    if !(opts.tol > 0.0) {
        return Err(Error::Argument(format!("tolerance must be positive, got {}", opts.tol)));
    }
    let nv = qp.num_vars();
    let np = qp.eq_a.nrows();
    let mi = qp.in_f.nrows();
    let mut kkt = Kkt::new(qp);

    let b_scale = 1.0 + norm_inf(&qp.eq_b);
    let h_scale = 1.0 + norm_inf(&qp.in_h);
    let c_scale = 1.0 + norm_inf(&qp.lin);

    // Initial point from the W = I system.
    kkt.factor(&vec![1.0; mi]);
    let mut rhs = vec![0.0; nv + np];
    for (r, c) in rhs.iter_mut().zip(&qp.lin) {
        *r = -c;
    }
    qp.in_f.mul_t_vec_add(&qp.in_h, &mut rhs[..nv]);
    rhs[nv..].copy_from_slice(&qp.eq_b);
    let sol = kkt.solve(&rhs, REFINE_STEPS);
    let mut x = sol[..nv].to_vec();
    let mut y = sol[nv..].to_vec();
    let mut fx = vec![0.0; mi];
    qp.in_f.mul_vec(&x, &mut fx);
    let mut s: Vec<f64> = qp.in_h.iter().zip(&fx).map(|(h, f)| h - f).collect();
    let mut z: Vec<f64> = s.iter().map(|v| -v).collect();
    if mi > 0 {
        let ap = -s.iter().cloned().fold(f64::INFINITY, f64::min);
        if ap >= 0.0 {
            s.iter_mut().for_each(|v| *v += 1.0 + ap);
        }
        let ad = -z.iter().cloned().fold(f64::INFINITY, f64::min);
        if ad >= 0.0 {
            z.iter_mut().for_each(|v| *v += 1.0 + ad);
        }
    }

    let mut r_d = vec![0.0; nv];
    let mut term = vec![0.0; nv];
    let mut r_p = vec![0.0; np];
    let mut r_g = vec![0.0; mi];
    let mut prev_x = x.clone();
    let mut status = SolveStatus::MaxIter;
    let mut residuals = KktResiduals::default();
    let mut certificate = None;
    let mut iterations = 0;

    for iter in 0..=opts.max_iter {
        iterations = iter;
        // Residuals.
        // Each residual is measured relative to the largest term in it.
        qp.quad.mul_vec(&x, &mut r_d);
        let mut d_scale = c_scale.max(1.0 + norm_inf(&r_d));
        term.fill(0.0);
        qp.eq_a.mul_t_vec_add(&y, &mut term);
        d_scale = d_scale.max(1.0 + norm_inf(&term));
        qp.in_f.mul_t_vec_add(&z, &mut term);
        d_scale = d_scale.max(1.0 + norm_inf(&term));
        for ((r, c), t) in r_d.iter_mut().zip(&qp.lin).zip(&term) {
            *r += c + t;
        }
        qp.eq_a.mul_vec(&x, &mut r_p);
        let p_scale = b_scale.max(1.0 + norm_inf(&r_p));
        for (r, b) in r_p.iter_mut().zip(&qp.eq_b) {
            *r -= b;
        }
        qp.in_f.mul_vec(&x, &mut r_g);
        let g_scale = h_scale.max(1.0 + norm_inf(&r_g));
        for ((r, si), h) in r_g.iter_mut().zip(&s).zip(&qp.in_h) {
            *r += si - h;
        }
        let mu = if mi > 0 { dot(&s, &z) / mi as f64 } else { 0.0 };
        residuals = KktResiduals {
            primal: (norm_inf(&r_p) / p_scale).max(norm_inf(&r_g) / g_scale),
            dual: norm_inf(&r_d) / d_scale,
            gap: mu,
        };
        if residuals.primal <= opts.tol && residuals.dual <= opts.tol && mu <= opts.tol {
            status = SolveStatus::Optimal;
            break;
        }
        if !x.iter().chain(&y).chain(&z).chain(&s).all(|v| v.is_finite()) {
            return Err(Error::Solver {
                status: SolveStatus::MaxIter,
                context: format!("non-finite iterate at iteration {iter}"),
            });
        }
        if iter > 0 {
            if let Some(cert) = primal_infeasibility(qp, &y, &z) {
                status = SolveStatus::Infeasible;
                certificate = Some(cert);
                break;
            }
            let dx: Vec<f64> = x.iter().zip(&prev_x).map(|(a, b)| a - b).collect();
            if let Some(ray) = dual_infeasibility(qp, &dx, &x) {
                status = SolveStatus::Unbounded;
                certificate = Some(ray);
                break;
            }
        }
        if iter == opts.max_iter {
            break;
        }

        let w: Vec<f64> = z.iter().zip(&s).map(|(zi, si)| zi / si).collect();
        kkt.factor(&w);

        // Solves the Newton system for complementarity right-hand side r_c.
        let newton = |kkt: &mut Kkt, r_c: &[f64], refine: usize| {
            let mut rhs = vec![0.0; nv + np];
            for (r, d) in rhs[..nv].iter_mut().zip(&r_d) {
                *r = -d;
            }
            let t: Vec<f64> = (0..mi).map(|i| -(w[i] * r_g[i] - r_c[i] / s[i])).collect();
            qp.in_f.mul_t_vec_add(&t, &mut rhs[..nv]);
            for (r, p) in rhs[nv..].iter_mut().zip(&r_p) {
                *r = -p;
            }
            let sol = kkt.solve(&rhs, refine);
            let dx = sol[..nv].to_vec();
            let dy = sol[nv..].to_vec();
            let mut fdx = vec![0.0; mi];
            qp.in_f.mul_vec(&dx, &mut fdx);
            let dz: Vec<f64> =
                (0..mi).map(|i| w[i] * (fdx[i] + r_g[i]) - r_c[i] / s[i]).collect();
            let ds: Vec<f64> = (0..mi).map(|i| -r_g[i] - fdx[i]).collect();
            (dx, dy, dz, ds)
        };

        // Predictor. Its direction only sets the centering parameter unless
        // there are no inequalities, so it is refined only in that case.
        let r_c: Vec<f64> = s.iter().zip(&z).map(|(a, b)| a * b).collect();
        let predictor_refine = if mi > 0 { 0 } else { REFINE_STEPS };
        let (dx_a, dy_a, dz_a, ds_a) = newton(&mut kkt, &r_c, predictor_refine);
        let (dx, dy, dz, ds) = if mi > 0 {
            let a_aff = max_step(&s, &ds_a).min(max_step(&z, &dz_a)).min(1.0);
            let mu_aff = (0..mi)
                .map(|i| (s[i] + a_aff * ds_a[i]) * (z[i] + a_aff * dz_a[i]))
                .sum::<f64>()
                / mi as f64;
            let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);
            // Corrector.
            let r_c: Vec<f64> = (0..mi)
                .map(|i| s[i] * z[i] + ds_a[i] * dz_a[i] - sigma * mu)
                .collect();
            newton(&mut kkt, &r_c, REFINE_STEPS)
        } else {
            (dx_a, dy_a, dz_a, ds_a)
        };

        let alpha = if mi > 0 {
            (STEP_FRACTION * max_step(&s, &ds).min(max_step(&z, &dz))).min(1.0)
        } else {
            1.0
        };
        prev_x.copy_from_slice(&x);
        for (v, d) in x.iter_mut().zip(&dx) {
            *v += alpha * d;
        }
        for (v, d) in y.iter_mut().zip(&dy) {
            *v += alpha * d;
        }
        for (v, d) in z.iter_mut().zip(&dz) {
            *v += alpha * d;
        }
        for (v, d) in s.iter_mut().zip(&ds) {
            *v += alpha * d;
        }
    }

    let objective = qp.objective(&x);
    Ok(QpSolution {
        x,
        y,
        z,
        s,
        status,
        objective,
        iterations,
        residuals,
        certificate,
    })
}

/// Farkas test: `Aᵀy + Fᵀz ≈ 0`, `z ≥ 0`, `bᵀy + hᵀz < 0`.
fn primal_infeasibility(qp: &QpData, y: &[f64], z: &[f64]) -> Option<Vec<f64>> {
    let eta = -(dot(&qp.eq_b, y) + dot(&qp.in_h, z));
    if !(eta > 0.0) || norm_inf(y).max(norm_inf(z)) <= 1e6 {
        return None;
    }
    let mut at = vec![0.0; qp.num_vars()];
    qp.eq_a.mul_t_vec_add(y, &mut at);
    qp.in_f.mul_t_vec_add(z, &mut at);
    if norm_inf(&at) <= INFEASIBILITY_TOL * eta {
        let mut cert = y.to_vec();
        cert.extend_from_slice(z);
        cert.iter_mut().for_each(|v| *v /= eta);
        Some(cert)
    } else {
        None
    }
}

/// Unboundedness test on the last primal step: `P d ≈ 0`, `A d ≈ 0`,
/// `F d ≤ 0`, `cᵀd < 0`, with a diverging iterate.
fn dual_infeasibility(qp: &QpData, d: &[f64], x: &[f64]) -> Option<Vec<f64>> {
    let cd = dot(&qp.lin, d);
    if !(cd < 0.0) || norm_inf(x) < 1e6 {
        return None;
    }
    let tol = INFEASIBILITY_TOL * -cd;
    let mut pd = vec![0.0; d.len()];
    qp.quad.mul_vec(d, &mut pd);
    let mut ad = vec![0.0; qp.eq_a.nrows()];
    qp.eq_a.mul_vec(d, &mut ad);
    let mut fd = vec![0.0; qp.in_f.nrows()];
    qp.in_f.mul_vec(d, &mut fd);
    let ok = norm_inf(&pd) <= tol && norm_inf(&ad) <= tol && fd.iter().all(|v| *v <= tol);
    if ok {
        Some(d.iter().map(|v| v / -cd).collect())
    } else {
        None
    }
}
