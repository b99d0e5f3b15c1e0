//! Interior-point solutions checked against brute-force active-set enumeration.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use riskmpc::linalg::SparseMatrix;
use riskmpc::{solve_qp, QpData, SolveStatus, SolverOptions};

struct Dense {
    p: DMatrix<f64>,
    c: DVector<f64>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    f: DMatrix<f64>,
    h: DVector<f64>,
}

/// Tries every active set; returns the KKT point with feasible primal and
/// nonnegative multipliers.
fn enumerate(d: &Dense) -> (DVector<f64>, DVector<f64>) {
    let n = d.c.len();
    let p = d.b.len();
    let m = d.h.len();
    let mut best: Option<(f64, DVector<f64>, DVector<f64>)> = None;
    for mask in 0u32..(1 << m) {
        let act: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let k = p + act.len();
        if k > n {
            continue;
        }
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&d.p);
        for i in 0..n {
            rhs[i] = -d.c[i];
        }
        for r in 0..k {
            let (row, val) = if r < p {
                (d.a.row(r).into_owned(), d.b[r])
            } else {
                (d.f.row(act[r - p]).into_owned(), d.h[act[r - p]])
            };
            for j in 0..n {
                kkt[(n + r, j)] = row[j];
                kkt[(j, n + r)] = row[j];
            }
            rhs[n + r] = val;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let x = sol.rows(0, n).into_owned();
        let feasible = (&d.f * &x - &d.h).iter().all(|v| *v <= 1e-9);
        let mults_ok = act.iter().enumerate().all(|(r, _)| sol[n + p + r] >= -1e-9);
        if feasible && mults_ok {
            let mut z = DVector::zeros(m);
            for (r, &i) in act.iter().enumerate() {
                z[i] = sol[n + p + r];
            }
            let obj = 0.5 * x.dot(&(&d.p * &x)) + d.c.dot(&x);
            if best.as_ref().map_or(true, |b| obj < b.0) {
                best = Some((obj, x, z));
            }
        }
    }
    let (_, x, z) = best.expect("feasible instance");
    (x, z)
}

fn random_instance(seed: u64) -> Dense {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, p, m) = (20, 3, 10);
    let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let pm = &g * g.transpose() / n as f64 + DMatrix::identity(n, n) * 0.1;
    let c = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
    let a = DMatrix::from_fn(p, n, |_, _| rng.gen_range(-1.0..1.0));
    let f = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
    // Feasible by construction around x0.
    let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-0.5..0.5));
    let b = &a * &x0;
    let h = &f * &x0 + DVector::from_fn(m, |_, _| rng.gen_range(0.0..0.3));
    Dense { p: pm, c, a, b, f, h }
}

fn to_qp(d: &Dense) -> QpData {
    QpData {
        quad: SparseMatrix::from_dense(&d.p),
        lin: d.c.as_slice().to_vec(),
        offset: 0.0,
        eq_a: SparseMatrix::from_dense(&d.a),
        eq_b: d.b.as_slice().to_vec(),
        in_f: SparseMatrix::from_dense(&d.f),
        in_h: d.h.as_slice().to_vec(),
    }
}

#[test]
fn random_strictly_convex_qps_match_active_set_enumeration() {
    for seed in 0..6 {
        let d = random_instance(seed);
        let (x_ref, z_ref) = enumerate(&d);
        let sol = solve_qp(&to_qp(&d), &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal, "seed {seed}");
        let obj_ref = 0.5 * x_ref.dot(&(&d.p * &x_ref)) + d.c.dot(&x_ref);
        assert!((sol.objective - obj_ref).abs() < 1e-6, "seed {seed}");
        for i in 0..x_ref.len() {
            assert!((sol.x[i] - x_ref[i]).abs() < 1e-4, "seed {seed} x[{i}]");
        }
        for i in 0..z_ref.len() {
            assert!((sol.z[i] - z_ref[i]).abs() < 1e-4, "seed {seed} z[{i}]");
        }
    }
}

#[test]
fn dual_sign_gives_value_sensitivity() {
    // d(opt)/d(b_r) = −y_r, checked by central differences.
    let d = random_instance(42);
    let opts = SolverOptions { tol: 1e-10, max_iter: 100 };
    let base = solve_qp(&to_qp(&d), &opts).unwrap();
    for r in 0..d.b.len() {
        let eps = 1e-5;
        let mut plus = to_qp(&d);
        plus.eq_b[r] += eps;
        let mut minus = to_qp(&d);
        minus.eq_b[r] -= eps;
        let fp = solve_qp(&plus, &opts).unwrap().objective;
        let fm = solve_qp(&minus, &opts).unwrap().objective;
        let fd = (fp - fm) / (2.0 * eps);
        assert!((fd + base.y[r]).abs() < 1e-4, "row {r}: fd {fd}, y {}", base.y[r]);
    }
}
