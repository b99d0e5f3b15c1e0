//! Property tests for the noise, risk and planning layers.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use riskmpc::risk::risk_point;
use riskmpc::{
    battery_problem, certainty_equivalent_plan, lqr_problem, prescient_solve, risk_averse_ccp,
    risk_bound_scalar, risk_seeking_plan, Affine, BaselineLoad, BatteryParams, CcpOptions,
    ControlProblem, NoiseModel, Quadratic, ScalarNoise, SolverOptions,
};

fn family() -> impl Strategy<Value = ScalarNoise> {
    prop_oneof![
        (-2.0..2.0f64, 0.1..4.0f64).prop_map(|(m, v)| ScalarNoise::gaussian(m, v).unwrap()),
        (-2.0..2.0f64, 0.2..2.0f64).prop_map(|(m, b)| ScalarNoise::laplace(m, b).unwrap()),
        (-2.0..1.0f64, 0.5..3.0f64).prop_map(|(a, w)| ScalarNoise::uniform(a, a + w).unwrap()),
        (0.3..5.0f64).prop_map(|r| ScalarNoise::poisson(r).unwrap()),
        (0.3..5.0f64).prop_map(|r| ScalarNoise::centered_poisson(r).unwrap()),
    ]
}

/// Point strictly inside the rate domain, parametrized by `s in (0, 1)`.
fn interior(c: &ScalarNoise, s: f64) -> f64 {
    let (lo, hi) = c.rate_domain();
    let mean = c.mean();
    let lo = if lo.is_finite() { lo } else { mean - 6.0 };
    let hi = if hi.is_finite() { hi } else { mean + 6.0 };
    let margin = 0.02 * (hi - lo);
    lo + margin + s * (hi - lo - 2.0 * margin)
}

fn solver() -> SolverOptions {
    SolverOptions {
        tol: 1e-10,
        max_iter: 200,
    }
}

fn tight_ccp() -> CcpOptions {
    CcpOptions {
        eps: 1e-10,
        max_iter: 2000,
        ..CcpOptions::default()
    }
}

fn small_battery(seed: u64, horizon: usize) -> ControlProblem {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    use rand::Rng;
    let base: Vec<f64> = (0..horizon).map(|_| rng.gen_range(-1.0..2.0)).collect();
    let prices: Vec<f64> = (0..horizon).map(|_| rng.gen_range(0.1..0.5)).collect();
    let mut p = BatteryParams::with_baseline(BaselineLoad::PerPeriod(base));
    p.horizon = horizon;
    p.step_hours = 1.0;
    p.prices = Some(prices);
    p.q_init = rng.gen_range(0.0..5.0);
    battery_problem(&p).unwrap()
}

fn small_lqr(seed: u64, horizon: usize) -> ControlProblem {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    use rand::Rng;
    let a = DMatrix::from_fn(2, 2, |i, j| if i == j { 1.0 } else { 0.0 } + rng.gen_range(-0.3..0.3));
    let b = DMatrix::from_fn(2, 1, |_, _| rng.gen_range(-1.0..1.0));
    let q = DMatrix::from_diagonal(&DVector::from_fn(2, |_, _| rng.gen_range(0.2..2.0)));
    let r = DMatrix::from_element(1, 1, rng.gen_range(0.2..2.0));
    let s = DMatrix::from_diagonal(&DVector::from_fn(2, |_, _| rng.gen_range(0.05..0.5)));
    let x0 = DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0));
    lqr_problem(&a, &b, &q, &r, &s, horizon, &x0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn cgf_and_rate_are_conjugate(c in family(), s in 0.0..1.0f64) {
        let x = interior(&c, s);
        let y = c.rate_grad(x).unwrap();
        let back = c.cgf_grad(y).unwrap();
        prop_assert!((back - x).abs() <= 1e-8 * (1.0 + x.abs()), "x {x} y {y} back {back}");
        // Fenchel-Young equality at conjugate pairs.
        let gap = c.rate(x) + c.cgf(y) - x * y;
        prop_assert!(gap.abs() <= 1e-8 * (1.0 + (x * y).abs()), "gap {gap}");
        prop_assert!((c.numeric_rate(x) - c.rate(x)).abs() <= 1e-8 * (1.0 + c.rate(x)));
    }

    #[test]
    fn fenchel_young_inequality(c in family(), s in 0.0..1.0f64, y in -3.0..3.0f64) {
        let x = interior(&c, s);
        let cy = c.cgf(y);
        prop_assume!(cy.is_finite());
        prop_assert!(c.rate(x) + cy >= x * y - 1e-9);
    }

    #[test]
    fn rate_vanishes_at_mean_and_is_nonnegative(c in family(), s in 0.0..1.0f64) {
        let x = interior(&c, s);
        prop_assert!(c.rate(x) >= -1e-12);
        prop_assert!(c.rate(c.mean()).abs() <= 1e-10);
    }

    #[test]
    fn cgf_and_rate_are_midpoint_convex(c in family(), s1 in 0.0..1.0f64, s2 in 0.0..1.0f64,
                                        y1 in -3.0..3.0f64, y2 in -3.0..3.0f64) {
        let (x1, x2) = (interior(&c, s1), interior(&c, s2));
        let mid = c.rate(0.5 * (x1 + x2));
        prop_assert!(mid <= 0.5 * (c.rate(x1) + c.rate(x2)) + 1e-9);
        let (c1, c2) = (c.cgf(y1), c.cgf(y2));
        prop_assume!(c1.is_finite() && c2.is_finite());
        prop_assert!(c.cgf(0.5 * (y1 + y2)) <= 0.5 * (c1 + c2) + 1e-9);
    }

    #[test]
    fn cgf_gradient_matches_finite_differences(c in family(), y in -0.8..0.8f64) {
        let (lo, hi) = c.cgf_domain();
        let y = y * hi.min(-lo).min(3.0);
        let h = 1e-5;
        let fd = (c.cgf(y + h) - c.cgf(y - h)) / (2.0 * h);
        let g = c.cgf_grad(y).unwrap();
        prop_assert!((fd - g).abs() <= 1e-5 * (1.0 + g.abs()), "fd {fd} g {g}");
    }

    #[test]
    fn risk_is_shift_equivariant(costs in prop::collection::vec(-10.0..10.0f64, 1..200),
                                 gamma in -3.0..3.0f64, shift in -50.0..50.0f64) {
        let shifted: Vec<f64> = costs.iter().map(|c| c + shift).collect();
        let a = risk_point(&costs, gamma) + shift;
        let b = risk_point(&shifted, gamma);
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn risk_is_monotone_in_gamma(costs in prop::collection::vec(-10.0..10.0f64, 1..200),
                                 g1 in -3.0..3.0f64, g2 in -3.0..3.0f64) {
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        prop_assert!(risk_point(&costs, lo) <= risk_point(&costs, hi) + 1e-9);
        let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = costs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let v = risk_point(&costs, g1);
        prop_assert!(v >= min - 1e-9 && v <= max + 1e-9);
    }

    #[test]
    fn scalar_bound_is_shift_equivariant(c in family(), a in -1.0..1.0f64, b in -5.0..5.0f64,
                                          shift in -5.0..5.0f64, gamma in prop_oneof![Just(-0.5), Just(0.25)]) {
        let model = NoiseModel::new(vec![c]).unwrap();
        let f = Quadratic {
            p: DMatrix::from_element(1, 1, 0.05),
            q: DVector::from_element(1, a),
            r: b,
        };
        let g = Quadratic { r: b + shift, ..f.clone() };
        let opts = tight_ccp();
        let (Ok(x), Ok(y)) = (risk_bound_scalar(&f, &model, gamma, &opts),
                               risk_bound_scalar(&g, &model, gamma, &opts)) else {
            return Ok(());
        };
        prop_assume!(x.ensure_no_breakdown().is_ok() && y.ensure_no_breakdown().is_ok());
        prop_assert!((x.value + shift - y.value).abs() <= 1e-7 * (1.0 + y.value.abs()),
            "{} + {shift} vs {}", x.value, y.value);
    }

    #[test]
    fn affine_bound_equals_cgf(c in family(), a in -0.4..0.4f64, b in -5.0..5.0f64,
                               gamma in prop_oneof![Just(-1.0), Just(-0.25), Just(0.25), Just(1.0)]) {
        let model = NoiseModel::new(vec![c.clone()]).unwrap();
        let f = Affine { a: vec![a], b };
        let exact = b + c.cgf(gamma * a) / gamma;
        prop_assume!(exact.is_finite());
        let r = risk_bound_scalar(&f, &model, gamma, &CcpOptions::default()).unwrap();
        prop_assert!((r.value - exact).abs() <= 1e-10 * (1.0 + exact.abs()), "{} vs {exact}", r.value);
    }

    #[test]
    fn scalar_ascent_is_monotone(c in family(), p in 0.0..0.3f64, q in -1.0..1.0f64) {
        let model = NoiseModel::new(vec![c]).unwrap();
        let f = Quadratic {
            p: DMatrix::from_element(1, 1, p),
            q: DVector::from_element(1, q),
            r: 0.0,
        };
        let r = risk_bound_scalar(&f, &model, 0.2, &CcpOptions::default()).unwrap();
        for pair in r.history.windows(2) {
            prop_assert!(pair[1].value >= pair[0].value - 1e-9);
        }
        let at_mean = f.value_at_mean(&model);
        if r.ensure_no_breakdown().is_ok() {
            prop_assert!(r.value >= at_mean - 1e-9);
        }
    }
}

trait AtMean {
    fn value_at_mean(&self, m: &NoiseModel) -> f64;
}

impl AtMean for Quadratic {
    fn value_at_mean(&self, m: &NoiseModel) -> f64 {
        use riskmpc::ConvexOracle;
        self.value(&m.mean())
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dynamics_duals_are_subgradients(seed in 0u64..10_000, lqr in any::<bool>(), dir in 0u64..1000) {
        let problem = if lqr { small_lqr(seed, 6) } else { small_battery(seed, 8) };
        let w = problem.noise_mean();
        let sol = prescient_solve(&problem, &w, &solver()).unwrap();
        sol.ensure_optimal().unwrap();
        let lam = sol.lambda_stacked();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(dir);
        use rand::Rng;
        for _ in 0..5 {
            let d: Vec<f64> = (0..w.len()).map(|k| {
                if problem.noise_coord(k).is_degenerate() { 0.0 } else { rng.gen_range(-0.5..0.5) }
            }).collect();
            let wd: Vec<f64> = w.iter().zip(&d).map(|(a, b)| a + b).collect();
            let other = prescient_solve(&problem, &wd, &solver()).unwrap();
            let lin = sol.value + lam.iter().zip(&d).map(|(l, v)| l * v).sum::<f64>();
            prop_assert!(other.value >= lin - 1e-6 * (1.0 + lin.abs()), "{} < {lin}", other.value);
        }
    }

    #[test]
    fn ccp_ascends_above_certainty_equivalent(seed in 0u64..10_000, lqr in any::<bool>()) {
        let (problem, gamma) = if lqr { (small_lqr(seed, 5), 0.05) } else { (small_battery(seed, 8), 2.0) };
        let ce = certainty_equivalent_plan(&problem, &solver()).unwrap();
        let r = risk_averse_ccp(&problem, gamma, &CcpOptions::default(), &solver()).unwrap();
        prop_assume!(r.ensure_no_breakdown().is_ok());
        for pair in r.history.windows(2) {
            prop_assert!(pair[1].bound >= pair[0].bound - 1e-9);
        }
        prop_assert!(r.bound >= ce.value - 1e-9);
    }

    #[test]
    fn seeking_plan_is_stationary(seed in 0u64..10_000, lqr in any::<bool>()) {
        let problem = if lqr { small_lqr(seed, 5) } else { small_battery(seed, 8) };
        let gamma = -0.5;
        let ce = certainty_equivalent_plan(&problem, &solver()).unwrap();
        let r = risk_seeking_plan(&problem, gamma, &solver()).unwrap();
        r.ensure_no_breakdown().unwrap();
        prop_assert!(r.bound <= ce.value + 1e-9);
        let lam = r.plan.lambda_stacked();
        let scaled: Vec<f64> = lam.iter().map(|l| gamma * l).collect();
        let target = problem.cgf_grad(&scaled).unwrap();
        let gap = target.iter().zip(&r.w).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        prop_assert!(gap <= 1e-5, "stationarity gap {gap}");
    }
}
