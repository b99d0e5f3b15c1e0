//! Per-period noise distributions.
//!
//! A [`NoiseModel`] is a product of independent scalar families. Each family
//! exposes its cumulant generating function `c(y) = log E exp(y w)`, the
//! gradient of `c`, and the rate function `rho = c*` (Fenchel conjugate),
//! together with the gradient of `rho`, which is the inverse map of `c'`.
//!
//! Rate functions use closed forms where they exist (Gaussian, Laplace,
//! Poisson). The uniform family has no closed-form conjugate and goes through
//! [`ScalarNoise::numeric_rate`], a safeguarded Newton solve of `c'(y) = x`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|c'(y) - x|` in the numeric conjugate.
pub const CONJUGATE_TOL: f64 = 1e-12;
/// Iteration cap of the numeric conjugate.
pub const CONJUGATE_MAX_ITER: usize = 200;

/// Half-width of the window around zero where the uniform CGF and its
/// derivatives are evaluated by power series.
const UNIFORM_SERIES_WINDOW: f64 = 0.05;

/// A scalar noise family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ScalarNoise {
    Gaussian {
        mean: f64,
        variance: f64,
    },
    Laplace {
        location: f64,
        scale: f64,
    },
    Uniform {
        lower: f64,
        upper: f64,
    },
    /// `N - shift` with `N ~ Poisson(rate)`; `shift = rate` centres the noise.
    Poisson {
        rate: f64,
        #[serde(default)]
        shift: f64,
    },
    /// Point mass. Its rate is `+inf` everywhere except at `value`.
    Constant {
        value: f64,
    },
}

impl ScalarNoise {
    pub fn gaussian(mean: f64, variance: f64) -> Result<Self> {
        let n = ScalarNoise::Gaussian { mean, variance };
        n.validate()?;
        Ok(n)
    }

    /// Gaussian with variance zero collapses to a point mass.
    pub fn gaussian_or_constant(mean: f64, variance: f64) -> Result<Self> {
        if variance == 0.0 {
            return Ok(ScalarNoise::Constant { value: mean });
        }
        Self::gaussian(mean, variance)
    }

    pub fn laplace(location: f64, scale: f64) -> Result<Self> {
        let n = ScalarNoise::Laplace { location, scale };
        n.validate()?;
        Ok(n)
    }

    pub fn uniform(lower: f64, upper: f64) -> Result<Self> {
        let n = ScalarNoise::Uniform { lower, upper };
        n.validate()?;
        Ok(n)
    }

    pub fn poisson(rate: f64) -> Result<Self> {
        let n = ScalarNoise::Poisson { rate, shift: 0.0 };
        n.validate()?;
        Ok(n)
    }

    /// Poisson shifted by its rate so that the mean is zero.
    pub fn centered_poisson(rate: f64) -> Result<Self> {
        let n = ScalarNoise::Poisson { rate, shift: rate };
        n.validate()?;
        Ok(n)
    }

    pub fn constant(value: f64) -> Result<Self> {
        let n = ScalarNoise::Constant { value };
        n.validate()?;
        Ok(n)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |v: f64, name: &str| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::Argument(format!("{name} must be finite, got {v}")))
            }
        };
        match *self {
            ScalarNoise::Gaussian { mean, variance } => {
                finite(mean, "gaussian mean")?;
                finite(variance, "gaussian variance")?;
                if variance <= 0.0 {
                    return Err(Error::Argument(format!(
                        "gaussian variance must be positive, got {variance}"
                    )));
                }
            }
            ScalarNoise::Laplace { location, scale } => {
                finite(location, "laplace location")?;
                finite(scale, "laplace scale")?;
                if scale <= 0.0 {
                    return Err(Error::Argument(format!(
                        "laplace scale must be positive, got {scale}"
                    )));
                }
            }
            ScalarNoise::Uniform { lower, upper } => {
                finite(lower, "uniform lower")?;
                finite(upper, "uniform upper")?;
                if lower >= upper {
                    return Err(Error::Argument(format!(
                        "uniform bounds must satisfy lower < upper, got [{lower}, {upper}]"
                    )));
                }
            }
            ScalarNoise::Poisson { rate, shift } => {
                finite(rate, "poisson rate")?;
                finite(shift, "poisson shift")?;
                if rate <= 0.0 {
                    return Err(Error::Argument(format!(
                        "poisson rate must be positive, got {rate}"
                    )));
                }
            }
            ScalarNoise::Constant { value } => finite(value, "constant value")?,
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        match *self {
            ScalarNoise::Gaussian { mean, .. } => mean,
            ScalarNoise::Laplace { location, .. } => location,
            ScalarNoise::Uniform { lower, upper } => 0.5 * (lower + upper),
            ScalarNoise::Poisson { rate, shift } => rate - shift,
            ScalarNoise::Constant { value } => value,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            ScalarNoise::Gaussian { variance, .. } => variance,
            ScalarNoise::Laplace { scale, .. } => 2.0 * scale * scale,
            ScalarNoise::Uniform { lower, upper } => (upper - lower).powi(2) / 12.0,
            ScalarNoise::Poisson { rate, .. } => rate,
            ScalarNoise::Constant { .. } => 0.0,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self, ScalarNoise::Constant { .. })
    }

    /// Open interval on which the CGF is finite.
    pub fn cgf_domain(&self) -> (f64, f64) {
        match *self {
            ScalarNoise::Laplace { scale, .. } => (-1.0 / scale, 1.0 / scale),
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    /// Open interval on which the rate function is finite and smooth.
    pub fn rate_domain(&self) -> (f64, f64) {
        match *self {
            ScalarNoise::Uniform { lower, upper } => (lower, upper),
            ScalarNoise::Poisson { shift, .. } => (-shift, f64::INFINITY),
            ScalarNoise::Constant { value } => (value, value),
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    pub fn cgf(&self, y: f64) -> f64 {
        match *self {
            ScalarNoise::Gaussian { mean, variance } => mean * y + 0.5 * variance * y * y,
            ScalarNoise::Laplace { location, scale } => {
                let by = scale * y;
                if by.abs() >= 1.0 {
                    f64::INFINITY
                } else {
                    location * y - (1.0 - by * by).ln()
                }
            }
            ScalarNoise::Uniform { lower, upper } => {
                let (mid, half) = (0.5 * (lower + upper), 0.5 * (upper - lower));
                mid * y + log_sinhc(half * y)
            }
            ScalarNoise::Poisson { rate, shift } => rate * y.exp_m1() - shift * y,
            ScalarNoise::Constant { value } => value * y,
        }
    }

    /// `c'(y)`; `None` when `y` is not in the open CGF domain.
    pub fn cgf_grad(&self, y: f64) -> Option<f64> {
        let (lo, hi) = self.cgf_domain();
        if !(y > lo && y < hi) {
            return None;
        }
        Some(match *self {
            ScalarNoise::Gaussian { mean, variance } => mean + variance * y,
            ScalarNoise::Laplace { location, scale } => {
                let b2 = scale * scale;
                location + 2.0 * b2 * y / (1.0 - b2 * y * y)
            }
            ScalarNoise::Uniform { lower, upper } => {
                let (mid, half) = (0.5 * (lower + upper), 0.5 * (upper - lower));
                mid + half * langevin(half * y)
            }
            ScalarNoise::Poisson { rate, shift } => rate * y.exp() - shift,
            ScalarNoise::Constant { value } => value,
        })
    }

    /// `c''(y)`; `None` outside the open CGF domain.
    pub fn cgf_hess(&self, y: f64) -> Option<f64> {
        let (lo, hi) = self.cgf_domain();
        if !(y > lo && y < hi) {
            return None;
        }
        Some(match *self {
            ScalarNoise::Gaussian { variance, .. } => variance,
            ScalarNoise::Laplace { scale, .. } => {
                let b2y2 = scale * scale * y * y;
                2.0 * scale * scale * (1.0 + b2y2) / (1.0 - b2y2).powi(2)
            }
            ScalarNoise::Uniform { lower, upper } => {
                let half = 0.5 * (upper - lower);
                half * half * langevin_deriv(half * y)
            }
            ScalarNoise::Poisson { rate, .. } => rate * y.exp(),
            ScalarNoise::Constant { .. } => 0.0,
        })
    }

    /// Rate function value; `+inf` outside the closed convex hull of the
    /// support (and on the open boundary for the uniform family).
    pub fn rate(&self, x: f64) -> f64 {
        if x.is_nan() {
            return f64::NAN;
        }
        match *self {
            ScalarNoise::Gaussian { mean, variance } => (x - mean).powi(2) / (2.0 * variance),
            ScalarNoise::Laplace { location, scale } => {
                let d = x - location;
                let s = scale.hypot(d);
                d * d / (scale * (s + scale)) + (2.0 * scale / (s + scale)).ln()
            }
            ScalarNoise::Uniform { .. } => self.numeric_rate(x),
            ScalarNoise::Poisson { rate, shift } => {
                let v = x + shift;
                if v < 0.0 {
                    f64::INFINITY
                } else if v == 0.0 {
                    rate
                } else {
                    v * (v / rate).ln() - v + rate
                }
            }
            ScalarNoise::Constant { value } => {
                if x == value {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// `rho'(x)`, the unique `y` with `c'(y) = x`.
    pub fn rate_grad(&self, x: f64) -> Option<f64> {
        let (lo, hi) = self.rate_domain();
        if !(x > lo && x < hi) {
            return None;
        }
        match *self {
            ScalarNoise::Gaussian { mean, variance } => Some((x - mean) / variance),
            ScalarNoise::Laplace { location, scale } => {
                let d = x - location;
                Some(d / (scale * (scale.hypot(d) + scale)))
            }
            ScalarNoise::Uniform { .. } => self.invert_cgf_grad(x),
            ScalarNoise::Poisson { rate, shift } => Some(((x + shift) / rate).ln()),
            ScalarNoise::Constant { .. } => None,
        }
    }

    /// `rho''(x) = 1 / c''(rho'(x))`.
    pub fn rate_hess(&self, x: f64) -> Option<f64> {
        let y = self.rate_grad(x)?;
        let curv = self.cgf_hess(y)?;
        if curv > 0.0 {
            Some(1.0 / curv)
        } else {
            None
        }
    }

    /// Rate function computed as `sup_y (x y - c(y))` by the safeguarded
    /// Newton solve, independent of any closed form.
    pub fn numeric_rate(&self, x: f64) -> f64 {
        let (lo, hi) = self.rate_domain();
        if let ScalarNoise::Constant { value } = *self {
            return if x == value { 0.0 } else { f64::INFINITY };
        }
        if x == lo {
            // Finite only for the Poisson lower edge, reached as y -> -inf.
            return match *self {
                ScalarNoise::Poisson { rate, .. } => rate,
                _ => f64::INFINITY,
            };
        }
        if !(x > lo && x < hi) {
            return f64::INFINITY;
        }
        match self.invert_cgf_grad(x) {
            Some(y) => (x * y - self.cgf(y)).max(0.0),
            None => f64::INFINITY,
        }
    }

    /// Solves `c'(y) = x` by Newton's method safeguarded with bisection on a
    /// bracket that is grown geometrically from the origin.
    fn invert_cgf_grad(&self, x: f64) -> Option<f64> {
        let (dom_lo, dom_hi) = self.cgf_domain();
        let resid = |y: f64| self.cgf_grad(y).map(|g| g - x);
        let g0 = resid(0.0)?;
        if g0 == 0.0 {
            return Some(0.0);
        }

        // Bracket [lo, hi] with resid(lo) < 0 < resid(hi).
        let (mut lo, mut hi);
        let dir: f64 = if g0 < 0.0 { 1.0 } else { -1.0 };
        let edge = if dir > 0.0 { dom_hi } else { dom_lo };
        let mut inner = 0.0;
        let mut step = 1.0;
        loop {
            let mut probe = dir * step;
            if edge.is_finite() && probe.abs() >= edge.abs() {
                // Finite domain: the gradient blows up at the edge.
                probe = edge;
            }
            let crossed = if probe == edge {
                true
            } else {
                match resid(probe) {
                    Some(r) => r * dir > 0.0,
                    None => true,
                }
            };
            if crossed {
                if dir > 0.0 {
                    lo = inner;
                    hi = probe;
                } else {
                    lo = probe;
                    hi = inner;
                }
                break;
            }
            inner = probe;
            step *= 2.0;
            if step > 1e300 {
                return None;
            }
        }

        let tol = CONJUGATE_TOL * (1.0 + x.abs());
        let mut y = 0.5 * (lo + hi);
        for _ in 0..CONJUGATE_MAX_ITER {
            let r = match resid(y) {
                Some(r) => r,
                None => {
                    // Outside the open domain: shrink toward the interior.
                    if y >= hi {
                        y = 0.5 * (lo + hi);
                    }
                    continue;
                }
            };
            if r.abs() <= tol {
                return Some(y);
            }
            if r < 0.0 {
                lo = y;
            } else {
                hi = y;
            }
            let curv = self.cgf_hess(y).unwrap_or(0.0);
            let newton = y - r / curv;
            let next = if curv > 0.0 && newton > lo && newton < hi && newton.is_finite() {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if (next - y).abs() <= 4.0 * f64::EPSILON * (1.0 + y.abs()) {
                return Some(next);
            }
            y = next;
        }
        Some(y)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ScalarNoise::Gaussian { mean, variance } => Normal::new(mean, variance.sqrt())
                .expect("validated variance")
                .sample(rng),
            ScalarNoise::Laplace { location, scale } => {
                let u: f64 = rng.gen_range(-0.5..0.5);
                location - scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
            ScalarNoise::Uniform { lower, upper } => rng.gen_range(lower..upper),
            ScalarNoise::Poisson { rate, shift } => {
                let n: f64 = Poisson::new(rate).expect("validated rate").sample(rng);
                n - shift
            }
            ScalarNoise::Constant { value } => value,
        }
    }
}

/// `log(sinh(s) / s)`, the CGF of the uniform distribution on `[-1, 1]`.
fn log_sinhc(s: f64) -> f64 {
    let a = s.abs();
    if a < UNIFORM_SERIES_WINDOW {
        let s2 = s * s;
        s2 * (1.0 / 6.0
            + s2 * (-1.0 / 180.0
                + s2 * (1.0 / 2835.0 + s2 * (-1.0 / 37800.0 + s2 / 467775.0))))
    } else {
        a + (-(-2.0 * a).exp_m1()).ln() - std::f64::consts::LN_2 - a.ln()
    }
}

/// Langevin function `coth(s) - 1/s`.
fn langevin(s: f64) -> f64 {
    if s.abs() < UNIFORM_SERIES_WINDOW {
        let s2 = s * s;
        s * (1.0 / 3.0
            + s2 * (-1.0 / 45.0
                + s2 * (2.0 / 945.0 + s2 * (-1.0 / 4725.0 + s2 * 2.0 / 93555.0))))
    } else {
        1.0 / s.tanh() - 1.0 / s
    }
}

/// Derivative of the Langevin function, `1/s^2 - 1/sinh(s)^2`.
fn langevin_deriv(s: f64) -> f64 {
    if s.abs() < UNIFORM_SERIES_WINDOW {
        let s2 = s * s;
        1.0 / 3.0
            + s2 * (-1.0 / 15.0
                + s2 * (2.0 / 189.0 + s2 * (-1.0 / 675.0 + s2 * 2.0 / 10395.0)))
    } else {
        let sh = s.sinh();
        1.0 / (s * s) - 1.0 / (sh * sh)
    }
}

/// Product of independent scalar families, one per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NoiseModel {
    coords: Vec<ScalarNoise>,
}

impl NoiseModel {
    pub fn new(coords: Vec<ScalarNoise>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Argument("noise model needs at least one coordinate".into()));
        }
        for (i, c) in coords.iter().enumerate() {
            c.validate()
                .map_err(|e| Error::Argument(format!("coordinate {i}: {e}")))?;
        }
        Ok(NoiseModel { coords })
    }

    /// The same family repeated over `dim` coordinates.
    pub fn iid(family: ScalarNoise, dim: usize) -> Result<Self> {
        Self::new(vec![family; dim])
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[ScalarNoise] {
        &self.coords
    }

    pub fn mean(&self) -> Vec<f64> {
        self.coords.iter().map(ScalarNoise::mean).collect()
    }

    fn check_dim(&self, v: &[f64], what: &str) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::dim(what, self.dim(), v.len()));
        }
        Ok(())
    }

    /// `c(y) = sum_i c_i(y_i)`; `+inf` outside the domain.
    pub fn cgf(&self, y: &[f64]) -> Result<f64> {
        self.check_dim(y, "cgf argument")?;
        Ok(self.coords.iter().zip(y).map(|(c, &yi)| c.cgf(yi)).sum())
    }

    pub fn cgf_grad(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(y, "cgf_grad argument")?;
        self.coords
            .iter()
            .zip(y)
            .enumerate()
            .map(|(i, (c, &yi))| {
                c.cgf_grad(yi).ok_or_else(|| Error::Domain {
                    coordinate: i,
                    value: yi,
                    detail: format!("outside the open CGF domain {:?}", c.cgf_domain()),
                })
            })
            .collect()
    }

    pub fn rate(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x, "rate argument")?;
        Ok(self.coords.iter().zip(x).map(|(c, &xi)| c.rate(xi)).sum())
    }

    pub fn rate_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x, "rate_grad argument")?;
        self.coords
            .iter()
            .zip(x)
            .enumerate()
            .map(|(i, (c, &xi))| {
                c.rate_grad(xi).ok_or_else(|| Error::Domain {
                    coordinate: i,
                    value: xi,
                    detail: format!("outside the rate-function interior {:?}", c.rate_domain()),
                })
            })
            .collect()
    }

    /// Diagonal of the rate-function Hessian (coordinates are independent).
    pub fn rate_hess_diag(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x, "rate_hess argument")?;
        self.coords
            .iter()
            .zip(x)
            .enumerate()
            .map(|(i, (c, &xi))| {
                c.rate_hess(xi).ok_or_else(|| Error::Domain {
                    coordinate: i,
                    value: xi,
                    detail: "rate function is not twice differentiable here".into(),
                })
            })
            .collect()
    }

    /// One draw of the whole vector.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.coords.iter().map(|c| c.sample(rng)).collect()
    }

    /// `count` independent draws, reproducible from `seed`.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.draw(&mut rng)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn families() -> Vec<ScalarNoise> {
        vec![
            ScalarNoise::gaussian(0.3, 2.0).unwrap(),
            ScalarNoise::laplace(-0.2, 0.7).unwrap(),
            ScalarNoise::uniform(-1.0, 2.0).unwrap(),
            ScalarNoise::poisson(3.0).unwrap(),
            ScalarNoise::centered_poisson(3.0).unwrap(),
        ]
    }

    #[test]
    fn cgf_examples() {
        let g = NoiseModel::new(vec![ScalarNoise::gaussian(0.0, 1.0).unwrap()]).unwrap();
        assert_eq!(g.cgf(&[1.0]).unwrap(), 0.5);
        for f in families() {
            assert_eq!(f.cgf(0.0), 0.0, "{f:?}");
        }
        let p = ScalarNoise::poisson(3.0).unwrap();
        assert!((p.cgf(1.0) - 5.154_845_485_377_136).abs() < 1e-12);
    }

    #[test]
    fn laplace_cgf_is_infinite_outside_domain() {
        let l = ScalarNoise::laplace(0.0, 0.5).unwrap();
        assert!(l.cgf(2.0).is_infinite());
        assert!(l.cgf(-2.5).is_infinite());
        let m = NoiseModel::new(vec![ScalarNoise::gaussian(0.0, 1.0).unwrap(), l]).unwrap();
        match m.cgf_grad(&[0.0, 2.0]) {
            Err(Error::Domain { coordinate, .. }) => assert_eq!(coordinate, 1),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn cgf_grad_at_origin_is_mean() {
        for f in families() {
            assert_eq!(f.cgf_grad(0.0).unwrap(), f.mean(), "{f:?}");
        }
        let g = ScalarNoise::gaussian(0.0, 1.0).unwrap();
        assert_eq!(g.cgf_grad(0.7).unwrap(), 0.7);
    }

    #[test]
    fn uniform_cgf_grad_matches_finite_difference() {
        let u = ScalarNoise::uniform(-1.0, 1.0).unwrap();
        let expected = 1.0 / 2f64.tanh() - 0.5;
        assert!((expected - 0.537_314_7).abs() < 1e-6);
        assert!((u.cgf_grad(2.0).unwrap() - expected).abs() < 1e-14);
        let h = 1e-6;
        let fd = (u.cgf(2.0 + h) - u.cgf(2.0 - h)) / (2.0 * h);
        assert!((fd - expected).abs() < 1e-8);
    }

    #[test]
    fn uniform_series_window_is_continuous() {
        let u = ScalarNoise::uniform(-1.0, 1.0).unwrap();
        for &s in &[UNIFORM_SERIES_WINDOW, -UNIFORM_SERIES_WINDOW] {
            let below = s * (1.0 - 1e-12);
            let above = s * (1.0 + 1e-12);
            assert!((u.cgf(below) - u.cgf(above)).abs() < 1e-14);
            assert!((u.cgf_grad(below).unwrap() - u.cgf_grad(above).unwrap()).abs() < 1e-12);
            assert!((u.cgf_hess(below).unwrap() - u.cgf_hess(above).unwrap()).abs() < 1e-10);
        }
        // Very large arguments must not overflow.
        assert!(u.cgf(800.0).is_finite());
        assert!((u.cgf_grad(800.0).unwrap() - (1.0 - 1.0 / 800.0)).abs() < 1e-12);
    }

    #[test]
    fn rate_examples() {
        for f in families() {
            assert!(f.rate(f.mean()).abs() < 1e-12, "{f:?}");
        }
        let g = ScalarNoise::gaussian(0.0, 4.0).unwrap();
        assert_eq!(g.rate(2.0), 0.5);
        let p = ScalarNoise::poisson(3.0).unwrap();
        assert!((p.rate(6.0) - (6.0 * 2f64.ln() - 3.0)).abs() < 1e-12);
        assert_eq!(p.rate(0.0), 3.0);
        assert!(p.rate(-0.1).is_infinite());
        let u = ScalarNoise::uniform(-1.0, 1.0).unwrap();
        assert!(u.rate(1.5).is_infinite());
        assert!(u.rate(-1.0).is_infinite());
        let c = ScalarNoise::constant(1.0).unwrap();
        assert_eq!(c.rate(1.0), 0.0);
        assert!(c.rate(1.0 + 1e-9).is_infinite());
    }

    #[test]
    fn rate_grad_examples() {
        let g = ScalarNoise::gaussian(0.0, 1.0).unwrap();
        assert_eq!(g.rate_grad(0.3).unwrap(), 0.3);
        for f in families() {
            assert!(f.rate_grad(f.mean()).unwrap().abs() < 1e-12, "{f:?}");
        }
        let p = ScalarNoise::poisson(3.0).unwrap();
        assert!((p.rate_grad(6.0).unwrap() - 2f64.ln()).abs() < 1e-14);
        let h = 1e-6;
        let fd = (p.rate(6.0 + h) - p.rate(6.0 - h)) / (2.0 * h);
        assert!((fd - 2f64.ln()).abs() < 1e-8);
        assert!(p.rate_grad(-1.0).is_none());
        assert!(ScalarNoise::constant(0.0).unwrap().rate_grad(0.0).is_none());
    }

    #[test]
    fn numeric_rate_handles_edges() {
        let p = ScalarNoise::poisson(3.0).unwrap();
        assert_eq!(p.numeric_rate(0.0), 3.0);
        assert!((p.numeric_rate(1e-3) - p.rate(1e-3)).abs() < 1e-9);
        let u = ScalarNoise::uniform(0.0, 1.0).unwrap();
        assert!(u.numeric_rate(1.0 - 1e-9).is_finite());
        assert!(u.numeric_rate(1.0).is_infinite());
        let l = ScalarNoise::laplace(0.0, 2.0).unwrap();
        assert!((l.numeric_rate(40.0) - l.rate(40.0)).abs() < 1e-9);
    }

    #[test]
    fn sampling_is_deterministic_and_in_support() {
        let m = NoiseModel::new(vec![ScalarNoise::uniform(-1.0, 1.0).unwrap()]).unwrap();
        let a = m.sample(1000, 7);
        let b = m.sample(1000, 7);
        assert_eq!(a, b);
        assert!(a.iter().all(|d| (-1.0..=1.0).contains(&d[0])));
        assert_ne!(a, m.sample(1000, 8));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = NoiseModel::iid(ScalarNoise::gaussian(0.0, 1.0).unwrap(), 2).unwrap();
        assert!(matches!(m.cgf(&[1.0]), Err(Error::Dimension { .. })));
        assert!(matches!(m.rate(&[1.0, 2.0, 3.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(ScalarNoise::gaussian(0.0, 0.0).is_err());
        assert!(ScalarNoise::laplace(0.0, -1.0).is_err());
        assert!(ScalarNoise::uniform(1.0, 1.0).is_err());
        assert!(ScalarNoise::poisson(0.0).is_err());
        assert_eq!(
            ScalarNoise::gaussian_or_constant(2.0, 0.0).unwrap(),
            ScalarNoise::Constant { value: 2.0 }
        );
    }
}
