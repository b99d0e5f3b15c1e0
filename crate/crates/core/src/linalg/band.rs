//! Banded LDLᵀ factorization without pivoting for quasi-definite matrices.
//!
//! Every symmetric permutation of a quasi-definite matrix admits an LDLᵀ
//! factorization with diagonal `D`, so a bandwidth-reducing ordering can be
//! chosen freely. Pivots whose sign disagrees with the expected sign (or that
//! are too small) are replaced by a signed regularization value.

/// Lower band storage of a symmetric matrix with half-bandwidth `bw`.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    bw: usize,
    pub(crate) diag: Vec<f64>,
    /// Row `i` holds entries `(i, i - bw) .. (i, i - 1)`.
    pub(crate) lower: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        BandMatrix {
            n,
            bw,
            diag: vec![0.0; n],
            lower: vec![0.0; n * bw],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    pub fn clear(&mut self) {
        self.diag.iter_mut().for_each(|v| *v = 0.0);
        self.lower.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Index into `lower` of the entry `(i, j)`, `j < i`.
    #[inline]
    pub(crate) fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(j < i && i - j <= self.bw, "({i}, {j}) outside band {}", self.bw);
        i * self.bw + (j + self.bw - i)
    }

    /// Adds `v` to the symmetric pair `(i, j)` / `(j, i)`.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        use std::cmp::Ordering::*;
        match i.cmp(&j) {
            Equal => self.diag[i] += v,
            Greater => {
                let s = self.slot(i, j);
                self.lower[s] += v;
            }
            Less => {
                let s = self.slot(j, i);
                self.lower[s] += v;
            }
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i == j {
            self.diag[i]
        } else if i - j <= self.bw {
            self.lower[self.slot(i, j)]
        } else {
            0.0
        }
    }
}

/// Result of [`factor_band`]: `A = L D Lᵀ` with unit lower `L` in band form.
///
/// Storage is padded with `bw` leading rows (`L = 0`, `d = 1`) so every row
/// has the full band width.
#[derive(Debug, Clone)]
pub struct BandLdl {
    n: usize,
    bw: usize,
    l: Vec<f64>,
    d: Vec<f64>,
    /// Number of pivots that were replaced by the regularization value.
    pub regularized: usize,
}

/// Factors `a`. `signs[i]` is the expected sign of pivot `i`; pivots with
/// `signs[i] * d <= eps` become `signs[i] * delta`.
pub fn factor_band(a: &BandMatrix, signs: &[f64], eps: f64, delta: f64) -> BandLdl {
    let mut f = BandLdl::new(a.n, a.bw);
    f.refactor(a, signs, eps, delta);
    f
}

impl BandLdl {
    /// Storage for factors of `n x n` matrices with half-bandwidth `bw`.
    pub fn new(n: usize, bw: usize) -> Self {
        BandLdl {
            n,
            bw,
            l: vec![0.0; (n + bw) * bw],
            d: vec![1.0; n + bw],
            regularized: 0,
        }
    }

    /// Overwrites `self` with the factorization of `a` (see [`factor_band`]).
    pub fn refactor(&mut self, a: &BandMatrix, signs: &[f64], eps: f64, delta: f64) {
        assert_eq!(signs.len(), a.n);
        assert!(a.n == self.n && a.bw == self.bw, "factor storage has the wrong shape");
        self.regularized = 0;
        macro_rules! fixed {
            ($($b:literal)*) => {
                match a.bw {
                    $($b => factor_fixed::<$b>(a, signs, eps, delta, self),)*
                    _ => factor_dyn(a, signs, eps, delta, self),
                }
            };
        }
        fixed!(1 2 3 4 5 6 7 8 9 10 11 12 13 14 15 16);
    }
}

fn factor_fixed<const B: usize>(a: &BandMatrix, signs: &[f64], eps: f64, delta: f64, f: &mut BandLdl) {
    let (lrows, _) = f.l.as_chunks_mut::<B>();
    let (arows, _) = a.lower.as_chunks::<B>();
    let d = &mut f.d[..];
    for i in 0..a.n {
        let arow = &arows[i];
        // u[s] = L_ij d_j for column j = i - B + s.
        let mut u = [0.0; B];
        for s in 0..B {
            let lj = &lrows[i + s];
            let mut acc = arow[s];
            for k in 0..s {
                acc -= u[k] * lj[k + B - s];
            }
            u[s] = acc;
        }
        let mut di = a.diag[i];
        let mut li = [0.0; B];
        for s in 0..B {
            let v = u[s] / d[i + s];
            li[s] = v;
            di -= u[s] * v;
        }
        if !(signs[i] * di > eps) {
            di = signs[i] * delta;
            f.regularized += 1;
        }
        d[i + B] = di;
        lrows[i + B] = li;
    }
}

fn factor_dyn(a: &BandMatrix, signs: &[f64], eps: f64, delta: f64, f: &mut BandLdl) {
    let b = a.bw;
    let mut u = vec![0.0; b];
    for i in 0..a.n {
        let arow = &a.lower[i * b..(i + 1) * b];
        for s in 0..b {
            let lj = &f.l[(i + s) * b..(i + s + 1) * b];
            let mut acc = arow[s];
            for k in 0..s {
                acc -= u[k] * lj[k + b - s];
            }
            u[s] = acc;
        }
        let mut di = a.diag[i];
        for s in 0..b {
            let v = u[s] / f.d[i + s];
            f.l[(i + b) * b + s] = v;
            di -= u[s] * v;
        }
        if !(signs[i] * di > eps) {
            di = signs[i] * delta;
            f.regularized += 1;
        }
        f.d[i + b] = di;
    }
}

impl BandLdl {
    pub fn solve_in_place(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        let b = self.bw;
        let mut xp = vec![0.0; self.n + b];
        xp[b..].copy_from_slice(x);
        self.solve_padded(&mut xp);
        x.copy_from_slice(&xp[b..]);
    }

    /// Solves in place on `xp = [pad; x]` where `pad` has `bw` entries whose
    /// input is zero and whose output is meaningless.
    pub fn solve_padded(&self, xp: &mut [f64]) {
        let b = self.bw;
        assert_eq!(xp.len(), self.n + b);
        xp[..b].iter_mut().for_each(|v| *v = 0.0);
        macro_rules! fixed {
            ($($k:literal)*) => {
                match b {
                    $($k => self.solve_fixed::<$k>(xp),)*
                    _ => self.solve_dyn(xp),
                }
            };
        }
        fixed!(1 2 3 4 5 6 7 8 9 10 11 12 13 14 15 16);
    }

    fn solve_fixed<const B: usize>(&self, xp: &mut [f64]) {
        let (lrows, _) = self.l.as_chunks::<B>();
        let n = self.n;
        for i in 0..n {
            let li = &lrows[i + B];
            let win: &[f64; B] = xp[i..i + B].try_into().unwrap();
            let mut acc = 0.0;
            for s in 0..B {
                acc += li[s] * win[s];
            }
            xp[i + B] -= acc;
        }
        for (v, d) in xp[B..].iter_mut().zip(&self.d[B..]) {
            *v /= d;
        }
        for i in (0..n).rev() {
            let li = &lrows[i + B];
            let xi = xp[i + B];
            let win: &mut [f64; B] = (&mut xp[i..i + B]).try_into().unwrap();
            for s in 0..B {
                win[s] -= li[s] * xi;
            }
        }
    }

    fn solve_dyn(&self, xp: &mut [f64]) {
        let (n, b) = (self.n, self.bw);
        for i in 0..n {
            let li = &self.l[(i + b) * b..(i + b + 1) * b];
            let acc: f64 = li.iter().zip(&xp[i..i + b]).map(|(l, x)| l * x).sum();
            xp[i + b] -= acc;
        }
        for (v, d) in xp[b..].iter_mut().zip(&self.d[b..]) {
            *v /= d;
        }
        for i in (0..n).rev() {
            let xi = xp[i + b];
            let li = &self.l[(i + b) * b..(i + b + 1) * b];
            for (x, l) in xp[i..i + b].iter_mut().zip(li) {
                *x -= l * xi;
            }
        }
    }

    /// Counts of positive and negative pivots.
    pub fn inertia(&self) -> (usize, usize) {
        let pos = self.d[self.bw..].iter().filter(|&&v| v > 0.0).count();
        (pos, self.n - pos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn quasi_definite_band_solve_matches_dense() {
        // [[4,1,1],[1,3,0],[1,0,-2]] with a 1-wide band after ordering 0,1,2 -> bw=2
        let dense = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 1.0, 1.0, 3.0, 0.0, 1.0, 0.0, -2.0]);
        let mut band = BandMatrix::zeros(3, 2);
        for i in 0..3 {
            for j in 0..=i {
                band.add(i, j, dense[(i, j)]);
            }
        }
        let f = factor_band(&band, &[1.0, 1.0, -1.0], 0.0, 1e-8);
        assert_eq!(f.regularized, 0);
        assert_eq!(f.inertia(), (2, 1));
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let mut x = b.as_slice().to_vec();
        f.solve_in_place(&mut x);
        let r = &dense * DVector::from_vec(x) - b;
        assert!(r.amax() < 1e-12);
    }

    #[test]
    fn specialized_and_generic_widths_agree_with_dense() {
        for bw in [0usize, 1, 3, 5, 16, 17, 23] {
            let n = 40;
            let mut dense = DMatrix::zeros(n, n);
            let mut band = BandMatrix::zeros(n, bw);
            let mut seed = 7u64 + bw as u64;
            let mut rnd = || {
                seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            };
            for i in 0..n {
                for j in i.saturating_sub(bw)..i {
                    let v = rnd();
                    dense[(i, j)] = v;
                    dense[(j, i)] = v;
                    band.add(i, j, v);
                }
                let d = 2.0 * bw as f64 + 1.0;
                dense[(i, i)] = d;
                band.add(i, i, d);
            }
            let f = factor_band(&band, &vec![1.0; n], 0.0, 1e-8);
            assert_eq!(f.regularized, 0);
            let b = DVector::from_fn(n, |i, _| i as f64 - 3.0);
            let mut x = b.as_slice().to_vec();
            f.solve_in_place(&mut x);
            let r = &dense * DVector::from_vec(x) - b;
            assert!(r.amax() < 1e-10, "bw {bw}: {}", r.amax());
        }
    }
}
