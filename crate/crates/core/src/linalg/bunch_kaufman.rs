//! Dense symmetric indefinite LDLᵀ with Bunch-Kaufman partial pivoting.
//!
//! `P A Pᵀ = L D Lᵀ` where `D` is block diagonal with 1x1 and 2x2 blocks.
//! The inertia of `A` equals the inertia of `D` (Sylvester's law).

use nalgebra::DMatrix;

const BK_ALPHA: f64 = 0.640_388_203_202_208_4; // (1 + sqrt(17)) / 8

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Inertia {
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
}

#[derive(Debug, Clone)]
enum Block {
    One(f64),
    Two([f64; 3]), // a, b, c of [[a, b], [b, c]]
}

#[derive(Debug, Clone)]
pub struct BunchKaufman {
    n: usize,
    /// Unit lower triangular factor (strict lower part is meaningful).
    l: DMatrix<f64>,
    blocks: Vec<(usize, Block)>,
    /// The factored matrix is `A[perm, perm]`.
    perm: Vec<usize>,
    zero_tol: f64,
}

impl BunchKaufman {
    /// Factors the symmetric matrix `a` (only the lower triangle is read).
    /// Pivots with magnitude below `rel_zero_tol * max|A|` count as zero.
    pub fn factor(a: &DMatrix<f64>, rel_zero_tol: f64) -> Self {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "matrix must be square");
        let mut w = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in j..n {
                w[(i, j)] = a[(i, j)];
                w[(j, i)] = a[(i, j)];
            }
        }
        let scale = w.amax();
        let zero_tol = rel_zero_tol * scale.max(f64::MIN_POSITIVE);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut blocks = Vec::new();

        let swap = |w: &mut DMatrix<f64>, perm: &mut Vec<usize>, p: usize, q: usize| {
            if p != q {
                w.swap_rows(p, q);
                w.swap_columns(p, q);
                perm.swap(p, q);
            }
        };

        let mut k = 0;
        while k < n {
            let akk = w[(k, k)].abs();
            let (imax, colmax) = ((k + 1)..n)
                .map(|i| (i, w[(i, k)].abs()))
                .fold((k, 0.0), |acc, c| if c.1 > acc.1 { c } else { acc });

            let mut two = false;
            if akk.max(colmax) > 0.0 && akk < BK_ALPHA * colmax {
                let rowmax = (k..n)
                    .filter(|&j| j != imax)
                    .map(|j| w[(imax, j)].abs())
                    .fold(0.0, f64::max);
                if akk >= BK_ALPHA * colmax * (colmax / rowmax) {
                    // 1x1 pivot at k
                } else if w[(imax, imax)].abs() >= BK_ALPHA * rowmax {
                    swap(&mut w, &mut perm, k, imax);
                } else {
                    swap(&mut w, &mut perm, k + 1, imax);
                    two = true;
                }
            }

            if !two {
                let d = w[(k, k)];
                if d != 0.0 {
                    for i in (k + 1)..n {
                        let lik = w[(i, k)] / d;
                        for j in (k + 1)..=i {
                            let upd = lik * w[(j, k)];
                            w[(i, j)] -= upd;
                        }
                    }
                    for i in (k + 1)..n {
                        w[(i, k)] /= d;
                    }
                }
                // d == 0 with a zero column: nothing to eliminate.
                blocks.push((k, Block::One(d)));
                for i in (k + 1)..n {
                    for j in (k + 1)..i {
                        w[(j, i)] = w[(i, j)];
                    }
                }
                k += 1;
            } else {
                let (a, b, c) = (w[(k, k)], w[(k + 1, k)], w[(k + 1, k + 1)]);
                let det = a * c - b * b;
                let pcol: Vec<f64> = ((k + 2)..n).map(|i| w[(i, k)]).collect();
                let qcol: Vec<f64> = ((k + 2)..n).map(|i| w[(i, k + 1)]).collect();
                for i in (k + 2)..n {
                    let (p, q) = (pcol[i - k - 2], qcol[i - k - 2]);
                    let li1 = (c * p - b * q) / det;
                    let li2 = (a * q - b * p) / det;
                    for j in (k + 2)..=i {
                        w[(i, j)] -= li1 * pcol[j - k - 2] + li2 * qcol[j - k - 2];
                    }
                    w[(i, k)] = li1;
                    w[(i, k + 1)] = li2;
                }
                blocks.push((k, Block::Two([a, b, c])));
                for i in (k + 2)..n {
                    for j in (k + 2)..i {
                        w[(j, i)] = w[(i, j)];
                    }
                }
                k += 2;
            }
        }

        let mut l = DMatrix::identity(n, n);
        for j in 0..n {
            for i in (j + 1)..n {
                l[(i, j)] = w[(i, j)];
            }
        }
        for (start, block) in &blocks {
            if let Block::Two(_) = block {
                l[(start + 1, *start)] = 0.0;
            }
        }
        BunchKaufman {
            n,
            l,
            blocks,
            perm,
            zero_tol,
        }
    }

    pub fn inertia(&self) -> Inertia {
        let mut inr = Inertia {
            positive: 0,
            negative: 0,
            zero: 0,
        };
        let mut count = |v: f64| {
            if v.abs() <= self.zero_tol {
                inr.zero += 1;
            } else if v > 0.0 {
                inr.positive += 1;
            } else {
                inr.negative += 1;
            }
        };
        for (_, b) in &self.blocks {
            match *b {
                Block::One(d) => count(d),
                Block::Two([a, b, c]) => {
                    let mean = 0.5 * (a + c);
                    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
                    count(mean + rad);
                    count(mean - rad);
                }
            }
        }
        inr
    }

    pub fn is_singular(&self) -> bool {
        self.inertia().zero > 0
    }

    /// Solves `A x = b`. Meaningful only for nonsingular factorizations.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        assert_eq!(b.len(), n);
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for j in 0..n {
            let xj = x[j];
            if xj != 0.0 {
                for i in (j + 1)..n {
                    x[i] -= self.l[(i, j)] * xj;
                }
            }
        }
        for (start, block) in &self.blocks {
            match *block {
                Block::One(d) => x[*start] /= d,
                Block::Two([a, b, c]) => {
                    let (p, q) = (x[*start], x[start + 1]);
                    let det = a * c - b * b;
                    x[*start] = (c * p - b * q) / det;
                    x[start + 1] = (a * q - b * p) / det;
                }
            }
        }
        for j in (0..n).rev() {
            let mut acc = x[j];
            for i in (j + 1)..n {
                acc -= self.l[(i, j)] * x[i];
            }
            x[j] = acc;
        }
        let mut out = vec![0.0; n];
        for (k, &p) in self.perm.iter().enumerate() {
            out[p] = x[k];
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DVector, SymmetricEigen};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eig_inertia(a: &DMatrix<f64>, tol: f64) -> Inertia {
        let e = SymmetricEigen::new(a.clone());
        Inertia {
            positive: e.eigenvalues.iter().filter(|&&v| v > tol).count(),
            negative: e.eigenvalues.iter().filter(|&&v| v < -tol).count(),
            zero: e.eigenvalues.iter().filter(|&&v| v.abs() <= tol).count(),
        }
    }

    #[test]
    fn random_indefinite_matches_eigen_inertia_and_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..25 {
            let mut a = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..=i {
                    let v = rng.gen_range(-1.0..1.0);
                    a[(i, j)] = v;
                    a[(j, i)] = v;
                }
            }
            let f = BunchKaufman::factor(&a, 1e-13);
            assert_eq!(f.inertia(), eig_inertia(&a, 1e-10), "n = {n}");
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = f.solve(&b);
            let r = &a * DVector::from_vec(x) - DVector::from_vec(b);
            assert!(r.amax() < 1e-8, "n = {n}, residual {}", r.amax());
        }
    }

    #[test]
    fn saddle_point_needs_two_by_two_pivots() {
        // Zero diagonal forces 2x2 blocks.
        let a = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 1.0, 2.0, 0.0, //
                1.0, 0.0, 0.0, 3.0, //
                2.0, 0.0, 0.0, 1.0, //
                0.0, 3.0, 1.0, 0.0,
            ],
        );
        let f = BunchKaufman::factor(&a, 1e-13);
        assert_eq!(f.inertia(), eig_inertia(&a, 1e-10));
        let x = f.solve(&[1.0, 2.0, 3.0, 4.0]);
        let r = &a * DVector::from_vec(x) - DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert!(r.amax() < 1e-12);
    }

    #[test]
    fn singular_matrix_reports_zero_eigenvalue() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, -2.0]);
        let f = BunchKaufman::factor(&a, 1e-12);
        let inr = f.inertia();
        assert_eq!(inr.zero, 1);
        assert_eq!(inr.positive, 1);
        assert_eq!(inr.negative, 1);
    }
}
