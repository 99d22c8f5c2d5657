//! Dense complex helpers: LU with adjoint solves and a condition estimate.

use nalgebra::{DMatrix, DVector, Dyn, LU};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Systems whose estimated 1-norm condition number exceeds this are rejected.
pub const COND_LIMIT: f64 = 1e12;

pub(crate) const ZERO: C64 = C64::new(0.0, 0.0);
pub(crate) const ONE: C64 = C64::new(1.0, 0.0);

/// LU factorization of a square system that can solve with `X` and `X^H`.
pub struct Factorized {
    lu: LU<C64, Dyn, Dyn>,
    l: CMatrix,
    u: CMatrix,
    norm1: f64,
}

impl Factorized {
    /// Factors `x` and rejects it if it is singular or its condition estimate exceeds
    /// [`COND_LIMIT`].
    pub fn new(x: CMatrix) -> Result<Self> {
        assert!(x.is_square());
        let norm1 = norm1(&x);
        let lu = x.lu();
        let u = lu.u();
        if u.diagonal().iter().any(|d| d.norm() == 0.0 || !d.is_finite()) {
            return Err(Error::IllConditioned { cond: f64::INFINITY });
        }
        let f = Self {
            l: lu.l(),
            u,
            lu,
            norm1,
        };
        let cond = f.condition_estimate();
        if !(cond <= COND_LIMIT) {
            return Err(Error::IllConditioned { cond });
        }
        Ok(f)
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Overwrites `b` with `X^{-1} b`.
    pub fn solve_mut(&self, b: &mut CMatrix) {
        let ok = self.lu.solve_mut(b);
        debug_assert!(ok);
    }

    pub fn solve(&self, b: &CMatrix) -> CMatrix {
        let mut out = b.clone();
        self.solve_mut(&mut out);
        out
    }

    /// `X^{-H} b`. With `P X = L U`, `X^H = U^H L^H P`.
    pub fn solve_adjoint(&self, b: &CMatrix) -> CMatrix {
        let mut w = b.clone();
        let ok = self.u.ad_solve_upper_triangular_mut(&mut w);
        debug_assert!(ok);
        let ok = self.l.ad_solve_lower_triangular_mut(&mut w);
        debug_assert!(ok);
        self.lu.p().inv_permute_rows(&mut w);
        w
    }

    /// Hager-Higham estimate of `||X||_1 ||X^{-1}||_1`.
    pub fn condition_estimate(&self) -> f64 {
        let n = self.dim();
        if n == 0 {
            return 1.0;
        }
        let mut x = CMatrix::from_element(n, 1, C64::new(1.0 / n as f64, 0.0));
        let mut est = 0.0;
        let mut last_j = usize::MAX;
        for _ in 0..5 {
            let y = self.solve(&x);
            est = y.iter().map(|v| v.norm()).sum::<f64>();
            let sign = y.map(|v| {
                let r = v.norm();
                if r == 0.0 {
                    ONE
                } else {
                    v / r
                }
            });
            let z = self.solve_adjoint(&sign);
            let (j, zmax) = z
                .iter()
                .enumerate()
                .map(|(j, v)| (j, v.norm()))
                .fold((0, -1.0), |acc, v| if v.1 > acc.1 { v } else { acc });
            let ztx = z.iter().zip(x.iter()).map(|(a, b)| (a.conj() * b).re).sum::<f64>();
            if zmax <= ztx || j == last_j {
                break;
            }
            last_j = j;
            x.fill(ZERO);
            x[j] = ONE;
        }
        // alternating-sign probe guards against the classic failure cases
        let alt = CMatrix::from_fn(n, 1, |i, _| {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            C64::new(s * (1.0 + i as f64 / (n.max(2) - 1) as f64), 0.0)
        });
        let y = self.solve(&alt);
        let alt_est = 2.0 * y.iter().map(|v| v.norm()).sum::<f64>() / (3.0 * n as f64);
        self.norm1 * est.max(alt_est)
    }
}

/// Maximum absolute column sum.
pub fn norm1(m: &CMatrix) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest singular value.
pub fn spectral_norm(m: &CMatrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().iter().cloned().fold(0.0, f64::max)
}

/// Sum of entry moduli.
pub fn entry_l1(m: &CMatrix) -> f64 {
    m.iter().map(|v| v.norm()).sum()
}

/// `||a - b||_F / ||b||_F`, with the denominator floored at the smallest positive double.
pub fn rel_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

pub fn select(m: &CMatrix, rows: &[usize], cols: &[usize]) -> CMatrix {
    CMatrix::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])])
}
