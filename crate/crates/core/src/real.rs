//! Scalar abstraction over the two supported precisions.
//!
//! Networks run in `f32`. The gradient checker rebuilds a net in `f64` (a
//! "shadow" net) so finite differences are not swamped by rounding.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Whether a matrix operand is read as stored or transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

pub trait Real:
    Float
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const BITS: u32;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;

    /// Row-major `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is
    /// `m x k`, `op(b)` is `k x n` and `c` is `m x n`. When `beta` is zero
    /// `c` is overwritten without being read.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        ta: Transpose,
        tb: Transpose,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );
}

/// Row and column strides of a row-major operand of logical shape
/// `rows x cols`, stored transposed or not.
fn strides(t: Transpose, rows: usize, cols: usize) -> (isize, isize) {
    match t {
        Transpose::No => (cols as isize, 1),
        Transpose::Yes => (1, rows as isize),
    }
}

fn check_gemm_lens(m: usize, n: usize, k: usize, a: usize, b: usize, c: usize) {
    assert!(a >= m * k, "gemm: lhs has {a} elements, need {}", m * k);
    assert!(b >= k * n, "gemm: rhs has {b} elements, need {}", k * n);
    assert!(c >= m * n, "gemm: output has {c} elements, need {}", m * n);
}

macro_rules! impl_real {
    ($t:ty, $bits:expr, $kernel:path) => {
        impl Real for $t {
            const BITS: u32 = $bits;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn from_f32(v: f32) -> Self {
                v as $t
            }
            #[inline]
            fn to_f32(self) -> f32 {
                self as f32
            }

            fn gemm(
                ta: Transpose,
                tb: Transpose,
                m: usize,
                n: usize,
                k: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                check_gemm_lens(m, n, k, a.len(), b.len(), c.len());
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(ta, m, k);
                let (rsb, csb) = strides(tb, k, n);
                // SAFETY: operand lengths were checked against the logical
                // shapes above and every stride stays inside those bounds.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, 32, matrixmultiply::sgemm);
impl_real!(f64, 64, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(ta: Transpose, tb: Transpose, m: usize, n: usize, k: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let at = |i: usize, p: usize| match ta {
            Transpose::No => a[i * k + p],
            Transpose::Yes => a[p * m + i],
        };
        let bt = |p: usize, j: usize| match tb {
            Transpose::No => b[p * n + j],
            Transpose::Yes => b[j * k + p],
        };
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| at(i, p) * bt(p, j)).sum();
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_for_all_transpose_combinations() {
        let (m, n, k) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 3.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        for ta in [Transpose::No, Transpose::Yes] {
            for tb in [Transpose::No, Transpose::Yes] {
                let want = naive(ta, tb, m, n, k, &a, &b);
                let mut got = vec![f64::NAN; m * n];
                f64::gemm(ta, tb, m, n, k, 1.0, &a, &b, 0.0, &mut got);
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() < 1e-12, "{ta:?} {tb:?}: {g} vs {w}");
                }
            }
        }
    }

    #[test]
    fn gemm_beta_accumulates() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = [10.0f32];
        f32::gemm(Transpose::No, Transpose::No, 1, 1, 2, 1.0, &a, &b, 1.0, &mut c);
        assert_eq!(c, [21.0]);
    }
}
