//! Scalar abstraction shared by every numeric kernel in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, NumCast, ToPrimitive};

/// Floating point element type: `f32` or `f64`.
///
/// Besides the usual arithmetic bounds, every implementor provides a dense
/// general matrix multiply so convolution can be lowered to GEMM without
/// knowing the concrete type.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumCast
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short type name, echoed in checkpoint headers.
    const NAME: &'static str;

    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`. Strides are in
    /// elements. Slices must cover every addressed element.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite cast")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(
        rs >= 0 && cs >= 0 && (last as usize) < len,
        "gemm operand out of bounds"
    );
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Real for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, csc);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: extents of all three operands were checked above.
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
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_triple_loop() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        f64::gemm(m, k, n, 1.0, &a, k as isize, 1, &b, n as isize, 1, 0.0, &mut c, n as isize, 1);
        for (x, y) in c.iter().zip(naive(m, k, n, &a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_transposed_operand() {
        // a stored as k x m, read transposed
        let (m, k, n) = (2, 3, 2);
        let at: Vec<f32> = vec![1., 4., 2., 5., 3., 6.];
        let b: Vec<f32> = vec![1., 0., 0., 1., 1., 1.];
        let mut c = vec![0.0f32; m * n];
        f32::gemm(m, k, n, 1.0, &at, 1, m as isize, &b, n as isize, 1, 0.0, &mut c, n as isize, 1);
        assert_eq!(c, vec![4., 5., 10., 11.]);
    }
}
