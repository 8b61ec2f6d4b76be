//! Floating point scalar abstraction shared by every kernel.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Real scalar usable by the engine: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal, rounding to the nearest representable value.
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Short type name used in diagnostics.
    const NAME: &'static str;

    /// `C = A B + beta C` for an `m x k` by `k x n` product with explicit
    /// row/column strides.
    fn gemm(dims: [usize; 3], a: (&[Self], isize, isize), b: (&[Self], isize, isize), beta: Self, c: (&mut [Self], isize, isize));
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows > 0 && cols > 0 {
        let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
        assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
    }
}

macro_rules! impl_gemm {
    ($f:path) => {
        fn gemm(
            [m, k, n]: [usize; 3],
            (a, rsa, csa): (&[Self], isize, isize),
            (b, rsb, csb): (&[Self], isize, isize),
            beta: Self,
            (c, rsc, csc): (&mut [Self], isize, isize),
        ) {
            check_extent(a.len(), m, k, rsa, csa);
            check_extent(b.len(), k, n, rsb, csb);
            check_extent(c.len(), m, n, rsc, csc);
            // SAFETY: every strided access was bounds-checked above.
            unsafe {
                $f(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc);
            }
        }
    };
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    impl_gemm!(matrixmultiply::sgemm);

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    impl_gemm!(matrixmultiply::dgemm);

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
