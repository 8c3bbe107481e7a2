use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of every tensor in the crate.
///
/// The engine is written once against this trait; `f64` is the default
/// everywhere (see the aliases at the crate root) and `f32` is supported
/// for quick experiments.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Panics only for types that cannot hold finite
    /// `f64` values, which no supported type does.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Short type name used in checkpoint metadata and diagnostics.
    const NAME: &'static str;

    /// `C += A·B` for an `m×k` matrix `A` and a `k×n` matrix `B`, each given
    /// by a slice and its (row, column) strides; `C` is dense row-major.
    #[allow(clippy::too_many_arguments)]
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], a_strides: (isize, isize), b: &[Self], b_strides: (isize, isize), c: &mut [Self]);
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize)) {
    if rows > 0 && cols > 0 {
        let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
        assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
    }
}

macro_rules! impl_gemm {
    ($t:ty, $f:path) => {
        fn gemm_acc(m: usize, k: usize, n: usize, a: &[$t], sa: (isize, isize), b: &[$t], sb: (isize, isize), c: &mut [$t]) {
            check_extent(a.len(), m, k, sa);
            check_extent(b.len(), k, n, sb);
            assert!(c.len() >= m * n, "gemm output too small");
            if m == 0 || n == 0 || k == 0 {
                return;
            }
            // SAFETY: the extent checks above keep every strided access of
            // `a` and `b` inside their slices, and `c` holds m·n elements in
            // row-major order (row stride n, column stride 1).
            unsafe {
                $f(m, k, n, 1.0, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, 1.0, c.as_mut_ptr(), n as isize, 1);
            }
        }
    };
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    impl_gemm!(f64, matrixmultiply::dgemm);
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    impl_gemm!(f32, matrixmultiply::sgemm);
}
