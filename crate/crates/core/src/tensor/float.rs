use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Scalar element type. `f32` is the working precision; `f64` is used for
/// gradient checks and oracle comparisons.
pub trait Float:
    num_traits::Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum<Self>
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn of_usize(x: usize) -> Self {
        Self::of(x as f64)
    }
    /// `c += a · b` over strided `m×k` and `k×n` operands.
    #[allow(clippy::too_many_arguments)]
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], sa: (isize, isize), b: &[Self], sb: (isize, isize), c: &mut [Self], sc: (isize, isize));
}

impl Float for f32 {
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], sa: (isize, isize), b: &[Self], sb: (isize, isize), c: &mut [Self], sc: (isize, isize)) {
        if m == 0 || n == 0 || k == 0 {
            return;
        }
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        // SAFETY: the callers pass contiguous row-major buffers of at least
        // m·k, k·n and m·n elements, and the strides stay inside them.
        unsafe {
            matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, 1.0, c.as_mut_ptr(), sc.0, sc.1);
        }
    }
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], sa: (isize, isize), b: &[Self], sb: (isize, isize), c: &mut [Self], sc: (isize, isize)) {
        if m == 0 || n == 0 || k == 0 {
            return;
        }
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        // SAFETY: the callers pass contiguous row-major buffers of at least
        // m·k, k·n and m·n elements, and the strides stay inside them.
        unsafe {
            matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, 1.0, c.as_mut_ptr(), sc.0, sc.1);
        }
    }
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
