//! Scalar abstraction shared by every numeric kernel.
//!
//! All math in this crate is written against [`Real`] so the same code runs
//! in `f32` or `f64`. The training and evaluation pipeline is pinned to `f64`
//! through the aliases in the crate root; gradient checks rely on that
//! precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar usable in tensors, circuits and optimizers.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Total for both supported widths.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion to f64")
    }

    /// `C ← beta·C + A·B` for an `m×k` by `k×n` product. `A` and `B` are read
    /// through (row, column) strides; `C` is row-major with row stride `rsc`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: [usize; 2], b: &[Self], sb: [usize; 2], beta: Self, c: &mut [Self], rsc: usize);
}

fn check_extent(len: usize, rows: usize, cols: usize, s: [usize; 2], what: &str) {
    if rows > 0 && cols > 0 {
        let last = (rows - 1) * s[0] + (cols - 1) * s[1];
        assert!(last < len, "gemm operand {what} too short: needs index {last}, has {len}");
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: [usize; 2], b: &[Self], sb: [usize; 2], beta: Self, c: &mut [Self], rsc: usize) {
                check_extent(a.len(), m, k, sa, "A");
                check_extent(b.len(), k, n, sb, "B");
                check_extent(c.len(), m, n, [rsc, 1], "C");
                // SAFETY: every index touched lies inside the slices, checked above.
                unsafe {
                    $f(
                        m, k, n, 1.0,
                        a.as_ptr(), sa[0] as isize, sa[1] as isize,
                        b.as_ptr(), sb[0] as isize, sb[1] as isize,
                        beta, c.as_mut_ptr(), rsc as isize, 1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);
