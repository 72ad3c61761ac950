//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar type the tensor math is generic over.
///
/// Implemented for `f32` (the interchange precision of every file format)
/// and `f64` (useful for tight finite-difference checks).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; panics only for types that cannot represent
    /// ordinary finite doubles, which no implementor does.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("real to f64")
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self.to_f32().expect("real to f32")
    }

    /// `C <- A·B + beta·C` for row-major `A (m×k)`, `B (k×n)`, `C (m×n)`;
    /// `a_t` reads `A` from a row-major `k×m` buffer instead.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], beta: Self, c: &mut [Self]);
}

macro_rules! gemm_impl {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[$t], a_t: bool, b: &[$t], beta: $t, c: &mut [$t]) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
                // SAFETY: the slices cover every index the strides can reach.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        n as isize,
                        1,
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

gemm_impl!(f32, matrixmultiply::sgemm);
gemm_impl!(f64, matrixmultiply::dgemm);
