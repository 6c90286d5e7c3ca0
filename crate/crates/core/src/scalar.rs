//! Scalar abstraction for the differentiable core.
//!
//! Everything under [`crate::diff`] is generic over [`Scalar`], which is
//! implemented for `f32` and `f64`. Reductions accumulate in `f64`
//! regardless of the storage type.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point storage type: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    /// `c <- alpha * op(a) * op(b) + beta * c` on row-major buffers, where
    /// `op(a)` is `m x k` and `op(b)` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("scalar conversion")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar conversion")
    }

    /// Hyperbolic tangent through one `exp`; relative error below `1e-13`
    /// for `f64`. A short Taylor series covers `|x| < 0.005`, where the
    /// exponential form cancels.
    #[inline]
    fn fast_tanh(self) -> Self {
        if self.abs() < Self::lit(0.005) {
            let x2 = self * self;
            self * (Self::one() - x2 * Self::lit(1.0 / 3.0) + x2 * x2 * Self::lit(2.0 / 15.0))
        } else {
            let two = Self::lit(2.0);
            Self::one() - two / ((two * self).exp() + Self::one())
        }
    }
}

/// Below this many multiply-adds, packing overhead dominates the blocked kernel.
const SMALL_GEMM: usize = 8192;

/// Direct loops ordered so the innermost loop walks contiguous memory.
#[allow(clippy::too_many_arguments)]
fn small_gemm<T: Float + AddAssign>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    let c = &mut c[..m * n];
    if beta == T::zero() {
        c.iter_mut().for_each(|v| *v = T::zero());
    } else if beta != T::one() {
        c.iter_mut().for_each(|v| *v = *v * beta);
    }
    match (trans_a, trans_b) {
        (false, true) => {
            for i in 0..m {
                let ar = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let br = &b[j * k..(j + 1) * k];
                    let mut acc = [T::zero(); 4];
                    let chunks = k / 4;
                    for q in 0..chunks {
                        for l in 0..4 {
                            acc[l] += ar[4 * q + l] * br[4 * q + l];
                        }
                    }
                    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
                    for p in 4 * chunks..k {
                        s += ar[p] * br[p];
                    }
                    c[i * n + j] += alpha * s;
                }
            }
        }
        (false, false) => {
            for i in 0..m {
                let cr = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let s = alpha * a[i * k + p];
                    for (cv, &bv) in cr.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                        *cv += s * bv;
                    }
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let br = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let s = alpha * a[p * m + i];
                    for (cv, &bv) in c[i * n..(i + 1) * n].iter_mut().zip(br) {
                        *cv += s * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = T::zero();
                    for p in 0..k {
                        s += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += alpha * s;
                }
            }
        }
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if m.min(n) <= 2 || m * k * n <= SMALL_GEMM {
                    small_gemm(m, k, n, alpha, a, trans_a, b, trans_b, beta, c);
                    return;
                }
                // op(a) is m x k: row-major a is (m x k) or, when transposed, (k x m).
                let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: the asserts above bound every index reachable through
                // the strides; the buffers do not alias (c is &mut).
                unsafe {
                    $gemm(
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

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Sum with `f64` accumulation.
pub fn sum_acc<T: Scalar>(xs: impl IntoIterator<Item = T>) -> T {
    T::lit(xs.into_iter().map(Scalar::as_f64).sum())
}
