//! Minimal dense neural-network toolkit with hand-written backward passes.
//!
//! Everything is generic over [`Real`] so that gradient checks can run in
//! 64-bit while training runs in 32-bit. Matrices are row-major slices; the
//! heavy lifting is delegated to `matrixmultiply`.

pub mod layers;
pub mod optim;
pub mod params;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

pub use layers::{Attention, AttentionCache, FeedForward, LayerNorm, Linear};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Grads, ParamId, ParamStore};

/// Floating-point scalar used by the models.
pub trait Real:
    Copy
    + Default
    + Debug
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn is_finite(self) -> bool;
    fn max(self, other: Self) -> Self {
        if self > other {
            self
        } else {
            other
        }
    }

    /// `c = alpha * a @ b + beta * c` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds matrices of the given
    /// shapes; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            unsafe fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Strided read-only matrix view into a slice.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    /// Dense row-major `rows x cols` matrix.
    pub fn dense(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Column block `[col0, col0 + width)` of a dense row-major matrix.
    pub fn cols_of(data: &'a [T], rows: usize, stride: usize, col0: usize, width: usize) -> Self {
        Self {
            data,
            offset: col0,
            rows,
            cols: width,
            rs: stride,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// Strided mutable matrix view.
pub struct ViewMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> ViewMut<'a, T> {
    pub fn dense(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn cols_of(data: &'a mut [T], rows: usize, stride: usize, col0: usize, width: usize) -> Self {
        Self {
            data,
            offset: col0,
            rows,
            cols: width,
            rs: stride,
            cs: 1,
        }
    }
}

/// `c = alpha * a @ b + beta * c`.
pub fn gemm<T: Real>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: ViewMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!(a.rows, c.rows, "output rows differ");
    assert_eq!(b.cols, c.cols, "output cols differ");
    a.check();
    b.check();
    if c.rows > 0 && c.cols > 0 {
        let last = c.offset + (c.rows - 1) * c.rs + (c.cols - 1) * c.cs;
        assert!(last < c.data.len(), "output view out of bounds");
    }
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: bounds checked above; `c` is a unique borrow so it cannot alias.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Dense `(m x k) @ (k x n)`, optionally accumulating into `out`.
pub fn matmul<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    let beta = if accumulate { T::ONE } else { T::ZERO };
    gemm(
        T::ONE,
        View::dense(a, m, k),
        View::dense(b, k, n),
        beta,
        ViewMut::dense(out, m, n),
    );
}

/// `out (+)= a^T @ b` for `a: (k x m)`, `b: (k x n)`.
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize, n: usize, accumulate: bool) {
    let beta = if accumulate { T::ONE } else { T::ZERO };
    gemm(
        T::ONE,
        View::dense(a, k, m).t(),
        View::dense(b, k, n),
        beta,
        ViewMut::dense(out, m, n),
    );
}

/// `out (+)= a @ b^T` for `a: (m x k)`, `b: (n x k)`.
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    let beta = if accumulate { T::ONE } else { T::ZERO };
    gemm(
        T::ONE,
        View::dense(a, m, k),
        View::dense(b, n, k).t(),
        beta,
        ViewMut::dense(out, m, n),
    );
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mut mx = row[0];
    for &v in row.iter() {
        mx = mx.max(v);
    }
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    let inv = T::ONE / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Log-sum-exp of a row (stable).
pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let mut mx = row[0];
    for &v in row {
        mx = mx.max(v);
    }
    let s: T = row.iter().map(|&v| (v - mx).exp()).sum();
    mx + s.ln()
}

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let k = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let k = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let th = inner.tanh();
    let sech2 = T::ONE - th * th;
    half * (T::ONE + th) + half * x * sech2 * c * (T::ONE + three * k * x * x)
}

/// Returns a unit-length copy (zero vectors are returned unchanged).
pub fn l2_normalized<T: Real>(v: &[T]) -> Vec<T> {
    let n: T = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if n > T::ZERO {
        v.iter().map(|&x| x / n).collect()
    } else {
        v.to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|x| x as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        matmul(&a, &b, &mut c, 2, 3, 4, false);
        let mut naive = vec![0.0; 8];
        for i in 0..2 {
            for j in 0..4 {
                for p in 0..3 {
                    naive[i * 4 + j] += a[i * 3 + p] * b[p * 4 + j];
                }
            }
        }
        assert_eq!(c, naive);
        // a^T stored as 3x2
        let at: Vec<f64> = (0..3).flat_map(|p| (0..2).map(move |i| (i * 3 + p) as f64)).collect();
        let mut c2 = vec![0.0; 8];
        matmul_tn(&at, &b, &mut c2, 3, 2, 4, false);
        assert_eq!(c2, naive);
        let bt: Vec<f64> = (0..4)
            .flat_map(|j| (0..3).map(move |p| ((p * 4 + j) as f64) * 0.5))
            .collect();
        let mut c3 = vec![0.0; 8];
        matmul_nt(&a, &bt, &mut c3, 2, 3, 4, false);
        assert_eq!(c3, naive);
    }

    #[test]
    fn gelu_derivative_matches_fd() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut r = vec![1000.0f64, 1001.0, 999.0];
        softmax_in_place(&mut r);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((log_sum_exp(&[0.0f64, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }
}
