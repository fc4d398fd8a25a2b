//! Floating-point abstraction used by the trainable networks.
//!
//! Training runs in `f32`; gradient checks and reference comparisons run the
//! exact same code in `f64`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Name used in checkpoint headers.
    const DTYPE: &'static str;

    /// `C <- alpha * A * B + beta * C` over strided row/column views.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must lie
    /// inside the allocation behind each pointer.
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

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal fits")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite float converts")
    }

    fn from_le(bytes: &[u8]) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    const BYTES: usize;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

/// A strided read-only matrix view into a slice.
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
    /// Contiguous row-major `rows x cols` matrix.
    pub fn rm(data: &'a [T], rows: usize, cols: usize) -> Self {
        View {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view of a contiguous row-major `rows x cols` matrix.
    pub fn rm_t(data: &'a [T], rows: usize, cols: usize) -> Self {
        View {
            data,
            offset: 0,
            rows: cols,
            cols: rows,
            rs: 1,
            cs: cols,
        }
    }

    pub fn t(self) -> Self {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
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
    pub fn rm(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        ViewMut {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }
}

/// `C <- alpha * A * B + beta * C` with bounds-checked views.
pub fn gemm<T: Real>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: ViewMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    let c_last = if c.rows == 0 || c.cols == 0 {
        c.offset
    } else {
        c.offset + (c.rows - 1) * c.rs + (c.cols - 1) * c.cs
    };
    assert!(c_last < c.data.len(), "gemm output view out of bounds");
    if a.cols == 0 {
        // Empty inner product: C <- beta * C.
        for i in 0..c.rows {
            for j in 0..c.cols {
                let idx = c.offset + i * c.rs + j * c.cs;
                c.data[idx] = if beta == T::zero() {
                    T::zero()
                } else {
                    beta * c.data[idx]
                };
            }
        }
        return;
    }
    assert!(a.last_index() < a.data.len(), "gemm lhs view out of bounds");
    assert!(b.last_index() < b.data.len(), "gemm rhs view out of bounds");
    // SAFETY: all three views were bounds-checked above; `c` is borrowed
    // mutably so it cannot alias `a` or `b`.
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

/// Numerically stable in-place softmax of one row.
pub fn softmax_inplace<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    // f64 normaliser: an f32 running sum over ~2k prototypes drifts past 1e-6.
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += v.as_f64();
    }
    for v in row.iter_mut() {
        *v = T::lit(v.as_f64() / sum);
    }
}

/// Numerically stable log-softmax of one row into `out`.
pub fn log_softmax<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + T::lit(3.0) * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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
    fn gemm_matches_naive_including_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.7).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let mut c = vec![0.0; m * n];
        gemm(1.0, View::rm(&a, m, k), View::rm(&b, k, n), 0.0, ViewMut::rm(&mut c, m, n));
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        // (B^T A^T)^T == A B, computed via transposed views.
        let mut ct = vec![0.0; n * m];
        gemm(
            1.0,
            View::rm(&b, k, n).t(),
            View::rm(&a, m, k).t(),
            0.0,
            ViewMut::rm(&mut ct, n, m),
        );
        for i in 0..m {
            for j in 0..n {
                assert!((ct[j * m + i] - want[i * n + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.3, 1.5, 4.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn softmax_sums_to_one_with_large_logits() {
        let mut row = vec![1000.0f64, 999.0, -1000.0];
        softmax_inplace(&mut row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|v| v.is_finite()));
    }
}
