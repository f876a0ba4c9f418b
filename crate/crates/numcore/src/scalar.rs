//! Floating-point element types.
//!
//! Model math runs in `f32`; `f64` exists so finite-difference checks have
//! enough headroom to resolve relative errors well below `1e-5`.

use std::fmt::{Debug, Display};

use num_traits::Float;

/// Element type of a [`Tensor`](crate::Tensor).
pub trait Scalar: Float + Default + Debug + Display + Send + Sync + 'static {
    /// Short dtype tag used in diagnostics and checkpoints.
    const DTYPE: &'static str;

    fn cast(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Hyperbolic tangent; `f32` uses a branch-free approximation with
    /// absolute error below `2e-7`.
    fn tanh_fast(self) -> Self {
        self.tanh()
    }

    /// `c = a * b + beta * c` over strided row/column layouts.
    ///
    /// # Safety
    /// Every index reachable through the given strides and extents must lie
    /// inside the backing slices. [`gemm`] checks this before calling.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn cast(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn tanh_fast(self) -> f32 {
        let u = self.clamp(-9.0, 9.0);
        let e = exp_approx(2.0 * u);
        let big = (e - 1.0) / (e + 1.0);
        let u2 = u * u;
        let small = u * (1.0 + u2 * (-1.0 / 3.0 + u2 * (2.0 / 15.0 + u2 * (-17.0 / 315.0))));
        if u.abs() < 0.0625 {
            small
        } else {
            big
        }
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn cast(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// `e^x` for `|x| <= 18` by base-2 range reduction and a degree-6
/// polynomial on `[-ln2/2, ln2/2]`.
#[inline]
fn exp_approx(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const C1: f32 = 0.693_359_4;
    const C2: f32 = -2.121_944_4e-4;
    // adding 1.5 * 2^23 rounds to an integer held in the low mantissa bits
    const SHIFT: f32 = 12_582_912.0;
    let t = x * LOG2E + SHIFT;
    let n = t - SHIFT;
    let r = x - n * C1 - n * C2;
    let p = ((((1.987_569_1e-4 * r + 1.398_199_9e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r
        + 1.666_666_5e-1)
        * r
        + 5e-1;
    let y = p * r * r + r + 1.0;
    let k = t.to_bits().wrapping_sub(SHIFT.to_bits());
    y * f32::from_bits(k.wrapping_add(127) << 23)
}

/// Strided view of a matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    /// Row-major `rows x cols` block starting at `offset`.
    pub fn row_major(offset: usize, cols: usize) -> Self {
        Self { offset, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows x cols` block: the result reads as
    /// a `cols x rows` matrix.
    pub fn transposed(offset: usize, cols: usize) -> Self {
        Self { offset, rs: 1, cs: cols }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// Below this many multiply-adds the packing overhead of the blocked kernel
/// dominates, so a plain loop is used.
const SMALL_GEMM: usize = 4096;

/// `c[m x n] = a[m x k] * b[k x n] + beta * c`, all operands given as strided
/// views into flat buffers.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    beta: T,
    c: &mut [T],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || la.max_index(m, k) < a.len(), "gemm: lhs out of bounds");
    assert!(k == 0 || lb.max_index(k, n) < b.len(), "gemm: rhs out of bounds");
    assert!(lc.max_index(m, n) < c.len(), "gemm: output out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = lc.offset + i * lc.rs + j * lc.cs;
                c[idx] = if beta == T::zero() { T::zero() } else { beta * c[idx] };
            }
        }
        return;
    }
    if m * k * n <= SMALL_GEMM {
        for i in 0..m {
            for j in 0..n {
                let mut acc = T::zero();
                for p in 0..k {
                    acc = acc
                        + a[la.offset + i * la.rs + p * la.cs] * b[lb.offset + p * lb.rs + j * lb.cs];
                }
                let idx = lc.offset + i * lc.rs + j * lc.cs;
                c[idx] = if beta == T::zero() { acc } else { acc + beta * c[idx] };
            }
        }
        return;
    }
    // SAFETY: bounds of all three operands were checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr().add(la.offset),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr().add(lb.offset),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr().add(lc.offset),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}
