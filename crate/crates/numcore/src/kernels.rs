//! Forward kernels on flat buffers, shared by the graph ops and the eager
//! [`Tensor`](crate::Tensor) API.

use crate::scalar::{gemm, Layout, Scalar};

/// Splits `shape` around `axis` into `(outer, len, inner)` so that element
/// `(o, j, i)` lives at `(o * len + j) * inner + i`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm(
        m,
        k,
        n,
        a,
        Layout::row_major(0, k),
        b,
        Layout::row_major(0, n),
        T::zero(),
        &mut out,
        Layout::row_major(0, n),
    );
    out
}

/// Max-subtracted softmax along the split axis.
pub fn softmax<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                sum = sum + e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / sum;
            }
        }
    }
    out
}

pub fn log_softmax<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                sum = sum + (x[at(j)] - max).exp();
            }
            let lse = sum.ln();
            for j in 0..len {
                out[at(j)] = x[at(j)] - max - lse;
            }
        }
    }
    out
}

/// Output of [`layernorm`]: the affine result plus what backward needs.
pub struct LayerNormOut<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Normalizes each length-`d` row to zero mean and unit (biased) variance,
/// then applies `gain` and `bias`.
pub fn layernorm<T: Scalar>(x: &[T], d: usize, gain: &[T], bias: &[T], eps: T) -> LayerNormOut<T> {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let dn = T::cast(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().fold(T::zero(), |s, &v| s + v) / dn;
        let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / dn;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[r * d + c] = h;
            y[r * d + c] = h * gain[c] + bias[c];
        }
    }
    LayerNormOut { y, xhat, rstd }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-form GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let k = T::cast(GELU_K);
    let c = T::cast(GELU_C);
    let half = T::cast(0.5);
    let inner = k * (x + c * x * x * x);
    half * x * (T::one() + inner.tanh_fast())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::cast(GELU_K);
    let c = T::cast(GELU_C);
    let half = T::cast(0.5);
    let three = T::cast(3.0);
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh_fast();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x)
}

/// Row-wise L2 normalization; zero rows stay zero. Returns `(y, norms)`.
pub fn l2_normalize<T: Scalar>(x: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut norms = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let n = row.iter().fold(T::zero(), |s, &v| s + v * v).sqrt();
        norms[r] = n;
        if n > T::zero() {
            for c in 0..d {
                y[r * d + c] = row[c] / n;
            }
        }
    }
    (y, norms)
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `x` (of `shape`) into the axis order given by `perm`.
pub fn permute<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let rank = shape.len();
    if rank > 0 && perm[rank - 1] == rank - 1 {
        let run = shape[rank - 1];
        if run == 0 {
            return out;
        }
        let mut idx = vec![0usize; rank - 1];
        for _ in 0..x.len() / run {
            let src: usize = (0..rank - 1).map(|a| idx[a] * in_strides[perm[a]]).sum();
            out.extend_from_slice(&x[src..src + run]);
            for a in (0..rank - 1).rev() {
                idx[a] += 1;
                if idx[a] < out_shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        return out;
    }
    let mut idx = vec![0usize; rank];
    for _ in 0..x.len() {
        let src: usize = (0..rank).map(|a| idx[a] * in_strides[perm[a]]).sum();
        out.push(x[src]);
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    out
}
