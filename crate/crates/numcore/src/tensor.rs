use serde::{Deserialize, Serialize};

use crate::error::{shape_err, NumError, Result};
use crate::kernels;
use crate::scalar::Scalar;

/// Dense row-major n-dimensional array with an optional gradient slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(data: Vec<T>, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return shape_err(
                "tensor",
                format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            );
        }
        Ok(Self { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); n], grad: None, requires_grad: false }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n], grad: None, requires_grad: false }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![], data: vec![v], grad: None, requires_grad: false }
    }

    /// Row-major matrix from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Self { shape: vec![rows.len(), cols], data, grad: None, requires_grad: false }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return shape_err("set_grad", format!("{} vs {}", grad.len(), self.data.len()));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Extent of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim().max(1)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(self.data.clone(), shape.to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::cast(v.as_f64())).collect(),
            grad: self.grad.as_ref().map(|g| g.iter().map(|v| U::cast(v.as_f64())).collect()),
            requires_grad: self.requires_grad,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    fn like(&self, data: Vec<T>) -> Self {
        Self { shape: self.shape.clone(), data, grad: None, requires_grad: false }
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = matrix_dims("matmul", self)?;
        let (k2, n) = matrix_dims("matmul", other)?;
        if k != k2 {
            return shape_err("matmul", format!("{:?} x {:?}", self.shape, other.shape));
        }
        Tensor::new(kernels::matmul(&self.data, &other.data, m, k, n), vec![m, n])
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let (o, l, i) = self.split_axis("softmax", axis)?;
        Ok(self.like(kernels::softmax(&self.data, o, l, i)))
    }

    pub fn layernorm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let d = self.last_dim();
        if gain.numel() != d || bias.numel() != d {
            return shape_err("layernorm", format!("D={d}, gain {:?}, bias {:?}", gain.shape, bias.shape));
        }
        Ok(self.like(kernels::layernorm(&self.data, d, &gain.data, &bias.data, eps).y))
    }

    pub fn gelu(&self) -> Tensor<T> {
        self.map(kernels::gelu)
    }

    pub fn relu(&self) -> Tensor<T> {
        self.map(|v| v.max(T::zero()))
    }

    /// Normalizes along `axis` (currently must be the last axis).
    pub fn l2_normalize(&self, axis: usize) -> Result<Tensor<T>> {
        if self.rank() == 0 || axis + 1 != self.rank() {
            return Err(NumError::Argument(format!(
                "l2_normalize supports the last axis only (axis {axis}, rank {})",
                self.rank()
            )));
        }
        Ok(self.like(kernels::l2_normalize(&self.data, self.last_dim()).0))
    }

    fn split_axis(&self, op: &'static str, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.rank() {
            return shape_err(op, format!("axis {axis} out of range for rank {}", self.rank()));
        }
        Ok(kernels::axis_split(&self.shape, axis))
    }
}

pub(crate) fn matrix_dims<T>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [m, n] => Ok((*m, *n)),
        s => shape_err(op, format!("expected a matrix, got shape {s:?}")),
    }
}
