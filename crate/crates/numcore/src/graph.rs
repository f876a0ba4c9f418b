//! Dynamically recorded computation graph with reverse-mode accumulation.
//!
//! Every op evaluates eagerly, appends a node, and rejects non-finite output.
//! Nodes are stored in creation order, which is a valid topological order, so
//! [`Graph::backward`] is a single reverse sweep.

use crate::error::{shape_err, NumError, Result};
use crate::kernels;
use crate::scalar::{gemm, Layout, Scalar};
use crate::tensor::{matrix_dims, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: T },
    AddTiled(Var, Var),
    Gelu(Var),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    L2Normalize { x: Var, norms: Vec<T> },
    GroupMax { x: Var, argmax: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Pick { x: Var, idx: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor; its `requires_grad` flag decides whether
    /// [`backward`](Self::backward) produces a gradient for it.
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        let needs = t.requires_grad();
        self.push("leaf", t, Op::Leaf, needs)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("constant", t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("param", t.with_requires_grad(true), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    /// Gradient accumulated by the last [`backward`](Self::backward) call.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return shape_err("matmul", format!("{:?} x {:?}", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let needs = self.needs(&[a, b]);
        self.push("matmul", Tensor::new(out, vec![m, n])?, Op::MatMul(a, b), needs)
    }

    /// Batched product of `[G, m, k]` with `[G, k, n]`, or with `[G, n, k]`
    /// read transposed when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (g, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([g, m, k], [g2, r, c]) if g == g2 => {
                let (kb, n) = if trans_b { (*c, *r) } else { (*r, *c) };
                if kb != *k {
                    return shape_err("batch_matmul", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
                }
                (*g, *m, *k, n)
            }
            _ => return shape_err("batch_matmul", format!("{sa:?} x {sb:?}")),
        };
        let mut out = vec![T::zero(); g * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..g {
            let lb = if trans_b { Layout::transposed(i * n * k, k) } else { Layout::row_major(i * k * n, n) };
            gemm(m, k, n, da, Layout::row_major(i * m * k, k), db, lb, T::zero(), &mut out, Layout::row_major(i * m * n, n));
        }
        let needs = self.needs(&[a, b]);
        self.push("batch_matmul", Tensor::new(out, vec![g, m, n])?, Op::BatchMatMul { a, b, trans_b }, needs)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = matrix_dims("transpose", self.value(x))?;
        let out = kernels::permute(self.data(x), &[m, n], &[1, 0]);
        let needs = self.needs(&[x]);
        self.push("transpose", Tensor::new(out, vec![n, m])?, Op::Transpose(x), needs)
    }

    // ----- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(out, self.shape(a).to_vec())?;
        let needs = self.needs(&[a, b]);
        self.push(op, t, node, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let t = self.value(x).map(|v| scale * v + shift);
        let needs = self.needs(&[x]);
        self.push("affine", t, Op::Affine { x, scale }, needs)
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Result<Var> {
        self.affine(x, scale, T::zero())
    }

    /// Adds the `[s, D]` tile to the `[n, D]` input, row `r` receiving tile
    /// row `r % s`. With `s = 1` this is a bias or type-embedding broadcast.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        let xt = self.value(x);
        let tt = self.value(tile);
        let d = xt.last_dim();
        let (rows, trows) = (xt.rows(), tt.numel() / d.max(1));
        if xt.rank() < 1 || !tt.numel().is_multiple_of(d.max(1)) || trows == 0 || rows % trows != 0 || tt.last_dim() != d {
            return shape_err("add_tiled", format!("{:?} + tile {:?}", xt.shape(), tt.shape()));
        }
        let td = tt.data();
        let mut out = Vec::with_capacity(xt.numel());
        for (r, row) in xt.data().chunks(d).enumerate() {
            let t = &td[(r % trows) * d..(r % trows + 1) * d];
            out.extend(row.iter().zip(t).map(|(&a, &b)| a + b));
        }
        let t = Tensor::new(out, xt.shape().to_vec())?;
        let needs = self.needs(&[x, tile]);
        self.push("add_tiled", t, Op::AddTiled(x, tile), needs)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).gelu();
        let needs = self.needs(&[x]);
        self.push("gelu", t, Op::Gelu(x), needs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).relu();
        let needs = self.needs(&[x]);
        self.push("relu", t, Op::Relu(x), needs)
    }

    // ----- normalization --------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x).softmax(axis)?;
        let needs = self.needs(&[x]);
        self.push("softmax", t, Op::Softmax { x, axis }, needs)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xt = self.value(x);
        if axis >= xt.rank() {
            return shape_err("log_softmax", format!("axis {axis} for shape {:?}", xt.shape()));
        }
        let (o, l, i) = kernels::axis_split(xt.shape(), axis);
        let t = Tensor::new(kernels::log_softmax(xt.data(), o, l, i), xt.shape().to_vec())?;
        let needs = self.needs(&[x]);
        self.push("log_softmax", t, Op::LogSoftmax { x, axis }, needs)
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xt = self.value(x);
        let d = xt.last_dim();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return shape_err(
                "layernorm",
                format!("input {:?}, gain {:?}, bias {:?}", xt.shape(), self.shape(gain), self.shape(bias)),
            );
        }
        let out = kernels::layernorm(xt.data(), d, self.data(gain), self.data(bias), eps);
        let t = Tensor::new(out.y, xt.shape().to_vec())?;
        let needs = self.needs(&[x, gain, bias]);
        self.push("layernorm", t, Op::LayerNorm { x, gain, bias, xhat: out.xhat, rstd: out.rstd }, needs)
    }

    /// Row-wise unit-norm rescale over the last axis. All-zero rows map to
    /// zero rows.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let (y, norms) = kernels::l2_normalize(xt.data(), xt.last_dim());
        let t = Tensor::new(y, xt.shape().to_vec())?;
        let needs = self.needs(&[x]);
        self.push("l2_normalize", t, Op::L2Normalize { x, norms }, needs)
    }

    // ----- structure ------------------------------------------------------

    /// Column-wise max over consecutive blocks of `group` rows: `[G*group, C]`
    /// becomes `[G, C]`. Ties go to the earliest row.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, c) = matrix_dims("group_max", self.value(x))?;
        if group == 0 || rows % group != 0 {
            return shape_err("group_max", format!("{rows} rows not divisible into groups of {group}"));
        }
        let g = rows / group;
        let d = self.data(x);
        let mut out = vec![T::zero(); g * c];
        let mut argmax = vec![0usize; g * c];
        for gi in 0..g {
            let o = &mut out[gi * c..(gi + 1) * c];
            let am = &mut argmax[gi * c..(gi + 1) * c];
            let first = gi * group;
            o.copy_from_slice(&d[first * c..(first + 1) * c]);
            am.fill(first);
            for r in first + 1..first + group {
                let row = &d[r * c..(r + 1) * c];
                for col in 0..c {
                    if row[col] > o[col] {
                        o[col] = row[col];
                        am[col] = r;
                    }
                }
            }
        }
        let needs = self.needs(&[x]);
        self.push("group_max", Tensor::new(out, vec![g, c])?, Op::GroupMax { x, argmax }, needs)
    }

    /// Selects rows of a `[n, C]` input by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (n, c) = matrix_dims("gather_rows", self.value(x))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return shape_err("gather_rows", format!("row {bad} out of {n}"));
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(out, vec![idx.len(), c])?;
        let needs = self.needs(&[x]);
        self.push("gather_rows", t, Op::GatherRows { x, idx }, needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = match parts.first() {
            Some(&p) => matrix_dims("concat_rows", self.value(p))?.1,
            None => return Err(NumError::Argument("concat_rows of nothing".into())),
        };
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = matrix_dims("concat_rows", self.value(p))?;
            if pc != c {
                return shape_err("concat_rows", format!("width {pc} vs {c}"));
            }
            out.extend_from_slice(self.data(p));
            rows += r;
        }
        let needs = self.needs(parts);
        self.push("concat_rows", Tensor::new(out, vec![rows, c])?, Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = matrix_dims("concat_cols", self.value(a))?;
        let (rb, cb) = matrix_dims("concat_cols", self.value(b))?;
        if ra != rb {
            return shape_err("concat_cols", format!("{ra} rows vs {rb}"));
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&da[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let needs = self.needs(&[a, b]);
        self.push("concat_cols", Tensor::new(out, vec![ra, ca + cb])?, Op::ConcatCols(a, b), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let needs = self.needs(&[x]);
        self.push("reshape", t, Op::Reshape(x), needs)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return shape_err("permute", format!("perm {perm:?} for shape {shape:?}"));
        }
        let out = kernels::permute(self.data(x), &shape, perm);
        let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let needs = self.needs(&[x]);
        self.push("permute", Tensor::new(out, new_shape)?, Op::Permute { x, perm: perm.to_vec() }, needs)
    }

    // ----- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().fold(T::zero(), |a, &v| a + v);
        let needs = self.needs(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        if d.is_empty() {
            return Err(NumError::Argument("mean of empty tensor".into()));
        }
        let s = d.iter().fold(T::zero(), |a, &v| a + v) / T::cast(d.len() as f64);
        let needs = self.needs(&[x]);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), needs)
    }

    /// `out[i] = x[i, idx[i]]` for a `[n, C]` input.
    pub fn pick(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (n, c) = matrix_dims("pick", self.value(x))?;
        if idx.len() != n || idx.iter().any(|&j| j >= c) {
            return shape_err("pick", format!("{} indices for [{n}, {c}]", idx.len()));
        }
        let d = self.data(x);
        let out: Vec<T> = idx.iter().enumerate().map(|(i, &j)| d[i * c + j]).collect();
        let needs = self.needs(&[x]);
        self.push("pick", Tensor::new(out, vec![n])?, Op::Pick { x, idx }, needs)
    }

    // ----- backward -------------------------------------------------------

    /// Accumulates `d loss / d node` into every node that requires a gradient.
    /// Gradients from earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(NumError::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(loss)
            )));
        }
        for n in &mut self.nodes {
            n.value.clear_grad();
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NumError::NonFinite { op: "backward" });
            }
            self.nodes[i].value.set_grad(g)?;
        }
        Ok(())
    }

    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<T>>]) -> Option<&'g mut Vec<T>> {
        let n = &self.nodes[v.0];
        if !n.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n.value.numel()]))
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(ga) = self.slot(*a, grads) {
                    // dA = dC * B^T
                    gemm(m, n, k, g, Layout::row_major(0, n), self.data(*b), Layout::transposed(0, n), T::one(), ga, Layout::row_major(0, k));
                }
                if let Some(gb) = self.slot(*b, grads) {
                    // dB = A^T * dC
                    gemm(k, m, n, self.data(*a), Layout::transposed(0, k), g, Layout::row_major(0, n), T::one(), gb, Layout::row_major(0, n));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (gcount, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.shape(i_var(i))[2];
                let (da, db) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(*a, grads) {
                    for s in 0..gcount {
                        // dA = dC * B^T, where B is [k, n] or stored [n, k]
                        let lb = if *trans_b { Layout::row_major(s * n * k, k) } else { Layout::transposed(s * k * n, n) };
                        gemm(m, n, k, g, Layout::row_major(s * m * n, n), db, lb, T::one(), ga, Layout::row_major(s * m * k, k));
                    }
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for s in 0..gcount {
                        if *trans_b {
                            // dB[n, k] = dC^T * A
                            gemm(n, m, k, g, Layout::transposed(s * m * n, n), da, Layout::row_major(s * m * k, k), T::one(), gb, Layout::row_major(s * n * k, k));
                        } else {
                            // dB[k, n] = A^T * dC
                            gemm(k, m, n, da, Layout::transposed(s * m * k, k), g, Layout::row_major(s * m * n, n), T::one(), gb, Layout::row_major(s * k * n, n));
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let gt = kernels::permute(g, &[s[1], s[0]], &[1, 0]);
                if let Some(gx) = self.slot(*x, grads) {
                    add_into(gx, &gt);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(*a, grads) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(*a, grads) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    gb.iter_mut().zip(g).for_each(|(d, &v)| *d = *d - v);
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(*a, grads) {
                    ga.iter_mut().zip(g.iter().zip(db)).for_each(|(d, (&v, &y))| *d = *d + v * y);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    gb.iter_mut().zip(g.iter().zip(da)).for_each(|(d, (&v, &x))| *d = *d + v * x);
                }
            }
            Op::Affine { x, scale } => {
                if let Some(gx) = self.slot(*x, grads) {
                    gx.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + *scale * v);
                }
            }
            Op::AddTiled(x, tile) => {
                if let Some(gx) = self.slot(*x, grads) {
                    add_into(gx, g);
                }
                let d = self.value(*tile).last_dim();
                let trows = self.value(*tile).numel() / d;
                if let Some(gt) = self.slot(*tile, grads) {
                    for (r, row) in g.chunks(d).enumerate() {
                        let t = &mut gt[(r % trows) * d..(r % trows + 1) * d];
                        t.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                    }
                }
            }
            Op::Gelu(x) => {
                let dx = self.data(*x);
                if let Some(gx) = self.slot(*x, grads) {
                    gx.iter_mut().zip(g.iter().zip(dx)).for_each(|(d, (&v, &xv))| *d = *d + v * kernels::gelu_grad(xv));
                }
            }
            Op::Relu(x) => {
                let dx = self.data(*x);
                if let Some(gx) = self.slot(*x, grads) {
                    gx.iter_mut().zip(g.iter().zip(dx)).for_each(|(d, (&v, &xv))| {
                        if xv > T::zero() {
                            *d = *d + v;
                        }
                    });
                }
            }
            Op::Softmax { x, axis } => {
                let (o, l, inn) = kernels::axis_split(self.shape(*x), *axis);
                if let Some(gx) = self.slot(*x, grads) {
                    for oo in 0..o {
                        for ii in 0..inn {
                            let at = |j: usize| (oo * l + j) * inn + ii;
                            let dot = (0..l).fold(T::zero(), |s, j| s + g[at(j)] * out[at(j)]);
                            for j in 0..l {
                                gx[at(j)] = gx[at(j)] + out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                let (o, l, inn) = kernels::axis_split(self.shape(*x), *axis);
                if let Some(gx) = self.slot(*x, grads) {
                    for oo in 0..o {
                        for ii in 0..inn {
                            let at = |j: usize| (oo * l + j) * inn + ii;
                            let total = (0..l).fold(T::zero(), |s, j| s + g[at(j)]);
                            for j in 0..l {
                                gx[at(j)] = gx[at(j)] + g[at(j)] - out[at(j)].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = self.value(*x).last_dim();
                let rows = rstd.len();
                let gd = self.data(*gain);
                if let Some(gg) = self.slot(*gain, grads) {
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] = gg[c] + g[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if let Some(gb) = self.slot(*bias, grads) {
                    for r in 0..rows {
                        for c in 0..d {
                            gb[c] = gb[c] + g[r * d + c];
                        }
                    }
                }
                if let Some(gx) = self.slot(*x, grads) {
                    let dn = T::cast(d as f64);
                    for r in 0..rows {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for c in 0..d {
                            let dh = g[r * d + c] * gd[c];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * xhat[r * d + c];
                        }
                        mean_dh = mean_dh / dn;
                        mean_dh_h = mean_dh_h / dn;
                        for c in 0..d {
                            let dh = g[r * d + c] * gd[c];
                            gx[r * d + c] = gx[r * d + c] + rstd[r] * (dh - mean_dh - xhat[r * d + c] * mean_dh_h);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let d = self.value(*x).last_dim();
                if let Some(gx) = self.slot(*x, grads) {
                    for (r, &n) in norms.iter().enumerate() {
                        if n <= T::zero() {
                            continue;
                        }
                        let row = r * d..(r + 1) * d;
                        let dot = row.clone().fold(T::zero(), |s, c| s + g[c] * out[c]);
                        for c in row {
                            gx[c] = gx[c] + (g[c] - out[c] * dot) / n;
                        }
                    }
                }
            }
            Op::GroupMax { x, argmax } => {
                let c = self.shape(*x)[1];
                if let Some(gx) = self.slot(*x, grads) {
                    for (o, &src) in argmax.iter().enumerate() {
                        let t = src * c + o % c;
                        gx[t] = gx[t] + g[o];
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let c = self.shape(*x)[1];
                if let Some(gx) = self.slot(*x, grads) {
                    for (o, &src) in idx.iter().enumerate() {
                        for col in 0..c {
                            gx[src * c + col] = gx[src * c + col] + g[o * c + col];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if let Some(gp) = self.slot(p, grads) {
                        add_into(gp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(a, b) => {
                let (rows, ca) = (self.shape(*a)[0], self.shape(*a)[1]);
                let cb = self.shape(*b)[1];
                let w = ca + cb;
                if let Some(ga) = self.slot(*a, grads) {
                    for r in 0..rows {
                        for c in 0..ca {
                            ga[r * ca + c] = ga[r * ca + c] + g[r * w + c];
                        }
                    }
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for r in 0..rows {
                        for c in 0..cb {
                            gb[r * cb + c] = gb[r * cb + c] + g[r * w + ca + c];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(*x, grads) {
                    add_into(gx, g);
                }
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let gt = kernels::permute(g, node.value.shape(), &inverse);
                if let Some(gx) = self.slot(*x, grads) {
                    add_into(gx, &gt);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(*x, grads) {
                    gx.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Mean(x) => {
                let n = T::cast(self.value(*x).numel() as f64);
                if let Some(gx) = self.slot(*x, grads) {
                    gx.iter_mut().for_each(|d| *d = *d + g[0] / n);
                }
            }
            Op::Pick { x, idx } => {
                let c = self.shape(*x)[1];
                if let Some(gx) = self.slot(*x, grads) {
                    for (r, &j) in idx.iter().enumerate() {
                        gx[r * c + j] = gx[r * c + j] + g[r];
                    }
                }
            }
        }
        Ok(())
    }
}

fn i_var(i: usize) -> Var {
    Var(i)
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}
