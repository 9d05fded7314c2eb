//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles and
//! [`Tape::backward`] replays the record in reverse, accumulating adjoints
//! with additive fan-out. The primitive set covers exactly what the
//! denoising network needs: elementwise arithmetic, matrix products, row
//! normalization, gather/scatter, grid convolution and pooling,
//! interpolation row maps, and a scattered depthwise convolution.

mod check;
mod conv;
mod params;

pub use check::{grad_check, GradCheckFailure, GradCheckReport, ABS_FLOOR, FD_STEP, REL_TOL};
pub use conv::{conv2d_forward, SparseConvPlan, SparseTap};
pub use params::{Adam, ParamSet};

use crate::error::{Error, Result};
use crate::field::InterpPlan;
use std::cell::RefCell;
use std::sync::Arc;

/// A dense row-major tensor of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {want} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, format!("expected a 2-d tensor, got shape {other:?}"))),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum OpRecord {
    Input,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Lincomb { a: Var, ca: f64, b: Var, cb: f64 },
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    AddBias { x: Var, b: Var },
    MulBias { x: Var, s: Var },
    Silu(Var),
    RowNorm { x: Var, eps: f64 },
    GatherRows { x: Var, idx: Arc<Vec<u32>> },
    ScatterAddRows { x: Var, idx: Arc<Vec<u32>> },
    MeanAll(Var),
    SumAll(Var),
    RowMap { x: Var, plan: Arc<InterpPlan> },
    SparseConv { x: Var, kernel: Var, plan: Arc<SparseConvPlan> },
    Conv2d { x: Var, kernel: Var, h: usize, w: usize, cin: usize, cout: usize },
    AvgPool2 { x: Var, h: usize, w: usize, c: usize },
    Upsample2 { x: Var, h: usize, w: usize, c: usize },
    Reshape(Var),
    Detach,
}

struct Node {
    value: Tensor,
    op: OpRecord,
}

/// Records a computation as it runs; one tape per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    adj: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `v`, `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.adj[v.0].as_ref()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Evaluate the scattered depthwise convolution outside any tape.
pub fn sparse_conv_values(plan: &SparseConvPlan, x: &[f64], kernel: &[f64], channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; plan.num_points * channels];
    conv::sparse_conv_forward(plan, x, kernel, channels, &mut out);
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Enter a tensor as a leaf.
    pub fn input(&self, t: Tensor) -> Var {
        self.push(t, OpRecord::Input)
    }

    /// Clone out the value at `v`.
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape.clone()
    }

    fn push(&self, value: Tensor, op: OpRecord) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    fn binary_same_shape(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", ta.shape, tb.shape)));
        }
        Ok(Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect(),
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same_shape("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, OpRecord::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same_shape("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, OpRecord::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same_shape("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, OpRecord::Mul(a, b)))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            Tensor { shape: ta.shape.clone(), data: ta.data.iter().map(|x| c * x).collect() }
        };
        self.push(v, OpRecord::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            Tensor { shape: ta.shape.clone(), data: ta.data.iter().map(|x| c + x).collect() }
        };
        self.push(v, OpRecord::AddScalar(a))
    }

    /// `ca*a + cb*b` elementwise.
    pub fn lincomb(&self, ca: f64, a: Var, cb: f64, b: Var) -> Result<Var> {
        let v = self.binary_same_shape("lincomb", a, b, |x, y| ca * x + cb * y)?;
        Ok(self.push(v, OpRecord::Lincomb { a, ca, b, cb }))
    }

    /// `a (m x k) · b (k x n)`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, m, k, n) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, ka) = ta.rows_cols("matmul")?;
            let (kb, n) = tb.rows_cols("matmul")?;
            if ka != kb {
                return Err(Error::shape("matmul", format!("{:?} vs {:?}", ta.shape, tb.shape)));
            }
            let mut out = vec![0.0; m * n];
            conv::gemm_nn(m, ka, n, &ta.data, &tb.data, 0.0, &mut out);
            (Tensor { shape: vec![m, n], data: out }, m, ka, n)
        };
        Ok(self.push(value, OpRecord::Matmul { a, b, m, k, n }))
    }

    /// Add a length-`c` bias vector to every row of `x (r x c)`.
    pub fn add_bias(&self, x: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (tx, tb) = (&nodes[x.0].value, &nodes[b.0].value);
            let (_, c) = tx.rows_cols("add_bias")?;
            if tb.len() != c {
                return Err(Error::shape("add_bias", format!("{:?} vs bias {:?}", tx.shape, tb.shape)));
            }
            let data = tx
                .data
                .chunks_exact(c)
                .flat_map(|row| row.iter().zip(&tb.data).map(|(v, bv)| v + bv))
                .collect();
            Tensor { shape: tx.shape.clone(), data }
        };
        Ok(self.push(value, OpRecord::AddBias { x, b }))
    }

    /// Multiply every row of `x (r x c)` elementwise by a length-`c` vector.
    pub fn mul_bias(&self, x: Var, s: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (tx, ts) = (&nodes[x.0].value, &nodes[s.0].value);
            let (_, c) = tx.rows_cols("mul_bias")?;
            if ts.len() != c {
                return Err(Error::shape("mul_bias", format!("{:?} vs scale {:?}", tx.shape, ts.shape)));
            }
            let data = tx
                .data
                .chunks_exact(c)
                .flat_map(|row| row.iter().zip(&ts.data).map(|(v, sv)| v * sv))
                .collect();
            Tensor { shape: tx.shape.clone(), data }
        };
        Ok(self.push(value, OpRecord::MulBias { x, s }))
    }

    pub fn silu(&self, x: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            Tensor { shape: tx.shape.clone(), data: tx.data.iter().map(|v| v * sigmoid(*v)).collect() }
        };
        self.push(value, OpRecord::Silu(x))
    }

    /// Normalize each row of `x (r x c)` to zero mean and unit variance.
    pub fn row_norm(&self, x: Var, eps: f64) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let (_, c) = tx.rows_cols("row_norm")?;
            let mut data = Vec::with_capacity(tx.len());
            for row in tx.data.chunks_exact(c) {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                data.extend(row.iter().map(|v| (v - mean) * inv));
            }
            Tensor { shape: tx.shape.clone(), data }
        };
        Ok(self.push(value, OpRecord::RowNorm { x, eps }))
    }

    /// `out[i, :] = x[idx[i], :]`.
    pub fn gather_rows(&self, x: Var, idx: Arc<Vec<u32>>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let (r, c) = tx.rows_cols("gather_rows")?;
            if let Some(&bad) = idx.iter().find(|&&i| i as usize >= r) {
                return Err(Error::shape("gather_rows", format!("index {bad} out of {r} rows")));
            }
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx.iter() {
                data.extend_from_slice(&tx.data[i as usize * c..(i as usize + 1) * c]);
            }
            Tensor { shape: vec![idx.len(), c], data }
        };
        Ok(self.push(value, OpRecord::GatherRows { x, idx }))
    }

    /// `out[idx[i], :] += x[i, :]` into a zeroed `out_rows x c` tensor.
    pub fn scatter_add_rows(&self, x: Var, idx: Arc<Vec<u32>>, out_rows: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let (r, c) = tx.rows_cols("scatter_add_rows")?;
            if idx.len() != r {
                return Err(Error::shape("scatter_add_rows", format!("{r} rows vs {} indices", idx.len())));
            }
            if let Some(&bad) = idx.iter().find(|&&i| i as usize >= out_rows) {
                return Err(Error::shape("scatter_add_rows", format!("index {bad} out of {out_rows} rows")));
            }
            let mut data = vec![0.0; out_rows * c];
            for (row, &i) in tx.data.chunks_exact(c).zip(idx.iter()) {
                let dst = &mut data[i as usize * c..(i as usize + 1) * c];
                for (d, v) in dst.iter_mut().zip(row) {
                    *d += v;
                }
            }
            Tensor { shape: vec![out_rows, c], data }
        };
        Ok(self.push(value, OpRecord::ScatterAddRows { x, idx }))
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            Tensor::scalar(tx.data.iter().sum::<f64>() / tx.len().max(1) as f64)
        };
        self.push(value, OpRecord::MeanAll(x))
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            Tensor::scalar(tx.data.iter().sum::<f64>())
        };
        self.push(value, OpRecord::SumAll(x))
    }

    /// Apply a precomputed interpolation plan to the rows of `x`.
    pub fn row_map(&self, x: Var, plan: Arc<InterpPlan>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let (r, c) = tx.rows_cols("row_map")?;
            if plan.num_sources != r {
                return Err(Error::shape("row_map", format!("plan wants {} source rows, got {r}", plan.num_sources)));
            }
            Tensor { shape: vec![plan.num_rows(), c], data: plan.apply(&tx.data, c) }
        };
        Ok(self.push(value, OpRecord::RowMap { x, plan }))
    }

    /// Scattered depthwise convolution of `x (m x c)` with a `cells x c`
    /// kernel grid under a precomputed tap plan.
    pub fn sparse_conv(&self, x: Var, kernel: Var, plan: Arc<SparseConvPlan>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (tx, tk) = (&nodes[x.0].value, &nodes[kernel.0].value);
            let (m, c) = tx.rows_cols("sparse_conv")?;
            let (cells, ck) = tk.rows_cols("sparse_conv")?;
            if m != plan.num_points || cells != plan.kernel_cells || ck != c {
                return Err(Error::shape(
                    "sparse_conv",
                    format!(
                        "plan ({} points, {} cells) vs x {:?}, kernel {:?}",
                        plan.num_points, plan.kernel_cells, tx.shape, tk.shape
                    ),
                ));
            }
            let mut out = vec![0.0; m * c];
            conv::sparse_conv_forward(&plan, &tx.data, &tk.data, c, &mut out);
            Tensor { shape: vec![m, c], data: out }
        };
        Ok(self.push(value, OpRecord::SparseConv { x, kernel, plan }))
    }

    /// 3x3 zero-padded convolution over an `h x w` grid stored as rows of
    /// pixels; kernel is `9*cin x cout`.
    pub fn conv2d(&self, x: Var, kernel: Var, h: usize, w: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (tx, tk) = (&nodes[x.0].value, &nodes[kernel.0].value);
            let (r, cin) = tx.rows_cols("conv2d")?;
            let (kr, cout) = tk.rows_cols("conv2d")?;
            if r != h * w || kr != 9 * cin {
                return Err(Error::shape(
                    "conv2d",
                    format!("x {:?} on {h}x{w} grid with kernel {:?}", tx.shape, tk.shape),
                ));
            }
            let mut out = vec![0.0; h * w * cout];
            conv::conv2d_forward(&tx.data, &tk.data, h, w, cin, cout, &mut out);
            Tensor { shape: vec![h * w, cout], data: out }
        };
        let (cin, cout) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].value.shape[1], nodes[kernel.0].value.shape[1])
        };
        Ok(self.push(value, OpRecord::Conv2d { x, kernel, h, w, cin, cout }))
    }

    /// 2x2 mean pooling of an even `h x w` grid.
    pub fn avg_pool2(&self, x: Var, h: usize, w: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let (r, c) = tx.rows_cols("avg_pool2")?;
            if r != h * w || h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape("avg_pool2", format!("x {:?} on {h}x{w} grid", tx.shape)));
            }
            let (h2, w2) = (h / 2, w / 2);
            let mut data = vec![0.0; h2 * w2 * c];
            for i2 in 0..h2 {
                for j2 in 0..w2 {
                    let dst = &mut data[(i2 * w2 + j2) * c..(i2 * w2 + j2 + 1) * c];
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let src = ((2 * i2 + di) * w + 2 * j2 + dj) * c;
                        for (d, v) in dst.iter_mut().zip(&tx.data[src..src + c]) {
                            *d += 0.25 * v;
                        }
                    }
                }
            }
            Tensor { shape: vec![h2 * w2, c], data }
        };
        let c = self.shape_of(x)[1];
        Ok(self.push(value, OpRecord::AvgPool2 { x, h, w, c }))
    }

    /// Nearest-neighbour 2x upsampling of an `h x w` grid.
    pub fn upsample2(&self, x: Var, h: usize, w: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let (r, c) = tx.rows_cols("upsample2")?;
            if r != h * w {
                return Err(Error::shape("upsample2", format!("x {:?} on {h}x{w} grid", tx.shape)));
            }
            let (h2, w2) = (2 * h, 2 * w);
            let mut data = vec![0.0; h2 * w2 * c];
            for i in 0..h2 {
                for j in 0..w2 {
                    let src = ((i / 2) * w + j / 2) * c;
                    let dst = (i * w2 + j) * c;
                    data[dst..dst + c].copy_from_slice(&tx.data[src..src + c]);
                }
            }
            Tensor { shape: vec![h2 * w2, c], data }
        };
        let c = self.shape_of(x)[1];
        Ok(self.push(value, OpRecord::Upsample2 { x, h, w, c }))
    }

    /// Same data, new shape.
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            if shape.iter().product::<usize>() != tx.len() {
                return Err(Error::shape("reshape", format!("{:?} to {shape:?}", tx.shape)));
            }
            Tensor { shape: shape.to_vec(), data: tx.data.clone() }
        };
        Ok(self.push(value, OpRecord::Reshape(x)))
    }

    /// Identity forward, zero adjoint: cuts the graph.
    pub fn detach(&self, x: Var) -> Var {
        let value = self.value(x);
        self.push(value, OpRecord::Detach)
    }

    /// Accumulate adjoints of every node the scalar `loss` depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(1.0));

        // Shape-preserving accumulation into a possibly empty slot.
        fn acc<'a>(adj: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut [f64] {
            let slot = &mut adj[v.0];
            if slot.is_none() {
                *slot = Some(Tensor::zeros(shape));
            }
            slot.as_mut().unwrap().data_mut()
        }
        fn axpy(dst: &mut [f64], c: f64, src: &[f64]) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += c * s;
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &nodes[i].op {
                OpRecord::Input => {}
                OpRecord::Add(a, b) => {
                    axpy(acc(&mut adj, *a, g.shape()), 1.0, g.data());
                    axpy(acc(&mut adj, *b, g.shape()), 1.0, g.data());
                }
                OpRecord::Sub(a, b) => {
                    axpy(acc(&mut adj, *a, g.shape()), 1.0, g.data());
                    axpy(acc(&mut adj, *b, g.shape()), -1.0, g.data());
                }
                OpRecord::Mul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let ga = acc(&mut adj, *a, g.shape());
                    for ((d, gv), bv) in ga.iter_mut().zip(g.data()).zip(&vb.data) {
                        *d += gv * bv;
                    }
                    let gb = acc(&mut adj, *b, g.shape());
                    for ((d, gv), av) in gb.iter_mut().zip(g.data()).zip(&va.data) {
                        *d += gv * av;
                    }
                }
                OpRecord::Scale(a, c) => axpy(acc(&mut adj, *a, g.shape()), *c, g.data()),
                OpRecord::AddScalar(a) => axpy(acc(&mut adj, *a, g.shape()), 1.0, g.data()),
                OpRecord::Lincomb { a, ca, b, cb } => {
                    axpy(acc(&mut adj, *a, g.shape()), *ca, g.data());
                    axpy(acc(&mut adj, *b, g.shape()), *cb, g.data());
                }
                OpRecord::Matmul { a, b, m, k, n } => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    // adj_a += g · bᵗ; adj_b += aᵗ · g
                    conv::gemm_nt(*m, *n, *k, g.data(), &vb.data, 1.0, acc(&mut adj, *a, &[*m, *k]));
                    conv::gemm_tn(*k, *m, *n, &va.data, g.data(), 1.0, acc(&mut adj, *b, &[*k, *n]));
                }
                OpRecord::AddBias { x, b } => {
                    let c = nodes[b.0].value.len();
                    axpy(acc(&mut adj, *x, g.shape()), 1.0, g.data());
                    let gb = acc(&mut adj, *b, &[c]);
                    for row in g.data().chunks_exact(c) {
                        for (d, v) in gb.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                OpRecord::MulBias { x, s } => {
                    let vs = &nodes[s.0].value;
                    let vx = &nodes[x.0].value;
                    let c = vs.len();
                    {
                        let gx = acc(&mut adj, *x, g.shape());
                        for (grow, xrow) in gx.chunks_exact_mut(c).zip(g.data().chunks_exact(c)) {
                            for ((d, gv), sv) in grow.iter_mut().zip(xrow).zip(&vs.data) {
                                *d += gv * sv;
                            }
                        }
                    }
                    let gs = acc(&mut adj, *s, &[c]);
                    for (grow, xrow) in g.data().chunks_exact(c).zip(vx.data.chunks_exact(c)) {
                        for ((d, gv), xv) in gs.iter_mut().zip(grow).zip(xrow) {
                            *d += gv * xv;
                        }
                    }
                }
                OpRecord::Silu(x) => {
                    let vx = &nodes[x.0].value;
                    let gx = acc(&mut adj, *x, g.shape());
                    for ((d, gv), xv) in gx.iter_mut().zip(g.data()).zip(&vx.data) {
                        let s = sigmoid(*xv);
                        *d += gv * s * (1.0 + xv * (1.0 - s));
                    }
                }
                OpRecord::RowNorm { x, eps } => {
                    let vx = &nodes[x.0].value;
                    let c = vx.shape[1];
                    let gx = acc(&mut adj, *x, g.shape());
                    for ((grow, xrow), drow) in g
                        .data()
                        .chunks_exact(c)
                        .zip(vx.data.chunks_exact(c))
                        .zip(gx.chunks_exact_mut(c))
                    {
                        let mean = xrow.iter().sum::<f64>() / c as f64;
                        let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let m1 = grow.iter().sum::<f64>() / c as f64;
                        let m2 = grow
                            .iter()
                            .zip(xrow)
                            .map(|(gv, xv)| gv * (xv - mean) * inv)
                            .sum::<f64>()
                            / c as f64;
                        for ((d, gv), xv) in drow.iter_mut().zip(grow).zip(xrow) {
                            let xhat = (xv - mean) * inv;
                            *d += (gv - m1 - xhat * m2) * inv;
                        }
                    }
                }
                OpRecord::GatherRows { x, idx } => {
                    let shape = nodes[x.0].value.shape.clone();
                    let c = shape[1];
                    let gx = acc(&mut adj, *x, &shape);
                    for (row, &src) in g.data().chunks_exact(c).zip(idx.iter()) {
                        let dst = &mut gx[src as usize * c..(src as usize + 1) * c];
                        for (d, v) in dst.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                OpRecord::ScatterAddRows { x, idx } => {
                    let shape = nodes[x.0].value.shape.clone();
                    let c = shape[1];
                    let gx = acc(&mut adj, *x, &shape);
                    for (row, &dst) in gx.chunks_exact_mut(c).zip(idx.iter()) {
                        let src = &g.data()[dst as usize * c..(dst as usize + 1) * c];
                        for (d, v) in row.iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                OpRecord::MeanAll(x) => {
                    let shape = nodes[x.0].value.shape.clone();
                    let n = nodes[x.0].value.len().max(1) as f64;
                    let gv = g.item() / n;
                    for d in acc(&mut adj, *x, &shape) {
                        *d += gv;
                    }
                }
                OpRecord::SumAll(x) => {
                    let shape = nodes[x.0].value.shape.clone();
                    let gv = g.item();
                    for d in acc(&mut adj, *x, &shape) {
                        *d += gv;
                    }
                }
                OpRecord::RowMap { x, plan } => {
                    let shape = nodes[x.0].value.shape.clone();
                    let c = shape[1];
                    let gx = acc(&mut adj, *x, &shape);
                    for i in 0..plan.num_rows() {
                        let (srcs, ws) = plan.row(i);
                        let grow = &g.data()[i * c..(i + 1) * c];
                        for (&s, &w) in srcs.iter().zip(ws) {
                            let dst = &mut gx[s as usize * c..(s as usize + 1) * c];
                            for (d, v) in dst.iter_mut().zip(grow) {
                                *d += w * v;
                            }
                        }
                    }
                }
                OpRecord::SparseConv { x, kernel, plan } => {
                    let vx = &nodes[x.0].value;
                    let vk = &nodes[kernel.0].value;
                    let c = vx.shape[1];
                    // Two exclusive accumulators are needed at once; take
                    // them out of the table and put them back afterwards.
                    let mut gx = adj[x.0].take().unwrap_or_else(|| Tensor::zeros(vx.shape()));
                    let mut gk = adj[kernel.0].take().unwrap_or_else(|| Tensor::zeros(vk.shape()));
                    conv::sparse_conv_backward(plan, &vx.data, &vk.data, c, g.data(), gx.data_mut(), gk.data_mut());
                    adj[x.0] = Some(gx);
                    adj[kernel.0] = Some(gk);
                }
                OpRecord::Conv2d { x, kernel, h, w, cin, cout } => {
                    let vx = &nodes[x.0].value;
                    let vk = &nodes[kernel.0].value;
                    let mut gx = adj[x.0].take().unwrap_or_else(|| Tensor::zeros(vx.shape()));
                    let mut gk = adj[kernel.0].take().unwrap_or_else(|| Tensor::zeros(vk.shape()));
                    conv::conv2d_backward(
                        &vx.data, &vk.data, *h, *w, *cin, *cout,
                        g.data(), gx.data_mut(), gk.data_mut(),
                    );
                    adj[x.0] = Some(gx);
                    adj[kernel.0] = Some(gk);
                }
                OpRecord::AvgPool2 { x, h, w, c } => {
                    let gx = acc(&mut adj, *x, &[h * w, *c]);
                    let w2 = w / 2;
                    for i2 in 0..h / 2 {
                        for j2 in 0..w2 {
                            let grow = &g.data()[(i2 * w2 + j2) * c..(i2 * w2 + j2 + 1) * c];
                            for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let dst = ((2 * i2 + di) * w + 2 * j2 + dj) * c;
                                for (d, v) in gx[dst..dst + c].iter_mut().zip(grow) {
                                    *d += 0.25 * v;
                                }
                            }
                        }
                    }
                }
                OpRecord::Upsample2 { x, h, w, c } => {
                    let gx = acc(&mut adj, *x, &[h * w, *c]);
                    let w2 = 2 * w;
                    for i in 0..2 * *h {
                        for j in 0..w2 {
                            let src = (i * w2 + j) * c;
                            let dst = ((i / 2) * w + j / 2) * c;
                            for (d, v) in gx[dst..dst + c].iter_mut().zip(&g.data()[src..src + c]) {
                                *d += v;
                            }
                        }
                    }
                }
                OpRecord::Reshape(x) => {
                    let shape = nodes[x.0].value.shape.clone();
                    axpy(acc(&mut adj, *x, &shape), 1.0, g.data());
                }
                OpRecord::Detach => {}
            }
            adj[i] = Some(g);
        }
        Ok(Gradients { adj })
    }
}
