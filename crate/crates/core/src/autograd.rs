//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value plus whatever it
//! needs for the backward pass. `backward` walks the nodes in reverse
//! recording order, so each node is visited exactly once. Nodes that cannot
//! reach a `requires_grad` leaf are skipped entirely, which means frozen
//! weights never get a gradient buffer and no weight-gradient work is done
//! for them.

use crate::error::{Error, Result};
use crate::tensor::{dot, mm_nn_acc, mm_nt_acc, mm_tn_acc, Tensor};

pub const LAYERNORM_EPS: f32 = 1e-5;

const SQRT_2_OVER_PI: f32 = 0.797_884_6;
const GELU_CUBIC: f32 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Softmax(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        from: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        from: usize,
    },
    GatherCols {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    MeanRows(Var),
    SmoothedCe {
        logits: Var,
        targets: Vec<usize>,
        eps: f32,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::Add(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Gelu(x) | Op::Softmax(x) | Op::Sum(x) | Op::MeanRows(x) => {
                vec![*x]
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
            Op::SliceRows { x, .. } | Op::SliceCols { x, .. } | Op::GatherCols { x, .. } => {
                vec![*x]
            }
            Op::SmoothedCe { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    needs_grad: bool,
}

/// Ordered record of primitive operations.
///
/// A tape is single-owner; independent replicas each build their own.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Only leaves created with
    /// `requires_grad = true` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call, if this node received one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn shape(&self, v: Var) -> Vec<usize> {
        let (r, c) = self.dims(v);
        vec![r, c]
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a),
                rhs: self.shape(b),
            });
        }
        let mut out = vec![0.0; m * n];
        mm_nn_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b))
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: self.shape(a),
                rhs: self.shape(b),
            });
        }
        let mut out = vec![0.0; m * n];
        mm_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(
            "matmul_nt",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMulNT(a, b),
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a),
                rhs: self.shape(b),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a);
        self.push("add", Tensor::from_parts(shape, data), Op::Add(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a);
        self.push("mul", Tensor::from_parts(shape, data), Op::Mul(a, b))
    }

    /// Adds a `1×n` row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(bias).numel() != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape(x),
                rhs: self.shape(bias),
            });
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.push("add_row", Tensor::from_parts(vec![m, n], data), Op::AddRow(x, bias))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let shape = self.shape(x);
        self.push("scale", Tensor::from_parts(shape, data), Op::Scale(x, s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x);
        self.push("gelu", Tensor::from_parts(shape, data), Op::Gelu(x))
    }

    /// Per-row normalization over the last dimension followed by the affine
    /// map `gamma ⊙ x̂ + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (m, d) = self.dims(x);
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::Shape {
                op: "layernorm",
                lhs: self.shape(x),
                rhs: self.shape(gamma),
            });
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0f32; m * d];
        let mut inv_std = vec![0.0f32; m];
        let mut out = vec![0.0f32; m * d];
        for r in 0..m {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = g[c] * h + b[c];
            }
        }
        self.push(
            "layernorm",
            Tensor::from_parts(vec![m, d], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        self.push("softmax_rows", Tensor::from_parts(vec![m, n], data), Op::Softmax(x))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("concat_rows of nothing".into()));
        };
        let n = self.dims(first).1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.shape(first),
                    rhs: self.shape(p),
                });
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(
            "concat_rows",
            Tensor::from_parts(vec![rows, n], data),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    /// Rows `from..to` of `x`.
    pub fn slice_rows(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if from > to || to > m {
            return Err(Error::OutOfRange {
                op: "slice_rows",
                index: to.max(from),
                len: m,
            });
        }
        let data = self.value(x).data()[from * n..to * n].to_vec();
        self.push(
            "slice_rows",
            Tensor::from_parts(vec![to - from, n], data),
            Op::SliceRows { x, from },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("concat_cols of nothing".into()));
        };
        let m = self.dims(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first),
                    rhs: self.shape(p),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(
            "concat_cols",
            Tensor::from_parts(vec![m, total], data),
            Op::ConcatCols(parts.to_vec()),
        )
    }

    /// Columns `from..to` of `x`.
    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if from > to || to > n {
            return Err(Error::OutOfRange {
                op: "slice_cols",
                index: to.max(from),
                len: n,
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * (to - from));
        for r in 0..m {
            data.extend_from_slice(&src[r * n + from..r * n + to]);
        }
        self.push(
            "slice_cols",
            Tensor::from_parts(vec![m, to - from], data),
            Op::SliceCols { x, from },
        )
    }

    /// Selects columns `idx` (in that order) from every row.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::OutOfRange {
                op: "gather_cols",
                index: bad,
                len: n,
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * idx.len());
        for r in 0..m {
            data.extend(idx.iter().map(|&c| src[r * n + c]));
        }
        self.push(
            "gather_cols",
            Tensor::from_parts(vec![m, idx.len()], data),
            Op::GatherCols {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Sum of all entries as a `1×1` scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push("sum", Tensor::from_parts(vec![1, 1], vec![s as f32]), Op::Sum(x))
    }

    /// Column means, `m×n → 1×n`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let mut acc = vec![0.0f32; n];
        for row in self.value(x).data().chunks_exact(n) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        let inv = 1.0 / m as f32;
        acc.iter_mut().for_each(|a| *a *= inv);
        self.push("mean_rows", Tensor::from_parts(vec![1, n], acc), Op::MeanRows(x))
    }

    /// Mean over rows of the label-smoothed cross-entropy
    /// `−Σ_c ỹ_c log softmax(logits)_c` with `ỹ = (1−ε)·onehot + ε/C`.
    /// Accumulated in `f64`.
    pub fn smoothed_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        eps: f32,
    ) -> Result<Var> {
        let (m, c) = self.dims(logits);
        if targets.len() != m {
            return Err(Error::Shape {
                op: "smoothed_cross_entropy",
                lhs: self.shape(logits),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::OutOfRange {
                op: "smoothed_cross_entropy",
                index: bad,
                len: c,
            });
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::InvalidArgument(format!(
                "label smoothing must lie in [0, 1), got {eps}"
            )));
        }
        let data = self.value(logits).data();
        let mut probs = vec![0.0f64; m * c];
        let mut total = 0.0f64;
        for (r, &y) in targets.iter().enumerate() {
            let row = &data[r * c..(r + 1) * c];
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
            let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            let lse = max + z.ln();
            for (k, &v) in row.iter().enumerate() {
                let logp = v as f64 - lse;
                probs[r * c + k] = logp.exp();
                total -= smoothed_target(k, y, eps, c) * logp;
            }
        }
        let loss = total / m as f64;
        self.push(
            "smoothed_cross_entropy",
            Tensor::from_parts(vec![1, 1], vec![loss as f32]),
            Op::SmoothedCe {
                logits,
                targets: targets.to_vec(),
                eps,
                probs,
            },
        )
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_scaled(loss, 1.0)
    }

    /// Backpropagates `seed · ∂loss`. Used to fold a batch mean over
    /// per-sample tapes into the upstream gradient.
    pub fn backward_scaled(&mut self, loss: Var, seed: f32) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.value(loss).shape().to_vec(),
                rhs: vec![1],
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![seed]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        self.grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                if !node.needs_grad {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                match g {
                    Some(g) => Some(Tensor::from_parts(shape, g)),
                    None if node.requires_grad => Some(Tensor::zeros(&shape)),
                    None => None,
                }
            })
            .collect();
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.wants(*a) {
                    let ga = self.slot(*a, grads);
                    mm_nt_acc(g, self.value(*b).data(), ga, m, n, k);
                }
                if self.wants(*b) {
                    let gb = self.slot(*b, grads);
                    mm_tn_acc(self.value(*a).data(), g, gb, k, m, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                if self.wants(*a) {
                    let ga = self.slot(*a, grads);
                    mm_nn_acc(g, self.value(*b).data(), ga, m, n, k);
                }
                if self.wants(*b) {
                    let gb = self.slot(*b, grads);
                    mm_tn_acc(g, self.value(*a).data(), gb, n, m, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        axpy(self.slot(v, grads), g, 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    let ga = self.slot(*a, grads);
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gv * y;
                    }
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    let gb = self.slot(*b, grads);
                    for ((o, &gv), &x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if self.wants(*x) {
                    axpy(self.slot(*x, grads), g, 1.0);
                }
                if self.wants(*bias) {
                    let n = out_shape[1];
                    let gb = self.slot(*bias, grads);
                    for row in g.chunks_exact(n) {
                        axpy(gb, row, 1.0);
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.wants(*x) {
                    axpy(self.slot(*x, grads), g, *s);
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    let gx = self.slot(*x, grads);
                    for ((o, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gv * gelu_grad(v);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = out_shape[1];
                let gam = self.value(*gamma).data();
                if self.wants(*x) {
                    let gx = self.slot(*x, grads);
                    let df = d as f32;
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut sum_gy = 0.0f32;
                        let mut sum_gyh = 0.0f32;
                        for c in 0..d {
                            let gy = gr[c] * gam[c];
                            sum_gy += gy;
                            sum_gyh += gy * hr[c];
                        }
                        let out = &mut gx[r * d..(r + 1) * d];
                        for c in 0..d {
                            let gy = gr[c] * gam[c];
                            out[c] += is / df * (df * gy - sum_gy - hr[c] * sum_gyh);
                        }
                    }
                }
                if self.wants(*gamma) {
                    let gg = self.slot(*gamma, grads);
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for c in 0..d {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                }
                if self.wants(*beta) {
                    let gb = self.slot(*beta, grads);
                    for gr in g.chunks_exact(d) {
                        axpy(gb, gr, 1.0);
                    }
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let n = out_shape[1];
                    let y = node.value.data();
                    let gx = self.slot(*x, grads);
                    for ((o, gr), yr) in gx
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(y.chunks_exact(n))
                    {
                        let s = dot(gr, yr);
                        for c in 0..n {
                            o[c] += yr[c] * (gr[c] - s);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.wants(p) {
                        axpy(self.slot(p, grads), &g[offset..offset + len], 1.0);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, from } => {
                if self.wants(*x) {
                    let n = out_shape[1];
                    let gx = self.slot(*x, grads);
                    axpy(&mut gx[from * n..from * n + g.len()], g, 1.0);
                }
            }
            Op::ConcatCols(parts) => {
                let m = out_shape[0];
                let total = out_shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if self.wants(p) {
                        let gp = self.slot(p, grads);
                        for r in 0..m {
                            axpy(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                                1.0,
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, from } => {
                if self.wants(*x) {
                    let (m, w) = (out_shape[0], out_shape[1]);
                    let n = self.dims(*x).1;
                    let gx = self.slot(*x, grads);
                    for r in 0..m {
                        axpy(
                            &mut gx[r * n + from..r * n + from + w],
                            &g[r * w..(r + 1) * w],
                            1.0,
                        );
                    }
                }
            }
            Op::GatherCols { x, idx } => {
                if self.wants(*x) {
                    let n = self.dims(*x).1;
                    let w = idx.len();
                    let gx = self.slot(*x, grads);
                    for (r, gr) in g.chunks_exact(w).enumerate() {
                        for (&c, &gv) in idx.iter().zip(gr) {
                            gx[r * n + c] += gv;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let gx = self.slot(*x, grads);
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::MeanRows(x) => {
                if self.wants(*x) {
                    let (m, n) = self.dims(*x);
                    let inv = 1.0 / m as f32;
                    let gx = self.slot(*x, grads);
                    for row in gx.chunks_exact_mut(n) {
                        axpy(row, g, inv);
                    }
                }
            }
            Op::SmoothedCe {
                logits,
                targets,
                eps,
                probs,
            } => {
                if self.wants(*logits) {
                    let c = self.dims(*logits).1;
                    let m = targets.len();
                    let upstream = g[0] as f64 / m as f64;
                    let gl = self.slot(*logits, grads);
                    for (r, &y) in targets.iter().enumerate() {
                        for k in 0..c {
                            let d = probs[r * c + k] - smoothed_target(k, y, *eps, c);
                            gl[r * c + k] += (upstream * d) as f32;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f32>>]) -> &'g mut [f32] {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

fn axpy(out: &mut [f32], x: &[f32], a: f32) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + tanh(SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)))
}

pub fn gelu_grad(x: f32) -> f32 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = tanh(u);
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// `tanh` through one `exp`; several times faster than `f32::tanh` and
/// within a few ulps of it in absolute terms.
#[inline]
fn tanh(u: f32) -> f32 {
    let e = (2.0 * u.clamp(-10.0, 10.0)).exp();
    (e - 1.0) / (e + 1.0)
}

pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v));
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Component `k` of the label-smoothed target for true class `y`.
pub fn smoothed_target(k: usize, y: usize, eps: f32, classes: usize) -> f64 {
    let eps = eps as f64;
    let base = eps / classes as f64;
    if k == y {
        1.0 - eps + base
    } else {
        base
    }
}
