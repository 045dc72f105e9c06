use std::collections::HashMap;
use std::rc::Rc;

use super::{gemm, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
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
    MatMul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, s: f64 },
    AddRow { a: usize, row: usize },
    MulRow { a: usize, row: usize },
    Gelu { a: usize },
    Sigmoid { a: usize },
    Softmax { a: usize },
    LogSoftmax { a: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Gather { a: usize, row_len: usize, index: Rc<[Option<usize>]> },
    MixRows { a: usize, row_len: usize, taps: Rc<[Vec<(usize, f64)>]> },
    Reshape { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    MeanRows { a: usize },
    Cosine { a: usize, b: usize, na: f64, nb: f64 },
    NormalizeRows { a: usize, norms: Vec<f64> },
    SmoothL1 { a: usize, target: Vec<f64> },
    BceLogits { a: usize, target: Vec<f64>, weight: Vec<f64> },
    NllRows { a: usize, targets: Vec<usize> },
    Mse { a: usize, target: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddRow { .. } => "add_row",
            Op::MulRow { .. } => "mul_row",
            Op::Gelu { .. } => "gelu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::MixRows { .. } => "mix_rows",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::MeanRows { .. } => "mean_rows",
            Op::Cosine { .. } => "cosine",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::BceLogits { .. } => "bce_logits",
            Op::NllRows { .. } => "nll_rows",
            Op::Mse { .. } => "mse",
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed operations.
///
/// A graph is single-threaded and owns copies of every value it touches.
/// Leaves created from the same [`Tensor`] (by id) map to one [`Var`], so a
/// parameter used in several places receives the sum of all contributions.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: HashMap<u64, Var>,
    no_grad: bool,
    backward_trace: Vec<usize>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose leaves never require gradients; for inference.
    pub fn no_grad() -> Self {
        Graph {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad: requires_grad && !self.no_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Records a tensor as a leaf, reusing the existing leaf for the same tensor.
    pub fn param(&mut self, t: &Tensor) -> Var {
        if let Some(&v) = self.leaves.get(&t.id()) {
            return v;
        }
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf);
        self.leaves.insert(t.id(), v);
        v
    }

    /// Records an owned value with no gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Length { shape, len: data.len() });
        }
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    /// Records an owned value that collects a gradient (an input of interest).
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Length { shape, len: data.len() });
        }
        Ok(self.push(shape, data, true, Op::Leaf))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v.0)
    }

    pub fn value(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("node shape is consistent")
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of the leaf recorded for `t`, if any.
    pub fn grad_for(&self, t: &Tensor) -> Option<&[f64]> {
        self.leaves.get(&t.id()).and_then(|v| self.grad(*v))
    }

    /// Adds this graph's gradient for `t` into `t.grad`.
    pub fn accumulate_into(&self, t: &mut Tensor) {
        if let Some(g) = self.grad_for(t) {
            t.accumulate_grad(g);
        }
    }

    /// Node indices in the order the last backward pass visited them.
    pub fn backward_trace(&self) -> &[usize] {
        &self.backward_trace
    }

    // ---- elementwise ----

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.check_same(op, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(self.shape(a).to_vec(), data, rg, node))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * s).collect();
        self.push(self.shape(a).to_vec(), data, self.rg(a.0), Op::Scale { a: a.0, s })
    }

    fn check_row(&self, op: &'static str, a: Var, row: Var) -> Result<usize> {
        let d = *self.shape(a).last().unwrap_or(&0);
        if self.shape(row) != [d] {
            return Err(TensorError::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        Ok(d)
    }

    /// `a[.., d] + row[d]` broadcast over leading axes.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let d = self.check_row("add_row", a, row)?;
        let r = self.data(row);
        let data = self.data(a).iter().enumerate().map(|(i, x)| x + r[i % d]).collect();
        let rg = self.rg(a.0) || self.rg(row.0);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::AddRow { a: a.0, row: row.0 }))
    }

    /// Channel-wise multiply `a[.., d] ⊙ row[d]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let d = self.check_row("mul_row", a, row)?;
        let r = self.data(row);
        let data = self.data(a).iter().enumerate().map(|(i, x)| x * r[i % d]).collect();
        let rg = self.rg(a.0) || self.rg(row.0);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::MulRow { a: a.0, row: row.0 }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self
            .data(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        self.push(self.shape(a).to_vec(), data, self.rg(a.0), Op::Gelu { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(self.shape(a).to_vec(), data, self.rg(a.0), Op::Sigmoid { a: a.0 })
    }

    // ---- linear algebra ----

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let mismatch = || TensorError::Dimension {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(mismatch());
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), trans_b, &mut out, false);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a: a.0, b: b.0, trans_b }))
    }

    // ---- normalisation ----

    /// Softmax along the last axis, max-stabilised.
    pub fn softmax(&mut self, a: Var) -> Var {
        let n = *self.shape(a).last().expect("non-scalar");
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(self.shape(a).to_vec(), out, self.rg(a.0), Op::Softmax { a: a.0 })
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let n = *self.shape(a).last().expect("non-scalar");
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(self.shape(a).to_vec(), out, self.rg(a.0), Op::LogSoftmax { a: a.0 })
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.check_row("layer_norm", x, gamma)?;
        self.check_row("layer_norm", x, beta)?;
        let rows = self.data(x).len() / d.max(1);
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        let (g, b) = (self.data(gamma), self.data(beta));
        for (r, row) in self.data(x).chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            rg,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, rstd },
        ))
    }

    /// Scales each row of `a[n, d]` to unit norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let d = *self.shape(a).last().expect("non-scalar");
        let mut out = self.data(a).to_vec();
        let mut norms = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.push(self.shape(a).to_vec(), out, self.rg(a.0), Op::NormalizeRows { a: a.0, norms })
    }

    /// Cosine similarity of two equal-length vectors. Zero-norm operands are
    /// a degenerate-input error.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.data(a).len() != self.data(b).len() {
            return Err(TensorError::Dimension {
                op: "cosine",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let na = super::dot(self.data(a), self.data(a)).sqrt();
        let nb = super::dot(self.data(b), self.data(b)).sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(TensorError::Degenerate {
                op: "cosine",
                detail: "zero-norm operand".into(),
            });
        }
        let c = super::dot(self.data(a), self.data(b)) / (na * nb);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(vec![1], vec![c], rg, Op::Cosine { a: a.0, b: b.0, na, nb }))
    }

    // ---- shape manipulation ----

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.data(a).len() {
            return Err(TensorError::Dimension {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let data = self.data(a).to_vec();
        Ok(self.push(shape, data, self.rg(a.0), Op::Reshape { a: a.0 }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(TensorError::Geometry {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Geometry {
                op: "concat",
                detail: format!("axis {axis} out of range for {base:?}"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(TensorError::Dimension {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut shape = base;
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let mid = self.shape(v)[axis];
                let chunk = mid * inner;
                out.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|v| self.rg(v.0));
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Concat { inputs: inputs.iter().map(|v| v.0).collect(), axis },
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::Geometry {
                op: "slice",
                detail: format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            });
        }
        let (outer, mid, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        let src = self.data(a);
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        Ok(self.push(oshape, out, self.rg(a.0), Op::Slice { a: a.0, axis, start }))
    }

    /// Row gather: views `a` as rows of `row_len`; output row `r` copies input
    /// row `index[r]`, or zeros for `None`.
    pub fn gather_rows(
        &mut self,
        a: Var,
        row_len: usize,
        index: Rc<[Option<usize>]>,
        shape: Vec<usize>,
    ) -> Result<Var> {
        let n_rows = self.data(a).len() / row_len.max(1);
        if row_len == 0 || self.data(a).len() % row_len != 0 || index.iter().flatten().any(|&i| i >= n_rows) {
            return Err(TensorError::Geometry {
                op: "gather_rows",
                detail: format!("row length {row_len} over {:?}", self.shape(a)),
            });
        }
        if shape.iter().product::<usize>() != index.len() * row_len {
            return Err(TensorError::Dimension {
                op: "gather_rows",
                lhs: vec![index.len(), row_len],
                rhs: shape,
            });
        }
        let src = self.data(a);
        let mut out = vec![0.0; index.len() * row_len];
        for (r, idx) in index.iter().enumerate() {
            if let Some(i) = idx {
                out[r * row_len..(r + 1) * row_len].copy_from_slice(&src[i * row_len..(i + 1) * row_len]);
            }
        }
        Ok(self.push(shape, out, self.rg(a.0), Op::Gather { a: a.0, row_len, index }))
    }

    /// Weighted row mixing: output row `r` is `Σ w · a[i]` over `taps[r]`.
    pub fn mix_rows(
        &mut self,
        a: Var,
        row_len: usize,
        taps: Rc<[Vec<(usize, f64)>]>,
        shape: Vec<usize>,
    ) -> Result<Var> {
        let n_rows = self.data(a).len() / row_len.max(1);
        if row_len == 0 || taps.iter().flatten().any(|&(i, _)| i >= n_rows) {
            return Err(TensorError::Geometry {
                op: "mix_rows",
                detail: format!("row length {row_len} over {:?}", self.shape(a)),
            });
        }
        if shape.iter().product::<usize>() != taps.len() * row_len {
            return Err(TensorError::Dimension {
                op: "mix_rows",
                lhs: vec![taps.len(), row_len],
                rhs: shape,
            });
        }
        let src = self.data(a);
        let mut out = vec![0.0; taps.len() * row_len];
        for (r, row_taps) in taps.iter().enumerate() {
            let dst = &mut out[r * row_len..(r + 1) * row_len];
            for &(i, w) in row_taps {
                let s = &src[i * row_len..(i + 1) * row_len];
                dst.iter_mut().zip(s).for_each(|(d, v)| *d += w * v);
            }
        }
        Ok(self.push(shape, out, self.rg(a.0), Op::MixRows { a: a.0, row_len, taps }))
    }

    // ---- reductions and losses ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(vec![1], vec![s], self.rg(a.0), Op::Sum { a: a.0 })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.data(a).len().max(1) as f64;
        let s = self.data(a).iter().sum::<f64>() / n;
        self.push(vec![1], vec![s], self.rg(a.0), Op::Mean { a: a.0 })
    }

    /// Mean over axis 0 of `a[n, d]` (global average pooling of token rows).
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape.len() != 2 || shape[0] == 0 {
            return Err(TensorError::Geometry {
                op: "mean_rows",
                detail: format!("expected [n, d], got {shape:?}"),
            });
        }
        let (n, d) = (shape[0], shape[1]);
        let mut out = vec![0.0; d];
        for row in self.data(a).chunks(d) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        Ok(self.push(vec![d], out, self.rg(a.0), Op::MeanRows { a: a.0 }))
    }

    /// Σ smooth-L1(a − target) with unit transition point.
    pub fn smooth_l1(&mut self, a: Var, target: Vec<f64>) -> Result<Var> {
        if target.len() != self.data(a).len() {
            return Err(TensorError::Dimension {
                op: "smooth_l1",
                lhs: self.shape(a).to_vec(),
                rhs: vec![target.len()],
            });
        }
        let s = self
            .data(a)
            .iter()
            .zip(&target)
            .map(|(x, t)| {
                let d = (x - t).abs();
                if d < 1.0 {
                    0.5 * d * d
                } else {
                    d - 0.5
                }
            })
            .sum();
        Ok(self.push(vec![1], vec![s], self.rg(a.0), Op::SmoothL1 { a: a.0, target }))
    }

    /// Σ weight · BCE(sigmoid(logit), target), computed stably from logits.
    pub fn bce_with_logits(&mut self, a: Var, target: Vec<f64>, weight: Vec<f64>) -> Result<Var> {
        let n = self.data(a).len();
        if target.len() != n || weight.len() != n {
            return Err(TensorError::Dimension {
                op: "bce_with_logits",
                lhs: self.shape(a).to_vec(),
                rhs: vec![target.len(), weight.len()],
            });
        }
        let s = self
            .data(a)
            .iter()
            .zip(&target)
            .zip(&weight)
            .map(|((&z, &t), &w)| w * (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()))
            .sum();
        Ok(self.push(vec![1], vec![s], self.rg(a.0), Op::BceLogits { a: a.0, target, weight }))
    }

    /// Mean over rows of `-a[r, targets[r]]`; with log-probabilities this is
    /// the cross-entropy.
    pub fn nll_rows(&mut self, a: Var, targets: Vec<usize>) -> Result<Var> {
        let shape = self.shape(a);
        if shape.len() != 2 || shape[0] != targets.len() || targets.iter().any(|&t| t >= shape[1]) {
            return Err(TensorError::Dimension {
                op: "nll_rows",
                lhs: shape.to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let c = shape[1];
        let s = -targets.iter().enumerate().map(|(r, &t)| self.data(a)[r * c + t]).sum::<f64>()
            / targets.len() as f64;
        Ok(self.push(vec![1], vec![s], self.rg(a.0), Op::NllRows { a: a.0, targets }))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, a: Var, target: Vec<f64>) -> Result<Var> {
        if target.len() != self.data(a).len() {
            return Err(TensorError::Dimension {
                op: "mse",
                lhs: self.shape(a).to_vec(),
                rhs: vec![target.len()],
            });
        }
        let n = target.len().max(1) as f64;
        let s = self.data(a).iter().zip(&target).map(|(x, t)| (x - t) * (x - t)).sum::<f64>() / n;
        Ok(self.push(vec![1], vec![s], self.rg(a.0), Op::Mse { a: a.0, target }))
    }

    // ---- backward ----

    /// Reverse pass from a scalar `loss`, visiting nodes in exact reverse
    /// execution order. Gradients accumulate into every node requiring grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.backward_trace.clear();
        if !self.rg(loss.0) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.backward_trace.push(i);
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn take_grad(&mut self, i: usize) -> Vec<f64> {
        let n = self.nodes[i].shape.iter().product();
        self.nodes[i].grad.take().unwrap_or_else(|| vec![0.0; n])
    }

    fn put_grad(&mut self, i: usize, g: Vec<f64>) {
        self.nodes[i].grad = Some(g);
    }

    /// Accumulates `f(j)` into input `i`'s gradient for every element.
    fn acc_with(&mut self, i: usize, f: impl Fn(usize) -> f64) {
        if !self.rg(i) {
            return;
        }
        let mut gi = self.take_grad(i);
        gi.iter_mut().enumerate().for_each(|(j, v)| *v += f(j));
        self.put_grad(i, gi);
    }

    fn backprop(&mut self, out: usize, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[out].shape[1];
                if self.rg(a) {
                    // dA = dC · Bᵀ  (or dC · B when B was transposed)
                    let mut ga = self.take_grad(a);
                    gemm(m, n, k, g, false, &self.nodes[b].data, !trans_b, &mut ga, true);
                    self.put_grad(a, ga);
                }
                if self.rg(b) {
                    let mut gb = self.take_grad(b);
                    if trans_b {
                        // B is [n,k]: dB = dCᵀ · A
                        gemm(n, m, k, g, true, &self.nodes[a].data, false, &mut gb, true);
                    } else {
                        // dB = Aᵀ · dC
                        gemm(k, m, n, &self.nodes[a].data, true, g, false, &mut gb, true);
                    }
                    self.put_grad(b, gb);
                }
            }
            Op::Add { a, b } => {
                self.acc_with(a, |j| g[j]);
                self.acc_with(b, |j| g[j]);
            }
            Op::Sub { a, b } => {
                self.acc_with(a, |j| g[j]);
                self.acc_with(b, |j| -g[j]);
            }
            Op::Mul { a, b } => {
                if self.rg(a) {
                    let bd = std::mem::take(&mut self.nodes[b].data);
                    self.acc_with(a, |j| g[j] * bd[j]);
                    self.nodes[b].data = bd;
                }
                if self.rg(b) {
                    let ad = std::mem::take(&mut self.nodes[a].data);
                    self.acc_with(b, |j| g[j] * ad[j]);
                    self.nodes[a].data = ad;
                }
            }
            Op::Scale { a, s } => self.acc_with(a, |j| g[j] * s),
            Op::AddRow { a, row } => {
                self.acc_with(a, |j| g[j]);
                if self.rg(row) {
                    let d = self.nodes[row].data.len();
                    let mut gr = self.take_grad(row);
                    for (j, v) in g.iter().enumerate() {
                        gr[j % d] += v;
                    }
                    self.put_grad(row, gr);
                }
            }
            Op::MulRow { a, row } => {
                let d = self.nodes[row].data.len();
                if self.rg(a) {
                    let r = self.nodes[row].data.clone();
                    self.acc_with(a, |j| g[j] * r[j % d]);
                }
                if self.rg(row) {
                    let mut gr = self.take_grad(row);
                    for (j, (v, x)) in g.iter().zip(&self.nodes[a].data).enumerate() {
                        gr[j % d] += v * x;
                    }
                    self.put_grad(row, gr);
                }
            }
            Op::Gelu { a } => {
                if self.rg(a) {
                    let x = std::mem::take(&mut self.nodes[a].data);
                    self.acc_with(a, |j| {
                        let v = x[j];
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        g[j] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    });
                    self.nodes[a].data = x;
                }
            }
            Op::Sigmoid { a } => {
                let y = std::mem::take(&mut self.nodes[out].data);
                self.acc_with(a, |j| g[j] * y[j] * (1.0 - y[j]));
                self.nodes[out].data = y;
            }
            Op::Softmax { a } => {
                if self.rg(a) {
                    let n = *self.nodes[out].shape.last().unwrap();
                    let y = &self.nodes[out].data;
                    let mut dx = vec![0.0; y.len()];
                    for ((dr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let s: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            dr[j] = yr[j] * (gr[j] - s);
                        }
                    }
                    self.acc_with(a, |j| dx[j]);
                }
            }
            Op::LogSoftmax { a } => {
                if self.rg(a) {
                    let n = *self.nodes[out].shape.last().unwrap();
                    let y = &self.nodes[out].data;
                    let mut dx = vec![0.0; y.len()];
                    for ((dr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..n {
                            dr[j] = gr[j] - yr[j].exp() * s;
                        }
                    }
                    self.acc_with(a, |j| dx[j]);
                }
            }
            Op::LayerNorm { x, gamma, beta, ref xhat, ref rstd } => {
                let d = self.nodes[gamma].data.len();
                if self.rg(x) {
                    let gm = &self.nodes[gamma].data;
                    let mut dx = vec![0.0; xhat.len()];
                    for (r, ((dr, hr), gr)) in dx.chunks_mut(d).zip(xhat.chunks(d)).zip(g.chunks(d)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gm[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            dr[j] = rstd[r] * (gr[j] * gm[j] - m1 - hr[j] * m2);
                        }
                    }
                    self.acc_with(x, |j| dx[j]);
                }
                if self.rg(gamma) {
                    let mut gg = self.take_grad(gamma);
                    for (j, (v, h)) in g.iter().zip(xhat).enumerate() {
                        gg[j % d] += v * h;
                    }
                    self.put_grad(gamma, gg);
                }
                if self.rg(beta) {
                    let mut gb = self.take_grad(beta);
                    for (j, v) in g.iter().enumerate() {
                        gb[j % d] += v;
                    }
                    self.put_grad(beta, gb);
                }
            }
            Op::Concat { ref inputs, axis } => {
                let shape = self.nodes[out].shape.clone();
                let (outer, total, inner) = axis_split(&shape, axis);
                let mut offset = 0;
                for &v in inputs {
                    let mid = self.nodes[v].shape[axis];
                    if self.rg(v) {
                        let mut gv = self.take_grad(v);
                        let chunk = mid * inner;
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset) * inner + chunk];
                            gv[o * chunk..(o + 1) * chunk].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                        self.put_grad(v, gv);
                    }
                    offset += mid;
                }
            }
            Op::Slice { a, axis, start } => {
                if self.rg(a) {
                    let shape = self.nodes[a].shape.clone();
                    let len = self.nodes[out].shape[axis];
                    let (outer, mid, inner) = axis_split(&shape, axis);
                    let mut ga = self.take_grad(a);
                    for o in 0..outer {
                        let base = (o * mid + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        ga[base..base + len * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                    self.put_grad(a, ga);
                }
            }
            Op::Gather { a, row_len, ref index } => {
                if self.rg(a) {
                    let mut ga = self.take_grad(a);
                    for (r, idx) in index.iter().enumerate() {
                        if let Some(i) = idx {
                            let src = &g[r * row_len..(r + 1) * row_len];
                            ga[i * row_len..(i + 1) * row_len].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    self.put_grad(a, ga);
                }
            }
            Op::MixRows { a, row_len, ref taps } => {
                if self.rg(a) {
                    let mut ga = self.take_grad(a);
                    for (r, row_taps) in taps.iter().enumerate() {
                        let src = &g[r * row_len..(r + 1) * row_len];
                        for &(i, w) in row_taps {
                            ga[i * row_len..(i + 1) * row_len]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += w * s);
                        }
                    }
                    self.put_grad(a, ga);
                }
            }
            Op::Reshape { a } => self.acc_with(a, |j| g[j]),
            Op::Sum { a } => self.acc_with(a, |_| g[0]),
            Op::Mean { a } => {
                let n = self.nodes[a].data.len().max(1) as f64;
                self.acc_with(a, |_| g[0] / n)
            }
            Op::MeanRows { a } => {
                let n = self.nodes[a].shape[0] as f64;
                let d = self.nodes[a].shape[1];
                self.acc_with(a, |j| g[j % d] / n)
            }
            Op::Cosine { a, b, na, nb } => {
                let c = self.nodes[out].data[0];
                let ad = self.nodes[a].data.clone();
                let bd = self.nodes[b].data.clone();
                self.acc_with(a, |j| g[0] * (bd[j] / (na * nb) - c * ad[j] / (na * na)));
                self.acc_with(b, |j| g[0] * (ad[j] / (na * nb) - c * bd[j] / (nb * nb)));
            }
            Op::NormalizeRows { a, ref norms } => {
                if self.rg(a) {
                    let d = *self.nodes[out].shape.last().unwrap();
                    let y = &self.nodes[out].data;
                    let mut dx = vec![0.0; y.len()];
                    for (r, ((dr, yr), gr)) in dx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)).enumerate() {
                        let s: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..d {
                            dr[j] = (gr[j] - yr[j] * s) / norms[r];
                        }
                    }
                    self.acc_with(a, |j| dx[j]);
                }
            }
            Op::SmoothL1 { a, ref target } => {
                let x = std::mem::take(&mut self.nodes[a].data);
                self.acc_with(a, |j| g[0] * (x[j] - target[j]).clamp(-1.0, 1.0));
                self.nodes[a].data = x;
            }
            Op::BceLogits { a, ref target, ref weight } => {
                let x = std::mem::take(&mut self.nodes[a].data);
                self.acc_with(a, |j| g[0] * weight[j] * (sigmoid(x[j]) - target[j]));
                self.nodes[a].data = x;
            }
            Op::NllRows { a, ref targets } => {
                if self.rg(a) {
                    let c = self.nodes[a].shape[1];
                    let scale = g[0] / targets.len() as f64;
                    let mut ga = self.take_grad(a);
                    for (r, &t) in targets.iter().enumerate() {
                        ga[r * c + t] -= scale;
                    }
                    self.put_grad(a, ga);
                }
            }
            Op::Mse { a, ref target } => {
                let n = target.len().max(1) as f64;
                let x = std::mem::take(&mut self.nodes[a].data);
                self.acc_with(a, |j| g[0] * 2.0 * (x[j] - target[j]) / n);
                self.nodes[a].data = x;
            }
        }
    }
}
