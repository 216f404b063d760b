//! Tape of primitive operations with reverse-mode differentiation.
//!
//! Every operation appends a node whose inputs are strictly earlier nodes,
//! so the node vector is already in topological order and the backward
//! pass is a single reverse sweep.

use super::kernels::{self, Segments};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu {
        x: Var,
        gate: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    LogSumExp(Var),
    Sum(Var),
    Mean(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seg: Segments,
        heads: usize,
        probs: Vec<f64>,
        keep: Option<Vec<f64>>,
    },
    Pad {
        x: Var,
        lengths: Vec<usize>,
        max_len: usize,
    },
    MaskedMean {
        x: Var,
        lengths: Vec<usize>,
    },
    SelectPosition {
        x: Var,
        pos: usize,
    },
    ConcatCols(Vec<Var>),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    RowDot(Var, Var),
    Diag(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded record of a forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: &[f64]) {
    match slot {
        Some(g) => g.iter_mut().zip(contribution).for_each(|(a, b)| *a += b),
        None => *slot = Some(contribution.to_vec()),
    }
}

fn accumulate_owned(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
        None => *slot = Some(contribution),
    }
}

/// Adds `a' * b'` into a gradient slot, multiplying straight into an
/// existing buffer instead of allocating a temporary.
#[allow(clippy::too_many_arguments)]
fn gemm_grad(
    slot: &mut Option<Vec<f64>>,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
) {
    match slot {
        Some(c) => kernels::gemm(m, k, n, a, a_t, b, b_t, 1.0, c),
        None => *slot = Some(kernels::gemm_new(m, k, n, a, a_t, b, b_t)),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !kernels::all_finite(value.data()) {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies `v` into a fresh leaf through which no gradient flows.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::gemm_new(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
        );
        self.push(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(a, b),
            &[a, b],
        )
    }

    /// `a * b^T` for `a: [m x k]`, `b: [n x k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul_nt")?;
        let (n, k2) = self.mat_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let out = kernels::gemm_new(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
        );
        self.push(
            "matmul_nt",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMulNT(a, b),
            &[a, b],
        )
    }

    /// Affine map over the last axis: `x[..., in] * w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (din, dout) = self.mat_dims(w, "linear")?;
        let xs = self.shape(x).to_vec();
        if xs.last() != Some(&din) {
            return Err(Error::dim("linear", &xs, self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::dim("linear bias", self.shape(b), &[dout]));
            }
        }
        let rows = self.value(x).outer_rows();
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let out = match b {
            Some(b) => {
                let bias = self.value(b).data();
                let mut out = Vec::with_capacity(rows * dout);
                for _ in 0..rows {
                    out.extend_from_slice(bias);
                }
                kernels::gemm(rows, din, dout, xd, false, wd, false, 1.0, &mut out);
                out
            }
            None => kernels::gemm_new(rows, din, dout, xd, false, wd, false),
        };
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let inputs: Vec<Var> = std::iter::once(x).chain(Some(w)).chain(b).collect();
        self.push(
            "linear",
            Tensor::from_parts(shape, out),
            Op::Linear { x, w, b },
            &inputs,
        )
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = ta.shape().to_vec();
        self.push(name, Tensor::from_parts(shape, data), op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        self.push("scale", value, Op::Scale(a, s), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (gate, out) = kernels::gelu_forward(t.data());
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("gelu", value, Op::Gelu { x: a, gate }, &[a])
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xt = self.value(x);
        let d = xt.last_dim();
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim("layer_norm", xt.shape(), self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let rows = xt.outer_rows();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xt.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let shape = xt.shape().to_vec();
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        let d = value.last_dim();
        if d > 0 {
            value
                .data_mut()
                .chunks_exact_mut(d)
                .for_each(kernels::softmax_row);
        }
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// Row-wise log-sum-exp of a `[rows x n]` matrix, giving `[rows]`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, n) = self.mat_dims(x, "logsumexp_rows")?;
        if n == 0 {
            return Err(Error::dim("logsumexp_rows", self.shape(x), &[rows, 1]));
        }
        let data = self
            .value(x)
            .data()
            .chunks_exact(n)
            .map(kernels::logsumexp)
            .collect();
        self.push(
            "logsumexp",
            Tensor::from_parts(vec![rows], data),
            Op::LogSumExp(x),
            &[x],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::Input("mean of an empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Selects rows of a `[rows x d]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.mat_dims(table, "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!(
                "row id {bad} out of range for table of {rows} rows"
            )));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Multi-head self-attention over packed `[tokens x d]` projections.
    ///
    /// Tokens attend only within their own sentence, given by consecutive
    /// `lengths`. `keep` multiplies the attention probabilities and must hold
    /// `heads * len^2` entries per sentence.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        lengths: &[usize],
        heads: usize,
        keep: Option<Vec<f64>>,
    ) -> Result<Var> {
        let (t, d) = self.mat_dims(q, "attention")?;
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {d} not divisible into {heads} heads"
            )));
        }
        let seg = Segments::new(lengths, heads);
        if seg.total_tokens() != t {
            return Err(Error::dim("attention", &[t, d], &[seg.total_tokens(), d]));
        }
        if let Some(keep) = &keep {
            if keep.len() != seg.prob_len {
                return Err(Error::dim(
                    "attention dropout",
                    &[keep.len()],
                    &[seg.prob_len],
                ));
            }
        }
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            &seg,
            heads,
            d,
            keep.as_deref(),
        );
        self.push(
            "attention",
            Tensor::from_parts(vec![t, d], out),
            Op::Attention {
                q,
                k,
                v,
                seg,
                heads,
                probs,
                keep,
            },
            &[q, k, v],
        )
    }

    /// Scatters packed `[tokens x d]` rows into a zero-padded `[n x max_len x d]` tensor.
    pub fn pad_packed(&mut self, x: Var, lengths: &[usize], max_len: usize) -> Result<Var> {
        let (t, d) = self.mat_dims(x, "pad_packed")?;
        if lengths.iter().sum::<usize>() != t || lengths.iter().any(|&l| l > max_len) {
            return Err(Error::dim("pad_packed", &[t, d], lengths));
        }
        let n = lengths.len();
        let src = self.value(x).data();
        let mut out = vec![0.0; n * max_len * d];
        let mut off = 0;
        for (i, &len) in lengths.iter().enumerate() {
            out[i * max_len * d..(i * max_len + len) * d]
                .copy_from_slice(&src[off * d..(off + len) * d]);
            off += len;
        }
        self.push(
            "pad_packed",
            Tensor::from_parts(vec![n, max_len, d], out),
            Op::Pad {
                x,
                lengths: lengths.to_vec(),
                max_len,
            },
            &[x],
        )
    }

    fn batch_dims(&self, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape(x) {
            [n, m, d] => Ok((*n, *m, *d)),
            s => Err(Error::dim(op, s, &[0, 0, 0])),
        }
    }

    /// Mean over the first `lengths[i]` positions of each `[m x d]` slice.
    pub fn masked_mean(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let (n, m, d) = self.batch_dims(x, "masked_mean")?;
        if lengths.len() != n || lengths.iter().any(|&l| l == 0 || l > m) {
            return Err(Error::dim("masked_mean", &[n, m, d], lengths));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; n * d];
        for (i, &len) in lengths.iter().enumerate() {
            let o = &mut out[i * d..(i + 1) * d];
            for p in 0..len {
                let row = &src[(i * m + p) * d..(i * m + p + 1) * d];
                o.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            let inv = 1.0 / len as f64;
            o.iter_mut().for_each(|a| *a *= inv);
        }
        self.push(
            "masked_mean",
            Tensor::from_parts(vec![n, d], out),
            Op::MaskedMean {
                x,
                lengths: lengths.to_vec(),
            },
            &[x],
        )
    }

    /// Picks position `pos` of every `[m x d]` slice, giving `[n x d]`.
    pub fn select_position(&mut self, x: Var, pos: usize) -> Result<Var> {
        let (n, m, d) = self.batch_dims(x, "select_position")?;
        if pos >= m {
            return Err(Error::dim("select_position", &[n, m, d], &[pos]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            out.extend_from_slice(&src[(i * m + pos) * d..(i * m + pos + 1) * d]);
        }
        self.push(
            "select_position",
            Tensor::from_parts(vec![n, d], out),
            Op::SelectPosition { x, pos },
            &[x],
        )
    }

    /// Horizontal concatenation of `[rows x c_i]` matrices.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Input("concat_cols needs at least one input".into()))?;
        let (rows, _) = self.mat_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.mat_dims(p, "concat_cols")?;
            if r != rows {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        self.push(
            "concat_cols",
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    /// Scales each row of a matrix to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, d) = self.mat_dims(x, "normalize_rows")?;
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(rows);
        for (r, row) in value.data_mut().chunks_exact_mut(d.max(1)).enumerate() {
            let nrm = kernels::norm(row);
            if nrm.is_nan() || nrm <= crate::numerics::MIN_NORM {
                return Err(Error::DegenerateVector(format!("row {r} has norm {nrm}")));
            }
            row.iter_mut().for_each(|v| *v /= nrm);
            norms.push(nrm);
        }
        if d == 0 {
            return Err(Error::DegenerateVector("zero-width rows".into()));
        }
        self.push(
            "normalize_rows",
            value,
            Op::NormalizeRows { x, norms },
            &[x],
        )
    }

    /// Per-row inner products of two `[rows x d]` matrices, giving `[rows x 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, d) = self.mat_dims(a, "row_dot")?;
        self.same_shape(a, b, "row_dot")?;
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let out = (0..rows)
            .map(|r| kernels::dot(&ta[r * d..(r + 1) * d], &tb[r * d..(r + 1) * d]))
            .collect();
        self.push(
            "row_dot",
            Tensor::from_parts(vec![rows, 1], out),
            Op::RowDot(a, b),
            &[a, b],
        )
    }

    /// Main diagonal of a square matrix.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.mat_dims(x, "diag")?;
        if r != c {
            return Err(Error::dim("diag", &[r, c], &[r, r]));
        }
        let src = self.value(x).data();
        let out = (0..r).map(|i| src[i * r + i]).collect();
        self.push("diag", Tensor::from_parts(vec![r], out), Op::Diag(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::dim("reshape", t.shape(), shape));
        }
        let value = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`. Each node is visited exactly once.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim("backward", self.shape(loss), &[]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            // Only leaf gradients are reported; intermediate buffers are
            // freed as soon as they have been propagated.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad)
                    .map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    gemm_grad(
                        &mut grads[a.0],
                        m,
                        n,
                        k,
                        g,
                        false,
                        self.value(*b).data(),
                        true,
                    );
                }
                if self.wants(*b) {
                    gemm_grad(
                        &mut grads[b.0],
                        k,
                        m,
                        n,
                        self.value(*a).data(),
                        true,
                        g,
                        false,
                    );
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.wants(*a) {
                    gemm_grad(
                        &mut grads[a.0],
                        m,
                        n,
                        k,
                        g,
                        false,
                        self.value(*b).data(),
                        false,
                    );
                }
                if self.wants(*b) {
                    gemm_grad(
                        &mut grads[b.0],
                        n,
                        m,
                        k,
                        g,
                        true,
                        self.value(*a).data(),
                        false,
                    );
                }
            }
            Op::Linear { x, w, b } => {
                let (din, dout) = (self.shape(*w)[0], self.shape(*w)[1]);
                let rows = self.value(*x).outer_rows();
                if self.wants(*x) {
                    gemm_grad(
                        &mut grads[x.0],
                        rows,
                        dout,
                        din,
                        g,
                        false,
                        self.value(*w).data(),
                        true,
                    );
                }
                if self.wants(*w) {
                    gemm_grad(
                        &mut grads[w.0],
                        din,
                        rows,
                        dout,
                        self.value(*x).data(),
                        true,
                        g,
                        false,
                    );
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; dout];
                        for r in g.chunks_exact(dout) {
                            db.iter_mut().zip(r).for_each(|(a, v)| *a += v);
                        }
                        accumulate_owned(&mut grads[b.0], db);
                    }
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    accumulate_owned(&mut grads[b.0], g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = g
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(x, y)| x * y)
                        .collect();
                    accumulate_owned(&mut grads[a.0], d);
                }
                if self.wants(*b) {
                    let d = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, y)| x * y)
                        .collect();
                    accumulate_owned(&mut grads[b.0], d);
                }
            }
            Op::Scale(a, s) => {
                accumulate_owned(&mut grads[a.0], g.iter().map(|v| v * s).collect());
            }
            Op::Gelu { x, gate } => {
                accumulate_owned(
                    &mut grads[x.0],
                    kernels::gelu_backward(g, self.value(*x).data(), gate),
                );
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                if self.wants(*gain) {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for c in 0..d {
                            dg[c] += gr[c] * hr[c];
                        }
                    }
                    accumulate_owned(&mut grads[gain.0], dg);
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks_exact(d) {
                        db.iter_mut().zip(gr).for_each(|(a, v)| *a += v);
                    }
                    accumulate_owned(&mut grads[bias.0], db);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let mut dxhat = vec![0.0; d];
                    let inv_d = 1.0 / d as f64;
                    for (r, (gr, hr)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        for c in 0..d {
                            dxhat[c] = gr[c] * gv[c];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2 = kernels::dot(&dxhat, hr);
                        let out = &mut dx[r * d..(r + 1) * d];
                        for c in 0..d {
                            out[c] = rstd[r] * (dxhat[c] - inv_d * s1 - hr[c] * inv_d * s2);
                        }
                    }
                    accumulate_owned(&mut grads[x.0], dx);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), out) in y
                    .chunks_exact(d)
                    .zip(g.chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                {
                    let inner = kernels::dot(yr, gr);
                    for c in 0..d {
                        out[c] = yr[c] * (gr[c] - inner);
                    }
                }
                accumulate_owned(&mut grads[x.0], dx);
            }
            Op::LogSumExp(x) => {
                let xt = self.value(*x);
                let n = xt.last_dim();
                let mut dx = xt.data().to_vec();
                for (row, &gr) in dx.chunks_exact_mut(n).zip(g) {
                    kernels::softmax_row(row);
                    row.iter_mut().for_each(|v| *v *= gr);
                }
                accumulate_owned(&mut grads[x.0], dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                accumulate_owned(&mut grads[x.0], vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                accumulate_owned(&mut grads[x.0], vec![g[0] / n as f64; n]);
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let d = self.shape(*table)[1];
                    let slot =
                        grads[table.0].get_or_insert_with(|| vec![0.0; self.value(*table).numel()]);
                    for (r, &i) in ids.iter().enumerate() {
                        let dst = &mut slot[i * d..(i + 1) * d];
                        dst.iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                seg,
                heads,
                probs,
                keep,
            } => {
                let d = self.shape(*q)[1];
                let ag = kernels::attention_backward(
                    g,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    keep.as_deref(),
                    seg,
                    *heads,
                    d,
                );
                if self.wants(*q) {
                    accumulate_owned(&mut grads[q.0], ag.dq);
                }
                if self.wants(*k) {
                    accumulate_owned(&mut grads[k.0], ag.dk);
                }
                if self.wants(*v) {
                    accumulate_owned(&mut grads[v.0], ag.dv);
                }
            }
            Op::Pad {
                x,
                lengths,
                max_len,
            } => {
                let d = self.shape(*x)[1];
                let t = self.shape(*x)[0];
                let mut dx = Vec::with_capacity(t * d);
                for (i, &len) in lengths.iter().enumerate() {
                    dx.extend_from_slice(&g[i * max_len * d..(i * max_len + len) * d]);
                }
                accumulate_owned(&mut grads[x.0], dx);
            }
            Op::MaskedMean { x, lengths } => {
                let (n, m, d) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let mut dx = vec![0.0; n * m * d];
                for (i, &len) in lengths.iter().enumerate() {
                    let inv = 1.0 / len as f64;
                    let gr = &g[i * d..(i + 1) * d];
                    for p in 0..len {
                        let dst = &mut dx[(i * m + p) * d..(i * m + p + 1) * d];
                        dst.iter_mut().zip(gr).for_each(|(a, v)| *a = v * inv);
                    }
                }
                accumulate_owned(&mut grads[x.0], dx);
            }
            Op::SelectPosition { x, pos } => {
                let (n, m, d) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let slot = grads[x.0].get_or_insert_with(|| vec![0.0; n * m * d]);
                for i in 0..n {
                    let dst = &mut slot[(i * m + pos) * d..(i * m + pos + 1) * d];
                    dst.iter_mut()
                        .zip(&g[i * d..(i + 1) * d])
                        .for_each(|(a, v)| *a += v);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let mut col = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + col..r * total + col + c]);
                        }
                        accumulate_owned(&mut grads[p.0], dp);
                    }
                    col += c;
                }
            }
            Op::NormalizeRows { x, norms } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut dx = vec![0.0; y.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let inner = kernels::dot(yr, gr);
                    for c in 0..d {
                        dx[r * d + c] = (gr[c] - yr[c] * inner) / nrm;
                    }
                }
                accumulate_owned(&mut grads[x.0], dx);
            }
            Op::RowDot(a, b) => {
                let d = self.shape(*a)[1];
                for (src, dst) in [(*b, *a), (*a, *b)] {
                    if self.wants(dst) {
                        let sv = self.value(src).data();
                        let dd = sv.iter().enumerate().map(|(i, v)| v * g[i / d]).collect();
                        accumulate_owned(&mut grads[dst.0], dd);
                    }
                }
            }
            Op::Diag(x) => {
                let n = self.shape(*x)[0];
                let slot = grads[x.0].get_or_insert_with(|| vec![0.0; n * n]);
                for i in 0..n {
                    slot[i * n + i] += g[i];
                }
            }
            Op::Reshape(x) => accumulate(&mut grads[x.0], g),
        }
    }
}
