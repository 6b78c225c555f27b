//! Reverse-mode autodiff on a Wengert tape.
//!
//! A [`Tape`] records every op applied to tensors; [`Tape::backward`] walks
//! the record in reverse and accumulates vector-Jacobian products. Parents
//! always precede children, so one reverse sweep is a valid topological
//! order. Gradient accumulation happens in creation order, which makes
//! backward bit-reproducible for identical inputs.
//!
//! Parameters are borrowed (`param`) so repeated forwards don't copy weight
//! matrices; intermediates are owned by the tape.

use std::borrow::Cow;

use super::{matmul_a_bt, matmul_at_b, matmul_raw, Tensor, TensorError};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    /// `a @ b`
    Matmul(NodeId, NodeId),
    /// `a @ b^T`
    MatmulNt(NodeId, NodeId),
    /// elementwise `a + b`, same shape
    Add(NodeId, NodeId),
    /// elementwise `a - b`, same shape
    Sub(NodeId, NodeId),
    /// elementwise `a * b`, same shape
    Mul(NodeId, NodeId),
    /// `[m,n] + [n]` broadcast over rows
    AddBias(NodeId, NodeId),
    /// `c * x`
    Scale(NodeId, f64),
    Relu(NodeId),
    Gelu(NodeId),
    /// elementwise square
    Square(NodeId),
    /// row-wise layer norm; cache holds `(mean, inv_std)` per row
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    /// row-wise softmax of `x + mask`; the mask is constant so backward only
    /// needs the node's own output
    SoftmaxRows { x: NodeId },
    SliceRows { x: NodeId, start: usize, len: usize },
    SliceCols { x: NodeId, start: usize, len: usize },
    /// rows of `a` at even positions, rows of `b` at odd, `[L,n]x2 -> [2L,n]`
    InterleaveRows(NodeId, NodeId),
    /// rows `offset, offset+step, ...` of `x`
    StrideRows { x: NodeId, offset: usize, step: usize },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SumAll(NodeId),
    MeanAll(NodeId),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    /// Per-op scratch saved during forward for the backward pass.
    cache: Vec<f64>,
}

/// Records a forward computation and differentiates it in reverse.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Per-node gradients from [`Tape::backward`], addressed by [`NodeId`].
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. node `id`, if the node influenced it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.slots[id.0].as_ref()
    }

    /// Removes and returns the gradient for node `id`.
    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.slots[id.0].take()
    }
}

const GELU_S: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

impl<'a> Default for Tape<'a> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(128) }
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, cache: Vec<f64>) -> NodeId {
        self.nodes.push(Node { value, op, cache });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers an owned tensor (inputs, constants, targets).
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Cow::Owned(t), Op::Leaf, Vec::new())
    }

    /// Registers a borrowed parameter tensor without copying it.
    pub fn param(&mut self, t: &'a Tensor) -> NodeId {
        self.push(Cow::Borrowed(t), Op::Leaf, Vec::new())
    }

    /// Value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn dims(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.dims()
    }

    fn mismatch(op: &'static str, detail: String) -> TensorError {
        TensorError::ShapeMismatch { op, detail }
    }

    fn want_rank2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize), TensorError> {
        let d = self.dims(id);
        if d.len() != 2 {
            return Err(Self::mismatch(op, format!("expected rank-2, got {d:?}")));
        }
        Ok((d[0], d[1]))
    }

    /// `a @ b` for `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, k) = self.want_rank2("matmul", a)?;
        let (k2, n) = self.want_rank2("matmul", b)?;
        if k != k2 {
            return Err(Self::mismatch("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let v = matmul_raw(&self.nodes[a.0].value, &self.nodes[b.0].value);
        Ok(self.push(Cow::Owned(v), Op::Matmul(a, b), Vec::new()))
    }

    /// `a @ b^T` for `[m,k] x [n,k]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, k) = self.want_rank2("matmul_nt", a)?;
        let (n, k2) = self.want_rank2("matmul_nt", b)?;
        if k != k2 {
            return Err(Self::mismatch("matmul_nt", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let v = matmul_a_bt(&self.nodes[a.0].value, &self.nodes[b.0].value);
        Ok(self.push(Cow::Owned(v), Op::MatmulNt(a, b), Vec::new()))
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, TensorError> {
        if self.dims(a) != self.dims(b) {
            return Err(Self::mismatch(
                op_name,
                format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            ));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let values = av.values().iter().zip(bv.values()).map(|(&x, &y)| f(x, y)).collect();
        let v = Tensor::from_raw(av.dims().to_vec(), values);
        Ok(self.push(Cow::Owned(v), op, Vec::new()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `[m,n] + [n]`, bias broadcast over rows.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (m, n) = self.want_rank2("add_bias", a)?;
        let bd = self.dims(bias);
        if bd != [n] {
            return Err(Self::mismatch("add_bias", format!("[{m},{n}] + {bd:?}")));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[bias.0].value;
        let mut values = av.values().to_vec();
        for r in 0..m {
            for (c, &b) in bv.values().iter().enumerate() {
                values[r * n + c] += b;
            }
        }
        let v = Tensor::from_raw(vec![m, n], values);
        Ok(self.push(Cow::Owned(v), Op::AddBias(a, bias), Vec::new()))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let v = Tensor::from_raw(xv.dims().to_vec(), xv.values().iter().map(|&t| c * t).collect());
        self.push(Cow::Owned(v), Op::Scale(x, c), Vec::new())
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let v = Tensor::from_raw(
            xv.dims().to_vec(),
            xv.values().iter().map(|&t| t.max(0.0)).collect(),
        );
        self.push(Cow::Owned(v), Op::Relu(x), Vec::new())
    }

    /// GeLU via the tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let v = Tensor::from_raw(
            xv.dims().to_vec(),
            xv.values()
                .iter()
                .map(|&t| {
                    let u = GELU_S * (t + GELU_C * t * t * t);
                    0.5 * t * (1.0 + u.tanh())
                })
                .collect(),
        );
        self.push(Cow::Owned(v), Op::Gelu(x), Vec::new())
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let v =
            Tensor::from_raw(xv.dims().to_vec(), xv.values().iter().map(|&t| t * t).collect());
        self.push(Cow::Owned(v), Op::Square(x), Vec::new())
    }

    /// Row-wise layer norm with learnable `gamma`/`beta` of shape `[n]`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<NodeId, TensorError> {
        const EPS: f64 = 1e-5;
        let (m, n) = self.want_rank2("layer_norm", x)?;
        if self.dims(gamma) != [n] || self.dims(beta) != [n] {
            return Err(Self::mismatch(
                "layer_norm",
                format!("gamma {:?} beta {:?} for [{m},{n}]", self.dims(gamma), self.dims(beta)),
            ));
        }
        let xv = self.nodes[x.0].value.values();
        let g = self.nodes[gamma.0].value.values();
        let b = self.nodes[beta.0].value.values();
        let mut values = vec![0.0; m * n];
        let mut cache = Vec::with_capacity(2 * m);
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean: f64 = row.iter().sum::<f64>() / n as f64;
            let var: f64 = row.iter().map(|&t| (t - mean) * (t - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + EPS).sqrt();
            cache.push(mean);
            cache.push(inv_std);
            for c in 0..n {
                values[r * n + c] = g[c] * (row[c] - mean) * inv_std + b[c];
            }
        }
        let v = Tensor::from_raw(vec![m, n], values);
        Ok(self.push(Cow::Owned(v), Op::LayerNorm { x, gamma, beta }, cache))
    }

    /// Row-wise softmax of `x + mask`. `mask` is a constant (not
    /// differentiated); `-inf` entries drop out of the distribution.
    pub fn softmax_rows(
        &mut self,
        x: NodeId,
        mask: Option<&Tensor>,
    ) -> Result<NodeId, TensorError> {
        let (m, n) = self.want_rank2("softmax_rows", x)?;
        if let Some(mk) = mask {
            if mk.dims() != [m, n] {
                return Err(Self::mismatch(
                    "softmax_rows",
                    format!("mask {:?} for [{m},{n}]", mk.dims()),
                ));
            }
        }
        let xv = self.nodes[x.0].value.values();
        let mut values = vec![0.0; m * n];
        for r in 0..m {
            let mut logits: Vec<f64> = Vec::with_capacity(n);
            for c in 0..n {
                let base = xv[r * n + c];
                logits.push(match mask {
                    Some(mk) => base + mk.values()[r * n + c],
                    None => base,
                });
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for c in 0..n {
                let e = (logits[c] - max).exp();
                values[r * n + c] = e;
                denom += e;
            }
            for c in 0..n {
                values[r * n + c] /= denom;
            }
        }
        let v = Tensor::from_raw(vec![m, n], values);
        Ok(self.push(Cow::Owned(v), Op::SoftmaxRows { x }, Vec::new()))
    }

    pub fn slice_rows(
        &mut self,
        x: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let (m, n) = self.want_rank2("slice_rows", x)?;
        if start + len > m {
            return Err(Self::mismatch("slice_rows", format!("{start}+{len} > {m}")));
        }
        let xv = self.nodes[x.0].value.values();
        let v = Tensor::from_raw(vec![len, n], xv[start * n..(start + len) * n].to_vec());
        Ok(self.push(Cow::Owned(v), Op::SliceRows { x, start, len }, Vec::new()))
    }

    pub fn slice_cols(
        &mut self,
        x: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let (m, n) = self.want_rank2("slice_cols", x)?;
        if start + len > n {
            return Err(Self::mismatch("slice_cols", format!("{start}+{len} > {n}")));
        }
        let xv = self.nodes[x.0].value.values();
        let mut values = Vec::with_capacity(m * len);
        for r in 0..m {
            values.extend_from_slice(&xv[r * n + start..r * n + start + len]);
        }
        let v = Tensor::from_raw(vec![m, len], values);
        Ok(self.push(Cow::Owned(v), Op::SliceCols { x, start, len }, Vec::new()))
    }

    /// Interleaves rows of two `[L,n]` tensors: a0 b0 a1 b1 ...
    pub fn interleave_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (la, n) = self.want_rank2("interleave_rows", a)?;
        let (lb, n2) = self.want_rank2("interleave_rows", b)?;
        if la != lb || n != n2 {
            return Err(Self::mismatch(
                "interleave_rows",
                format!("[{la},{n}] vs [{lb},{n2}]"),
            ));
        }
        let av = self.nodes[a.0].value.values();
        let bv = self.nodes[b.0].value.values();
        let mut values = Vec::with_capacity(2 * la * n);
        for r in 0..la {
            values.extend_from_slice(&av[r * n..(r + 1) * n]);
            values.extend_from_slice(&bv[r * n..(r + 1) * n]);
        }
        let v = Tensor::from_raw(vec![2 * la, n], values);
        Ok(self.push(Cow::Owned(v), Op::InterleaveRows(a, b), Vec::new()))
    }

    /// Rows `offset, offset+step, ...` of `x`.
    pub fn stride_rows(
        &mut self,
        x: NodeId,
        offset: usize,
        step: usize,
    ) -> Result<NodeId, TensorError> {
        let (m, n) = self.want_rank2("stride_rows", x)?;
        if step == 0 || offset >= m {
            return Err(Self::mismatch("stride_rows", format!("offset {offset} step {step} rows {m}")));
        }
        let xv = self.nodes[x.0].value.values();
        let mut values = Vec::new();
        let mut r = offset;
        while r < m {
            values.extend_from_slice(&xv[r * n..(r + 1) * n]);
            r += step;
        }
        let rows = values.len() / n;
        let v = Tensor::from_raw(vec![rows, n], values);
        Ok(self.push(Cow::Owned(v), Op::StrideRows { x, offset, step }, Vec::new()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(Self::mismatch("concat_rows", "no parts".into()));
        }
        let n = self.want_rank2("concat_rows", parts[0])?.1;
        let mut rows = 0;
        let mut values = Vec::new();
        for &p in parts {
            let (m, n2) = self.want_rank2("concat_rows", p)?;
            if n2 != n {
                return Err(Self::mismatch("concat_rows", format!("cols {n2} != {n}")));
            }
            rows += m;
            values.extend_from_slice(self.nodes[p.0].value.values());
        }
        let v = Tensor::from_raw(vec![rows, n], values);
        Ok(self.push(Cow::Owned(v), Op::ConcatRows(parts.to_vec()), Vec::new()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(Self::mismatch("concat_cols", "no parts".into()));
        }
        let m = self.want_rank2("concat_cols", parts[0])?.0;
        let mut total = 0;
        for &p in parts {
            let (m2, n) = self.want_rank2("concat_cols", p)?;
            if m2 != m {
                return Err(Self::mismatch("concat_cols", format!("rows {m2} != {m}")));
            }
            total += n;
        }
        let mut values = vec![0.0; m * total];
        let mut off = 0;
        for &p in parts {
            let n = self.dims(p)[1];
            let pv = self.nodes[p.0].value.values();
            for r in 0..m {
                values[r * total + off..r * total + off + n]
                    .copy_from_slice(&pv[r * n..(r + 1) * n]);
            }
            off += n;
        }
        let v = Tensor::from_raw(vec![m, total], values);
        Ok(self.push(Cow::Owned(v), Op::ConcatCols(parts.to_vec()), Vec::new()))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x.0].value.values().iter().sum();
        self.push(Cow::Owned(Tensor::scalar(s)), Op::SumAll(x), Vec::new())
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.values();
        let s: f64 = v.iter().sum::<f64>() / v.len() as f64;
        self.push(Cow::Owned(Tensor::scalar(s)), Op::MeanAll(x), Vec::new())
    }

    /// Runs the reverse sweep from scalar node `loss`; returns one gradient
    /// slot per node (empty where the node does not influence the loss).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Invalid(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_raw(self.dims(loss).to_vec(), vec![1.0]));

        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            self.apply_vjp(id, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        Ok(Gradients { slots: grads })
    }

    fn apply_vjp(&self, id: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        fn acc(slot: &mut Option<Tensor>, dims: &[usize], add: impl Fn(&mut [f64])) {
            let g = slot.get_or_insert_with(|| Tensor::zeros(dims));
            add(g.values_mut());
        }
        fn acc_tensor(slot: &mut Option<Tensor>, t: Tensor) {
            match slot {
                None => *slot = Some(t),
                Some(g) => {
                    for (d, s) in g.values_mut().iter_mut().zip(t.values()) {
                        *d += s;
                    }
                }
            }
        }

        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let av = &*self.nodes[a.0].value;
                let bv = &*self.nodes[b.0].value;
                acc_tensor(&mut grads[a.0], matmul_a_bt(gy, bv));
                acc_tensor(&mut grads[b.0], matmul_at_b(av, gy));
            }
            Op::MatmulNt(a, b) => {
                // y = a b^T: da = gy @ b, db = gy^T @ a
                let av = &*self.nodes[a.0].value;
                let bv = &*self.nodes[b.0].value;
                acc_tensor(&mut grads[a.0], matmul_raw(gy, bv));
                acc_tensor(&mut grads[b.0], matmul_at_b(gy, av));
            }
            Op::Add(a, b) => {
                acc_tensor(&mut grads[a.0], gy.clone());
                acc_tensor(&mut grads[b.0], gy.clone());
            }
            Op::Sub(a, b) => {
                acc_tensor(&mut grads[a.0], gy.clone());
                acc(&mut grads[b.0], gy.dims(), |g| {
                    for (d, s) in g.iter_mut().zip(gy.values()) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.values();
                let bv = self.nodes[b.0].value.values();
                acc(&mut grads[a.0], gy.dims(), |g| {
                    for ((d, s), &o) in g.iter_mut().zip(gy.values()).zip(bv) {
                        *d += s * o;
                    }
                });
                acc(&mut grads[b.0], gy.dims(), |g| {
                    for ((d, s), &o) in g.iter_mut().zip(gy.values()).zip(av) {
                        *d += s * o;
                    }
                });
            }
            Op::AddBias(a, bias) => {
                acc_tensor(&mut grads[a.0], gy.clone());
                let n = self.dims(*bias)[0];
                let m = gy.dims()[0];
                acc(&mut grads[bias.0], &[n], |g| {
                    for r in 0..m {
                        for c in 0..n {
                            g[c] += gy.values()[r * n + c];
                        }
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                acc(&mut grads[x.0], gy.dims(), |g| {
                    for (d, s) in g.iter_mut().zip(gy.values()) {
                        *d += c * s;
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.nodes[x.0].value.values();
                acc(&mut grads[x.0], gy.dims(), |g| {
                    for ((d, s), &t) in g.iter_mut().zip(gy.values()).zip(xv) {
                        if t > 0.0 {
                            *d += s;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.nodes[x.0].value.values();
                acc(&mut grads[x.0], gy.dims(), |g| {
                    for ((d, s), &t) in g.iter_mut().zip(gy.values()).zip(xv) {
                        let u = GELU_S * (t + GELU_C * t * t * t);
                        let th = u.tanh();
                        let sech2 = 1.0 - th * th;
                        let du = GELU_S * (1.0 + 3.0 * GELU_C * t * t);
                        *d += s * (0.5 * (1.0 + th) + 0.5 * t * sech2 * du);
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.nodes[x.0].value.values();
                acc(&mut grads[x.0], gy.dims(), |g| {
                    for ((d, s), &t) in g.iter_mut().zip(gy.values()).zip(xv) {
                        *d += 2.0 * t * s;
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta } => {
                let n = self.dims(*x)[1];
                let m = self.dims(*x)[0];
                let xv = self.nodes[x.0].value.values();
                let gv = self.nodes[gamma.0].value.values();
                let cache = &node.cache;
                // d_beta and d_gamma.
                acc(&mut grads[beta.0], &[n], |g| {
                    for r in 0..m {
                        for c in 0..n {
                            g[c] += gy.values()[r * n + c];
                        }
                    }
                });
                acc(&mut grads[gamma.0], &[n], |g| {
                    for r in 0..m {
                        let (mean, inv_std) = (cache[2 * r], cache[2 * r + 1]);
                        for c in 0..n {
                            let xh = (xv[r * n + c] - mean) * inv_std;
                            g[c] += gy.values()[r * n + c] * xh;
                        }
                    }
                });
                acc(&mut grads[x.0], &[m, n], |g| {
                    for r in 0..m {
                        let (mean, inv_std) = (cache[2 * r], cache[2 * r + 1]);
                        let mut dot = 0.0f64;
                        let mut dot_xh = 0.0f64;
                        for c in 0..n {
                            let dyg = gy.values()[r * n + c] * gv[c];
                            let xh = (xv[r * n + c] - mean) * inv_std;
                            dot += dyg;
                            dot_xh += dyg * xh;
                        }
                        let inv_n = 1.0 / n as f64;
                        for c in 0..n {
                            let dyg = gy.values()[r * n + c] * gv[c];
                            let xh = (xv[r * n + c] - mean) * inv_std;
                            g[r * n + c] +=
                                inv_std * (dyg - inv_n * dot - xh * inv_n * dot_xh);
                        }
                    }
                });
            }
            Op::SoftmaxRows { x } => {
                let y = self.nodes[id].value.values();
                let (m, n) = (gy.dims()[0], gy.dims()[1]);
                acc(&mut grads[x.0], gy.dims(), |g| {
                    for r in 0..m {
                        let mut dot = 0.0f64;
                        for c in 0..n {
                            dot += gy.values()[r * n + c] * y[r * n + c];
                        }
                        for c in 0..n {
                            g[r * n + c] += y[r * n + c] * (gy.values()[r * n + c] - dot);
                        }
                    }
                });
            }
            Op::SliceRows { x, start, len } => {
                let n = self.dims(*x)[1];
                let (start, len) = (*start, *len);
                acc(&mut grads[x.0], self.dims(*x), |g| {
                    for r in 0..len {
                        for c in 0..n {
                            g[(start + r) * n + c] += gy.values()[r * n + c];
                        }
                    }
                });
            }
            Op::SliceCols { x, start, len } => {
                let (m, n) = (self.dims(*x)[0], self.dims(*x)[1]);
                let (start, len) = (*start, *len);
                acc(&mut grads[x.0], &[m, n], |g| {
                    for r in 0..m {
                        for c in 0..len {
                            g[r * n + start + c] += gy.values()[r * len + c];
                        }
                    }
                });
            }
            Op::InterleaveRows(a, b) => {
                let n = gy.dims()[1];
                let l = self.dims(*a)[0];
                acc(&mut grads[a.0], &[l, n], |g| {
                    for r in 0..l {
                        for c in 0..n {
                            g[r * n + c] += gy.values()[(2 * r) * n + c];
                        }
                    }
                });
                acc(&mut grads[b.0], &[l, n], |g| {
                    for r in 0..l {
                        for c in 0..n {
                            g[r * n + c] += gy.values()[(2 * r + 1) * n + c];
                        }
                    }
                });
            }
            Op::StrideRows { x, offset, step } => {
                let (m, n) = (self.dims(*x)[0], self.dims(*x)[1]);
                let (offset, step) = (*offset, *step);
                acc(&mut grads[x.0], &[m, n], |g| {
                    let mut out_r = 0;
                    let mut r = offset;
                    while r < m {
                        for c in 0..n {
                            g[r * n + c] += gy.values()[out_r * n + c];
                        }
                        out_r += 1;
                        r += step;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let n = gy.dims()[1];
                let mut row = 0;
                for &p in parts {
                    let m = self.dims(p)[0];
                    acc(&mut grads[p.0], self.dims(p), |g| {
                        for r in 0..m {
                            for c in 0..n {
                                g[r * n + c] += gy.values()[(row + r) * n + c];
                            }
                        }
                    });
                    row += m;
                }
            }
            Op::ConcatCols(parts) => {
                let total = gy.dims()[1];
                let m = gy.dims()[0];
                let mut off = 0;
                for &p in parts {
                    let n = self.dims(p)[1];
                    acc(&mut grads[p.0], &[m, n], |g| {
                        for r in 0..m {
                            for c in 0..n {
                                g[r * n + c] += gy.values()[r * total + off + c];
                            }
                        }
                    });
                    off += n;
                }
            }
            Op::SumAll(x) => {
                let s = gy.values()[0];
                acc(&mut grads[x.0], self.dims(*x), |g| {
                    for d in g.iter_mut() {
                        *d += s;
                    }
                });
            }
            Op::MeanAll(x) => {
                let len = self.nodes[x.0].value.len();
                let s = gy.values()[0] / len as f64;
                acc(&mut grads[x.0], self.dims(*x), |g| {
                    for d in g.iter_mut() {
                        *d += s;
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_chain_hand_gradient() {
        // loss = (w * x - y)^2 with w=1, x=2, y=0 -> dL/dw = 2*(wx-y)*x = 8.
        let w = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let mut tape = Tape::new();
        let wid = tape.param(&w);
        let x = tape.leaf(Tensor::matrix(1, 1, vec![2.0]).unwrap());
        let y = tape.leaf(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let pred = tape.matmul(wid, x).unwrap();
        let diff = tape.sub(pred, y).unwrap();
        let sq = tape.square(diff);
        let loss = tape.sum_all(sq);
        assert!((tape.value(loss).item() - 4.0).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        let gw = grads.get(wid).unwrap();
        assert!((gw.values()[0] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(3, 4, (0..12).map(|i| i as f64 * 0.3).collect()).unwrap());
        let s = tape.softmax_rows(x, None).unwrap();
        let v = tape.value(s);
        for r in 0..3 {
            let sum: f64 = (0..4).map(|c| v.get2(r, c)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_zeroes_future() {
        // Masks legitimately hold -inf, so bypass the finiteness check.
        let mask = Tensor::from_raw(vec![2, 2], vec![0.0, f64::NEG_INFINITY, 0.0, 0.0]);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 2, vec![5.0, 100.0, 1.0, 1.0]).unwrap());
        let s = tape.softmax_rows(x, Some(&mask)).unwrap();
        let v = tape.value(s);
        assert_eq!(v.get2(0, 0), 1.0);
        assert_eq!(v.get2(0, 1), 0.0);
        assert!((v.get2(1, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn forward_backward_bit_reproducible() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let w = Tensor::matrix(4, 4, (0..16).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap();
        let x = Tensor::matrix(2, 4, (0..8).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let wid = tape.param(&w);
            let xid = tape.leaf(x.clone());
            let h = tape.matmul(xid, wid).unwrap();
            let g = tape.gelu(h);
            let l = tape.mean_all(g);
            let mut grads = tape.backward(l).unwrap();
            (tape.value(l).item(), grads.take(wid).unwrap())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1.values().len(), g2.values().len());
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
