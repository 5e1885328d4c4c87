//! Wengert-list reverse-mode autodiff over coarse primitives.
//!
//! Ops execute eagerly as they are recorded; `backward` replays the list in
//! reverse with hand-written vector-Jacobian products. The list is
//! topologically ordered by construction (an op can only reference ids that
//! already exist), and `replay` re-executes every op through the same
//! kernels to reproduce recorded outputs bit-for-bit.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Element, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op<E: Element> {
    Leaf,
    /// A[m,k] · B[k,n]
    Matmul { a: NodeId, b: NodeId },
    /// A[m,k] · B[n,k]ᵀ
    MatmulNT { a: NodeId, b: NodeId },
    Conv3x3 { input: NodeId, weight: NodeId, bias: NodeId, c_in: usize, c_out: usize, h: usize, w: usize },
    /// Saved per-row statistics make the backward pass cheap.
    LayerNorm { input: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<E>, rstd: Vec<E> },
    Softmax { input: NodeId },
    /// The mask is a constant of the op, not a differentiable input.
    MaskedSoftmax { input: NodeId, mask: Tensor<E> },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    /// y = mul·x + add
    AffineConst { a: NodeId, mul: E, add: E },
    /// [R,C] plus a length-C vector added to every row
    AddRowVec { a: NodeId, v: NodeId },
    /// [C,N] plus a length-C vector added per channel row
    AddChanBias { a: NodeId, v: NodeId },
    Silu { a: NodeId },
    Sigmoid { a: NodeId },
    /// Gathers rows of a [V,D] table.
    Embed { table: NodeId, ids: Vec<usize> },
    SliceCols { a: NodeId, start: usize, len: usize },
    ConcatCols { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Reshape { a: NodeId },
    /// Full reduction to a [1] scalar.
    Sum { a: NodeId },
    /// Sum of an arbitrary index set, to a [1] scalar.
    SumSelected { a: NodeId, idx: Vec<usize> },
}

struct Node<E: Element> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Gradients keyed by node id. Leaves that the loss never touched report
/// zero tensors rather than being absent.
pub struct Gradients<E: Element> {
    grads: Vec<Option<Tensor<E>>>,
    shapes: Vec<Vec<usize>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, id: NodeId) -> Result<Tensor<E>> {
        let shape = self.shapes.get(id).ok_or(Error::UnknownNode(id))?;
        Ok(match &self.grads[id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        })
    }

    pub fn take(&mut self, id: NodeId) -> Result<Tensor<E>> {
        let shape = self.shapes.get(id).ok_or(Error::UnknownNode(id))?.clone();
        Ok(self.grads[id].take().unwrap_or_else(|| Tensor::zeros(&shape)))
    }
}

pub struct Tape<E: Element = f64> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<E>> {
        self.nodes.get(id).map(|n| &n.value).ok_or(Error::UnknownNode(id))
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> NodeId {
        // topological order holds by construction: every input id below
        // already exists
        if cfg!(debug_assertions) {
            for inp in op_inputs(&op) {
                debug_assert!(inp < self.nodes.len(), "op input {inp} recorded after output");
            }
        }
        self.nodes.push(Node { value, op, requires_grad });
        self.nodes.len() - 1
    }

    fn val(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id].value
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ── recording API ───────────────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = kernels::matmul(self.val(a), self.val(b))?;
        Ok(self.push(value, Op::Matmul { a, b }, self.rg(&[a, b])))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = kernels::matmul_nt(self.val(a), self.val(b))?;
        Ok(self.push(value, Op::MatmulNT { a, b }, self.rg(&[a, b])))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv3x3(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        c_in: usize,
        c_out: usize,
        h: usize,
        w: usize,
    ) -> NodeId {
        let value = kernels::conv3x3_forward(self.val(input), self.val(weight), self.val(bias), c_in, c_out, h, w);
        let rg = self.rg(&[input, weight, bias]);
        self.push(value, Op::Conv3x3 { input, weight, bias, c_in, c_out, h, w }, rg)
    }

    pub fn layernorm(&mut self, input: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let eps = E::from_f64(1e-6);
        let (value, mean, rstd) = kernels::layernorm_forward(self.val(input), self.val(gamma), self.val(beta), eps);
        let rg = self.rg(&[input, gamma, beta]);
        self.push(value, Op::LayerNorm { input, gamma, beta, mean, rstd }, rg)
    }

    pub fn softmax(&mut self, input: NodeId) -> NodeId {
        let value = kernels::softmax_rows(self.val(input));
        let rg = self.rg(&[input]);
        self.push(value, Op::Softmax { input }, rg)
    }

    pub fn masked_softmax(&mut self, input: NodeId, mask: Tensor<E>) -> Result<NodeId> {
        let value = kernels::masked_softmax(self.val(input), &mask)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::MaskedSoftmax { input, mask }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.val(a).add(self.val(b))?;
        Ok(self.push(value, Op::Add { a, b }, self.rg(&[a, b])))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.val(a).sub(self.val(b))?;
        Ok(self.push(value, Op::Sub { a, b }, self.rg(&[a, b])))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("tape mul", tb.shape(), ta.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }, self.rg(&[a, b])))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("tape div", tb.shape(), ta.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x / y).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Div { a, b }, self.rg(&[a, b])))
    }

    /// y = mul·x + add
    pub fn affine(&mut self, a: NodeId, mul: E, add: E) -> NodeId {
        let value = self.val(a).map(|x| mul * x + add);
        let rg = self.rg(&[a]);
        self.push(value, Op::AffineConst { a, mul, add }, rg)
    }

    pub fn add_row_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (ta, tv) = (self.val(a), self.val(v));
        let (r, c) = (ta.rows(), ta.cols());
        if tv.len() != c {
            return Err(Error::shape("add_row_vec", tv.shape(), &[c]));
        }
        let mut data = ta.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += tv.data()[j];
            }
        }
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRowVec { a, v }, self.rg(&[a, v])))
    }

    /// Adds v[c] to every element of channel row c of a [C,·] tensor.
    pub fn add_chan_bias(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (ta, tv) = (self.val(a), self.val(v));
        let c = ta.shape()[0];
        let n = ta.len() / c;
        if tv.len() != c {
            return Err(Error::shape("add_chan_bias", tv.shape(), &[c]));
        }
        let mut data = ta.data().to_vec();
        for ch in 0..c {
            let bias = tv.data()[ch];
            for x in &mut data[ch * n..(ch + 1) * n] {
                *x += bias;
            }
        }
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddChanBias { a, v }, self.rg(&[a, v])))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let value = kernels::silu(self.val(a));
        let rg = self.rg(&[a]);
        self.push(value, Op::Silu { a }, rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = kernels::sigmoid(self.val(a));
        let rg = self.rg(&[a]);
        self.push(value, Op::Sigmoid { a }, rg)
    }

    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.val(table);
        let (v, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::DegenerateData(format!("embedding id {id} out of range {v}")));
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::from_vec(vec![ids.len(), d], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(value, Op::Embed { table, ids: ids.to_vec() }, rg))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = self.val(a);
        let (r, c) = (t.rows(), t.cols());
        if start + len > c {
            return Err(Error::shape("slice_cols", &[start + len], &[c]));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let value = Tensor::from_vec(vec![r, len], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceCols { a, start, len }, rg))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.rows() != tb.rows() {
            return Err(Error::shape("concat_cols", tb.shape(), ta.shape()));
        }
        let (r, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        let value = Tensor::from_vec(vec![r, ca + cb], data)?;
        Ok(self.push(value, Op::ConcatCols { a, b }, self.rg(&[a, b])))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = kernels::transpose(self.val(a));
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose { a }, rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.val(a).reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.val(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum { a }, rg)
    }

    pub fn sum_selected(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let t = self.val(a);
        let mut acc = E::zero();
        for &i in idx {
            if i >= t.len() {
                return Err(Error::DegenerateData(format!("selection index {i} out of range {}", t.len())));
            }
            acc += t.data()[i];
        }
        let value = Tensor::scalar(acc);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SumSelected { a, idx: idx.to_vec() }, rg))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar node. Returns gradients for every node;
    /// leaves the loss never touched report zeros.
    pub fn backward(&self, seed: NodeId) -> Result<Gradients<E>> {
        let seed_node = self.nodes.get(seed).ok_or(Error::UnknownNode(seed))?;
        if seed_node.value.len() != 1 {
            return Err(Error::DegenerateData(format!(
                "backward seed must be scalar, got shape {:?}",
                seed_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        grads[seed] = Some(Tensor::scalar(E::one()));

        for id in (0..=seed).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.push_vjp(id, &g, &mut grads)?;
            // re-store: callers may query interior gradients too
            grads[id] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accum(&self, grads: &mut [Option<Tensor<E>>], id: NodeId, contrib: Tensor<E>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => {
                let gd = g.data_mut();
                for (gi, ci) in gd.iter_mut().zip(contrib.data()) {
                    *gi += *ci;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn push_vjp(&self, id: NodeId, g: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                if self.nodes[*a].requires_grad {
                    self.accum(grads, *a, kernels::matmul_nt(g, self.val(*b))?);
                }
                if self.nodes[*b].requires_grad {
                    self.accum(grads, *b, kernels::matmul_tn(self.val(*a), g)?);
                }
            }
            Op::MatmulNT { a, b } => {
                if self.nodes[*a].requires_grad {
                    self.accum(grads, *a, kernels::matmul(g, self.val(*b))?);
                }
                if self.nodes[*b].requires_grad {
                    self.accum(grads, *b, kernels::matmul_tn(g, self.val(*a))?);
                }
            }
            Op::Conv3x3 { input, weight, bias, c_in, c_out, h, w } => {
                let (d_in, d_w, d_b) = kernels::conv3x3_backward(
                    self.val(*input),
                    self.val(*weight),
                    g.data(),
                    *c_in,
                    *c_out,
                    *h,
                    *w,
                );
                self.accum(grads, *input, Tensor::from_vec(self.val(*input).shape().to_vec(), d_in)?);
                self.accum(grads, *weight, Tensor::from_vec(self.val(*weight).shape().to_vec(), d_w)?);
                self.accum(grads, *bias, Tensor::from_vec(self.val(*bias).shape().to_vec(), d_b)?);
            }
            Op::LayerNorm { input, gamma, beta, mean, rstd } => {
                let x = self.val(*input);
                let gam = self.val(*gamma);
                let (r, c) = (x.rows(), x.cols());
                let cn = E::from_f64(c as f64);
                let mut d_in = vec![E::zero(); r * c];
                let mut d_gamma = vec![E::zero(); c];
                let mut d_beta = vec![E::zero(); c];
                for i in 0..r {
                    let xrow = x.row(i);
                    let grow = g.row(i);
                    let (mu, rs) = (mean[i], rstd[i]);
                    // dŷ = g⊙γ; dx = rstd(dŷ − mean(dŷ) − x̂·mean(dŷ⊙x̂))
                    let mut mean_dy = E::zero();
                    let mut mean_dyxh = E::zero();
                    for j in 0..c {
                        let xh = (xrow[j] - mu) * rs;
                        let dy = grow[j] * gam.data()[j];
                        mean_dy += dy;
                        mean_dyxh += dy * xh;
                        d_gamma[j] += grow[j] * xh;
                        d_beta[j] += grow[j];
                    }
                    mean_dy = mean_dy / cn;
                    mean_dyxh = mean_dyxh / cn;
                    for j in 0..c {
                        let xh = (xrow[j] - mu) * rs;
                        let dy = grow[j] * gam.data()[j];
                        d_in[i * c + j] = rs * (dy - mean_dy - xh * mean_dyxh);
                    }
                }
                self.accum(grads, *input, Tensor::from_vec(x.shape().to_vec(), d_in)?);
                self.accum(grads, *gamma, Tensor::from_vec(vec![c], d_gamma)?);
                self.accum(grads, *beta, Tensor::from_vec(vec![c], d_beta)?);
            }
            Op::Softmax { input } | Op::MaskedSoftmax { input, .. } => {
                // dx = y ⊙ (g − ⟨g, y⟩) row-wise; masked positions have
                // y = 0 so their gradient vanishes automatically
                let y = self.val(id);
                let (r, c) = (y.rows(), y.cols());
                let mut d_in = vec![E::zero(); r * c];
                for i in 0..r {
                    let yrow = y.row(i);
                    let grow = g.row(i);
                    let mut dot = E::zero();
                    for j in 0..c {
                        dot += grow[j] * yrow[j];
                    }
                    for j in 0..c {
                        d_in[i * c + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.accum(grads, *input, Tensor::from_vec(y.shape().to_vec(), d_in)?);
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|x| -x));
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].requires_grad {
                    let tb = self.val(*b);
                    let data = g.data().iter().zip(tb.data()).map(|(&gi, &bi)| gi * bi).collect();
                    self.accum(grads, *a, Tensor::from_vec(g.shape().to_vec(), data)?);
                }
                if self.nodes[*b].requires_grad {
                    let ta = self.val(*a);
                    let data = g.data().iter().zip(ta.data()).map(|(&gi, &ai)| gi * ai).collect();
                    self.accum(grads, *b, Tensor::from_vec(g.shape().to_vec(), data)?);
                }
            }
            Op::Div { a, b } => {
                let tb = self.val(*b);
                if self.nodes[*a].requires_grad {
                    let data = g.data().iter().zip(tb.data()).map(|(&gi, &bi)| gi / bi).collect();
                    self.accum(grads, *a, Tensor::from_vec(g.shape().to_vec(), data)?);
                }
                if self.nodes[*b].requires_grad {
                    let y = self.val(id);
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .zip(tb.data())
                        .map(|((&gi, &yi), &bi)| -gi * yi / bi)
                        .collect();
                    self.accum(grads, *b, Tensor::from_vec(g.shape().to_vec(), data)?);
                }
            }
            Op::AffineConst { a, mul, .. } => {
                self.accum(grads, *a, g.scale(*mul));
            }
            Op::AddRowVec { a, v } => {
                self.accum(grads, *a, g.clone());
                if self.nodes[*v].requires_grad {
                    let (r, c) = (g.rows(), g.cols());
                    let mut dv = vec![E::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            dv[j] += g.at(i, j);
                        }
                    }
                    self.accum(grads, *v, Tensor::from_vec(vec![c], dv)?);
                }
            }
            Op::AddChanBias { a, v } => {
                self.accum(grads, *a, g.clone());
                if self.nodes[*v].requires_grad {
                    let c = self.val(*a).shape()[0];
                    let n = g.len() / c;
                    let mut dv = vec![E::zero(); c];
                    for ch in 0..c {
                        for j in 0..n {
                            dv[ch] += g.data()[ch * n + j];
                        }
                    }
                    // keep the node's own shape ([C] or [1, C]) so later
                    // vjps see what the forward pass saw
                    self.accum(grads, *v, Tensor::from_vec(self.val(*v).shape().to_vec(), dv)?);
                }
            }
            Op::Silu { a } => {
                let x = self.val(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gi, &xi)| {
                        let s = kernels::sigmoid_scalar(xi);
                        gi * (s + xi * s * (E::one() - s))
                    })
                    .collect();
                self.accum(grads, *a, Tensor::from_vec(g.shape().to_vec(), data)?);
            }
            Op::Sigmoid { a } => {
                let y = self.val(id);
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gi, &yi)| gi * yi * (E::one() - yi))
                    .collect();
                self.accum(grads, *a, Tensor::from_vec(g.shape().to_vec(), data)?);
            }
            Op::Embed { table, ids } => {
                if self.nodes[*table].requires_grad {
                    let t = self.val(*table);
                    let d = t.cols();
                    let mut dt = vec![E::zero(); t.len()];
                    for (row, &tok) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[tok * d + j] += g.at(row, j);
                        }
                    }
                    self.accum(grads, *table, Tensor::from_vec(t.shape().to_vec(), dt)?);
                }
            }
            Op::SliceCols { a, start, len } => {
                let ta = self.val(*a);
                let (r, c) = (ta.rows(), ta.cols());
                let mut da = vec![E::zero(); r * c];
                for i in 0..r {
                    for j in 0..*len {
                        da[i * c + start + j] = g.at(i, j);
                    }
                }
                self.accum(grads, *a, Tensor::from_vec(ta.shape().to_vec(), da)?);
            }
            Op::ConcatCols { a, b } => {
                let (ca, cb) = (self.val(*a).cols(), self.val(*b).cols());
                let r = g.rows();
                if self.nodes[*a].requires_grad {
                    let mut da = Vec::with_capacity(r * ca);
                    for i in 0..r {
                        da.extend_from_slice(&g.row(i)[..ca]);
                    }
                    self.accum(grads, *a, Tensor::from_vec(vec![r, ca], da)?);
                }
                if self.nodes[*b].requires_grad {
                    let mut db = Vec::with_capacity(r * cb);
                    for i in 0..r {
                        db.extend_from_slice(&g.row(i)[ca..]);
                    }
                    self.accum(grads, *b, Tensor::from_vec(vec![r, cb], db)?);
                }
            }
            Op::Transpose { a } => {
                self.accum(grads, *a, kernels::transpose(g));
            }
            Op::Reshape { a } => {
                let shape = self.val(*a).shape().to_vec();
                self.accum(grads, *a, g.reshaped(&shape)?);
            }
            Op::Sum { a } => {
                let s = g.data()[0];
                self.accum(grads, *a, Tensor::filled(self.val(*a).shape(), s));
            }
            Op::SumSelected { a, idx } => {
                let s = g.data()[0];
                let mut da = Tensor::zeros(self.val(*a).shape());
                for &i in idx {
                    da.data_mut()[i] += s;
                }
                self.accum(grads, *a, da);
            }
        }
        Ok(())
    }

    // ── replay ──────────────────────────────────────────────────────────

    /// Re-executes every recorded op through the same kernels and returns
    /// the recomputed values. Used to assert that the list is a faithful,
    /// bit-reproducible program.
    pub fn replay(&self) -> Result<Vec<Tensor<E>>> {
        let mut vals: Vec<Tensor<E>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::Matmul { a, b } => kernels::matmul(&vals[*a], &vals[*b])?,
                Op::MatmulNT { a, b } => kernels::matmul_nt(&vals[*a], &vals[*b])?,
                Op::Conv3x3 { input, weight, bias, c_in, c_out, h, w } => {
                    kernels::conv3x3_forward(&vals[*input], &vals[*weight], &vals[*bias], *c_in, *c_out, *h, *w)
                }
                Op::LayerNorm { input, gamma, beta, .. } => {
                    kernels::layernorm_forward(&vals[*input], &vals[*gamma], &vals[*beta], E::from_f64(1e-6)).0
                }
                Op::Softmax { input } => kernels::softmax_rows(&vals[*input]),
                Op::MaskedSoftmax { input, mask } => kernels::masked_softmax(&vals[*input], mask)?,
                Op::Add { a, b } => vals[*a].add(&vals[*b])?,
                Op::Sub { a, b } => vals[*a].sub(&vals[*b])?,
                Op::Mul { a, b } => {
                    let data = vals[*a].data().iter().zip(vals[*b].data()).map(|(&x, &y)| x * y).collect();
                    Tensor::from_vec(vals[*a].shape().to_vec(), data)?
                }
                Op::Div { a, b } => {
                    let data = vals[*a].data().iter().zip(vals[*b].data()).map(|(&x, &y)| x / y).collect();
                    Tensor::from_vec(vals[*a].shape().to_vec(), data)?
                }
                Op::AffineConst { a, mul, add } => vals[*a].map(|x| *mul * x + *add),
                Op::AddRowVec { a, v } => {
                    let (r, c) = (vals[*a].rows(), vals[*a].cols());
                    let mut data = vals[*a].data().to_vec();
                    for i in 0..r {
                        for j in 0..c {
                            data[i * c + j] += vals[*v].data()[j];
                        }
                    }
                    Tensor::from_vec(vals[*a].shape().to_vec(), data)?
                }
                Op::AddChanBias { a, v } => {
                    let c = vals[*a].shape()[0];
                    let n = vals[*a].len() / c;
                    let mut data = vals[*a].data().to_vec();
                    for ch in 0..c {
                        let bias = vals[*v].data()[ch];
                        for x in &mut data[ch * n..(ch + 1) * n] {
                            *x += bias;
                        }
                    }
                    Tensor::from_vec(vals[*a].shape().to_vec(), data)?
                }
                Op::Silu { a } => kernels::silu(&vals[*a]),
                Op::Sigmoid { a } => kernels::sigmoid(&vals[*a]),
                Op::Embed { table, ids } => {
                    let t = &vals[*table];
                    let d = t.cols();
                    let mut data = Vec::with_capacity(ids.len() * d);
                    for &id in ids {
                        data.extend_from_slice(t.row(id));
                    }
                    Tensor::from_vec(vec![ids.len(), d], data)?
                }
                Op::SliceCols { a, start, len } => {
                    let t = &vals[*a];
                    let mut data = Vec::with_capacity(t.rows() * len);
                    for i in 0..t.rows() {
                        data.extend_from_slice(&t.row(i)[*start..start + len]);
                    }
                    Tensor::from_vec(vec![t.rows(), *len], data)?
                }
                Op::ConcatCols { a, b } => {
                    let (ta, tb) = (&vals[*a], &vals[*b]);
                    let mut data = Vec::with_capacity(ta.len() + tb.len());
                    for i in 0..ta.rows() {
                        data.extend_from_slice(ta.row(i));
                        data.extend_from_slice(tb.row(i));
                    }
                    Tensor::from_vec(vec![ta.rows(), ta.cols() + tb.cols()], data)?
                }
                Op::Transpose { a } => kernels::transpose(&vals[*a]),
                Op::Reshape { a } => vals[*a].reshaped(node.value.shape())?,
                Op::Sum { a } => Tensor::scalar(vals[*a].sum()),
                Op::SumSelected { a, idx } => {
                    let mut acc = E::zero();
                    for &i in idx {
                        acc += vals[*a].data()[i];
                    }
                    Tensor::scalar(acc)
                }
            };
            vals.push(v);
        }
        Ok(vals)
    }
}

fn op_inputs<E: Element>(op: &Op<E>) -> Vec<NodeId> {
    match op {
        Op::Leaf => vec![],
        Op::Matmul { a, b }
        | Op::MatmulNT { a, b }
        | Op::Add { a, b }
        | Op::Sub { a, b }
        | Op::Mul { a, b }
        | Op::Div { a, b }
        | Op::AddRowVec { a, v: b }
        | Op::AddChanBias { a, v: b }
        | Op::ConcatCols { a, b } => vec![*a, *b],
        Op::Conv3x3 { input, weight, bias, .. } => vec![*input, *weight, *bias],
        Op::LayerNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
        Op::Softmax { input } | Op::MaskedSoftmax { input, .. } => vec![*input],
        Op::AffineConst { a, .. }
        | Op::Silu { a }
        | Op::Sigmoid { a }
        | Op::SliceCols { a, .. }
        | Op::Transpose { a }
        | Op::Reshape { a }
        | Op::Sum { a }
        | Op::SumSelected { a, .. } => vec![*a],
        Op::Embed { table, .. } => vec![*table],
    }
}

/// Central-difference gradient of a scalar function, for checking the
/// analytic backward pass. Step size is scaled per coordinate.
pub fn finite_difference<F>(f: F, x: &Tensor<f64>, eps: f64) -> Tensor<f64>
where
    F: Fn(&Tensor<f64>) -> f64,
{
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let h = eps * x.data()[i].abs().max(1.0);
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        grad.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    grad
}

/// Largest relative error between an analytic and a reference gradient,
/// with an absolute floor so near-zero entries do not blow up the ratio.
pub fn max_rel_err(analytic: &Tensor<f64>, reference: &Tensor<f64>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &r)| (a - r).abs() / r.abs().max(a.abs()).max(1e-4))
        .fold(0.0, f64::max)
}
