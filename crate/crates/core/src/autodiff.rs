//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Nodes are appended in evaluation order, so parents always have smaller ids
//! than their children and walking the tape backwards is a reverse
//! topological order. Gradients only flow into nodes that (transitively)
//! depend on a [`Tape::variable`]; everything built purely from constants is
//! skipped during backward.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    GlobalAveragePool(NodeId),
    Dense {
        weight: NodeId,
        input: NodeId,
        bias: NodeId,
    },
    Flatten(NodeId),
    Softmax(NodeId),
    L2Normalize(NodeId),
    SpatialMultiply {
        features: NodeId,
        filter: NodeId,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Sum(NodeId),
    Dot(NodeId, NodeId),
    SquaredDistance(NodeId, NodeId),
    Distance(NodeId, NodeId),
    Select(NodeId, usize),
    Concat(Vec<NodeId>),
    CrossEntropy {
        logits: NodeId,
        target: usize,
    },
    GaussianGrid(NodeId),
    GatedCell {
        input: NodeId,
        hidden: NodeId,
        w_gate: NodeId,
        b_gate: NodeId,
        w_cand: NodeId,
        b_cand: NodeId,
        gate: Tensor,
        cand: Tensor,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::GlobalAveragePool(_) => "global_average_pool",
            Op::Dense { .. } => "dense",
            Op::Flatten(_) => "flatten",
            Op::Softmax(_) => "softmax",
            Op::L2Normalize(_) => "l2_normalize",
            Op::SpatialMultiply { .. } => "spatial_multiply",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Sum(_) => "sum",
            Op::Dot(..) => "dot",
            Op::SquaredDistance(..) => "squared_distance",
            Op::Distance(..) => "distance",
            Op::Select(..) => "select",
            Op::Concat(_) => "concat",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::GaussianGrid(_) => "gaussian_grid",
            Op::GatedCell { .. } => "gated_cell",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => {
                let mut p = vec![*input, *kernel];
                p.extend(bias);
                p
            }
            Op::Relu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::GlobalAveragePool(a)
            | Op::Flatten(a)
            | Op::Softmax(a)
            | Op::L2Normalize(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sum(a)
            | Op::Select(a, _)
            | Op::GaussianGrid(a) => vec![*a],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Dense {
                weight,
                input,
                bias,
            } => vec![*weight, *input, *bias],
            Op::SpatialMultiply { features, filter } => vec![*features, *filter],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Dot(a, b)
            | Op::SquaredDistance(a, b)
            | Op::Distance(a, b) => vec![*a, *b],
            Op::Concat(parts) => parts.clone(),
            Op::GatedCell {
                input,
                hidden,
                w_gate,
                b_gate,
                w_cand,
                b_cand,
                ..
            } => vec![*input, *hidden, *w_gate, *b_gate, *w_cand, *b_cand],
        }
    }
}

#[derive(Clone, Debug)]
struct TapeNode {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// A single-threaded recording of one computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

/// Gradients of a scalar loss with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `id`; nodes the loss does not depend on get zeros.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, id: NodeId) -> Tensor {
        self.grads[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
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

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.kind()));
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(TapeNode {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(TapeNode {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf treated as a fixed input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(TapeNode {
            op: Op::Leaf,
            value,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn op_kind(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.kind()
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.parents()
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let mut v = ops::conv2d(self.value(input), self.value(kernel), stride, padding)?;
        if let Some(b) = bias {
            v = ops::add_channel_bias(&v, self.value(b))?;
        }
        self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            v,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::relu(self.value(x));
        self.push(Op::Relu(x), v)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x), v)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::sigmoid(self.value(x));
        self.push(Op::Sigmoid(x), v)
    }

    pub fn global_average_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::global_average_pool(self.value(x))?;
        self.push(Op::GlobalAveragePool(x), v)
    }

    pub fn dense(&mut self, weight: NodeId, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = ops::dense(self.value(weight), self.value(input), self.value(bias))?;
        self.push(
            Op::Dense {
                weight,
                input,
                bias,
            },
            v,
        )
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let v = t.reshape(vec![t.len()])?;
        self.push(Op::Flatten(x), v)
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::softmax(self.value(x));
        self.push(Op::Softmax(x), v)
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::l2_normalize(self.value(x))?;
        self.push(Op::L2Normalize(x), v)
    }

    pub fn spatial_multiply(&mut self, features: NodeId, filter: NodeId) -> Result<NodeId> {
        let v = ops::spatial_multiply(self.value(features), self.value(filter))?;
        self.push(Op::SpatialMultiply { features, filter }, v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_with(self.value(b), |x, y| x + y)?;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_with(self.value(b), |x, y| x - y)?;
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let v = self.value(a).scale(factor);
        self.push(Op::Scale(a, factor), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, offset: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + offset);
        self.push(Op::AddScalar(a), v)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("dot", self.value(a), self.value(b))?;
        let v = Tensor::scalar(self.value(a).dot(self.value(b))?);
        self.push(Op::Dot(a, b), v)
    }

    /// `||a - b||²`.
    pub fn squared_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.value(a).zip_with(self.value(b), |x, y| x - y)?;
        let v = Tensor::scalar(d.data().iter().map(|x| x * x).sum());
        self.push(Op::SquaredDistance(a, b), v)
    }

    /// Euclidean distance `||a - b||`; its gradient at zero distance is taken as zero.
    pub fn distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.value(a).zip_with(self.value(b), |x, y| x - y)?;
        let v = Tensor::scalar(d.norm_l2());
        self.push(Op::Distance(a, b), v)
    }

    /// One element of a tensor (flat index) as a scalar.
    pub fn select(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let t = self.value(a);
        if index >= t.len() {
            return Err(Error::shape("select", format!("index {index} out of range for {:?}", t.shape())));
        }
        let v = Tensor::scalar(t.data()[index]);
        self.push(Op::Select(a, index), v)
    }

    /// Flattens and concatenates into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|p| self.value(*p).data().iter().copied())
            .collect();
        let n = data.len();
        self.push(Op::Concat(parts.to_vec()), Tensor::from_parts(vec![n], data))
    }

    /// `logsumexp(logits) - logits[target]`, the softmax cross-entropy.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let z = self.value(logits);
        if target >= z.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("target {target} out of range for {} logits", z.len()),
            ));
        }
        let v = Tensor::scalar(ops::log_sum_exp(z.data()) - z.data()[target]);
        self.push(Op::CrossEntropy { logits, target }, v)
    }

    /// Gaussian bump over a `rows × cols` grid parameterized by its mean.
    pub fn gaussian_grid(&mut self, mu: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let v = ops::gaussian_grid(self.value(mu), rows, cols)?;
        self.push(Op::GaussianGrid(mu), v)
    }

    /// One step of a minimal gated recurrent cell:
    ///
    /// ```text
    /// z  = [x; h]
    /// g  = sigmoid(W_g z + b_g)
    /// c  = tanh(W_c z + b_c)
    /// h' = (1 - g) * h + g * c
    /// ```
    pub fn gated_cell(
        &mut self,
        input: NodeId,
        hidden: NodeId,
        w_gate: NodeId,
        b_gate: NodeId,
        w_cand: NodeId,
        b_cand: NodeId,
    ) -> Result<NodeId> {
        let x = self.value(input);
        let h = self.value(hidden);
        let mut z = x.data().to_vec();
        z.extend_from_slice(h.data());
        let z = Tensor::from_parts(vec![z.len()], z);
        let gate = ops::sigmoid(&ops::dense(self.value(w_gate), &z, self.value(b_gate))?);
        let cand = ops::dense(self.value(w_cand), &z, self.value(b_cand))?.map(f64::tanh);
        if gate.len() != h.len() {
            return Err(Error::shape(
                "gated_cell",
                format!("hidden size {} but gate produces {}", h.len(), gate.len()),
            ));
        }
        let next: Vec<f64> = h
            .data()
            .iter()
            .zip(gate.data())
            .zip(cand.data())
            .map(|((&hv, &g), &c)| (1.0 - g) * hv + g * c)
            .collect();
        let next = Tensor::from_parts(vec![next.len()], next);
        self.push(
            Op::GatedCell {
                input,
                hidden,
                w_gate,
                b_gate,
                w_cand,
                b_cand,
                gate,
                cand,
            },
            next,
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (parent, contribution) in self.local_grads(&node.op, &node.value, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
            grads[id] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Vector-Jacobian products of one node with respect to its parents.
    fn local_grads(&self, op: &Op, out: &Tensor, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let mut res = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                if self.wants(*input) {
                    let dx = ops::conv2d_grad_input(g, val(*kernel), val(*input).shape(), *stride, *padding)?;
                    res.push((*input, dx));
                }
                if self.wants(*kernel) {
                    let dk = ops::conv2d_grad_kernel(g, val(*input), val(*kernel).shape(), *stride, *padding)?;
                    res.push((*kernel, dk));
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        res.push((*b, ops::channel_sums(g)));
                    }
                }
            }
            Op::Relu(x) => {
                let d = g.zip_with(val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                res.push((*x, d));
            }
            Op::Tanh(x) => res.push((*x, g.zip_with(out, |gv, y| gv * (1.0 - y * y))?)),
            Op::Sigmoid(x) => res.push((*x, g.zip_with(out, |gv, y| gv * y * (1.0 - y))?)),
            Op::GlobalAveragePool(x) => {
                let s = val(*x).shape();
                let inv = 1.0 / (s[0] * s[1]) as f64;
                let c = s[2];
                let mut d = Tensor::zeros(s);
                for row in d.data_mut().chunks_mut(c) {
                    for (v, gv) in row.iter_mut().zip(g.data()) {
                        *v = gv * inv;
                    }
                }
                res.push((*x, d));
            }
            Op::Dense {
                weight,
                input,
                bias,
            } => {
                let w = val(*weight);
                let x = val(*input);
                let cols = w.shape()[1];
                if self.wants(*weight) {
                    let mut dw = Vec::with_capacity(w.len());
                    for &gr in g.data() {
                        dw.extend(x.data().iter().map(|xv| gr * xv));
                    }
                    res.push((*weight, Tensor::from_parts(w.shape().to_vec(), dw)));
                }
                if self.wants(*input) {
                    let mut dx = vec![0.0; cols];
                    for (row, &gr) in w.data().chunks(cols).zip(g.data()) {
                        for (d, wv) in dx.iter_mut().zip(row) {
                            *d += gr * wv;
                        }
                    }
                    res.push((*input, Tensor::from_parts(x.shape().to_vec(), dx)));
                }
                if self.wants(*bias) {
                    res.push((*bias, g.reshape(val(*bias).shape().to_vec())?));
                }
            }
            Op::Flatten(x) => res.push((*x, g.reshape(val(*x).shape().to_vec())?)),
            Op::Softmax(x) => {
                let gy = g.dot(out)?;
                res.push((*x, g.zip_with(out, |gv, y| y * (gv - gy))?));
            }
            Op::L2Normalize(x) => {
                let n = val(*x).norm_l2();
                let gy = g.dot(out)?;
                res.push((*x, g.zip_with(out, |gv, y| (gv - y * gy) / n)?));
            }
            Op::SpatialMultiply { features, filter } => {
                let a = val(*features);
                let f = val(*filter);
                let c = a.shape()[2];
                if self.wants(*features) {
                    let mut da = g.clone();
                    for (row, &fv) in da.data_mut().chunks_mut(c).zip(f.data()) {
                        for v in row {
                            *v *= fv;
                        }
                    }
                    res.push((*features, da));
                }
                if self.wants(*filter) {
                    let df: Vec<f64> = g
                        .data()
                        .chunks(c)
                        .zip(a.data().chunks(c))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                        .collect();
                    res.push((*filter, Tensor::from_parts(f.shape().to_vec(), df)));
                }
            }
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.scale(-1.0)));
            }
            Op::Mul(a, b) => {
                res.push((*a, g.zip_with(val(*b), |x, y| x * y)?));
                res.push((*b, g.zip_with(val(*a), |x, y| x * y)?));
            }
            Op::Scale(a, s) => res.push((*a, g.scale(*s))),
            Op::AddScalar(a) => res.push((*a, g.clone())),
            Op::Sum(a) => res.push((*a, Tensor::full(val(*a).shape(), g.item()))),
            Op::Dot(a, b) => {
                let s = g.item();
                res.push((*a, val(*b).scale(s)));
                res.push((*b, val(*a).scale(s)));
            }
            Op::SquaredDistance(a, b) => {
                let s = 2.0 * g.item();
                let d = val(*a).zip_with(val(*b), |x, y| (x - y) * s)?;
                res.push((*b, d.scale(-1.0)));
                res.push((*a, d));
            }
            Op::Distance(a, b) => {
                let dist = out.item();
                let s = if dist > 0.0 { g.item() / dist } else { 0.0 };
                let d = val(*a).zip_with(val(*b), |x, y| (x - y) * s)?;
                res.push((*b, d.scale(-1.0)));
                res.push((*a, d));
            }
            Op::Select(a, i) => {
                let mut d = Tensor::zeros(val(*a).shape());
                d.data_mut()[*i] = g.item();
                res.push((*a, d));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let shape = val(*p).shape().to_vec();
                    let n = val(*p).len();
                    res.push((*p, Tensor::from_parts(shape, g.data()[off..off + n].to_vec())));
                    off += n;
                }
            }
            Op::CrossEntropy { logits, target } => {
                let mut p = ops::softmax(val(*logits));
                p.data_mut()[*target] -= 1.0;
                res.push((*logits, p.scale(g.item())));
            }
            Op::GaussianGrid(mu) => {
                let m = val(*mu).data();
                let cols = out.shape()[1];
                let (mut dr, mut dc) = (0.0, 0.0);
                for (idx, (&y, &gv)) in out.data().iter().zip(g.data()).enumerate() {
                    let (i, j) = ((idx / cols) as f64, (idx % cols) as f64);
                    dr += gv * y * (i - m[0]);
                    dc += gv * y * (j - m[1]);
                }
                res.push((*mu, Tensor::from_parts(val(*mu).shape().to_vec(), vec![dr, dc])));
            }
            Op::GatedCell {
                input,
                hidden,
                w_gate,
                b_gate,
                w_cand,
                b_cand,
                gate,
                cand,
            } => {
                let x = val(*input);
                let h = val(*hidden);
                let nx = x.len();
                let nz = nx + h.len();
                let mut z = x.data().to_vec();
                z.extend_from_slice(h.data());

                let mut d_gate_pre = Vec::with_capacity(h.len());
                let mut d_cand_pre = Vec::with_capacity(h.len());
                let mut d_h_direct = Vec::with_capacity(h.len());
                for i in 0..h.len() {
                    let (gv, cv, hv, dn) = (gate.data()[i], cand.data()[i], h.data()[i], g.data()[i]);
                    d_gate_pre.push(dn * (cv - hv) * gv * (1.0 - gv));
                    d_cand_pre.push(dn * gv * (1.0 - cv * cv));
                    d_h_direct.push(dn * (1.0 - gv));
                }

                let outer = |d: &[f64]| -> Tensor {
                    let mut w = Vec::with_capacity(d.len() * nz);
                    for &dv in d {
                        w.extend(z.iter().map(|zv| dv * zv));
                    }
                    Tensor::from_parts(vec![d.len(), nz], w)
                };
                if self.wants(*w_gate) {
                    res.push((*w_gate, outer(&d_gate_pre)));
                }
                if self.wants(*b_gate) {
                    res.push((*b_gate, Tensor::from_parts(vec![d_gate_pre.len()], d_gate_pre.clone())));
                }
                if self.wants(*w_cand) {
                    res.push((*w_cand, outer(&d_cand_pre)));
                }
                if self.wants(*b_cand) {
                    res.push((*b_cand, Tensor::from_parts(vec![d_cand_pre.len()], d_cand_pre.clone())));
                }
                if self.wants(*input) || self.wants(*hidden) {
                    let mut dz = vec![0.0; nz];
                    for (w, d) in [(val(*w_gate), &d_gate_pre), (val(*w_cand), &d_cand_pre)] {
                        for (row, &dv) in w.data().chunks(nz).zip(d.iter()) {
                            for (acc, wv) in dz.iter_mut().zip(row) {
                                *acc += dv * wv;
                            }
                        }
                    }
                    let dx = Tensor::from_parts(x.shape().to_vec(), dz[..nx].to_vec());
                    let dh: Vec<f64> = dz[nx..].iter().zip(&d_h_direct).map(|(a, b)| a + b).collect();
                    res.push((*input, dx));
                    res.push((*hidden, Tensor::from_parts(h.shape().to_vec(), dh)));
                }
            }
        }
        Ok(res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central finite differences of `f` around `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Tensor, n: &Tensor) {
        for (x, y) in a.data().iter().zip(n.data()) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-2);
            assert!(rel < 1e-6, "autodiff {x} vs numeric {y}");
        }
    }

    #[test]
    fn sum_gives_ones() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::full(&[2, 3], 0.3));
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.wrt(x).bitwise_eq(&Tensor::ones(&[2, 3])));
    }

    #[test]
    fn squared_norm_gives_twice_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random(&[5], &mut rng);
        let mut t = Tape::new();
        let x = t.variable(v.clone());
        let z = t.constant(Tensor::zeros(&[5]));
        let l = t.squared_distance(x, z).unwrap();
        let g = t.backward(l).unwrap();
        for (gv, xv) in g.wrt(x).data().iter().zip(v.data()) {
            assert!((gv - 2.0 * xv).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::ones(&[3]));
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unrelated_leaf_gets_exact_zero() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::ones(&[3]));
        let f = t.variable(Tensor::ones(&[2]));
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.wrt(f).data().iter().all(|&v| v.to_bits() == 0.0f64.to_bits()));
    }

    #[test]
    fn shared_node_accumulates() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::vector(vec![1.5, -2.0]).unwrap());
        let y = t.add(x, x).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 2.0]);
    }

    #[test]
    fn conv_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x0 = random(&[5, 5, 2], &mut rng);
        let k0 = random(&[3, 3, 2, 3], &mut rng);
        let b0 = random(&[3], &mut rng);
        let w0 = random(&[2, 3], &mut rng);
        let wb = random(&[2], &mut rng);

        let build = |x: &Tensor, k: &Tensor, b: &Tensor| -> (Tape, [NodeId; 3], NodeId) {
            let mut t = Tape::new();
            let xi = t.variable(x.clone());
            let ki = t.variable(k.clone());
            let bi = t.variable(b.clone());
            let c = t.conv2d(xi, ki, Some(bi), 2, 1).unwrap();
            let r = t.tanh(c).unwrap();
            let p = t.global_average_pool(r).unwrap();
            let w = t.constant(w0.clone());
            let bb = t.constant(wb.clone());
            let d = t.dense(w, p, bb).unwrap();
            let l = t.cross_entropy(d, 1).unwrap();
            (t, [xi, ki, bi], l)
        };
        let (t, ids, l) = build(&x0, &k0, &b0);
        let g = t.backward(l).unwrap();
        let eval = |x: &Tensor, k: &Tensor, b: &Tensor| {
            let (t, _, l) = build(x, k, b);
            t.value(l).item()
        };
        assert_close(&g.wrt(ids[0]), &numeric_grad(&x0, &|x| eval(x, &k0, &b0)));
        assert_close(&g.wrt(ids[1]), &numeric_grad(&k0, &|k| eval(&x0, k, &b0)));
        assert_close(&g.wrt(ids[2]), &numeric_grad(&b0, &|b| eval(&x0, &k0, b)));
    }

    #[test]
    fn gated_cell_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params: Vec<Tensor> = [vec![3], vec![2], vec![2, 5], vec![2], vec![2, 5], vec![2]]
            .iter()
            .map(|s| random(s, &mut rng))
            .collect();
        let eval_with = |which: usize, v: &Tensor| -> (f64, Tensor) {
            let mut t = Tape::new();
            let ids: Vec<NodeId> = params
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    if i == which {
                        t.variable(v.clone())
                    } else {
                        t.constant(p.clone())
                    }
                })
                .collect();
            let h1 = t.gated_cell(ids[0], ids[1], ids[2], ids[3], ids[4], ids[5]).unwrap();
            let h2 = t.gated_cell(ids[0], h1, ids[2], ids[3], ids[4], ids[5]).unwrap();
            let s = t.sum(h2).unwrap();
            let sq = t.mul(s, s).unwrap();
            let g = t.backward(sq).unwrap();
            (t.value(sq).item(), g.wrt(ids[which]))
        };
        for (which, p) in params.iter().enumerate() {
            let (_, auto) = eval_with(which, p);
            let numeric = numeric_grad(p, &|v| eval_with(which, v).0);
            assert_close(&auto, &numeric);
        }
    }
}
