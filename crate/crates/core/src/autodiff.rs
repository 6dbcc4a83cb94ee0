//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Tape`] records one forward pass as an append-only list of nodes, so
//! every node's inputs precede it and replaying the list in reverse visits
//! consumers before producers. [`Tape::backward`] consumes the tape (which is
//! how "the tape is cleared after each backward pass" is enforced) and
//! deposits gradients into the [`Param`] leaves that require them.
//!
//! Trainable state lives in `Param`s — shared handles to [`Tensor`]s — which
//! survive across steps; each training step snapshots them onto a fresh tape.

use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use crate::error::{invalid_arg, shape_err, Result};
use crate::tensor::{
    self, conv2d_backward, conv2d_forward, linear_forward, maxpool2d_backward, maxpool2d_forward,
    relu_backward, relu_forward, softmax_last_axis, Tensor,
};

/// Shared handle to a (possibly trainable) tensor.
#[derive(Clone)]
pub struct Param {
    inner: Arc<RwLock<Tensor>>,
}

impl Param {
    pub fn new(t: Tensor) -> Self {
        Param { inner: Arc::new(RwLock::new(t)) }
    }

    pub fn trainable(t: Tensor) -> Self {
        Param::new(t.with_requires_grad(true))
    }

    pub fn frozen(t: Tensor) -> Self {
        Param::new(t.with_requires_grad(false))
    }

    pub fn read(&self) -> RwLockReadGuard<'_, Tensor> {
        self.inner.read().expect("param lock poisoned")
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, Tensor> {
        self.inner.write().expect("param lock poisoned")
    }

    /// Same underlying storage, not merely equal values.
    pub fn ptr_eq(a: &Param, b: &Param) -> bool {
        Arc::ptr_eq(&a.inner, &b.inner)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.read().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.read().numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.read().requires_grad
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.write().requires_grad = flag;
    }

    pub fn snapshot(&self) -> Tensor {
        self.read().clone()
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let t = self.read();
        write!(f, "Param(shape={:?}, requires_grad={})", t.shape, t.requires_grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf { param: Option<Param> },
    Conv2d { input: NodeId, weight: NodeId, bias: NodeId, stride: usize, padding: usize },
    Relu { input: NodeId },
    MaxPool2d { input: NodeId, argmax: Vec<usize> },
    Linear { input: NodeId, weight: NodeId, bias: Option<NodeId> },
    Softmax { input: NodeId, row_len: usize },
    Reshape { input: NodeId },
    Permute { input: NodeId, axes: Vec<usize> },
    Concat { a: NodeId, b: NodeId, axis: usize },
    SliceLastDim { input: NodeId, start: usize, end: usize },
    GatherRows { input: NodeId, rows: Vec<usize> },
    Add { a: NodeId, b: NodeId },
    Scale { input: NodeId, factor: f64 },
    Sum { input: NodeId },
    SmoothL1Sum { pred: NodeId, target: Vec<f64> },
    CrossEntropySum { logits: NodeId, labels: Vec<usize> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> NodeId {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced on tape (node {})",
            self.nodes.len()
        );
        self.nodes.push(Node { shape, data, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.node(id).data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.node(id).shape.clone(), self.node(id).data.clone()).expect("node shape")
    }

    pub fn value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.node(id).data.len(), 1, "value() expects a scalar node");
        self.node(id).data[0]
    }

    // -- leaves --------------------------------------------------------

    /// Snapshot a parameter onto the tape. Gradients flow back into the
    /// parameter on `backward` when it requires grad.
    pub fn param(&mut self, p: &Param) -> NodeId {
        let t = p.read();
        let needs = t.requires_grad;
        let (shape, data) = (t.shape.clone(), t.data.clone());
        drop(t);
        self.push(shape, data, Op::Leaf { param: Some(p.clone()) }, needs)
    }

    /// A fixed input (image, target); never differentiated.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t.shape, t.data, Op::Leaf { param: None }, false)
    }

    // -- operations ----------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let out = {
            let (x, w, b) = (self.node(input), self.node(weight), self.node(bias));
            conv2d_forward(
                &Tensor::new(x.shape.clone(), x.data.clone())?,
                &Tensor::new(w.shape.clone(), w.data.clone())?,
                &Tensor::new(b.shape.clone(), b.data.clone())?,
                stride,
                padding,
            )?
        };
        let needs = self.node(input).needs_grad
            || self.node(weight).needs_grad
            || self.node(bias).needs_grad;
        Ok(self.push(out.shape, out.data, Op::Conv2d { input, weight, bias, stride, padding }, needs))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let data = relu_forward(&self.node(input).data);
        let shape = self.node(input).shape.clone();
        let needs = self.node(input).needs_grad;
        self.push(shape, data, Op::Relu { input }, needs)
    }

    pub fn maxpool2d(&mut self, input: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let x = self.node(input);
        let (out, argmax) =
            maxpool2d_forward(&Tensor::new(x.shape.clone(), x.data.clone())?, kernel, stride)?;
        let needs = self.node(input).needs_grad;
        Ok(self.push(out.shape, out.data, Op::MaxPool2d { input, argmax }, needs))
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let out = {
            let (x, w) = (self.node(input), self.node(weight));
            let bt = bias
                .map(|b| Tensor::new(self.node(b).shape.clone(), self.node(b).data.clone()))
                .transpose()?;
            linear_forward(
                &Tensor::new(x.shape.clone(), x.data.clone())?,
                &Tensor::new(w.shape.clone(), w.data.clone())?,
                bt.as_ref(),
            )?
        };
        let mut needs = self.node(input).needs_grad || self.node(weight).needs_grad;
        if let Some(b) = bias {
            needs |= self.node(b).needs_grad;
        }
        Ok(self.push(out.shape, out.data, Op::Linear { input, weight, bias }, needs))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.node(input).shape.clone();
        let row_len = *shape.last().ok_or_else(|| shape_err!("softmax on 0-d tensor"))?;
        if row_len == 0 {
            return Err(shape_err!("softmax over empty axis"));
        }
        let data = softmax_last_axis(&self.node(input).data, row_len);
        let needs = self.node(input).needs_grad;
        Ok(self.push(shape, data, Op::Softmax { input, row_len }, needs))
    }

    pub fn reshape(&mut self, input: NodeId, new_shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = new_shape.iter().product();
        if numel != self.node(input).data.len() {
            return Err(shape_err!(
                "cannot reshape {:?} ({} elements) to {:?} ({numel} elements)",
                self.node(input).shape,
                self.node(input).data.len(),
                new_shape
            ));
        }
        let data = self.node(input).data.clone();
        let needs = self.node(input).needs_grad;
        Ok(self.push(new_shape, data, Op::Reshape { input }, needs))
    }

    /// Flatten [N, ...] to [N, rest].
    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.node(input).shape.clone();
        if shape.is_empty() {
            return Err(shape_err!("flatten on 0-d tensor"));
        }
        let rest: usize = shape[1..].iter().product();
        self.reshape(input, vec![shape[0], rest])
    }

    pub fn permute(&mut self, input: NodeId, axes: &[usize]) -> Result<NodeId> {
        let shape = self.node(input).shape.clone();
        if axes.len() != shape.len() {
            return Err(shape_err!("permute axes {:?} do not match rank of {:?}", axes, shape));
        }
        let mut seen = vec![false; axes.len()];
        for &a in axes {
            if a >= axes.len() || seen[a] {
                return Err(shape_err!("permute axes {:?} are not a permutation", axes));
            }
            seen[a] = true;
        }
        let (out_shape, out_data) = permute_data(&self.node(input).data, &shape, axes);
        let needs = self.node(input).needs_grad;
        Ok(self.push(out_shape, out_data, Op::Permute { input, axes: axes.to_vec() }, needs))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        let (sa, sb) = (self.node(a).shape.clone(), self.node(b).shape.clone());
        if sa.len() != sb.len() || axis >= sa.len() {
            return Err(shape_err!("concat rank mismatch: {:?} vs {:?} on axis {axis}", sa, sb));
        }
        for (i, (da, db)) in sa.iter().zip(&sb).enumerate() {
            if i != axis && da != db {
                return Err(shape_err!(
                    "concat shapes {:?} and {:?} differ outside axis {axis}",
                    sa,
                    sb
                ));
            }
        }
        let outer: usize = sa[..axis].iter().product();
        let a_block: usize = sa[axis..].iter().product();
        let b_block: usize = sb[axis..].iter().product();
        let mut data = Vec::with_capacity(self.node(a).data.len() + self.node(b).data.len());
        for o in 0..outer {
            data.extend_from_slice(&self.node(a).data[o * a_block..(o + 1) * a_block]);
            data.extend_from_slice(&self.node(b).data[o * b_block..(o + 1) * b_block]);
        }
        let mut out_shape = sa.clone();
        out_shape[axis] = sa[axis] + sb[axis];
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(out_shape, data, Op::Concat { a, b, axis }, needs))
    }

    pub fn slice_last_dim(&mut self, input: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let shape = self.node(input).shape.clone();
        let d = *shape.last().ok_or_else(|| shape_err!("slice on 0-d tensor"))?;
        if start >= end || end > d {
            return Err(shape_err!("slice [{start}..{end}] out of range for last dim {d}"));
        }
        let rows = self.node(input).data.len() / d;
        let width = end - start;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&self.node(input).data[r * d + start..r * d + end]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = width;
        let needs = self.node(input).needs_grad;
        Ok(self.push(out_shape, data, Op::SliceLastDim { input, start, end }, needs))
    }

    /// Select rows of a 2-d tensor.
    pub fn gather_rows(&mut self, input: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let shape = self.node(input).shape.clone();
        if shape.len() != 2 {
            return Err(shape_err!("gather_rows expects a 2-d tensor, got {:?}", shape));
        }
        let (r, d) = (shape[0], shape[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(invalid_arg!("gather_rows index {bad} out of range for {r} rows"));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &i in &rows {
            data.extend_from_slice(&self.node(input).data[i * d..(i + 1) * d]);
        }
        let needs = self.node(input).needs_grad;
        Ok(self.push(vec![rows.len(), d], data, Op::GatherRows { input, rows }, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.node(a).shape != self.node(b).shape {
            return Err(shape_err!(
                "add shape mismatch: {:?} vs {:?}",
                self.node(a).shape,
                self.node(b).shape
            ));
        }
        let data: Vec<f64> =
            self.node(a).data.iter().zip(&self.node(b).data).map(|(x, y)| x + y).collect();
        let shape = self.node(a).shape.clone();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(shape, data, Op::Add { a, b }, needs))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let data: Vec<f64> = self.node(input).data.iter().map(|v| v * factor).collect();
        let shape = self.node(input).shape.clone();
        let needs = self.node(input).needs_grad;
        self.push(shape, data, Op::Scale { input, factor }, needs)
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s: f64 = self.node(input).data.iter().sum();
        let needs = self.node(input).needs_grad;
        self.push(vec![1], vec![s], Op::Sum { input }, needs)
    }

    /// Σ smooth-L1(pred − target), the SSD localization term.
    pub fn smooth_l1_sum(&mut self, pred: NodeId, target: &[f64]) -> Result<NodeId> {
        if self.node(pred).data.len() != target.len() {
            return Err(shape_err!(
                "smooth_l1 target length {} does not match prediction {}",
                target.len(),
                self.node(pred).data.len()
            ));
        }
        let mut acc = 0.0;
        for (&p, &t) in self.node(pred).data.iter().zip(target) {
            let x = p - t;
            acc += if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 };
        }
        let needs = self.node(pred).needs_grad;
        Ok(self.push(vec![1], vec![acc], Op::SmoothL1Sum { pred, target: target.to_vec() }, needs))
    }

    /// Σ cross-entropy(logit row, label), on [M, K] logits.
    pub fn cross_entropy_sum(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let shape = self.node(logits).shape.clone();
        if shape.len() != 2 {
            return Err(shape_err!("cross_entropy expects [M,K] logits, got {:?}", shape));
        }
        let (m, k) = (shape[0], shape[1]);
        if labels.len() != m {
            return Err(shape_err!("{} labels for {m} logit rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid_arg!("label {bad} out of range for {k} classes"));
        }
        let mut acc = 0.0;
        for (row, &label) in self.node(logits).data.chunks(k).zip(labels) {
            acc += tensor::log_sum_exp(row) - row[label];
        }
        let needs = self.node(logits).needs_grad;
        Ok(self.push(
            vec![1],
            vec![acc],
            Op::CrossEntropySum { logits, labels: labels.to_vec() },
            needs,
        ))
    }

    // -- backward ------------------------------------------------------

    /// Reverse sweep from a scalar loss. Consumes the tape; gradients of
    /// every reachable `Param` requiring grad are accumulated exactly once.
    pub fn backward(self, loss: NodeId) -> Result<()> {
        let n = self.nodes.len();
        if loss.0 >= n {
            return Err(invalid_arg!("loss node out of range"));
        }
        if self.node(loss).data.len() != 1 {
            return Err(invalid_arg!(
                "backward requires a scalar loss, got shape {:?}",
                self.node(loss).shape
            ));
        }
        if !self.node(loss).needs_grad {
            log::warn!("backward on a detached scalar: no parameters to update");
            return Ok(());
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(p) = param {
                        let mut t = p.write();
                        if t.requires_grad {
                            t.accumulate_grad(&g);
                        }
                    }
                }
                Op::Conv2d { input, weight, bias, stride, padding } => {
                    let x = self.node(*input);
                    let w = self.node(*weight);
                    let xt = Tensor::new(x.shape.clone(), x.data.clone())?;
                    let wt = Tensor::new(w.shape.clone(), w.data.clone())?;
                    let need_dx = x.needs_grad;
                    let gr = conv2d_backward(&xt, &wt, &g, *stride, *padding, need_dx)?;
                    if let Some(dx) = gr.d_input {
                        accumulate(&mut grads, *input, dx);
                    }
                    if w.needs_grad {
                        accumulate(&mut grads, *weight, gr.d_weight);
                    }
                    if self.node(*bias).needs_grad {
                        accumulate(&mut grads, *bias, gr.d_bias);
                    }
                }
                Op::Relu { input } => {
                    let x = self.node(*input);
                    if x.needs_grad {
                        accumulate(&mut grads, *input, relu_backward(&x.data, &g));
                    }
                }
                Op::MaxPool2d { input, argmax } => {
                    let x = self.node(*input);
                    if x.needs_grad {
                        accumulate(&mut grads, *input, maxpool2d_backward(argmax, &g, x.data.len()));
                    }
                }
                Op::Linear { input, weight, bias } => {
                    let x = self.node(*input);
                    let w = self.node(*weight);
                    let (b_rows, d_in) = (x.shape[0], x.shape[1]);
                    let d_out = w.shape[1];
                    if w.needs_grad {
                        // dW[d_in, d_out] = xᵀ · g
                        let mut dw = vec![0.0; d_in * d_out];
                        tensor::gemm_tn(&mut dw, &x.data, &g, d_in, b_rows, d_out);
                        accumulate(&mut grads, *weight, dw);
                    }
                    if let Some(bid) = bias {
                        if self.node(*bid).needs_grad {
                            let mut db = vec![0.0; d_out];
                            for row in g.chunks(d_out) {
                                for (a, v) in db.iter_mut().zip(row) {
                                    *a += v;
                                }
                            }
                            accumulate(&mut grads, *bid, db);
                        }
                    }
                    if x.needs_grad {
                        // dX[b, d_in] = g · Wᵀ
                        let mut dx = vec![0.0; b_rows * d_in];
                        tensor::gemm_nt(&mut dx, &g, &w.data, b_rows, d_out, d_in);
                        accumulate(&mut grads, *input, dx);
                    }
                }
                Op::Softmax { input, row_len } => {
                    if self.node(*input).needs_grad {
                        let s = &node.data;
                        let mut dx = vec![0.0; s.len()];
                        for r in 0..s.len() / row_len {
                            let lo = r * row_len;
                            let hi = lo + row_len;
                            let dot: f64 =
                                g[lo..hi].iter().zip(&s[lo..hi]).map(|(a, b)| a * b).sum();
                            for j in lo..hi {
                                dx[j] = s[j] * (g[j] - dot);
                            }
                        }
                        accumulate(&mut grads, *input, dx);
                    }
                }
                Op::Reshape { input } => {
                    if self.node(*input).needs_grad {
                        accumulate(&mut grads, *input, g);
                    }
                }
                Op::Permute { input, axes } => {
                    if self.node(*input).needs_grad {
                        let mut inverse = vec![0usize; axes.len()];
                        for (i, &a) in axes.iter().enumerate() {
                            inverse[a] = i;
                        }
                        let (_, dx) = permute_data(&g, &node.shape, &inverse);
                        accumulate(&mut grads, *input, dx);
                    }
                }
                Op::Concat { a, b, axis } => {
                    let (sa, sb) = (&self.node(*a).shape, &self.node(*b).shape);
                    let outer: usize = sa[..*axis].iter().product();
                    let a_block: usize = sa[*axis..].iter().product();
                    let b_block: usize = sb[*axis..].iter().product();
                    if self.node(*a).needs_grad {
                        let mut da = Vec::with_capacity(outer * a_block);
                        for o in 0..outer {
                            let lo = o * (a_block + b_block);
                            da.extend_from_slice(&g[lo..lo + a_block]);
                        }
                        accumulate(&mut grads, *a, da);
                    }
                    if self.node(*b).needs_grad {
                        let mut db = Vec::with_capacity(outer * b_block);
                        for o in 0..outer {
                            let lo = o * (a_block + b_block) + a_block;
                            db.extend_from_slice(&g[lo..lo + b_block]);
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::SliceLastDim { input, start, end } => {
                    let x = self.node(*input);
                    if x.needs_grad {
                        let d = *x.shape.last().unwrap();
                        let width = end - start;
                        let mut dx = vec![0.0; x.data.len()];
                        for (r, row) in g.chunks(width).enumerate() {
                            dx[r * d + start..r * d + end].copy_from_slice(row);
                        }
                        accumulate(&mut grads, *input, dx);
                    }
                }
                Op::GatherRows { input, rows } => {
                    let x = self.node(*input);
                    if x.needs_grad {
                        let d = x.shape[1];
                        let mut dx = vec![0.0; x.data.len()];
                        for (out_r, &in_r) in rows.iter().enumerate() {
                            for j in 0..d {
                                dx[in_r * d + j] += g[out_r * d + j];
                            }
                        }
                        accumulate(&mut grads, *input, dx);
                    }
                }
                Op::Add { a, b } => {
                    if self.node(*a).needs_grad {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.node(*b).needs_grad {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Scale { input, factor } => {
                    if self.node(*input).needs_grad {
                        accumulate(&mut grads, *input, g.iter().map(|v| v * factor).collect());
                    }
                }
                Op::Sum { input } => {
                    if self.node(*input).needs_grad {
                        accumulate(&mut grads, *input, vec![g[0]; self.node(*input).data.len()]);
                    }
                }
                Op::SmoothL1Sum { pred, target } => {
                    let x = self.node(*pred);
                    if x.needs_grad {
                        let dx: Vec<f64> = x
                            .data
                            .iter()
                            .zip(target)
                            .map(|(&p, &t)| g[0] * (p - t).clamp(-1.0, 1.0))
                            .collect();
                        accumulate(&mut grads, *pred, dx);
                    }
                }
                Op::CrossEntropySum { logits, labels } => {
                    let x = self.node(*logits);
                    if x.needs_grad {
                        let k = x.shape[1];
                        let mut dx = vec![0.0; x.data.len()];
                        for (r, (row, &label)) in x.data.chunks(k).zip(labels).enumerate() {
                            let sm = softmax_last_axis(row, k);
                            for j in 0..k {
                                let onehot = if j == label { 1.0 } else { 0.0 };
                                dx[r * k + j] = g[0] * (sm[j] - onehot);
                            }
                        }
                        accumulate(&mut grads, *logits, dx);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, contribution: Vec<f64>) {
    match &mut grads[id.0] {
        Some(buf) => {
            for (a, b) in buf.iter_mut().zip(&contribution) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![0.0; data.len()];
    let mut coord = vec![0usize; rank];
    let mut in_idx = 0usize;
    for slot in out.iter_mut() {
        *slot = data[in_idx];
        // odometer increment over the output coordinates
        for d in (0..rank).rev() {
            coord[d] += 1;
            in_idx += step[d];
            if coord[d] < out_shape[d] {
                break;
            }
            in_idx -= step[d] * out_shape[d];
            coord[d] = 0;
        }
    }
    (out_shape, out)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// SGD with classical momentum: v ← μ·v + g, p ← p − lr·v.
/// Gradients are cleared after each step. The params slice must keep a
/// stable order across steps — velocity is tracked positionally.
pub struct SgdMomentum {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if lr <= 0.0 || !lr.is_finite() {
            return Err(invalid_arg!("learning rate must be positive, got {lr}"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(invalid_arg!("momentum must be in [0,1), got {momentum}"));
        }
        Ok(SgdMomentum { lr, momentum, velocity: Vec::new() })
    }

    pub fn step(&mut self, params: &[Param]) {
        if self.velocity.len() != params.len() {
            assert!(self.velocity.is_empty(), "param list changed between steps");
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for (p, v) in params.iter().zip(&mut self.velocity) {
            let mut t = p.write();
            if !t.requires_grad {
                t.grad = None;
                continue;
            }
            match t.grad.take() {
                Some(g) => {
                    for i in 0..g.len() {
                        v[i] = self.momentum * v[i] + g[i];
                        t.data[i] -= self.lr * v[i];
                    }
                }
                None => {
                    for (i, vi) in v.iter_mut().enumerate() {
                        *vi *= self.momentum;
                        t.data[i] -= self.lr * *vi;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    fn rand_vec(rng: &mut DetRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.range(-1.0, 1.0)).collect()
    }

    /// Central finite differences of `loss_fn` at `data`.
    fn finite_diff(
        data: &[f64],
        step: f64,
        loss_fn: &dyn Fn(&[f64]) -> f64,
    ) -> Vec<f64> {
        let mut grads = vec![0.0; data.len()];
        let mut work = data.to_vec();
        for i in 0..data.len() {
            work[i] = data[i] + step;
            let up = loss_fn(&work);
            work[i] = data[i] - step;
            let down = loss_fn(&work);
            work[i] = data[i];
            grads[i] = (up - down) / (2.0 * step);
        }
        grads
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], rel_tol: f64) {
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1.0);
            assert!(
                (a - n).abs() / denom < rel_tol,
                "grad[{i}] mismatch: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn linear_loss_grad_is_input() {
        // loss = sum(w · x) with x fixed → dloss/dw = x
        let x = vec![2.0, -3.0, 0.5];
        let w = Param::trainable(Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap());
        let mut tape = Tape::new();
        let wid = tape.param(&w);
        let wx = tape.reshape(wid, vec![1, 3]).unwrap();
        let xt = {
            let t = Tensor::new(vec![3, 1], x.clone()).unwrap();
            tape.constant(t)
        };
        let prod = tape.linear(wx, xt, None).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        assert_eq!(w.read().grad.as_deref().unwrap(), &x[..]);
    }

    #[test]
    fn relu_grad_gates_negative() {
        let w = Param::trainable(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let mut tape = Tape::new();
        let wid = tape.param(&w);
        let r = tape.relu(wid);
        let loss = tape.sum(r);
        tape.backward(loss).unwrap();
        assert_eq!(w.read().grad.as_deref().unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_on_detached_scalar_is_noop() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(3.0));
        let s = tape.sum(c);
        assert!(tape.backward(s).is_ok());
    }

    #[test]
    fn full_net_matches_finite_differences() {
        // conv → relu → pool → linear → softmax cross-entropy, all params checked
        let mut rng = DetRng::seed(21);
        let img = rand_vec(&mut rng, 2 * 6 * 6);
        let conv_w0 = rand_vec(&mut rng, 3 * 2 * 9);
        let conv_b0 = rand_vec(&mut rng, 3);
        let lin_w0 = rand_vec(&mut rng, 3 * 9 * 4);
        let lin_b0 = rand_vec(&mut rng, 4);
        let label = 2usize;

        let run = |cw: &[f64], cb: &[f64], lw: &[f64], lb: &[f64], tape_out: bool| -> (f64, Vec<Param>) {
            let conv_w = Param::trainable(Tensor::new(vec![3, 2, 3, 3], cw.to_vec()).unwrap());
            let conv_b = Param::trainable(Tensor::new(vec![3], cb.to_vec()).unwrap());
            let lin_w = Param::trainable(Tensor::new(vec![27, 4], lw.to_vec()).unwrap());
            let lin_b = Param::trainable(Tensor::new(vec![4], lb.to_vec()).unwrap());
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![1, 2, 6, 6], img.clone()).unwrap());
            let w = tape.param(&conv_w);
            let b = tape.param(&conv_b);
            let c = tape.conv2d(x, w, b, 1, 1).unwrap();
            let r = tape.relu(c);
            let p = tape.maxpool2d(r, 2, 2).unwrap();
            let f = tape.flatten(p).unwrap();
            let lwid = tape.param(&lin_w);
            let lbid = tape.param(&lin_b);
            let logits = tape.linear(f, lwid, Some(lbid)).unwrap();
            let loss = tape.cross_entropy_sum(logits, &[label]).unwrap();
            let lv = tape.value(loss);
            if tape_out {
                tape.backward(loss).unwrap();
            }
            (lv, vec![conv_w, conv_b, lin_w, lin_b])
        };

        let (_, params) = run(&conv_w0, &conv_b0, &lin_w0, &lin_b0, true);
        let all: Vec<(usize, Vec<f64>)> = params
            .iter()
            .map(|p| (p.numel(), p.read().grad.clone().unwrap()))
            .collect();

        let originals = [&conv_w0, &conv_b0, &lin_w0, &lin_b0];
        for (pi, (_, analytic)) in all.iter().enumerate() {
            let numeric = finite_diff(originals[pi], 1e-5, &|perturbed| {
                let mut args: Vec<&[f64]> =
                    originals.iter().map(|v| v.as_slice()).collect();
                args[pi] = perturbed;
                run(args[0], args[1], args[2], args[3], false).0
            });
            assert_close(analytic, &numeric, 1e-4);
        }
    }

    #[test]
    fn gather_concat_permute_slice_grads() {
        let mut rng = DetRng::seed(33);
        let data0 = rand_vec(&mut rng, 2 * 3 * 2 * 2);
        let run = |d: &[f64], do_backward: bool| -> (f64, Param) {
            let p = Param::trainable(Tensor::new(vec![2, 3, 2, 2], d.to_vec()).unwrap());
            let mut tape = Tape::new();
            let x = tape.param(&p);
            let perm = tape.permute(x, &[0, 2, 3, 1]).unwrap();
            let resh = tape.reshape(perm, vec![8, 3]).unwrap();
            let gathered = tape.gather_rows(resh, vec![1, 3, 3, 6]).unwrap();
            let sliced = tape.slice_last_dim(gathered, 1, 3).unwrap();
            let both = tape.concat(sliced, sliced, 1).unwrap();
            let sm = tape.softmax(both).unwrap();
            let loss = tape.sum(sm);
            let v = tape.value(loss);
            if do_backward {
                tape.backward(loss).unwrap();
            }
            (v, p)
        };
        let (_, p) = run(&data0, true);
        let analytic = p.read().grad.clone().unwrap();
        let numeric = finite_diff(&data0, 1e-6, &|d| run(d, false).0);
        assert_close(&analytic, &numeric, 1e-4);
    }

    #[test]
    fn sgd_plain_step() {
        let p = Param::trainable(Tensor::new(vec![1], vec![1.0]).unwrap());
        p.write().grad = Some(vec![2.0]);
        let mut opt = SgdMomentum::new(0.1, 0.0).unwrap();
        opt.step(std::slice::from_ref(&p));
        assert!((p.read().data[0] - 0.8).abs() < 1e-15);
        assert!(p.read().grad.is_none());
    }

    #[test]
    fn sgd_momentum_accumulates() {
        // v = g + 0.9 v, constant g = 1, lr = 0.1: p goes 1 → 0.9 → 0.71
        let p = Param::trainable(Tensor::new(vec![1], vec![1.0]).unwrap());
        let mut opt = SgdMomentum::new(0.1, 0.9).unwrap();
        p.write().grad = Some(vec![1.0]);
        opt.step(std::slice::from_ref(&p));
        assert!((p.read().data[0] - 0.9).abs() < 1e-15);
        p.write().grad = Some(vec![1.0]);
        opt.step(std::slice::from_ref(&p));
        assert!((p.read().data[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_grad_leaves_param() {
        let p = Param::trainable(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        p.write().grad = Some(vec![0.0, 0.0]);
        let mut opt = SgdMomentum::new(0.1, 0.9).unwrap();
        opt.step(std::slice::from_ref(&p));
        assert_eq!(p.read().data, vec![1.0, -1.0]);
    }

    #[test]
    fn sgd_rejects_bad_lr() {
        assert!(SgdMomentum::new(0.0, 0.9).is_err());
        assert!(SgdMomentum::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn frozen_param_receives_no_grad() {
        let frozen = Param::frozen(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let live = Param::trainable(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let mut tape = Tape::new();
        let f = tape.param(&frozen);
        let l = tape.param(&live);
        let s = tape.add(f, l).unwrap();
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        assert!(frozen.read().grad.is_none());
        assert_eq!(live.read().grad.as_deref().unwrap(), &[1.0, 1.0]);
    }
}
