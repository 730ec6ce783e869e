//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in evaluation order together with its
//! forward value. [`Graph::gradients`] walks the tape backwards once.
//! [`Graph::replay`] re-evaluates the recorded tape with new leaf or parameter
//! values while holding every gradient-blocked value fixed, which gives the
//! function whose derivative `gradients` computes; it is the finite-difference
//! probe used throughout the test suite.
//!
//! Conventions: `relu'(0) = 0`; `clip` passes gradient only strictly inside
//! `(lo, hi)`.

use super::conv::{self, ConvGeometry, Padding};
use super::{same_shape, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d { x: NodeId, k: NodeId, geom: ConvGeometry },
    ConvTranspose2d { x: NodeId, k: NodeId, geom: ConvGeometry },
    BiasAdd { x: NodeId, b: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    Scale(NodeId, f64),
    Clip { x: NodeId, lo: f64, hi: f64 },
    Concat { a: NodeId, b: NodeId },
    Mse(NodeId, NodeId),
    Sum(NodeId),
    // The detached operands are never differentiated; they are kept so the
    // tape reads as the expression it records.
    #[allow(dead_code)]
    StopGradient(NodeId),
    #[allow(dead_code)]
    StraightThrough { a: NodeId, q: NodeId },
    Gather { table: NodeId, indices: Vec<usize>, shape: Vec<usize> },
    Reshape { x: NodeId, shape: Vec<usize> },
    MatMul(NodeId, NodeId),
    GlobalAvgPool(NodeId),
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Build one per forward pass.
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    trainable_params: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Parameters entering this graph receive gradients.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            trainable_params: true,
        }
    }

    /// Parameters enter as constants. Inputs created with [`Graph::variable`]
    /// still receive gradients, which is what attacks need.
    pub fn frozen() -> Self {
        Graph {
            nodes: Vec::new(),
            trainable_params: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<NodeId> {
        let value = eval(&op, |id| &self.nodes[id.0].value)?;
        let requires_grad = inputs(&op).iter().any(|&i| self.nodes[i.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Input that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let trainable = self.trainable_params;
        self.push(store.value(id).clone(), Op::Param(id), trainable)
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, stride: usize, padding: Padding) -> Result<NodeId> {
        let geom = ConvGeometry::new(self.value(x).shape(), self.value(k).shape(), stride, padding)?;
        self.record(Op::Conv2d { x, k, geom })
    }

    /// Kernel layout `[Kh, Kw, Cout, Cin]`; output spatial size is input × stride.
    pub fn conv_transpose2d(&mut self, x: NodeId, k: NodeId, stride: usize) -> Result<NodeId> {
        let geom = ConvGeometry::for_transpose(self.value(x).shape(), self.value(k).shape(), stride)?;
        self.record(Op::ConvTranspose2d { x, k, geom })
    }

    /// Adds a per-channel bias `[C]` to a channel-last tensor.
    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, bs) = (self.value(x).shape(), self.value(b).shape());
        if bs.len() != 1 || xs.last() != Some(&bs[0]) {
            return Err(Error::shape("bias_add", format!("input {xs:?}, bias {bs:?}")));
        }
        self.record(Op::BiasAdd { x, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_binary("add", a, b)?;
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_binary("sub", a, b)?;
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_binary("mul", a, b)?;
        self.record(Op::Mul(a, b))
    }

    fn check_binary(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() || tb.is_scalar() {
            Ok(())
        } else {
            Err(Error::shape(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())))
        }
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Relu(x))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.record(Op::Scale(x, c))
    }

    pub fn clip(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo <= hi) {
            return Err(Error::InvalidArgument(format!("clip bounds {lo} > {hi}")));
        }
        self.record(Op::Clip { x, lo, hi })
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat_channels", format!("{sa:?} vs {sb:?}")));
        }
        self.record(Op::Concat { a, b })
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("mse", self.value(a), self.value(b))?;
        if self.value(a).is_empty() {
            return Err(Error::shape("mse", "empty operands"));
        }
        self.record(Op::Mse(a, b))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Sum(x))
    }

    /// Forward identity that blocks every gradient flowing into `x`.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient(x), false)
    }

    /// `a + stop_gradient(q - a)`, fused so the forward value is `q` bit-exactly
    /// while the gradient passes to `a` unchanged and never reaches `q`.
    pub fn straight_through(&mut self, a: NodeId, q: NodeId) -> Result<NodeId> {
        same_shape("straight_through", self.value(a), self.value(q))?;
        let value = self.value(q).clone();
        let requires_grad = self.requires_grad(a);
        Ok(self.push(value, Op::StraightThrough { a, q }, requires_grad))
    }

    /// Looks up rows of a `[K, G]` table; the result is reshaped to `shape`,
    /// whose element count must be `indices.len() * G`.
    pub fn gather_rows(&mut self, table: NodeId, indices: Vec<usize>, shape: Vec<usize>) -> Result<NodeId> {
        let ts = self.value(table).shape();
        let [k, g] = ts[..] else {
            return Err(Error::shape("gather_rows", format!("table must be [K,G], got {ts:?}")));
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::shape("gather_rows", format!("index {bad} out of range for {k} rows")));
        }
        if shape.iter().product::<usize>() != indices.len() * g {
            return Err(Error::shape(
                "gather_rows",
                format!("{} rows of width {g} cannot fill {shape:?}", indices.len()),
            ));
        }
        self.record(Op::Gather { table, indices, shape })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshape(shape)?;
        let requires_grad = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape { x, shape: shape.to_vec() }, requires_grad))
    }

    /// `[N, D] x [D, K] -> [N, K]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        self.record(Op::MatMul(a, b))
    }

    /// `[N, H, W, C] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.value(x).dims4("global_avg_pool")?;
        self.record(Op::GlobalAvgPool(x))
    }

    /// Batch-mean softmax cross-entropy of `[N, K]` logits against labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.value(logits).shape();
        let [n, k] = s[..] else {
            return Err(Error::shape("softmax_cross_entropy", format!("logits must be [N,K], got {s:?}")));
        };
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{n} logit rows but {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label: bad, num_classes: k });
        }
        self.record(Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
        })
    }

    /// Gradients of a scalar node with respect to every node that requires one.
    pub fn gradients(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Computes gradients and accumulates them into every reachable parameter.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Param(pid), Some(g)) = (&node.op, grads.get(NodeId(i))) {
                store.accumulate(*pid, g);
            }
        }
        Ok(grads)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let mut send = |id: NodeId, contrib: Vec<f64>| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contrib) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) | Op::StopGradient(_) => {}
            Op::Conv2d { x, k, geom } => {
                if wants(*x) {
                    send(*x, conv::backward_input(geom, g, val(*k)));
                }
                if wants(*k) {
                    send(*k, conv::backward_kernel(geom, val(*x), g));
                }
            }
            Op::ConvTranspose2d { x, k, geom } => {
                if wants(*x) {
                    send(*x, conv::forward(geom, g, val(*k)));
                }
                if wants(*k) {
                    send(*k, conv::backward_kernel(geom, g, val(*x)));
                }
            }
            Op::BiasAdd { x, b } => {
                if wants(*b) {
                    let c = val(*b).len();
                    let mut db = vec![0.0; c];
                    for row in g.chunks_exact(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    send(*b, db);
                }
                send(*x, g.to_vec());
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, reduce_for(val(*b).len(), g));
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                send(*b, reduce_for(val(*b).len(), &neg));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let da = if bv.len() == 1 {
                        g.iter().map(|v| v * bv[0]).collect()
                    } else {
                        g.iter().zip(bv).map(|(v, w)| v * w).collect()
                    };
                    send(*a, da);
                }
                if wants(*b) {
                    let db: Vec<f64> = g.iter().zip(av).map(|(v, w)| v * w).collect();
                    send(*b, reduce_for(bv.len(), &db));
                }
            }
            Op::Relu(x) => {
                let d = g
                    .iter()
                    .zip(val(*x))
                    .map(|(v, &xv)| if xv > 0.0 { *v } else { 0.0 })
                    .collect();
                send(*x, d);
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|v| v * c).collect()),
            Op::Clip { x, lo, hi } => {
                let d = g
                    .iter()
                    .zip(val(*x))
                    .map(|(v, &xv)| if xv > *lo && xv < *hi { *v } else { 0.0 })
                    .collect();
                send(*x, d);
            }
            Op::Concat { a, b } => {
                let ca = *self.nodes[a.0].value.shape().last().unwrap();
                let cb = *self.nodes[b.0].value.shape().last().unwrap();
                let c = ca + cb;
                let rows = g.len().checked_div(c).unwrap_or(0);
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    da.extend_from_slice(&g[r * c..r * c + ca]);
                    db.extend_from_slice(&g[r * c + ca..(r + 1) * c]);
                }
                send(*a, da);
                send(*b, db);
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let s = 2.0 * g[0] / av.len() as f64;
                let da: Vec<f64> = av.iter().zip(bv).map(|(x, y)| s * (x - y)).collect();
                if wants(*b) {
                    send(*b, da.iter().map(|v| -v).collect());
                }
                send(*a, da);
            }
            Op::Sum(x) => send(*x, vec![g[0]; val(*x).len()]),
            Op::StraightThrough { a, .. } => send(*a, g.to_vec()),
            Op::Gather { table, indices, .. } => {
                let ts = self.nodes[table.0].value.shape();
                let width = ts[1];
                let mut dt = vec![0.0; ts[0] * width];
                for (row, &idx) in indices.iter().enumerate() {
                    let dst = &mut dt[idx * width..(idx + 1) * width];
                    for (d, v) in dst.iter_mut().zip(&g[row * width..(row + 1) * width]) {
                        *d += v;
                    }
                }
                send(*table, dt);
            }
            Op::Reshape { x, .. } => send(*x, g.to_vec()),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (n, d, k) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let mut da = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..d {
                            da[i * d + j] = (0..k).map(|c| g[i * k + c] * bv[j * k + c]).sum();
                        }
                    }
                    send(*a, da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; d * k];
                    for i in 0..n {
                        for j in 0..d {
                            let x = av[i * d + j];
                            for c in 0..k {
                                db[j * k + c] += x * g[i * k + c];
                            }
                        }
                    }
                    send(*b, db);
                }
            }
            Op::GlobalAvgPool(x) => {
                let [n, h, w, c] = self.nodes[x.0].value.dims4("global_avg_pool").unwrap();
                let inv = 1.0 / (h * w) as f64;
                let mut dx = vec![0.0; n * h * w * c];
                for b in 0..n {
                    let grow = &g[b * c..(b + 1) * c];
                    for p in 0..h * w {
                        let o = (b * h * w + p) * c;
                        for (d, v) in dx[o..o + c].iter_mut().zip(grow) {
                            *d = v * inv;
                        }
                    }
                }
                send(*x, dx);
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let lv = val(*logits);
                let n = labels.len();
                let k = lv.len() / n.max(1);
                let scale = g[0] / n as f64;
                let mut d = softmax_rows(lv, k);
                for (i, &y) in labels.iter().enumerate() {
                    d[i * k + y] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                send(*logits, d);
            }
        }
    }

    /// Re-evaluates the tape up to `target` with current parameter values from
    /// `store` and the given leaf overrides. Stop-gradient outputs, the offset of
    /// every straight-through node, and every gather index are held at their
    /// recorded values.
    pub fn replay(&self, store: &ParamStore, overrides: &[(NodeId, &Tensor)], target: NodeId) -> Result<Tensor> {
        let mut values: Vec<Tensor> = Vec::with_capacity(target.0 + 1);
        for (i, node) in self.nodes.iter().enumerate().take(target.0 + 1) {
            let id = NodeId(i);
            let v = if let Some((_, t)) = overrides.iter().find(|(o, _)| *o == id) {
                (*t).clone()
            } else {
                match &node.op {
                    Op::Leaf | Op::StopGradient(_) => node.value.clone(),
                    Op::Param(pid) => store.value(*pid).clone(),
                    Op::StraightThrough { a, .. } => {
                        let recorded_a = self.nodes[a.0].value.data();
                        let mut out = node.value.clone();
                        for ((o, &new_a), &old_a) in out.data_mut().iter_mut().zip(values[a.0].data()).zip(recorded_a) {
                            *o += new_a - old_a;
                        }
                        out
                    }
                    op => eval(op, |n| &values[n.0])?,
                }
            };
            values.push(v);
        }
        Ok(values.pop().expect("target within tape"))
    }
}

fn reduce_for(len: usize, g: &[f64]) -> Vec<f64> {
    if len == g.len() {
        g.to_vec()
    } else {
        vec![g.iter().sum()]
    }
}

pub(crate) fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    out
}

fn inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf | Op::Param(_) => vec![],
        Op::Conv2d { x, k, .. } | Op::ConvTranspose2d { x, k, .. } => vec![*x, *k],
        Op::BiasAdd { x, b } => vec![*x, *b],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Mse(a, b) | Op::MatMul(a, b) => vec![*a, *b],
        Op::Concat { a, b } => vec![*a, *b],
        Op::Relu(x) | Op::Scale(x, _) | Op::Clip { x, .. } | Op::Sum(x) | Op::Reshape { x, .. } | Op::GlobalAvgPool(x) => {
            vec![*x]
        }
        Op::StopGradient(_) => vec![],
        Op::StraightThrough { a, .. } => vec![*a],
        Op::Gather { table, .. } => vec![*table],
        Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
    }
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = if b.len() == 1 && a.len() != 1 {
        let s = b.data()[0];
        a.data().iter().map(|&x| f(x, s)).collect()
    } else {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    };
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

/// Forward evaluation of every computational op.
fn eval<'a>(op: &Op, get: impl Fn(NodeId) -> &'a Tensor) -> Result<Tensor> {
    Ok(match op {
        Op::Leaf | Op::Param(_) | Op::StopGradient(_) | Op::StraightThrough { .. } => {
            unreachable!("leaf-like ops are recorded directly")
        }
        Op::Conv2d { x, k, geom } => {
            Tensor::new(geom.output_shape().to_vec(), conv::forward(geom, get(*x).data(), get(*k).data()))?
        }
        Op::ConvTranspose2d { x, k, geom } => Tensor::new(
            geom.input_shape().to_vec(),
            conv::backward_input(geom, get(*x).data(), get(*k).data()),
        )?,
        Op::BiasAdd { x, b } => {
            let (xv, bv) = (get(*x), get(*b));
            let c = bv.len();
            let mut out = xv.clone();
            for row in out.data_mut().chunks_exact_mut(c) {
                for (o, v) in row.iter_mut().zip(bv.data()) {
                    *o += v;
                }
            }
            out
        }
        Op::Add(a, b) => binary(get(*a), get(*b), |x, y| x + y),
        Op::Sub(a, b) => binary(get(*a), get(*b), |x, y| x - y),
        Op::Mul(a, b) => binary(get(*a), get(*b), |x, y| x * y),
        Op::Relu(x) => get(*x).map(|v| if v > 0.0 { v } else { 0.0 }),
        Op::Scale(x, c) => get(*x).map(|v| v * c),
        Op::Clip { x, lo, hi } => get(*x).map(|v| v.clamp(*lo, *hi)),
        Op::Concat { a, b } => {
            let (ta, tb) = (get(*a), get(*b));
            let ca = *ta.shape().last().unwrap();
            let cb = *tb.shape().last().unwrap();
            let rows = if ca + cb == 0 {
                0
            } else {
                ta.len().checked_div(ca).unwrap_or_else(|| tb.len() / cb)
            };
            let mut data = Vec::with_capacity(ta.len() + tb.len());
            for r in 0..rows {
                data.extend_from_slice(&ta.data()[r * ca..(r + 1) * ca]);
                data.extend_from_slice(&tb.data()[r * cb..(r + 1) * cb]);
            }
            let mut shape = ta.shape().to_vec();
            *shape.last_mut().unwrap() = ca + cb;
            Tensor::new(shape, data)?
        }
        Op::Mse(a, b) => {
            let (ta, tb) = (get(*a), get(*b));
            let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
            Tensor::scalar(s / ta.len() as f64)
        }
        Op::Sum(x) => Tensor::scalar(get(*x).data().iter().sum()),
        Op::Gather { table, indices, shape } => {
            let t = get(*table);
            let width = t.shape()[1];
            let mut data = Vec::with_capacity(indices.len() * width);
            for &i in indices {
                data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
            }
            Tensor::new(shape.clone(), data)?
        }
        Op::Reshape { x, shape } => get(*x).clone().reshape(shape)?,
        Op::MatMul(a, b) => {
            let (ta, tb) = (get(*a), get(*b));
            let (n, d, k) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            let mut out = vec![0.0; n * k];
            for i in 0..n {
                let orow = &mut out[i * k..(i + 1) * k];
                for j in 0..d {
                    let x = ta.data()[i * d + j];
                    for (o, w) in orow.iter_mut().zip(&tb.data()[j * k..(j + 1) * k]) {
                        *o += x * w;
                    }
                }
            }
            Tensor::new(vec![n, k], out)?
        }
        Op::GlobalAvgPool(x) => {
            let t = get(*x);
            let [n, h, w, c] = t.dims4("global_avg_pool")?;
            let mut out = vec![0.0; n * c];
            for b in 0..n {
                let orow = &mut out[b * c..(b + 1) * c];
                for p in 0..h * w {
                    let o = (b * h * w + p) * c;
                    for (acc, v) in orow.iter_mut().zip(&t.data()[o..o + c]) {
                        *acc += v;
                    }
                }
                let inv = 1.0 / (h * w) as f64;
                orow.iter_mut().for_each(|v| *v *= inv);
            }
            Tensor::new(vec![n, c], out)?
        }
        Op::SoftmaxCrossEntropy { logits, labels } => {
            let t = get(*logits);
            let k = t.shape()[1];
            let mut total = 0.0;
            for (row, &y) in t.data().chunks_exact(k).zip(labels) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[y];
            }
            Tensor::scalar(total / labels.len() as f64)
        }
    })
}

/// Per-node gradients from one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like the node; zeros when nothing flowed.
    pub fn wrt(&self, graph: &Graph, id: NodeId) -> Tensor {
        let shape = graph.value(id).shape();
        match self.get(id) {
            Some(g) => Tensor::new(shape.to_vec(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}
