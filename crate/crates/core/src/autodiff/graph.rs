//! Eager tape of tensor operations with a single reverse sweep.
//!
//! Every operation computes its value immediately and records enough
//! state to propagate gradients later. Node ids are assigned in
//! creation order, which is a topological order, so the backward pass
//! simply walks the tape from the loss node down to zero.

use std::collections::HashMap;

use super::params::{GradMap, ParamId, ParamStore};
use super::tensor::{axis_split, Tensor};
use crate::error::{Error, Result};

/// Lower/upper clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;
/// Variance floor inside `layer_norm`.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine { x: NodeId, scale: f64 },
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Abs(NodeId),
    Softmax { x: NodeId, axis: usize },
    LayerNorm { x: NodeId, axis: usize, inv_std: Vec<f64> },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize },
    Reshape(NodeId),
    Conv1d { x: NodeId, w: NodeId, b: NodeId, dilation: usize },
    LstmCell { x: NodeId, h: NodeId, c: NodeId, w: NodeId, b: NodeId, gates: Vec<f64> },
    GatherCols { table: NodeId, ids: Vec<usize> },
    Sum(NodeId),
    MaskedMean { x: NodeId, mask: Vec<f64> },
    Mse { pred: NodeId, target: Vec<f64>, mask: Vec<f64> },
    Bce { prob: NodeId, target: Vec<f64>, mask: Vec<f64> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, mask: Vec<f64>, probs: Vec<f64> },
    GradReverse { x: NodeId, scale: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Abs(_) => "abs",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Conv1d { .. } => "conv1d",
            Op::LstmCell { .. } => "lstm_cell",
            Op::GatherCols { .. } => "gather",
            Op::Sum(_) => "sum",
            Op::MaskedMean { .. } => "masked_mean",
            Op::Mse { .. } => "mse",
            Op::Bce { .. } => "bce",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::GradReverse { .. } => "gradient_reverse",
        }
    }
}

struct Node {
    op: Op,
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
}

/// A recorded computation over tensors, some of which are trainable.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.store.get(*p),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                node: id,
                op: op.name(),
                phase: "forward",
            });
        }
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Ok(NodeId(id))
    }

    pub fn constant(&mut self, t: Tensor) -> Result<NodeId> {
        self.push(Op::Constant, t)
    }

    /// Leaf for a trainable tensor. Repeated calls return the same node.
    pub fn param(&mut self, p: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&p) {
            return n;
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Param(p),
            value: None,
        });
        self.param_nodes.insert(p, id);
        id
    }

    /// `[m,k] x [k,n] -> [m,n]` or `[m,k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || !(bv.ndim() == 1 || bv.ndim() == 2) || av.shape()[1] != bv.shape()[0]
        {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let n = if bv.ndim() == 2 { bv.shape()[1] } else { 1 };
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (av.data(), bv.data());
        if n == 1 {
            for (o, arow) in out.iter_mut().zip(ad.chunks_exact(k)) {
                *o = dot(arow, bd);
            }
        } else {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for (p, &aip) in ad[i * k..(i + 1) * k].iter().enumerate() {
                    if aip != 0.0 {
                        axpy(aip, &bd[p * n..(p + 1) * n], orow);
                    }
                }
            }
        }
        let shape = if bv.ndim() == 2 { vec![m, n] } else { vec![m] };
        self.push(Op::MatMul(a, b), Tensor::from_parts(shape, out))
    }

    fn broadcast_check(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || (!sa.is_empty() && sb == &sa[..sa.len() - 1] && !sb.is_empty()) {
            Ok(())
        } else {
            Err(Error::shape(op, format!("{sa:?} vs {sb:?}")))
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.broadcast_check(op, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let inner = av.numel() / bv.numel();
        let data = av
            .data()
            .chunks_exact(inner)
            .zip(bv.data())
            .flat_map(|(chunk, &y)| chunk.iter().map(move |&x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    /// Element-wise sum. `b` may drop the trailing axis of `a`, in which
    /// case it is broadcast along that axis.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        self.push(Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        self.push(Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(Op::Mul(a, b), t)
    }

    /// `scale * x + shift`, element-wise.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let t = self.map(x, |v| scale * v + shift);
        self.push(Op::Affine { x, scale }, t)
    }

    fn map(&self, x: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.map(x, f64::tanh);
        self.push(Op::Tanh(x), t)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.map(x, sigmoid);
        self.push(Op::Sigmoid(x), t)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.map(x, |v| v.max(0.0));
        self.push(Op::Relu(x), t)
    }

    /// Absolute value. The derivative at zero is taken as +1.
    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.map(x, f64::abs);
        self.push(Op::Abs(x), t)
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = self.value(x);
        if axis >= v.ndim() {
            return Err(Error::shape("softmax", format!("axis {axis} of {:?}", v.shape())));
        }
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (src[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[idx(k)] /= z;
                }
            }
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(Op::Softmax { x, axis }, t)
    }

    /// Zero mean, unit variance along `axis`, with no learned gain or bias.
    pub fn layer_norm(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = self.value(x);
        if axis >= v.ndim() {
            return Err(Error::shape("layer_norm", format!("axis {axis} of {:?}", v.shape())));
        }
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let mean = (0..n).map(|k| src[idx(k)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|k| (src[idx(k)] - mean).powi(2)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for k in 0..n {
                    out[idx(k)] = (src[idx(k)] - mean) * r;
                }
                inv_std.push(r);
            }
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(Op::LayerNorm { x, axis, inv_std }, t)
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self
            .value(*inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &id in inputs {
            let s = self.shape(id);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &id in inputs {
                let v = self.value(id);
                let block = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let t = Tensor::from_parts(shape, out);
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            t,
        )
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x);
        if axis >= v.ndim() || len == 0 || start + len > v.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, v.shape()),
            ));
        }
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::from_parts(shape, out);
        self.push(Op::Slice { x, axis, start }, t)
    }

    /// Split along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: NodeId, axis: usize, sizes: &[usize]) -> Result<Vec<NodeId>> {
        let total: usize = sizes.iter().sum();
        let extent = self.shape(x).get(axis).copied().unwrap_or(0);
        if total != extent {
            return Err(Error::shape(
                "split",
                format!("sizes {sizes:?} do not cover extent {extent}"),
            ));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &s in sizes {
            parts.push(self.slice(x, axis, start, s)?);
            start += s;
        }
        Ok(parts)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push(Op::Reshape(x), t)
    }

    /// Same-padded 1-D convolution over the trailing (time) axis.
    ///
    /// `x: [c_in, L]`, `w: [c_out, c_in, k]` with odd `k`, `b: [c_out]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, dilation: usize) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let bad = xv.ndim() != 2
            || wv.ndim() != 3
            || wv.shape()[1] != xv.shape()[0]
            || wv.shape()[2] % 2 == 0
            || bv.shape() != [wv.shape()[0]]
            || dilation == 0;
        if bad {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "x {:?}, w {:?}, b {:?}, dilation {dilation}",
                    xv.shape(),
                    wv.shape(),
                    bv.shape()
                ),
            ));
        }
        let (c_in, len) = (xv.shape()[0], xv.shape()[1]);
        let (c_out, k) = (wv.shape()[0], wv.shape()[2]);
        let mut out = vec![0.0; c_out * len];
        let (xd, wd) = (xv.data(), wv.data());
        for o in 0..c_out {
            let orow = &mut out[o * len..(o + 1) * len];
            orow.iter_mut().for_each(|v| *v = bv.data()[o]);
            for i in 0..c_in {
                let xrow = &xd[i * len..(i + 1) * len];
                for tap in 0..k {
                    let wv = wd[(o * c_in + i) * k + tap];
                    if let Some((dst, src)) = conv_windows(tap, k, dilation, len) {
                        axpy(wv, &xrow[src], &mut orow[dst]);
                    }
                }
            }
        }
        let t = Tensor::from_parts(vec![c_out, len], out);
        self.push(Op::Conv1d { x, w, b, dilation }, t)
    }

    /// One LSTM step with gate order (input, forget, cell, output).
    ///
    /// `w: [4H, n_x + H]` acts on `[x; h]`, `b: [4H]`. Returns `(h', c')`.
    pub fn lstm_cell(
        &mut self,
        x: NodeId,
        h: NodeId,
        c: NodeId,
        w: NodeId,
        b: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let (xv, hv, cv, wv, bv) = (
            self.value(x),
            self.value(h),
            self.value(c),
            self.value(w),
            self.value(b),
        );
        let hid = hv.numel();
        let nx = xv.numel();
        let bad = xv.ndim() != 1
            || hv.ndim() != 1
            || cv.shape() != hv.shape()
            || wv.shape() != [4 * hid, nx + hid]
            || bv.shape() != [4 * hid];
        if bad {
            return Err(Error::shape(
                "lstm_cell",
                format!(
                    "x {:?}, h {:?}, c {:?}, w {:?}, b {:?}",
                    xv.shape(),
                    hv.shape(),
                    cv.shape(),
                    wv.shape(),
                    bv.shape()
                ),
            ));
        }
        let cols = nx + hid;
        let mut gates = vec![0.0; 4 * hid];
        for (r, g) in gates.iter_mut().enumerate() {
            let row = &wv.data()[r * cols..(r + 1) * cols];
            *g = bv.data()[r] + dot(&row[..nx], xv.data()) + dot(&row[nx..], hv.data());
        }
        for r in 0..4 * hid {
            gates[r] = if (2 * hid..3 * hid).contains(&r) {
                gates[r].tanh()
            } else {
                sigmoid(gates[r])
            };
        }
        let mut out = vec![0.0; 2 * hid];
        for j in 0..hid {
            let (ig, fg, gg, og) = (gates[j], gates[hid + j], gates[2 * hid + j], gates[3 * hid + j]);
            let c_new = fg * cv.data()[j] + ig * gg;
            out[hid + j] = c_new;
            out[j] = og * c_new.tanh();
        }
        let t = Tensor::from_parts(vec![2 * hid], out);
        let cell = self.push(
            Op::LstmCell {
                x,
                h,
                c,
                w,
                b,
                gates,
            },
            t,
        )?;
        let h_new = self.slice(cell, 0, 0, hid)?;
        let c_new = self.slice(cell, 0, hid, hid)?;
        Ok((h_new, c_new))
    }

    /// Columns `ids` of `table: [d, V]`, giving `[d, ids.len()]`.
    pub fn gather_cols(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        if tv.ndim() != 2 || ids.is_empty() {
            return Err(Error::shape("gather", format!("table {:?}", tv.shape())));
        }
        let (d, vocab) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::OutOfRange(format!("embedding id {bad} >= {vocab}")));
        }
        let n = ids.len();
        let mut out = vec![0.0; d * n];
        for r in 0..d {
            for (j, &id) in ids.iter().enumerate() {
                out[r * n + j] = tv.data()[r * vocab + id];
            }
        }
        let t = Tensor::from_parts(vec![d, n], out);
        self.push(
            Op::GatherCols {
                table,
                ids: ids.to_vec(),
            },
            t,
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// Mean over entries with mask 1; zero when the mask is empty.
    pub fn masked_mean(&mut self, x: NodeId, mask: &[f64]) -> Result<NodeId> {
        let v = self.value(x);
        check_mask("masked_mean", v.numel(), mask)?;
        let denom: f64 = mask.iter().sum();
        let s = if denom > 0.0 {
            v.data().iter().zip(mask).map(|(a, m)| a * m).sum::<f64>() / denom
        } else {
            0.0
        };
        self.push(
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
            },
            Tensor::scalar(s),
        )
    }

    /// Masked mean squared error against a constant target.
    pub fn mse(&mut self, pred: NodeId, target: &Tensor, mask: &[f64]) -> Result<NodeId> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape("mse", format!("{:?} vs {:?}", p.shape(), target.shape())));
        }
        check_mask("mse", p.numel(), mask)?;
        let denom: f64 = mask.iter().sum();
        let s = if denom > 0.0 {
            p.data()
                .iter()
                .zip(target.data())
                .zip(mask)
                .map(|((a, t), m)| m * (a - t) * (a - t))
                .sum::<f64>()
                / denom
        } else {
            0.0
        };
        self.push(
            Op::Mse {
                pred,
                target: target.data().to_vec(),
                mask: mask.to_vec(),
            },
            Tensor::scalar(s),
        )
    }

    /// Masked binary cross entropy on probabilities, clamped to
    /// `[PROB_CLAMP, 1 - PROB_CLAMP]` before the logarithm.
    pub fn bce(&mut self, prob: NodeId, target: &Tensor, mask: &[f64]) -> Result<NodeId> {
        let p = self.value(prob);
        if p.shape() != target.shape() {
            return Err(Error::shape("bce", format!("{:?} vs {:?}", p.shape(), target.shape())));
        }
        check_mask("bce", p.numel(), mask)?;
        let denom: f64 = mask.iter().sum();
        let s = if denom > 0.0 {
            p.data()
                .iter()
                .zip(target.data())
                .zip(mask)
                .map(|((&a, &t), &m)| {
                    let a = a.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                    -m * (t * a.ln() + (1.0 - t) * (1.0 - a).ln())
                })
                .sum::<f64>()
                / denom
        } else {
            0.0
        };
        self.push(
            Op::Bce {
                prob,
                target: target.data().to_vec(),
                mask: mask.to_vec(),
            },
            Tensor::scalar(s),
        )
    }

    /// Masked mean cross entropy of `logits: [C, L]` against one class per column.
    pub fn cross_entropy_logits(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[f64],
    ) -> Result<NodeId> {
        let v = self.value(logits);
        if v.ndim() != 2 || v.shape()[1] != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?}, {} targets", v.shape(), targets.len()),
            ));
        }
        check_mask("cross_entropy", targets.len(), mask)?;
        let (classes, cols) = (v.shape()[0], v.shape()[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::OutOfRange(format!("class {bad} >= {classes}")));
        }
        let mut probs = vec![0.0; classes * cols];
        let mut total = 0.0;
        for j in 0..cols {
            let max = (0..classes).map(|c| v.at(c, j)).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..classes).map(|c| (v.at(c, j) - max).exp()).sum();
            for c in 0..classes {
                probs[c * cols + j] = (v.at(c, j) - max).exp() / z;
            }
            total += mask[j] * (max + z.ln() - v.at(targets[j], j));
        }
        let denom: f64 = mask.iter().sum();
        let s = if denom > 0.0 { total / denom } else { 0.0 };
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            Tensor::scalar(s),
        )
    }

    /// Identity in the forward pass; multiplies the gradient by `-scale`.
    pub fn gradient_reverse(&mut self, x: NodeId, scale: f64) -> Result<NodeId> {
        if !(scale >= 0.0) {
            return Err(Error::Config(format!("gradient reversal scale {scale} < 0")));
        }
        let t = self.value(x).clone();
        self.push(Op::GradReverse { x, scale }, t)
    }

    /// Reverse sweep from a scalar `loss`, returning the gradient for
    /// every tensor in the store (zero for tensors the loss never touched).
    pub fn backward(&self, loss: NodeId) -> Result<GradMap> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = GradMap::zeros(self.store);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    node: i,
                    op: node.op.name(),
                    phase: "backward",
                });
            }
            self.backward_node(i, &g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: NodeId) -> &'g mut Vec<f64> {
        let n = self.value(id).numel();
        grads[id.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn backward_node(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut GradMap,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let y = self.value(NodeId(i));
        match &node.op {
            Op::Constant => {}
            Op::Param(p) => {
                for (d, s) in out.get_mut(*p).data_mut().iter_mut().zip(g) {
                    *d += s;
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = if bv.ndim() == 2 { bv.shape()[1] } else { 1 };
                {
                    let ga = self.slot(grads, *a);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let garow = &mut ga[i * k..(i + 1) * k];
                        if n == 1 {
                            axpy(grow[0], bv.data(), garow);
                        } else {
                            for (p, gap) in garow.iter_mut().enumerate() {
                                *gap += dot(grow, &bv.data()[p * n..(p + 1) * n]);
                            }
                        }
                    }
                }
                let gb = self.slot(grads, *b);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for (p, &aip) in av.data()[i * k..(i + 1) * k].iter().enumerate() {
                        if aip != 0.0 {
                            axpy(aip, grow, &mut gb[p * n..(p + 1) * n]);
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                add_into(self.slot(grads, *a), g, 1.0);
                let nb = self.value(*b).numel();
                let inner = g.len() / nb;
                let gb = self.slot(grads, *b);
                for (dst, chunk) in gb.iter_mut().zip(g.chunks_exact(inner)) {
                    *dst += sign * chunk.iter().sum::<f64>();
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let inner = av.numel() / bv.numel();
                {
                    let ga = self.slot(grads, *a);
                    for ((dst, gc), &bval) in ga
                        .chunks_exact_mut(inner)
                        .zip(g.chunks_exact(inner))
                        .zip(bv.data())
                    {
                        axpy(bval, gc, dst);
                    }
                }
                let gb = self.slot(grads, *b);
                for ((dst, gc), ac) in gb
                    .iter_mut()
                    .zip(g.chunks_exact(inner))
                    .zip(av.data().chunks_exact(inner))
                {
                    *dst += dot(gc, ac);
                }
            }
            Op::Affine { x, scale } => add_into(self.slot(grads, *x), g, *scale),
            Op::GradReverse { x, scale } => add_into(self.slot(grads, *x), g, -*scale),
            Op::Reshape(x) => add_into(self.slot(grads, *x), g, 1.0),
            Op::Tanh(x) => {
                let gx = self.slot(grads, *x);
                for ((d, &gi), &yi) in gx.iter_mut().zip(g).zip(y.data()) {
                    *d += gi * (1.0 - yi * yi);
                }
            }
            Op::Sigmoid(x) => {
                let gx = self.slot(grads, *x);
                for ((d, &gi), &yi) in gx.iter_mut().zip(g).zip(y.data()) {
                    *d += gi * yi * (1.0 - yi);
                }
            }
            Op::Relu(x) => {
                let gx = self.slot(grads, *x);
                for ((d, &gi), &yi) in gx.iter_mut().zip(g).zip(y.data()) {
                    if yi > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::Abs(x) => {
                let xv = self.value(*x);
                let gx = self.slot(grads, *x);
                for ((d, &gi), &xi) in gx.iter_mut().zip(g).zip(xv.data()) {
                    *d += if xi >= 0.0 { gi } else { -gi };
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(y.shape(), *axis);
                let yd = y.data();
                let gx = self.slot(grads, *x);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let s: f64 = (0..n).map(|k| g[idx(k)] * yd[idx(k)]).sum();
                        for k in 0..n {
                            gx[idx(k)] += yd[idx(k)] * (g[idx(k)] - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, axis, inv_std } => {
                let (outer, n, inner) = axis_split(y.shape(), *axis);
                let yd = y.data();
                let gx = self.slot(grads, *x);
                let nf = n as f64;
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let r = inv_std[o * inner + i];
                        let gm = (0..n).map(|k| g[idx(k)]).sum::<f64>() / nf;
                        let gy = (0..n).map(|k| g[idx(k)] * yd[idx(k)]).sum::<f64>() / nf;
                        for k in 0..n {
                            gx[idx(k)] += r * (g[idx(k)] - gm - yd[idx(k)] * gy);
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(y.shape(), *axis);
                let mut offset = 0;
                for &id in inputs {
                    let ext = self.value(id).shape()[*axis];
                    let gi = self.slot(grads, id);
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + ext) * inner];
                        add_into(&mut gi[o * ext * inner..(o + 1) * ext * inner], src, 1.0);
                    }
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.value(*x).shape().to_vec();
                let (outer, n, inner) = axis_split(&xs, *axis);
                let len = y.shape()[*axis];
                let gx = self.slot(grads, *x);
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    add_into(
                        &mut gx[base..base + len * inner],
                        &g[o * len * inner..(o + 1) * len * inner],
                        1.0,
                    );
                }
            }
            Op::Conv1d { x, w, b, dilation } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (c_in, len) = (xv.shape()[0], xv.shape()[1]);
                let (c_out, k) = (wv.shape()[0], wv.shape()[2]);
                {
                    let gb = self.slot(grads, *b);
                    for (o, d) in gb.iter_mut().enumerate() {
                        *d += g[o * len..(o + 1) * len].iter().sum::<f64>();
                    }
                }
                {
                    let gw = self.slot(grads, *w);
                    for o in 0..c_out {
                        let grow = &g[o * len..(o + 1) * len];
                        for i in 0..c_in {
                            let xrow = &xv.data()[i * len..(i + 1) * len];
                            for tap in 0..k {
                                if let Some((dst, src)) = conv_windows(tap, k, *dilation, len) {
                                    gw[(o * c_in + i) * k + tap] += dot(&grow[dst], &xrow[src]);
                                }
                            }
                        }
                    }
                }
                let gx = self.slot(grads, *x);
                for o in 0..c_out {
                    let grow = &g[o * len..(o + 1) * len];
                    for i in 0..c_in {
                        let gxrow = &mut gx[i * len..(i + 1) * len];
                        for tap in 0..k {
                            let wv = wv.data()[(o * c_in + i) * k + tap];
                            if let Some((dst, src)) = conv_windows(tap, k, *dilation, len) {
                                axpy(wv, &grow[dst], &mut gxrow[src]);
                            }
                        }
                    }
                }
            }
            Op::LstmCell {
                x,
                h,
                c,
                w,
                b,
                gates,
            } => {
                let (xv, hv, cv, wv) = (
                    self.value(*x),
                    self.value(*h),
                    self.value(*c),
                    self.value(*w),
                );
                let hid = hv.numel();
                let nx = xv.numel();
                let cols = nx + hid;
                let (gh, gc) = g.split_at(hid);
                let c_new = &y.data()[hid..];
                let mut dz = vec![0.0; 4 * hid];
                let mut dc_prev = vec![0.0; hid];
                for j in 0..hid {
                    let (ig, fg, gg, og) =
                        (gates[j], gates[hid + j], gates[2 * hid + j], gates[3 * hid + j]);
                    let tc = c_new[j].tanh();
                    let d_o = gh[j] * tc;
                    let dct = gc[j] + gh[j] * og * (1.0 - tc * tc);
                    let d_i = dct * gg;
                    let d_g = dct * ig;
                    let d_f = dct * cv.data()[j];
                    dc_prev[j] = dct * fg;
                    dz[j] = d_i * ig * (1.0 - ig);
                    dz[hid + j] = d_f * fg * (1.0 - fg);
                    dz[2 * hid + j] = d_g * (1.0 - gg * gg);
                    dz[3 * hid + j] = d_o * og * (1.0 - og);
                }
                add_into(self.slot(grads, *c), &dc_prev, 1.0);
                add_into(self.slot(grads, *b), &dz, 1.0);
                {
                    let gw = self.slot(grads, *w);
                    for (r, &dzr) in dz.iter().enumerate() {
                        if dzr != 0.0 {
                            let row = &mut gw[r * cols..(r + 1) * cols];
                            axpy(dzr, xv.data(), &mut row[..nx]);
                            axpy(dzr, hv.data(), &mut row[nx..]);
                        }
                    }
                }
                let mut dxh = vec![0.0; cols];
                for (r, &dzr) in dz.iter().enumerate() {
                    if dzr != 0.0 {
                        axpy(dzr, &wv.data()[r * cols..(r + 1) * cols], &mut dxh);
                    }
                }
                add_into(self.slot(grads, *x), &dxh[..nx], 1.0);
                add_into(self.slot(grads, *h), &dxh[nx..], 1.0);
            }
            Op::GatherCols { table, ids } => {
                let vocab = self.value(*table).shape()[1];
                let n = ids.len();
                let gt = self.slot(grads, *table);
                for (r, grow) in g.chunks_exact(n).enumerate() {
                    for (j, &id) in ids.iter().enumerate() {
                        gt[r * vocab + id] += grow[j];
                    }
                }
            }
            Op::Sum(x) => {
                let s = g[0];
                self.slot(grads, *x).iter_mut().for_each(|d| *d += s);
            }
            Op::MaskedMean { x, mask } => {
                let denom: f64 = mask.iter().sum();
                if denom > 0.0 {
                    let s = g[0] / denom;
                    add_into(self.slot(grads, *x), mask, s);
                }
            }
            Op::Mse { pred, target, mask } => {
                let denom: f64 = mask.iter().sum();
                if denom > 0.0 {
                    let pv = self.value(*pred);
                    let s = 2.0 * g[0] / denom;
                    let gp = self.slot(grads, *pred);
                    for (((d, &p), &t), &m) in gp.iter_mut().zip(pv.data()).zip(target).zip(mask) {
                        *d += s * m * (p - t);
                    }
                }
            }
            Op::Bce { prob, target, mask } => {
                let denom: f64 = mask.iter().sum();
                if denom > 0.0 {
                    let pv = self.value(*prob);
                    let s = g[0] / denom;
                    let gp = self.slot(grads, *prob);
                    for (((d, &p), &t), &m) in gp.iter_mut().zip(pv.data()).zip(target).zip(mask) {
                        if p > PROB_CLAMP && p < 1.0 - PROB_CLAMP {
                            *d += s * m * (p - t) / (p * (1.0 - p));
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                let denom: f64 = mask.iter().sum();
                if denom > 0.0 {
                    let cols = targets.len();
                    let s = g[0] / denom;
                    let gl = self.slot(grads, *logits);
                    for (idx, (d, &p)) in gl.iter_mut().zip(probs).enumerate() {
                        let (c, j) = (idx / cols, idx % cols);
                        let onehot = if targets[j] == c { 1.0 } else { 0.0 };
                        *d += s * mask[j] * (p - onehot);
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_mask(op: &'static str, n: usize, mask: &[f64]) -> Result<()> {
    if mask.len() != n {
        return Err(Error::shape(op, format!("mask of {} for {n} values", mask.len())));
    }
    if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::shape(op, "mask entries must be 0 or 1"));
    }
    Ok(())
}

/// Output and input index ranges touched by one convolution tap.
fn conv_windows(
    tap: usize,
    k: usize,
    dilation: usize,
    len: usize,
) -> Option<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    let offset = (tap as isize - (k / 2) as isize) * dilation as isize;
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset.max(0)).min(len as isize);
    if hi <= lo as isize {
        return None;
    }
    let hi = hi as usize;
    let src_lo = (lo as isize + offset) as usize;
    Some((lo..hi, src_lo..src_lo + (hi - lo)))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}
