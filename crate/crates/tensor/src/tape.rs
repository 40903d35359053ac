//! Computation tape, differentiable variables and the backward pass.

use std::cell::{Ref, RefCell};
use std::fmt;

use crate::gemm::{gemm, Mat};
use crate::{Result, Tensor, TensorError, LAYER_NORM_EPS, NORM_EPS};

/// Recorded operation. Inputs are node ids that precede the node holding the op.
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddBcast { a: usize, b: usize },
    MulBcast { a: usize, b: usize },
    Scale { a: usize, s: f32 },
    Gelu { a: usize },
    Abs { a: usize },
    Softmax { a: usize },
    L2Normalize { a: usize, norms: Vec<f32> },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f32>, inv_std: Vec<f32> },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Repeat { a: usize, times: usize },
    Reshape { a: usize },
    Gather { a: usize, index: Vec<usize> },
    SumAll { a: usize },
    SumAxis { a: usize, axis: usize },
    Attention { qkv: usize, heads: usize, probs: Vec<f32> },
    TopKMean { a: usize, axis: usize, k: usize, selected: Vec<usize> },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f32> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddBcast { .. } => "add_bcast",
            Op::MulBcast { .. } => "mul_bcast",
            Op::Scale { .. } => "scale",
            Op::Gelu { .. } => "gelu",
            Op::Abs { .. } => "abs",
            Op::Softmax { .. } => "softmax",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Repeat { .. } => "repeat",
            Op::Reshape { .. } => "reshape",
            Op::Gather { .. } => "gather",
            Op::SumAll { .. } => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Attention { .. } => "attention",
            Op::TopKMean { .. } => "topk_mean",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::AddBcast { a, b }
            | Op::MulBcast { a, b } => vec![*a, *b],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Scale { a, .. }
            | Op::Gelu { a }
            | Op::Abs { a }
            | Op::Softmax { a }
            | Op::L2Normalize { a, .. }
            | Op::Slice { a, .. }
            | Op::Repeat { a, .. }
            | Op::Reshape { a }
            | Op::Gather { a, .. }
            | Op::SumAll { a }
            | Op::SumAxis { a, .. }
            | Op::TopKMean { a, .. } => vec![*a],
            Op::Attention { qkv, .. } => vec![*qkv],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of the operations of one forward pass.
///
/// A tape is confined to one thread and is meant to be rebuilt for every
/// forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.nodes.borrow();
        f.debug_list()
            .entries(nodes.iter().map(|n| (n.op.name(), n.value.shape().to_vec())))
            .finish()
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` for frozen variables.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        self.get(v)
            .map(|g| Tensor::new(&v.shape(), g.to_vec()).expect("gradient shape"))
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }

    /// Number of variables holding a gradient.
    pub fn count(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn make(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::new(shape, data).expect("op output shape")
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

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

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => op.inputs().iter().any(|&i| nodes[i].value.requires_grad()),
        };
        let value = value.with_requires_grad(requires_grad);
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a leaf, keeping the tensor's own `requires_grad` flag.
    pub fn leaf(&self, mut tensor: Tensor) -> Var<'_> {
        tensor.set_grad(None).expect("clearing grad");
        self.push(tensor, Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Records a copy of `tensor` as a trainable leaf.
    pub fn param(&self, tensor: &Tensor) -> Var<'_> {
        self.leaf(tensor.clone().with_requires_grad(true))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or(TensorError::Empty { op: "concat" })?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(TensorError::OutOfRange {
                op: "concat",
                index: axis,
                size: base.len(),
            });
        }
        let mut total = 0;
        for p in parts {
            let s = p.shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !ok {
                return Err(mismatch("concat", &base, &s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        {
            let nodes = self.nodes.borrow();
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.id].value;
                    let chunk = v.shape()[axis] * inner;
                    out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
        }
        Ok(self.push(
            make(&shape, out),
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    /// Replays the tape backward from a scalar `loss`.
    ///
    /// Only nodes derived from trainable leaves are visited; frozen
    /// subgraphs are skipped entirely.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        assert!(std::ptr::eq(self, loss.tape), "loss from another tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id].value;
        if root.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: root.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; nodes.len()];
        if !root.requires_grad() {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.value.requires_grad() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_op(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f32>>],
    id: usize,
    f: impl FnOnce(&mut [f32]),
) {
    if !nodes[id].value.requires_grad() {
        return;
    }
    let buf = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(buf);
}

fn backward_op(nodes: &[Node], id: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let node = &nodes[id];
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let k = *av.shape().last().unwrap();
            let m = av.numel() / k;
            let n = node.value.numel() / m;
            let gm = Mat::new(g, m, n);
            accumulate(nodes, grads, *a, |da| {
                let bm = if *trans_b {
                    Mat::new(bv.data(), n, k)
                } else {
                    Mat::new(bv.data(), k, n).t()
                };
                gemm(gm, bm, 1.0, da, k, 1);
            });
            accumulate(nodes, grads, *b, |db| {
                let am = Mat::new(av.data(), m, k);
                if *trans_b {
                    gemm(gm.t(), am, 1.0, db, k, 1);
                } else {
                    gemm(am.t(), gm, 1.0, db, n, 1);
                }
            });
        }
        Op::Add { a, b } => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| add_into(d, g));
        }
        Op::Sub { a, b } => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| {
                d.iter_mut().zip(g).for_each(|(x, y)| *x -= y)
            });
        }
        Op::Mul { a, b } => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            accumulate(nodes, grads, *a, |d| {
                for ((x, gi), bi) in d.iter_mut().zip(g).zip(bv) {
                    *x += gi * bi;
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for ((x, gi), ai) in d.iter_mut().zip(g).zip(av) {
                    *x += gi * ai;
                }
            });
        }
        Op::AddBcast { a, b } => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| {
                for chunk in g.chunks(d.len()) {
                    add_into(d, chunk);
                }
            });
        }
        Op::MulBcast { a, b } => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            accumulate(nodes, grads, *a, |d| {
                for (dc, gc) in d.chunks_mut(bv.len()).zip(g.chunks(bv.len())) {
                    for ((x, gi), bi) in dc.iter_mut().zip(gc).zip(bv) {
                        *x += gi * bi;
                    }
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for (gc, ac) in g.chunks(d.len()).zip(av.chunks(d.len())) {
                    for ((x, gi), ai) in d.iter_mut().zip(gc).zip(ac) {
                        *x += gi * ai;
                    }
                }
            });
        }
        Op::Scale { a, s } => {
            accumulate(nodes, grads, *a, |d| {
                d.iter_mut().zip(g).for_each(|(x, gi)| *x += s * gi)
            });
        }
        Op::Gelu { a } => {
            let av = nodes[*a].value.data();
            accumulate(nodes, grads, *a, |d| {
                for ((x, gi), &xi) in d.iter_mut().zip(g).zip(av) {
                    let inner = GELU_C * (xi + GELU_A * xi * xi * xi);
                    let t = inner.tanh();
                    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * xi * xi);
                    *x += gi * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * dinner);
                }
            });
        }
        Op::Abs { a } => {
            let av = nodes[*a].value.data();
            accumulate(nodes, grads, *a, |d| {
                for ((x, gi), &xi) in d.iter_mut().zip(g).zip(av) {
                    if xi > 0.0 {
                        *x += gi;
                    } else if xi < 0.0 {
                        *x -= gi;
                    }
                }
            });
        }
        Op::Softmax { a } => {
            let n = *node.value.shape().last().unwrap();
            accumulate(nodes, grads, *a, |d| {
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let dot: f32 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for ((x, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *x += yi * (gi - dot);
                    }
                }
            });
        }
        Op::L2Normalize { a, norms } => {
            let n = *node.value.shape().last().unwrap();
            accumulate(nodes, grads, *a, |d| {
                for (((dr, gr), yr), &norm) in d
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(out.chunks(n))
                    .zip(norms)
                {
                    let denom = norm + NORM_EPS;
                    // y = x / denom; dx = g/denom - x (x.g) / (norm denom^2)
                    let ydotg: f32 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    let coef = if norm > 0.0 { ydotg * denom / norm } else { 0.0 };
                    for ((x, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *x += (gi - yi * coef) / denom;
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let n = *node.value.shape().last().unwrap();
            let gv = nodes[*gain].value.data();
            accumulate(nodes, grads, *x, |d| {
                let mut dxhat = vec![0.0f32; n];
                for (((dr, gr), xr), &inv) in d
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(xhat.chunks(n))
                    .zip(inv_std)
                {
                    for ((dh, gi), gn) in dxhat.iter_mut().zip(gr).zip(gv) {
                        *dh = gi * gn;
                    }
                    let mean_d = dxhat.iter().sum::<f32>() / n as f32;
                    let mean_dx =
                        dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f32>() / n as f32;
                    for ((o, dh), xh) in dr.iter_mut().zip(&dxhat).zip(xr) {
                        *o += inv * (dh - mean_d - xh * mean_dx);
                    }
                }
            });
            accumulate(nodes, grads, *gain, |d| {
                for (gr, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                    for ((o, gi), xh) in d.iter_mut().zip(gr).zip(xr) {
                        *o += gi * xh;
                    }
                }
            });
            accumulate(nodes, grads, *bias, |d| {
                for gr in g.chunks(n) {
                    add_into(d, gr);
                }
            });
        }
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            for &inp in inputs {
                let len = nodes[inp].value.shape()[*axis] * inner;
                let total = node.value.shape()[*axis] * inner;
                accumulate(nodes, grads, inp, |d| {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + len];
                        add_into(&mut d[o * len..(o + 1) * len], src);
                    }
                });
                offset += len;
            }
        }
        Op::Slice { a, axis, start } => {
            let src_shape = nodes[*a].value.shape();
            let (outer, n, inner) = split_axis(src_shape, *axis);
            let len = node.value.shape()[*axis];
            accumulate(nodes, grads, *a, |d| {
                for o in 0..outer {
                    let dst = &mut d[(o * n + start) * inner..(o * n + start + len) * inner];
                    add_into(dst, &g[o * len * inner..(o + 1) * len * inner]);
                }
            });
        }
        Op::Repeat { a, times } => {
            accumulate(nodes, grads, *a, |d| {
                for chunk in g.chunks(d.len()).take(*times) {
                    add_into(d, chunk);
                }
            });
        }
        Op::Reshape { a } => accumulate(nodes, grads, *a, |d| add_into(d, g)),
        Op::Gather { a, index } => {
            accumulate(nodes, grads, *a, |d| {
                for (&i, gi) in index.iter().zip(g) {
                    d[i] += gi;
                }
            });
        }
        Op::SumAll { a } => {
            accumulate(nodes, grads, *a, |d| d.iter_mut().for_each(|x| *x += g[0]));
        }
        Op::SumAxis { a, axis } => {
            let (outer, n, inner) = split_axis(nodes[*a].value.shape(), *axis);
            accumulate(nodes, grads, *a, |d| {
                for o in 0..outer {
                    for j in 0..n {
                        let dst = &mut d[(o * n + j) * inner..(o * n + j + 1) * inner];
                        add_into(dst, &g[o * inner..(o + 1) * inner]);
                    }
                }
            });
        }
        Op::Attention { qkv, heads, probs } => {
            let shape = nodes[*qkv].value.shape();
            let (b, t, d3) = (shape[0], shape[1], shape[2]);
            let qkv_data = nodes[*qkv].value.data();
            accumulate(nodes, grads, *qkv, |dq| {
                attention_backward(qkv_data, probs, g, dq, b, t, d3 / 3, *heads);
            });
        }
        Op::TopKMean { a, axis, k, selected } => {
            let (outer, n, inner) = split_axis(nodes[*a].value.shape(), *axis);
            let scale = 1.0 / *k as f32;
            accumulate(nodes, grads, *a, |d| {
                for o in 0..outer {
                    for i in 0..inner {
                        let cell = o * inner + i;
                        for &j in &selected[cell * k..(cell + 1) * k] {
                            d[(o * n + j) * inner + i] += g[cell] * scale;
                        }
                    }
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let c = *nodes[*logits].value.shape().last().unwrap();
            let rows = targets.len();
            let scale = g[0] / rows as f32;
            accumulate(nodes, grads, *logits, |d| {
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        d[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            });
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[allow(clippy::too_many_arguments)]
fn attention_forward(
    qkv: &[f32],
    out: &mut [f32],
    probs: &mut [f32],
    batch: usize,
    seq: usize,
    dim: usize,
    heads: usize,
) {
    let dh = dim / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let row = 3 * dim;
    for b in 0..batch {
        for h in 0..heads {
            let base = b * seq * row + h * dh;
            let q = Mat::strided(&qkv[base..], seq, dh, row, 1);
            let k = Mat::strided(&qkv[base + dim..], seq, dh, row, 1);
            let v = Mat::strided(&qkv[base + 2 * dim..], seq, dh, row, 1);
            let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            gemm(q, k.t(), 0.0, p, seq, 1);
            for r in p.chunks_mut(seq) {
                let mut max = f32::NEG_INFINITY;
                for x in r.iter_mut() {
                    *x *= scale;
                    max = max.max(*x);
                }
                let mut sum = 0.0;
                for x in r.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                r.iter_mut().for_each(|x| *x /= sum);
            }
            let pm = Mat::new(p, seq, seq);
            gemm(pm, v, 0.0, &mut out[b * seq * dim + h * dh..], dim, 1);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    qkv: &[f32],
    probs: &[f32],
    g: &[f32],
    dqkv: &mut [f32],
    batch: usize,
    seq: usize,
    dim: usize,
    heads: usize,
) {
    let dh = dim / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let row = 3 * dim;
    let mut dp = vec![0.0f32; seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let base = b * seq * row + h * dh;
            let q = Mat::strided(&qkv[base..], seq, dh, row, 1);
            let k = Mat::strided(&qkv[base + dim..], seq, dh, row, 1);
            let v = Mat::strided(&qkv[base + 2 * dim..], seq, dh, row, 1);
            let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            let pm = Mat::new(p, seq, seq);
            let go = Mat::strided(&g[b * seq * dim + h * dh..], seq, dh, dim, 1);
            gemm(pm.t(), go, 1.0, &mut dqkv[base + 2 * dim..], row, 1);
            gemm(go, v.t(), 0.0, &mut dp, seq, 1);
            for (dr, pr) in dp.chunks_mut(seq).zip(p.chunks(seq)) {
                let dot: f32 = dr.iter().zip(pr).map(|(x, y)| x * y).sum();
                for (x, pi) in dr.iter_mut().zip(pr) {
                    *x = pi * (*x - dot) * scale;
                }
            }
            let ds = Mat::new(&dp, seq, seq);
            gemm(ds, k, 1.0, &mut dqkv[base..], row, 1);
            gemm(ds.t(), q, 1.0, &mut dqkv[base + dim..], row, 1);
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn item(&self) -> Result<f32> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.value().requires_grad()
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(mismatch(op, &a, &b));
        }
        Ok(())
    }

    fn unary(&self, op: Op, f: impl Fn(f32) -> f32) -> Var<'t> {
        let value = {
            let v = self.value();
            make(v.shape(), v.data().iter().map(|&x| f(x)).collect())
        };
        self.tape.push(value, op)
    }

    fn binary(&self, other: &Var<'t>, op: Op, f: impl Fn(f32, f32) -> f32) -> Var<'t> {
        let value = {
            let (a, b) = (self.value(), other.value());
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            make(a.shape(), data)
        };
        self.tape.push(value, op)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "add")?;
        Ok(self.binary(other, Op::Add { a: self.id, b: other.id }, |x, y| x + y))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "sub")?;
        Ok(self.binary(other, Op::Sub { a: self.id, b: other.id }, |x, y| x - y))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "mul")?;
        Ok(self.binary(other, Op::Mul { a: self.id, b: other.id }, |x, y| x * y))
    }

    fn check_suffix(&self, other: &Var<'t>, op: &'static str) -> Result<(Vec<usize>, usize)> {
        let (a, b) = (self.shape(), other.shape());
        if b.len() > a.len() || a[a.len() - b.len()..] != b[..] {
            return Err(mismatch(op, &a, &b));
        }
        Ok((a, b.iter().product()))
    }

    /// Adds `other` broadcast over the leading axes; `other`'s shape must be
    /// a suffix of this shape.
    pub fn add_bcast(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (shape, n) = self.check_suffix(other, "add_bcast")?;
        let value = {
            let (a, b) = (self.value(), other.value());
            let mut data = a.data().to_vec();
            for chunk in data.chunks_mut(n) {
                add_into(chunk, b.data());
            }
            make(&shape, data)
        };
        Ok(self.tape.push(value, Op::AddBcast { a: self.id, b: other.id }))
    }

    /// Elementwise product with `other` broadcast over the leading axes.
    pub fn mul_bcast(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (shape, n) = self.check_suffix(other, "mul_bcast")?;
        let value = {
            let (a, b) = (self.value(), other.value());
            let mut data = a.data().to_vec();
            for chunk in data.chunks_mut(n) {
                chunk.iter_mut().zip(b.data()).for_each(|(x, y)| *x *= y);
            }
            make(&shape, data)
        };
        Ok(self.tape.push(value, Op::MulBcast { a: self.id, b: other.id }))
    }

    pub fn scale(&self, s: f32) -> Var<'t> {
        self.unary(Op::Scale { a: self.id, s }, |x| x * s)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(Op::Gelu { a: self.id }, |x| {
            0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
        })
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(Op::Abs { a: self.id }, f32::abs)
    }

    /// `self @ other` where `self` is `[.., K]` and `other` is `[K, N]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false)
    }

    /// `self @ other^T` where `self` is `[.., K]` and `other` is `[N, K]`.
    pub fn matmul_t(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: &Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        let op_name = if trans_b { "matmul_t" } else { "matmul" };
        if sa.is_empty() || sb.len() != 2 {
            return Err(mismatch(op_name, &sa, &sb));
        }
        let k = *sa.last().unwrap();
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(mismatch(op_name, &sa, &sb));
        }
        let m = sa.iter().product::<usize>() / k;
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let value = {
            let (a, b) = (self.value(), other.value());
            let mut out = vec![0.0; m * n];
            let bm = if trans_b {
                Mat::new(b.data(), n, k).t()
            } else {
                Mat::new(b.data(), k, n)
            };
            gemm(Mat::new(a.data(), m, k), bm, 0.0, &mut out, n, 1);
            make(&shape, out)
        };
        Ok(self.tape.push(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                trans_b,
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'t> {
        let value = {
            let v = self.value();
            let n = *v.shape().last().unwrap_or(&1);
            let mut data = v.data().to_vec();
            for r in data.chunks_mut(n) {
                let max = r.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for x in r.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                r.iter_mut().for_each(|x| *x /= sum);
            }
            make(v.shape(), data)
        };
        self.tape.push(value, Op::Softmax { a: self.id })
    }

    /// Divides every vector along the last axis by its L2 norm (plus epsilon).
    pub fn l2_normalize(&self) -> Var<'t> {
        let (value, norms) = {
            let v = self.value();
            let n = *v.shape().last().unwrap_or(&1);
            let mut data = v.data().to_vec();
            let mut norms = Vec::with_capacity(data.len() / n);
            for r in data.chunks_mut(n) {
                let norm = r.iter().map(|x| x * x).sum::<f32>().sqrt();
                let denom = norm + NORM_EPS;
                r.iter_mut().for_each(|x| *x /= denom);
                norms.push(norm);
            }
            (make(v.shape(), data), norms)
        };
        self.tape.push(value, Op::L2Normalize { a: self.id, norms })
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        let shape = self.shape();
        let n = *shape.last().ok_or(TensorError::Empty { op: "layer_norm" })?;
        for p in [gain, bias] {
            if p.shape() != [n] {
                return Err(mismatch("layer_norm", &shape, &p.shape()));
            }
        }
        let (value, xhat, inv_std) = {
            let (x, gv, bv) = (self.value(), gain.value(), bias.value());
            let rows = x.numel() / n;
            let mut xhat = Vec::with_capacity(x.numel());
            let mut inv_std = Vec::with_capacity(rows);
            let mut out = Vec::with_capacity(x.numel());
            for r in x.data().chunks(n) {
                let mean = r.iter().sum::<f32>() / n as f32;
                let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std.push(inv);
                for ((v, gi), bi) in r.iter().zip(gv.data()).zip(bv.data()) {
                    let h = (v - mean) * inv;
                    xhat.push(h);
                    out.push(h * gi + bi);
                }
            }
            (make(&shape, out), xhat, inv_std)
        };
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
        ))
    }

    /// Sub-range `start..start+len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::OutOfRange {
                op: "slice",
                index: axis,
                size: shape.len(),
            });
        }
        if len == 0 {
            return Err(TensorError::Empty { op: "slice" });
        }
        if start + len > shape[axis] {
            return Err(TensorError::OutOfRange {
                op: "slice",
                index: start + len - 1,
                size: shape[axis],
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let value = {
            let v = self.value();
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                data.extend_from_slice(&v.data()[(o * n + start) * inner..(o * n + start + len) * inner]);
            }
            let mut s = shape.clone();
            s[axis] = len;
            make(&s, data)
        };
        Ok(self.tape.push(
            value,
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
        ))
    }

    /// Stacks `times` copies along a new leading axis.
    pub fn repeat(&self, times: usize) -> Result<Var<'t>> {
        if times == 0 {
            return Err(TensorError::Empty { op: "repeat" });
        }
        let value = {
            let v = self.value();
            let mut shape = vec![times];
            shape.extend_from_slice(v.shape());
            make(&shape, v.data().repeat(times))
        };
        Ok(self.tape.push(value, Op::Repeat { a: self.id, times }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.to_tensor().reshape(shape)?;
        Ok(self.tape.push(value, Op::Reshape { a: self.id }))
    }

    /// `out[i] = self[index[i]]` over the flattened data, reshaped to `shape`.
    pub fn gather(&self, index: Vec<usize>, shape: &[usize]) -> Result<Var<'t>> {
        let numel = self.value().numel();
        if let Some(&bad) = index.iter().find(|&&i| i >= numel) {
            return Err(TensorError::OutOfRange {
                op: "gather",
                index: bad,
                size: numel,
            });
        }
        let data = {
            let v = self.value();
            index.iter().map(|&i| v.data()[i]).collect::<Vec<_>>()
        };
        let value = Tensor::new(shape, data)?;
        Ok(self.tape.push(value, Op::Gather { a: self.id, index }))
    }

    pub fn sum(&self) -> Var<'t> {
        let total = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(total), Op::SumAll { a: self.id })
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel() as f32;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::OutOfRange {
                op: "sum_axis",
                index: axis,
                size: shape.len(),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let value = {
            let v = self.value();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..n {
                    add_into(
                        &mut out[o * inner..(o + 1) * inner],
                        &v.data()[(o * n + j) * inner..(o * n + j + 1) * inner],
                    );
                }
            }
            let mut s = shape.clone();
            s.remove(axis);
            make(&s, out)
        };
        Ok(self.tape.push(value, Op::SumAxis { a: self.id, axis }))
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let n = *self.shape().get(axis).ok_or(TensorError::OutOfRange {
            op: "mean_axis",
            index: axis,
            size: self.shape().len(),
        })?;
        Ok(self.sum_axis(axis)?.scale(1.0 / n as f32))
    }

    /// Multi-head scaled dot-product self-attention over a packed
    /// `[batch, seq, 3 * dim]` query/key/value tensor. Returns `[batch, seq, dim]`.
    pub fn attention(&self, heads: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 3 || shape[2] % 3 != 0 || heads == 0 || (shape[2] / 3) % heads != 0 {
            return Err(TensorError::InvalidArgument {
                op: "attention",
                msg: format!("packed qkv shape {shape:?} with {heads} heads"),
            });
        }
        let (b, t, dim) = (shape[0], shape[1], shape[2] / 3);
        let mut out = vec![0.0; b * t * dim];
        let mut probs = vec![0.0; b * heads * t * t];
        attention_forward(self.value().data(), &mut out, &mut probs, b, t, dim, heads);
        Ok(self.tape.push(
            make(&[b, t, dim], out),
            Op::Attention {
                qkv: self.id,
                heads,
                probs,
            },
        ))
    }

    /// Mean of the `k` largest entries along `axis`, removing the axis.
    /// Ties are broken in favor of the lower index. The gradient flows only
    /// to the selected entries.
    pub fn topk_mean(&self, axis: usize, k: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::OutOfRange {
                op: "topk_mean",
                index: axis,
                size: shape.len(),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        if k == 0 || k > n {
            return Err(TensorError::InvalidArgument {
                op: "topk_mean",
                msg: format!("k = {k} for axis of length {n}"),
            });
        }
        let mut selected = Vec::with_capacity(outer * inner * k);
        let mut out = Vec::with_capacity(outer * inner);
        {
            let v = self.value();
            let data = v.data();
            let mut order: Vec<usize> = Vec::with_capacity(n);
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| data[(o * n + j) * inner + i];
                    order.clear();
                    order.extend(0..n);
                    order.sort_by(|&x, &y| at(y).total_cmp(&at(x)).then(x.cmp(&y)));
                    let top = &order[..k];
                    out.push(top.iter().map(|&j| at(j)).sum::<f32>() / k as f32);
                    selected.extend_from_slice(top);
                }
            }
        }
        let mut s = shape.clone();
        s.remove(axis);
        Ok(self.tape.push(
            make(&s, out),
            Op::TopKMean {
                a: self.id,
                axis,
                k,
                selected,
            },
        ))
    }

    /// Indices chosen along the reduced axis by a `topk_mean` node, `k` per
    /// output cell in output order; `None` for any other node.
    pub fn topk_indices(&self) -> Option<Vec<usize>> {
        let nodes = self.tape.nodes.borrow();
        match &nodes[self.id].op {
            Op::TopKMean { selected, .. } => Some(selected.clone()),
            _ => None,
        }
    }

    /// Mean softmax cross-entropy of `[rows, C]` (or `[C]`) logits against
    /// one target class per row.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let c = *shape.last().ok_or(TensorError::Empty { op: "cross_entropy" })?;
        let rows = self.value().numel() / c;
        if targets.len() != rows {
            return Err(mismatch("cross_entropy", &shape, &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::OutOfRange {
                op: "cross_entropy",
                index: bad,
                size: c,
            });
        }
        let mut probs = Vec::with_capacity(rows * c);
        let mut total = 0.0f32;
        {
            let v = self.value();
            for (r, &t) in v.data().chunks(c).zip(targets) {
                let max = r.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let sum: f32 = r.iter().map(|x| (x - max).exp()).sum();
                let lse = max + sum.ln();
                total += lse - r[t];
                probs.extend(r.iter().map(|x| (x - lse).exp()));
            }
        }
        Ok(self.tape.push(
            Tensor::scalar(total / rows as f32),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Cosine similarity of two equal-length vectors, as a scalar.
    pub fn cosine_similarity(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 1 || a != b {
            return Err(mismatch("cosine_similarity", &a, &b));
        }
        Ok(self.l2_normalize().mul(&other.l2_normalize())?.sum())
    }
}
