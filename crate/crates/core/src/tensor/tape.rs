//! Append-only Wengert tape for reverse-mode differentiation.
//!
//! Every op appends one node holding its forward value. `backward` walks the
//! nodes from the loss down to index 0, which is a reverse topological order
//! because parents are always recorded before their children.

use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::array::{NdArray, Shape};
use super::kernels::{self, ConvGeometry};
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `x[b, ..] + p[..]` for every leading index `b`.
    AddBatch { x: NodeId, p: NodeId },
    MatMul(NodeId, NodeId),
    /// `x · wᵀ + bias` with `x: B×in`, `w: out×in`.
    Linear { x: NodeId, w: NodeId, bias: Option<NodeId> },
    Relu(NodeId),
    MaxPool2 { x: NodeId, argmax: Vec<usize> },
    Conv2d { x: NodeId, w: NodeId, bias: Option<NodeId>, geom: ConvGeometry, batch: usize },
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Softmax(NodeId),
    SelectCols { x: NodeId, cols: Vec<usize> },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::AddBatch { x, p } => vec![*x, *p],
            Op::Linear { x, w, bias } | Op::Conv2d { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias.iter().copied());
                v
            }
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Softmax(a)
            | Op::MaxPool2 { x: a, .. }
            | Op::SelectCols { x: a, .. }
            | Op::CrossEntropy { logits: a, .. } => vec![*a],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: NdArray,
    op: Op,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    rng: RefCell<ChaCha8Rng>,
    seed: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new(0)
    }
}

impl Tape {
    pub fn new(seed: u64) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// A differentiable input; `backward` reports its gradient.
    pub fn leaf(&self, value: NdArray) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A value that never receives a gradient (frozen weights, data).
    pub fn constant(&self, value: NdArray) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    pub fn zeros(&self, dims: &[usize]) -> Result<Var<'_>> {
        Ok(self.constant(NdArray::zeros(dims)?))
    }

    /// Standard-normal constant drawn from the tape's own stream.
    pub fn randn(&self, dims: &[usize]) -> Result<Var<'_>> {
        let v = NdArray::randn_with(dims, &mut *self.rng.borrow_mut())?;
        Ok(self.constant(v))
    }

    fn push(&self, value: NdArray, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: NodeId) -> NdArray {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn record(&self, value: NdArray, op: Op) -> Var<'_> {
        let rg = op.parents().iter().any(|&p| self.needs(p));
        self.push(value, op, rg)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

fn same_tape(a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if std::ptr::eq(a.tape, b.tape) {
        Ok(())
    } else {
        Err(Error::invalid("operands recorded on different tapes"))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn value(&self) -> NdArray {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Shape {
        self.tape.nodes.borrow()[self.id].value.shape().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        same_tape(self, other)?;
        let v = self.value().add(&other.value())?;
        Ok(self.tape.record(v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        same_tape(self, other)?;
        let v = self.value().sub(&other.value())?;
        Ok(self.tape.record(v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        same_tape(self, other)?;
        let v = self.value().mul(&other.value())?;
        Ok(self.tape.record(v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let v = self.value().scale(s);
        self.tape.record(v, Op::Scale(self.id, s))
    }

    /// Adds `p` to every slab along the leading axis of `self`.
    pub fn add_batch(&self, p: &Var<'t>) -> Result<Var<'t>> {
        same_tape(self, p)?;
        let (x, pv) = (self.value(), p.value());
        if x.dims().len() != pv.dims().len() + 1 || &x.dims()[1..] != pv.dims() {
            return Err(Error::ShapeMismatch {
                op: "add_batch",
                left: x.shape().clone(),
                right: pv.shape().clone(),
            });
        }
        let inner = pv.len();
        let mut out = x.to_vec();
        for chunk in out.chunks_mut(inner) {
            for (o, a) in chunk.iter_mut().zip(pv.data()) {
                *o += a;
            }
        }
        let v = NdArray::with_shape(x.shape().clone(), out)?;
        Ok(self.tape.record(v, Op::AddBatch { x: self.id, p: p.id }))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        same_tape(self, other)?;
        let (a, b) = (self.value(), other.value());
        if a.dims().len() != 2 || b.dims().len() != 2 || a.dims()[1] != b.dims()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: a.shape().clone(),
                right: b.shape().clone(),
            });
        }
        let (m, k, n) = (a.dims()[0], a.dims()[1], b.dims()[1]);
        let mut c = vec![0.0; m * n];
        kernels::matmul(a.data(), b.data(), &mut c, m, k, n);
        let v = NdArray::from_vec(&[m, n], c)?;
        Ok(self.tape.record(v, Op::MatMul(self.id, other.id)))
    }

    /// Affine map `x · wᵀ + bias` for `x: B×in`, `w: out×in`, `bias: out`.
    pub fn linear(&self, w: &Var<'t>, bias: Option<&Var<'t>>) -> Result<Var<'t>> {
        same_tape(self, w)?;
        let (x, wv) = (self.value(), w.value());
        if x.dims().len() != 2 || wv.dims().len() != 2 || x.dims()[1] != wv.dims()[1] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: x.shape().clone(),
                right: wv.shape().clone(),
            });
        }
        let (bsz, fin, fout) = (x.dims()[0], x.dims()[1], wv.dims()[0]);
        let mut y = vec![0.0; bsz * fout];
        kernels::gemm(x.data(), false, wv.data(), true, &mut y, bsz, fin, fout, 0.0);
        if let Some(b) = bias {
            same_tape(self, b)?;
            let bv = b.value();
            if bv.dims() != [fout] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    left: wv.shape().clone(),
                    right: bv.shape().clone(),
                });
            }
            for row in y.chunks_mut(fout) {
                for (o, a) in row.iter_mut().zip(bv.data()) {
                    *o += a;
                }
            }
        }
        let v = NdArray::from_vec(&[bsz, fout], y)?;
        Ok(self.tape.record(
            v,
            Op::Linear {
                x: self.id,
                w: w.id,
                bias: bias.map(|b| b.id),
            },
        ))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.value().map(|a| if a > 0.0 { a } else { 0.0 });
        self.tape.record(v, Op::Relu(self.id))
    }

    /// 2×2, stride-2 max pooling over the last two axes of a rank-3 or rank-4 input.
    pub fn maxpool2d(&self) -> Result<Var<'t>> {
        let x = self.value();
        let dims = x.dims().to_vec();
        if dims.len() < 3 || dims[dims.len() - 1] < 2 || dims[dims.len() - 2] < 2 {
            return Err(Error::invalid(format!("maxpool2d needs a rank-3/4 input with H,W ≥ 2, got {}", x.shape())));
        }
        let r = dims.len();
        let (h, w) = (dims[r - 2], dims[r - 1]);
        let planes: usize = dims[..r - 2].iter().product();
        let (out, argmax) = kernels::maxpool2_forward(x.data(), planes, h, w);
        let mut od = dims.clone();
        od[r - 2] = h / 2;
        od[r - 1] = w / 2;
        let v = NdArray::from_vec(&od, out)?;
        Ok(self.tape.record(v, Op::MaxPool2 { x: self.id, argmax }))
    }

    /// Cross-correlation with zero padding. `self` is `C×H×W` or `B×C×H×W`,
    /// `w` is `C_out×C_in×kh×kw`, `bias` is `C_out`.
    pub fn conv2d(&self, w: &Var<'t>, bias: Option<&Var<'t>>, stride: usize, pad: usize) -> Result<Var<'t>> {
        same_tape(self, w)?;
        let (x, wv) = (self.value(), w.value());
        let xd = x.dims();
        let (batch, c, h, wd, rank3) = match xd.len() {
            3 => (1, xd[0], xd[1], xd[2], true),
            4 => (xd[0], xd[1], xd[2], xd[3], false),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    left: x.shape().clone(),
                    right: wv.shape().clone(),
                })
            }
        };
        let kd = wv.dims();
        if kd.len() != 4 || kd[1] != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: x.shape().clone(),
                right: wv.shape().clone(),
            });
        }
        if kd[2] % 2 == 0 || kd[3] % 2 == 0 || stride == 0 {
            return Err(Error::invalid(format!("conv2d needs odd kernel extents and stride ≥ 1, got {} stride {stride}", wv.shape())));
        }
        if h + 2 * pad < kd[2] || wd + 2 * pad < kd[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: x.shape().clone(),
                right: wv.shape().clone(),
            });
        }
        let geom = ConvGeometry {
            c_in: c,
            h,
            w: wd,
            c_out: kd[0],
            kh: kd[2],
            kw: kd[3],
            stride,
            pad,
        };
        let bias_v = match bias {
            Some(b) => {
                same_tape(self, b)?;
                let bv = b.value();
                if bv.dims() != [geom.c_out] {
                    return Err(Error::ShapeMismatch {
                        op: "conv2d bias",
                        left: wv.shape().clone(),
                        right: bv.shape().clone(),
                    });
                }
                Some(bv)
            }
            None => None,
        };
        let out = kernels::conv2d_forward(x.data(), wv.data(), bias_v.as_ref().map(|b| b.data()), &geom, batch);
        let v = if rank3 {
            NdArray::from_vec(&[geom.c_out, geom.out_h(), geom.out_w()], out)?
        } else {
            NdArray::from_vec(&[batch, geom.c_out, geom.out_h(), geom.out_w()], out)?
        };
        Ok(self.tape.record(
            v,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                bias: bias.map(|b| b.id),
                geom,
                batch,
            },
        ))
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(dims)?;
        Ok(self.tape.record(v, Op::Reshape(self.id)))
    }

    /// Collapse everything after the leading axis.
    pub fn flatten(&self) -> Result<Var<'t>> {
        let d = self.value().dims().to_vec();
        let rest: usize = d[1..].iter().product();
        self.reshape(&[d[0], rest])
    }

    pub fn sum(&self) -> Var<'t> {
        let v = NdArray::scalar(self.value().sum());
        self.tape.record(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let x = self.value();
        let v = NdArray::scalar(x.sum() / x.len() as f64);
        self.tape.record(v, Op::Mean(self.id))
    }

    /// Softmax along the last axis.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let x = self.value();
        let k = *x.dims().last().ok_or_else(|| Error::invalid("softmax of a scalar"))?;
        let mut out = x.to_vec();
        for row in out.chunks_mut(k) {
            softmax_in_place(row);
        }
        let v = NdArray::with_shape(x.shape().clone(), out)?;
        Ok(self.tape.record(v, Op::Softmax(self.id)))
    }

    /// Picks columns of a `B×d` matrix (or entries of a `d` vector).
    pub fn select_cols(&self, cols: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, d) = match x.dims() {
            [d] => (1, *d),
            [b, d] => (*b, *d),
            _ => return Err(Error::invalid(format!("select_cols needs rank 1 or 2, got {}", x.shape()))),
        };
        if let Some(&bad) = cols.iter().find(|&&c| c >= d) {
            return Err(Error::invalid(format!("column {bad} out of range for width {d}")));
        }
        let mut out = Vec::with_capacity(rows * cols.len());
        for r in 0..rows {
            out.extend(cols.iter().map(|&c| x.data()[r * d + c]));
        }
        let v = if x.dims().len() == 1 {
            NdArray::from_vec(&[cols.len()], out)?
        } else {
            NdArray::from_vec(&[rows, cols.len()], out)?
        };
        Ok(self.tape.record(
            v,
            Op::SelectCols {
                x: self.id,
                cols: cols.to_vec(),
            },
        ))
    }

    /// Mean of `−log softmax(logits)[label]` over the rows of `B×k` logits.
    /// A rank-1 input is treated as a single row.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, k) = match x.dims() {
            [k] => (1, *k),
            [b, k] => (*b, *k),
            _ => return Err(Error::invalid(format!("cross_entropy needs rank 1 or 2 logits, got {}", x.shape()))),
        };
        if labels.len() != rows {
            return Err(Error::invalid(format!("{} labels for {rows} rows", labels.len())));
        }
        let (loss, probs) = cross_entropy_rows(x.data(), labels, k)?;
        Ok(self.tape.record(
            NdArray::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Mean cross-entropy over rows plus the softmax probabilities.
pub(crate) fn cross_entropy_rows(logits: &[f64], labels: &[usize], k: usize) -> Result<(f64, Vec<f64>)> {
    if k == 0 {
        return Err(Error::invalid("cross_entropy over zero classes"));
    }
    let mut probs = logits.to_vec();
    let mut total = 0.0;
    for (row, (&y, src)) in probs.chunks_mut(k).zip(labels.iter().zip(logits.chunks(k))) {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = src.iter().map(|v| (v - m).exp()).sum();
        total += z.ln() + m - src[y];
        row.copy_from_slice(src);
        softmax_in_place(row);
    }
    Ok((total / labels.len().max(1) as f64, probs))
}

/// Leaf gradients produced by [`backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<NdArray>>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&NdArray> {
        self.by_id(var.id)
    }

    pub fn by_id(&self, id: NodeId) -> Option<&NdArray> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

/// Reverse pass from a scalar `loss`. Returns the gradient for every
/// differentiable leaf recorded before `loss` (zeros where unreachable).
pub fn backward(loss: &Var<'_>) -> Result<Gradients> {
    let nodes = loss.tape.nodes.borrow();
    let root = &nodes[loss.id];
    if root.value.len() != 1 {
        return Err(Error::NonScalarLoss(root.value.shape().clone()));
    }
    let n = loss.id + 1;
    let mut work: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut out: Vec<Option<NdArray>> = vec![None; n];
    work[loss.id] = Some(vec![1.0]);

    for id in (0..n).rev() {
        let node = &nodes[id];
        if !node.requires_grad {
            work[id] = None;
            continue;
        }
        let Some(dy) = work[id].take() else {
            if matches!(node.op, Op::Leaf) {
                out[id] = Some(NdArray::with_shape(node.value.shape().clone(), vec![0.0; node.value.len()])?);
            }
            continue;
        };
        let need = |p: NodeId| nodes[p].requires_grad;
        match &node.op {
            Op::Leaf => {
                out[id] = Some(NdArray::with_shape(node.value.shape().clone(), dy)?);
            }
            Op::Constant => {}
            Op::Add(a, b) => {
                if need(*a) {
                    accumulate(&mut work[*a], &dy);
                }
                if need(*b) {
                    accumulate(&mut work[*b], &dy);
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    accumulate(&mut work[*a], &dy);
                }
                if need(*b) {
                    let neg: Vec<f64> = dy.iter().map(|v| -v).collect();
                    accumulate(&mut work[*b], &neg);
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    let g: Vec<f64> = dy.iter().zip(nodes[*b].value.data()).map(|(d, v)| d * v).collect();
                    accumulate(&mut work[*a], &g);
                }
                if need(*b) {
                    let g: Vec<f64> = dy.iter().zip(nodes[*a].value.data()).map(|(d, v)| d * v).collect();
                    accumulate(&mut work[*b], &g);
                }
            }
            Op::Scale(a, s) => {
                let g: Vec<f64> = dy.iter().map(|d| d * s).collect();
                accumulate(&mut work[*a], &g);
            }
            Op::AddBatch { x, p } => {
                if need(*p) {
                    let inner = nodes[*p].value.len();
                    let mut g = vec![0.0; inner];
                    for chunk in dy.chunks(inner) {
                        for (a, d) in g.iter_mut().zip(chunk) {
                            *a += d;
                        }
                    }
                    accumulate(&mut work[*p], &g);
                }
                if need(*x) {
                    accumulate(&mut work[*x], &dy);
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, nn) = (av.dims()[0], av.dims()[1], bv.dims()[1]);
                if need(*a) {
                    let mut g = vec![0.0; m * k];
                    kernels::gemm(&dy, false, bv.data(), true, &mut g, m, nn, k, 0.0);
                    accumulate(&mut work[*a], &g);
                }
                if need(*b) {
                    let mut g = vec![0.0; k * nn];
                    kernels::gemm(av.data(), true, &dy, false, &mut g, k, m, nn, 0.0);
                    accumulate(&mut work[*b], &g);
                }
            }
            Op::Linear { x, w, bias } => {
                let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
                let (bsz, fin, fout) = (xv.dims()[0], xv.dims()[1], wv.dims()[0]);
                if need(*x) {
                    let mut g = vec![0.0; bsz * fin];
                    kernels::gemm(&dy, false, wv.data(), false, &mut g, bsz, fout, fin, 0.0);
                    accumulate(&mut work[*x], &g);
                }
                if need(*w) {
                    let mut g = vec![0.0; fout * fin];
                    kernels::gemm(&dy, true, xv.data(), false, &mut g, fout, bsz, fin, 0.0);
                    accumulate(&mut work[*w], &g);
                }
                if let Some(b) = bias {
                    if need(*b) {
                        let mut g = vec![0.0; fout];
                        for row in dy.chunks(fout) {
                            for (a, d) in g.iter_mut().zip(row) {
                                *a += d;
                            }
                        }
                        accumulate(&mut work[*b], &g);
                    }
                }
            }
            Op::Relu(a) => {
                let g: Vec<f64> = dy
                    .iter()
                    .zip(nodes[*a].value.data())
                    .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                    .collect();
                accumulate(&mut work[*a], &g);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut g = vec![0.0; nodes[*x].value.len()];
                for (d, &src) in dy.iter().zip(argmax) {
                    g[src] += d;
                }
                accumulate(&mut work[*x], &g);
            }
            Op::Conv2d { x, w, bias, geom, batch } => {
                if need(*x) {
                    let g = kernels::conv2d_grad_input(&dy, nodes[*w].value.data(), geom, *batch);
                    accumulate(&mut work[*x], &g);
                }
                let wants_b = bias.map(need).unwrap_or(false);
                if need(*w) || wants_b {
                    let (gw, gb) = kernels::conv2d_grad_weight(&dy, nodes[*x].value.data(), geom, *batch);
                    if need(*w) {
                        accumulate(&mut work[*w], &gw);
                    }
                    if let (Some(b), true) = (bias, wants_b) {
                        accumulate(&mut work[*b], &gb);
                    }
                }
            }
            Op::Reshape(a) => accumulate(&mut work[*a], &dy),
            Op::Sum(a) => {
                let g = vec![dy[0]; nodes[*a].value.len()];
                accumulate(&mut work[*a], &g);
            }
            Op::Mean(a) => {
                let len = nodes[*a].value.len();
                let g = vec![dy[0] / len as f64; len];
                accumulate(&mut work[*a], &g);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let k = *node.value.dims().last().unwrap_or(&1);
                let mut g = vec![0.0; y.len()];
                for ((gr, yr), dr) in g.chunks_mut(k).zip(y.chunks(k)).zip(dy.chunks(k)) {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &dv) in gr.iter_mut().zip(yr).zip(dr) {
                        *o = yv * (dv - dot);
                    }
                }
                accumulate(&mut work[*a], &g);
            }
            Op::SelectCols { x, cols } => {
                let xv = &nodes[*x].value;
                let d = *xv.dims().last().unwrap_or(&1);
                let mut g = vec![0.0; xv.len()];
                for (r, row) in dy.chunks(cols.len()).enumerate() {
                    for (&c, &dv) in cols.iter().zip(row) {
                        g[r * d + c] += dv;
                    }
                }
                accumulate(&mut work[*x], &g);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = probs.len() / labels.len();
                let scale = dy[0] / labels.len() as f64;
                let mut g = probs.clone();
                for (row, &y) in g.chunks_mut(k).zip(labels) {
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                accumulate(&mut work[*logits], &g);
            }
        }
    }
    Ok(Gradients { grads: out })
}
