//! The computation tape: op registration during the forward pass, one
//! reverse sweep for gradients.
//!
//! Every operation computes its value eagerly and, when the tape is
//! recording and an input requires gradients, pushes a node holding the op
//! kind, input node ids and a snapshot of the output. [`Tape::backward`]
//! walks the nodes once in reverse, accumulating gradients into the
//! `requires_grad` leaves. A tape can be consumed by backward exactly once.

use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{col2im_add, conv_out_extent, im2col, matmul_nn, matmul_nt, matmul_tn};
use super::shape::{broadcast_shape, broadcast_strides, check_axes, strides_for, PairWalker};
use super::{check_finite, BinaryKind, ReduceKind, Tensor, UnaryKind};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

enum Op {
    Leaf(Tensor),
    Binary(BinaryKind),
    Unary(UnaryKind),
    Matmul,
    Conv2d {
        stride: usize,
        padding: usize,
    },
    Reduce {
        kind: ReduceKind,
        axes: Vec<usize>,
        /// For max: flat input index of the winning element per output cell.
        argmax: Vec<usize>,
    },
    Softmax {
        axis: usize,
    },
    Reshape,
    Transpose {
        perm: Vec<usize>,
    },
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Rc<Vec<f64>>,
    shape: Vec<usize>,
    needs_grad: bool,
}

/// Records operations for one forward/backward pass.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            recording: true,
        }
    }

    /// A non-recording tape: ops compute values only. Used for inference and
    /// the finite-difference side of gradient checks.
    pub fn no_grad() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn ensure_node(&self, t: &Tensor) -> usize {
        if let Some((tape_id, node_id)) = t.binding() {
            if tape_id == self.id {
                return node_id;
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op: Op::Leaf(t.clone()),
            inputs: Vec::new(),
            value: t.data_rc(),
            shape: t.shape().to_vec(),
            needs_grad: t.requires_grad(),
        });
        drop(nodes);
        t.bind(self.id, id);
        id
    }

    fn finish(
        &self,
        op: Op,
        op_name: &'static str,
        inputs: &[&Tensor],
        shape: Vec<usize>,
        value: Vec<f64>,
    ) -> Result<Tensor> {
        check_finite(&value, op_name)?;
        let value = Rc::new(value);
        if self.recording && inputs.iter().any(|t| t.requires_grad()) {
            let ids: Vec<usize> = inputs.iter().map(|t| self.ensure_node(t)).collect();
            let mut nodes = self.nodes.borrow_mut();
            let needs_grad = ids.iter().any(|&i| nodes[i].needs_grad);
            let id = nodes.len();
            nodes.push(Node {
                op,
                inputs: ids,
                value: value.clone(),
                shape: shape.clone(),
                needs_grad,
            });
            drop(nodes);
            let out = Tensor::from_rc(shape, value, true);
            out.bind(self.id, id);
            Ok(out)
        } else {
            Ok(Tensor::from_rc(shape, value, false))
        }
    }

    // ---- elementwise ----------------------------------------------------

    pub fn ewise_binary(&self, kind: BinaryKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out_shape = broadcast_shape(a.shape(), b.shape())?;
        let value = binary_values(kind, a, b, &out_shape);
        self.finish(Op::Binary(kind), "ewise_binary", &[a, b], out_shape, value)
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.ewise_binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.ewise_binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.ewise_binary(BinaryKind::Mul, a, b)
    }

    /// Multiply by a constant scalar.
    pub fn scale(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.mul(a, &Tensor::scalar(c))
    }

    pub fn ewise_unary(&self, kind: UnaryKind, a: &Tensor) -> Result<Tensor> {
        let data = a.data();
        if matches!(kind, UnaryKind::Log | UnaryKind::Sqrt) {
            if let Some(v) = data.iter().find(|v| **v <= 0.0) {
                return Err(Error::DomainError(format!(
                    "{kind:?} requires positive entries, got {v}"
                )));
            }
        }
        let value: Vec<f64> = data.iter().map(|&x| unary_value(kind, x)).collect();
        drop(data);
        let shape = a.shape().to_vec();
        self.finish(Op::Unary(kind), "ewise_unary", &[a], shape, value)
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        self.ewise_unary(UnaryKind::Relu, a)
    }

    pub fn softplus(&self, a: &Tensor) -> Result<Tensor> {
        self.ewise_unary(UnaryKind::Softplus, a)
    }

    pub fn exp(&self, a: &Tensor) -> Result<Tensor> {
        self.ewise_unary(UnaryKind::Exp, a)
    }

    pub fn log(&self, a: &Tensor) -> Result<Tensor> {
        self.ewise_unary(UnaryKind::Log, a)
    }

    pub fn sqrt(&self, a: &Tensor) -> Result<Tensor> {
        self.ewise_unary(UnaryKind::Sqrt, a)
    }

    pub fn neg(&self, a: &Tensor) -> Result<Tensor> {
        self.ewise_unary(UnaryKind::Neg, a)
    }

    // ---- matmul ----------------------------------------------------------

    /// 2-D product `[m,k]·[k,n]`, or batched 3-D `[b,m,k]·[b,k,n]`.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (batch, m, k, n) = match (a.shape(), b.shape()) {
            ([m, k1], [k2, n]) if k1 == k2 => (None, *m, *k1, *n),
            ([b1, m, k1], [b2, k2, n]) if b1 == b2 && k1 == k2 => (Some(*b1), *m, *k1, *n),
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "matmul on shapes {:?} and {:?}",
                    a.shape(),
                    b.shape()
                )))
            }
        };
        let ad = a.data();
        let bd = b.data();
        let batches = batch.unwrap_or(1);
        let mut value = vec![0.0; batches * m * n];
        for s in 0..batches {
            matmul_nn(
                &ad[s * m * k..(s + 1) * m * k],
                &bd[s * k * n..(s + 1) * k * n],
                m,
                k,
                n,
                &mut value[s * m * n..(s + 1) * m * n],
            );
        }
        drop(ad);
        drop(bd);
        let shape = match batch {
            Some(bt) => vec![bt, m, n],
            None => vec![m, n],
        };
        self.finish(Op::Matmul, "matmul", &[a, b], shape, value)
    }

    // ---- convolution -------------------------------------------------------

    /// 2-D convolution with zero padding.
    /// input `[N,C,H,W]`, kernel `[Co,C,kh,kw]` → `[N,Co,H',W']`.
    pub fn conv2d(
        &self,
        input: &Tensor,
        kernel: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        if stride < 1 {
            return Err(Error::InvalidHyperparam("conv2d stride must be >= 1".into()));
        }
        let (&[n, c, h, w], &[co, ck, kh, kw]) = (input.shape(), kernel.shape()) else {
            return Err(Error::ShapeMismatch(format!(
                "conv2d expects rank-4 input and kernel, got {:?} and {:?}",
                input.shape(),
                kernel.shape()
            )));
        };
        if ck != c {
            return Err(Error::ShapeMismatch(format!(
                "conv2d kernel expects {ck} input channels, input has {c}"
            )));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::ShapeMismatch(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = conv_out_extent(h, kh, stride, padding);
        let ow = conv_out_extent(w, kw, stride, padding);
        let ckk = c * kh * kw;
        let id = input.data();
        let kd = kernel.data();
        let mut cols = vec![0.0; ckk * oh * ow];
        let mut value = vec![0.0; n * co * oh * ow];
        for s in 0..n {
            im2col(
                &id[s * c * h * w..(s + 1) * c * h * w],
                c,
                h,
                w,
                kh,
                kw,
                stride,
                padding,
                &mut cols,
            );
            matmul_nn(
                &kd,
                &cols,
                co,
                ckk,
                oh * ow,
                &mut value[s * co * oh * ow..(s + 1) * co * oh * ow],
            );
        }
        drop(id);
        drop(kd);
        self.finish(
            Op::Conv2d { stride, padding },
            "conv2d",
            &[input, kernel],
            vec![n, co, oh, ow],
            value,
        )
    }

    // ---- reductions --------------------------------------------------------

    /// Reduces over `axes`; an empty axis set reduces over every axis.
    pub fn reduce(
        &self,
        kind: ReduceKind,
        a: &Tensor,
        axes: &[usize],
        keepdims: bool,
    ) -> Result<Tensor> {
        let rank = a.rank();
        check_axes(axes, rank)?;
        let mut axes: Vec<usize> = if axes.is_empty() {
            (0..rank).collect()
        } else {
            axes.to_vec()
        };
        axes.sort_unstable();
        axes.dedup();

        // output laid out with reduced axes kept as extent 1
        let kept_shape: Vec<usize> = (0..rank)
            .map(|d| if axes.contains(&d) { 1 } else { a.shape()[d] })
            .collect();
        let out_numel: usize = kept_shape.iter().product();
        let count: usize = axes.iter().map(|&d| a.shape()[d]).product();

        let data = a.data();
        let out_strides = broadcast_strides(&kept_shape, a.shape());
        let in_strides = strides_for(a.shape());
        let mut argmax = Vec::new();
        let value = match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                let mut acc = vec![0.0; out_numel];
                for (ii, io) in PairWalker::new(a.shape(), in_strides, out_strides) {
                    acc[io] += data[ii];
                }
                if kind == ReduceKind::Mean {
                    let inv = 1.0 / count as f64;
                    for v in &mut acc {
                        *v *= inv;
                    }
                }
                acc
            }
            ReduceKind::Max => {
                let mut acc = vec![f64::NEG_INFINITY; out_numel];
                argmax = vec![0usize; out_numel];
                for (ii, io) in PairWalker::new(a.shape(), in_strides, out_strides) {
                    // strict > keeps the first maximal element in row-major order
                    if data[ii] > acc[io] {
                        acc[io] = data[ii];
                        argmax[io] = ii;
                    }
                }
                acc
            }
        };
        drop(data);

        let final_shape: Vec<usize> = if keepdims {
            kept_shape
        } else {
            (0..rank)
                .filter(|d| !axes.contains(d))
                .map(|d| a.shape()[d])
                .collect()
        };
        self.finish(
            Op::Reduce { kind, axes, argmax },
            "reduce",
            &[a],
            final_shape,
            value,
        )
    }

    pub fn sum(&self, a: &Tensor, axes: &[usize], keepdims: bool) -> Result<Tensor> {
        self.reduce(ReduceKind::Sum, a, axes, keepdims)
    }

    pub fn mean(&self, a: &Tensor, axes: &[usize], keepdims: bool) -> Result<Tensor> {
        self.reduce(ReduceKind::Mean, a, axes, keepdims)
    }

    pub fn max_reduce(&self, a: &Tensor, axes: &[usize], keepdims: bool) -> Result<Tensor> {
        self.reduce(ReduceKind::Max, a, axes, keepdims)
    }

    /// Sum over all axes down to a scalar.
    pub fn sum_all(&self, a: &Tensor) -> Result<Tensor> {
        self.reduce(ReduceKind::Sum, a, &[], false)
    }

    // ---- softmax -------------------------------------------------------------

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= a.rank() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: a.rank(),
            });
        }
        let shape = a.shape().to_vec();
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let data = a.data();
        let mut value = vec![0.0; data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..lane {
                    max = max.max(data[base + l * inner]);
                }
                let mut sum = 0.0;
                for l in 0..lane {
                    let e = (data[base + l * inner] - max).exp();
                    value[base + l * inner] = e;
                    sum += e;
                }
                let inv = 1.0 / sum;
                for l in 0..lane {
                    value[base + l * inner] *= inv;
                }
            }
        }
        drop(data);
        self.finish(Op::Softmax { axis }, "softmax", &[a], shape, value)
    }

    // ---- rearrangement -------------------------------------------------------

    pub fn reshape(&self, a: &Tensor, new_shape: Vec<usize>) -> Result<Tensor> {
        let new_numel: usize = new_shape.iter().product();
        if new_numel != a.numel() || new_shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch(format!(
                "reshape {:?} -> {:?}",
                a.shape(),
                new_shape
            )));
        }
        let value = a.to_vec();
        self.finish(Op::Reshape, "reshape", &[a], new_shape, value)
    }

    pub fn transpose(&self, a: &Tensor, perm: &[usize]) -> Result<Tensor> {
        let rank = a.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidPermutation(perm.to_vec()));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| a.shape()[p]).collect();
        let value = permute_values(&a.data(), a.shape(), perm, &out_shape);
        self.finish(
            Op::Transpose {
                perm: perm.to_vec(),
            },
            "transpose",
            &[a],
            out_shape,
            value,
        )
    }

    // ---- backward --------------------------------------------------------------

    /// Populates the gradient of every `requires_grad` leaf reachable from
    /// `loss`. Consumes the tape: a second call fails with `TapeConsumed`.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let loss_id = match loss.binding() {
            Some((tape_id, node_id)) if tape_id == self.id => node_id,
            _ => return Err(Error::LossNotOnTape),
        };
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        self.consumed.set(true);

        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss_id] = Some(vec![1.0]);
        for id in (0..=loss_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf(t) = &node.op {
                if t.requires_grad() {
                    t.accumulate_grad(&g);
                }
                continue;
            }
            backprop(node, &g, &nodes, &mut grads);
        }
        Ok(())
    }
}

// ---- value helpers -------------------------------------------------------

fn binary_values(kind: BinaryKind, a: &Tensor, b: &Tensor, out_shape: &[usize]) -> Vec<f64> {
    let ad = a.data();
    let bd = b.data();
    let apply = |x: f64, y: f64| match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
    };
    if a.shape() == b.shape() {
        ad.iter().zip(bd.iter()).map(|(&x, &y)| apply(x, y)).collect()
    } else {
        let sa = broadcast_strides(a.shape(), out_shape);
        let sb = broadcast_strides(b.shape(), out_shape);
        PairWalker::new(out_shape, sa, sb)
            .map(|(ia, ib)| apply(ad[ia], bd[ib]))
            .collect()
    }
}

fn unary_value(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Relu => x.max(0.0),
        UnaryKind::Softplus => softplus(x),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Log => x.ln(),
        UnaryKind::Sqrt => x.sqrt(),
        UnaryKind::Neg => -x,
    }
}

/// Overflow-safe ln(1 + e^x).
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn permute_values(data: &[f64], shape: &[usize], perm: &[usize], out_shape: &[usize]) -> Vec<f64> {
    let in_strides = strides_for(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let out_strides = strides_for(out_shape);
    PairWalker::new(out_shape, out_strides, src_strides)
        .map(|(_, is)| data[is])
        .collect()
}

/// g (laid out as `out_shape`) times `other` broadcast up to `out_shape`.
fn mul_against(g: &[f64], out_shape: &[usize], other: &[f64], other_shape: &[usize]) -> Vec<f64> {
    if other_shape == out_shape {
        g.iter().zip(other).map(|(&gv, &ov)| gv * ov).collect()
    } else {
        let so = broadcast_strides(other_shape, out_shape);
        let sn = strides_for(out_shape);
        PairWalker::new(out_shape, sn, so)
            .map(|(ig, io)| g[ig] * other[io])
            .collect()
    }
}

/// Sums `values` (laid out as `out_shape`) down to `target_shape`, reversing
/// broadcast expansion.
fn unbroadcast(values: &[f64], out_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if out_shape == target_shape {
        return values.to_vec();
    }
    let numel: usize = target_shape.iter().product();
    let mut acc = vec![0.0; numel];
    let st = broadcast_strides(target_shape, out_shape);
    let sn = strides_for(out_shape);
    for (ii, it) in PairWalker::new(out_shape, sn, st) {
        acc[it] += values[ii];
    }
    acc
}

// ---- backward dispatch -----------------------------------------------------

fn give(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: Vec<f64>) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn backprop(node: &Node, g: &[f64], nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf(_) => unreachable!("leaves handled by the caller"),
        Op::Binary(kind) => {
            let (ia, ib) = (node.inputs[0], node.inputs[1]);
            let (a, b) = (&nodes[ia], &nodes[ib]);
            match kind {
                BinaryKind::Add => {
                    if a.needs_grad {
                        give(grads, nodes, ia, unbroadcast(g, &node.shape, &a.shape));
                    }
                    if b.needs_grad {
                        give(grads, nodes, ib, unbroadcast(g, &node.shape, &b.shape));
                    }
                }
                BinaryKind::Sub => {
                    if a.needs_grad {
                        give(grads, nodes, ia, unbroadcast(g, &node.shape, &a.shape));
                    }
                    if b.needs_grad {
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        give(grads, nodes, ib, unbroadcast(&neg, &node.shape, &b.shape));
                    }
                }
                BinaryKind::Mul => {
                    if a.needs_grad {
                        let prod = mul_against(g, &node.shape, &b.value, &b.shape);
                        give(grads, nodes, ia, unbroadcast(&prod, &node.shape, &a.shape));
                    }
                    if b.needs_grad {
                        let prod = mul_against(g, &node.shape, &a.value, &a.shape);
                        give(grads, nodes, ib, unbroadcast(&prod, &node.shape, &b.shape));
                    }
                }
            }
        }
        Op::Unary(kind) => {
            let ia = node.inputs[0];
            let x = &nodes[ia].value;
            let y = &node.value;
            let gx: Vec<f64> = match kind {
                UnaryKind::Relu => g
                    .iter()
                    .zip(x.iter())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect(),
                UnaryKind::Softplus => g
                    .iter()
                    .zip(x.iter())
                    .map(|(&gv, &xv)| gv * sigmoid(xv))
                    .collect(),
                UnaryKind::Exp => g.iter().zip(y.iter()).map(|(&gv, &yv)| gv * yv).collect(),
                UnaryKind::Log => g.iter().zip(x.iter()).map(|(&gv, &xv)| gv / xv).collect(),
                UnaryKind::Sqrt => g
                    .iter()
                    .zip(y.iter())
                    .map(|(&gv, &yv)| gv / (2.0 * yv))
                    .collect(),
                UnaryKind::Neg => g.iter().map(|&gv| -gv).collect(),
            };
            give(grads, nodes, ia, gx);
        }
        Op::Matmul => {
            let (ia, ib) = (node.inputs[0], node.inputs[1]);
            let (a, b) = (&nodes[ia], &nodes[ib]);
            let (batches, m, k, n) = match (a.shape.as_slice(), b.shape.as_slice()) {
                ([m, k], [_, n]) => (1usize, *m, *k, *n),
                ([bt, m, k], [_, _, n]) => (*bt, *m, *k, *n),
                _ => unreachable!(),
            };
            if a.needs_grad {
                let mut ga = vec![0.0; a.value.len()];
                for s in 0..batches {
                    matmul_nt(
                        &g[s * m * n..(s + 1) * m * n],
                        &b.value[s * k * n..(s + 1) * k * n],
                        m,
                        n,
                        k,
                        &mut ga[s * m * k..(s + 1) * m * k],
                    );
                }
                give(grads, nodes, ia, ga);
            }
            if b.needs_grad {
                let mut gb = vec![0.0; b.value.len()];
                for s in 0..batches {
                    matmul_tn(
                        &a.value[s * m * k..(s + 1) * m * k],
                        &g[s * m * n..(s + 1) * m * n],
                        k,
                        m,
                        n,
                        &mut gb[s * k * n..(s + 1) * k * n],
                    );
                }
                give(grads, nodes, ib, gb);
            }
        }
        Op::Conv2d { stride, padding } => {
            let (ii, ik) = (node.inputs[0], node.inputs[1]);
            let (input, kernel) = (&nodes[ii], &nodes[ik]);
            let [n, c, h, w] = input.shape[..] else { unreachable!() };
            let [co, _, kh, kw] = kernel.shape[..] else { unreachable!() };
            let oh = conv_out_extent(h, kh, *stride, *padding);
            let ow = conv_out_extent(w, kw, *stride, *padding);
            let ckk = c * kh * kw;
            let mut cols = vec![0.0; ckk * oh * ow];
            let mut gk = if kernel.needs_grad {
                Some(vec![0.0; kernel.value.len()])
            } else {
                None
            };
            let mut gi = if input.needs_grad {
                Some(vec![0.0; input.value.len()])
            } else {
                None
            };
            let mut cols_grad = vec![0.0; ckk * oh * ow];
            for s in 0..n {
                let g_s = &g[s * co * oh * ow..(s + 1) * co * oh * ow];
                if let Some(gk) = gk.as_mut() {
                    im2col(
                        &input.value[s * c * h * w..(s + 1) * c * h * w],
                        c,
                        h,
                        w,
                        kh,
                        kw,
                        *stride,
                        *padding,
                        &mut cols,
                    );
                    matmul_nt(g_s, &cols, co, oh * ow, ckk, gk);
                }
                if let Some(gi) = gi.as_mut() {
                    cols_grad.fill(0.0);
                    matmul_tn(&kernel.value, g_s, ckk, co, oh * ow, &mut cols_grad);
                    col2im_add(
                        &cols_grad,
                        c,
                        h,
                        w,
                        kh,
                        kw,
                        *stride,
                        *padding,
                        &mut gi[s * c * h * w..(s + 1) * c * h * w],
                    );
                }
            }
            if let Some(gk) = gk {
                give(grads, nodes, ik, gk);
            }
            if let Some(gi) = gi {
                give(grads, nodes, ii, gi);
            }
        }
        Op::Reduce { kind, axes, argmax } => {
            let ia = node.inputs[0];
            let in_shape = &nodes[ia].shape;
            let mut gx = vec![0.0; nodes[ia].value.len()];
            match kind {
                ReduceKind::Max => {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                }
                ReduceKind::Sum | ReduceKind::Mean => {
                    let kept_shape: Vec<usize> = (0..in_shape.len())
                        .map(|d| if axes.contains(&d) { 1 } else { in_shape[d] })
                        .collect();
                    let count: usize = axes.iter().map(|&d| in_shape[d]).product();
                    let scale = if *kind == ReduceKind::Mean {
                        1.0 / count as f64
                    } else {
                        1.0
                    };
                    let out_strides = broadcast_strides(&kept_shape, in_shape);
                    let in_strides = strides_for(in_shape);
                    for (ii2, io) in PairWalker::new(in_shape, in_strides, out_strides) {
                        gx[ii2] = g[io] * scale;
                    }
                }
            }
            give(grads, nodes, ia, gx);
        }
        Op::Softmax { axis } => {
            let ia = node.inputs[0];
            let y = &node.value;
            let shape = &node.shape;
            let lane = shape[*axis];
            let inner: usize = shape[*axis + 1..].iter().product();
            let outer: usize = shape[..*axis].iter().product();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * lane * inner + i;
                    let mut dot = 0.0;
                    for l in 0..lane {
                        let p = base + l * inner;
                        dot += g[p] * y[p];
                    }
                    for l in 0..lane {
                        let p = base + l * inner;
                        gx[p] = y[p] * (g[p] - dot);
                    }
                }
            }
            give(grads, nodes, ia, gx);
        }
        Op::Reshape => {
            give(grads, nodes, node.inputs[0], g.to_vec());
        }
        Op::Transpose { perm } => {
            let ia = node.inputs[0];
            let mut inv = vec![0usize; perm.len()];
            for (d, &p) in perm.iter().enumerate() {
                inv[p] = d;
            }
            let gx = permute_values(g, &node.shape, &inv, &nodes[ia].shape);
            give(grads, nodes, ia, gx);
        }
    }
}
