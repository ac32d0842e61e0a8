//! Reverse-mode automatic differentiation on a tape.
//!
//! A [`Tape`] records every operation as a node holding the forward value and
//! the indices of its parents. Handles ([`Var`]) are copyable indices tied to
//! the tape's lifetime. Calling [`Tape::backward`] on a scalar replays the
//! node list in reverse exactly once, accumulating gradients into every node
//! that (transitively) depends on a gradient-requiring leaf.
//!
//! Two invariants are enforced on every operation:
//! * shapes must match the operation's contract (violations panic, like
//!   out-of-bounds indexing), and
//! * the output must be finite everywhere; a NaN or infinity panics
//!   immediately naming the operation, so numerical blowups surface at their
//!   source instead of propagating.

use std::cell::{Cell, Ref, RefCell};

use crate::error::TapeError;
use crate::kernels;
use crate::tensor::Tensor;

const LOG_GUARD: &str = "log requires strictly positive inputs";

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Matmul(usize, usize),
    Linear { x: usize, w: usize, b: usize },
    Concat { a: usize, b: usize, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    SumAll(usize),
    MeanAll(usize),
    RowSum(usize),
    ScaleRows { x: usize, s: usize },
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Abs(usize),
    Recip(usize),
    Tanh(usize),
    Sigmoid(usize),
    LeakyRelu(usize, f64),
    Clamp { a: usize, lo: f64, hi: f64 },
    MinScalar(usize, f64),
    NormalizeRows(usize),
    SoftmaxXent { logits: usize, labels: Vec<usize> },
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Records operations for one forward pass; consumed by `backward`.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a tensor on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Per-node gradients produced by one reverse pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if the reverse pass
    /// never reached it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match &self.grads[v.id] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&v.shape()),
        }
    }

    /// Borrowed gradient, `None` when the node was unreached.
    pub fn wrt_ref(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads[v.id].as_ref()
    }
}

fn check_finite(op: &str, data: &[f64]) {
    assert!(
        data.iter().all(|v| v.is_finite()),
        "operation `{op}` produced non-finite values"
    );
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, value: Tensor, needs_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that participates in gradient computation.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        check_finite("param", value.data());
        self.push(value, true, Op::Leaf)
    }

    /// Leaf treated as a constant: gradients stop here.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        check_finite("constant", value.data());
        self.push(value, false, Op::Leaf)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn values(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    /// Reverse pass from a finite scalar loss. Each tape supports exactly one
    /// reverse pass; a second call reports the tape as consumed.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TapeError> {
        assert!(std::ptr::eq(loss.tape, self), "loss from a different tape");
        if self.consumed.get() {
            return Err(TapeError::Consumed);
        }
        self.consumed.set(true);

        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(TapeError::NonScalarLoss(
                nodes[loss.id].value.shape().to_vec(),
            ));
        }
        let loss_value = nodes[loss.id].value.item();
        if !loss_value.is_finite() {
            return Err(TapeError::NonFiniteLoss(loss_value));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.id].needs_grad {
            grads[loss.id] = Some(vec![1.0]);
        }

        for id in (0..=loss.id).rev() {
            if grads[id].is_none() {
                continue;
            }
            // Split the borrow: take the upstream gradient out, accumulate
            // into parents, then put it back for the caller.
            let g = grads[id].take().unwrap();
            self.accumulate(&nodes, &mut grads, id, &g);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| g.map(|data| Tensor::new(nodes[id].value.shape(), data)))
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
        let needs = |p: usize| nodes[p].needs_grad;
        macro_rules! grad_buf {
            ($p:expr) => {
                grads[$p].get_or_insert_with(|| vec![0.0; nodes[$p].value.numel()])
            };
        }
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    kernels::axpy(grad_buf!(*a), 1.0, g);
                }
                if needs(*b) {
                    kernels::axpy(grad_buf!(*b), 1.0, g);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    kernels::axpy(grad_buf!(*a), 1.0, g);
                }
                if needs(*b) {
                    kernels::axpy(grad_buf!(*b), -1.0, g);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = nodes[*b].value.data();
                    let buf = grad_buf!(*a);
                    for i in 0..g.len() {
                        buf[i] += g[i] * bv[i];
                    }
                }
                if needs(*b) {
                    let av = nodes[*a].value.data();
                    let buf = grad_buf!(*b);
                    for i in 0..g.len() {
                        buf[i] += g[i] * av[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let bv = nodes[*b].value.data();
                if needs(*a) {
                    let buf = grad_buf!(*a);
                    for i in 0..g.len() {
                        buf[i] += g[i] / bv[i];
                    }
                }
                if needs(*b) {
                    let y = nodes[id].value.data();
                    let buf = grad_buf!(*b);
                    for i in 0..g.len() {
                        buf[i] -= g[i] * y[i] / bv[i];
                    }
                }
            }
            Op::AddScalar(a) => {
                if needs(*a) {
                    kernels::axpy(grad_buf!(*a), 1.0, g);
                }
            }
            Op::MulScalar(a, c) => {
                if needs(*a) {
                    kernels::axpy(grad_buf!(*a), *c, g);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = dims2(nodes[*a].value.shape());
                let n = nodes[*b].value.shape()[1];
                if needs(*a) {
                    let bv = nodes[*b].value.data();
                    let da = grad_buf!(*a);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            da[i * k + p] += kernels::dot(grow, &bv[p * n..(p + 1) * n]);
                        }
                    }
                }
                if needs(*b) {
                    let av = nodes[*a].value.data();
                    let db = grad_buf!(*b);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            kernels::axpy(&mut db[p * n..(p + 1) * n], av[i * k + p], grow);
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = dims2(nodes[*x].value.shape());
                let n = nodes[*w].value.shape()[0];
                if needs(*x) {
                    let wv = nodes[*w].value.data();
                    kernels::linear_backward_input(grad_buf!(*x), g, wv, m, k, n);
                }
                if needs(*w) || needs(*b) {
                    let xv = nodes[*x].value.data();
                    // The bias buffer is created even if only the weight needs
                    // gradient; both always require gradients together here.
                    let mut db_local = vec![0.0; n];
                    {
                        let dw = grad_buf!(*w);
                        kernels::linear_backward_params(dw, &mut db_local, g, xv, m, k, n);
                    }
                    kernels::axpy(grad_buf!(*b), 1.0, &db_local);
                }
            }
            Op::Concat { a, b, axis } => {
                let ashape = nodes[*a].value.shape().to_vec();
                let bshape = nodes[*b].value.shape().to_vec();
                if *axis == 0 || ashape.len() == 1 {
                    let na = nodes[*a].value.numel();
                    if needs(*a) {
                        kernels::axpy(grad_buf!(*a), 1.0, &g[..na]);
                    }
                    if needs(*b) {
                        kernels::axpy(grad_buf!(*b), 1.0, &g[na..]);
                    }
                } else {
                    let rows = ashape[0];
                    let (ca, cb) = (ashape[1], bshape[1]);
                    let cout = ca + cb;
                    if needs(*a) {
                        let da = grad_buf!(*a);
                        for i in 0..rows {
                            kernels::axpy(
                                &mut da[i * ca..(i + 1) * ca],
                                1.0,
                                &g[i * cout..i * cout + ca],
                            );
                        }
                    }
                    if needs(*b) {
                        let db = grad_buf!(*b);
                        for i in 0..rows {
                            kernels::axpy(
                                &mut db[i * cb..(i + 1) * cb],
                                1.0,
                                &g[i * cout + ca..(i + 1) * cout],
                            );
                        }
                    }
                }
            }
            Op::Slice { a, axis, start } => {
                if !needs(*a) {
                    return;
                }
                let ashape = nodes[*a].value.shape().to_vec();
                let oshape = nodes[id].value.shape().to_vec();
                let da = grad_buf!(*a);
                if *axis == 0 || ashape.len() == 1 {
                    let row = if ashape.len() == 1 { 1 } else { ashape[1] };
                    let off = start * row;
                    kernels::axpy(&mut da[off..off + g.len()], 1.0, g);
                } else {
                    let (rows, ca) = (ashape[0], ashape[1]);
                    let len = oshape[1];
                    for i in 0..rows {
                        kernels::axpy(
                            &mut da[i * ca + start..i * ca + start + len],
                            1.0,
                            &g[i * len..(i + 1) * len],
                        );
                    }
                }
            }
            Op::SumAll(a) => {
                if needs(*a) {
                    let buf = grad_buf!(*a);
                    for v in buf.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::MeanAll(a) => {
                if needs(*a) {
                    let n = nodes[*a].value.numel() as f64;
                    let buf = grad_buf!(*a);
                    let gg = g[0] / n;
                    for v in buf.iter_mut() {
                        *v += gg;
                    }
                }
            }
            Op::RowSum(a) => {
                if needs(*a) {
                    let (rows, cols) = dims2(nodes[*a].value.shape());
                    let buf = grad_buf!(*a);
                    for i in 0..rows {
                        let gi = g[i];
                        for v in buf[i * cols..(i + 1) * cols].iter_mut() {
                            *v += gi;
                        }
                    }
                }
            }
            Op::ScaleRows { x, s } => {
                let (rows, cols) = dims2(nodes[*x].value.shape());
                if needs(*x) {
                    let sv = nodes[*s].value.data();
                    let dx = grad_buf!(*x);
                    for i in 0..rows {
                        kernels::axpy(
                            &mut dx[i * cols..(i + 1) * cols],
                            sv[i],
                            &g[i * cols..(i + 1) * cols],
                        );
                    }
                }
                if needs(*s) {
                    let xv = nodes[*x].value.data();
                    let ds = grad_buf!(*s);
                    for i in 0..rows {
                        ds[i] += kernels::dot(
                            &g[i * cols..(i + 1) * cols],
                            &xv[i * cols..(i + 1) * cols],
                        );
                    }
                }
            }
            Op::Exp(a) => {
                if needs(*a) {
                    let y = nodes[id].value.data();
                    let buf = grad_buf!(*a);
                    for i in 0..g.len() {
                        buf[i] += g[i] * y[i];
                    }
                }
            }
            Op::Log(a) => {
                if needs(*a) {
                    let x = nodes[*a].value.data();
                    let buf = grad_buf!(*a);
                    for i in 0..g.len() {
                        buf[i] += g[i] / x[i];
                    }
                }
            }
            Op::Sqrt(a) => {
                if needs(*a) {
                    let y = nodes[id].value.data();
                    let buf = grad_buf!(*a);
                    for i in 0..g.len() {
                        buf[i] += g[i] * 0.5 / y[i];
                    }
                }
            }
            Op::Square(a) => {
                if needs(*a) {
                    let x = nodes[*a].value.data();
                    let buf = grad_buf!(*a);
                    for i in 0..g.len() {
                        buf[i] += g[i] * 2.0 * x[i];
                    }
                }
            }
            Op::Abs(a) => {
                if needs(*a) {
                    let x = nodes[*a].value.data();
                    let buf = grad_buf!(*a);
                    for i in 0..g.len() {
                        buf[i] += g[i] * sign(x[i]);
                    }
                }
            }
            Op::Recip(a) => {
                if needs(*a) {
                    let y = nodes[id].value.data();
                    let buf = grad_buf!(*a);
                    for i in 0..g.len() {
                        buf[i] -= g[i] * y[i] * y[i];
                    }
                }
            }
            Op::Tanh(a) => {
                if needs(*a) {
                    let y = nodes[id].value.data();
                    let buf = grad_buf!(*a);
                    for i in 0..g.len() {
                        buf[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if needs(*a) {
                    let y = nodes[id].value.data();
                    let buf = grad_buf!(*a);
                    for i in 0..g.len() {
                        buf[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                if needs(*a) {
                    let x = nodes[*a].value.data();
                    let buf = grad_buf!(*a);
                    for i in 0..g.len() {
                        buf[i] += g[i] * if x[i] > 0.0 { 1.0 } else { *slope };
                    }
                }
            }
            Op::Clamp { a, lo, hi } => {
                if needs(*a) {
                    let x = nodes[*a].value.data();
                    let buf = grad_buf!(*a);
                    for i in 0..g.len() {
                        if x[i] >= *lo && x[i] <= *hi {
                            buf[i] += g[i];
                        }
                    }
                }
            }
            Op::MinScalar(a, c) => {
                if needs(*a) {
                    let x = nodes[*a].value.data();
                    let buf = grad_buf!(*a);
                    for i in 0..g.len() {
                        if x[i] <= *c {
                            buf[i] += g[i];
                        }
                    }
                }
            }
            Op::NormalizeRows(a) => {
                if needs(*a) {
                    let x = nodes[*a].value.data();
                    let y = nodes[id].value.data();
                    let (rows, cols) = dims2(nodes[*a].value.shape());
                    let buf = grad_buf!(*a);
                    for i in 0..rows {
                        let xr = &x[i * cols..(i + 1) * cols];
                        let yr = &y[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let norm = kernels::dot(xr, xr).sqrt().max(NORM_EPS);
                        let gy = kernels::dot(gr, yr);
                        let out = &mut buf[i * cols..(i + 1) * cols];
                        for j in 0..cols {
                            out[j] += (gr[j] - gy * yr[j]) / norm;
                        }
                    }
                }
            }
            Op::SoftmaxXent { logits, labels } => {
                if needs(*logits) {
                    let lv = nodes[*logits].value.data();
                    let (rows, cols) = dims2(nodes[*logits].value.shape());
                    let buf = grad_buf!(*logits);
                    let scale = g[0] / rows as f64;
                    let mut probs = vec![0.0; cols];
                    for i in 0..rows {
                        softmax_row(&lv[i * cols..(i + 1) * cols], &mut probs);
                        let out = &mut buf[i * cols..(i + 1) * cols];
                        for c in 0..cols {
                            let indicator = if c == labels[i] { 1.0 } else { 0.0 };
                            out[c] += scale * (probs[c] - indicator);
                        }
                    }
                }
            }
        }
    }
}

const NORM_EPS: f64 = 1e-12;

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "expected rank-2 tensor, got {shape:?}");
    (shape[0], shape[1])
}

fn softmax_row(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.values()[self.id].value.shape().to_vec()
    }

    /// Clone of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.values()[self.id].value.clone()
    }

    /// Zero-copy read of the forward value.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.values()[self.id].value)
    }

    /// Scalar extraction; panics unless the value holds one element.
    pub fn item(&self) -> f64 {
        self.with_value(|t| t.item())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.values()[self.id].needs_grad
    }

    fn assert_same_tape(&self, other: Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands live on different tapes"
        );
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Var<'t> {
        self.assert_same_tape(other);
        let (data, shape, needs) = {
            let nodes = self.tape.values();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            assert_eq!(
                a.value.shape(),
                b.value.shape(),
                "`{name}` needs matching shapes"
            );
            let data: Vec<f64> = a
                .value
                .data()
                .iter()
                .zip(b.value.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            (data, a.value.shape().to_vec(), a.needs_grad || b.needs_grad)
        };
        check_finite(name, &data);
        self.tape
            .push(Tensor::new(&shape, data), needs, op(self.id, other.id))
    }

    fn unary(
        self,
        name: &str,
        f: impl Fn(f64) -> f64,
        op: impl Fn(usize) -> Op,
    ) -> Var<'t> {
        let (data, shape, needs) = {
            let nodes = self.tape.values();
            let a = &nodes[self.id];
            let data: Vec<f64> = a.value.data().iter().map(|&x| f(x)).collect();
            (data, a.value.shape().to_vec(), a.needs_grad)
        };
        check_finite(name, &data);
        self.tape.push(Tensor::new(&shape, data), needs, op(self.id))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        // Recorded as AddScalar; the constant itself needs no node.
        self.unary("add_scalar", |x| x + c, Op::AddScalar)
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t> {
        self.unary("mul_scalar", |x| x * c, |a| Op::MulScalar(a, c))
    }

    /// Elementwise product (Hadamard).
    pub fn hadamard(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.assert_same_tape(other);
        let (data, shape, needs) = {
            let nodes = self.tape.values();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (m, k) = dims2(a.value.shape());
            let (kb, n) = dims2(b.value.shape());
            assert_eq!(k, kb, "matmul inner dims: {k} vs {kb}");
            let mut data = vec![0.0; m * n];
            kernels::matmul_acc(&mut data, a.value.data(), b.value.data(), m, k, n);
            (data, vec![m, n], a.needs_grad || b.needs_grad)
        };
        check_finite("matmul", &data);
        self.tape
            .push(Tensor::new(&shape, data), needs, Op::Matmul(self.id, other.id))
    }

    /// Affine map `self @ w^T + b` with `w: [out, in]`, `b: [out]`.
    pub fn linear(self, w: Var<'t>, b: Var<'t>) -> Var<'t> {
        self.assert_same_tape(w);
        self.assert_same_tape(b);
        let (data, shape, needs) = {
            let nodes = self.tape.values();
            let (x, wn, bn) = (&nodes[self.id], &nodes[w.id], &nodes[b.id]);
            let (m, k) = dims2(x.value.shape());
            let (n, kw) = dims2(wn.value.shape());
            assert_eq!(k, kw, "linear: input dim {k} vs weight fan-in {kw}");
            assert_eq!(bn.value.numel(), n, "linear: bias length");
            let mut data = vec![0.0; m * n];
            kernels::linear_forward(
                &mut data,
                x.value.data(),
                wn.value.data(),
                bn.value.data(),
                m,
                k,
                n,
            );
            (
                data,
                vec![m, n],
                x.needs_grad || wn.needs_grad || bn.needs_grad,
            )
        };
        check_finite("linear", &data);
        self.tape.push(
            Tensor::new(&shape, data),
            needs,
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.id,
            },
        )
    }

    /// Concatenation along `axis` (0 stacks, 1 appends columns).
    pub fn concat(self, other: Var<'t>, axis: usize) -> Var<'t> {
        self.assert_same_tape(other);
        let (data, shape, needs) = {
            let nodes = self.tape.values();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (ash, bsh) = (a.value.shape(), b.value.shape());
            assert_eq!(ash.len(), bsh.len(), "concat rank mismatch");
            assert!(axis < ash.len().max(1), "concat axis {axis} out of range");
            let (data, shape) = if ash.len() == 1 {
                let mut d = a.value.data().to_vec();
                d.extend_from_slice(b.value.data());
                let len = d.len();
                (d, vec![len])
            } else if axis == 0 {
                assert_eq!(ash[1], bsh[1], "concat axis 0 needs equal column counts");
                let mut d = a.value.data().to_vec();
                d.extend_from_slice(b.value.data());
                (d, vec![ash[0] + bsh[0], ash[1]])
            } else {
                assert_eq!(ash[0], bsh[0], "concat axis 1 needs equal row counts");
                let (rows, ca, cb) = (ash[0], ash[1], bsh[1]);
                let mut d = vec![0.0; rows * (ca + cb)];
                for i in 0..rows {
                    d[i * (ca + cb)..i * (ca + cb) + ca].copy_from_slice(a.value.row(i));
                    d[i * (ca + cb) + ca..(i + 1) * (ca + cb)].copy_from_slice(b.value.row(i));
                }
                (d, vec![rows, ca + cb])
            };
            (data, shape, a.needs_grad || b.needs_grad)
        };
        self.tape.push(
            Tensor::new(&shape, data),
            needs,
            Op::Concat {
                a: self.id,
                b: other.id,
                axis,
            },
        )
    }

    /// Contiguous slice of length `len` starting at `start` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let (data, shape, needs) = {
            let nodes = self.tape.values();
            let a = &nodes[self.id];
            let ash = a.value.shape();
            let (data, shape) = if ash.len() == 1 {
                assert!(start + len <= ash[0], "slice out of range");
                (a.value.data()[start..start + len].to_vec(), vec![len])
            } else if axis == 0 {
                assert!(start + len <= ash[0], "slice out of range");
                let cols = ash[1];
                (
                    a.value.data()[start * cols..(start + len) * cols].to_vec(),
                    vec![len, cols],
                )
            } else {
                assert_eq!(ash.len(), 2, "slice axis 1 needs rank 2");
                assert!(start + len <= ash[1], "slice out of range");
                let rows = ash[0];
                let mut d = Vec::with_capacity(rows * len);
                for i in 0..rows {
                    d.extend_from_slice(&a.value.row(i)[start..start + len]);
                }
                (d, vec![rows, len])
            };
            (data, shape, a.needs_grad)
        };
        self.tape.push(
            Tensor::new(&shape, data),
            needs,
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
        )
    }

    pub fn sum_all(self) -> Var<'t> {
        let (v, needs) = {
            let nodes = self.tape.values();
            (kernels::sum(nodes[self.id].value.data()), nodes[self.id].needs_grad)
        };
        check_finite("sum_all", &[v]);
        self.tape
            .push(Tensor::scalar(v), needs, Op::SumAll(self.id))
    }

    pub fn mean_all(self) -> Var<'t> {
        let (v, needs) = {
            let nodes = self.tape.values();
            let t = &nodes[self.id].value;
            assert!(t.numel() > 0, "mean of an empty tensor");
            (
                kernels::sum(t.data()) / t.numel() as f64,
                nodes[self.id].needs_grad,
            )
        };
        check_finite("mean_all", &[v]);
        self.tape
            .push(Tensor::scalar(v), needs, Op::MeanAll(self.id))
    }

    /// Per-row sum of a rank-2 tensor: `[rows, cols] -> [rows]`.
    pub fn row_sum(self) -> Var<'t> {
        let (data, needs) = {
            let nodes = self.tape.values();
            let t = &nodes[self.id].value;
            let (rows, _) = dims2(t.shape());
            let data: Vec<f64> = (0..rows).map(|i| kernels::sum(t.row(i))).collect();
            (data, nodes[self.id].needs_grad)
        };
        check_finite("row_sum", &data);
        self.tape
            .push(Tensor::vector(data), needs, Op::RowSum(self.id))
    }

    /// Multiply each row of `self` by the matching entry of the vector `s`.
    pub fn scale_rows(self, s: Var<'t>) -> Var<'t> {
        self.assert_same_tape(s);
        let (data, shape, needs) = {
            let nodes = self.tape.values();
            let (x, sv) = (&nodes[self.id], &nodes[s.id]);
            let (rows, cols) = dims2(x.value.shape());
            assert_eq!(sv.value.numel(), rows, "scale_rows: vector length");
            let sd = sv.value.data();
            let mut data = vec![0.0; rows * cols];
            for i in 0..rows {
                let xr = x.value.row(i);
                for j in 0..cols {
                    data[i * cols + j] = xr[j] * sd[i];
                }
            }
            (data, vec![rows, cols], x.needs_grad || sv.needs_grad)
        };
        check_finite("scale_rows", &data);
        self.tape.push(
            Tensor::new(&shape, data),
            needs,
            Op::ScaleRows {
                x: self.id,
                s: s.id,
            },
        )
    }

    pub fn exp(self) -> Var<'t> {
        self.unary("exp", f64::exp, Op::Exp)
    }

    pub fn log(self) -> Var<'t> {
        self.unary("log", |x| {
            assert!(x > 0.0, "{LOG_GUARD}");
            x.ln()
        }, Op::Log)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary("sqrt", |x| {
            assert!(x >= 0.0, "sqrt of a negative value");
            x.sqrt()
        }, Op::Sqrt)
    }

    pub fn square(self) -> Var<'t> {
        self.unary("square", |x| x * x, Op::Square)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary("abs", f64::abs, Op::Abs)
    }

    pub fn recip(self) -> Var<'t> {
        self.unary("recip", |x| 1.0 / x, Op::Recip)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary("tanh", f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary("sigmoid", |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(
            "leaky_relu",
            |x| if x > 0.0 { x } else { slope * x },
            |a| Op::LeakyRelu(a, slope),
        )
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        assert!(lo <= hi, "clamp bounds out of order");
        self.unary("clamp", |x| x.clamp(lo, hi), |a| Op::Clamp { a, lo, hi })
    }

    /// Elementwise `min(self, c)`.
    pub fn min_scalar(self, c: f64) -> Var<'t> {
        self.unary("min_scalar", |x| x.min(c), |a| Op::MinScalar(a, c))
    }

    /// Rows rescaled to unit Euclidean norm.
    pub fn normalize_rows(self) -> Var<'t> {
        let (data, shape, needs) = {
            let nodes = self.tape.values();
            let t = &nodes[self.id].value;
            let (rows, cols) = dims2(t.shape());
            let mut data = vec![0.0; rows * cols];
            for i in 0..rows {
                let xr = t.row(i);
                let norm = kernels::dot(xr, xr).sqrt().max(NORM_EPS);
                for j in 0..cols {
                    data[i * cols + j] = xr[j] / norm;
                }
            }
            (data, vec![rows, cols], nodes[self.id].needs_grad)
        };
        check_finite("normalize_rows", &data);
        self.tape
            .push(Tensor::new(&shape, data), needs, Op::NormalizeRows(self.id))
    }

    /// Fused softmax plus cross-entropy, averaged over rows.
    pub fn softmax_xent(self, labels: &[usize]) -> Var<'t> {
        let (v, needs) = {
            let nodes = self.tape.values();
            let t = &nodes[self.id].value;
            let (rows, cols) = dims2(t.shape());
            assert_eq!(labels.len(), rows, "one label per row");
            assert!(
                labels.iter().all(|&l| l < cols),
                "label out of range for {cols} classes"
            );
            let mut probs = vec![0.0; cols];
            let mut total = 0.0;
            for i in 0..rows {
                softmax_row(t.row(i), &mut probs);
                total -= probs[labels[i]].max(f64::MIN_POSITIVE).ln();
            }
            (total / rows as f64, nodes[self.id].needs_grad)
        };
        check_finite("softmax_xent", &[v]);
        self.tape.push(
            Tensor::scalar(v),
            needs,
            Op::SoftmaxXent {
                logits: self.id,
                labels: labels.to_vec(),
            },
        )
    }

    /// Squared Euclidean norm of each row.
    pub fn sq_norm_rows(self) -> Var<'t> {
        self.square().row_sum()
    }

    /// Absolute-value (L1) norm of each row.
    pub fn l1_norm_rows(self) -> Var<'t> {
        self.abs().row_sum()
    }

    /// Euclidean norm of each row.
    pub fn l2_norm_rows(self) -> Var<'t> {
        self.sq_norm_rows().sqrt()
    }
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, "add", |x, y| x + y, Op::Add)
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, "sub", |x, y| x - y, Op::Sub)
    }
}

impl<'t> std::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.hadamard(rhs)
    }
}

impl<'t> std::ops::Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, "div", |x, y| x / y, Op::Div)
    }
}

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.mul_scalar(-1.0)
    }
}
