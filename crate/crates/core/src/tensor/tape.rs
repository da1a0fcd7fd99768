use std::cell::{Ref, RefCell};
use std::fmt;

use super::broadcast::Broadcast;
use super::kernels::{self, GemmDims};
use super::{Tensor, TensorError};

/// Records operations on [`Var`]s for one forward/backward pass.
///
/// A tape is single-threaded and meant to be short lived: build one per
/// sample and per optimizer step, call [`Tape::backward`], then drop it.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Binary {
        a: usize,
        b: usize,
        kind: BinKind,
        bc: Broadcast,
    },
    Affine {
        a: usize,
        mul: f64,
    },
    Abs(usize),
    Sigmoid(usize),
    Gelu(usize),
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        dims: GemmDims,
        shared_b: bool,
    },
    Sum(usize),
    Mean(usize),
    SumAxis {
        a: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    L1Last(usize),
    L2Last(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        h: usize,
        idx: Vec<usize>,
    },
    Concat {
        a: usize,
        b: usize,
        da: usize,
        db: usize,
    },
    Slice {
        a: usize,
        start: usize,
        len: usize,
        width: usize,
    },
    Reshape(usize),
    Transpose {
        a: usize,
        rows: usize,
        cols: usize,
    },
    Guard {
        a: usize,
        tol: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind, .. } => match kind {
                BinKind::Add => "add",
                BinKind::Sub => "sub",
                BinKind::Mul => "mul",
                BinKind::Div => "div",
            },
            Op::Affine { .. } => "scale",
            Op::Abs(_) => "abs",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gelu(_) => "gelu",
            Op::MatMul { .. } => "matmul",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::L1Last(_) => "l1_lastdim",
            Op::L2Last(_) => "l2_lastdim",
            Op::Softmax(_) => "softmax_lastdim",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather_rows",
            Op::Concat { .. } => "concat_lastdim",
            Op::Slice { .. } => "slice_lastdim",
            Op::Reshape(_) => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::Guard { .. } => "guard",
        }
    }

    fn parents(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. }
            | Op::MatMul { a, b, .. }
            | Op::Concat { a, b, .. } => vec![a, b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Affine { a, .. }
            | Op::SumAxis { a, .. }
            | Op::Slice { a, .. }
            | Op::Transpose { a, .. }
            | Op::Guard { a, .. } => vec![a],
            Op::Gather { h, .. } => vec![h],
            Op::Abs(a)
            | Op::Sigmoid(a)
            | Op::Gelu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::L1Last(a)
            | Op::L2Last(a)
            | Op::Softmax(a)
            | Op::Reshape(a) => vec![a],
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when `var` did not
    /// influence the loss or is not a leaf.
    pub fn get(&self, var: &Var<'_>) -> Tensor {
        let shape = &self.shapes[var.id];
        match self.grads.get(var.id).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// True when the loss depends on `var`.
    pub fn reached(&self, var: &Var<'_>) -> bool {
        matches!(self.grads.get(var.id), Some(Some(_)))
    }
}

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

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
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

    fn record(&self, value: Tensor, op: Op) -> Result<Var<'_>, TensorError> {
        let parents = op.parents();
        let (requires_grad, inputs_finite) = {
            let nodes = self.nodes.borrow();
            let rg = parents.iter().any(|&p| nodes[p].requires_grad);
            let finite = value.is_finite() || !parents.iter().all(|&p| nodes[p].value.is_finite());
            (rg, finite)
        };
        if !inputs_finite {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        Ok(self.push(value, op, requires_grad))
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients, TensorError> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if loss_node.requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            propagate(&nodes, id, &g, &mut grads);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        for (g, n) in grads.iter_mut().zip(nodes.iter()) {
            if !(n.requires_grad && matches!(n.op, Op::Leaf)) {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = node.value.data();
    let needs = |p: usize| nodes[p].requires_grad;
    let val = |p: usize| nodes[p].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Binary { a, b, kind, bc } => {
            let (a, b) = (*a, *b);
            let av = val(a);
            let bv = val(b);
            if needs(a) {
                let ga = slot(grads, a, av.len());
                match kind {
                    BinKind::Add | BinKind::Sub => {
                        for (x, gi) in ga.iter_mut().zip(g) {
                            *x += gi;
                        }
                    }
                    BinKind::Mul => {
                        for i in 0..g.len() {
                            ga[i] += g[i] * bv[bc.index(i)];
                        }
                    }
                    BinKind::Div => {
                        for i in 0..g.len() {
                            ga[i] += g[i] / bv[bc.index(i)];
                        }
                    }
                }
            }
            if needs(b) {
                let gb = slot(grads, b, bv.len());
                match kind {
                    BinKind::Add => {
                        for i in 0..g.len() {
                            gb[bc.index(i)] += g[i];
                        }
                    }
                    BinKind::Sub => {
                        for i in 0..g.len() {
                            gb[bc.index(i)] -= g[i];
                        }
                    }
                    BinKind::Mul => {
                        for i in 0..g.len() {
                            gb[bc.index(i)] += g[i] * av[i];
                        }
                    }
                    BinKind::Div => {
                        for i in 0..g.len() {
                            let j = bc.index(i);
                            gb[j] -= g[i] * av[i] / (bv[j] * bv[j]);
                        }
                    }
                }
            }
        }
        Op::Affine { a, mul } => {
            let ga = slot(grads, *a, g.len());
            for (x, gi) in ga.iter_mut().zip(g) {
                *x += mul * gi;
            }
        }
        Op::Abs(a) => {
            let av = val(*a);
            let ga = slot(grads, *a, g.len());
            for i in 0..g.len() {
                ga[i] += g[i] * kernels::sign(av[i]);
            }
        }
        Op::Sigmoid(a) => {
            let ga = slot(grads, *a, g.len());
            for i in 0..g.len() {
                ga[i] += g[i] * out[i] * (1.0 - out[i]);
            }
        }
        Op::Gelu(a) => {
            let av = val(*a);
            let ga = slot(grads, *a, g.len());
            for i in 0..g.len() {
                ga[i] += g[i] * kernels::gelu_grad(av[i]);
            }
        }
        Op::MatMul {
            a,
            b,
            batch,
            dims,
            shared_b,
        } => {
            let (a, b) = (*a, *b);
            let GemmDims { m, k, n, trans_a, trans_b } = *dims;
            let (sa, sb, sc) = (m * k, k * n, m * n);
            let av = val(a);
            let bv = val(b);
            for bi in 0..*batch {
                let boff = if *shared_b { 0 } else { bi * sb };
                let gc = &g[bi * sc..(bi + 1) * sc];
                let ab = &av[bi * sa..(bi + 1) * sa];
                let bb = &bv[boff..boff + sb];
                if needs(a) {
                    let ga = &mut slot(grads, a, av.len())[bi * sa..(bi + 1) * sa];
                    let d = match (trans_a, trans_b) {
                        (false, false) => (gc, bb, GemmDims { m, k: n, n: k, trans_a: false, trans_b: true }),
                        (true, false) => (bb, gc, GemmDims { m: k, k: n, n: m, trans_a: false, trans_b: true }),
                        (false, true) => (gc, bb, GemmDims { m, k: n, n: k, trans_a: false, trans_b: false }),
                        (true, true) => (bb, gc, GemmDims { m: k, k: n, n: m, trans_a: true, trans_b: true }),
                    };
                    kernels::gemm(d.0, d.1, ga, d.2, true);
                }
                if needs(b) {
                    let gb = &mut slot(grads, b, bv.len())[boff..boff + sb];
                    let d = match (trans_a, trans_b) {
                        (false, false) => (ab, gc, GemmDims { m: k, k: m, n, trans_a: true, trans_b: false }),
                        (true, false) => (ab, gc, GemmDims { m: k, k: m, n, trans_a: false, trans_b: false }),
                        (false, true) => (gc, ab, GemmDims { m: n, k: m, n: k, trans_a: true, trans_b: false }),
                        (true, true) => (gc, ab, GemmDims { m: n, k: m, n: k, trans_a: true, trans_b: true }),
                    };
                    kernels::gemm(d.0, d.1, gb, d.2, true);
                }
            }
        }
        Op::Sum(a) => {
            let len = nodes[*a].value.numel();
            for x in slot(grads, *a, len).iter_mut() {
                *x += g[0];
            }
        }
        Op::Mean(a) => {
            let len = nodes[*a].value.numel();
            let s = g[0] / len as f64;
            for x in slot(grads, *a, len).iter_mut() {
                *x += s;
            }
        }
        Op::SumAxis { a, outer, n, inner } => {
            let ga = slot(grads, *a, outer * n * inner);
            for o in 0..*outer {
                for j in 0..*n {
                    let base = (o * n + j) * inner;
                    for i in 0..*inner {
                        ga[base + i] += g[o * inner + i];
                    }
                }
            }
        }
        Op::L1Last(a) => {
            let av = val(*a);
            let c = nodes[*a].value.last_dim();
            let ga = slot(grads, *a, av.len());
            for (r, gr) in g.iter().enumerate() {
                for j in r * c..(r + 1) * c {
                    ga[j] += gr * kernels::sign(av[j]);
                }
            }
        }
        Op::L2Last(a) => {
            let av = val(*a);
            let c = nodes[*a].value.last_dim();
            let ga = slot(grads, *a, av.len());
            for (r, gr) in g.iter().enumerate() {
                if out[r] == 0.0 {
                    continue;
                }
                for j in r * c..(r + 1) * c {
                    ga[j] += gr * av[j] / out[r];
                }
            }
        }
        Op::Softmax(a) => {
            let c = node.value.last_dim();
            let ga = slot(grads, *a, out.len());
            for r in 0..out.len() / c.max(1) {
                let ys = &out[r * c..(r + 1) * c];
                let gs = &g[r * c..(r + 1) * c];
                let dot: f64 = ys.iter().zip(gs).map(|(y, gi)| y * gi).sum();
                for j in 0..c {
                    ga[r * c + j] += ys[j] * (gs[j] - dot);
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let c = node.value.last_dim();
            let gam = val(*gamma);
            let rows = rstd.len();
            if needs(*gamma) {
                let gg = slot(grads, *gamma, c);
                for r in 0..rows {
                    for j in 0..c {
                        gg[j] += g[r * c + j] * xhat[r * c + j];
                    }
                }
            }
            if needs(*beta) {
                let gb = slot(grads, *beta, c);
                for r in 0..rows {
                    for j in 0..c {
                        gb[j] += g[r * c + j];
                    }
                }
            }
            if needs(*x) {
                let gx = slot(grads, *x, rows * c);
                let inv_c = 1.0 / c as f64;
                for r in 0..rows {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..c {
                        let d = g[r * c + j] * gam[j];
                        sum_d += d;
                        sum_dx += d * xhat[r * c + j];
                    }
                    for j in 0..c {
                        let d = g[r * c + j] * gam[j];
                        gx[r * c + j] += rstd[r] * (d - inv_c * sum_d - xhat[r * c + j] * inv_c * sum_dx);
                    }
                }
            }
        }
        Op::Gather { h, idx } => {
            let hv = &nodes[*h].value;
            let c = hv.last_dim();
            let gh = slot(grads, *h, hv.numel());
            for (slot_i, &row) in idx.iter().enumerate() {
                let src = &g[slot_i * c..(slot_i + 1) * c];
                for (dst, s) in gh[row * c..(row + 1) * c].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        Op::Concat { a, b, da, db } => {
            let w = da + db;
            let rows = g.len() / w;
            if needs(*a) {
                let ga = slot(grads, *a, rows * da);
                for r in 0..rows {
                    for j in 0..*da {
                        ga[r * da + j] += g[r * w + j];
                    }
                }
            }
            if needs(*b) {
                let gb = slot(grads, *b, rows * db);
                for r in 0..rows {
                    for j in 0..*db {
                        gb[r * db + j] += g[r * w + da + j];
                    }
                }
            }
        }
        Op::Slice {
            a,
            start,
            len,
            width,
        } => {
            let rows = g.len() / len;
            let ga = slot(grads, *a, rows * width);
            for r in 0..rows {
                for j in 0..*len {
                    ga[r * width + start + j] += g[r * len + j];
                }
            }
        }
        Op::Reshape(a) => {
            for (x, gi) in slot(grads, *a, g.len()).iter_mut().zip(g) {
                *x += gi;
            }
        }
        Op::Transpose { a, rows, cols } => {
            let ga = slot(grads, *a, g.len());
            for i in 0..*rows {
                for j in 0..*cols {
                    ga[i * cols + j] += g[j * rows + i];
                }
            }
        }
        Op::Guard { a, tol } => {
            let av = val(*a);
            let ga = slot(grads, *a, g.len());
            for i in 0..g.len() {
                if av[i].abs() >= *tol {
                    ga[i] += g[i];
                }
            }
        }
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
        self.tape.value(self.id).shape().to_vec()
    }

    /// Copy of the current value.
    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn binary(&self, other: &Var<'t>, kind: BinKind) -> Result<Var<'t>, TensorError> {
        self.same_tape(other);
        let op_name = Op::Binary {
            a: 0,
            b: 0,
            kind,
            bc: Broadcast::Same,
        }
        .name();
        let (value, bc) = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            let bc = Broadcast::new(op_name, a.shape(), b.shape())?;
            let (av, bv) = (a.data(), b.data());
            let data: Vec<f64> = match kind {
                BinKind::Add => (0..av.len()).map(|i| av[i] + bv[bc.index(i)]).collect(),
                BinKind::Sub => (0..av.len()).map(|i| av[i] - bv[bc.index(i)]).collect(),
                BinKind::Mul => (0..av.len()).map(|i| av[i] * bv[bc.index(i)]).collect(),
                BinKind::Div => (0..av.len()).map(|i| av[i] / bv[bc.index(i)]).collect(),
            };
            (Tensor::new(a.shape(), data)?, bc)
        };
        self.tape.record(
            value,
            Op::Binary {
                a: self.id,
                b: other.id,
                kind,
                bc,
            },
        )
    }

    /// Elementwise sum; `other` broadcasts into `self`.
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, BinKind::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, BinKind::Sub)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, BinKind::Mul)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, BinKind::Div)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>, TensorError> {
        let value = {
            let a = self.tape.value(self.id);
            Tensor {
                shape: a.shape().to_vec(),
                data: a.data().iter().map(|&x| f(x)).collect(),
            }
        };
        self.tape.record(value, op)
    }

    /// `mul * self + add`, with constants.
    pub fn affine(&self, mul: f64, add: f64) -> Result<Var<'t>, TensorError> {
        self.unary(Op::Affine { a: self.id, mul }, |x| mul * x + add)
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>, TensorError> {
        self.affine(c, 0.0)
    }

    pub fn neg(&self) -> Result<Var<'t>, TensorError> {
        self.affine(-1.0, 0.0)
    }

    pub fn abs(&self) -> Result<Var<'t>, TensorError> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn sigmoid(&self) -> Result<Var<'t>, TensorError> {
        self.unary(Op::Sigmoid(self.id), kernels::sigmoid)
    }

    pub fn gelu(&self) -> Result<Var<'t>, TensorError> {
        self.unary(Op::Gelu(self.id), kernels::gelu)
    }

    /// Matrix product. `[m,k]·[k,n]`, `[b,m,k]·[b,k,n]`, or `[...,k]·[k,n]`
    /// (leading axes of `self` flattened into rows).
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.matmul_t(other, false, false)
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.matmul_t(other, false, true)
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.matmul_t(other, true, false)
    }

    fn matmul_t(&self, other: &Var<'t>, trans_a: bool, trans_b: bool) -> Result<Var<'t>, TensorError> {
        self.same_tape(other);
        let (value, batch, dims, shared_b) = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            let (sa, sb) = (a.shape(), b.shape());
            let err = || TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            };
            let inner_b = |b2: &[usize]| if trans_b { (b2[1], b2[0]) } else { (b2[0], b2[1]) };
            let (batch, m, k, n, shared_b, mut out_shape) = match (sa.len(), sb.len()) {
                (3, 3) => {
                    if sa[0] != sb[0] {
                        return Err(err());
                    }
                    let (m, k) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                    let (kb, n) = inner_b(&sb[1..]);
                    if k != kb {
                        return Err(err());
                    }
                    (sa[0], m, k, n, false, vec![sa[0], m])
                }
                (ra, 2) if ra >= 2 && (!trans_a || ra == 2) => {
                    let (m, k) = if trans_a {
                        (sa[1], sa[0])
                    } else {
                        let k = sa[ra - 1];
                        (a.numel() / k.max(1), k)
                    };
                    let (kb, n) = inner_b(sb);
                    if k != kb {
                        return Err(err());
                    }
                    let lead = if trans_a { vec![m] } else { sa[..ra - 1].to_vec() };
                    (1, m, k, n, true, lead)
                }
                _ => return Err(err()),
            };
            out_shape.push(n);
            let dims = GemmDims { m, k, n, trans_a, trans_b };
            let mut out = vec![0.0; batch * m * n];
            for bi in 0..batch {
                let boff = if shared_b { 0 } else { bi * k * n };
                kernels::gemm(
                    &a.data()[bi * m * k..(bi + 1) * m * k],
                    &b.data()[boff..boff + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    dims,
                    false,
                );
            }
            (Tensor::new(&out_shape, out)?, batch, dims, shared_b)
        };
        self.tape.record(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                batch,
                dims,
                shared_b,
            },
        )
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Var<'t> {
        let s = self.tape.value(self.id).data().iter().sum();
        self.tape
            .record(Tensor::scalar(s), Op::Sum(self.id))
            .expect("sum of finite values")
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean(&self) -> Var<'t> {
        let (s, n) = {
            let v = self.tape.value(self.id);
            (v.data().iter().sum::<f64>(), v.numel())
        };
        self.tape
            .record(Tensor::scalar(s / n as f64), Op::Mean(self.id))
            .expect("mean of finite values")
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>, TensorError> {
        let (value, outer, n, inner) = {
            let a = self.tape.value(self.id);
            let shape = a.shape();
            if axis >= shape.len() {
                return Err(TensorError::InvalidAxis {
                    op: "sum_axis",
                    axis,
                    rank: shape.len(),
                });
            }
            let outer: usize = shape[..axis].iter().product();
            let n = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut out = vec![0.0; outer * inner];
            let av = a.data();
            for o in 0..outer {
                for j in 0..n {
                    let base = (o * n + j) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += av[base + i];
                    }
                }
            }
            let mut out_shape = shape.to_vec();
            out_shape.remove(axis);
            (Tensor::new(&out_shape, out)?, outer, n, inner)
        };
        self.tape.record(
            value,
            Op::SumAxis {
                a: self.id,
                outer,
                n,
                inner,
            },
        )
    }

    fn last_axis_reduce(&self, op: Op, f: impl Fn(&[f64]) -> f64) -> Result<Var<'t>, TensorError> {
        let value = {
            let a = self.tape.value(self.id);
            if a.rank() == 0 {
                return Err(TensorError::InvalidAxis {
                    op: op.name(),
                    axis: 0,
                    rank: 0,
                });
            }
            let c = a.last_dim();
            let rows = a.numel().checked_div(c).unwrap_or(0);
            let data: Vec<f64> = (0..rows).map(|r| f(a.row(r))).collect();
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = 1;
            Tensor::new(&shape, data)?
        };
        self.tape.record(value, op)
    }

    /// `Σ|x|` over the last axis, kept as a size-1 axis.
    pub fn l1_lastdim(&self) -> Result<Var<'t>, TensorError> {
        self.last_axis_reduce(Op::L1Last(self.id), |r| r.iter().map(|x| x.abs()).sum())
    }

    /// Euclidean norm over the last axis, kept as a size-1 axis.
    pub fn l2_lastdim(&self) -> Result<Var<'t>, TensorError> {
        self.last_axis_reduce(Op::L2Last(self.id), |r| {
            r.iter().map(|x| x * x).sum::<f64>().sqrt()
        })
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax_lastdim(&self) -> Result<Var<'t>, TensorError> {
        let value = {
            let a = self.tape.value(self.id);
            let c = a.last_dim();
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(c.max(1)) {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
            Tensor::new(a.shape(), data)?
        };
        self.tape.record(value, Op::Softmax(self.id))
    }

    /// Normalizes the last axis with the biased variance, then applies
    /// `gamma * x̂ + beta`.
    pub fn layer_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Result<Var<'t>, TensorError> {
        self.same_tape(gamma);
        self.same_tape(beta);
        let (value, xhat, rstd) = {
            let x = self.tape.value(self.id);
            let g = self.tape.value(gamma.id);
            let b = self.tape.value(beta.id);
            let c = x.last_dim();
            if x.rank() == 0 || c == 0 || g.shape() != [c] || b.shape() != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: x.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let rows = x.numel() / c;
            let mut xhat = Vec::with_capacity(x.numel());
            let mut rstd = Vec::with_capacity(rows);
            let mut out = Vec::with_capacity(x.numel());
            for r in 0..rows {
                let row = x.row(r);
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd.push(rs);
                for (j, v) in row.iter().enumerate() {
                    let xh = (v - mean) * rs;
                    xhat.push(xh);
                    out.push(g.data()[j] * xh + b.data()[j]);
                }
            }
            (Tensor::new(x.shape(), out)?, xhat, rstd)
        };
        self.tape.record(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
        )
    }

    /// `out[a, b, :] = self[idx[a*k + b], :]` for a rank-2 `self`; output
    /// shape `[idx.len() / k, k, C]`.
    pub fn gather_rows(&self, idx: &[usize], k: usize) -> Result<Var<'t>, TensorError> {
        let value = {
            let h = self.tape.value(self.id);
            if h.rank() != 2 {
                return Err(TensorError::Rank {
                    op: "gather_rows",
                    expected: "2",
                    shape: h.shape().to_vec(),
                });
            }
            if k == 0 || !idx.len().is_multiple_of(k) {
                return Err(TensorError::ShapeMismatch {
                    op: "gather_rows",
                    lhs: h.shape().to_vec(),
                    rhs: vec![idx.len(), k],
                });
            }
            let (rows, c) = (h.shape()[0], h.shape()[1]);
            let mut out = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                if i >= rows {
                    return Err(TensorError::IndexOutOfRange {
                        op: "gather_rows",
                        index: i,
                        len: rows,
                    });
                }
                out.extend_from_slice(h.row(i));
            }
            Tensor::new(&[idx.len() / k, k, c], out)?
        };
        self.tape.record(
            value,
            Op::Gather {
                h: self.id,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn concat_lastdim(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(other);
        let (value, da, db) = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            let (sa, sb) = (a.shape(), b.shape());
            if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_lastdim",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let (da, db) = (a.last_dim(), b.last_dim());
            let rows: usize = sa[..sa.len() - 1].iter().product();
            let mut out = Vec::with_capacity(rows * (da + db));
            for r in 0..rows {
                out.extend_from_slice(&a.data()[r * da..(r + 1) * da]);
                out.extend_from_slice(&b.data()[r * db..(r + 1) * db]);
            }
            let mut shape = sa.to_vec();
            *shape.last_mut().unwrap() = da + db;
            (Tensor::new(&shape, out)?, da, db)
        };
        self.tape.record(
            value,
            Op::Concat {
                a: self.id,
                b: other.id,
                da,
                db,
            },
        )
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_lastdim(&self, start: usize, len: usize) -> Result<Var<'t>, TensorError> {
        let (value, width) = {
            let a = self.tape.value(self.id);
            let width = a.last_dim();
            if a.rank() == 0 || start + len > width || len == 0 {
                return Err(TensorError::ShapeMismatch {
                    op: "slice_lastdim",
                    lhs: a.shape().to_vec(),
                    rhs: vec![start, len],
                });
            }
            let rows = a.numel() / width;
            let mut out = Vec::with_capacity(rows * len);
            for r in 0..rows {
                out.extend_from_slice(&a.row(r)[start..start + len]);
            }
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = len;
            (Tensor::new(&shape, out)?, width)
        };
        self.tape.record(
            value,
            Op::Slice {
                a: self.id,
                start,
                len,
                width,
            },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>, TensorError> {
        let value = self.tape.value(self.id).clone().reshape(shape)?;
        self.tape.record(value, Op::Reshape(self.id))
    }

    /// Transpose of a rank-2 value.
    pub fn transpose(&self) -> Result<Var<'t>, TensorError> {
        let (value, rows, cols) = {
            let a = self.tape.value(self.id);
            let &[rows, cols] = a.shape() else {
                return Err(TensorError::Rank {
                    op: "transpose",
                    expected: "2",
                    shape: a.shape().to_vec(),
                });
            };
            let mut out = vec![0.0; rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    out[j * rows + i] = a.data()[i * cols + j];
                }
            }
            (Tensor::new(&[cols, rows], out)?, rows, cols)
        };
        self.tape.record(value, Op::Transpose { a: self.id, rows, cols })
    }

    /// Replaces entries with `|x| < tol` by 1 (gradient zero there); other
    /// entries pass through. Used to keep divisors away from zero.
    pub fn guard_small(&self, tol: f64) -> Result<Var<'t>, TensorError> {
        self.unary(Op::Guard { a: self.id, tol }, |x| if x.abs() < tol { 1.0 } else { x })
    }
}
