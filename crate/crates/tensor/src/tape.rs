//! Define-by-run reverse-mode tape.
//!
//! Every operation on a [`Var`] computes its value eagerly and appends a node
//! to the owning [`Tape`]. Node ids are assigned in execution order, so walking
//! ids backwards is a reverse topological traversal.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::{Result, Tensor, TensorError};

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    /// `a[m×k] · b[k×n]`
    Matmul { a: usize, b: usize },
    /// `a[m×k] · b[n×k]ᵀ`
    MatmulNt { a: usize, b: usize },
    /// Batched `a[s×m×k] · b[s×k×n]`
    Bmm { a: usize, b: usize },
    /// Batched `a[s×m×k] · b[s×n×k]ᵀ`
    BmmNt { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Gelu { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    Softmax { a: usize, axis: usize },
    LogSoftmax { a: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Reshape { a: usize },
    Gather { a: usize, index: Rc<[usize]> },
    Gate { phi: usize, skip: usize, gates: usize, idx: usize, phi_weight: Option<f64> },
    StraightThrough { soft: usize },
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Matmul { a, b } | MatmulNt { a, b } | Bmm { a, b } | BmmNt { a, b } => vec![*a, *b],
            Add { a, b } | Sub { a, b } | Mul { a, b } => vec![*a, *b],
            Scale { a, .. } | Gelu { a } | Exp { a } | Log { a } | Sum { a } | Mean { a } => vec![*a],
            Softmax { a, .. } | LogSoftmax { a, .. } | Reshape { a } | Gather { a, .. } => vec![*a],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Gate { phi, skip, gates, .. } => vec![*phi, *skip, *gates],
            StraightThrough { soft } => vec![*soft],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations for one forward pass.
///
/// A tape is single-use: after [`Tape::backward`] has run, a second call
/// fails with [`TensorError::BackwardTwice`]; build a new tape for the next
/// forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when the variable did not influence the root.
    pub fn tensor(&self, var: Var<'_>) -> Tensor {
        let shape = self.shapes[var.id].clone();
        match self.get(var) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Moves the gradient into `param`'s grad buffer.
    pub fn write_to(&self, var: Var<'_>, param: &mut Tensor) -> Result<()> {
        param.set_grad(self.tensor(var).into_data())
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

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = op.parents().iter().any(|&p| nodes[p].needs_grad);
        let id = nodes.len();
        nodes.push(Node { value, op, needs_grad });
        Var { tape: self, id }
    }

    fn push_leaf(&self, mut value: Tensor, needs_grad: bool) -> Var<'_> {
        value.clear_grad();
        value.set_requires_grad(false);
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Var { tape: self, id }
    }

    /// Records a copy of `tensor`; it is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        self.push_leaf(tensor.clone(), tensor.requires_grad())
    }

    /// Records a copy of `tensor` as a differentiable leaf.
    pub fn param(&self, tensor: &Tensor) -> Var<'_> {
        self.push_leaf(tensor.clone(), true)
    }

    /// Records a non-differentiable value.
    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        self.push_leaf(tensor, false)
    }

    /// Runs reverse accumulation from the scalar `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(TensorError::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.id].value.shape().to_vec();
        if nodes[root.id].value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            backward_node(&nodes, id, &g, &mut grads);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Adds `f`'s contribution into the gradient slot of `parent` when it needs one.
fn acc(nodes: &[Node], grads: &mut [Option<Vec<f64>>], parent: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[parent].needs_grad {
        return;
    }
    let len = nodes[parent].value.numel();
    let slot = grads[parent].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

/// Sums a full-shape gradient down onto a trailing-suffix broadcast operand.
fn reduce_to(g: &[f64], small_len: usize, out: &mut [f64]) {
    if g.len() == small_len {
        for (o, v) in out.iter_mut().zip(g) {
            *o += v;
        }
    } else {
        for chunk in g.chunks_exact(small_len) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
    }
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn backward_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    match &node.op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            acc(nodes, grads, *a, |da| gemm_nt(g, val(*b).data(), da, m, n, k));
            acc(nodes, grads, *b, |db| gemm_tn(val(*a).data(), g, db, k, m, n));
        }
        Op::MatmulNt { a, b } => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[0];
            acc(nodes, grads, *a, |da| gemm_nn(g, val(*b).data(), da, m, n, k));
            acc(nodes, grads, *b, |db| gemm_tn(g, val(*a).data(), db, n, m, k));
        }
        Op::Bmm { a, b } => {
            let s = val(*a).shape();
            let (batch, m, k) = (s[0], s[1], s[2]);
            let n = val(*b).shape()[2];
            acc(nodes, grads, *a, |da| {
                for i in 0..batch {
                    gemm_nt(
                        &g[i * m * n..(i + 1) * m * n],
                        &val(*b).data()[i * k * n..(i + 1) * k * n],
                        &mut da[i * m * k..(i + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
            });
            acc(nodes, grads, *b, |db| {
                for i in 0..batch {
                    gemm_tn(
                        &val(*a).data()[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        &mut db[i * k * n..(i + 1) * k * n],
                        k,
                        m,
                        n,
                    );
                }
            });
        }
        Op::BmmNt { a, b } => {
            let s = val(*a).shape();
            let (batch, m, k) = (s[0], s[1], s[2]);
            let n = val(*b).shape()[1];
            acc(nodes, grads, *a, |da| {
                for i in 0..batch {
                    gemm_nn(
                        &g[i * m * n..(i + 1) * m * n],
                        &val(*b).data()[i * n * k..(i + 1) * n * k],
                        &mut da[i * m * k..(i + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
            });
            acc(nodes, grads, *b, |db| {
                for i in 0..batch {
                    gemm_tn(
                        &g[i * m * n..(i + 1) * m * n],
                        &val(*a).data()[i * m * k..(i + 1) * m * k],
                        &mut db[i * n * k..(i + 1) * n * k],
                        n,
                        m,
                        k,
                    );
                }
            });
        }
        Op::Add { a, b } | Op::Sub { a, b } => {
            let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
            let out_len = g.len();
            for (p, s) in [(*a, 1.0), (*b, sign)] {
                let plen = val(p).numel();
                acc(nodes, grads, p, |dp| {
                    if s == 1.0 {
                        reduce_to(g, plen, dp);
                    } else {
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        reduce_to(&neg, plen, dp);
                    }
                });
                debug_assert_eq!(out_len % plen, 0);
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            for (p, other) in [(*a, bv), (*b, av)] {
                let plen = val(p).numel();
                let olen = other.len();
                acc(nodes, grads, p, |dp| {
                    let prod: Vec<f64> =
                        g.iter().enumerate().map(|(i, gv)| gv * other[i % olen]).collect();
                    reduce_to(&prod, plen, dp);
                });
            }
        }
        Op::Scale { a, c } => acc(nodes, grads, *a, |da| {
            for (d, gv) in da.iter_mut().zip(g) {
                *d += c * gv;
            }
        }),
        Op::Gelu { a } => acc(nodes, grads, *a, |da| {
            for ((d, gv), x) in da.iter_mut().zip(g).zip(val(*a).data()) {
                *d += gv * gelu_grad(*x);
            }
        }),
        Op::Exp { a } => acc(nodes, grads, *a, |da| {
            for ((d, gv), y) in da.iter_mut().zip(g).zip(node.value.data()) {
                *d += gv * y;
            }
        }),
        Op::Log { a } => acc(nodes, grads, *a, |da| {
            for ((d, gv), x) in da.iter_mut().zip(g).zip(val(*a).data()) {
                *d += gv / x;
            }
        }),
        Op::Sum { a } => acc(nodes, grads, *a, |da| {
            for d in da.iter_mut() {
                *d += g[0];
            }
        }),
        Op::Mean { a } => acc(nodes, grads, *a, |da| {
            let scale = g[0] / da.len() as f64;
            for d in da.iter_mut() {
                *d += scale;
            }
        }),
        Op::Softmax { a, axis } => {
            let y = node.value.data();
            let (outer, len, inner) = axis_layout(node.value.shape(), *axis);
            acc(nodes, grads, *a, |da| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dotp: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            da[idx(j)] += y[idx(j)] * (g[idx(j)] - dotp);
                        }
                    }
                }
            });
        }
        Op::LogSoftmax { a, axis } => {
            let y = node.value.data();
            let (outer, len, inner) = axis_layout(node.value.shape(), *axis);
            acc(nodes, grads, *a, |da| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let gsum: f64 = (0..len).map(|j| g[idx(j)]).sum();
                        for j in 0..len {
                            da[idx(j)] += g[idx(j)] - y[idx(j)].exp() * gsum;
                        }
                    }
                }
            });
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let n = *val(*x).shape().last().unwrap();
            let gv = val(*gain).data();
            acc(nodes, grads, *x, |dx| {
                for (r, &rs) in rstd.iter().enumerate() {
                    let row = r * n..(r + 1) * n;
                    let (gr, xr) = (&g[row.clone()], &xhat[row.clone()]);
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..n {
                        let dxh = gr[j] * gv[j];
                        m1 += dxh;
                        m2 += dxh * xr[j];
                    }
                    m1 /= n as f64;
                    m2 /= n as f64;
                    for j in 0..n {
                        dx[r * n + j] += rs * (gr[j] * gv[j] - m1 - xr[j] * m2);
                    }
                }
            });
            acc(nodes, grads, *gain, |dg| {
                for (i, (gv, xh)) in g.iter().zip(xhat).enumerate() {
                    dg[i % n] += gv * xh;
                }
            });
            acc(nodes, grads, *bias, |db| reduce_to(g, n, db));
        }
        Op::Reshape { a } => acc(nodes, grads, *a, |da| {
            for (d, gv) in da.iter_mut().zip(g) {
                *d += gv;
            }
        }),
        Op::Gather { a, index } => acc(nodes, grads, *a, |da| {
            for (gv, &src) in g.iter().zip(index.iter()) {
                da[src] += gv;
            }
        }),
        Op::Gate { phi, skip, gates, idx, phi_weight } => {
            let m = val(*gates).data()[*idx];
            let wphi = phi_weight.unwrap_or(m);
            acc(nodes, grads, *phi, |dp| {
                for (d, gv) in dp.iter_mut().zip(g) {
                    *d += wphi * gv;
                }
            });
            acc(nodes, grads, *skip, |ds| {
                for (d, gv) in ds.iter_mut().zip(g) {
                    *d += (1.0 - m) * gv;
                }
            });
            acc(nodes, grads, *gates, |dm| {
                let (pv, sv) = (val(*phi).data(), val(*skip).data());
                dm[*idx] += g.iter().zip(pv.iter().zip(sv)).map(|(gv, (p, s))| gv * (p - s)).sum::<f64>();
            });
        }
        Op::StraightThrough { soft } => acc(nodes, grads, *soft, |ds| {
            for (d, gv) in ds.iter_mut().zip(g) {
                *d += gv;
            }
        }),
    }
}

fn dim_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Dimension { op, detail }
}

/// Output shape for a trailing-suffix broadcast between `a` and `b`.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (big, small) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if big.ends_with(small) {
        Ok(big.to_vec())
    } else {
        Err(dim_err(op, format!("cannot broadcast {a:?} with {b:?}; only trailing-dimension expansion is allowed")))
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (ad, bd) = (a.data(), b.data());
    let n: usize = shape.iter().product();
    let (al, bl) = (ad.len(), bd.len());
    let data = if al == n && bl == n {
        ad.iter().zip(bd).map(|(x, y)| f(*x, *y)).collect()
    } else if al == n {
        let mut out = Vec::with_capacity(n);
        for chunk in ad.chunks_exact(bl) {
            out.extend(chunk.iter().zip(bd).map(|(x, y)| f(*x, *y)));
        }
        out
    } else if bl == n {
        let mut out = Vec::with_capacity(n);
        for chunk in bd.chunks_exact(al) {
            out.extend(ad.iter().zip(chunk).map(|(x, y)| f(*x, *y)));
        }
        out
    } else {
        (0..n).map(|i| f(ad[i % al], bd[i % bl])).collect()
    };
    Tensor::new(shape, data).expect("broadcast shape")
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

    /// First element; meaningful for scalars.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    /// Non-differentiable copy of this value.
    pub fn detach(&self) -> Var<'t> {
        let v = self.to_tensor();
        self.tape.constant(v)
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "variables belong to different tapes");
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(dim_err("matmul", format!("{:?} × {:?}", a.shape(), b.shape())));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(a.data(), b.data(), &mut out, m, k, n);
        drop((a, b));
        Ok(self.tape.push(Tensor::new([m, n], out)?, Op::Matmul { a: self.id, b: other.id }))
    }

    /// `self · otherᵀ` where `other` is `[n×k]`.
    pub fn matmul_nt(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
            return Err(dim_err("matmul_nt", format!("{:?} × {:?}ᵀ", a.shape(), b.shape())));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
        let mut out = vec![0.0; m * n];
        gemm_nt(a.data(), b.data(), &mut out, m, k, n);
        drop((a, b));
        Ok(self.tape.push(Tensor::new([m, n], out)?, Op::MatmulNt { a: self.id, b: other.id }))
    }

    pub fn bmm(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1] {
            return Err(dim_err("bmm", format!("{:?} × {:?}", a.shape(), b.shape())));
        }
        let (s, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
        let mut out = vec![0.0; s * m * n];
        for i in 0..s {
            gemm_nn(
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        drop((a, b));
        Ok(self.tape.push(Tensor::new([s, m, n], out)?, Op::Bmm { a: self.id, b: other.id }))
    }

    pub fn bmm_nt(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[2] {
            return Err(dim_err("bmm_nt", format!("{:?} × {:?}ᵀ", a.shape(), b.shape())));
        }
        let (s, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[1]);
        let mut out = vec![0.0; s * m * n];
        for i in 0..s {
            gemm_nt(
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * n * k..(i + 1) * n * k],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        drop((a, b));
        Ok(self.tape.push(Tensor::new([s, m, n], out)?, Op::BmmNt { a: self.id, b: other.id }))
    }

    fn binary(&self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(name, a.shape(), b.shape())?;
        let out = zip_broadcast(&a, &b, shape, f);
        drop((a, b));
        Ok(self.tape.push(out, op))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |x, y| x + y, Op::Add { a: self.id, b: other.id })
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub { a: self.id, b: other.id })
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul { a: self.id, b: other.id })
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let v = self.value();
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| f(*x)).collect()).expect("unary shape");
        drop(v);
        self.tape.push(out, op)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(|x| c * x, Op::Scale { a: self.id, c })
    }

    pub fn gelu(&self) -> Var<'t> {
        self.unary(gelu_fwd, Op::Gelu { a: self.id })
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp { a: self.id })
    }

    pub fn log(&self) -> Result<Var<'t>> {
        if let Some(bad) = self.value().data().iter().find(|x| !(**x > 0.0)) {
            return Err(TensorError::Domain { op: "log", detail: format!("non-positive input {bad}") });
        }
        Ok(self.unary(f64::ln, Op::Log { a: self.id }))
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(*self).expect("square of self")
    }

    pub fn sum(&self) -> Var<'t> {
        let s: f64 = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum { a: self.id })
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.value();
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        drop(v);
        self.tape.push(Tensor::scalar(m), Op::Mean { a: self.id })
    }

    /// Mean squared difference to `target`.
    pub fn mse(&self, target: Var<'t>) -> Result<Var<'t>> {
        if self.shape() != target.shape() {
            return Err(dim_err("mse", format!("{:?} vs {:?}", self.shape(), target.shape())));
        }
        Ok(self.sub(target)?.square().mean())
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<()> {
        let rank = self.value().rank();
        if axis >= rank {
            return Err(dim_err(op, format!("axis {axis} out of range for rank {rank}")));
        }
        Ok(())
    }

    /// Softmax along `axis`, stabilised by subtracting the per-slice maximum.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        self.check_axis("softmax", axis)?;
        let v = self.value();
        let x = v.data();
        let (outer, len, inner) = axis_layout(v.shape(), axis);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        drop(v);
        Ok(self.tape.push(out, Op::Softmax { a: self.id, axis }))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t>> {
        self.check_axis("log_softmax", axis)?;
        let v = self.value();
        let x = v.data();
        let (outer, len, inner) = axis_layout(v.shape(), axis);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|j| (x[idx(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    out[idx(j)] = x[idx(j)] - lse;
                }
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        drop(v);
        Ok(self.tape.push(out, Op::LogSoftmax { a: self.id, axis }))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let out = self.to_tensor().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape { a: self.id }))
    }

    /// `out[i] = self[index[i]]` over the flattened data, reshaped to `shape`.
    pub fn gather(&self, index: Rc<[usize]>, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let v = self.value();
        let n = v.numel();
        if let Some(bad) = index.iter().find(|&&i| i >= n) {
            return Err(dim_err("gather", format!("index {bad} out of range for {n} elements")));
        }
        let data = index.iter().map(|&i| v.data()[i]).collect();
        drop(v);
        let out = Tensor::new(shape, data)?;
        Ok(self.tape.push(out, Op::Gather { a: self.id, index }))
    }

    /// Selects whole rows of a 2-D tensor.
    pub fn rows(&self, rows: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(dim_err("rows", format!("expected a matrix, got {shape:?}")));
        }
        let w = shape[1];
        if let Some(bad) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(dim_err("rows", format!("row {bad} out of range for {} rows", shape[0])));
        }
        let index: Rc<[usize]> = rows.iter().flat_map(|&r| r * w..(r + 1) * w).collect();
        self.gather(index, [rows.len(), w])
    }
}

/// Layer normalization over the last dimension with affine `gain` and `bias`.
pub fn layernorm<'t>(x: Var<'t>, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
    if !(eps > 0.0) {
        return Err(TensorError::Domain { op: "layernorm", detail: format!("eps must be positive, got {eps}") });
    }
    let xv = x.value();
    let n = *xv.shape().last().unwrap();
    if gain.shape() != [n] || bias.shape() != [n] {
        return Err(dim_err("layernorm", format!("gain/bias must be [{n}], got {:?}/{:?}", gain.shape(), bias.shape())));
    }
    let (gv, bv) = (gain.value(), bias.value());
    let rows = xv.numel() / n;
    let mut out = vec![0.0; xv.numel()];
    let mut xhat = vec![0.0; xv.numel()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &xv.data()[r * n..(r + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..n {
            let h = (row[j] - mean) * rs;
            xhat[r * n + j] = h;
            out[r * n + j] = h * gv.data()[j] + bv.data()[j];
        }
    }
    let out = Tensor::new(xv.shape().to_vec(), out)?;
    drop((xv, gv, bv));
    Ok(x.tape.push(out, Op::LayerNorm { x: x.id, gain: gain.id, bias: bias.id, xhat, rstd }))
}

/// Residual gate `m·phi + (1−m)·skip` with `m = gates[idx]`.
///
/// `m = 0` returns `skip` exactly and `m = 1` returns `phi` exactly. The
/// gradient reaching `phi` is `m·g` by default; `phi_weight` replaces `m` in
/// that product, which lets a gated-off layer still receive updates.
pub fn gate<'t>(phi: Var<'t>, skip: Var<'t>, gates: Var<'t>, idx: usize, phi_weight: Option<f64>) -> Result<Var<'t>> {
    if phi.shape() != skip.shape() {
        return Err(dim_err("gate", format!("{:?} vs {:?}", phi.shape(), skip.shape())));
    }
    let m = {
        let gv = gates.value();
        if idx >= gv.numel() {
            return Err(dim_err("gate", format!("gate index {idx} out of range for {} gates", gv.numel())));
        }
        gv.data()[idx]
    };
    let out = if m == 0.0 {
        skip.to_tensor()
    } else if m == 1.0 {
        phi.to_tensor()
    } else {
        let (p, s) = (phi.value(), skip.value());
        Tensor::new(p.shape().to_vec(), p.data().iter().zip(s.data()).map(|(p, s)| m * p + (1.0 - m) * s).collect())?
    };
    Ok(phi.tape.push(out, Op::Gate { phi: phi.id, skip: skip.id, gates: gates.id, idx, phi_weight }))
}

/// Emits `hard` in the forward pass and routes gradients to `soft` unchanged.
pub fn straight_through<'t>(hard: Tensor, soft: Var<'t>) -> Result<Var<'t>> {
    if hard.shape() != soft.shape().as_slice() {
        return Err(dim_err("straight_through", format!("{:?} vs {:?}", hard.shape(), soft.shape())));
    }
    Ok(soft.tape.push(hard, Op::StraightThrough { soft: soft.id }))
}
