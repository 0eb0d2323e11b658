use std::cell::{Ref, RefCell};
use std::fmt;

use crate::autograd::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{gemm, Layout, Scalar};
use crate::tensor::Tensor;

/// Recorded operation with the parent node indices and whatever the
/// backward pass needs beyond the parent values.
pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddBias { x: usize, b: usize },
    Scale { x: usize, c: T },
    Relu { x: usize },
    LeakyRelu { x: usize, slope: T },
    Sigmoid { x: usize },
    Softmax { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<T> },
    Reshape { x: usize },
    Permute { x: usize, axes: Vec<usize> },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    GatherRows { x: usize, rows: Vec<usize> },
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeom, cols: Vec<T> },
    Upsample2x { x: usize },
    Sum { x: usize },
    BceWithLogits { x: usize, targets: Vec<T> },
    CrossEntropy { x: usize, targets: Vec<usize>, probs: Vec<T> },
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
    pub param: Option<ParamId>,
}

/// Dynamic computation tape.
///
/// Every operation on a [`Var`] appends a node; [`Tape::backward`] walks the
/// nodes in reverse. Build a fresh tape per forward pass and drop it after
/// the gradients have been collected.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Tensor<T>>>>,
    recording: bool,
}

/// Handle to a node on a [`Tape`].
pub struct Var<'t, T: Scalar> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that keeps values only; nothing it produces requires a grad.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Tape::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        self.push_node(Node {
            value,
            op,
            requires_grad,
            param: None,
        })
    }

    fn push_node(&self, mut node: Node<T>) -> Var<'_, T> {
        if !self.recording || !node.requires_grad {
            node.op = Op::Leaf;
            node.requires_grad = self.recording && node.requires_grad;
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Tracked leaf: receives a gradient on backward.
    pub fn var(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Untracked leaf.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf holding a copy of a stored parameter; its gradient can later be
    /// collected with [`ParamStore::accumulate_grads`].
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        let p = store.get(id);
        self.push_node(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            requires_grad: p.requires_grad,
            param: Some(id),
        })
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node<T>>> {
        self.nodes.borrow()
    }

    /// Accumulated gradient of a node, if backward has reached it.
    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.borrow().get(v.id).and_then(|g| g.clone())
    }

    pub(crate) fn grads(&self) -> Ref<'_, Vec<Option<Tensor<T>>>> {
        self.grads.borrow()
    }

    pub fn zero_grads(&self) {
        self.grads.borrow_mut().iter_mut().for_each(|g| *g = None);
    }

    /// Reverse-mode pass from a one-element root. Gradients accumulate
    /// across calls until [`Tape::zero_grads`].
    pub fn backward(&self, root: Var<'_, T>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            )));
        }
        if !root_node.requires_grad {
            return Err(Error::Usage("backward root does not depend on any tracked tensor".into()));
        }
        let mut pending: Vec<Option<Tensor<T>>> = (0..=root.id).map(|_| None).collect();
        pending[root.id] = Some(Tensor::ones(root_node.value.shape()));
        let mut store = self.grads.borrow_mut();
        if store.len() < nodes.len() {
            store.resize_with(nodes.len(), || None);
        }
        for id in (0..=root.id).rev() {
            let Some(g) = pending[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            propagate(&nodes, node, &g, &mut pending);
            match &mut store[id] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], pending: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut pending[id] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn wants<T: Scalar>(nodes: &[Node<T>], id: usize) -> bool {
    nodes[id].requires_grad
}

fn propagate<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>, pending: &mut [Option<Tensor<T>>]) {
    let out = &node.value;
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (batch, m, k, n) = matmul_dims(av.shape(), bv.shape());
            if wants(nodes, *a) {
                let mut da = vec![T::zero(); av.len()];
                for bi in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &gd[bi * m * n..],
                        Layout::Normal,
                        &bv.data()[bi * k * n..],
                        Layout::Transposed,
                        T::zero(),
                        &mut da[bi * m * k..],
                    );
                }
                accumulate(nodes, pending, *a, Tensor::from_parts(av.shape().to_vec(), da));
            }
            if wants(nodes, *b) {
                let mut db = vec![T::zero(); bv.len()];
                for bi in 0..batch {
                    gemm(
                        k,
                        m,
                        n,
                        &av.data()[bi * m * k..],
                        Layout::Transposed,
                        &gd[bi * m * n..],
                        Layout::Normal,
                        T::zero(),
                        &mut db[bi * k * n..],
                    );
                }
                accumulate(nodes, pending, *b, Tensor::from_parts(bv.shape().to_vec(), db));
            }
        }
        Op::Add { a, b } => {
            accumulate(nodes, pending, *a, g.clone());
            accumulate(nodes, pending, *b, g.clone());
        }
        Op::Sub { a, b } => {
            accumulate(nodes, pending, *a, g.clone());
            accumulate(nodes, pending, *b, g.map(|v| -v));
        }
        Op::Mul { a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if wants(nodes, *a) {
                let d = gd.iter().zip(bv.data()).map(|(&g, &y)| g * y).collect();
                accumulate(nodes, pending, *a, Tensor::from_parts(av.shape().to_vec(), d));
            }
            if wants(nodes, *b) {
                let d = gd.iter().zip(av.data()).map(|(&g, &x)| g * x).collect();
                accumulate(nodes, pending, *b, Tensor::from_parts(bv.shape().to_vec(), d));
            }
        }
        Op::AddBias { x, b } => {
            accumulate(nodes, pending, *x, g.clone());
            if wants(nodes, *b) {
                let d = nodes[*b].value.len();
                let mut db = vec![T::zero(); d];
                for row in gd.chunks_exact(d) {
                    for (acc, &v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(nodes, pending, *b, Tensor::from_parts(vec![d], db));
            }
        }
        Op::Scale { x, c } => {
            accumulate(nodes, pending, *x, g.map(|v| v * *c));
        }
        Op::Relu { x } => {
            let xv = &nodes[*x].value;
            let d = gd
                .iter()
                .zip(xv.data())
                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                .collect();
            accumulate(nodes, pending, *x, Tensor::from_parts(xv.shape().to_vec(), d));
        }
        Op::LeakyRelu { x, slope } => {
            let xv = &nodes[*x].value;
            let d = gd
                .iter()
                .zip(xv.data())
                .map(|(&g, &x)| if x > T::zero() { g } else { g * *slope })
                .collect();
            accumulate(nodes, pending, *x, Tensor::from_parts(xv.shape().to_vec(), d));
        }
        Op::Sigmoid { x } => {
            let d = gd
                .iter()
                .zip(out.data())
                .map(|(&g, &s)| g * s * (T::one() - s))
                .collect();
            accumulate(nodes, pending, *x, Tensor::from_parts(out.shape().to_vec(), d));
        }
        Op::Softmax { x } => {
            let n = *out.shape().last().unwrap();
            let mut d = vec![T::zero(); out.len()];
            for ((dr, yr), gr) in d.chunks_exact_mut(n).zip(out.data().chunks_exact(n)).zip(gd.chunks_exact(n)) {
                let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                for ((dv, &y), &g) in dr.iter_mut().zip(yr).zip(gr) {
                    *dv = y * (g - dot);
                }
            }
            accumulate(nodes, pending, *x, Tensor::from_parts(out.shape().to_vec(), d));
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let n = *out.shape().last().unwrap();
            let gam = nodes[*gamma].value.data();
            if wants(nodes, *x) {
                let mut dx = vec![T::zero(); out.len()];
                let nt = T::from_usize_lossy(n);
                for (r, ((dr, xr), gr)) in dx
                    .chunks_exact_mut(n)
                    .zip(xhat.chunks_exact(n))
                    .zip(gd.chunks_exact(n))
                    .enumerate()
                {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for i in 0..n {
                        let dxh = gr[i] * gam[i];
                        mean_d += dxh;
                        mean_dx += dxh * xr[i];
                    }
                    mean_d /= nt;
                    mean_dx /= nt;
                    for i in 0..n {
                        let dxh = gr[i] * gam[i];
                        dr[i] = inv_std[r] * (dxh - mean_d - xr[i] * mean_dx);
                    }
                }
                accumulate(nodes, pending, *x, Tensor::from_parts(out.shape().to_vec(), dx));
            }
            if wants(nodes, *gamma) {
                let mut dg = vec![T::zero(); n];
                for (xr, gr) in xhat.chunks_exact(n).zip(gd.chunks_exact(n)) {
                    for i in 0..n {
                        dg[i] += gr[i] * xr[i];
                    }
                }
                accumulate(nodes, pending, *gamma, Tensor::from_parts(vec![n], dg));
            }
            if wants(nodes, *beta) {
                let mut db = vec![T::zero(); n];
                for gr in gd.chunks_exact(n) {
                    for i in 0..n {
                        db[i] += gr[i];
                    }
                }
                accumulate(nodes, pending, *beta, Tensor::from_parts(vec![n], db));
            }
        }
        Op::Reshape { x } => {
            let shape = nodes[*x].value.shape().to_vec();
            accumulate(nodes, pending, *x, Tensor::from_parts(shape, gd.to_vec()));
        }
        Op::Permute { x, axes } => {
            let inv = kernels::inverse_axes(axes);
            let d = kernels::permute(gd, out.shape(), &inv);
            let shape = nodes[*x].value.shape().to_vec();
            accumulate(nodes, pending, *x, Tensor::from_parts(shape, d));
        }
        Op::Concat { inputs, axis } => {
            let shape = out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &i in inputs {
                let ishape = nodes[i].value.shape();
                let chunk = ishape[*axis] * inner;
                if wants(nodes, i) {
                    let mut d = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        d.extend_from_slice(&gd[o * total + offset..][..chunk]);
                    }
                    accumulate(nodes, pending, i, Tensor::from_parts(ishape.to_vec(), d));
                }
                offset += chunk;
            }
        }
        Op::Slice { x, axis, start } => {
            let ishape = nodes[*x].value.shape();
            let outer: usize = ishape[..*axis].iter().product();
            let inner: usize = ishape[axis + 1..].iter().product();
            let total = ishape[*axis] * inner;
            let chunk = out.shape()[*axis] * inner;
            let mut d = vec![T::zero(); nodes[*x].value.len()];
            for o in 0..outer {
                d[o * total + start * inner..][..chunk].copy_from_slice(&gd[o * chunk..][..chunk]);
            }
            accumulate(nodes, pending, *x, Tensor::from_parts(ishape.to_vec(), d));
        }
        Op::GatherRows { x, rows } => {
            let ishape = nodes[*x].value.shape();
            let width = ishape[1];
            let mut d = vec![T::zero(); nodes[*x].value.len()];
            for (k, &r) in rows.iter().enumerate() {
                for (dv, &gv) in d[r * width..][..width].iter_mut().zip(&gd[k * width..][..width]) {
                    *dv += gv;
                }
            }
            accumulate(nodes, pending, *x, Tensor::from_parts(ishape.to_vec(), d));
        }
        Op::Conv2d { x, w, b, geom, cols } => {
            let wv = &nodes[*w].value;
            let c_out = wv.shape()[0];
            let plane = geom.h_out * geom.w_out;
            let gm = kernels::batch_to_channels_major(gd, c_out, geom.batch, plane);
            let (k_rows, n_cols) = (geom.rows(), geom.cols());
            if wants(nodes, *w) {
                let mut dw = vec![T::zero(); wv.len()];
                gemm(c_out, n_cols, k_rows, &gm, Layout::Normal, cols, Layout::Transposed, T::zero(), &mut dw);
                accumulate(nodes, pending, *w, Tensor::from_parts(wv.shape().to_vec(), dw));
            }
            if wants(nodes, *b) {
                let db = gm.chunks_exact(n_cols).map(|row| row.iter().copied().sum()).collect();
                accumulate(nodes, pending, *b, Tensor::from_parts(vec![c_out], db));
            }
            if wants(nodes, *x) {
                let mut dcols = vec![T::zero(); k_rows * n_cols];
                gemm(k_rows, c_out, n_cols, wv.data(), Layout::Transposed, &gm, Layout::Normal, T::zero(), &mut dcols);
                let xv = &nodes[*x].value;
                let mut dx = vec![T::zero(); xv.len()];
                kernels::col2im(&dcols, geom, &mut dx);
                accumulate(nodes, pending, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
        }
        Op::Upsample2x { x } => {
            let ishape = nodes[*x].value.shape();
            let (h, w) = (ishape[2], ishape[3]);
            let planes = ishape[0] * ishape[1];
            let mut d = vec![T::zero(); nodes[*x].value.len()];
            for p in 0..planes {
                let src = &gd[p * 4 * h * w..][..4 * h * w];
                let dst = &mut d[p * h * w..][..h * w];
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                    }
                }
            }
            accumulate(nodes, pending, *x, Tensor::from_parts(ishape.to_vec(), d));
        }
        Op::Sum { x } => {
            let shape = nodes[*x].value.shape().to_vec();
            accumulate(nodes, pending, *x, Tensor::full(&shape, gd[0]));
        }
        Op::BceWithLogits { x, targets } => {
            let xv = &nodes[*x].value;
            let d = xv
                .data()
                .iter()
                .zip(targets)
                .zip(gd)
                .map(|((&l, &t), &g)| g * (kernels::sigmoid(l) - t))
                .collect();
            accumulate(nodes, pending, *x, Tensor::from_parts(xv.shape().to_vec(), d));
        }
        Op::CrossEntropy { x, targets, probs } => {
            let xv = &nodes[*x].value;
            let c = xv.shape()[1];
            let mut d = probs.clone();
            for (r, &t) in targets.iter().enumerate() {
                d[r * c + t] -= T::one();
                for v in &mut d[r * c..(r + 1) * c] {
                    *v *= gd[r];
                }
            }
            accumulate(nodes, pending, *x, Tensor::from_parts(xv.shape().to_vec(), d));
        }
    }
}

/// `(batch, m, k, n)` for a validated matmul pair.
pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> (usize, usize, usize, usize) {
    if a.len() == 2 {
        (1, a[0], a[1], b[1])
    } else {
        (a[0], a[1], a[2], b[2])
    }
}
