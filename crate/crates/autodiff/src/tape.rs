use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{AutodiffError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Neg,
    Relu,
    Softplus,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Sin,
    Cos,
    Abs,
    Square,
    Sqrt,
}

/// Which operand of a binary op is expanded along new leading dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Expand {
    None,
    Lhs,
    Rhs,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Constant,
    Leaf,
    /// Result of an op none of whose inputs require a gradient.
    Untracked,
    Binary { kind: BinaryKind, a: usize, b: usize, expand: Expand },
    Unary { kind: UnaryKind, x: usize },
    Affine { x: usize, scale: f64 },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Linear { x: usize, w: usize, b: usize, m: usize, k: usize, n: usize },
    Sum { x: usize },
    Mean { x: usize },
    SumAxis { x: usize, outer: usize, len: usize, inner: usize },
    Concat { parts: Vec<(usize, usize)>, outer: usize, inner: usize, total: usize },
    Slice { x: usize, outer: usize, len: usize, inner: usize, start: usize, end: usize },
    Broadcast { x: usize },
    Reshape { x: usize },
    Transpose { x: usize, rows: usize, cols: usize },
    ExpandLast { x: usize, n: usize },
    Gather { x: usize, indices: Vec<usize>, row: usize },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Ordered record of primitive applications. Nodes are appended in
/// evaluation order, so every node's inputs precede it.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Real> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Real> Copy for Var<'_, T> {}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a value that does not take part in differentiation.
    pub fn constant(&self, value: Tensor<T>) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFiniteInput { op: "constant" });
        }
        Ok(self.push_node(value, Op::Constant, false))
    }

    pub fn scalar(&self, value: T) -> Result<Var<'_, T>> {
        self.constant(Tensor::scalar(value))
    }

    /// Records a differentiable leaf; `backward` accumulates into its grad.
    pub fn leaf(&self, value: Tensor<T>) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFiniteInput { op: "leaf" });
        }
        Ok(self.push_node(value, Op::Leaf, true))
    }

    fn push_node(&self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad, grad: None });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Appends the result of a primitive. `inputs` decides whether the op is
    /// tracked for backward.
    pub(crate) fn push_op(
        &self,
        name: &'static str,
        value: Tensor<T>,
        op: Op,
        inputs: &[usize],
    ) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFiniteOutput { op: name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Untracked };
        Ok(self.push_node(value, op, requires_grad))
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.nodes.borrow()[var.id].grad.clone()
    }

    pub fn zero_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Reverse sweep from a scalar root. Gradients add onto whatever the
    /// leaves already hold.
    pub fn backward(&self, root: Var<'_, T>) -> Result<()> {
        let leaf_grads = {
            let nodes = self.nodes.borrow();
            let root_node = &nodes[root.id];
            if root_node.value.numel() != 1 {
                return Err(AutodiffError::NonScalarRoot {
                    shape: root_node.value.shape().to_vec(),
                });
            }
            if !root_node.requires_grad {
                return Ok(());
            }
            let mut grads: Vec<Option<Vec<T>>> = vec![None; root.id + 1];
            grads[root.id] = Some(vec![T::one()]);
            let mut leaf_grads = Vec::new();
            for id in (0..=root.id).rev() {
                let Some(g) = grads[id].take() else { continue };
                match &nodes[id].op {
                    Op::Leaf => leaf_grads.push((id, g)),
                    Op::Constant | Op::Untracked => {}
                    op => propagate(&nodes, id, op, &g, &mut grads),
                }
            }
            leaf_grads
        };
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            let node = &mut nodes[id];
            match &mut node.grad {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                        *a = *a + *v;
                    }
                }
                None => {
                    node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
            }
        }
        Ok(())
    }
}

/// Gradient buffer for `id`, created on first use; `None` when the node
/// does not need a gradient.
fn slot<'g, T: Real>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    id: usize,
) -> Option<&'g mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); len]))
}

/// Visits `(out, lhs, rhs)` flat index triples of a binary op.
#[inline(always)]
pub(crate) fn for_each_pair(
    len_a: usize,
    len_b: usize,
    expand: Expand,
    mut f: impl FnMut(usize, usize, usize),
) {
    match expand {
        Expand::None => {
            for i in 0..len_a {
                f(i, i, i);
            }
        }
        Expand::Rhs => {
            for r in 0..len_a / len_b.max(1) {
                let base = r * len_b;
                for j in 0..len_b {
                    f(base + j, base + j, j);
                }
            }
        }
        Expand::Lhs => {
            for r in 0..len_b / len_a.max(1) {
                let base = r * len_a;
                for j in 0..len_a {
                    f(base + j, j, base + j);
                }
            }
        }
    }
}

pub(crate) fn guard_den<T: Real>(b: T) -> (T, bool) {
    let eps = T::guard();
    if b.abs() >= eps {
        (b, true)
    } else if b < T::zero() {
        (-eps, false)
    } else {
        (eps, false)
    }
}

fn propagate<T: Real>(
    nodes: &[Node<T>],
    id: usize,
    op: &Op,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let val = |i: usize| -> &[T] { nodes[i].value.data() };
    match *op {
        Op::Binary { kind, a, b, expand } => {
            let (av, bv) = (val(a), val(b));
            let (la, lb) = (av.len(), bv.len());
            if let Some(ga) = slot(nodes, grads, a) {
                match kind {
                    BinaryKind::Add | BinaryKind::Sub => {
                        for_each_pair(la, lb, expand, |o, i, _| ga[i] = ga[i] + g[o])
                    }
                    BinaryKind::Mul => {
                        for_each_pair(la, lb, expand, |o, i, j| ga[i] = ga[i] + g[o] * bv[j])
                    }
                    BinaryKind::Div => for_each_pair(la, lb, expand, |o, i, j| {
                        ga[i] = ga[i] + g[o] / guard_den(bv[j]).0
                    }),
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                match kind {
                    BinaryKind::Add => {
                        for_each_pair(la, lb, expand, |o, _, j| gb[j] = gb[j] + g[o])
                    }
                    BinaryKind::Sub => {
                        for_each_pair(la, lb, expand, |o, _, j| gb[j] = gb[j] - g[o])
                    }
                    BinaryKind::Mul => {
                        for_each_pair(la, lb, expand, |o, i, j| gb[j] = gb[j] + g[o] * av[i])
                    }
                    BinaryKind::Div => for_each_pair(la, lb, expand, |o, i, j| {
                        let (d, active) = guard_den(bv[j]);
                        if active {
                            gb[j] = gb[j] - g[o] * av[i] / (d * d);
                        }
                    }),
                }
            }
        }
        Op::Unary { kind, x } => {
            let xv = val(x);
            let yv = nodes[id].value.data();
            let Some(gx) = slot(nodes, grads, x) else { return };
            let eps = T::guard();
            let one = T::one();
            let two = T::of(2.0);
            let half = T::of(0.5);
            for i in 0..xv.len() {
                let (xi, yi, gi) = (xv[i], yv[i], g[i]);
                let d = match kind {
                    UnaryKind::Neg => -gi,
                    UnaryKind::Relu => {
                        if xi > T::zero() {
                            gi
                        } else {
                            T::zero()
                        }
                    }
                    UnaryKind::Softplus => gi * sigmoid(xi),
                    UnaryKind::Sigmoid => gi * yi * (one - yi),
                    UnaryKind::Tanh => gi * (one - yi * yi),
                    UnaryKind::Exp => gi * yi,
                    UnaryKind::Log => {
                        if xi > eps {
                            gi / xi
                        } else {
                            T::zero()
                        }
                    }
                    UnaryKind::Sin => gi * xi.cos(),
                    UnaryKind::Cos => -gi * xi.sin(),
                    UnaryKind::Abs => {
                        if xi > T::zero() {
                            gi
                        } else if xi < T::zero() {
                            -gi
                        } else {
                            T::zero()
                        }
                    }
                    UnaryKind::Square => two * xi * gi,
                    UnaryKind::Sqrt => {
                        if xi > T::zero() {
                            gi * half / xi.max(eps).sqrt()
                        } else {
                            T::zero()
                        }
                    }
                };
                gx[i] = gx[i] + d;
            }
        }
        Op::Affine { x, scale } => {
            if let Some(gx) = slot(nodes, grads, x) {
                let s = T::of(scale);
                for (a, &v) in gx.iter_mut().zip(g) {
                    *a = *a + s * v;
                }
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (av, bv) = (val(a), val(b));
            if let Some(ga) = slot(nodes, grads, a) {
                // dA[m×k] += G[m×n] · Bᵀ
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    (g, n as isize, 1),
                    (bv, 1, n as isize),
                    T::one(),
                    (ga.as_mut_slice(), k as isize, 1),
                );
            }
            if let Some(gb) = slot(nodes, grads, b) {
                // dB[k×n] += Aᵀ · G
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    (av, 1, k as isize),
                    (g, n as isize, 1),
                    T::one(),
                    (gb.as_mut_slice(), n as isize, 1),
                );
            }
        }
        Op::Linear { x, w, b, m, k, n } => {
            let (xv, wv) = (val(x), val(w));
            if let Some(gx) = slot(nodes, grads, x) {
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    (g, n as isize, 1),
                    (wv, 1, n as isize),
                    T::one(),
                    (gx.as_mut_slice(), k as isize, 1),
                );
            }
            if let Some(gw) = slot(nodes, grads, w) {
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    (xv, 1, k as isize),
                    (g, n as isize, 1),
                    T::one(),
                    (gw.as_mut_slice(), n as isize, 1),
                );
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for row in g.chunks_exact(n) {
                    for (a, &v) in gb.iter_mut().zip(row) {
                        *a = *a + v;
                    }
                }
            }
        }
        Op::Sum { x } => {
            if let Some(gx) = slot(nodes, grads, x) {
                for a in gx.iter_mut() {
                    *a = *a + g[0];
                }
            }
        }
        Op::Mean { x } => {
            if let Some(gx) = slot(nodes, grads, x) {
                let s = g[0] / T::of(gx.len() as f64);
                for a in gx.iter_mut() {
                    *a = *a + s;
                }
            }
        }
        Op::SumAxis { x, outer, len, inner } => {
            if let Some(gx) = slot(nodes, grads, x) {
                for o in 0..outer {
                    for l in 0..len {
                        let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                        let src = &g[o * inner..(o + 1) * inner];
                        for (a, &v) in dst.iter_mut().zip(src) {
                            *a = *a + v;
                        }
                    }
                }
            }
        }
        Op::Concat { ref parts, outer, inner, total } => {
            let mut offset = 0;
            for &(p, len) in parts {
                if let Some(gp) = slot(nodes, grads, p) {
                    for o in 0..outer {
                        let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                        let start = (o * total + offset) * inner;
                        let src = &g[start..start + len * inner];
                        for (a, &v) in dst.iter_mut().zip(src) {
                            *a = *a + v;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Slice { x, outer, len, inner, start, end } => {
            if let Some(gx) = slot(nodes, grads, x) {
                let w = end - start;
                for o in 0..outer {
                    let dst_start = (o * len + start) * inner;
                    let dst = &mut gx[dst_start..dst_start + w * inner];
                    let src = &g[o * w * inner..(o + 1) * w * inner];
                    for (a, &v) in dst.iter_mut().zip(src) {
                        *a = *a + v;
                    }
                }
            }
        }
        Op::Broadcast { x } => {
            if let Some(gx) = slot(nodes, grads, x) {
                let n = gx.len();
                for chunk in g.chunks_exact(n) {
                    for (a, &v) in gx.iter_mut().zip(chunk) {
                        *a = *a + v;
                    }
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(gx) = slot(nodes, grads, x) {
                for (a, &v) in gx.iter_mut().zip(g) {
                    *a = *a + v;
                }
            }
        }
        Op::Transpose { x, rows, cols } => {
            if let Some(gx) = slot(nodes, grads, x) {
                for r in 0..rows {
                    for c in 0..cols {
                        gx[r * cols + c] = gx[r * cols + c] + g[c * rows + r];
                    }
                }
            }
        }
        Op::ExpandLast { x, n } => {
            if let Some(gx) = slot(nodes, grads, x) {
                for (a, chunk) in gx.iter_mut().zip(g.chunks_exact(n)) {
                    *a = *a + chunk.iter().copied().sum::<T>();
                }
            }
        }
        Op::Gather { x, ref indices, row } => {
            if let Some(gx) = slot(nodes, grads, x) {
                for (o, &src) in indices.iter().enumerate() {
                    let dst = &mut gx[src * row..(src + 1) * row];
                    for (a, &v) in dst.iter_mut().zip(&g[o * row..(o + 1) * row]) {
                        *a = *a + v;
                    }
                }
            }
        }
        Op::Constant | Op::Leaf | Op::Untracked => {}
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
