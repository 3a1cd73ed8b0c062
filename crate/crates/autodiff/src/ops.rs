//! Forward rules for every primitive. Backward rules live next to the tape
//! sweep in `tape.rs`.

use std::rc::Rc;

use crate::error::{AutodiffError, Result};
use crate::real::Real;
use crate::tape::{for_each_pair, guard_den, sigmoid, softplus, BinaryKind, Expand, Op, UnaryKind};
use crate::tensor::Tensor;
use crate::Var;

fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(AutodiffError::InvalidArgument {
            op,
            msg: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn expansion(op: &'static str, a: &[usize], b: &[usize]) -> Result<Expand> {
    if a == b {
        Ok(Expand::None)
    } else if b.len() < a.len() && a.ends_with(b) {
        Ok(Expand::Rhs)
    } else if a.len() < b.len() && b.ends_with(a) {
        Ok(Expand::Lhs)
    } else {
        Err(AutodiffError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() })
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> T {
        self.value().item()
    }

    fn binary(self, other: Var<'t, T>, kind: BinaryKind, name: &'static str) -> Result<Self> {
        let (av, bv) = (self.value(), other.value());
        let expand = expansion(name, av.shape(), bv.shape())?;
        let out_shape = if expand == Expand::Lhs { bv.shape() } else { av.shape() }.to_vec();
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![T::zero(); out_shape.iter().product()];
        match kind {
            BinaryKind::Add => for_each_pair(ad.len(), bd.len(), expand, |o, i, j| out[o] = ad[i] + bd[j]),
            BinaryKind::Sub => for_each_pair(ad.len(), bd.len(), expand, |o, i, j| out[o] = ad[i] - bd[j]),
            BinaryKind::Mul => for_each_pair(ad.len(), bd.len(), expand, |o, i, j| out[o] = ad[i] * bd[j]),
            BinaryKind::Div => for_each_pair(ad.len(), bd.len(), expand, |o, i, j| {
                out[o] = ad[i] / guard_den(bd[j]).0
            }),
        }
        self.tape.push_op(
            name,
            Tensor::new(out_shape, out)?,
            Op::Binary { kind, a: self.id, b: other.id, expand },
            &[self.id, other.id],
        )
    }

    /// Elementwise sum. Either operand may omit leading dimensions of the
    /// other; it is then repeated along them.
    pub fn add(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, BinaryKind::Sub, "sub")
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, BinaryKind::Mul, "mul")
    }

    /// Elementwise quotient; denominators smaller than 1e-10 in magnitude are
    /// clamped to ±1e-10.
    pub fn div(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, BinaryKind::Div, "div")
    }

    fn unary(self, kind: UnaryKind, name: &'static str) -> Result<Self> {
        let xv = self.value();
        let eps = T::guard();
        let f = |x: T| -> T {
            match kind {
                UnaryKind::Neg => -x,
                UnaryKind::Relu => x.max(T::zero()),
                UnaryKind::Softplus => softplus(x),
                UnaryKind::Sigmoid => sigmoid(x),
                UnaryKind::Tanh => x.tanh(),
                UnaryKind::Exp => x.exp(),
                UnaryKind::Log => x.max(eps).ln(),
                UnaryKind::Sin => x.sin(),
                UnaryKind::Cos => x.cos(),
                UnaryKind::Abs => x.abs(),
                UnaryKind::Square => x * x,
                UnaryKind::Sqrt => x.max(T::zero()).sqrt(),
            }
        };
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&x| f(x)).collect())?;
        self.tape.push_op(name, out, Op::Unary { kind, x: self.id }, &[self.id])
    }

    pub fn neg(self) -> Result<Self> {
        self.unary(UnaryKind::Neg, "neg")
    }

    pub fn relu(self) -> Result<Self> {
        self.unary(UnaryKind::Relu, "relu")
    }

    /// `log(1 + exp(x))`, evaluated without overflow for large |x|.
    pub fn softplus(self) -> Result<Self> {
        self.unary(UnaryKind::Softplus, "softplus")
    }

    pub fn sigmoid(self) -> Result<Self> {
        self.unary(UnaryKind::Sigmoid, "sigmoid")
    }

    pub fn tanh(self) -> Result<Self> {
        self.unary(UnaryKind::Tanh, "tanh")
    }

    pub fn exp(self) -> Result<Self> {
        self.unary(UnaryKind::Exp, "exp")
    }

    /// Natural log of `max(x, 1e-10)`.
    pub fn log(self) -> Result<Self> {
        self.unary(UnaryKind::Log, "log")
    }

    pub fn sin(self) -> Result<Self> {
        self.unary(UnaryKind::Sin, "sin")
    }

    pub fn cos(self) -> Result<Self> {
        self.unary(UnaryKind::Cos, "cos")
    }

    pub fn abs(self) -> Result<Self> {
        self.unary(UnaryKind::Abs, "abs")
    }

    pub fn square(self) -> Result<Self> {
        self.unary(UnaryKind::Square, "square")
    }

    pub fn sqrt(self) -> Result<Self> {
        self.unary(UnaryKind::Sqrt, "sqrt")
    }

    /// `scale · x + shift` with constant coefficients.
    pub fn affine(self, scale: f64, shift: f64) -> Result<Self> {
        let xv = self.value();
        let (s, b) = (T::of(scale), T::of(shift));
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&x| s * x + b).collect())?;
        self.tape.push_op("affine", out, Op::Affine { x: self.id, scale }, &[self.id])
    }

    pub fn scale(self, c: f64) -> Result<Self> {
        self.affine(c, 0.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Self> {
        self.affine(1.0, c)
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Result<Self> {
        self.affine(-1.0, 1.0)
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Self> {
        let (av, bv) = (self.value(), other.value());
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            (av.data(), k as isize, 1),
            (bv.data(), n as isize, 1),
            T::zero(),
            (&mut out, n as isize, 1),
        );
        self.tape.push_op(
            "matmul",
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a: self.id, b: other.id, m, k, n },
            &[self.id, other.id],
        )
    }

    /// Affine layer `x · w + bias` with `x: [m×k]`, `w: [k×n]`, `bias: [n]`
    /// (bias expanded over rows).
    pub fn linear(self, w: Var<'t, T>, bias: Var<'t, T>) -> Result<Self> {
        let (xv, wv, bv) = (self.value(), w.value(), bias.value());
        let (sx, sw) = (xv.shape(), wv.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(AutodiffError::ShapeMismatch { op: "linear", lhs: sx.to_vec(), rhs: sw.to_vec() });
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        if bv.shape() != [n] {
            return Err(AutodiffError::ShapeMismatch {
                op: "linear",
                lhs: vec![m, n],
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bv.data());
        }
        T::gemm(
            m,
            k,
            n,
            T::one(),
            (xv.data(), k as isize, 1),
            (wv.data(), n as isize, 1),
            T::one(),
            (&mut out, n as isize, 1),
        );
        self.tape.push_op(
            "linear",
            Tensor::new(vec![m, n], out)?,
            Op::Linear { x: self.id, w: w.id, b: bias.id, m, k, n },
            &[self.id, w.id, bias.id],
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Result<Self> {
        let s = self.value().data().iter().copied().sum::<T>();
        self.tape.push_op("sum", Tensor::scalar(s), Op::Sum { x: self.id }, &[self.id])
    }

    pub fn mean(self) -> Result<Self> {
        let v = self.value();
        if v.numel() == 0 {
            return Err(AutodiffError::InvalidArgument { op: "mean", msg: "empty tensor".into() });
        }
        let s = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        self.tape.push_op("mean", Tensor::scalar(s), Op::Mean { x: self.id }, &[self.id])
    }

    /// Sums out one axis.
    pub fn sum_axis(self, axis: usize) -> Result<Self> {
        let v = self.value();
        let (outer, len, inner) = split_axis("sum_axis", v.shape(), axis)?;
        let d = v.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (a, &x) in dst.iter_mut().zip(src) {
                    *a = *a + x;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        self.tape.push_op(
            "sum_axis",
            Tensor::new(shape, out)?,
            Op::SumAxis { x: self.id, outer, len, inner },
            &[self.id],
        )
    }

    /// Joins vars along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or(AutodiffError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let tape = first.tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        let (outer, _, inner) = split_axis("concat", &base, axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for v in &values {
            let s = v.shape();
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(AutodiffError::ShapeMismatch { op: "concat", lhs: base.clone(), rhs: s.to_vec() });
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&lens) {
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.push_op(
            "concat",
            Tensor::new(shape, out)?,
            Op::Concat { parts: ids.iter().copied().zip(lens).collect(), outer, inner, total },
            &ids,
        )
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Self> {
        let v = self.value();
        let (outer, len, inner) = split_axis("slice", v.shape(), axis)?;
        if start > end || end > len {
            return Err(AutodiffError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{end} out of bounds for extent {len}"),
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let s = (o * len + start) * inner;
            out.extend_from_slice(&v.data()[s..s + w * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = w;
        self.tape.push_op(
            "slice",
            Tensor::new(shape, out)?,
            Op::Slice { x: self.id, outer, len, inner, start, end },
            &[self.id],
        )
    }

    /// Repeats the value along a new leading dimension of extent `n`.
    pub fn broadcast(self, n: usize) -> Result<Self> {
        let v = self.value();
        let mut out = Vec::with_capacity(n * v.numel());
        for _ in 0..n {
            out.extend_from_slice(v.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(v.shape());
        self.tape.push_op("broadcast", Tensor::new(shape, out)?, Op::Broadcast { x: self.id }, &[self.id])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let v = self.value();
        let out = (*v).clone().reshaped(shape)?;
        self.tape.push_op("reshape", out, Op::Reshape { x: self.id }, &[self.id])
    }

    /// Transpose of a matrix.
    pub fn transpose(self) -> Result<Self> {
        let v = self.value();
        let s = v.shape();
        if s.len() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "transpose",
                msg: format!("expected a matrix, got shape {s:?}"),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let d = v.data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = d[r * cols + c];
            }
        }
        self.tape.push_op(
            "transpose",
            Tensor::new(vec![cols, rows], out)?,
            Op::Transpose { x: self.id, rows, cols },
            &[self.id],
        )
    }

    /// Repeats a trailing extent-1 axis `n` times: `[.., 1] -> [.., n]`.
    pub fn expand_last(self, n: usize) -> Result<Self> {
        let v = self.value();
        let s = v.shape();
        if s.last() != Some(&1) {
            return Err(AutodiffError::InvalidArgument {
                op: "expand_last",
                msg: format!("last extent must be 1, got shape {s:?}"),
            });
        }
        let mut out = Vec::with_capacity(v.numel() * n);
        for &x in v.data() {
            out.extend(std::iter::repeat(x).take(n));
        }
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = n;
        self.tape.push_op(
            "expand_last",
            Tensor::new(shape, out)?,
            Op::ExpandLast { x: self.id, n },
            &[self.id],
        )
    }

    /// Selects rows (entries of axis 0), repetition allowed.
    pub fn gather(self, indices: &[usize]) -> Result<Self> {
        let v = self.value();
        let s = v.shape();
        if s.is_empty() {
            return Err(AutodiffError::InvalidArgument { op: "gather", msg: "scalar input".into() });
        }
        let row: usize = s[1..].iter().product();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= s[0] {
                return Err(AutodiffError::InvalidArgument {
                    op: "gather",
                    msg: format!("index {i} out of bounds for extent {}", s[0]),
                });
            }
            out.extend_from_slice(&v.data()[i * row..(i + 1) * row]);
        }
        let mut shape = s.to_vec();
        shape[0] = indices.len();
        self.tape.push_op(
            "gather",
            Tensor::new(shape, out)?,
            Op::Gather { x: self.id, indices: indices.to_vec(), row },
            &[self.id],
        )
    }
}
