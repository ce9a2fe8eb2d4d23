//! Reverse-mode differentiation by operation recording.
//!
//! Every operation appends one node to the tape, so node order is a valid
//! topological order and `backward` simply sweeps it in reverse. Reductions
//! are sequential loops, which makes gradients bit-reproducible for a fixed
//! recording.

use std::fmt;
use std::sync::Arc;

use super::tensor::{broadcast_index_map, broadcast_shape, Tensor};
use super::NumericsError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A linear map with a hand-written adjoint, recorded as a single node.
///
/// Used for transforms such as the inverse STFT where expressing the map
/// through primitive ops would be wasteful.
pub trait LinearOperator: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn apply(&self, inputs: &[&Tensor]) -> Result<Tensor, NumericsError>;
    /// Pull `grad_out` back to one gradient per input (shapes match inputs).
    fn adjoint(&self, grad_out: &Tensor, inputs: &[&Tensor]) -> Vec<Tensor>;
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    L2NormAxis(Var, usize),
    Dot(Var, Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Sqrt(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Custom(Vec<Var>, Arc<dyn LinearOperator>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations, replayed backwards by
/// [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`. `None` for values that do
    /// not carry gradients.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Split `shape` around `axis` into (outer, extent, inner).
fn axis_split(
    op: &'static str,
    shape: &[usize],
    axis: usize,
) -> Result<(usize, usize, usize), NumericsError> {
    if axis >= shape.len() {
        return Err(NumericsError::Axis { op, axis, shape: shape.to_vec() });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// `c = a·b + beta·c` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    // SAFETY: all slices are sized for the stated dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Copy of `v` cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(op_name, va.shape(), vb.shape())?;
        let data: Vec<f64> = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_index_map(va.shape(), &out_shape);
            let mb = broadcast_index_map(vb.shape(), &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(va.data()[i], vb.data()[j])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::MulScalar(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same shape")
    }

    /// Smooth ramp `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Elementwise clamp to `[lo, hi]`; gradient is zero where clamped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.clamp(a, lo, f64::INFINITY)
    }

    /// 2-D matrix product `[m,k]·[k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), (k, 1), vb.data(), (n, 1), &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let va = self.value(a);
        if va.ndim() != 2 {
            return Err(NumericsError::Invalid {
                op: "transpose",
                msg: format!("expected a 2-D tensor, got shape {:?}", va.shape()),
            });
        }
        let (r, c) = (va.shape()[0], va.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = va.data()[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new([c, r], out)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let value = self.value(a).reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / v.numel().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    fn reduce_axis(
        &mut self,
        op_name: &'static str,
        a: Var,
        axis: usize,
        keepdim: bool,
        f: impl Fn(&mut dyn Iterator<Item = f64>, usize) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        let v = self.value(a);
        let (outer, n, inner) = axis_split(op_name, v.shape(), axis)?;
        let data = v.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut it = (0..n).map(|j| data[(o * n + j) * inner + i]);
                out.push(f(&mut it, n));
            }
        }
        let mut shape = v.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var, NumericsError> {
        self.reduce_axis("sum_axis", a, axis, keepdim, |it, _| it.sum(), Op::SumAxis(a, axis))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var, NumericsError> {
        self.reduce_axis(
            "mean_axis",
            a,
            axis,
            keepdim,
            |it, n| it.sum::<f64>() / n as f64,
            Op::MeanAxis(a, axis),
        )
    }

    /// Euclidean norm along `axis`. Subgradient at a zero norm is zero.
    pub fn l2_norm_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var, NumericsError> {
        self.reduce_axis(
            "l2_norm_axis",
            a,
            axis,
            keepdim,
            |it, _| it.map(|x| x * x).sum::<f64>().sqrt(),
            Op::L2NormAxis(a, axis),
        )
    }

    /// Inner product of two 1-D tensors of equal length.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 1 || va.shape() != vb.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "dot",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let s = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or(NumericsError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.value(*first).shape().to_vec();
        let (outer, _, inner) = axis_split("concat", &base, axis)?;
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let n = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, NumericsError> {
        let v = self.value(a);
        let (outer, n, inner) = axis_split("slice", v.shape(), axis)?;
        if start > end || end > n {
            return Err(NumericsError::Invalid {
                op: "slice",
                msg: format!("range {start}..{end} out of bounds for extent {n}"),
            });
        }
        let len = end - start;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice(a, axis, start), rg))
    }

    /// Record a [`LinearOperator`] application.
    pub fn apply_linear(
        &mut self,
        op: Arc<dyn LinearOperator>,
        inputs: &[Var],
    ) -> Result<Var, NumericsError> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = op.apply(&values)?;
        let rg = inputs.iter().any(|v| self.rg(*v));
        Ok(self.push(out, Op::Custom(inputs.to_vec(), op), rg))
    }

    /// Replay adjoints from a scalar `loss` in reverse recording order.
    ///
    /// Every gradient-carrying leaf gets an entry (zeros if the loss does not
    /// depend on it numerically). Fails if the loss is not scalar or no leaf
    /// carrying gradients feeds into it.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NumericsError::NotScalar(lv.shape().to_vec()));
        }
        if !self.rg(loss) {
            return Err(NumericsError::Disconnected);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            let t = match (node.requires_grad, g) {
                (true, Some(g)) => Some(Tensor::new(node.value.shape().to_vec(), g)?),
                (true, None) if matches!(node.op, Op::Leaf) => Some(Tensor::zeros(node.value.shape())),
                _ => None,
            };
            out.push(t);
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<(), NumericsError> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_broadcast(grads, *a, out.shape(), g.iter().copied());
                self.acc_broadcast(grads, *b, out.shape(), g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(grads, *a, out.shape(), g.iter().copied());
                self.acc_broadcast(grads, *b, out.shape(), g.iter().map(|x| -x));
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (va, vb) = (self.value(*a), self.value(*b));
                let ma = broadcast_index_map(va.shape(), out.shape());
                let mb = broadcast_index_map(vb.shape(), out.shape());
                if self.rg(*a) {
                    let it = g.iter().zip(&mb).map(|(gi, &j)| {
                        if is_div {
                            gi / vb.data()[j]
                        } else {
                            gi * vb.data()[j]
                        }
                    });
                    self.acc_broadcast(grads, *a, out.shape(), it);
                }
                if self.rg(*b) {
                    let it = g.iter().zip(ma.iter().zip(&mb)).map(|(gi, (&i, &j))| {
                        if is_div {
                            let y = vb.data()[j];
                            -gi * va.data()[i] / (y * y)
                        } else {
                            gi * va.data()[i]
                        }
                    });
                    self.acc_broadcast(grads, *b, out.shape(), it);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => acc(grads, *a, g.iter().copied()),
            Op::MulScalar(a, s) => acc(grads, *a, g.iter().map(|x| x * s)),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.rg(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, (n, 1), vb.data(), (1, n), &mut da, 0.0);
                    acc(grads, *a, da.into_iter());
                }
                if self.rg(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), (1, k), g, (n, 1), &mut db, 0.0);
                    acc(grads, *b, db.into_iter());
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[1], out.shape()[0]);
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                acc(grads, *a, ga.into_iter());
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                acc(grads, *a, std::iter::repeat(g[0]).take(n));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                acc(grads, *a, std::iter::repeat(g[0] / n as f64).take(n));
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) | Op::L2NormAxis(a, axis) => {
                let va = self.value(*a);
                let (outer, n, inner) = axis_split("reduce", va.shape(), *axis)?;
                let mut ga = vec![0.0; va.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let gi = g[o * inner + i];
                        let oi = out.data()[o * inner + i];
                        for j in 0..n {
                            let idx = (o * n + j) * inner + i;
                            ga[idx] = match node.op {
                                Op::SumAxis(..) => gi,
                                Op::MeanAxis(..) => gi / n as f64,
                                _ => {
                                    if oi > 0.0 {
                                        gi * va.data()[idx] / oi
                                    } else {
                                        0.0
                                    }
                                }
                            };
                        }
                    }
                }
                acc(grads, *a, ga.into_iter());
            }
            Op::Dot(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(grads, *a, vb.data().iter().map(|y| y * g[0]));
                }
                if self.rg(*b) {
                    acc(grads, *b, va.data().iter().map(|x| x * g[0]));
                }
            }
            Op::Exp(a) => acc(grads, *a, g.iter().zip(out.data()).map(|(gi, y)| gi * y)),
            Op::Log(a) => {
                let va = self.value(*a);
                acc(grads, *a, g.iter().zip(va.data()).map(|(gi, x)| gi / x))
            }
            Op::Abs(a) => {
                let va = self.value(*a);
                let sign = |x: f64| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
                acc(grads, *a, g.iter().zip(va.data()).map(|(gi, &x)| gi * sign(x)))
            }
            Op::Sqrt(a) => acc(
                grads,
                *a,
                g.iter().zip(out.data()).map(|(gi, &y)| if y > 0.0 { gi * 0.5 / y } else { 0.0 }),
            ),
            Op::Softplus(a) => {
                let va = self.value(*a);
                acc(grads, *a, g.iter().zip(va.data()).map(|(gi, &x)| gi * sigmoid(x)))
            }
            Op::Clamp(a, lo, hi) => {
                let va = self.value(*a);
                acc(
                    grads,
                    *a,
                    g.iter().zip(va.data()).map(|(gi, &x)| if x >= *lo && x <= *hi { *gi } else { 0.0 }),
                )
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split("concat", out.shape(), *axis)?;
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).shape()[*axis];
                    if self.rg(*p) {
                        let mut gp = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[base..base + n * inner]);
                        }
                        acc(grads, *p, gp.into_iter());
                    }
                    offset += n;
                }
            }
            Op::Slice(a, axis, start) => {
                let va = self.value(*a);
                let (outer, n, inner) = axis_split("slice", va.shape(), *axis)?;
                let len = out.shape()[*axis];
                let mut ga = vec![0.0; va.numel()];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * n + start) * inner;
                    ga[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                acc(grads, *a, ga.into_iter());
            }
            Op::Custom(inputs, op) => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let gout = Tensor::new(out.shape().to_vec(), g.to_vec())?;
                let pulled = op.adjoint(&gout, &values);
                for (v, gi) in inputs.iter().zip(pulled) {
                    if self.rg(*v) {
                        acc(grads, *v, gi.into_data().into_iter());
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulate a gradient laid out in `out_shape` into `target`, summing
    /// over broadcast axes.
    fn acc_broadcast(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: Var,
        out_shape: &[usize],
        g: impl Iterator<Item = f64>,
    ) {
        if !self.rg(target) {
            return;
        }
        let tv = self.value(target);
        if tv.shape() == out_shape {
            acc(grads, target, g);
            return;
        }
        let map = broadcast_index_map(tv.shape(), out_shape);
        let mut reduced = vec![0.0; tv.numel()];
        for (gi, &j) in g.zip(&map) {
            reduced[j] += gi;
        }
        acc(grads, target, reduced.into_iter());
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], target: Var, g: impl Iterator<Item = f64>) {
    match &mut grads[target.0] {
        Some(existing) => {
            for (e, gi) in existing.iter_mut().zip(g) {
                *e += gi;
            }
        }
        slot @ None => *slot = Some(g.collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec())
    }

    #[test]
    fn matmul_shape_rule() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = t.constant(Tensor::new([3, 2], vec![1., 0., 0., 1., 1., 1.]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), &[2, 2]);
        assert_eq!(t.value(c).data(), &[4., 5., 10., 11.]);
    }

    #[test]
    fn add_shape_mismatch_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros([2, 3]));
        let b = t.constant(Tensor::zeros([4, 3]));
        match t.add(a, b) {
            Err(NumericsError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 3]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn l2_norm_of_three_four() {
        let mut t = Tape::new();
        let x = t.constant(v(&[3.0, 4.0]));
        let n = t.l2_norm_axis(x, 0, false).unwrap();
        assert_eq!(t.value(n).item().unwrap(), 5.0);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.param(v(&[1.0, 2.0]));
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_dependence_gives_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param(v(&[1.0, -2.0, 5.0]));
        let s = t.sum(x);
        let z = t.mul_scalar(s, 0.0);
        let loss = t.add_scalar(z, 3.0);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn unconnected_and_non_scalar_losses_rejected() {
        let mut t = Tape::new();
        let _x = t.param(v(&[1.0]));
        let c = t.constant(Tensor::scalar(2.0));
        assert_eq!(t.backward(c).unwrap_err(), NumericsError::Disconnected);
        let y = t.param(v(&[1.0, 2.0]));
        assert!(matches!(t.backward(y), Err(NumericsError::NotScalar(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_entry() {
        let mut t = Tape::new();
        let x = t.param(v(&[1.0, 2.0]));
        let unused = t.param(v(&[7.0]));
        let loss = t.sum(x);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0]);
    }

    #[test]
    fn abs_and_norm_subgradient_zero_at_origin() {
        let mut t = Tape::new();
        let x = t.param(v(&[0.0, 0.0]));
        let a = t.abs(x);
        let n = t.l2_norm_axis(x, 0, false).unwrap();
        let s = t.sum(a);
        let loss = t.add(s, n).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn broadcast_gradient_sums_over_rows() {
        let mut t = Tape::new();
        let m = t.param(Tensor::new([3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = t.param(v(&[10.0, 20.0]));
        let y = t.mul(m, b).unwrap();
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[9.0, 12.0]);
        assert_eq!(g.get(m).unwrap().data(), &[10., 20., 10., 20., 10., 20.]);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut t = Tape::new();
        let a = t.param(Tensor::new([2, 1, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = t.param(Tensor::new([2, 1, 2], vec![5., 6., 7., 8.]).unwrap());
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.shape(c), &[2, 2, 2]);
        assert_eq!(t.value(c).data(), &[1., 2., 5., 6., 3., 4., 7., 8.]);
        let s = t.slice(c, 1, 1, 2).unwrap();
        assert_eq!(t.value(s).data(), &[5., 6., 7., 8.]);
        let loss = t.sum(s);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0; 4]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let mut t = Tape::new();
            let x = t.param(Tensor::new([3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
            let w = t.param(Tensor::new([4, 2], (0..8).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap());
            let y = t.matmul(x, w).unwrap();
            let s = t.softplus(y);
            let n = t.l2_norm_axis(s, 1, false).unwrap();
            let loss = t.sum(n);
            let g = t.backward(loss).unwrap();
            (g.get(x).unwrap().clone(), g.get(w).unwrap().clone())
        };
        assert_eq!(build(), build());
    }
}
