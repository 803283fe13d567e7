//! Reverse-mode differentiation over row-batched matrices.
//!
//! Every value on the tape is a 2-D array whose rows are batch elements.
//! Parameters enter the tape by reference and are identified by name; the
//! backward pass returns one gradient tensor per reachable parameter name.
//!
//! Binary element-wise ops broadcast a `[1, k]`, `[n, 1]` or `[1, 1]` operand
//! against the other side, and the backward pass sums the broadcast axes.

use std::borrow::Cow;
use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    name: String,
    value: Array2<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Array2<f64>) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Array2<f64> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Array2<f64> {
        &mut self.value
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.value.iter().all(|v| v.is_finite())
    }
}

/// Gradient tensors keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    tensors: BTreeMap<String, Array2<f64>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Adds `grad` into the tensor stored under `name`.
    pub fn accumulate(&mut self, name: &str, grad: &Array2<f64>) -> Result<()> {
        match self.tensors.get_mut(name) {
            Some(existing) => {
                if existing.dim() != grad.dim() {
                    return Err(Error::Shape(format!(
                        "gradient for {name}: {:?} vs {:?}",
                        existing.dim(),
                        grad.dim()
                    )));
                }
                *existing += grad;
            }
            None => {
                self.tensors.insert(name.to_owned(), grad.clone());
            }
        }
        Ok(())
    }

    /// Sums every tensor of `other` into `self`.
    pub fn merge(&mut self, other: &Gradients) -> Result<()> {
        for (name, grad) in other.iter() {
            self.accumulate(name, grad)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors.values_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .map(|t| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
    }
}

enum Op<'p> {
    Leaf,
    Param(&'p str),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    SoftmaxRows(Var),
    RowDot(Var, Var),
    SumCols(Var),
    Sum(Var),
    Mean(Var),
}

struct Node<'p> {
    value: Cow<'p, Array2<f64>>,
    op: Op<'p>,
    requires_grad: bool,
}

/// Tape of batched matrix operations.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_dim(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let pick = |x: usize, y: usize| -> usize {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("incompatible broadcast shapes {a:?} and {b:?}")
        }
    };
    (pick(a.0, b.0), pick(a.1, b.1))
}

/// Sums `grad` down to `shape` along broadcast axes.
fn reduce_to(grad: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = grad;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Array2<f64>>, op: Op<'p>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Array2<f64>, op: Op<'p>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        assert_eq!(value.dim(), (1, 1), "scalar() on non-scalar node");
        value[[0, 0]]
    }

    /// Owned constant; no gradient flows into it.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// Borrowed constant; no gradient flows into it.
    pub fn constant(&mut self, value: &'p Array2<f64>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    /// Trainable parameter; its gradient is reported under its name.
    pub fn param(&mut self, p: &'p Param) -> Var {
        self.push(Cow::Borrowed(&p.value), Op::Param(&p.name), true)
    }

    /// Parameter bound as a constant (gradients flow through it, not into it).
    pub fn frozen(&mut self, p: &'p Param) -> Var {
        self.constant(&p.value)
    }

    /// `a · bᵀ` for `a: [n, k]`, `b: [m, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(
            av.ncols(),
            bv.ncols(),
            "matmul_t inner dims {:?} x {:?}ᵀ",
            av.dim(),
            bv.dim()
        );
        let out = av.dot(&bv.t());
        self.push_op(out, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let shape = broadcast_dim(self.shape(a), self.shape(b));
        let out = self.value(a) + self.value(b);
        debug_assert_eq!(out.dim(), shape);
        self.push_op(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        broadcast_dim(self.shape(a), self.shape(b));
        let out = self.value(a) - self.value(b);
        self.push_op(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        broadcast_dim(self.shape(a), self.shape(b));
        let out = self.value(a) * self.value(b);
        self.push_op(out, Op::Mul(a, b), &[a, b])
    }

    /// Element-wise minimum of two same-shaped nodes.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "min requires equal shapes");
        let mut out = self.value(a).clone();
        Zip::from(&mut out)
            .and(self.value(b))
            .for_each(|x, &y| *x = x.min(y));
        self.push_op(out, Op::Min(a, b), &[a, b])
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).mapv(|v| scale * v + shift);
        self.push_op(out, Op::Affine(a, scale), &[a])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.affine(a, factor, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push_op(out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push_op(out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(0.0));
        self.push_op(out, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push_op(out, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        self.push_op(out, Op::Ln(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(softplus);
        self.push_op(out, Op::Softplus(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v * v);
        self.push_op(out, Op::Square(a), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).mapv(|v| v.clamp(lo, hi));
        self.push_op(out, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Array2::zeros((rows, cols));
        let mut offset = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.nrows(), rows, "concat_cols row mismatch");
            out.slice_mut(s![.., offset..offset + v.ncols()]).assign(v);
            offset += v.ncols();
        }
        self.push_op(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        assert!(
            start < end && end <= self.shape(a).1,
            "slice_cols out of range"
        );
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        self.push_op(out, Op::SliceCols(a, start, end), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let total = row.sum();
            row.mapv_inplace(|v| v / total);
        }
        self.push_op(out, Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise inner products of two `[n, k]` nodes, giving `[n, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "row_dot requires equal shapes"
        );
        let prod = self.value(a) * self.value(b);
        let out = prod.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push_op(out, Op::RowDot(a, b), &[a, b])
    }

    /// Sums each row, giving `[n, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push_op(out, Op::SumCols(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push_op(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        self.push_op(out, Op::Mean(a), &[a])
    }

    /// Gradients of the scalar `loss` with respect to every reachable
    /// parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.dim() != (1, 1) {
            return Err(Error::Shape(format!(
                "loss must be a [1, 1] scalar, got {:?}",
                lv.dim()
            )));
        }
        if !lv[[0, 0]].is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", lv[[0, 0]])));
        }

        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let y = node.value.as_ref();
            let mut acc = |v: Var, delta: Array2<f64>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => out.accumulate(name, &g)?,
                Op::MatMulT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].requires_grad {
                        acc(*a, g.dot(bv));
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(*b, g.t().dot(av));
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, reduce_to(g.clone(), self.shape(*a)));
                    acc(*b, reduce_to(g, self.shape(*b)));
                }
                Op::Sub(a, b) => {
                    acc(*a, reduce_to(g.clone(), self.shape(*a)));
                    acc(*b, reduce_to(-g, self.shape(*b)));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].requires_grad {
                        acc(*a, reduce_to(&g * bv, av.dim()));
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(*b, reduce_to(&g * av, bv.dim()));
                    }
                }
                Op::Min(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = g.clone();
                    let mut gb = g;
                    Zip::from(&mut ga)
                        .and(&mut gb)
                        .and(av)
                        .and(bv)
                        .for_each(|ga, gb, &x, &y| {
                            if x <= y {
                                *gb = 0.0;
                            } else {
                                *ga = 0.0;
                            }
                        });
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Affine(a, scale) => acc(*a, g * *scale),
                Op::Tanh(a) => acc(*a, g * &y.mapv(|t| 1.0 - t * t)),
                Op::Sigmoid(a) => acc(*a, g * &y.mapv(|s| s * (1.0 - s))),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    acc(*a, g * &x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
                }
                Op::Exp(a) => acc(*a, g * y),
                Op::Ln(a) => acc(*a, g / self.value(*a)),
                Op::Softplus(a) => acc(*a, g * &self.value(*a).mapv(sigmoid)),
                Op::Square(a) => acc(*a, g * &self.value(*a).mapv(|v| 2.0 * v)),
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(*a);
                    let pass = x.mapv(|v| if v >= *lo && v <= *hi { 1.0 } else { 0.0 });
                    acc(*a, g * &pass);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        acc(*p, g.slice(s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut full = Array2::zeros(self.shape(*a));
                    full.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(*a, full);
                }
                Op::SoftmaxRows(a) => {
                    let gy = &g * y;
                    let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*a, gy - &(y * &dot));
                }
                Op::RowDot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].requires_grad {
                        acc(*a, bv * &g);
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(*b, av * &g);
                    }
                }
                Op::SumCols(a) => {
                    let shape = self.shape(*a);
                    acc(*a, g.broadcast(shape).expect("sum_cols grad").to_owned());
                }
                Op::Sum(a) => acc(*a, Array2::from_elem(self.shape(*a), g[[0, 0]])),
                Op::Mean(a) => {
                    let shape = self.shape(*a);
                    let n = (shape.0 * shape.1) as f64;
                    acc(*a, Array2::from_elem(shape, g[[0, 0]] / n));
                }
            }
        }
        Ok(out)
    }
}
