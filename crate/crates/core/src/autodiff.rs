//! Minimal reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tape`] records every operation in execution order, so node indices are
//! already a topological order. [`Tape::backward`] walks the nodes once in reverse,
//! applying the local rule of each op and accumulating into its inputs. Broadcasting
//! is limited to the row-wise bias add.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense tensor with flat row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!("shape {shape:?} needs {expected} values, got {}", data.len())));
        }
        Ok(Self { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![S::zero(); n], grad: None, requires_grad: false }
    }

    pub fn scalar(v: S) -> Self {
        Self { shape: vec![1], data: vec![v], grad: None, requires_grad: false }
    }

    /// Builds an `N×C` matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        self.data[0]
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Dimension(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = *self.shape.last().unwrap_or(&1);
        &self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used to name ops in diagnostics and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    AddBias,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Softmax,
    Clamp,
    Ln,
    Sum,
    Reshape,
    Detach,
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => OpKind::MatMul,
            "add_bias" => OpKind::AddBias,
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "mul" => OpKind::Mul,
            "scale" => OpKind::Scale,
            "relu" => OpKind::Relu,
            "softmax" => OpKind::Softmax,
            "clamp" => OpKind::Clamp,
            "ln" => OpKind::Ln,
            "sum" => OpKind::Sum,
            "reshape" => OpKind::Reshape,
            other => return Err(Error::Parameter(format!("unknown op kind {other:?}"))),
        })
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Softmax(Var, S),
    Clamp(Var, S, S),
    Ln(Var),
    Sum(Var),
    Reshape(Var),
    // input kept for graph inspection; gradient stops here
    #[allow(dead_code)]
    Detach(Var),
}

impl<S> Op<S> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(..) => OpKind::Relu,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Ln(..) => OpKind::Ln,
            Op::Sum(..) => OpKind::Sum,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Detach(..) => OpKind::Detach,
        }
    }
}

#[derive(Debug)]
struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Records operations for a single forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
    fault: Option<(OpKind, S)>,
}

fn matmul_raw<S: Scalar>(a: &[S], b: &[S], n: usize, k: usize, m: usize) -> Vec<S> {
    let mut out = vec![S::zero(); n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Row-wise tempered softmax with max subtraction.
pub fn softmax_rows<S: Scalar>(x: &[S], cols: usize, temperature: S) -> Vec<S> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let exps: Vec<S> = row.iter().map(|&v| ((v - max) / temperature).exp()).collect();
        let total: S = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), fault: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scales the gradient emitted by every op of `kind`. Test fixture for
    /// negative controls of the gradient audit; never set in training.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind, factor: S) {
        self.fault = Some((kind, factor));
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to `v`, if it was tracked.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].value.grad()
    }

    /// Records a leaf; gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> Var {
        self.nodes.push(Node { value: Tensor { grad: None, ..tensor }, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor<S>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<S>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, op: Op<S>) -> Var {
        let requires_grad = match &op {
            Op::Leaf | Op::Detach(_) => false,
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                self.nodes[a.0].value.requires_grad || self.nodes[b.0].value.requires_grad
            }
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Softmax(a, _)
            | Op::Clamp(a, ..)
            | Op::Ln(a)
            | Op::Sum(a)
            | Op::Reshape(a) => self.nodes[a.0].value.requires_grad,
        };
        let value = Tensor { shape, data, grad: None, requires_grad };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].value.shape, &self.nodes[b.0].value.shape);
        if sa != sb {
            return Err(Error::Dimension(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let ((n, k), (k2, m)) = (ta.dims2()?, tb.dims2()?);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: inner extents differ for shapes {:?} and {:?}",
                ta.shape, tb.shape
            )));
        }
        let data = matmul_raw(&ta.data, &tb.data, n, k, m);
        Ok(self.push(vec![n, m], data, Op::MatMul(a, b)))
    }

    /// Adds a length-`M` bias to every row of an `N×M` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let (n, m) = tx.dims2()?;
        if tb.len() != m {
            return Err(Error::Dimension(format!(
                "add_bias: bias shape {:?} does not match matrix shape {:?}",
                tb.shape, tx.shape
            )));
        }
        let data = tx.data.chunks(m).flat_map(|row| row.iter().zip(&tb.data).map(|(&a, &b)| a + b)).collect();
        Ok(self.push(vec![n, m], data, Op::AddBias(x, bias)))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<Var> {
        self.same_shape(a, b, &format!("{:?}", op.kind()))?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape.clone();
        Ok(self.push(shape, data, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn map(&mut self, a: Var, op: Op<S>, f: impl Fn(S) -> S) -> Var {
        let t = &self.nodes[a.0].value;
        let data = t.data.iter().map(|&x| f(x)).collect();
        let shape = t.shape.clone();
        self.push(shape, data, op)
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        self.map(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x > S::zero() { x } else { S::zero() })
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Var {
        self.map(a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, Op::Ln(a), |x| x.ln())
    }

    /// Identity on values; blocks gradient flow into `a`.
    pub fn detach(&mut self, a: Var) -> Var {
        self.map(a, Op::Detach(a), |x| x)
    }

    /// Row-wise `exp(s_i/T) / Σ_j exp(s_j/T)` over the last axis of a matrix.
    pub fn softmax(&mut self, logits: Var, temperature: S) -> Result<Var> {
        if !(temperature > S::zero()) || !temperature.is_finite() {
            return Err(Error::Parameter(format!("softmax temperature must be positive, got {temperature}")));
        }
        let t = &self.nodes[logits.0].value;
        let (n, c) = t.dims2()?;
        let data = softmax_rows(&t.data, c, temperature);
        Ok(self.push(vec![n, c], data, Op::Softmax(logits, temperature)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.data.iter().copied().sum();
        self.push(vec![1], vec![total], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let s = self.sum(a);
        self.scale(s, S::one() / S::of(n as f64))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::Dimension(format!("cannot reshape {:?} into {shape:?}", t.shape)));
        }
        let data = t.data.clone();
        Ok(self.push(shape, data, Op::Reshape(a)))
    }

    /// Reverse sweep from a scalar loss. Gradients are stored on every node that
    /// depends on a `requires_grad` leaf and replace those of any earlier sweep.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            let factor = match self.fault {
                Some((kind, f)) if kind == op.kind() => f,
                _ => S::one(),
            };
            let contributions = self.local_grads(idx, &op, &g);
            for (input, mut contrib) in contributions {
                if !self.nodes[input.0].value.requires_grad {
                    continue;
                }
                if factor != S::one() {
                    contrib.iter_mut().for_each(|v| *v *= factor);
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a += c),
                    slot => *slot = Some(contrib),
                }
            }
            self.nodes[idx].value.grad = Some(g);
        }
        for node in &mut self.nodes[..=loss.0] {
            if node.value.requires_grad && node.value.grad.is_none() {
                node.value.grad = Some(vec![S::zero(); node.value.len()]);
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, op: &Op<S>, g: &[S]) -> Vec<(Var, Vec<S>)> {
        let out = &self.nodes[idx].value;
        let val = |v: &Var| &self.nodes[v.0].value;
        match *op {
            Op::Leaf | Op::Detach(_) => vec![],
            Op::MatMul(a, b) => {
                let (n, k) = (val(&a).shape[0], val(&a).shape[1]);
                let m = val(&b).shape[1];
                let bt = transpose(&val(&b).data, k, m);
                let at = transpose(&val(&a).data, n, k);
                vec![(a, matmul_raw(g, &bt, n, m, k)), (b, matmul_raw(&at, g, k, n, m))]
            }
            Op::AddBias(x, bias) => {
                let m = val(&bias).len();
                let mut db = vec![S::zero(); m];
                for row in g.chunks(m) {
                    db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
                vec![(x, g.to_vec()), (bias, db)]
            }
            Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
            Op::Sub(a, b) => vec![(a, g.to_vec()), (b, g.iter().map(|&v| -v).collect())],
            Op::Mul(a, b) => {
                let da = g.iter().zip(&val(&b).data).map(|(&gv, &bv)| gv * bv).collect();
                let db = g.iter().zip(&val(&a).data).map(|(&gv, &av)| gv * av).collect();
                vec![(a, da), (b, db)]
            }
            Op::Scale(a, f) => vec![(a, g.iter().map(|&v| v * f).collect())],
            Op::Relu(a) => {
                let d =
                    g.iter().zip(&val(&a).data).map(|(&gv, &x)| if x > S::zero() { gv } else { S::zero() }).collect();
                vec![(a, d)]
            }
            Op::Clamp(a, lo, hi) => {
                let d = g
                    .iter()
                    .zip(&val(&a).data)
                    .map(|(&gv, &x)| if x >= lo && x <= hi { gv } else { S::zero() })
                    .collect();
                vec![(a, d)]
            }
            Op::Ln(a) => vec![(a, g.iter().zip(&val(&a).data).map(|(&gv, &x)| gv / x).collect())],
            Op::Softmax(a, t) => {
                let c = out.shape[1];
                let mut d = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(c).zip(out.data.chunks(c)) {
                    let dot: S = grow.iter().zip(yrow).map(|(&gv, &y)| gv * y).sum();
                    d.extend(grow.iter().zip(yrow).map(|(&gv, &y)| y * (gv - dot) / t));
                }
                vec![(a, d)]
            }
            Op::Sum(a) => vec![(a, vec![g[0]; val(&a).len()])],
            Op::Reshape(a) => vec![(a, g.to_vec())],
        }
    }
}
