//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in exact reverse order,
//! accumulating adjoints into zero-initialised buffers. Trainable weights
//! live outside the graph in a [`ParamStore`]; each forward pass copies the
//! weights it touches into leaf nodes with [`Graph::param`] and
//! [`Graph::backward_into`] adds the resulting gradients back into the store.
//!
//! Storage is row-major. The only broadcasting supported is between a tensor
//! and a one-element tensor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    Rank(Vec<usize>),
    #[error("invalid argument to {op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(AutodiffError::Invalid {
                op: "tensor",
                msg: format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// A `[1 × n]` row vector.
    pub fn row(data: Vec<f64>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    /// Weight matrices are subject to weight decay; biases and gains are not.
    pub is_weight: bool,
}

/// Named trainable tensors plus their accumulated gradients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, is_weight: bool) -> ParamId {
        let grad = vec![0.0; value.len()];
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            is_weight,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm {
            let s = max_norm / norm;
            for p in &mut self.params {
                p.grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Neg(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(Var),
    Gather(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    L2Norm(Var),
    GradScale(Var, f64),
    LstmCell {
        x: Var,
        h: Var,
        c: Var,
        w: Var,
        b: Var,
        /// Activated gates per row, ordered input, forget, cell, output.
        gates: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if no gradient
    /// reached it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Tape of operations recorded during one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::Shape {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

/// Dot product with four interleaved partial sums.
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
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
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    /// Value of a one-element tensor.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf input; gradients are tracked iff `requires_grad`.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// A non-tracked leaf. No gradient ever flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Copies a parameter into the graph as a tracked leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id), true)
    }

    /// Copies a parameter in without tracking (frozen weights).
    pub fn param_frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Leaf, false)
    }

    /// Cuts the graph: returns a non-tracked copy of `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ta.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.data[p * n..(p + 1) * n];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape.len() != 2 {
            return Err(AutodiffError::Invalid {
                op: "transpose",
                msg: format!("expected rank 2, got {:?}", t.shape),
            });
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![c, r], data: out }, Op::Transpose(x), rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape == tb.shape {
            Tensor {
                shape: ta.shape.clone(),
                data: ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect(),
            }
        } else if tb.data.len() == 1 {
            let y = tb.data[0];
            Tensor {
                shape: ta.shape.clone(),
                data: ta.data.iter().map(|x| f(*x, y)).collect(),
            }
        } else if ta.data.len() == 1 {
            let x = ta.data[0];
            Tensor {
                shape: tb.shape.clone(),
                data: tb.data.iter().map(|y| f(x, *y)).collect(),
            }
        } else {
            return Err(shape_err(name, ta, tb));
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| f(*v)).collect(),
        };
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    /// Fused LSTM step over `m` rows. `x` is `[m × I]`, `h` and `c` are
    /// `[m × H]`, `w` is `[(I + H) × 4H]` with gate blocks input, forget,
    /// cell, output and `b` is `[1 × 4H]`. Returns `[m × 2H]`: the new
    /// hidden state followed by the new cell state.
    pub fn lstm_cell(&mut self, x: Var, h: Var, c: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, th, tc, tw, tb) = (self.value(x), self.value(h), self.value(c), self.value(w), self.value(b));
        let ok = tx.shape.len() == 2
            && th.shape.len() == 2
            && th.shape == tc.shape
            && tx.shape[0] == th.shape[0]
            && tw.shape == [tx.shape[1] + th.shape[1], 4 * th.shape[1]]
            && tb.shape == [1, 4 * th.shape[1]];
        if !ok {
            return Err(AutodiffError::Invalid {
                op: "lstm_cell",
                msg: format!(
                    "x {:?}, h {:?}, c {:?}, w {:?}, b {:?}",
                    tx.shape, th.shape, tc.shape, tw.shape, tb.shape
                ),
            });
        }
        let (m, ni, nh) = (tx.shape[0], tx.shape[1], th.shape[1]);
        let n4 = 4 * nh;
        let mut gates = vec![0.0; m * n4];
        let mut out = vec![0.0; m * 2 * nh];
        for r in 0..m {
            let z = &mut gates[r * n4..(r + 1) * n4];
            z.copy_from_slice(&tb.data);
            let xs = tx.data[r * ni..(r + 1) * ni].iter().chain(&th.data[r * nh..(r + 1) * nh]);
            for (p, &v) in xs.enumerate() {
                if v == 0.0 {
                    continue;
                }
                for (o, wv) in z.iter_mut().zip(&tw.data[p * n4..(p + 1) * n4]) {
                    *o += v * wv;
                }
            }
            for k in 0..nh {
                let i = sigmoid(z[k]);
                let f = sigmoid(z[nh + k]);
                let gg = z[2 * nh + k].tanh();
                let o = sigmoid(z[3 * nh + k]);
                let c2 = f * tc.data[r * nh + k] + i * gg;
                out[r * 2 * nh + k] = o * c2.tanh();
                out[r * 2 * nh + nh + k] = c2;
                z[k] = i;
                z[nh + k] = f;
                z[2 * nh + k] = gg;
                z[3 * nh + k] = o;
            }
        }
        let rg = [x, h, c, w, b].iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor {
                shape: vec![m, 2 * nh],
                data: out,
            },
            Op::LstmCell { x, h, c, w, b, gates },
            rg,
        ))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    /// Identity on the forward pass; multiplies the incoming gradient by
    /// `factor` on the way back. `factor = -beta` gives gradient reversal.
    pub fn grad_scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x).clone();
        let rg = self.rg(x);
        self.push(v, Op::GradScale(x, factor), rg)
    }

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<()> {
        let r = self.shape(x).len();
        if axis >= r.max(1) || r > 2 {
            return Err(AutodiffError::Invalid {
                op,
                msg: format!("axis {} invalid for shape {:?}", axis, self.shape(x)),
            });
        }
        Ok(())
    }

    /// Lanes of a rank ≤ 2 tensor along `axis`: (count, length, stride between
    /// consecutive elements, offset of lane i).
    fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize, Box<dyn Fn(usize) -> usize>) {
        if shape.len() == 1 {
            return (1, shape[0], 1, Box::new(|_| 0));
        }
        let (r, c) = (shape[0], shape[1]);
        if axis == 1 {
            (r, c, 1, Box::new(move |i| i * c))
        } else {
            (c, r, c, Box::new(|i| i))
        }
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let t = self.value(x);
        let mut out = t.data.clone();
        let (count, len, stride, off) = Self::lanes(&t.shape, axis);
        for lane in 0..count {
            let o = off(lane);
            let m = (0..len).map(|j| out[o + j * stride]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..len {
                let e = (out[o + j * stride] - m).exp();
                out[o + j * stride] = e;
                s += e;
            }
            for j in 0..len {
                out[o + j * stride] /= s;
            }
        }
        let value = Tensor { shape: t.shape.clone(), data: out };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x, axis), rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "log_softmax")?;
        let t = self.value(x);
        let mut out = t.data.clone();
        let (count, len, stride, off) = Self::lanes(&t.shape, axis);
        for lane in 0..count {
            let o = off(lane);
            let m = (0..len).map(|j| out[o + j * stride]).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..len).map(|j| (out[o + j * stride] - m).exp()).sum::<f64>().ln();
            for j in 0..len {
                out[o + j * stride] -= lse;
            }
        }
        let value = Tensor { shape: t.shape.clone(), data: out };
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSoftmax(x, axis), rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(AutodiffError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let first = self.value(xs[0]).clone();
        let rank = first.shape.len();
        if axis >= rank || rank > 2 {
            return Err(AutodiffError::Invalid {
                op: "concat",
                msg: format!("axis {} invalid for shape {:?}", axis, first.shape),
            });
        }
        for &x in &xs[1..] {
            let t = self.value(x);
            let ok = t.shape.len() == rank && (rank == 1 || t.shape[1 - axis] == first.shape[1 - axis]);
            if !ok {
                return Err(shape_err("concat", &first, t));
            }
        }
        let value = if rank == 1 || axis == 0 {
            let mut data = Vec::new();
            let mut n0 = 0;
            for &x in xs {
                let t = self.value(x);
                n0 += t.shape[0];
                data.extend_from_slice(&t.data);
            }
            let mut shape = first.shape.clone();
            shape[0] = n0;
            Tensor { shape, data }
        } else {
            let rows = first.shape[0];
            let total: usize = xs.iter().map(|&x| self.shape(x)[1]).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &x in xs {
                    let t = self.value(x);
                    let c = t.shape[1];
                    data.extend_from_slice(&t.data[r * c..(r + 1) * c]);
                }
            }
            Tensor {
                shape: vec![rows, total],
                data,
            }
        };
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(value, Op::Concat(xs.to_vec(), axis), rg))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let rank = t.shape.len();
        if axis >= rank || rank > 2 || start + len > t.shape[axis] || len == 0 {
            return Err(AutodiffError::Invalid {
                op: "slice",
                msg: format!("[{}..{}) on axis {} of {:?}", start, start + len, axis, t.shape),
            });
        }
        let value = if rank == 1 {
            Tensor {
                shape: vec![len],
                data: t.data[start..start + len].to_vec(),
            }
        } else if axis == 0 {
            let c = t.shape[1];
            Tensor {
                shape: vec![len, c],
                data: t.data[start * c..(start + len) * c].to_vec(),
            }
        } else {
            let (r, c) = (t.shape[0], t.shape[1]);
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&t.data[i * c + start..i * c + start + len]);
            }
            Tensor {
                shape: vec![r, len],
                data,
            }
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Slice { x, axis, start, len }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() {
            return Err(AutodiffError::Shape {
                op: "reshape",
                lhs: t.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: t.data.clone(),
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Flattens to a rank-1 tensor.
    pub fn flatten(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        self.reshape(x, &[n]).expect("flatten preserves size")
    }

    /// Picks elements by flat row-major index into a rank-1 tensor.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.len()) {
            return Err(AutodiffError::Invalid {
                op: "gather",
                msg: format!("index {} out of range for {} elements", bad, t.len()),
            });
        }
        let data = indices.iter().map(|&i| t.data[i]).collect::<Vec<_>>();
        let value = Tensor {
            shape: vec![data.len()],
            data,
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Gather(x, indices.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Inner product of two equally sized tensors (any shapes).
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(shape_err("dot", ta, tb));
        }
        let s = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), rg))
    }

    /// Euclidean norm of all elements.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::L2Norm(x), rg)
    }

    /// Runs reverse-mode differentiation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(AutodiffError::Rank(lt.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward pass that adds leaf-parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate().take(grads.grads.len()) {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                add_into(&mut store.get_mut(*id).grad, g);
            }
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        // Returns the accumulation buffer of `v`, or None if it is not tracked.
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]))
                } else {
                    None
                }
            }};
        }
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if let Some(ga) = buf!(*a) {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data[p * n..(p + 1) * n];
                            ga[r * k + p] += dot4(grow, brow);
                        }
                    }
                }
                if let Some(gb) = buf!(*b) {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = ta.data[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let gbrow = &mut gb[p * n..(p + 1) * n];
                            for (d, x) in gbrow.iter_mut().zip(grow) {
                                *d += av * x;
                            }
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).shape[0], val(*x).shape[1]);
                if let Some(gx) = buf!(*x) {
                    for a in 0..r {
                        for b in 0..c {
                            gx[a * c + b] += g[b * r + a];
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let na = val(*a).len();
                let nb = val(*b).len();
                if let Some(ga) = buf!(*a) {
                    if na == g.len() {
                        add_into(ga, g);
                    } else {
                        ga[0] += g.iter().sum::<f64>();
                    }
                }
                if let Some(gb) = buf!(*b) {
                    if nb == g.len() {
                        for (d, x) in gb.iter_mut().zip(g) {
                            *d += sign * x;
                        }
                    } else {
                        gb[0] += sign * g.iter().sum::<f64>();
                    }
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(nodes[i].op, Op::Div(..));
                let (ta, tb) = (val(*a), val(*b));
                let n = g.len();
                let av = |j: usize| if ta.len() == 1 { ta.data[0] } else { ta.data[j] };
                let bv = |j: usize| if tb.len() == 1 { tb.data[0] } else { tb.data[j] };
                if let Some(ga) = buf!(*a) {
                    for j in 0..n {
                        let d = if is_div { g[j] / bv(j) } else { g[j] * bv(j) };
                        if ga.len() == 1 {
                            ga[0] += d;
                        } else {
                            ga[j] += d;
                        }
                    }
                }
                if let Some(gb) = buf!(*b) {
                    for j in 0..n {
                        let d = if is_div {
                            -g[j] * av(j) / (bv(j) * bv(j))
                        } else {
                            g[j] * av(j)
                        };
                        if gb.len() == 1 {
                            gb[0] += d;
                        } else {
                            gb[j] += d;
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = buf!(*x) {
                    for (d, v) in gx.iter_mut().zip(g) {
                        *d += s * v;
                    }
                }
            }
            Op::GradScale(x, s) => {
                if let Some(gx) = buf!(*x) {
                    for (d, v) in gx.iter_mut().zip(g) {
                        *d += s * v;
                    }
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = buf!(*x) {
                    add_into(gx, g);
                }
            }
            Op::Neg(x) => {
                if let Some(gx) = buf!(*x) {
                    for (d, v) in gx.iter_mut().zip(g) {
                        *d -= v;
                    }
                }
            }
            Op::LstmCell { x, h, c, w, b, gates } => {
                let (tx, th, tc, tw) = (val(*x), val(*h), val(*c), val(*w));
                let (m, ni, nh) = (tx.shape[0], tx.shape[1], th.shape[1]);
                let n4 = 4 * nh;
                let mut dz = vec![0.0; m * n4];
                let mut dc_prev = vec![0.0; m * nh];
                for r in 0..m {
                    let gr = &gates[r * n4..(r + 1) * n4];
                    for k in 0..nh {
                        let (i, f, gg, o) = (gr[k], gr[nh + k], gr[2 * nh + k], gr[3 * nh + k]);
                        let c2 = out.data[r * 2 * nh + nh + k];
                        let t = c2.tanh();
                        let dh = g[r * 2 * nh + k];
                        let dc = g[r * 2 * nh + nh + k] + dh * o * (1.0 - t * t);
                        let z = &mut dz[r * n4..(r + 1) * n4];
                        z[k] = dc * gg * i * (1.0 - i);
                        z[nh + k] = dc * tc.data[r * nh + k] * f * (1.0 - f);
                        z[2 * nh + k] = dc * i * (1.0 - gg * gg);
                        z[3 * nh + k] = dh * t * o * (1.0 - o);
                        dc_prev[r * nh + k] = dc * f;
                    }
                }
                if let Some(gw) = buf!(*w) {
                    for r in 0..m {
                        let z = &dz[r * n4..(r + 1) * n4];
                        let xs = tx.data[r * ni..(r + 1) * ni].iter().chain(&th.data[r * nh..(r + 1) * nh]);
                        for (p, &v) in xs.enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            for (d, zv) in gw[p * n4..(p + 1) * n4].iter_mut().zip(z) {
                                *d += v * zv;
                            }
                        }
                    }
                }
                if let Some(gb) = buf!(*b) {
                    for r in 0..m {
                        add_into(gb, &dz[r * n4..(r + 1) * n4]);
                    }
                }
                if nodes[x.0].requires_grad || nodes[h.0].requires_grad {
                    let mut dxh = vec![0.0; m * (ni + nh)];
                    for r in 0..m {
                        let z = &dz[r * n4..(r + 1) * n4];
                        for p in 0..ni + nh {
                            dxh[r * (ni + nh) + p] = dot4(&tw.data[p * n4..(p + 1) * n4], z);
                        }
                    }
                    if let Some(gx) = buf!(*x) {
                        for r in 0..m {
                            add_into(&mut gx[r * ni..(r + 1) * ni], &dxh[r * (ni + nh)..r * (ni + nh) + ni]);
                        }
                    }
                    if let Some(gh) = buf!(*h) {
                        for r in 0..m {
                            add_into(&mut gh[r * nh..(r + 1) * nh], &dxh[r * (ni + nh) + ni..(r + 1) * (ni + nh)]);
                        }
                    }
                }
                if let Some(gc) = buf!(*c) {
                    add_into(gc, &dc_prev);
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = buf!(*x) {
                    for ((d, v), y) in gx.iter_mut().zip(g).zip(&out.data) {
                        *d += v * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = buf!(*x) {
                    for ((d, v), y) in gx.iter_mut().zip(g).zip(&out.data) {
                        *d += v * y * (1.0 - y);
                    }
                }
            }
            Op::Relu(x) => {
                let xin = &val(*x).data;
                if let Some(gx) = buf!(*x) {
                    for ((d, v), xv) in gx.iter_mut().zip(g).zip(xin) {
                        if *xv > 0.0 {
                            *d += v;
                        }
                    }
                }
            }
            Op::Softplus(x) => {
                let xin = &val(*x).data;
                if let Some(gx) = buf!(*x) {
                    for ((d, v), xv) in gx.iter_mut().zip(g).zip(xin) {
                        *d += v * sigmoid(*xv);
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = buf!(*x) {
                    for ((d, v), y) in gx.iter_mut().zip(g).zip(&out.data) {
                        *d += v * y;
                    }
                }
            }
            Op::Log(x) => {
                let xin = &val(*x).data;
                if let Some(gx) = buf!(*x) {
                    for ((d, v), xv) in gx.iter_mut().zip(g).zip(xin) {
                        *d += v / xv;
                    }
                }
            }
            Op::Square(x) => {
                let xin = &val(*x).data;
                if let Some(gx) = buf!(*x) {
                    for ((d, v), xv) in gx.iter_mut().zip(g).zip(xin) {
                        *d += 2.0 * v * xv;
                    }
                }
            }
            Op::Sqrt(x) => {
                if let Some(gx) = buf!(*x) {
                    for ((d, v), y) in gx.iter_mut().zip(g).zip(&out.data) {
                        *d += v * 0.5 / y;
                    }
                }
            }
            Op::Softmax(x, axis) => {
                let (count, len, stride, off) = Self::lanes(&out.shape, *axis);
                if let Some(gx) = buf!(*x) {
                    for lane in 0..count {
                        let o = off(lane);
                        let dotp: f64 = (0..len).map(|j| g[o + j * stride] * out.data[o + j * stride]).sum();
                        for j in 0..len {
                            let idx = o + j * stride;
                            gx[idx] += out.data[idx] * (g[idx] - dotp);
                        }
                    }
                }
            }
            Op::LogSoftmax(x, axis) => {
                let (count, len, stride, off) = Self::lanes(&out.shape, *axis);
                if let Some(gx) = buf!(*x) {
                    for lane in 0..count {
                        let o = off(lane);
                        let gs: f64 = (0..len).map(|j| g[o + j * stride]).sum();
                        for j in 0..len {
                            let idx = o + j * stride;
                            gx[idx] += g[idx] - out.data[idx].exp() * gs;
                        }
                    }
                }
            }
            Op::Concat(xs, axis) => {
                let rank = out.shape.len();
                if rank == 1 || *axis == 0 {
                    let mut offset = 0;
                    for &x in xs {
                        let n = val(x).len();
                        if let Some(gx) = buf!(x) {
                            add_into(gx, &g[offset..offset + n]);
                        }
                        offset += n;
                    }
                } else {
                    let (rows, total) = (out.shape[0], out.shape[1]);
                    let mut col = 0;
                    for &x in xs {
                        let c = val(x).shape[1];
                        if let Some(gx) = buf!(x) {
                            for r in 0..rows {
                                add_into(&mut gx[r * c..(r + 1) * c], &g[r * total + col..r * total + col + c]);
                            }
                        }
                        col += c;
                    }
                }
            }
            Op::Slice { x, axis, start, len } => {
                let shape = val(*x).shape.clone();
                if let Some(gx) = buf!(*x) {
                    if shape.len() == 1 {
                        add_into(&mut gx[*start..start + len], g);
                    } else if *axis == 0 {
                        let c = shape[1];
                        add_into(&mut gx[start * c..(start + len) * c], g);
                    } else {
                        let (r, c) = (shape[0], shape[1]);
                        for row in 0..r {
                            add_into(&mut gx[row * c + start..row * c + start + len], &g[row * len..(row + 1) * len]);
                        }
                    }
                }
            }
            Op::Gather(x, idx) => {
                if let Some(gx) = buf!(*x) {
                    for (k, &j) in idx.iter().enumerate() {
                        gx[j] += g[k];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::Dot(a, b) => {
                let (ta, tb) = (val(*a).data.clone(), val(*b).data.clone());
                if let Some(ga) = buf!(*a) {
                    for (d, y) in ga.iter_mut().zip(&tb) {
                        *d += g[0] * y;
                    }
                }
                if let Some(gb) = buf!(*b) {
                    for (d, x) in gb.iter_mut().zip(&ta) {
                        *d += g[0] * x;
                    }
                }
            }
            Op::L2Norm(x) => {
                let norm = out.data[0];
                let xin = &val(*x).data;
                if let Some(gx) = buf!(*x) {
                    if norm > 0.0 {
                        for (d, xv) in gx.iter_mut().zip(xin) {
                            *d += g[0] * xv / norm;
                        }
                    }
                }
            }
        }
    }
}

pub fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_entries_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![2.5; 7]));
        let s = g.softmax(x, 1).unwrap();
        for v in g.data(s) {
            assert!((v - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![1000.0, 1000.0]));
        let s = g.softmax(x, 1).unwrap();
        assert_eq!(g.data(s), &[0.5, 0.5]);
    }

    #[test]
    fn concat_along_columns() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 5]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 8]);
    }

    #[test]
    fn concat_rejects_mismatched_rows() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(g.concat(&[a, b], 1), Err(AutodiffError::Shape { .. })));
    }

    #[test]
    fn matmul_shape_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(AutodiffError::Shape { .. })));
        let z = g.constant(Tensor::zeros(&[4]));
        assert!(matches!(g.add(a, z), Err(AutodiffError::Shape { .. })));
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_input() {
        let mut g = Graph::new();
        let xs = vec![0.5, -1.25, 3.0, 0.0];
        let x = g.leaf(Tensor::row(xs.clone()), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        let gx = grads.wrt(x).unwrap();
        for (gv, xv) in gx.iter().zip(&xs) {
            assert_eq!(*gv, 2.0 * xv);
        }
    }

    #[test]
    fn reused_tensor_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.7), true);
        let y = g.add(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_on_vector_is_rank_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(AutodiffError::Rank(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1.0, 2.0]), true);
        let c = g.detach(x);
        let y = g.mul(x, c).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn grad_scale_reverses() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1.0, -2.0]), true);
        let r = g.grad_scale(x, -0.5);
        assert_eq!(g.data(r), g.data(x));
        let sq = g.square(r);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[-1.0, 2.0]);
    }

    #[test]
    fn backward_into_accumulates_across_passes() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row(vec![3.0]), true);
        for _ in 0..2 {
            let mut g = Graph::new();
            let x = g.param(&store, w);
            let y = g.square(x);
            let l = g.sum(y);
            g.backward_into(l, &mut store).unwrap();
        }
        assert_eq!(store.get(w).grad, vec![12.0]);
        store.zero_grad();
        assert_eq!(store.get(w).grad, vec![0.0]);
    }

    #[test]
    fn clip_grad_norm_rescales() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row(vec![0.0, 0.0]), true);
        store.get_mut(w).grad = vec![3.0, 4.0];
        let n = store.clip_grad_norm(1.0);
        assert_eq!(n, 5.0);
        assert!((store.grad_norm() - 1.0).abs() < 1e-12);
    }
}
