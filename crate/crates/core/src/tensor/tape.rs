use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};

use super::{axis_strides, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of a recorded operation, used for inspection and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Param,
    MatMul,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    Tanh,
    Sigmoid,
    Softsign,
    Relu,
    LogCosh,
    LnClamped,
    Map,
    Softmax,
    LayerNorm,
    Concat,
    Narrow,
    GatherRows,
    Transpose,
    Reshape,
    Sum,
    Mean,
    MeanRows,
    RepeatRows,
}

impl OpKind {
    pub const ALL: [OpKind; 26] = [
        OpKind::Leaf,
        OpKind::Param,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddRow,
        OpKind::Scale,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::Softsign,
        OpKind::Relu,
        OpKind::LogCosh,
        OpKind::LnClamped,
        OpKind::Map,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::GatherRows,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::MeanRows,
        OpKind::RepeatRows,
    ];

    /// Case-insensitive lookup by variant name, ignoring underscores.
    pub fn from_name(name: &str) -> Option<OpKind> {
        let key: String = name.chars().filter(|c| *c != '_').collect::<String>().to_lowercase();
        Self::ALL.into_iter().find(|k| format!("{k:?}").to_lowercase() == key)
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Tanh,
    Sigmoid,
    Softsign,
    Relu,
    LogCosh,
    LnClamped { lo: f64, hi: f64 },
    Map { df: fn(f64) -> f64 },
}

impl Unary {
    fn kind(self) -> OpKind {
        match self {
            Unary::Tanh => OpKind::Tanh,
            Unary::Sigmoid => OpKind::Sigmoid,
            Unary::Softsign => OpKind::Softsign,
            Unary::Relu => OpKind::Relu,
            Unary::LogCosh => OpKind::LogCosh,
            Unary::LnClamped { .. } => OpKind::LnClamped,
            Unary::Map { .. } => OpKind::Map,
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softsign => {
                let d = 1.0 + x.abs();
                1.0 / (d * d)
            }
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LogCosh => x.tanh(),
            Unary::LnClamped { lo, hi } => {
                if x > lo && x < hi {
                    1.0 / x
                } else {
                    0.0
                }
            }
            Unary::Map { df } => df(x),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Unary(Var, Unary),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        table: Var,
        rows: Vec<usize>,
    },
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    RepeatRows(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::Unary(_, u) => u.kind(),
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::MeanRows(_) => OpKind::MeanRows,
            Op::RepeatRows(_) => OpKind::RepeatRows,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// A tape is single-threaded; independent tapes may live on different threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, Var>>,
    sign_fault: Cell<Option<OpKind>>,
}

/// Gradients produced by [`Tape::backward`], one slot per recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if the loss depends on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradients aligned with `store`; parameters the loss does not reach get zeros.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        for &(id, var) in &self.params {
            if let Some(g) = self.get(var) {
                out[id.0] = g.clone();
            }
        }
        out
    }

    /// Parameter gradients keyed by parameter name.
    pub fn named(&self, store: &ParamStore) -> BTreeMap<String, Tensor> {
        store
            .iter()
            .map(|(_, p)| p.name.clone())
            .zip(self.param_grads(store))
            .collect()
    }
}

fn finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
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

/// `log(cosh(x))` without overflow for large `|x|`.
pub fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Negates the backward rule of every op of `kind`. Only useful to check
    /// that gradient verification detects a broken rule.
    pub fn inject_sign_fault(&self, kind: OpKind) {
        self.sign_fault.set(Some(kind));
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.shape_of(v)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Runs `f` on the value of `v` without cloning it.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    /// Values of every recorded node of the given kind, in recording order.
    pub fn values_of_kind(&self, kind: OpKind) -> Vec<Tensor> {
        self.nodes
            .borrow()
            .iter()
            .filter(|n| n.op.kind() == kind)
            .map(|n| n.value.clone())
            .collect()
    }

    /// Records an input value.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Brings a parameter onto the tape; repeated calls return the same handle.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.borrow().get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param, true);
        self.params.borrow_mut().insert(id, v);
        v
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
                return Err(Error::shape("matmul", ta.shape(), tb.shape()));
            }
            let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            let mut out = vec![0.0; n * m];
            let (ad, bd) = (ta.data(), tb.data());
            for i in 0..n {
                let row = &mut out[i * m..(i + 1) * m];
                for p in 0..k {
                    let aip = ad[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * m..(p + 1) * m];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += aip * bv;
                    }
                }
            }
            finite("matmul", &out)?;
            Tensor::new(vec![n, m], out)?
        };
        Ok(self.push(value, Op::MatMul(a, b), self.needs(&[a, b])))
    }

    fn zip_same(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        finite(op, &data)?;
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), self.needs(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), self.needs(&[a, b])))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), self.needs(&[a, b])))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tr) = (&nodes[a.0].value, &nodes[row.0].value);
            let cols = ta.cols();
            if tr.len() != cols {
                return Err(Error::shape("add_row", ta.shape(), tr.shape()));
            }
            let mut data = ta.data().to_vec();
            for chunk in data.chunks_mut(cols) {
                for (o, &r) in chunk.iter_mut().zip(tr.data()) {
                    *o += r;
                }
            }
            finite("add_row", &data)?;
            Tensor::new(ta.shape().to_vec(), data)?
        };
        Ok(self.push(value, Op::AddRow(a, row), self.needs(&[a, row])))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let value = self.with_value(a, |t| t.map(|v| v * c));
        finite("scale", value.data())?;
        Ok(self.push(value, Op::Scale(a, c), self.needs(&[a])))
    }

    fn unary(&self, x: Var, u: Unary, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.with_value(x, |t| t.map(f));
        finite(op, value.data())?;
        Ok(self.push(value, Op::Unary(x, u), self.needs(&[x])))
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh, "tanh", f64::tanh)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid, "sigmoid", sigmoid)
    }

    /// `x / (1 + |x|)`.
    pub fn softsign(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Softsign, "softsign", |v| v / (1.0 + v.abs()))
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu, "relu", |v| v.max(0.0))
    }

    /// Elementwise `log(cosh(x))`.
    pub fn log_cosh(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::LogCosh, "log_cosh", log_cosh)
    }

    /// `ln(clamp(x, lo, hi))`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, Unary::LnClamped { lo, hi }, "ln", move |v| v.clamp(lo, hi).ln())
    }

    /// Elementwise user function with its derivative.
    pub fn map(&self, x: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Result<Var> {
        self.unary(x, Unary::Map { df }, "map", f)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if axis >= t.shape().len() {
                return Err(Error::Contract(format!(
                    "softmax axis {axis} out of range for {:?}",
                    t.shape()
                )));
            }
            let (outer, n, inner) = axis_strides(t.shape(), axis);
            let src = t.data();
            let mut out = vec![0.0; src.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * n + j) * inner + i;
                    let max = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for j in 0..n {
                        let e = (src[idx(j)] - max).exp();
                        out[idx(j)] = e;
                        total += e;
                    }
                    for j in 0..n {
                        out[idx(j)] /= total;
                    }
                }
            }
            finite("softmax", &out)?;
            Tensor::new(t.shape().to_vec(), out)?
        };
        Ok(self.push(value, Op::Softmax { x, axis }, self.needs(&[x])))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (value, normalized, inv_std) = {
            let nodes = self.nodes.borrow();
            let (t, g, b) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value);
            let cols = t.cols();
            if g.len() != cols || b.len() != cols {
                return Err(Error::shape("layer_norm", t.shape(), g.shape()));
            }
            let mut normalized = Vec::with_capacity(t.len());
            let mut inv_std = Vec::with_capacity(t.rows());
            let mut out = Vec::with_capacity(t.len());
            for row in t.data().chunks(cols) {
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std.push(s);
                for (j, &v) in row.iter().enumerate() {
                    let n = (v - mean) * s;
                    normalized.push(n);
                    out.push(n * g.data()[j] + b.data()[j]);
                }
            }
            finite("layer_norm", &out)?;
            (Tensor::new(t.shape().to_vec(), out)?, normalized, inv_std)
        };
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            needs,
        ))
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let first = nodes[inputs[0].0].value.shape().to_vec();
            if axis >= first.len() {
                return Err(Error::Contract(format!("concat axis {axis} out of range for {first:?}")));
            }
            let mut total = 0;
            for v in inputs {
                let s = nodes[v.0].value.shape();
                let compatible = s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
                if !compatible {
                    return Err(Error::shape("concat", &first, s));
                }
                total += s[axis];
            }
            let (outer, _, inner) = axis_strides(&first, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in inputs {
                    let t = &nodes[v.0].value;
                    let chunk = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = first;
            shape[axis] = total;
            Tensor::new(shape, data)?
        };
        let needs = self.needs(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// The sub-range `start..start + len` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if axis >= t.shape().len() || len == 0 || start + len > t.shape()[axis] {
                return Err(Error::Contract(format!(
                    "narrow {start}..{} on axis {axis} out of range for {:?}",
                    start + len,
                    t.shape()
                )));
            }
            let (outer, n, inner) = axis_strides(t.shape(), axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                data.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = len;
            Tensor::new(shape, data)?
        };
        Ok(self.push(value, Op::Narrow { x, axis, start }, self.needs(&[x])))
    }

    /// Row `i` of a 2-D tensor, as a 1×cols matrix.
    pub fn row(&self, x: Var, i: usize) -> Result<Var> {
        self.narrow(x, 0, i, 1)
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather_rows(&self, table: Var, rows: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.0].value;
            if t.shape().len() != 2 || rows.is_empty() {
                return Err(Error::Contract("gather_rows needs a 2-D table and at least one index".into()));
            }
            let (n, c) = (t.shape()[0], t.shape()[1]);
            let mut data = Vec::with_capacity(rows.len() * c);
            for &r in rows {
                if r >= n {
                    return Err(Error::Contract(format!("row index {r} out of range for {n} rows")));
                }
                data.extend_from_slice(t.row_slice(r));
            }
            Tensor::new(vec![rows.len(), c], data)?
        };
        let op = Op::GatherRows {
            table,
            rows: rows.to_vec(),
        };
        Ok(self.push(value, op, self.needs(&[table])))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.shape().len() != 2 {
                return Err(Error::Contract(format!("transpose needs 2-D input, got {:?}", t.shape())));
            }
            let (n, m) = (t.shape()[0], t.shape()[1]);
            let mut data = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    data[j * n + i] = t.data()[i * m + j];
                }
            }
            Tensor::new(vec![m, n], data)?
        };
        Ok(self.push(value, Op::Transpose(x), self.needs(&[x])))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), self.needs(&[x])))
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let s = self.with_value(x, |t| t.sum());
        finite("sum", &[s])?;
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), self.needs(&[x])))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let s = self.with_value(x, |t| t.sum() / t.len() as f64);
        finite("mean", &[s])?;
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), self.needs(&[x])))
    }

    /// Averages the rows of a 2-D tensor into a 1×cols matrix.
    pub fn mean_rows(&self, x: Var) -> Result<Var> {
        let value = self.with_value(x, |t| {
            let (n, c) = (t.rows(), t.cols());
            let mut out = vec![0.0; c];
            for row in t.data().chunks(c) {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o /= n as f64);
            Tensor::row(&out)
        });
        Ok(self.push(value, Op::MeanRows(x), self.needs(&[x])))
    }

    /// Tiles a single row `n` times.
    pub fn repeat_rows(&self, x: Var, n: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if n == 0 {
                return Err(Error::Contract("repeat_rows with n = 0".into()));
            }
            let data: Vec<f64> = (0..n).flat_map(|_| t.data().iter().copied()).collect();
            Tensor::new(vec![n, t.len()], data)?
        };
        Ok(self.push(value, Op::RepeatRows(x), self.needs(&[x])))
    }

    /// Affine map `x · w + b` with `b` broadcast over rows.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Propagates gradients from a scalar `loss` back through the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if loss.0 >= nodes.len() {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let fault = self.sign_fault.get();
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            if fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            propagate(&nodes, node, i, &g, &mut grads);
            if fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape")))
            .collect();
        let params = self.params.borrow().iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn propagate(nodes: &[Node], node: &Node, _index: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf | Op::Param => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if let Some(da) = slot(grads, nodes, *a) {
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        let brow = &tb.data()[p * m..(p + 1) * m];
                        da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        let aip = ta.data()[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for (d, &gv) in db[p * m..(p + 1) * m].iter_mut().zip(grow) {
                            *d += aip * gv;
                        }
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(d) = slot(grads, nodes, *v) {
                    d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = slot(grads, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
            }
            if let Some(d) = slot(grads, nodes, *b) {
                d.iter_mut().zip(g).for_each(|(d, gv)| *d -= gv);
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            if let Some(d) = slot(grads, nodes, *a) {
                for ((d, gv), y) in d.iter_mut().zip(g).zip(tb) {
                    *d += gv * y;
                }
            }
            if let Some(d) = slot(grads, nodes, *b) {
                for ((d, gv), x) in d.iter_mut().zip(g).zip(ta) {
                    *d += gv * x;
                }
            }
        }
        Op::AddRow(a, row) => {
            if let Some(d) = slot(grads, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
            }
            let cols = nodes[row.0].value.len();
            if let Some(d) = slot(grads, nodes, *row) {
                for chunk in g.chunks(cols) {
                    d.iter_mut().zip(chunk).for_each(|(d, gv)| *d += gv);
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(d) = slot(grads, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(d, gv)| *d += c * gv);
            }
        }
        Op::Unary(x, u) => {
            let (xs, ys) = (nodes[x.0].value.data(), node.value.data());
            if let Some(d) = slot(grads, nodes, *x) {
                for i in 0..d.len() {
                    d[i] += g[i] * u.derivative(xs[i], ys[i]);
                }
            }
        }
        Op::Softmax { x, axis } => {
            let y = &node.value;
            let (outer, n, inner) = axis_strides(y.shape(), *axis);
            if let Some(d) = slot(grads, nodes, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * y.data()[idx(j)]).sum();
                        for j in 0..n {
                            d[idx(j)] += y.data()[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        } => {
            let cols = node.value.cols();
            let gain_v = nodes[gain.0].value.data();
            if let Some(d) = slot(grads, nodes, *gain) {
                for (gr, nr) in g.chunks(cols).zip(normalized.chunks(cols)) {
                    for j in 0..cols {
                        d[j] += gr[j] * nr[j];
                    }
                }
            }
            if let Some(d) = slot(grads, nodes, *bias) {
                for gr in g.chunks(cols) {
                    d.iter_mut().zip(gr).for_each(|(d, gv)| *d += gv);
                }
            }
            if let Some(d) = slot(grads, nodes, *x) {
                let nf = cols as f64;
                for (r, (gr, nr)) in g.chunks(cols).zip(normalized.chunks(cols)).enumerate() {
                    let dn: Vec<f64> = gr.iter().zip(gain_v).map(|(a, b)| a * b).collect();
                    let sum_dn: f64 = dn.iter().sum();
                    let sum_dn_n: f64 = dn.iter().zip(nr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        d[r * cols + j] += inv_std[r] / nf * (nf * dn[j] - sum_dn - nr[j] * sum_dn_n);
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_strides(node.value.shape(), *axis);
            let mut offset = 0;
            for v in inputs {
                let len = nodes[v.0].value.shape()[*axis];
                if let Some(d) = slot(grads, nodes, *v) {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        for k in 0..len * inner {
                            d[dst + k] += g[src + k];
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let src_shape = nodes[x.0].value.shape();
            let (outer, n, inner) = axis_strides(src_shape, *axis);
            let len = node.value.shape()[*axis];
            if let Some(d) = slot(grads, nodes, *x) {
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    for k in 0..len * inner {
                        d[dst + k] += g[src + k];
                    }
                }
            }
        }
        Op::GatherRows { table, rows } => {
            let c = nodes[table.0].value.cols();
            if let Some(d) = slot(grads, nodes, *table) {
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        d[r * c + j] += g[k * c + j];
                    }
                }
            }
        }
        Op::Transpose(x) => {
            let (n, m) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
            if let Some(d) = slot(grads, nodes, *x) {
                for i in 0..n {
                    for j in 0..m {
                        d[i * m + j] += g[j * n + i];
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(d) = slot(grads, nodes, *x) {
                d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
            }
        }
        Op::Sum(x) => {
            if let Some(d) = slot(grads, nodes, *x) {
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(d) = slot(grads, nodes, *x) {
                let n = d.len() as f64;
                d.iter_mut().for_each(|d| *d += g[0] / n);
            }
        }
        Op::MeanRows(x) => {
            let t = &nodes[x.0].value;
            let (n, c) = (t.rows(), t.cols());
            if let Some(d) = slot(grads, nodes, *x) {
                for r in 0..n {
                    for j in 0..c {
                        d[r * c + j] += g[j] / n as f64;
                    }
                }
            }
        }
        Op::RepeatRows(x) => {
            if let Some(d) = slot(grads, nodes, *x) {
                let c = d.len();
                for chunk in g.chunks(c) {
                    d.iter_mut().zip(chunk).for_each(|(d, gv)| *d += gv);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2));
        let m = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        assert_eq!(tape.value(tape.matmul(i2, m).unwrap()).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = tape.constant(t(&[&[1.0, 0.0], &[0.0, 0.0]]));
        let v = tape.constant(t(&[&[5.0], &[7.0]]));
        assert_eq!(tape.value(tape.matmul(p, v).unwrap()).data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_basic_cases() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::row(&[0.0, 0.0]));
        assert_eq!(tape.value(tape.softmax(x, 1).unwrap()).data(), &[0.5, 0.5]);

        let x = tape.constant(Tensor::row(&[1000.0, 0.0]));
        let y = tape.value(tape.softmax(x, 1).unwrap());
        assert!((y.data()[0] - 1.0).abs() < 1e-300_f64.max(1e-15));
        assert!(y.data()[1] < 1e-300);

        let x = tape.constant(Tensor::row(&[1.0, 2.0, 3.0]));
        let y = tape.value(tape.softmax(x, 1).unwrap());
        let total: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (k, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((y.data()[k] - v.exp() / total).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_on_middle_axis() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3, 2], (0..12).map(|v| v as f64 * 0.3).collect()).unwrap());
        let y = tape.value(tape.softmax(x, 1).unwrap());
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|j| y.data()[(o * 3 + j) * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn activations_at_zero() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        assert_eq!(tape.scalar(tape.tanh(z).unwrap()), 0.0);
        assert_eq!(tape.scalar(tape.sigmoid(z).unwrap()), 0.5);
        assert_eq!(tape.scalar(tape.softsign(z).unwrap()), 0.0);
        let one = tape.constant(Tensor::scalar(1.0));
        assert_eq!(tape.scalar(tape.softsign(one).unwrap()), 0.5);
    }

    #[test]
    fn layer_norm_cases() {
        let tape = Tape::new();
        let g = tape.constant(Tensor::row(&[1.0; 3]));
        let b = tape.constant(Tensor::row(&[0.0; 3]));
        let x = tape.constant(Tensor::row(&[5.0, 5.0, 5.0]));
        assert_eq!(tape.value(tape.layer_norm(x, g, b).unwrap()).data(), &[0.0, 0.0, 0.0]);

        let g = tape.constant(Tensor::row(&[1.0; 2]));
        let b = tape.constant(Tensor::row(&[0.0; 2]));
        let x = tape.constant(Tensor::row(&[1.0, -1.0]));
        let y = tape.value(tape.layer_norm(x, g, b).unwrap());
        // mean 0, variance 1
        let expected = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((y.data()[0] - expected).abs() < 1e-15);
        assert!((y.data()[1] + expected).abs() < 1e-15);
    }

    #[test]
    fn concat_and_gather() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::row(&[1.0, 2.0]));
        let b = tape.constant(Tensor::row(&[3.0]));
        assert_eq!(tape.value(tape.concat(&[a, b], 1).unwrap()).data(), &[1.0, 2.0, 3.0]);
        let c = tape.constant(Tensor::zeros(&[2, 2]));
        assert_eq!(tape.shape(tape.concat(&[a, c], 0).unwrap()), vec![3, 2]);
        let bad = tape.constant(Tensor::zeros(&[2, 1]));
        assert!(tape.concat(&[a, bad], 1).is_err());

        let eye = tape.constant(Tensor::identity(3));
        assert_eq!(tape.value(tape.gather_rows(eye, &[0]).unwrap()).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_simple_cases() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let loss = tape.mul(x, x).unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(x).unwrap().data(), &[6.0]);

        let tape = Tape::new();
        let a = tape.leaf(Tensor::row(&[1.0, 2.0, 3.0]), true);
        let b = tape.constant(Tensor::row(&[4.0, -5.0, 6.0]));
        let loss = tape.sum(tape.mul(a, b).unwrap()).unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(a).unwrap().data(), &[4.0, -5.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::row(&[1.0, 2.0]), true);
        assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_parameters_get_zero() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row(&[2.0]), 0.0).unwrap();
        let unused = store.add("unused", Tensor::row(&[1.0, 1.0]), 0.0).unwrap();
        let tape = Tape::new();
        let wv = tape.param(&store, w);
        let loss = tape.sum(tape.mul(wv, wv).unwrap()).unwrap();
        let grads = tape.backward(loss).unwrap().param_grads(&store);
        assert_eq!(grads[w.index()].data(), &[4.0]);
        assert_eq!(grads[unused.index()].data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_names_op() {
        let tape = Tape::new();
        let big = tape.constant(Tensor::row(&[1e300]));
        let err = tape.mul(big, big).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "mul" }));
    }

    #[test]
    fn log_cosh_is_stable() {
        assert!((log_cosh(1.0) - 1.0f64.cosh().ln()).abs() < 1e-15);
        assert!((log_cosh(50.0) - (50.0 - std::f64::consts::LN_2)).abs() < 1e-12);
        assert!(log_cosh(1000.0).is_finite());
    }
}
