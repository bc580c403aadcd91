use std::collections::HashMap;

use super::params::{Grads, ParamSet};
use super::tensor::{axis_extents, Tensor};
use crate::error::{contract, Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a custom operation: maps the output gradient
/// to one gradient per input, in input order.
pub type CustomBackward = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

/// Elementwise operation kinds accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Square,
    Sqrt,
    Elu,
    Swish1,
    Clamp { lo: f64, hi: f64 },
}

impl Elementwise {
    fn arity(self) -> usize {
        match self {
            Self::Add | Self::Sub | Self::Mul | Self::Div => 2,
            _ => 1,
        }
    }
}

/// Reduction kinds accepted by [`Tape::reduce`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

enum Op {
    Leaf,
    Binary(Elementwise, Var, Var),
    Unary(Elementwise, Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reduce {
        kind: Reduction,
        x: Var,
        axis: Option<usize>,
    },
    LogMeanExp {
        x: Var,
        axis: usize,
    },
    LogSoftmax(Var),
    Reshape(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Rows {
        x: Var,
        index: Vec<usize>,
    },
    Cols {
        x: Var,
        index: Vec<usize>,
    },
    Pick {
        x: Var,
        index: Vec<usize>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run record of a forward computation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and a single reverse sweep computes all gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let tracked = |v: &Var| self.nodes[v.0].needs_grad;
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Binary(_, a, b) | Op::MatMul(a, b) => tracked(a) || tracked(b),
            Op::Unary(_, x)
            | Op::Scale(x, _)
            | Op::Shift(x)
            | Op::Transpose(x)
            | Op::LogSoftmax(x)
            | Op::Reshape(x)
            | Op::BroadcastRows(x)
            | Op::BroadcastCols(x)
            | Op::Reduce { x, .. }
            | Op::LogMeanExp { x, .. }
            | Op::Rows { x, .. }
            | Op::Cols { x, .. }
            | Op::Pick { x, .. } => tracked(x),
            Op::Concat { parts: inputs, .. } | Op::Custom { inputs, .. } => {
                inputs.iter().any(tracked)
            }
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Records an input whose gradient is wanted from [`Tape::gradients`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Records the named trainable parameter. Repeated calls with the same
    /// name return the same node, so a parameter used twice accumulates both
    /// gradient contributions.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = params
            .get(name)
            .ok_or_else(|| contract(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.push_leaf(value, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Node recorded for a parameter, if it took part in the computation.
    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Records an operation whose backward pass is supplied by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        backward: impl Fn(&[f64]) -> Vec<Vec<f64>> + 'static,
    ) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
        )
    }

    pub fn elementwise(&mut self, kind: Elementwise, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != kind.arity() {
            return Err(contract(format!(
                "{kind:?} takes {} input(s), got {}",
                kind.arity(),
                inputs.len()
            )));
        }
        if kind.arity() == 2 {
            let (a, b) = (inputs[0], inputs[1]);
            let (va, vb) = (self.value(a), self.value(b));
            if va.shape() != vb.shape() {
                return Err(contract(format!(
                    "{kind:?}: shape mismatch {:?} vs {:?}",
                    va.shape(),
                    vb.shape()
                )));
            }
            let f: fn(f64, f64) -> f64 = match kind {
                Elementwise::Add => |x, y| x + y,
                Elementwise::Sub => |x, y| x - y,
                Elementwise::Mul => |x, y| x * y,
                Elementwise::Div => |x, y| x / y,
                _ => unreachable!(),
            };
            if kind == Elementwise::Div && vb.data().contains(&0.0) {
                return Err(Error::Domain("division by zero".into()));
            }
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            let value = Tensor::new(va.shape().to_vec(), data)?;
            return Ok(self.push(value, Op::Binary(kind, a, b)));
        }

        let x = inputs[0];
        let vx = self.value(x);
        let value = match kind {
            Elementwise::Neg => vx.map(|v| -v),
            Elementwise::Exp => vx.map(f64::exp),
            Elementwise::Log => {
                if let Some(bad) = vx.data().iter().find(|&&v| !(v > 0.0)) {
                    return Err(Error::Domain(format!("log of non-positive value {bad}")));
                }
                vx.map(f64::ln)
            }
            Elementwise::Square => vx.map(|v| v * v),
            Elementwise::Sqrt => {
                if let Some(bad) = vx.data().iter().find(|&&v| v < 0.0) {
                    return Err(Error::Domain(format!("sqrt of negative value {bad}")));
                }
                vx.map(f64::sqrt)
            }
            Elementwise::Elu => vx.map(elu),
            Elementwise::Swish1 => vx.map(|v| v * sigmoid(v)),
            Elementwise::Clamp { lo, hi } => {
                if lo > hi {
                    return Err(contract(format!("clamp bounds reversed: [{lo}, {hi}]")));
                }
                vx.map(|v| v.clamp(lo, hi))
            }
            _ => unreachable!(),
        };
        Ok(self.push(value, Op::Unary(kind, x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Div, &[a, b])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.elementwise(Elementwise::Neg, &[x]).expect("unary")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.elementwise(Elementwise::Exp, &[x]).expect("unary")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.elementwise(Elementwise::Log, &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.elementwise(Elementwise::Square, &[x]).expect("unary")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sqrt, &[x])
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.elementwise(Elementwise::Elu, &[x]).expect("unary")
    }

    pub fn swish1(&mut self, x: Var) -> Var {
        self.elementwise(Elementwise::Swish1, &[x]).expect("unary")
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.elementwise(Elementwise::Clamp { lo, hi }, &[x])
    }

    /// `c * x` for a constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| c * v);
        self.push(value, Op::Scale(x, c))
    }

    /// `x + c` for a constant `c`.
    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::Shift(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(contract(format!(
                "matmul: incompatible shapes {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (n, k, m) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let value = Tensor::new(vec![n, m], matmul_raw(va.data(), vb.data(), n, k, m))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 {
            return Err(contract(format!("transpose of rank-{} tensor", vx.rank())));
        }
        let (n, m) = (vx.shape()[0], vx.shape()[1]);
        let value = Tensor::new(vec![m, n], transpose_raw(vx.data(), n, m))?;
        Ok(self.push(value, Op::Transpose(x)))
    }

    /// Sum or mean over `axis`, or over every element when `axis` is `None`.
    pub fn reduce(&mut self, kind: Reduction, x: Var, axis: Option<usize>) -> Result<Var> {
        let vx = self.value(x);
        let value = match axis {
            None => {
                let s: f64 = vx.data().iter().sum();
                Tensor::scalar(match kind {
                    Reduction::Sum => s,
                    Reduction::Mean => s / vx.len() as f64,
                })
            }
            Some(axis) => {
                if axis >= vx.rank() {
                    return Err(contract(format!(
                        "reduce axis {axis} out of range for shape {:?}",
                        vx.shape()
                    )));
                }
                let (outer, n, inner) = axis_extents(vx.shape(), axis);
                let mut out = vec![0.0; outer * inner];
                let d = vx.data();
                for o in 0..outer {
                    for j in 0..n {
                        let row = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                if kind == Reduction::Mean {
                    out.iter_mut().for_each(|v| *v /= n as f64);
                }
                let mut shape = vx.shape().to_vec();
                shape.remove(axis);
                Tensor::new(shape, out)?
            }
        };
        Ok(self.push(value, Op::Reduce { kind, x, axis }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(Reduction::Sum, x, None)
            .expect("full reduction")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.reduce(Reduction::Mean, x, None)
            .expect("full reduction")
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduction::Sum, x, Some(axis))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduction::Mean, x, Some(axis))
    }

    /// `ln((1/n) Σ exp(x))` along `axis`, computed with max subtraction.
    pub fn log_mean_exp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() {
            return Err(contract(format!(
                "log_mean_exp axis {axis} out of range for shape {:?}",
                vx.shape()
            )));
        }
        let (outer, n, inner) = axis_extents(vx.shape(), axis);
        let d = vx.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| d[(o * n + j) * inner + i];
                let max = (0..n).map(at).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..n).map(|j| (at(j) - max).exp()).sum();
                out[o * inner + i] = max + (s / n as f64).ln();
            }
        }
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::LogMeanExp { x, axis }))
    }

    /// Log-probabilities along the last axis, stabilized by max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() == 0 {
            return Err(contract("log_softmax of a scalar"));
        }
        if !vx.is_finite() {
            return Err(Error::Domain("log_softmax of non-finite logits".into()));
        }
        let n = *vx.shape().last().unwrap();
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(n) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LogSoftmax(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Repeats a vector of length `m` as the rows of an `rows × m` matrix.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 1 || rows == 0 {
            return Err(contract(format!(
                "broadcast_rows of shape {:?}",
                vx.shape()
            )));
        }
        let m = vx.len();
        let data = (0..rows).flat_map(|_| vx.data().iter().copied()).collect();
        let value = Tensor::new(vec![rows, m], data)?;
        Ok(self.push(value, Op::BroadcastRows(x)))
    }

    /// Repeats a vector of length `n` as the columns of an `n × cols` matrix.
    pub fn broadcast_cols(&mut self, x: Var, cols: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 1 || cols == 0 {
            return Err(contract(format!(
                "broadcast_cols of shape {:?}",
                vx.shape()
            )));
        }
        let data = vx
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, cols))
            .collect();
        let value = Tensor::new(vec![vx.len(), cols], data)?;
        Ok(self.push(value, Op::BroadcastCols(x)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| contract("concat of nothing"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(contract(format!(
                "concat axis {axis} out of range for {first:?}"
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(contract(format!(
                    "concat: shape {s:?} incompatible with {first:?}"
                )));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let mut data =
            Vec::with_capacity(outer * total * first[axis + 1..].iter().product::<usize>());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.len() / outer;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Gathers slices along the first axis; indices may repeat.
    pub fn rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() == 0 || index.is_empty() {
            return Err(contract(
                "rows: needs a non-scalar tensor and at least one index",
            ));
        }
        let n = vx.shape()[0];
        let width = vx.len() / n;
        let mut data = Vec::with_capacity(index.len() * width);
        for &i in index {
            if i >= n {
                return Err(contract(format!("row index {i} out of range ({n} rows)")));
            }
            data.extend_from_slice(&vx.data()[i * width..(i + 1) * width]);
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = index.len();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Rows {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// Selects columns of a matrix; indices may repeat.
    pub fn cols(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 || index.is_empty() {
            return Err(contract("cols: needs a matrix and at least one index"));
        }
        let (n, m) = (vx.shape()[0], vx.shape()[1]);
        if let Some(&bad) = index.iter().find(|&&j| j >= m) {
            return Err(contract(format!(
                "column index {bad} out of range ({m} columns)"
            )));
        }
        let data = (0..n)
            .flat_map(|i| index.iter().map(move |&j| (i, j)))
            .map(|(i, j)| vx.data()[i * m + j])
            .collect();
        let value = Tensor::new(vec![n, index.len()], data)?;
        Ok(self.push(
            value,
            Op::Cols {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// For each row `i` of a matrix, the entry in column `index[i]`.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 || vx.shape()[0] != index.len() {
            return Err(contract(format!(
                "pick: {} indices for shape {:?}",
                index.len(),
                vx.shape()
            )));
        }
        let m = vx.shape()[1];
        if let Some(&bad) = index.iter().find(|&&j| j >= m) {
            return Err(contract(format!(
                "pick index {bad} out of range ({m} columns)"
            )));
        }
        let data = index
            .iter()
            .enumerate()
            .map(|(i, &j)| vx.data()[i * m + j])
            .collect();
        let value = Tensor::new(vec![index.len()], data)?;
        Ok(self.push(
            value,
            Op::Pick {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// Gradient of the scalar `loss` with respect to every recorded node.
    pub fn gradients(&self, loss: Var) -> Result<NodeGrads> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(contract(format!(
                "backward from non-scalar of shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(NodeGrads { grads })
    }

    /// Gradients of `loss` for every parameter in `params`; parameters that
    /// did not take part in the computation get zeros.
    pub fn backward(&self, loss: Var, params: &ParamSet) -> Result<Grads> {
        Ok(self.gradients(loss)?.table(self, params))
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        contrib: impl Iterator<Item = f64>,
    ) {
        if self.nodes[v.0].needs_grad {
            accumulate_into(grads, v, contrib);
        }
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                match kind {
                    Elementwise::Add => {
                        self.accumulate(grads, *a, g.iter().copied());
                        self.accumulate(grads, *b, g.iter().copied());
                    }
                    Elementwise::Sub => {
                        self.accumulate(grads, *a, g.iter().copied());
                        self.accumulate(grads, *b, g.iter().map(|v| -v));
                    }
                    Elementwise::Mul => {
                        self.accumulate(grads, *a, g.iter().zip(vb).map(|(g, y)| g * y));
                        self.accumulate(grads, *b, g.iter().zip(va).map(|(g, x)| g * x));
                    }
                    Elementwise::Div => {
                        self.accumulate(grads, *a, g.iter().zip(vb).map(|(g, y)| g / y));
                        self.accumulate(
                            grads,
                            *b,
                            g.iter().zip(va).zip(vb).map(|((g, x), y)| -g * x / (y * y)),
                        );
                    }
                    _ => unreachable!(),
                }
            }
            Op::Unary(kind, x) => {
                let vx = self.value(*x).data();
                let it = g.iter().zip(vx).zip(y);
                match *kind {
                    Elementwise::Neg => self.accumulate(grads, *x, g.iter().map(|v| -v)),
                    Elementwise::Exp => self.accumulate(grads, *x, it.map(|((g, _), y)| g * y)),
                    Elementwise::Log => self.accumulate(grads, *x, it.map(|((g, x), _)| g / x)),
                    Elementwise::Square => {
                        self.accumulate(grads, *x, it.map(|((g, x), _)| 2.0 * g * x))
                    }
                    Elementwise::Sqrt => {
                        self.accumulate(grads, *x, it.map(|((g, _), y)| g / (2.0 * y)))
                    }
                    Elementwise::Elu => self.accumulate(
                        grads,
                        *x,
                        it.map(|((g, &x), y)| if x > 0.0 { *g } else { g * (y + 1.0) }),
                    ),
                    Elementwise::Swish1 => self.accumulate(
                        grads,
                        *x,
                        it.map(|((g, &x), y)| {
                            let s = sigmoid(x);
                            g * (s + y * (1.0 - s))
                        }),
                    ),
                    Elementwise::Clamp { lo, hi } => self.accumulate(
                        grads,
                        *x,
                        it.map(|((g, &x), _)| if (lo..=hi).contains(&x) { *g } else { 0.0 }),
                    ),
                    _ => unreachable!(),
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.iter().map(|v| c * v)),
            Op::Shift(x) | Op::Reshape(x) => self.accumulate(grads, *x, g.iter().copied()),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                // dA = G Bᵀ, dB = Aᵀ G
                let bt = transpose_raw(vb.data(), k, m);
                let da = matmul_raw(g, &bt, n, m, k);
                let at = transpose_raw(va.data(), n, k);
                let db = matmul_raw(&at, g, k, n, m);
                self.accumulate(grads, *a, da.into_iter());
                self.accumulate(grads, *b, db.into_iter());
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                self.accumulate(grads, *x, transpose_raw(g, s[0], s[1]).into_iter());
            }
            Op::Reduce { kind, x, axis } => {
                let vx = self.value(*x);
                match axis {
                    None => {
                        let scale = match kind {
                            Reduction::Sum => 1.0,
                            Reduction::Mean => 1.0 / vx.len() as f64,
                        };
                        self.accumulate(grads, *x, std::iter::repeat_n(g[0] * scale, vx.len()));
                    }
                    Some(axis) => {
                        let (outer, n, inner) = axis_extents(vx.shape(), *axis);
                        let scale = match kind {
                            Reduction::Sum => 1.0,
                            Reduction::Mean => 1.0 / n as f64,
                        };
                        let mut dx = vec![0.0; vx.len()];
                        for o in 0..outer {
                            for j in 0..n {
                                for i in 0..inner {
                                    dx[(o * n + j) * inner + i] = g[o * inner + i] * scale;
                                }
                            }
                        }
                        self.accumulate(grads, *x, dx.into_iter());
                    }
                }
            }
            Op::LogMeanExp { x, axis } => {
                let vx = self.value(*x);
                let (outer, n, inner) = axis_extents(vx.shape(), *axis);
                let d = vx.data();
                let mut dx = vec![0.0; vx.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        // softmax weights: exp(x_j - lme) / n
                        let lme = y[o * inner + i];
                        for j in 0..n {
                            let at = (o * n + j) * inner + i;
                            dx[at] = g[o * inner + i] * (d[at] - lme).exp() / n as f64;
                        }
                    }
                }
                self.accumulate(grads, *x, dx.into_iter());
            }
            Op::LogSoftmax(x) => {
                let n = *node.value.shape().last().unwrap();
                let mut dx = Vec::with_capacity(y.len());
                for (gr, yr) in g.chunks(n).zip(y.chunks(n)) {
                    let gs: f64 = gr.iter().sum();
                    dx.extend(gr.iter().zip(yr).map(|(g, y)| g - y.exp() * gs));
                }
                self.accumulate(grads, *x, dx.into_iter());
            }
            Op::BroadcastRows(x) => {
                let m = self.value(*x).len();
                let mut dx = vec![0.0; m];
                for row in g.chunks(m) {
                    dx.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                self.accumulate(grads, *x, dx.into_iter());
            }
            Op::BroadcastCols(x) => {
                let cols = node.value.shape()[1];
                self.accumulate(grads, *x, g.chunks(cols).map(|r| r.iter().sum()));
            }
            Op::Concat { parts, axis } => {
                let outer: usize = node.value.shape()[..*axis].iter().product();
                let chunks: Vec<usize> =
                    parts.iter().map(|&p| self.value(p).len() / outer).collect();
                let total: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&p, &c) in parts.iter().zip(&chunks) {
                    let dp = (0..outer).flat_map(|o| {
                        g[o * total + offset..o * total + offset + c]
                            .iter()
                            .copied()
                    });
                    self.accumulate(grads, p, dp.collect::<Vec<_>>().into_iter());
                    offset += c;
                }
            }
            Op::Rows { x, index } => {
                let vx = self.value(*x);
                let width = vx.len() / vx.shape()[0];
                let mut dx = vec![0.0; vx.len()];
                for (r, &i) in index.iter().enumerate() {
                    for k in 0..width {
                        dx[i * width + k] += g[r * width + k];
                    }
                }
                self.accumulate(grads, *x, dx.into_iter());
            }
            Op::Cols { x, index } => {
                let vx = self.value(*x);
                let m = vx.shape()[1];
                let mut dx = vec![0.0; vx.len()];
                for (r, gr) in g.chunks(index.len()).enumerate() {
                    for (&j, &v) in index.iter().zip(gr) {
                        dx[r * m + j] += v;
                    }
                }
                self.accumulate(grads, *x, dx.into_iter());
            }
            Op::Pick { x, index } => {
                let vx = self.value(*x);
                let m = vx.shape()[1];
                let mut dx = vec![0.0; vx.len()];
                for (r, &j) in index.iter().enumerate() {
                    dx[r * m + j] = g[r];
                }
                self.accumulate(grads, *x, dx.into_iter());
            }
            Op::Custom { inputs, backward } => {
                for (&v, dv) in inputs.iter().zip(backward(g)) {
                    self.accumulate(grads, v, dv.into_iter());
                }
            }
        }
    }
}

/// Per-node gradients produced by [`Tape::gradients`].
pub struct NodeGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl NodeGrads {
    /// Gradient of a node, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient table for the parameters of `params`, zeros where absent.
    pub fn table(&self, tape: &Tape, params: &ParamSet) -> Grads {
        let mut out = Grads::new();
        for (name, p) in params.iter() {
            let g = tape
                .param_var(name)
                .and_then(|v| self.get(v))
                .map(|g| Tensor::new(p.shape().to_vec(), g.to_vec()).expect("param shape"))
                .unwrap_or_else(|| Tensor::zeros(p.shape()));
            out.insert(name.clone(), g);
        }
        out
    }
}

fn accumulate_into(grads: &mut [Option<Vec<f64>>], v: Var, contrib: impl Iterator<Item = f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
        slot @ None => *slot = Some(contrib.collect()),
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

pub(crate) fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln Σ exp(v)` with max subtraction.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
