//! Tape-based reverse-mode automatic differentiation over dense `f64`
//! matrices.
//!
//! Every forward op appends a node holding its output value and enough
//! information to run its adjoint. [`Tape::backward`] walks the nodes in
//! reverse creation order once and returns gradients for the requested
//! parameters. The tape is left untouched, so backward can be re-run.
//!
//! Vectors are `1 x n` rows and scalars are `1 x 1`.

mod finite_diff;

pub use finite_diff::{finite_difference, max_relative_error};

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};
use crate::params::ParamId;

/// Epsilon added to the row variance in [`Tape::layer_norm_rows`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows { input: NodeId, inv_std: Vec<f64> },
    ConcatRows(Vec<NodeId>),
    SliceRows { input: NodeId, start: usize },
    SliceCols { input: NodeId, start: usize },
    MeanAll(NodeId),
    Mse(NodeId, NodeId),
    BceWithLogits { logits: NodeId, targets: Array2<f64> },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNormRows { .. } => "layer_norm_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::MeanAll(..) => "mean_all",
            Op::Mse(..) => "mse",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Array2<f64>,
    requires_grad: bool,
}

/// Gradients keyed by parameter id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<ParamId, Array2<f64>>,
}

impl GradientMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Array2<f64>) {
        self.grads.insert(id, grad);
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, NodeId>,
    detached: Vec<NodeId>,
    replay: Option<Vec<Array2<f64>>>,
}

fn dims(a: &Array2<f64>) -> (usize, usize) {
    a.dim()
}

fn check_finite(kind: &'static str, a: &Array2<f64>) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(kind))
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

fn accumulate(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape whose `detach` calls return `values` in order instead of
    /// copying their input. Evaluating a perturbed graph on such a tape
    /// holds every stop-gradient quantity at its recorded value, which is
    /// the function reverse mode actually differentiates.
    pub fn replaying(values: Vec<Array2<f64>>) -> Self {
        Self {
            replay: Some(values),
            ..Self::default()
        }
    }

    /// Values produced by `detach`, in call order.
    pub fn detached_values(&self) -> Vec<Array2<f64>> {
        self.detached.iter().map(|&id| self.value(id).clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.detached.clear();
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn kind(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.kind()
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Result<NodeId> {
        check_finite(op.kind(), &value)?;
        let requires_grad = match &op {
            Op::Const => false,
            Op::Param => true,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Sub(a, b) => {
                self.rg(*a) || self.rg(*b)
            }
            Op::Mul(a, b) | Op::MulCol(a, b) | Op::Mse(a, b) => self.rg(*a) || self.rg(*b),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::MeanAll(a) => self.rg(*a),
            Op::LayerNormRows { input, .. }
            | Op::SliceRows { input, .. }
            | Op::SliceCols { input, .. } => self.rg(*input),
            Op::ConcatRows(parts) => parts.iter().any(|p| self.rg(*p)),
            Op::BceWithLogits { logits, .. } => self.rg(*logits),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (da, db) = (dims(self.value(a)), dims(self.value(b)));
        if da != db {
            return Err(Error::shape(op, da, db));
        }
        Ok(())
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, value: Array2<f64>) -> Result<NodeId> {
        self.push(Op::Const, value)
    }

    /// Records a differentiable parameter. Registering the same id twice
    /// returns the existing node.
    pub fn param(&mut self, id: ParamId, value: &Array2<f64>) -> Result<NodeId> {
        if let Some(&node) = self.params.get(&id) {
            return Ok(node);
        }
        let node = self.push(Op::Param, value.clone())?;
        self.params.insert(id, node);
        Ok(node)
    }

    pub fn param_node(&self, id: ParamId) -> Option<NodeId> {
        self.params.get(&id).copied()
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: NodeId) -> Result<NodeId> {
        let k = self.detached.len();
        let v = match &self.replay {
            Some(values) => {
                let v = values
                    .get(k)
                    .ok_or_else(|| Error::Contract("replay tape ran out of detached values".into()))?;
                if v.dim() != self.value(a).dim() {
                    return Err(Error::shape("detach replay", self.value(a).dim(), v.dim()));
                }
                v.clone()
            }
            None => self.value(a).clone(),
        };
        let id = self.push(Op::Const, v)?;
        self.detached.push(id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::shape("matmul", dims(va), dims(vb)));
        }
        let out = va.dot(vb);
        self.push(Op::MatMul(a, b), out)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).t().to_owned();
        self.push(Op::Transpose(a), out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), out)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(Error::shape("add_row", dims(va), dims(vr)));
        }
        let out = va + vr;
        self.push(Op::AddRow(a, row), out)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), out)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), out)
    }

    /// Multiplies row `i` of `a` by `col[i, 0]`.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (va, vc) = (self.value(a), self.value(col));
        if vc.ncols() != 1 || vc.nrows() != va.nrows() {
            return Err(Error::shape("mul_col", dims(va), dims(vc)));
        }
        let out = va * vc;
        self.push(Op::MulCol(a, col), out)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let out = self.value(a) * factor;
        self.push(Op::Scale(a, factor), out)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).mapv(sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).mapv(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).mapv(|v| v.max(0.0));
        self.push(Op::Relu(a), out)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let out = softmax_rows(self.value(a));
        self.push(Op::SoftmaxRows(a), out)
    }

    /// Normalises each row to zero mean and unit variance, without affine
    /// terms.
    pub fn layer_norm_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let cols = va.ncols() as f64;
        let mut out = va.clone();
        let mut inv_std = Vec::with_capacity(va.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        self.push(Op::LayerNormRows { input: a, inv_std }, out)
    }

    /// Stacks the inputs vertically.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of zero inputs".into()))?;
        let cols = self.value(*first).ncols();
        for p in parts {
            let d = dims(self.value(*p));
            if d.1 != cols {
                return Err(Error::shape("concat_rows", dims(self.value(*first)), d));
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views)
            .map_err(|_| Error::Contract("concat_rows failed".into()))?;
        self.push(Op::ConcatRows(parts.to_vec()), out)
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let va = self.value(a);
        if start >= end || end > va.nrows() {
            return Err(Error::shape("slice_rows", dims(va), (start, end)));
        }
        let out = va.slice(s![start..end, ..]).to_owned();
        self.push(Op::SliceRows { input: a, start }, out)
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let va = self.value(a);
        if start >= end || end > va.ncols() {
            return Err(Error::shape("slice_cols", dims(va), (start, end)));
        }
        let out = va.slice(s![.., start..end]).to_owned();
        self.push(Op::SliceCols { input: a, start }, out)
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let m = va.sum() / va.len() as f64;
        self.push(Op::MeanAll(a), Array2::from_elem((1, 1), m))
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mse", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let n = va.len() as f64;
        let m = Zip::from(va)
            .and(vb)
            .fold(0.0, |acc, x, y| acc + (x - y) * (x - y))
            / n;
        self.push(Op::Mse(a, b), Array2::from_elem((1, 1), m))
    }

    /// Mean binary cross-entropy of `logits` against fixed 0/1 `targets`,
    /// evaluated as `max(x, 0) - x*y + ln(1 + exp(-|x|))`.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: Array2<f64>) -> Result<NodeId> {
        let vl = self.value(logits);
        if dims(vl) != dims(&targets) {
            return Err(Error::shape("bce_with_logits", dims(vl), dims(&targets)));
        }
        check_finite("bce_with_logits", &targets)?;
        let n = vl.len() as f64;
        let total = Zip::from(vl).and(&targets).fold(0.0, |acc, &x, &y| {
            acc + x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
        });
        self.push(
            Op::BceWithLogits { logits, targets },
            Array2::from_elem((1, 1), total / n),
        )
    }

    /// Reverse pass from the scalar `loss`, returning gradients for `wrt`.
    pub fn backward(&self, loss: NodeId, wrt: &[ParamId]) -> Result<GradientMap> {
        if dims(self.value(loss)) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                dims(self.value(loss))
            )));
        }
        let mut targets = Vec::with_capacity(wrt.len());
        for id in wrt {
            let node = self.param_node(*id).ok_or_else(|| {
                Error::Contract(format!("parameter {id:?} is not recorded on this tape"))
            })?;
            targets.push((*id, node));
        }

        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut out = GradientMap::new();
        for (id, node) in targets {
            let g = grads[node.0]
                .clone()
                .unwrap_or_else(|| Array2::zeros(self.value(node).dim()));
            out.insert(id, g);
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let want = |id: NodeId| self.rg(id);
        match &node.op {
            Op::Const | Op::Param => {}
            Op::MatMul(a, b) => {
                if want(*a) {
                    accumulate(&mut grads[a.0], g.dot(&self.value(*b).t()));
                }
                if want(*b) {
                    accumulate(&mut grads[b.0], self.value(*a).t().dot(g));
                }
            }
            Op::Transpose(a) => accumulate(&mut grads[a.0], g.t().to_owned()),
            Op::Add(a, b) => {
                if want(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if want(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::AddRow(a, r) => {
                if want(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if want(*r) {
                    accumulate(&mut grads[r.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if want(*b) {
                    accumulate(&mut grads[b.0], -g);
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    accumulate(&mut grads[a.0], g * self.value(*b));
                }
                if want(*b) {
                    accumulate(&mut grads[b.0], g * self.value(*a));
                }
            }
            Op::MulCol(a, c) => {
                if want(*a) {
                    accumulate(&mut grads[a.0], g * self.value(*c));
                }
                if want(*c) {
                    let d = (g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads[c.0], d);
                }
            }
            Op::Scale(a, f) => accumulate(&mut grads[a.0], g * *f),
            Op::Sigmoid(a) => {
                let y = &node.value;
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &y| *d *= y * (1.0 - y));
                accumulate(&mut grads[a.0], d);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &y| *d *= 1.0 - y * y);
                accumulate(&mut grads[a.0], d);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                Zip::from(&mut d).and(x).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                accumulate(&mut grads[a.0], d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g * y;
                let dots = d.sum_axis(Axis(1));
                for (mut row, (yr, dot)) in d.rows_mut().into_iter().zip(y.rows().into_iter().zip(dots)) {
                    Zip::from(&mut row).and(&yr).for_each(|v, &yv| *v -= yv * dot);
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::LayerNormRows { input, inv_std } => {
                let y = &node.value;
                let cols = y.ncols() as f64;
                let mut d = g.clone();
                for ((mut row, yr), inv) in d.rows_mut().into_iter().zip(y.rows()).zip(inv_std) {
                    let mean_g = row.sum() / cols;
                    let mean_gy = row.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / cols;
                    Zip::from(&mut row)
                        .and(&yr)
                        .for_each(|v, &yv| *v = inv * (*v - mean_g - yv * mean_gy));
                }
                accumulate(&mut grads[input.0], d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).nrows();
                    if want(*p) {
                        accumulate(&mut grads[p.0], g.slice(s![offset..offset + rows, ..]).to_owned());
                    }
                    offset += rows;
                }
            }
            Op::SliceRows { input, start } => {
                let mut d = Array2::zeros(self.value(*input).dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                accumulate(&mut grads[input.0], d);
            }
            Op::SliceCols { input, start } => {
                let mut d = Array2::zeros(self.value(*input).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                accumulate(&mut grads[input.0], d);
            }
            Op::MeanAll(a) => {
                let va = self.value(*a);
                let d = Array2::from_elem(va.dim(), g[[0, 0]] / va.len() as f64);
                accumulate(&mut grads[a.0], d);
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let k = 2.0 * g[[0, 0]] / va.len() as f64;
                let diff = (va - vb) * k;
                if want(*b) {
                    accumulate(&mut grads[b.0], -&diff);
                }
                if want(*a) {
                    accumulate(&mut grads[a.0], diff);
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let vl = self.value(*logits);
                let k = g[[0, 0]] / vl.len() as f64;
                let mut d = vl.mapv(sigmoid);
                Zip::from(&mut d).and(targets).for_each(|p, &y| *p = (*p - y) * k);
                accumulate(&mut grads[logits.0], d);
            }
        }
    }
}

/// Row-wise softmax, shifted by the row maximum.
pub fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Group, ParameterStore};
    use ndarray::array;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let a = t.constant(array![[0.0, 0.0]]).unwrap();
        let y = t.softmax_rows(a).unwrap();
        assert_eq!(t.value(y), &array![[0.5, 0.5]]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut t = Tape::new();
        let a = t.constant(array![[0.0]]).unwrap();
        let y = t.sigmoid(a).unwrap();
        assert_eq!(t.scalar(y), 0.5);
    }

    #[test]
    fn mse_of_identical_inputs() {
        let mut t = Tape::new();
        let a = t.constant(array![[1.0, 2.0]]).unwrap();
        let b = t.constant(array![[1.0, 2.0]]).unwrap();
        let y = t.mse(a, b).unwrap();
        assert_eq!(t.scalar(y), 0.0);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut t = Tape::new();
        let a = t.constant(Array2::zeros((2, 3))).unwrap();
        let b = t.constant(Array2::ones((3, 4))).unwrap();
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.value(y), &Array2::<f64>::zeros((2, 4)));
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Array2::zeros((2, 3))).unwrap();
        let b = t.constant(Array2::zeros((2, 3))).unwrap();
        match t.matmul(a, b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, (2, 3));
                assert_eq!(right, (2, 3));
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut t = Tape::new();
        assert!(matches!(t.constant(array![[f64::NAN]]), Err(Error::Numeric(_))));
        let a = t.constant(array![[1e308]]).unwrap();
        assert!(matches!(t.scale(a, 10.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn mse_gradient_of_single_weight() {
        let mut s = ParameterStore::new();
        let w = s.add("w", Group::Backbone, array![[3.0]]);
        let mut t = Tape::new();
        let wn = t.param(w, s.get(w)).unwrap();
        let zero = t.constant(array![[0.0]]).unwrap();
        let loss = t.mse(wn, zero).unwrap();
        let g = t.backward(loss, &[w]).unwrap();
        assert_eq!(g.get(w).unwrap()[[0, 0]], 6.0);
    }

    #[test]
    fn bce_gradient_at_zero_logit() {
        let mut s = ParameterStore::new();
        let w = s.add("logit", Group::Experts, array![[0.0]]);
        let mut t = Tape::new();
        let wn = t.param(w, s.get(w)).unwrap();
        let loss = t.bce_with_logits(wn, array![[1.0]]).unwrap();
        assert!((t.scalar(loss) - std::f64::consts::LN_2).abs() < 1e-15);
        let g = t.backward(loss, &[w]).unwrap();
        assert_eq!(g.get(w).unwrap()[[0, 0]], -0.5);
    }

    #[test]
    fn bce_is_stable_at_extreme_logits() {
        let mut t = Tape::new();
        let x = t.constant(array![[800.0], [-800.0]]).unwrap();
        let loss = t.bce_with_logits(x, array![[1.0], [0.0]]).unwrap();
        assert_eq!(t.scalar(loss), 0.0);
        let loss = t.bce_with_logits(x, array![[0.0], [1.0]]).unwrap();
        assert!((t.scalar(loss) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut s = ParameterStore::new();
        let w = s.add("w", Group::Backbone, array![[1.0, 2.0]]);
        let mut t = Tape::new();
        let wn = t.param(w, s.get(w)).unwrap();
        assert!(matches!(t.backward(wn, &[w]), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_rejects_unknown_parameter() {
        let mut s = ParameterStore::new();
        let w = s.add("w", Group::Backbone, array![[1.0]]);
        let other = s.add("v", Group::Backbone, array![[1.0]]);
        let mut t = Tape::new();
        let wn = t.param(w, s.get(w)).unwrap();
        let loss = t.mean_all(wn).unwrap();
        assert!(matches!(t.backward(loss, &[other]), Err(Error::Contract(_))));
    }

    #[test]
    fn replay_holds_detached_values_fixed() {
        let mut store = ParameterStore::new();
        let w = store.add("w", Group::Backbone, array![[3.0]]);
        let build = |t: &mut Tape, s: &ParameterStore| -> Result<NodeId> {
            let p = t.param(w, s.get(w))?;
            let d = t.detach(p)?;
            t.mul(p, d)
        };
        let mut t = Tape::new();
        let l = build(&mut t, &store).unwrap();
        let g = t.backward(l, &[w]).unwrap();
        assert_eq!(g.get(w).unwrap()[[0, 0]], 3.0);
        let frozen = t.detached_values();
        let fd = finite_difference(
            |s| {
                let mut t = Tape::replaying(frozen.clone());
                let l = build(&mut t, s)?;
                Ok(t.scalar(l))
            },
            &store,
            &[w],
            1e-6,
        )
        .unwrap();
        assert!((fd.get(w).unwrap()[[0, 0]] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn clear_frees_all_nodes() {
        let mut t = Tape::new();
        t.constant(array![[1.0]]).unwrap();
        t.clear();
        assert!(t.is_empty());
    }

    #[test]
    fn layer_norm_rows_statistics() {
        let mut t = Tape::new();
        let a = t.constant(array![[1.0, 2.0, 3.0, 10.0], [-4.0, 0.5, 0.25, 7.0]]).unwrap();
        let y = t.layer_norm_rows(a).unwrap();
        for (row, src) in t.value(y).rows().into_iter().zip(t.value(a).rows()) {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let m0 = src.sum() / n;
            let v0 = src.iter().map(|v| (v - m0).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10);
            assert!((var - v0 / (v0 + LAYER_NORM_EPS)).abs() < 1e-8);
        }
    }
}
