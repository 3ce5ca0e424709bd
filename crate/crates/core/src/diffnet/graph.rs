//! Define-by-run reverse-mode differentiation over 2-D float64 tensors.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! [`Graph::backward`] then walks the tape in reverse and returns the
//! gradient of a scalar loss with respect to every parameter that was read
//! through [`Graph::param`]. Nodes that depend on no parameter (constants,
//! gradient-stopped values, anything computed only from those) are never
//! visited during the backward sweep.

use std::collections::HashMap;

use ndarray::{s, Axis, Zip};

use super::params::{ParamId, ParamStore, Tensor};
use crate::error::{shape_err, MadlError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulScalar(NodeId, NodeId),
    MulColumn(NodeId, NodeId),
    Affine(NodeId, f64),
    Relu(NodeId),
    Exp(NodeId),
    LnClamped(NodeId, f64),
    Sigmoid(NodeId),
    Recip(NodeId),
    SoftmaxRows(NodeId),
    SumAll(NodeId),
    SumCols(NodeId),
    GatherRows(NodeId, Vec<usize>),
    GatherElems(NodeId, Vec<usize>),
    ConcatCols(Vec<NodeId>),
    Reshape(NodeId),
    RepeatCols(NodeId, usize),
    TileCols(NodeId),
    ExpandDiag(NodeId, usize),
    SqDistances(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

/// Result of a backward sweep.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: Vec<(ParamId, NodeId)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a parameter; `None` when the parameter was
    /// never read or the loss does not depend on it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, n)| self.by_node[n.0].as_ref())
    }

    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id.0).and_then(|g| g.as_ref())
    }

    /// Adds these gradients onto the `grad` fields of `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(pid, nid) in &self.params {
            if let Some(g) = &self.by_node[nid.0] {
                store.get_mut(pid).grad += g;
            }
        }
    }
}

fn dims(t: &Tensor) -> [usize; 2] {
    let (r, c) = t.dim();
    [r, c]
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(64),
            param_nodes: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> [usize; 2] {
        dims(&self.nodes[id.0].value)
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param => true,
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulScalar(a, b)
            | Op::MulColumn(a, b) => self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad,
            Op::ConcatCols(ids) => ids.iter().any(|i| self.nodes[i.0].needs_grad),
            Op::Affine(a, _)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::LnClamped(a, _)
            | Op::Sigmoid(a)
            | Op::Recip(a)
            | Op::SoftmaxRows(a)
            | Op::SumAll(a)
            | Op::SumCols(a)
            | Op::GatherRows(a, _)
            | Op::GatherElems(a, _)
            | Op::Reshape(a)
            | Op::RepeatCols(a, _)
            | Op::TileCols(a)
            | Op::ExpandDiag(a, _)
            | Op::SqDistances(a) => self.nodes[a.0].needs_grad,
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::from_elem((1, 1), value))
    }

    /// Reads a parameter. Repeated reads of the same parameter share one node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let value = self.store.value(id).clone();
        let n = self.push(value, Op::Param);
        self.param_nodes.insert(id, n);
        n
    }

    /// Value-identical copy through which no gradient flows.
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.clone();
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(shape_err("matmul", &dims(va), &dims(vb)));
        }
        let out = va.dot(vb);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a + bias` with a `1×O` bias broadcast over rows.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.nrows() != 1 || vb.ncols() != va.ncols() {
            return Err(shape_err("add_bias", &dims(va), &dims(vb)));
        }
        let out = va + vb;
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(shape_err(op, &dims(va), &dims(vb)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Multiplies every entry of `a` by the `1×1` node `s`.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let vs = self.value(s);
        if vs.dim() != (1, 1) {
            return Err(shape_err("mul_scalar", &dims(self.value(a)), &dims(vs)));
        }
        let out = self.value(a) * vs[[0, 0]];
        Ok(self.push(out, Op::MulScalar(a, s)))
    }

    /// Multiplies row `r` of `a` by `col[r, 0]`.
    pub fn mul_column(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (va, vc) = (self.value(a), self.value(col));
        if vc.ncols() != 1 || vc.nrows() != va.nrows() {
            return Err(shape_err("mul_column", &dims(va), &dims(vc)));
        }
        let out = va * vc;
        Ok(self.push(out, Op::MulColumn(a, col)))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> NodeId {
        let out = self.value(a).mapv(|x| scale * x + shift);
        self.push(out, Op::Affine(a, scale))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).mapv(|x| if x > 0.0 { x } else { 0.0 });
        self.push(out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    /// `ln(max(a, floor))`; entries at or below the floor get zero gradient.
    pub fn ln_clamped(&mut self, a: NodeId, floor: f64) -> NodeId {
        let out = self.value(a).mapv(|x| x.max(floor).ln());
        self.push(out, Op::LnClamped(a, floor))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).mapv(f64::recip);
        self.push(out, Op::Recip(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        softmax_rows_inplace(&mut out);
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let out = Tensor::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::SumAll(a))
    }

    /// Per-row sums as an `n×1` column.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::SumCols(a))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let va = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= va.nrows()) {
            return Err(MadlError::Contract(format!(
                "gather_rows index {bad} out of range for {} rows",
                va.nrows()
            )));
        }
        let out = va.select(Axis(0), &idx);
        Ok(self.push(out, Op::GatherRows(a, idx)))
    }

    /// `out[r, j] = a[r, idx[r * cols + j]]`.
    pub fn gather_elems(&mut self, a: NodeId, idx: Vec<usize>, cols: usize) -> Result<NodeId> {
        let va = self.value(a);
        let rows = va.nrows();
        if idx.len() != rows * cols {
            return Err(shape_err("gather_elems", &dims(va), &[idx.len(), cols]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= va.ncols()) {
            return Err(MadlError::Contract(format!(
                "gather_elems column {bad} out of range for {} columns",
                va.ncols()
            )));
        }
        let out = Tensor::from_shape_fn((rows, cols), |(r, j)| va[[r, idx[r * cols + j]]]);
        Ok(self.push(out, Op::GatherElems(a, idx)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| MadlError::Contract("concat_cols of nothing".into()))?;
        let rows = self.value(first).nrows();
        for &p in parts {
            if self.value(p).nrows() != rows {
                return Err(shape_err(
                    "concat_cols",
                    &dims(self.value(first)),
                    &dims(self.value(p)),
                ));
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let va = self.value(a);
        if va.len() != rows * cols {
            return Err(shape_err("reshape", &dims(va), &[rows, cols]));
        }
        let flat: Vec<f64> = va.iter().copied().collect();
        let out = Tensor::from_shape_vec((rows, cols), flat).expect("length checked");
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// `out[r, i * k + j] = a[r, i]` for `j < k`.
    pub fn repeat_cols(&mut self, a: NodeId, k: usize) -> NodeId {
        let va = self.value(a);
        let out = Tensor::from_shape_fn((va.nrows(), va.ncols() * k), |(r, c)| va[[r, c / k]]);
        self.push(out, Op::RepeatCols(a, k))
    }

    /// `out[r, t * c + i] = a[r, i]` for `t < k`.
    pub fn tile_cols(&mut self, a: NodeId, k: usize) -> NodeId {
        let va = self.value(a);
        let c = va.ncols();
        let out = Tensor::from_shape_fn((va.nrows(), c * k), |(r, j)| va[[r, j % c]]);
        self.push(out, Op::TileCols(a))
    }

    /// Expands per-row diagonal probabilities `s` (`n×C`) into flattened
    /// `C×C` matrices (`n×C²`) whose off-diagonal entries split `1 - s_c`
    /// uniformly over the row.
    pub fn expand_diag(&mut self, s: NodeId) -> Result<NodeId> {
        let vs = self.value(s);
        let c = vs.ncols();
        if c < 2 {
            return Err(MadlError::Contract(format!(
                "expand_diag needs at least 2 classes, got {c}"
            )));
        }
        let denom = (c - 1) as f64;
        let out = Tensor::from_shape_fn((vs.nrows(), c * c), |(r, j)| {
            let (row, col) = (j / c, j % c);
            if row == col {
                vs[[r, row]]
            } else {
                (1.0 - vs[[r, row]]) / denom
            }
        });
        Ok(self.push(out, Op::ExpandDiag(s, c)))
    }

    /// Pairwise squared Euclidean distances between the rows of `a`.
    pub fn sq_distances(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let m = va.nrows();
        let mut out = Tensor::zeros((m, m));
        for i in 0..m {
            for j in (i + 1)..m {
                let d: f64 = va
                    .row(i)
                    .iter()
                    .zip(va.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                out[[i, j]] = d;
                out[[j, i]] = d;
            }
        }
        self.push(out, Op::SqDistances(a))
    }

    /// Reverse sweep from a `1×1` loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.dim() != (1, 1) {
            return Err(MadlError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.dim()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params: Vec<(ParamId, NodeId)> =
            self.param_nodes.iter().map(|(&p, &n)| (p, n)).collect();
        params.sort();
        Ok(Gradients {
            by_node: grads,
            params,
        })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::AddBias(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g * self.value(*b));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s)[[0, 0]];
                if self.wants(*a) {
                    accumulate(grads, *a, g * sv);
                }
                if self.wants(*s) {
                    let ds: f64 = Zip::from(g)
                        .and(self.value(*a))
                        .fold(0.0, |acc, &x, &y| acc + x * y);
                    accumulate(grads, *s, Tensor::from_elem((1, 1), ds));
                }
            }
            Op::MulColumn(a, c) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g * self.value(*c));
                }
                if self.wants(*c) {
                    let prod = g * self.value(*a);
                    accumulate(grads, *c, prod.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::Affine(a, scale) => accumulate(grads, *a, g * *scale),
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(out).for_each(|d, &o| {
                    if o <= 0.0 {
                        *d = 0.0;
                    }
                });
                accumulate(grads, *a, d);
            }
            Op::Exp(a) => accumulate(grads, *a, g * out),
            Op::LnClamped(a, floor) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| *d = if x > *floor { *d / x } else { 0.0 });
                accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(out).for_each(|d, &o| *d *= o * (1.0 - o));
                accumulate(grads, *a, d);
            }
            Op::Recip(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(out).for_each(|d, &o| *d *= -o * o);
                accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = g * out;
                for (mut drow, orow) in d.rows_mut().into_iter().zip(out.rows()) {
                    let dot = drow.sum();
                    Zip::from(&mut drow).and(orow).for_each(|d, &o| *d -= o * dot);
                }
                accumulate(grads, *a, d);
            }
            Op::SumAll(a) => {
                let shape = self.value(*a).raw_dim();
                accumulate(grads, *a, Tensor::from_elem(shape, g[[0, 0]]));
            }
            Op::SumCols(a) => {
                let cols = self.value(*a).ncols();
                let d = Tensor::from_shape_fn((g.nrows(), cols), |(r, _)| g[[r, 0]]);
                accumulate(grads, *a, d);
            }
            Op::GatherRows(a, idx) => {
                let mut d = Tensor::zeros(self.value(*a).raw_dim());
                for (i, &src) in idx.iter().enumerate() {
                    let mut row = d.row_mut(src);
                    row += &g.row(i);
                }
                accumulate(grads, *a, d);
            }
            Op::GatherElems(a, idx) => {
                let cols = g.ncols();
                let mut d = Tensor::zeros(self.value(*a).raw_dim());
                for ((r, j), &gv) in g.indexed_iter() {
                    d[[r, idx[r * cols + j]]] += gv;
                }
                accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.wants(p) {
                        accumulate(grads, p, g.slice(s![.., offset..offset + w]).to_owned());
                    }
                    offset += w;
                }
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).raw_dim();
                let flat: Vec<f64> = g.iter().copied().collect();
                accumulate(grads, *a, Tensor::from_shape_vec(shape, flat).expect("same size"));
            }
            Op::RepeatCols(a, k) => {
                let va = self.value(*a);
                let mut d = Tensor::zeros(va.raw_dim());
                for ((r, c), &gv) in g.indexed_iter() {
                    d[[r, c / k]] += gv;
                }
                accumulate(grads, *a, d);
            }
            Op::TileCols(a) => {
                let va = self.value(*a);
                let cols = va.ncols();
                let mut d = Tensor::zeros(va.raw_dim());
                for ((r, j), &gv) in g.indexed_iter() {
                    d[[r, j % cols]] += gv;
                }
                accumulate(grads, *a, d);
            }
            Op::ExpandDiag(sn, c) => {
                let c = *c;
                let denom = (c - 1) as f64;
                let d = Tensor::from_shape_fn((g.nrows(), c), |(r, row)| {
                    let base = row * c;
                    let mut off = 0.0;
                    for k in 0..c {
                        if k != row {
                            off += g[[r, base + k]];
                        }
                    }
                    g[[r, base + row]] - off / denom
                });
                accumulate(grads, *sn, d);
            }
            Op::SqDistances(a) => {
                let va = self.value(*a);
                let m = va.nrows();
                let mut d = Tensor::zeros(va.raw_dim());
                for i in 0..m {
                    for j in 0..m {
                        if i == j {
                            continue;
                        }
                        let coef = 2.0 * (g[[i, j]] + g[[j, i]]);
                        for k in 0..va.ncols() {
                            d[[i, k]] += coef * (va[[i, k]] - va[[j, k]]);
                        }
                    }
                }
                accumulate(grads, *a, d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(delta),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted row softmax, in place.
pub fn softmax_rows_inplace(t: &mut Tensor) {
    for mut row in t.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
}

/// Fully connected layer: `input · weights + bias`.
pub fn dense(g: &mut Graph<'_>, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
    let h = g.matmul(input, weights)?;
    g.add_bias(h, bias)
}
