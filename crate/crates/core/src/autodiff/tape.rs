//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! Every operation appends a node holding its forward value and the data its
//! backward rule needs. Nodes are only ever appended, so inputs always precede
//! their consumers and a single reverse sweep visits each node once.

use super::params::{ParamId, ParamStore};
use super::tensor::{axpy, dot, Tensor};
use crate::error::{Error, Result};

/// Probabilities are clipped to `[PROB_CLIP, 1 - PROB_CLIP]` before logs.
pub const PROB_CLIP: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds that can appear on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Linear,
    Add,
    Sub,
    Scale,
    ConcatCols,
    SliceCols,
    GatherRows,
    SegmentMean,
    GroupMax,
    Relu,
    Sigmoid,
    MeanRows,
    Sum,
    SqDist,
    BceLogits,
    GramSchmidt,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        segment: Vec<usize>,
        counts: Vec<usize>,
    },
    GroupMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    MeanRows(Var),
    Sum(Var),
    SqDist(Var, Var),
    BceLogits {
        z: Var,
        target: Vec<f64>,
    },
    GramSchmidt(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Linear { .. } => OpKind::Linear,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Scale(..) => OpKind::Scale,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::SegmentMean { .. } => OpKind::SegmentMean,
            Op::GroupMax { .. } => OpKind::GroupMax,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::MeanRows(_) => OpKind::MeanRows,
            Op::Sum(_) => OpKind::Sum,
            Op::SqDist(..) => OpKind::SqDist,
            Op::BceLogits { .. } => OpKind::BceLogits,
            Op::GramSchmidt(_) => OpKind::GramSchmidt,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// A tape is meant to live for a single forward/backward pass. Values that
/// do not depend on any gradient-requiring leaf carry no gradient.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_shape(self.shapes[v.0], g.clone()).expect("gradient shape"))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
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

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a model parameter. Repeated calls return the same leaf so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `x · wᵀ + b` with `x: [B, in]`, `w: [out, in]`, `b: [1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: xs,
                right: ws,
            });
        }
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs != [1, ws[0]] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    left: ws,
                    right: bs,
                });
            }
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = vec![0.0; batch * out];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for r in 0..batch {
                let xr = &xv[r * inp..(r + 1) * inp];
                let yr = &mut y[r * out..(r + 1) * out];
                for (o, yo) in yr.iter_mut().enumerate() {
                    let bias = bv.map_or(0.0, |b| b[o]);
                    *yo = bias + dot(xr, &wv[o * inp..(o + 1) * inp]);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::from_shape([batch, out], y)?,
            Op::Linear { x, w, b },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2(a, b, "add", |x, y| x + y, |a, b| Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2(a, b, "sub", |x, y| x - y, |a, b| Op::Sub(a, b))
    }

    fn elementwise2(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: name,
                left: sa,
                right: sb,
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_shape(sa, data)?, op(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * c).collect();
        let shape = t.shape();
        let rg = self.rg(a);
        self.push(Tensor::from_shape(shape, data).unwrap(), Op::Scale(a, c), rg)
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat of zero tensors".into()));
        }
        let rows = self.value(parts[0]).rows();
        for p in parts {
            let s = self.value(*p).shape();
            if s[0] != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape(),
                    right: s,
                });
            }
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Tensor::from_shape([rows, cols], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.value(x).shape();
        if start + len > s[1] {
            return Err(Error::Invalid(format!(
                "column slice {start}..{} out of range for shape {s:?}",
                start + len
            )));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(s[0] * len);
        for r in 0..s[0] {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_shape([s[0], len], data)?,
            Op::SliceCols { x, start },
            rg,
        ))
    }

    /// Output row `k` is input row `index[k]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let s = self.value(x).shape();
        if let Some(bad) = index.iter().find(|&&i| i >= s[0]) {
            return Err(Error::Invalid(format!(
                "row index {bad} out of range for shape {s:?}"
            )));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(index.len() * s[1]);
        for &i in index {
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_shape([index.len(), s[1]], data)?,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Mean of the rows assigned to each of `n_segments` segments. Empty
    /// segments yield a zero row.
    pub fn segment_mean(&mut self, x: Var, segment: &[usize], n_segments: usize) -> Result<Var> {
        let s = self.value(x).shape();
        if segment.len() != s[0] {
            return Err(Error::Invalid(format!(
                "segment ids cover {} rows but tensor has shape {s:?}",
                segment.len()
            )));
        }
        if let Some(bad) = segment.iter().find(|&&g| g >= n_segments) {
            return Err(Error::Invalid(format!(
                "segment id {bad} out of range for {n_segments} segments"
            )));
        }
        let cols = s[1];
        let mut counts = vec![0usize; n_segments];
        let mut data = vec![0.0; n_segments * cols];
        let t = self.value(x);
        for (r, &g) in segment.iter().enumerate() {
            counts[g] += 1;
            axpy(1.0, t.row(r), &mut data[g * cols..(g + 1) * cols]);
        }
        for (g, &c) in counts.iter().enumerate() {
            if c > 0 {
                let inv = 1.0 / c as f64;
                data[g * cols..(g + 1) * cols]
                    .iter_mut()
                    .for_each(|v| *v *= inv);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_shape([n_segments, cols], data)?,
            Op::SegmentMean {
                x,
                segment: segment.to_vec(),
                counts,
            },
            rg,
        ))
    }

    /// Column-wise max over consecutive groups of `group` rows.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let s = self.value(x).shape();
        if group == 0 || s[0] % group != 0 {
            return Err(Error::Invalid(format!(
                "cannot split {} rows into groups of {group}",
                s[0]
            )));
        }
        let (n_groups, cols) = (s[0] / group, s[1]);
        let t = self.value(x);
        let mut data = vec![f64::NEG_INFINITY; n_groups * cols];
        let mut argmax = vec![0usize; n_groups * cols];
        for g in 0..n_groups {
            let out = &mut data[g * cols..(g + 1) * cols];
            let arg = &mut argmax[g * cols..(g + 1) * cols];
            for r in g * group..(g + 1) * group {
                for (c, (&v, (o, a))) in t
                    .row(r)
                    .iter()
                    .zip(out.iter_mut().zip(arg.iter_mut()))
                    .enumerate()
                {
                    if v > *o {
                        *o = v;
                        *a = r * cols + c;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_shape([n_groups, cols], data)?,
            Op::GroupMax { x, argmax },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.max(0.0)).collect();
        let shape = t.shape();
        let rg = self.rg(x);
        self.push(Tensor::from_shape(shape, data).unwrap(), Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| sigmoid(v)).collect();
        let shape = t.shape();
        let rg = self.rg(x);
        self.push(Tensor::from_shape(shape, data).unwrap(), Op::Sigmoid(x), rg)
    }

    /// `[R, C] -> [1, C]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [rows, cols] = t.shape();
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            axpy(1.0, t.row(r), &mut data);
        }
        if rows > 0 {
            data.iter_mut().for_each(|v| *v /= rows as f64);
        }
        let rg = self.rg(x);
        self.push(Tensor::row_vector(data), Op::MeanRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// `Σ (a - b)²` as a scalar.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "sq_dist",
                left: sa,
                right: sb,
            });
        }
        let total = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(total), Op::SqDist(a, b), rg))
    }

    /// Summed binary cross-entropy of `sigmoid(z)` against 0/1 targets, with
    /// probabilities clipped to `[PROB_CLIP, 1 - PROB_CLIP]`.
    pub fn bce_logits(&mut self, z: Var, target: &Tensor) -> Result<Var> {
        let s = self.value(z).shape();
        if s != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "bce_logits",
                left: s,
                right: target.shape(),
            });
        }
        let total = self
            .value(z)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| bce_term(z, t))
            .sum();
        let rg = self.rg(z);
        Ok(self.push(
            Tensor::scalar(total),
            Op::BceLogits {
                z,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    /// Maps each row `[a1, a2]` of a `[N, 6]` tensor to the row-major 3×3
    /// rotation whose columns are the Gram-Schmidt orthonormalisation of
    /// `a1`, `a2` and their cross product.
    pub fn gram_schmidt(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        if s[1] != 6 {
            return Err(Error::ShapeMismatch {
                op: "gram_schmidt",
                left: s,
                right: [s[0], 6],
            });
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(s[0] * 9);
        for r in 0..s[0] {
            data.extend_from_slice(&gram_schmidt_forward(t.row(r)).0);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_shape([s[0], 9], data)?,
            Op::GramSchmidt(x),
            rg,
        ))
    }

    /// Parameter gradients indexed by [`ParamId`]; `None` for parameters
    /// that were not used on this tape.
    pub fn param_gradients(&self, grads: &Gradients, n_params: usize) -> Vec<Option<Tensor>> {
        (0..n_params)
            .map(|i| {
                self.param_vars
                    .get(i)
                    .copied()
                    .flatten()
                    .and_then(|v| grads.get(v))
            })
            .collect()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let s = self.value(loss).shape();
        if s != [1, 1] {
            return Err(Error::NonScalarLoss(s));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let (batch, inp) = (xt.rows(), xt.cols());
                let out = wt.rows();
                if let Some(dx) = self.grad_slot(grads, *x) {
                    let wv = wt.data();
                    for r in 0..batch {
                        let dxr = &mut dx[r * inp..(r + 1) * inp];
                        for o in 0..out {
                            let go = g[r * out + o];
                            if go != 0.0 {
                                axpy(go, &wv[o * inp..(o + 1) * inp], dxr);
                            }
                        }
                    }
                }
                if let Some(dw) = self.grad_slot(grads, *w) {
                    let xv = xt.data();
                    for r in 0..batch {
                        let xr = &xv[r * inp..(r + 1) * inp];
                        for o in 0..out {
                            let go = g[r * out + o];
                            if go != 0.0 {
                                axpy(go, xr, &mut dw[o * inp..(o + 1) * inp]);
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(db) = self.grad_slot(grads, *b) {
                        for r in 0..batch {
                            axpy(1.0, &g[r * out..(r + 1) * out], db);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.grad_slot(grads, *a) {
                    axpy(1.0, g, da);
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    axpy(1.0, g, db);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.grad_slot(grads, *a) {
                    axpy(1.0, g, da);
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    axpy(-1.0, g, db);
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = self.grad_slot(grads, *a) {
                    axpy(*c, g, da);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    if let Some(dp) = self.grad_slot(grads, *p) {
                        for r in 0..rows {
                            axpy(
                                1.0,
                                &g[r * total + offset..r * total + offset + cols],
                                &mut dp[r * cols..(r + 1) * cols],
                            );
                        }
                    }
                    offset += cols;
                }
            }
            Op::SliceCols { x, start } => {
                let [rows, len] = node.value.shape();
                let cols = self.value(*x).cols();
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for r in 0..rows {
                        axpy(
                            1.0,
                            &g[r * len..(r + 1) * len],
                            &mut dx[r * cols + start..r * cols + start + len],
                        );
                    }
                }
            }
            Op::GatherRows { x, index } => {
                let cols = node.value.cols();
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for (k, &i) in index.iter().enumerate() {
                        axpy(
                            1.0,
                            &g[k * cols..(k + 1) * cols],
                            &mut dx[i * cols..(i + 1) * cols],
                        );
                    }
                }
            }
            Op::SegmentMean { x, segment, counts } => {
                let cols = node.value.cols();
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for (r, &s) in segment.iter().enumerate() {
                        let inv = 1.0 / counts[s] as f64;
                        axpy(
                            inv,
                            &g[s * cols..(s + 1) * cols],
                            &mut dx[r * cols..(r + 1) * cols],
                        );
                    }
                }
            }
            Op::GroupMax { x, argmax } => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for (k, &src) in argmax.iter().enumerate() {
                        dx[src] += g[k];
                    }
                }
            }
            Op::Relu(x) => {
                let y = node.value.data();
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                        if yi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::MeanRows(x) => {
                let [rows, cols] = self.value(*x).shape();
                if let Some(dx) = self.grad_slot(grads, *x) {
                    let inv = 1.0 / rows as f64;
                    for r in 0..rows {
                        axpy(inv, g, &mut dx[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SqDist(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.grad_slot(grads, *a) {
                    for ((d, x), y) in da.iter_mut().zip(av).zip(bv) {
                        *d += 2.0 * (x - y) * g[0];
                    }
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    for ((d, x), y) in db.iter_mut().zip(av).zip(bv) {
                        *d -= 2.0 * (x - y) * g[0];
                    }
                }
            }
            Op::BceLogits { z, target } => {
                let zv = self.value(*z).data();
                if let Some(dz) = self.grad_slot(grads, *z) {
                    for ((d, &zi), &ti) in dz.iter_mut().zip(zv).zip(target) {
                        let p = sigmoid(zi);
                        if p > PROB_CLIP && p < 1.0 - PROB_CLIP {
                            *d += (p - ti) * g[0];
                        }
                    }
                }
            }
            Op::GramSchmidt(x) => {
                let xt = self.value(*x);
                let rows = xt.rows();
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for r in 0..rows {
                        let gx = gram_schmidt_backward(xt.row(r), &g[r * 9..(r + 1) * 9]);
                        axpy(1.0, &gx, &mut dx[r * 6..(r + 1) * 6]);
                    }
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Cross-entropy of one logit against a 0/1 target, clipped like
/// [`Tape::bce_logits`].
pub fn bce_term(z: f64, t: f64) -> f64 {
    let p = sigmoid(z);
    if p <= PROB_CLIP || p >= 1.0 - PROB_CLIP {
        let pc = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
        -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
    } else {
        // softplus(z) - t z, evaluated without overflow
        let softplus = if z > 0.0 {
            z + (-z).exp().ln_1p()
        } else {
            z.exp().ln_1p()
        };
        softplus - t * z
    }
}

/// Norm below which the 6-D rotation input is considered degenerate.
pub const GS_DEGENERATE: f64 = 1e-8;

type V3 = [f64; 3];

fn v_dot(a: &V3, b: &V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn v_cross(a: &V3, b: &V3) -> V3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn v_norm(a: &V3) -> f64 {
    v_dot(a, a).sqrt()
}

struct GsParts {
    b1: V3,
    b2: V3,
    n1: f64,
    n2: f64,
}

fn gs_parts(x: &[f64]) -> Option<GsParts> {
    let a1 = [x[0], x[1], x[2]];
    let a2 = [x[3], x[4], x[5]];
    let n1 = v_norm(&a1);
    if n1 < GS_DEGENERATE {
        return None;
    }
    let b1 = [a1[0] / n1, a1[1] / n1, a1[2] / n1];
    let proj = v_dot(&b1, &a2);
    let u2 = [
        a2[0] - proj * b1[0],
        a2[1] - proj * b1[1],
        a2[2] - proj * b1[2],
    ];
    let n2 = v_norm(&u2);
    if n2 < GS_DEGENERATE {
        return None;
    }
    let b2 = [u2[0] / n2, u2[1] / n2, u2[2] / n2];
    Some(GsParts { b1, b2, n1, n2 })
}

/// Row-major rotation from a 6-D input plus whether the input was usable;
/// degenerate inputs give the identity.
pub fn gram_schmidt_forward(x: &[f64]) -> ([f64; 9], bool) {
    match gs_parts(x) {
        None => ([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], false),
        Some(p) => {
            let b3 = v_cross(&p.b1, &p.b2);
            let mut r = [0.0; 9];
            for i in 0..3 {
                r[i * 3] = p.b1[i];
                r[i * 3 + 1] = p.b2[i];
                r[i * 3 + 2] = b3[i];
            }
            (r, true)
        }
    }
}

fn gram_schmidt_backward(x: &[f64], g: &[f64]) -> [f64; 6] {
    let Some(p) = gs_parts(x) else {
        return [0.0; 6];
    };
    let a2 = [x[3], x[4], x[5]];
    let col = |c: usize| [g[c], g[3 + c], g[6 + c]];
    let (mut gb1, mut gb2, gb3) = (col(0), col(1), col(2));
    // b3 = b1 × b2
    let t1 = v_cross(&p.b2, &gb3);
    let t2 = v_cross(&gb3, &p.b1);
    for i in 0..3 {
        gb1[i] += t1[i];
        gb2[i] += t2[i];
    }
    // b2 = u2 / |u2|
    let s2 = v_dot(&p.b2, &gb2);
    let gu2: V3 = std::array::from_fn(|i| (gb2[i] - p.b2[i] * s2) / p.n2);
    // u2 = a2 - (b1·a2) b1
    let proj = v_dot(&p.b1, &a2);
    let s_u = v_dot(&p.b1, &gu2);
    let ga2: V3 = std::array::from_fn(|i| gu2[i] - p.b1[i] * s_u);
    for i in 0..3 {
        gb1[i] -= proj * gu2[i] + a2[i] * s_u;
    }
    // b1 = a1 / |a1|
    let s1 = v_dot(&p.b1, &gb1);
    let ga1: V3 = std::array::from_fn(|i| (gb1[i] - p.b1[i] * s1) / p.n1);
    [ga1[0], ga1[1], ga1[2], ga2[0], ga2[1], ga2[2]]
}
