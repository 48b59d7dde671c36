//! Operation tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding the computed value plus enough
//! information to run its backward rule. Node inputs always refer to earlier
//! nodes, so a single reverse sweep visits the graph in valid topological
//! order. Gradients accumulate additively across fan-out. A tape and its
//! tensors are confined to one thread; distinct tapes are independent.

use std::sync::Arc;

use super::linalg::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

/// A validated partition of row indices `0..n_rows` into nonempty groups.
#[derive(Clone, Debug)]
pub struct RowGroups {
    groups: Vec<Vec<usize>>,
    n_rows: usize,
}

impl RowGroups {
    pub fn partition(groups: Vec<Vec<usize>>, n_rows: usize) -> Result<Self> {
        let mut seen = vec![false; n_rows];
        let mut covered = 0usize;
        for (g, group) in groups.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::Contract(format!("softmax group {g} is empty")));
            }
            for &r in group {
                if r >= n_rows {
                    return Err(Error::Contract(format!(
                        "group {g} references row {r} outside 0..{n_rows}"
                    )));
                }
                if seen[r] {
                    return Err(Error::Contract(format!(
                        "row {r} appears in more than one group"
                    )));
                }
                seen[r] = true;
                covered += 1;
            }
        }
        if covered != n_rows {
            return Err(Error::Contract(format!(
                "groups cover {covered} of {n_rows} rows; not a partition"
            )));
        }
        Ok(RowGroups { groups, n_rows })
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }
}

/// Disjoint (possibly empty) row-index sets mapping input rows of an
/// `n_in`-row matrix onto the rows of an output with `groups.len()` rows.
#[derive(Clone, Debug)]
pub struct SegmentMap {
    groups: Vec<Vec<usize>>,
    n_in: usize,
}

impl SegmentMap {
    pub fn new(groups: Vec<Vec<usize>>, n_in: usize) -> Result<Self> {
        let mut seen = vec![false; n_in];
        for (g, group) in groups.iter().enumerate() {
            for &r in group {
                if r >= n_in {
                    return Err(Error::Contract(format!(
                        "segment {g} references row {r} outside 0..{n_in}"
                    )));
                }
                if seen[r] {
                    return Err(Error::Contract(format!(
                        "row {r} appears in more than one segment"
                    )));
                }
                seen[r] = true;
            }
        }
        Ok(SegmentMap { groups, n_in })
    }

    pub fn n_out(&self) -> usize {
        self.groups.len()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(TensorId, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Relu(TensorId),
    Tanh(TensorId),
    Exp(TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId, f64),
    AddRow(TensorId, TensorId),
    RowScale(TensorId, Arc<Vec<f64>>),
    GatherRows(TensorId, Arc<Vec<usize>>),
    GroupSoftmax(TensorId, Arc<RowGroups>),
    SegmentSum(TensorId, Arc<SegmentMap>),
    ConcatCols(TensorId, TensorId),
    Transpose(TensorId),
    SumAll(TensorId),
    CrossEntropy { logits: TensorId, label: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation and differentiates it in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`TensorId`].
pub struct GradMap {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradMap {
    /// Gradient of the loss w.r.t. the given node, if it participated.
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Record an input tensor; it becomes a gradient leaf iff `requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Record an input that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> TensorId {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(Error::Dimension(format!(
                "matmul: inner dimensions disagree: {ar}x{ac} vs {br}x{bc}"
            )));
        }
        let mut out = Tensor::zeros(ar, bc);
        matmul_acc(
            out.data_mut(),
            self.value(a).data(),
            self.value(b).data(),
            ar,
            ac,
            bc,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), needs))
    }

    fn binary(&mut self, a: TensorId, b: TensorId, name: &str) -> Result<()> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::Dimension(format!(
                "{name}: operand shapes disagree: {}x{} vs {}x{}",
                sa.0, sa.1, sb.0, sb.1
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let (r, c) = self.value(a).shape();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(r, c, data)?, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let (r, c) = self.value(a).shape();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(r, c, data)?, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let (r, c) = self.value(a).shape();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(r, c, data)?, Op::Mul(a, b), needs))
    }

    fn unary(&mut self, x: TensorId, op: Op, f: impl Fn(f64) -> f64) -> TensorId {
        let v = self.value(x);
        let data = v.data().iter().map(|&t| f(t)).collect();
        let (r, c) = v.shape();
        let needs = self.needs(x);
        self.push(Tensor { rows: r, cols: c, data, requires_grad: false }, op, needs)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(x, Op::Relu(x), |t| t.max(0.0))
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        self.unary(x, Op::Scale(x, c), |t| c * t)
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        self.unary(x, Op::AddScalar(x, c), |t| t + c)
    }

    /// Broadcast-add a 1 x c bias row to every row of an m x c matrix.
    pub fn add_row(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (r, c) = self.value(a).shape();
        let (br, bc) = self.value(bias).shape();
        if br != 1 || bc != c {
            return Err(Error::Dimension(format!(
                "add_row: bias must be 1x{c}, found {br}x{bc}"
            )));
        }
        let mut out = self.value(a).clone();
        out.requires_grad = false;
        for i in 0..r {
            let row = &mut out.data[i * c..(i + 1) * c];
            for (v, b) in row.iter_mut().zip(self.value(bias).data()) {
                *v += b;
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(out, Op::AddRow(a, bias), needs))
    }

    /// Multiply row i by `weights[i]`; the weights are constants.
    pub fn row_scale(&mut self, x: TensorId, weights: Arc<Vec<f64>>) -> Result<TensorId> {
        let (r, c) = self.value(x).shape();
        if weights.len() != r {
            return Err(Error::Contract(format!(
                "row_scale: {} weights for {} rows",
                weights.len(),
                r
            )));
        }
        let mut out = self.value(x).clone();
        out.requires_grad = false;
        for (i, &w) in weights.iter().enumerate() {
            for v in &mut out.data[i * c..(i + 1) * c] {
                *v *= w;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::RowScale(x, weights), needs))
    }

    /// Output row r is input row `idx[r]`; duplicate sources are allowed.
    pub fn gather_rows(&mut self, x: TensorId, idx: Arc<Vec<usize>>) -> Result<TensorId> {
        let (r, c) = self.value(x).shape();
        let mut data = Vec::with_capacity(idx.len() * c);
        for (pos, &i) in idx.iter().enumerate() {
            if i >= r {
                return Err(Error::Contract(format!(
                    "gather_rows: index {i} at position {pos} outside 0..{r}"
                )));
            }
            data.extend_from_slice(self.value(x).row(i));
        }
        let out = Tensor::new(idx.len(), c, data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::GatherRows(x, idx), needs))
    }

    /// Channel-wise softmax within each row group, stabilized by per-group
    /// per-channel max subtraction. `groups` must partition the rows.
    pub fn group_softmax(&mut self, x: TensorId, groups: Arc<RowGroups>) -> Result<TensorId> {
        let (r, c) = self.value(x).shape();
        if groups.n_rows() != r {
            return Err(Error::Contract(format!(
                "group_softmax: groups cover {} rows but input has {r}",
                groups.n_rows()
            )));
        }
        let mut out = self.value(x).clone();
        out.requires_grad = false;
        group_softmax_forward(out.data_mut(), c, groups.groups());
        let needs = self.needs(x);
        Ok(self.push(out, Op::GroupSoftmax(x, groups), needs))
    }

    /// Output row g is the sum of the input rows in segment g (zero if empty).
    pub fn segment_sum(&mut self, x: TensorId, seg: Arc<SegmentMap>) -> Result<TensorId> {
        let (r, c) = self.value(x).shape();
        if seg.n_in != r {
            return Err(Error::Contract(format!(
                "segment_sum: segments built for {} rows but input has {r}",
                seg.n_in
            )));
        }
        let mut out = Tensor::zeros(seg.n_out(), c);
        for (g, group) in seg.groups.iter().enumerate() {
            let acc = &mut out.data[g * c..(g + 1) * c];
            for &row in group {
                let src = self.value(x).row(row);
                // borrow juggling: copy through a temporary slice index
                for j in 0..c {
                    acc[j] += src[j];
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::SegmentSum(x, seg), needs))
    }

    /// Column-wise concatenation `[a | b]` of two matrices with equal rows.
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ar != br {
            return Err(Error::Dimension(format!(
                "concat_cols: row counts disagree: {ar}x{ac} vs {br}x{bc}"
            )));
        }
        let mut data = Vec::with_capacity(ar * (ac + bc));
        for i in 0..ar {
            data.extend_from_slice(self.value(a).row(i));
            data.extend_from_slice(self.value(b).row(i));
        }
        let out = Tensor::new(ar, ac + bc, data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::ConcatCols(a, b), needs))
    }

    pub fn transpose(&mut self, x: TensorId) -> TensorId {
        let (r, c) = self.value(x).shape();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.value(x).data()[i * c + j];
            }
        }
        let needs = self.needs(x);
        self.push(
            Tensor { rows: c, cols: r, data, requires_grad: false },
            Op::Transpose(x),
            needs,
        )
    }

    /// Sum of all entries as a 1x1 tensor.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), needs)
    }

    /// `-log softmax(logits)[label]` for a 1 x k logits row.
    pub fn cross_entropy_with_logits(&mut self, logits: TensorId, label: usize) -> Result<TensorId> {
        let (r, k) = self.value(logits).shape();
        if r != 1 || k < 2 {
            return Err(Error::Contract(format!(
                "cross_entropy_with_logits: logits must be 1xk (k >= 2), found {r}x{k}"
            )));
        }
        if label >= k {
            return Err(Error::Contract(format!(
                "cross_entropy_with_logits: label {label} out of range for {k} classes"
            )));
        }
        let row = self.value(logits).data();
        let loss = cross_entropy_value(row, label);
        let needs = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, label }, needs))
    }

    /// Reverse sweep from a scalar loss; returns gradients for every node that
    /// (transitively) requires them. Deterministic: identical tapes produce
    /// bit-identical gradients.
    pub fn backward(&self, loss: TensorId) -> Result<GradMap> {
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            return Err(Error::Contract(format!(
                "backward: loss must be a 1x1 scalar, found {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(GradMap { grads })
    }

    fn ensure<'a>(
        grads: &'a mut [Option<Vec<f64>>],
        id: TensorId,
        len: usize,
    ) -> &'a mut Vec<f64> {
        grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).shape();
                let n = self.value(*b).cols();
                if self.needs(*a) {
                    let da = Self::ensure(grads, *a, m * k);
                    matmul_a_bt_acc(da, g, self.value(*b).data(), m, n, k);
                }
                if self.needs(*b) {
                    let db = Self::ensure(grads, *b, k * n);
                    matmul_at_b_acc(db, self.value(*a).data(), g, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for &t in &[*a, *b] {
                    if self.needs(t) {
                        let dt = Self::ensure(grads, t, g.len());
                        for (d, gv) in dt.iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    let da = Self::ensure(grads, *a, g.len());
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if self.needs(*b) {
                    let db = Self::ensure(grads, *b, g.len());
                    for (d, gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let da = Self::ensure(grads, *a, g.len());
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(self.value(*b).data()) {
                        *d += gv * bv;
                    }
                }
                if self.needs(*b) {
                    let db = Self::ensure(grads, *b, g.len());
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(self.value(*a).data()) {
                        *d += gv * av;
                    }
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    // subgradient 0 at exactly 0
                    let dx = Self::ensure(grads, *x, g.len());
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(self.value(*x).data()) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                if self.needs(*x) {
                    let dx = Self::ensure(grads, *x, g.len());
                    for ((d, gv), yv) in dx.iter_mut().zip(g).zip(node.value.data()) {
                        *d += gv * (1.0 - yv * yv);
                    }
                }
            }
            Op::Exp(x) => {
                if self.needs(*x) {
                    let dx = Self::ensure(grads, *x, g.len());
                    for ((d, gv), yv) in dx.iter_mut().zip(g).zip(node.value.data()) {
                        *d += gv * yv;
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.needs(*x) {
                    let dx = Self::ensure(grads, *x, g.len());
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += c * gv;
                    }
                }
            }
            Op::AddScalar(x, _) => {
                if self.needs(*x) {
                    let dx = Self::ensure(grads, *x, g.len());
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::AddRow(a, bias) => {
                let c = self.value(*bias).cols();
                if self.needs(*a) {
                    let da = Self::ensure(grads, *a, g.len());
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if self.needs(*bias) {
                    let db = Self::ensure(grads, *bias, c);
                    for (i, gv) in g.iter().enumerate() {
                        db[i % c] += gv;
                    }
                }
            }
            Op::RowScale(x, w) => {
                if self.needs(*x) {
                    let c = node.value.cols();
                    let dx = Self::ensure(grads, *x, g.len());
                    for (i, &wi) in w.iter().enumerate() {
                        for j in 0..c {
                            dx[i * c + j] += wi * g[i * c + j];
                        }
                    }
                }
            }
            Op::GatherRows(x, idx) => {
                if self.needs(*x) {
                    let c = node.value.cols();
                    let dx = Self::ensure(grads, *x, self.value(*x).len());
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            dx[src * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::GroupSoftmax(x, groups) => {
                if self.needs(*x) {
                    let c = node.value.cols();
                    let y = node.value.data();
                    let dx = Self::ensure(grads, *x, g.len());
                    for group in groups.groups() {
                        for j in 0..c {
                            let mut dot = 0.0;
                            for &r in group {
                                dot += g[r * c + j] * y[r * c + j];
                            }
                            for &r in group {
                                dx[r * c + j] += y[r * c + j] * (g[r * c + j] - dot);
                            }
                        }
                    }
                }
            }
            Op::SegmentSum(x, seg) => {
                if self.needs(*x) {
                    let c = node.value.cols();
                    let dx = Self::ensure(grads, *x, self.value(*x).len());
                    for (gidx, group) in seg.groups.iter().enumerate() {
                        for &r in group {
                            for j in 0..c {
                                dx[r * c + j] += g[gidx * c + j];
                            }
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ac = self.value(*a).cols();
                let bc = self.value(*b).cols();
                let rows = node.value.rows();
                if self.needs(*a) {
                    let da = Self::ensure(grads, *a, rows * ac);
                    for i in 0..rows {
                        for j in 0..ac {
                            da[i * ac + j] += g[i * (ac + bc) + j];
                        }
                    }
                }
                if self.needs(*b) {
                    let db = Self::ensure(grads, *b, rows * bc);
                    for i in 0..rows {
                        for j in 0..bc {
                            db[i * bc + j] += g[i * (ac + bc) + ac + j];
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if self.needs(*x) {
                    let (r, c) = node.value.shape(); // transposed shape
                    let dx = Self::ensure(grads, *x, g.len());
                    for i in 0..r {
                        for j in 0..c {
                            dx[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if self.needs(*x) {
                    let gv = g[0];
                    let dx = Self::ensure(grads, *x, self.value(*x).len());
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::CrossEntropy { logits, label } => {
                if self.needs(*logits) {
                    let sm = softmax_row(self.value(*logits).data());
                    let gv = g[0];
                    let dl = Self::ensure(grads, *logits, sm.len());
                    for (j, s) in sm.iter().enumerate() {
                        let onehot = if j == *label { 1.0 } else { 0.0 };
                        dl[j] += gv * (s - onehot);
                    }
                }
            }
        }
    }
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

pub(crate) fn cross_entropy_value(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&v| (v - m).exp()).sum();
    m + z.ln() - logits[label]
}

/// In-place stabilized channel-wise softmax within each row group.
pub(crate) fn group_softmax_forward(data: &mut [f64], cols: usize, groups: &[Vec<usize>]) {
    for group in groups {
        for j in 0..cols {
            let mut mx = f64::NEG_INFINITY;
            for &r in group {
                mx = mx.max(data[r * cols + j]);
            }
            let mut z = 0.0;
            for &r in group {
                let e = (data[r * cols + j] - mx).exp();
                data[r * cols + j] = e;
                z += e;
            }
            for &r in group {
                data[r * cols + j] /= z;
            }
        }
    }
}
