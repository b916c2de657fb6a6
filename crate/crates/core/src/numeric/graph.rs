//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in execution order, so the node list
//! is already a topological order and backward is a single reverse sweep.
//! Parameters are borrowed from a [`ParamStore`] rather than copied.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use super::tensor::{gemm, row_moments, softmax_in_place};
use super::{Gradients, NumericError, ParamId, ParamStore, Tensor};
use crate::decoder::crf;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRowVector(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    MulConst(Var, Vec<f64>),
    Sum(Var),
    LogSumExp(Var),
    /// Loss node whose input gradients were computed during the forward pass.
    FusedLoss {
        inputs: Vec<Var>,
        grads: Vec<Vec<f64>>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    requires_grad: bool,
    sparse: bool,
    op: Op,
}

enum GradBuf {
    Dense(Vec<f64>),
    Rows {
        cols: usize,
        rows: BTreeMap<usize, Vec<f64>>,
    },
}

impl GradBuf {
    fn to_dense(&self, len: usize) -> Vec<f64> {
        match self {
            GradBuf::Dense(v) => v.clone(),
            GradBuf::Rows { cols, rows } => {
                let mut out = vec![0.0; len];
                for (r, vals) in rows {
                    out[r * cols..(r + 1) * cols].copy_from_slice(vals);
                }
                out
            }
        }
    }

    fn merge(&mut self, other: GradBuf, len: usize) {
        match (self, other) {
            (GradBuf::Dense(a), GradBuf::Dense(b)) => add_assign(a, &b),
            (GradBuf::Rows { rows: a, .. }, GradBuf::Rows { rows: b, .. }) => {
                for (r, vals) in b {
                    match a.get_mut(&r) {
                        Some(existing) => add_assign(existing, &vals),
                        None => {
                            a.insert(r, vals);
                        }
                    }
                }
            }
            (this, other) => {
                let mut dense = this.to_dense(len);
                add_assign(&mut dense, &other.to_dense(len));
                *this = GradBuf::Dense(dense);
            }
        }
    }
}

fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// A recorded computation.
///
/// Forward values are computed eagerly as operations are added. Leaf
/// gradients persist across [`Graph::backward`] calls and accumulate until
/// [`Graph::zero_grad`].
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<GradBuf>>,
    bound: HashMap<ParamId, Var>,
    param_of: HashMap<usize, ParamId>,
    trainable: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    /// Graph whose bound parameters require gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: HashMap::new(),
            param_of: HashMap::new(),
            trainable: true,
        }
    }

    /// Graph whose bound parameters are treated as constants.
    pub fn inference() -> Self {
        Self {
            trainable: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, requires_grad: bool, sparse: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            sparse,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), rg, false, op)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), false, false, Op::Leaf)
    }

    /// Leaf that requires a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), true, false, Op::Leaf)
    }

    /// Binds a stored parameter as a leaf, once per graph.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let p = store.param(id);
        let var = self.push(Cow::Borrowed(&p.value), self.trainable, p.sparse, Op::Leaf);
        self.bound.insert(id, var);
        self.param_of.insert(var.0, id);
        var
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, densified.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let buf = self.grads[v.0].as_ref()?;
        let value = &self.nodes[v.0].value;
        let dense = buf.to_dense(value.len());
        Some(Tensor::new(value.shape().to_vec(), dense).expect("gradient shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Adds `scale * grad` of every bound parameter into `out`.
    pub fn accumulate_param_grads(&self, out: &mut Gradients, scale: f64) {
        for (&id, var) in &self.bound {
            match &self.grads[var.0] {
                Some(GradBuf::Dense(g)) => out.add_dense(id, g, scale),
                Some(GradBuf::Rows { rows, .. }) => {
                    for (r, vals) in rows {
                        out.add_row(id, *r, vals, scale);
                    }
                }
                None => {}
            }
        }
    }

    /// Parameter bound to a leaf, if any.
    pub fn bound_param(&self, v: Var) -> Option<ParamId> {
        self.param_of.get(&v.0).copied()
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> NumericError {
        NumericError::ShapeMismatch {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (m, k) = self.value(a).expect_matrix("matmul")?;
        let (k2, n) = self.value(b).expect_matrix("matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, out.data_mut(), 0.0);
        Ok(self.push_op(out, &[a, b], Op::MatMul(a, b)))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (m, k) = self.value(a).expect_matrix("matmul_bt")?;
        let (n, k2) = self.value(b).expect_matrix("matmul_bt")?;
        if k != k2 {
            return Err(self.mismatch("matmul_bt", a, b));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, out.data_mut(), 0.0);
        Ok(self.push_op(out, &[a, b], Op::MatMulBt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch("add", a, b));
        }
        let mut out = self.value(a).clone();
        add_assign(out.data_mut(), self.value(b).data());
        Ok(self.push_op(out, &[a, b], Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch("mul", a, b));
        }
        let mut out = self.value(a).clone();
        for (x, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        Ok(self.push_op(out, &[a, b], Op::Mul(a, b)))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row_vector(&mut self, x: Var, bias: Var) -> Result<Var, NumericError> {
        let (_, n) = self.value(x).expect_matrix("add_row_vector")?;
        if self.value(bias).len() != n {
            return Err(self.mismatch("add_row_vector", x, bias));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(n) {
            add_assign(row, b);
        }
        Ok(self.push_op(out, &[x, bias], Op::AddRowVector(x, bias)))
    }

    /// `x * w + b` for a matrix `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericError> {
        let xw = self.matmul(x, w)?;
        self.add_row_vector(xw, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push_op(out, &[x], Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push_op(out, &[x], Op::Relu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, NumericError> {
        let cols = self.value(x).cols();
        self.softmax_rows_masked(x, cols)
    }

    /// Row softmax restricted to the first `valid` columns; the remaining
    /// columns get weight exactly zero.
    pub fn softmax_rows_masked(&mut self, x: Var, valid: usize) -> Result<Var, NumericError> {
        let (_, n) = self.value(x).expect_matrix("softmax_rows")?;
        if valid == 0 || valid > n {
            return Err(NumericError::InvalidMask { valid, cols: n });
        }
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(&mut row[..valid]);
            row[valid..].iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(self.push_op(out, &[x], Op::SoftmaxRows(x)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumericError> {
        let (m, n) = self.value(x).expect_matrix("layer_norm")?;
        if n < 2 {
            return Err(NumericError::DegenerateRow(n));
        }
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        let mut normalized = self.value(x).data().to_vec();
        let mut inv_std = Vec::with_capacity(m);
        for row in normalized.chunks_mut(n) {
            let (mean, r) = row_moments(row, eps);
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            inv_std.push(r);
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = Tensor::zeros(&[m, n]);
        for (orow, nrow) in out.data_mut().chunks_mut(n).zip(normalized.chunks(n)) {
            for j in 0..n {
                orow[j] = nrow[j] * g[j] + b[j];
            }
        }
        Ok(self.push_op(
            out,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let first = *parts.first().ok_or(NumericError::Empty("concat_cols"))?;
        let (m, _) = self.value(first).expect_matrix("concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).expect_matrix("concat_cols")?;
            if r != m {
                return Err(self.mismatch("concat_cols", first, p));
            }
            total += c;
        }
        let mut out = Tensor::zeros(&[m, total]);
        for i in 0..m {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(i);
                out.row_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push_op(out, parts, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let first = *parts.first().ok_or(NumericError::Empty("concat_rows"))?;
        let mut out = self.value(first).clone();
        out.expect_matrix("concat_rows")?;
        for &p in &parts[1..] {
            out.append_rows(self.value(p))?;
        }
        Ok(self.push_op(out, parts, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `start..start + count`.
    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var, NumericError> {
        let (m, n) = self.value(x).expect_matrix("slice_rows")?;
        if start + count > m {
            return Err(NumericError::OutOfRange {
                op: "slice_rows",
                index: start + count,
                len: m,
            });
        }
        let data = self.value(x).data()[start * n..(start + count) * n].to_vec();
        let out = Tensor::new(vec![count, n], data)?;
        Ok(self.push_op(out, &[x], Op::SliceRows(x, start)))
    }

    /// Stacks the listed rows of a matrix (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var, NumericError> {
        let (m, n) = self.value(table).expect_matrix("gather_rows")?;
        let mut out = Tensor::zeros(&[rows.len(), n]);
        for (i, &r) in rows.iter().enumerate() {
            if r >= m {
                return Err(NumericError::OutOfRange {
                    op: "gather_rows",
                    index: r,
                    len: m,
                });
            }
            out.row_mut(i).copy_from_slice(self.value(table).row(r));
        }
        Ok(self.push_op(out, &[table], Op::Gather(table, rows.to_vec())))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, factors: Vec<f64>) -> Result<Var, NumericError> {
        if factors.len() != self.value(x).len() {
            return Err(NumericError::DataLength {
                shape: self.value(x).shape().to_vec(),
                len: factors.len(),
            });
        }
        let mut out = self.value(x).clone();
        for (v, f) in out.data_mut().iter_mut().zip(&factors) {
            *v *= f;
        }
        Ok(self.push_op(out, &[x], Op::MulConst(x, factors)))
    }

    /// Inverted dropout: zeroes each entry with probability `rate` and
    /// scales survivors by `1 / (1 - rate)`.
    pub fn dropout<R: rand::Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var, NumericError> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let mask = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mul_const(x, mask)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push_op(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    /// Log-sum-exp over all elements.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var, NumericError> {
        let v = super::logsumexp(self.value(x).data())?;
        Ok(self.push_op(Tensor::scalar(v), &[x], Op::LogSumExp(x)))
    }

    /// Negative log-likelihood of `gold` under a linear-chain CRF with
    /// per-position `emissions` (`T x L`) and `transitions` (`L x L`, row =
    /// previous label).
    pub fn crf_nll(&mut self, emissions: Var, transitions: Var, gold: &[usize]) -> Result<Var, NumericError> {
        let (nll, d_em, d_tr) = crf::nll_with_grads(self.value(emissions), self.value(transitions), gold)?;
        Ok(self.push_op(
            Tensor::scalar(nll),
            &[emissions, transitions],
            Op::FusedLoss {
                inputs: vec![emissions, transitions],
                grads: vec![d_em, d_tr],
            },
        ))
    }

    /// Summed negative log softmax probability of `targets`, one per row.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericError> {
        let (m, n) = self.value(logits).expect_matrix("softmax_cross_entropy")?;
        if targets.len() != m {
            return Err(NumericError::LengthMismatch {
                op: "softmax_cross_entropy",
                expected: m,
                actual: targets.len(),
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(n).zip(targets) {
            if t >= n {
                return Err(NumericError::OutOfRange {
                    op: "softmax_cross_entropy",
                    index: t,
                    len: n,
                });
            }
            let lse = super::tensor::logsumexp_unchecked(row);
            loss += lse - row[t];
            softmax_in_place(row);
            row[t] -= 1.0;
        }
        Ok(self.push_op(
            Tensor::scalar(loss),
            &[logits],
            Op::FusedLoss {
                inputs: vec![logits],
                grads: vec![probs],
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericError::NotScalar(lv.shape().to_vec()));
        }
        lv.ensure_finite("loss")?;
        let mut temps: Vec<Option<GradBuf>> = (0..=loss.0).map(|_| None).collect();
        temps[loss.0] = Some(GradBuf::Dense(vec![1.0]));

        for i in (0..=loss.0).rev() {
            let Some(buf) = temps[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let len = node.value.len();
                if let GradBuf::Dense(g) = &buf {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(NumericError::NonFinite("gradient"));
                    }
                }
                match &mut self.grads[i] {
                    Some(existing) => existing.merge(buf, len),
                    slot => *slot = Some(buf),
                }
                continue;
            }
            let GradBuf::Dense(g) = buf else {
                unreachable!("only leaves hold row-sparse gradients")
            };
            self.propagate(i, &g, &mut temps);
        }
        Ok(())
    }

    fn dense_slot<'t>(&self, temps: &'t mut [Option<GradBuf>], v: Var) -> Option<&'t mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        let slot = &mut temps[v.0];
        match slot {
            None => *slot = Some(GradBuf::Dense(vec![0.0; len])),
            Some(GradBuf::Rows { .. }) => {
                let dense = slot.as_ref().unwrap().to_dense(len);
                *slot = Some(GradBuf::Dense(dense));
            }
            Some(GradBuf::Dense(_)) => {}
        }
        match slot {
            Some(GradBuf::Dense(v)) => Some(v),
            _ => unreachable!(),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], temps: &mut [Option<GradBuf>]) {
        let out_shape = self.nodes[i].value.shape();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if let Some(ga) = self.dense_slot(temps, *a) {
                    gemm(m, n, k, g, false, bv.data(), true, ga, 1.0);
                }
                if let Some(gb) = self.dense_slot(temps, *b) {
                    gemm(k, m, n, av.data(), true, g, false, gb, 1.0);
                }
            }
            Op::MatMulBt(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.rows(), av.cols());
                let n = bv.rows();
                if let Some(ga) = self.dense_slot(temps, *a) {
                    gemm(m, n, k, g, false, bv.data(), false, ga, 1.0);
                }
                if let Some(gb) = self.dense_slot(temps, *b) {
                    gemm(n, m, k, g, true, av.data(), false, gb, 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.dense_slot(temps, *v) {
                        add_assign(gv, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.dense_slot(temps, *a) {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                }
                if let Some(gb) = self.dense_slot(temps, *b) {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                }
            }
            Op::AddRowVector(x, bias) => {
                if let Some(gx) = self.dense_slot(temps, *x) {
                    add_assign(gx, g);
                }
                let n = self.value(*bias).len();
                if let Some(gb) = self.dense_slot(temps, *bias) {
                    for row in g.chunks(n) {
                        add_assign(gb, row);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.dense_slot(temps, *x) {
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += c * b;
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.dense_slot(temps, *x) {
                    for ((a, b), xi) in gx.iter_mut().zip(g).zip(xv) {
                        if *xi > 0.0 {
                            *a += b;
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let y = self.nodes[i].value.data();
                let n = out_shape[1];
                if let Some(gx) = self.dense_slot(temps, *x) {
                    for ((gxr, gr), yr) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gxr[j] += yr[j] * (gr[j] - dot);
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
                let n = out_shape[1];
                let gamma = self.value(*gain).data();
                if let Some(gg) = self.dense_slot(temps, *gain) {
                    for (gr, nr) in g.chunks(n).zip(normalized.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * nr[j];
                        }
                    }
                }
                if let Some(gb) = self.dense_slot(temps, *bias) {
                    for gr in g.chunks(n) {
                        add_assign(gb, gr);
                    }
                }
                if let Some(gx) = self.dense_slot(temps, *x) {
                    let nf = n as f64;
                    let mut ghat = vec![0.0; n];
                    for (row, ((gxr, gr), nr)) in gx
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(normalized.chunks(n))
                        .enumerate()
                    {
                        for j in 0..n {
                            ghat[j] = gr[j] * gamma[j];
                        }
                        let mean_g = ghat.iter().sum::<f64>() / nf;
                        let mean_gx = ghat.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / nf;
                        let r = inv_std[row];
                        for j in 0..n {
                            gxr[j] += r * (ghat[j] - mean_g - nr[j] * mean_gx);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out_shape[1];
                let mut off = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if let Some(gp) = self.dense_slot(temps, *p) {
                        for (gpr, gr) in gp.chunks_mut(c).zip(g.chunks(total)) {
                            add_assign(gpr, &gr[off..off + c]);
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if let Some(gp) = self.dense_slot(temps, *p) {
                        add_assign(gp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceRows(x, start) => {
                let n = out_shape[1];
                if let Some(gx) = self.dense_slot(temps, *x) {
                    add_assign(&mut gx[start * n..start * n + g.len()], g);
                }
            }
            Op::Gather(table, rows) => {
                let tnode = &self.nodes[table.0];
                if !tnode.requires_grad {
                    return;
                }
                let n = tnode.value.cols();
                if tnode.sparse && matches!(tnode.op, Op::Leaf) {
                    let slot = temps[table.0].get_or_insert_with(|| GradBuf::Rows {
                        cols: n,
                        rows: BTreeMap::new(),
                    });
                    match slot {
                        GradBuf::Rows { rows: acc, .. } => {
                            for (gr, &r) in g.chunks(n).zip(rows) {
                                add_assign(acc.entry(r).or_insert_with(|| vec![0.0; n]), gr);
                            }
                        }
                        GradBuf::Dense(d) => {
                            for (gr, &r) in g.chunks(n).zip(rows) {
                                add_assign(&mut d[r * n..(r + 1) * n], gr);
                            }
                        }
                    }
                } else if let Some(gt) = self.dense_slot(temps, *table) {
                    for (gr, &r) in g.chunks(n).zip(rows) {
                        add_assign(&mut gt[r * n..(r + 1) * n], gr);
                    }
                }
            }
            Op::MulConst(x, factors) => {
                if let Some(gx) = self.dense_slot(temps, *x) {
                    for ((a, b), f) in gx.iter_mut().zip(g).zip(factors) {
                        *a += b * f;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.dense_slot(temps, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::LogSumExp(x) => {
                let xv = self.value(*x).data();
                let out = self.nodes[i].value.item();
                if let Some(gx) = self.dense_slot(temps, *x) {
                    for (a, xi) in gx.iter_mut().zip(xv) {
                        *a += g[0] * (xi - out).exp();
                    }
                }
            }
            Op::FusedLoss { inputs, grads } => {
                for (v, d) in inputs.iter().zip(grads) {
                    if let Some(gv) = self.dense_slot(temps, *v) {
                        for (a, b) in gv.iter_mut().zip(d) {
                            *a += g[0] * b;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Central finite differences of `f` with respect to every entry of the
    /// leaf tensors, compared against the graph's gradients.
    fn check_grads<F>(inputs: &[Tensor], f: F, tol: f64)
    where
        F: Fn(&mut Graph<'_>, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let loss = f(&mut g, &vars);
        g.backward(loss).unwrap();
        let h = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = g.grad(vars[k]).unwrap_or_else(|| Tensor::zeros(t.shape()));
            for j in 0..t.len() {
                let eval = |delta: f64| {
                    let mut perturbed = inputs.to_vec();
                    perturbed[k].data_mut()[j] += delta;
                    let mut g2 = Graph::new();
                    let vs: Vec<Var> = perturbed.into_iter().map(|t| g2.variable(t)).collect();
                    let l = f(&mut g2, &vs);
                    g2.value(l).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[j];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
                assert!(err < tol, "input {k} entry {j}: analytic {a} numeric {numeric}");
            }
        }
    }

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, rng)
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn softmax_sum_gradient_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.variable(rand_t(&mut rng, &[3, 5]));
        let y = g.softmax_rows(x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, 8.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(NumericError::NotScalar(_))));
    }

    #[test]
    fn each_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_t(&mut rng, &[3, 4]);
        let b = rand_t(&mut rng, &[4, 2]);
        check_grads(&[a.clone(), b], |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            let w = g.constant(Tensor::uniform(&[3, 2], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3)));
            let z = g.mul(y, w).unwrap();
            g.sum(z)
        }, 1e-6);

        let c = rand_t(&mut rng, &[5, 4]);
        check_grads(&[a.clone(), c], |g, v| {
            let y = g.matmul_bt(v[0], v[1]).unwrap();
            let y2 = g.mul(y, y).unwrap();
            g.sum(y2)
        }, 1e-6);

        let bias = rand_t(&mut rng, &[4]);
        check_grads(&[a.clone(), bias], |g, v| {
            let y = g.add_row_vector(v[0], v[1]).unwrap();
            let y = g.relu(y);
            let y2 = g.mul(y, y).unwrap();
            g.sum(y2)
        }, 1e-6);

        check_grads(&[a.clone()], |g, v| {
            let y = g.softmax_rows(v[0]).unwrap();
            let w = g.constant(Tensor::uniform(&[3, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4)));
            let z = g.mul(y, w).unwrap();
            g.sum(z)
        }, 1e-6);

        check_grads(&[a.clone()], |g, v| {
            let y = g.softmax_rows_masked(v[0], 3).unwrap();
            let w = g.constant(Tensor::uniform(&[3, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(5)));
            let z = g.mul(y, w).unwrap();
            g.sum(z)
        }, 1e-6);

        let gain = rand_t(&mut rng, &[4]);
        let lb = rand_t(&mut rng, &[4]);
        check_grads(&[a.clone(), gain, lb], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            let w = g.constant(Tensor::uniform(&[3, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(6)));
            let z = g.mul(y, w).unwrap();
            g.sum(z)
        }, 1e-6);

        let d = rand_t(&mut rng, &[2, 4]);
        check_grads(&[a.clone(), d], |g, v| {
            let top = g.slice_rows(v[0], 1, 2).unwrap();
            let cat = g.concat_cols(&[top, v[1]]).unwrap();
            let rows = g.concat_rows(&[cat, cat]).unwrap();
            let y = g.mul(rows, rows).unwrap();
            let y = g.scale(y, 0.5);
            g.logsumexp(y).unwrap()
        }, 1e-6);

        check_grads(&[a.clone()], |g, v| {
            let rows = g.gather_rows(v[0], &[2, 0, 2]).unwrap();
            let y = g.mul_const(rows, (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
            let y = g.mul(y, rows).unwrap();
            g.sum(y)
        }, 1e-6);

        check_grads(&[a], |g, v| g.softmax_cross_entropy(v[0], &[1, 3, 0]).unwrap(), 1e-6);
    }

    #[test]
    fn random_composed_graphs_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let x = rand_t(&mut rng, &[3, 4]);
            let w = rand_t(&mut rng, &[4, 4]);
            let gain = rand_t(&mut rng, &[4]);
            let bias = rand_t(&mut rng, &[4]);
            let pick = rng.gen_range(0..3);
            check_grads(&[x, w, gain, bias], |g, v| {
                let h = g.matmul(v[0], v[1]).unwrap();
                let h = match pick {
                    0 => g.relu(h),
                    1 => g.softmax_rows(h).unwrap(),
                    _ => g.scale(h, 1.7),
                };
                let h = g.layer_norm(h, v[2], v[3], 1e-5).unwrap();
                let s = g.matmul_bt(h, v[0]).unwrap();
                let s = g.add(s, s).unwrap();
                g.logsumexp(s).unwrap()
            }, 1e-6);
        }
    }

    #[test]
    fn sparse_param_gradients_only_touch_gathered_rows() {
        let mut store = ParamStore::new();
        let id = store
            .add("table", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap(), true)
            .unwrap();
        let mut g = Graph::new();
        let t = g.param(&store, id);
        let rows = g.gather_rows(t, &[2, 2, 0]).unwrap();
        let s = g.sum(rows);
        g.backward(s).unwrap();
        let mut grads = Gradients::zeros_like(&store);
        g.accumulate_param_grads(&mut grads, 0.5);
        assert_eq!(grads.get(id).data(), &[0.5, 0.5, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn inference_graph_records_no_gradients() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, 2.0]), false).unwrap();
        let mut g = Graph::inference();
        let w = g.param(&store, id);
        assert!(!g.requires_grad(w));
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert!(g.grad(w).is_none());
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![f64::NAN]));
        let s = g.sum(x);
        assert!(matches!(g.backward(s), Err(NumericError::NonFinite(_))));
    }
}
