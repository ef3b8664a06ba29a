//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied during a forward pass.
//! [`Tape::backward`] replays the adjoints in reverse order and accumulates
//! gradients into the [`ParamStore`] the parameters were read from.
//!
//! The primitive set is deliberately small: matrix products (plain and with
//! the right operand transposed), elementwise add/mul, row-broadcast add,
//! scaling, ReLU, row softmax, layer normalization, embedding lookup,
//! cross-entropy with logits, and row/column concatenation and slicing.

use std::collections::HashMap;

use rand::Rng;

use crate::tensor::{gemm, layer_norm_forward, softmax_in_place, Result, Tensor, TensorError};

pub use crate::tensor::LAYER_NORM_EPS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learned tensor together with its gradient buffer.
#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    value: Tensor,
    grad: Tensor,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }
}

/// Owns every [`Parameter`] of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::Invalid(format!(
                "parameter {name:?} registered twice"
            )));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_value",
                left: p.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor, &mut Tensor) {
        let p = &mut self.params[id.0];
        (&mut p.value, &mut p.grad)
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Multiplies every gradient by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g *= factor;
            }
        }
    }

    /// L2 norm over all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.sum_squares())
            .sum::<f64>()
            .sqrt()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        smoothing: f64,
        count: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// The computation record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Reads a parameter onto the tape. Repeated reads share one leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a `[n]` or `[1, n]` vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_row(self.value(bias))?;
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).softmax_rows()?;
        Ok(self.push(out, Op::SoftmaxRows(x)))
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// gain `gamma` and shift `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (out, xhat, rstd) = layer_norm_forward(self.value(x), self.value(gamma), self.value(beta))?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Gathers rows of `table` (vocabulary × width).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = t.dims2("embedding")?;
        if ids.is_empty() {
            return Err(TensorError::Invalid("embedding: empty id list".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean cross-entropy of `logits` (positions × classes) against the
    /// targets; `None` targets are ignored. With `smoothing > 0` the target
    /// distribution mixes in a uniform component of that weight.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        smoothing: f64,
    ) -> Result<Var> {
        let t = self.value(logits);
        let (r, c) = t.dims2("cross_entropy")?;
        if targets.len() != r {
            return Err(TensorError::Invalid(format!(
                "cross_entropy: {} targets for {r} rows",
                targets.len()
            )));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(TensorError::Invalid(format!(
                "cross_entropy: smoothing {smoothing} outside [0, 1)"
            )));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(TensorError::Invalid(
                "cross_entropy: every target position is padding".into(),
            ));
        }
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0;
        for (i, target) in targets.iter().enumerate() {
            let Some(target) = *target else { continue };
            if target >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: target,
                    bound: c,
                });
            }
            let row = t.row(i);
            let logp = crate::tensor::log_softmax(row);
            let mut loss = -(1.0 - smoothing) * logp[target];
            if smoothing > 0.0 {
                loss -= smoothing / c as f64 * logp.iter().sum::<f64>();
            }
            total += loss;
            let p = &mut probs[i * c..(i + 1) * c];
            p.copy_from_slice(row);
            softmax_in_place(p);
        }
        let out = Tensor::scalar(total / count as f64);
        if !out.all_finite() {
            return Err(TensorError::NonFinite { op: "cross_entropy" });
        }
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                smoothing,
                count,
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_cols: no inputs".into()))?;
        let (r, _) = self.value(*first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2("concat_cols")?;
            if pr != r {
                return Err(mismatch("concat_cols", self.value(*first), self.value(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![r, total], out)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: c,
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![r, len], out)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_rows: no inputs".into()))?;
        let (_, c) = self.value(*first).dims2("concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.value(p).dims2("concat_rows")?;
            if pc != c {
                return Err(mismatch("concat_rows", self.value(*first), self.value(p)));
            }
            rows += pr;
            out.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, c], out)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2("slice_rows")?;
        if len == 0 || start + len > r {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                bound: r,
            });
        }
        let out = Tensor::new(vec![len, c], t.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// Inverted dropout: zeroes entries with probability `p` and rescales the
    /// survivors by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = self.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = self.constant(Tensor::new(shape, mask)?);
        self.mul(x, mask)
    }

    /// Accumulates `∂loss/∂θ` into every parameter read onto this tape.
    /// All gradients in `store` are zeroed first.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::Invalid(format!(
                "backward: loss must be a scalar, got shape {:?}",
                lt.shape()
            )));
        }
        store.zero_grads();
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let grad = store.grad_mut(*id);
                    for (a, b) in grad.data_mut().iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = (ta.rows(), ta.cols());
                    let n = tb.cols();
                    let da = slot(&mut adj, *a, m * k);
                    gemm(m, n, k, &g, false, tb.data(), true, da, true);
                    let db = slot(&mut adj, *b, k * n);
                    gemm(k, m, n, ta.data(), true, &g, false, db, true);
                }
                Op::MatMulT(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = (ta.rows(), ta.cols());
                    let n = tb.rows();
                    let da = slot(&mut adj, *a, m * k);
                    gemm(m, n, k, &g, false, tb.data(), false, da, true);
                    let db = slot(&mut adj, *b, n * k);
                    gemm(n, m, k, &g, true, ta.data(), false, db, true);
                }
                Op::Add(a, b) => {
                    add_into(slot(&mut adj, *a, g.len()), &g);
                    add_into(slot(&mut adj, *b, g.len()), &g);
                }
                Op::AddRow(x, bias) => {
                    add_into(slot(&mut adj, *x, g.len()), &g);
                    let c = out.cols();
                    let db = slot(&mut adj, *bias, c);
                    for row in g.chunks(c) {
                        add_into(db, row);
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let da = slot(&mut adj, *a, g.len());
                    for ((d, gi), y) in da.iter_mut().zip(&g).zip(tb.data()) {
                        *d += gi * y;
                    }
                    let db = slot(&mut adj, *b, g.len());
                    for ((d, gi), x) in db.iter_mut().zip(&g).zip(ta.data()) {
                        *d += gi * x;
                    }
                }
                Op::Scale(x, s) => {
                    let dx = slot(&mut adj, *x, g.len());
                    for (d, gi) in dx.iter_mut().zip(&g) {
                        *d += gi * s;
                    }
                }
                Op::Relu(x) => {
                    let tx = self.value(*x);
                    let dx = slot(&mut adj, *x, g.len());
                    for ((d, gi), v) in dx.iter_mut().zip(&g).zip(tx.data()) {
                        if *v > 0.0 {
                            *d += gi;
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    let c = out.cols();
                    let dx = slot(&mut adj, *x, g.len());
                    for ((drow, grow), yrow) in dx
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(out.data().chunks(c))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gi), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gi - dot);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let c = out.cols();
                    let tg = self.value(*gamma).data().to_vec();
                    {
                        let dgamma = slot(&mut adj, *gamma, c);
                        for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                dgamma[j] += grow[j] * hrow[j];
                            }
                        }
                    }
                    {
                        let dbeta = slot(&mut adj, *beta, c);
                        for grow in g.chunks(c) {
                            add_into(dbeta, grow);
                        }
                    }
                    let dx = slot(&mut adj, *x, g.len());
                    let mut dh = vec![0.0; c];
                    for (i, ((drow, grow), hrow)) in dx
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(xhat.chunks(c))
                        .enumerate()
                    {
                        for j in 0..c {
                            dh[j] = grow[j] * tg[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h =
                            dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            drow[j] += rstd[i] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    let tt = self.value(*table);
                    let d = tt.cols();
                    let dt = slot(&mut adj, *table, tt.len());
                    for (k, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[k * d..(k + 1) * d]);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    smoothing,
                    count,
                } => {
                    let c = self.value(*logits).cols();
                    let upstream = g[0] / *count as f64;
                    let uniform = smoothing / c as f64;
                    let dl = slot(&mut adj, *logits, probs.len());
                    for (i, target) in targets.iter().enumerate() {
                        let Some(target) = *target else { continue };
                        let drow = &mut dl[i * c..(i + 1) * c];
                        let prow = &probs[i * c..(i + 1) * c];
                        for j in 0..c {
                            let mut q = uniform;
                            if j == target {
                                q += 1.0 - smoothing;
                            }
                            drow[j] += upstream * (prow[j] - q);
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = out.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let (r, w) = (self.value(p).rows(), self.value(p).cols());
                        let dp = slot(&mut adj, p, r * w);
                        for i in 0..r {
                            add_into(
                                &mut dp[i * w..(i + 1) * w],
                                &g[i * total + offset..i * total + offset + w],
                            );
                        }
                        offset += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (r, w) = (out.rows(), out.cols());
                    let c = self.value(*x).cols();
                    let dx = slot(&mut adj, *x, r * c);
                    for i in 0..r {
                        add_into(
                            &mut dx[i * c + start..i * c + start + w],
                            &g[i * w..(i + 1) * w],
                        );
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        add_into(slot(&mut adj, p, n), &g[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::SliceRows { x, start } => {
                    let c = out.cols();
                    let n = self.value(*x).len();
                    let dx = slot(&mut adj, *x, n);
                    add_into(&mut dx[start * c..start * c + g.len()], &g);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    let dx = slot(&mut adj, *x, n);
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Compares the analytic gradient of `f` with respect to one parameter
/// against central finite differences and returns the largest relative
/// error `|a − n| / max(|a|, |n|, 1e-12)` over its entries.
///
/// `f` must build a scalar loss from the store's current values and be
/// deterministic; two forward passes that disagree are rejected.
pub fn check_gradients<F>(f: F, store: &mut ParamStore, param: ParamId, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(TensorError::Invalid(format!(
            "check_gradients: step must be positive and finite, got {step}"
        )));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        let v = tape.value(loss);
        if !v.is_scalar() {
            return Err(TensorError::Invalid("check_gradients: loss is not a scalar".into()));
        }
        Ok(v.data()[0])
    };

    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let first = tape.value(loss).data().first().copied().unwrap_or(f64::NAN);
    let second = eval(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::Invalid(format!(
            "check_gradients: function is not deterministic ({first} vs {second})"
        )));
    }
    tape.backward(loss, store)?;
    let analytic = store.grad(param).clone();

    let mut worst: f64 = 0.0;
    for j in 0..analytic.len() {
        let original = store.value(param).data()[j];
        store.value_and_grad_mut(param).0.data_mut()[j] = original + step;
        let plus = eval(store)?;
        store.value_and_grad_mut(param).0.data_mut()[j] = original - step;
        let minus = eval(store)?;
        store.value_and_grad_mut(param).0.data_mut()[j] = original;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[j];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(name: &str, t: Tensor) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add(name, t).unwrap();
        (s, id)
    }

    #[test]
    fn sum_gradient_is_ones() {
        let (mut store, p) = store_with("p", Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap());
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        let loss = tape.sum(v);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(p).data(), &[1.0; 4]);
    }

    #[test]
    fn half_square_norm_gradient_is_value() {
        let value = Tensor::from_rows(&[vec![1.0, -2.0, 0.25]]).unwrap();
        let (mut store, p) = store_with("p", value.clone());
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(p), &value);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let (mut store, p) = store_with("p", Tensor::zeros(&[2, 2]));
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        assert!(tape.backward(v, &mut store).is_err());
    }

    #[test]
    fn gradients_are_zeroed_between_passes() {
        let (mut store, p) = store_with("p", Tensor::full(&[1, 3], 2.0));
        for _ in 0..3 {
            let mut tape = Tape::new();
            let v = tape.param(&store, p);
            let loss = tape.sum(v);
            tape.backward(loss, &mut store).unwrap();
        }
        assert_eq!(store.grad(p).data(), &[1.0; 3]);
    }

    #[test]
    fn duplicate_parameter_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[1])).unwrap();
        assert!(s.add("w", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn check_gradients_linear_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut store, p) = store_with("p", Tensor::uniform(&[3, 4], 1.0, &mut rng));
        let c = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let err = check_gradients(
            |tape, store| {
                let v = tape.param(store, p);
                let k = tape.constant(c.clone());
                let m = tape.mul(v, k)?;
                Ok(tape.sum(m))
            },
            &mut store,
            p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn check_gradients_softmax_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut store, p) = store_with("p", Tensor::uniform(&[4, 3], 1.0, &mut rng));
        let x = Tensor::uniform(&[5, 4], 1.0, &mut rng);
        let w = Tensor::uniform(&[5, 3], 1.0, &mut rng);
        let err = check_gradients(
            |tape, store| {
                let xv = tape.constant(x.clone());
                let pv = tape.param(store, p);
                let h = tape.matmul(xv, pv)?;
                let s = tape.softmax_rows(h)?;
                let wv = tape.constant(w.clone());
                let m = tape.mul(s, wv)?;
                Ok(tape.sum(m))
            },
            &mut store,
            p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn check_gradients_rejects_bad_step() {
        let (mut store, p) = store_with("p", Tensor::zeros(&[1]));
        let r = check_gradients(
            |tape, store| {
                let v = tape.param(store, p);
                Ok(tape.sum(v))
            },
            &mut store,
            p,
            0.0,
        );
        assert!(matches!(r, Err(TensorError::Invalid(_))));
    }

    #[test]
    fn check_gradients_rejects_nondeterministic_functions() {
        use std::cell::Cell;
        let (mut store, p) = store_with("p", Tensor::zeros(&[1]));
        let calls = Cell::new(0.0);
        let r = check_gradients(
            |tape, store| {
                calls.set(calls.get() + 1.0);
                let v = tape.param(store, p);
                let k = tape.constant(Tensor::scalar(calls.get()));
                let m = tape.add(v, k)?;
                Ok(tape.sum(m))
            },
            &mut store,
            p,
            1e-5,
        );
        assert!(r.unwrap_err().to_string().contains("deterministic"));
    }

    #[test]
    fn cross_entropy_rejects_all_padding() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.cross_entropy(l, &[None, None], 0.0).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.matmul(a, a).is_err());
        assert!(tape.matmul_t(a, b).is_err());
    }
}
