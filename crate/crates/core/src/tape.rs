//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is created per forward pass. Every operation appends a node
//! holding its value and the ids of its operands, so node order is always a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//! Parameters are read in place from the borrowed [`ParameterStore`] and their
//! gradients are returned to the caller, who writes them back into the store.
//!
//! All values are matrices; a vector is a `1 x n` row and a batch of vectors
//! stacks one row per example.

use crate::params::{ParamId, ParameterStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    RowDots(Var, Vec<Var>),
    WeightedSum(Var, Vec<Var>),
    MeanSquared(Var, Var),
    CrossEntropy(Var, Vec<usize>, Vec<f64>),
    Gather(Var, Vec<usize>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Tensor>,
    needs_grad: bool,
}

pub struct Tape<'s> {
    store: &'s ParameterStore,
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
    grad_enabled: bool,
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a node, if it was reached.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].as_deref()
    }

    /// Per-parameter gradients indexed by [`ParamId`]; unreachable parameters are `None`.
    pub fn params(&self) -> &[Option<Vec<f64>>] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn into_params(self) -> Vec<Option<Vec<f64>>> {
        self.params
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

/// `c = beta * c + op(a) @ op(b)` where `a` is `m x k` and `b` is `k x n` after transposition.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
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

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

fn log_softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + src.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = s - lse;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Self { store, nodes: Vec::with_capacity(1024), bound: vec![None; store.len()], grad_enabled: true }
    }

    /// A tape that records values only; `backward` on it yields no parameter gradients.
    pub fn inference(store: &'s ParameterStore) -> Self {
        Self { grad_enabled: false, ..Self::new(store) }
    }

    pub fn store(&self) -> &'s ParameterStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        dims(self.value(v))
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        debug_assert!(value.data().iter().all(|x| !x.is_nan()), "NaN produced by {op:?}");
        self.nodes.push(Node { op, value: Some(value), needs_grad: needs_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Input that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Input whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        self.nodes.push(Node { op: Op::Param(id), value: None, needs_grad: self.grad_enabled });
        let v = Var(self.nodes.len() - 1);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "contract violation: matmul inner dims differ, lhs {m}x{k}, rhs {k2}x{n}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let g = self.any_grad(&[a, b]);
        self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out), g)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "contract violation: {what} requires equal shapes, got {sa:?} and {sb:?}");
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let g = self.any_grad(&[a, b]);
        self.push(op, Tensor::matrix(r, c, out), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "elementwise_mul");
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.shape(a);
        let (rr, rn) = self.shape(row);
        assert!(rr == 1 && rn == n, "contract violation: add_row needs a 1x{n} row for {m}x{n}, got {rr}x{rn}");
        let mut out = self.value(a).data().to_vec();
        let bias = self.value(row).data();
        for chunk in out.chunks_mut(n) {
            add_into(chunk, bias);
        }
        let g = self.any_grad(&[a, row]);
        self.push(Op::AddRow(a, row), Tensor::matrix(m, n, out), g)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).data().iter().map(|x| x * s).collect();
        let g = self.any_grad(&[a]);
        self.push(Op::Scale(a, s), Tensor::matrix(r, c, out), g)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).data().iter().map(|&x| f(x)).collect();
        let g = self.any_grad(&[a]);
        self.push(op, Tensor::matrix(r, c, out), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = vec![0.0; r * c];
        for (src, dst) in self.value(a).data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_row(src, dst);
        }
        let g = self.any_grad(&[a]);
        self.push(Op::Softmax(a), Tensor::matrix(r, c, out), g)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = vec![0.0; r * c];
        for (src, dst) in self.value(a).data().chunks(c).zip(out.chunks_mut(c)) {
            log_softmax_row(src, dst);
        }
        let g = self.any_grad(&[a]);
        self.push(Op::LogSoftmax(a), Tensor::matrix(r, c, out), g)
    }

    /// Column-wise concatenation of equal-height matrices.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "contract violation: concat of nothing");
        let rows = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.shape(p);
                assert_eq!(r, rows, "contract violation: concat row counts differ ({r} vs {rows})");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let g = self.any_grad(parts);
        self.push(Op::Concat(parts.to_vec()), Tensor::matrix(rows, total, out), g)
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(len > 0 && start + len <= c, "contract violation: slice {start}..{} of width {c}", start + len);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(r * len);
        for row in src.chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let g = self.any_grad(&[a]);
        self.push(Op::Slice(a, start), Tensor::matrix(r, len, out), g)
    }

    /// Per-row dot products of `query` against each key: `out[r][i] = query[r] . keys[i][r]`.
    pub fn row_dots(&mut self, query: Var, keys: &[Var]) -> Var {
        assert!(!keys.is_empty(), "contract violation: row_dots needs at least one key");
        let (m, k) = self.shape(query);
        for &key in keys {
            let s = self.shape(key);
            assert_eq!(s, (m, k), "contract violation: key shape {s:?} does not match query {m}x{k}");
        }
        let n = keys.len();
        let mut out = vec![0.0; m * n];
        let q = self.value(query).data();
        for (i, &key) in keys.iter().enumerate() {
            let kd = self.value(key).data();
            for r in 0..m {
                out[r * n + i] = q[r * k..(r + 1) * k].iter().zip(&kd[r * k..(r + 1) * k]).map(|(a, b)| a * b).sum();
            }
        }
        let mut all = keys.to_vec();
        all.push(query);
        let g = self.any_grad(&all);
        self.push(Op::RowDots(query, keys.to_vec()), Tensor::matrix(m, n, out), g)
    }

    /// Convex-combination style sum: `out[r] = sum_i weights[r][i] * values[i][r]`.
    pub fn weighted_sum(&mut self, weights: Var, values: &[Var]) -> Var {
        let (m, n) = self.shape(weights);
        assert_eq!(n, values.len(), "contract violation: {n} weights for {} values", values.len());
        assert!(n > 0, "contract violation: weighted_sum over no values");
        let (vm, k) = self.shape(values[0]);
        assert_eq!(vm, m, "contract violation: values have {vm} rows, weights {m}");
        let mut out = vec![0.0; m * k];
        let w = self.value(weights).data();
        for (i, &v) in values.iter().enumerate() {
            let vd = self.value(v).data();
            assert_eq!(vd.len(), m * k, "contract violation: value {i} has shape {:?}", self.shape(v));
            for r in 0..m {
                let wi = w[r * n + i];
                for (o, x) in out[r * k..(r + 1) * k].iter_mut().zip(&vd[r * k..(r + 1) * k]) {
                    *o += wi * x;
                }
            }
        }
        let mut all = values.to_vec();
        all.push(weights);
        let g = self.any_grad(&all);
        self.push(Op::WeightedSum(weights, values.to_vec()), Tensor::matrix(m, k, out), g)
    }

    /// Mean of squared differences over every element, as a `1 x 1` value.
    pub fn mean_squared(&mut self, pred: Var, target: Var) -> Var {
        self.same_shape(pred, target, "mean_squared");
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let v = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let g = self.any_grad(&[pred, target]);
        self.push(Op::MeanSquared(pred, target), Tensor::scalar(v), g)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (m, n) = self.shape(logits);
        assert_eq!(m, targets.len(), "contract violation: {m} logit rows for {} targets", targets.len());
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for (r, (src, dst)) in self.value(logits).data().chunks(n).zip(probs.chunks_mut(n)).enumerate() {
            let t = targets[r];
            assert!(t < n, "contract violation: target {t} outside {n} classes");
            let mut lp = vec![0.0; n];
            log_softmax_row(src, &mut lp);
            loss -= lp[t];
            for (d, l) in dst.iter_mut().zip(&lp) {
                *d = l.exp();
            }
        }
        let g = self.any_grad(&[logits]);
        self.push(Op::CrossEntropy(logits, targets.to_vec(), probs), Tensor::scalar(loss / m as f64), g)
    }

    /// Selects rows of `table` by index.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let (v, e) = self.shape(table);
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            assert!(id < v, "contract violation: row {id} outside table of {v} rows");
            out.extend_from_slice(&src[id * e..(id + 1) * e]);
        }
        let g = self.any_grad(&[table]);
        self.push(Op::Gather(table, ids.to_vec()), Tensor::matrix(ids.len(), e, out), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).data().iter().sum();
        let g = self.any_grad(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(v), g)
    }

    /// Reverse sweep from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Gradients {
        let (r, c) = self.shape(loss);
        assert!(r == 1 && c == 1, "contract violation: backward needs a scalar loss, got {r}x{c}");
        assert!(!self.nodes.is_empty(), "contract violation: backward on an empty tape");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params = vec![None; self.store.len()];
        for (i, bound) in self.bound.iter().enumerate() {
            if let Some(v) = bound {
                params[i] = grads[v.0].clone();
            }
        }
        Gradients { nodes: grads, params }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let len = self.value(v).len();
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.nodes[idx].value.as_ref();
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.shape(a);
                let n = self.shape(b).1;
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, |ga| gemm(m, n, k, g, false, bv, true, ga, 1.0));
                self.accumulate(grads, b, |gb| gemm(k, m, n, av, true, g, false, gb, 1.0));
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, |ga| add_into(ga, g));
                self.accumulate(grads, b, |gb| add_into(gb, g));
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, |ga| add_into(ga, g));
                self.accumulate(grads, b, |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            &Op::AddRow(a, row) => {
                self.accumulate(grads, a, |ga| add_into(ga, g));
                let n = self.shape(row).1;
                self.accumulate(grads, row, |gr| {
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, |ga| {
                    for ((d, gi), y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for ((d, gi), x) in gb.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                });
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, |ga| {
                for (d, gi) in ga.iter_mut().zip(g) {
                    *d += gi * s;
                }
            }),
            &Op::Tanh(a) => {
                let y = out.unwrap().data();
                self.accumulate(grads, a, |ga| {
                    for ((d, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                });
            }
            &Op::Sigmoid(a) => {
                let y = out.unwrap().data();
                self.accumulate(grads, a, |ga| {
                    for ((d, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                });
            }
            &Op::Softmax(a) => {
                let y = out.unwrap();
                let c = y.cols();
                self.accumulate(grads, a, |ga| {
                    for ((dr, gr), yr) in ga.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yi * (gi - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmax(a) => {
                let y = out.unwrap();
                let c = y.cols();
                self.accumulate(grads, a, |ga| {
                    for ((dr, gr), yr) in ga.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                        let total: f64 = gr.iter().sum();
                        for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += gi - yi.exp() * total;
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let total = out.unwrap().cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    self.accumulate(grads, p, |gp| {
                        for (dr, gr) in gp.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(dr, &gr[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            &Op::Slice(a, start) => {
                let w = out.unwrap().cols();
                let c = self.shape(a).1;
                self.accumulate(grads, a, |ga| {
                    for (dr, gr) in ga.chunks_mut(c).zip(g.chunks(w)) {
                        add_into(&mut dr[start..start + w], gr);
                    }
                });
            }
            Op::RowDots(query, keys) => {
                let (m, k) = self.shape(*query);
                let n = keys.len();
                let q = self.value(*query).data();
                self.accumulate(grads, *query, |gq| {
                    for (i, &key) in keys.iter().enumerate() {
                        let kd = self.value(key).data();
                        for r in 0..m {
                            let gi = g[r * n + i];
                            for (d, x) in gq[r * k..(r + 1) * k].iter_mut().zip(&kd[r * k..(r + 1) * k]) {
                                *d += gi * x;
                            }
                        }
                    }
                });
                for (i, &key) in keys.iter().enumerate() {
                    self.accumulate(grads, key, |gk| {
                        for r in 0..m {
                            let gi = g[r * n + i];
                            for (d, x) in gk[r * k..(r + 1) * k].iter_mut().zip(&q[r * k..(r + 1) * k]) {
                                *d += gi * x;
                            }
                        }
                    });
                }
            }
            Op::WeightedSum(weights, values) => {
                let (m, n) = self.shape(*weights);
                let k = out.unwrap().cols();
                let w = self.value(*weights).data();
                self.accumulate(grads, *weights, |gw| {
                    for (i, &v) in values.iter().enumerate() {
                        let vd = self.value(v).data();
                        for r in 0..m {
                            gw[r * n + i] +=
                                g[r * k..(r + 1) * k].iter().zip(&vd[r * k..(r + 1) * k]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
                for (i, &v) in values.iter().enumerate() {
                    self.accumulate(grads, v, |gv| {
                        for r in 0..m {
                            let wi = w[r * n + i];
                            for (d, gi) in gv[r * k..(r + 1) * k].iter_mut().zip(&g[r * k..(r + 1) * k]) {
                                *d += wi * gi;
                            }
                        }
                    });
                }
            }
            &Op::MeanSquared(pred, target) => {
                let p = self.value(pred).data();
                let t = self.value(target).data();
                let s = 2.0 * g[0] / p.len() as f64;
                self.accumulate(grads, pred, |gp| {
                    for ((d, a), b) in gp.iter_mut().zip(p).zip(t) {
                        *d += s * (a - b);
                    }
                });
                self.accumulate(grads, target, |gt| {
                    for ((d, a), b) in gt.iter_mut().zip(p).zip(t) {
                        *d -= s * (a - b);
                    }
                });
            }
            Op::CrossEntropy(logits, targets, probs) => {
                let (m, n) = self.shape(*logits);
                let s = g[0] / m as f64;
                self.accumulate(grads, *logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..n {
                            gl[r * n + j] += s * probs[r * n + j];
                        }
                        gl[r * n + t] -= s;
                    }
                });
            }
            Op::Gather(table, ids) => {
                let e = self.shape(*table).1;
                self.accumulate(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * e..(id + 1) * e], &g[r * e..(r + 1) * e]);
                    }
                });
            }
            &Op::Sum(a) => self.accumulate(grads, a, |ga| ga.iter_mut().for_each(|d| *d += g[0])),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParameterStore {
        ParameterStore::new()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let s = store();
        let mut t = Tape::new(&s);
        let x = t.constant(Tensor::row(vec![0.0, 0.0]));
        let y = t.softmax(x);
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul() {
        let s = store();
        let mut t = Tape::new(&s);
        let eye = t.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let v = t.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]));
        let y = t.matmul(eye, v);
        assert_eq!(t.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn weighted_sum_convex_combination() {
        let s = store();
        let mut t = Tape::new(&s);
        let w = t.constant(Tensor::row(vec![0.2689, 0.7311]));
        let a = t.constant(Tensor::row(vec![1.0]));
        let b = t.constant(Tensor::row(vec![2.0]));
        let y = t.weighted_sum(w, &[a, b]);
        assert!((t.value(y).item() - 1.7311).abs() < 1e-4);
    }

    #[test]
    fn square_derivative() {
        let s = store();
        let mut t = Tape::new(&s);
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(x, x);
        let g = t.backward(y);
        assert_eq!(g.get(x), Some(&[6.0][..]));
    }

    #[test]
    fn tanh_derivative_at_zero() {
        let s = store();
        let mut t = Tape::new(&s);
        let x = t.leaf(Tensor::scalar(0.0));
        let y = t.tanh(x);
        let g = t.backward(y);
        assert_eq!(g.get(x), Some(&[1.0][..]));
    }

    #[test]
    fn unreachable_params_get_no_gradient() {
        let mut s = store();
        let used = s.register("used", Tensor::scalar(2.0));
        let unused = s.register("unused", Tensor::scalar(5.0));
        let mut t = Tape::new(&s);
        let u = t.param(used);
        let _ = t.param(unused);
        let y = t.mul(u, u);
        let g = t.backward(y);
        assert_eq!(g.param(used), Some(&[4.0][..]));
        assert_eq!(g.param(unused), None);
        s.accumulate_grads(g.params());
        assert_eq!(s.get(unused).grad(), Some(&[0.0][..]));
    }

    #[test]
    fn param_binding_is_cached() {
        let mut s = store();
        let id = s.register("w", Tensor::scalar(1.0));
        let mut t = Tape::new(&s);
        assert_eq!(t.param(id), t.param(id));
    }

    #[test]
    #[should_panic(expected = "matmul inner dims differ")]
    fn matmul_shape_mismatch() {
        let s = store();
        let mut t = Tape::new(&s);
        let a = t.constant(Tensor::matrix(2, 3, vec![0.0; 6]));
        let b = t.constant(Tensor::matrix(2, 3, vec![0.0; 6]));
        t.matmul(a, b);
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn non_scalar_loss_rejected() {
        let s = store();
        let mut t = Tape::new(&s);
        let a = t.leaf(Tensor::row(vec![1.0, 2.0]));
        t.backward(a);
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let mut s = store();
        let id = s.register("w", Tensor::scalar(3.0));
        let mut t = Tape::inference(&s);
        let w = t.param(id);
        let y = t.mul(w, w);
        assert_eq!(t.value(y).item(), 9.0);
        let g = t.backward(y);
        assert_eq!(g.param(id), None);
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let s = store();
        let mut t = Tape::new(&s);
        let x = t.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 3.0, -1.0]));
        let p = t.softmax(x);
        let lp = t.log_softmax(x);
        for (a, b) in t.value(p).data().iter().zip(t.value(lp).data()) {
            assert!((a.ln() - b).abs() < 1e-14);
        }
    }
}
