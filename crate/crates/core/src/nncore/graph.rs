//! Reverse-mode differentiation over a recorded tape of matrix operations.
//!
//! Every node holds a row-major `rows x cols` value. Operations append nodes;
//! [`Graph::backward`] walks the tape in reverse and returns the gradients of
//! all leaves. Leaves are either named parameters (gradients keyed by name),
//! selected rows of an external table (gradients keyed by row index), or
//! constants (no gradient).
//!
//! A [`Graph::stop`] node passes its value through unchanged and blocks the
//! gradient: leaves reachable only through a stop receive exactly `0.0`.

use std::borrow::Cow;
use std::collections::BTreeMap;

use super::tensor::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Param(String),
    Rows(Vec<usize>),
    Input,
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddRow { x: NodeId, row: NodeId },
    Scale { x: NodeId, c: T },
    Mul { a: NodeId, b: NodeId },
    Sum { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { x: NodeId },
    Attention { qkv: NodeId, heads: usize, seq_len: usize, probs: Vec<T> },
    Gather { sources: Vec<NodeId>, picks: Vec<(usize, usize)> },
    Stop,
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<'a, T: Clone> {
    op: Op<T>,
    value: Cow<'a, [T]>,
    rows: usize,
    cols: usize,
}

/// Gradients of one backward pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients<T> {
    params: BTreeMap<String, Vec<T>>,
    rows: BTreeMap<usize, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, name: &str) -> Option<&[T]> {
        self.params.get(name).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Gradient of one row of the external row table, if a leaf covered it.
    pub fn row(&self, index: usize) -> Option<&[T]> {
        self.rows.get(&index).map(Vec::as_slice)
    }

    pub fn rows(&self) -> impl Iterator<Item = (usize, &[T])> {
        self.rows.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Sum another pass into this one.
    pub fn accumulate(&mut self, other: Gradients<T>) {
        for (k, v) in other.params {
            add_into_map(&mut self.params, k, v);
        }
        for (k, v) in other.rows {
            add_into_map(&mut self.rows, k, v);
        }
    }
}

fn add_into_map<K: Ord, T: Scalar>(map: &mut BTreeMap<K, Vec<T>>, key: K, v: Vec<T>) {
    match map.get_mut(&key) {
        Some(acc) => acc.iter_mut().zip(v).for_each(|(a, b)| *a = *a + b),
        None => {
            map.insert(key, v);
        }
    }
}

/// Recorded computation. Borrow parameters for the lifetime `'a`.
pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Scalar> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d = *d + *s);
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn row(&self, id: NodeId, r: usize) -> &[T] {
        let n = &self.nodes[id.0];
        &n.value[r * n.cols..(r + 1) * n.cols]
    }

    fn push(
        &mut self,
        op_name: &'static str,
        op: Op<T>,
        value: Cow<'a, [T]>,
        rows: usize,
        cols: usize,
    ) -> Result<NodeId> {
        debug_assert_eq!(value.len(), rows * cols);
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerics { op: op_name });
        }
        self.nodes.push(Node { op, value, rows, cols });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::State(format!("node {} is not part of this graph", id.0)))
        }
    }

    /// Leaf bound to a named parameter; its gradient is reported by name.
    pub fn param(&mut self, store: &'a ParamStore<T>, name: &str) -> Result<NodeId> {
        let t = store.get(name)?;
        let (rows, cols) = t.dims2();
        self.push("param", Op::Param(name.to_owned()), Cow::Borrowed(t.data()), rows, cols)
    }

    /// Leaf holding selected rows of `table`; its gradient is reported per
    /// row index. Repeated indices accumulate.
    pub fn rows(&mut self, table: &Tensor<T>, indices: &[usize]) -> Result<NodeId> {
        let (n, cols) = table.dims2();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= n {
                return Err(Error::Index(format!("row {i} out of range for {n} rows")));
            }
            data.extend_from_slice(table.row(i));
        }
        if indices.is_empty() {
            return Err(Error::shape("row leaf needs at least one row"));
        }
        self.push("rows", Op::Rows(indices.to_vec()), Cow::Owned(data), indices.len(), cols)
    }

    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<NodeId> {
        if data.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(Error::shape(format!(
                "input {rows}x{cols} given {} values",
                data.len()
            )));
        }
        self.push("input", Op::Input, Cow::Owned(data), rows, cols)
    }

    pub fn input_tensor(&mut self, t: &'a Tensor<T>) -> Result<NodeId> {
        let (rows, cols) = t.dims2();
        self.push("input", Op::Input, Cow::Borrowed(t.data()), rows, cols)
    }

    /// `y = x W + b` with `x: n x p`, `W: p x q`, `b: q`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        for id in [Some(x), Some(w), b].into_iter().flatten() {
            self.check(id)?;
        }
        let (n, p) = self.dims(x);
        let (wp, q) = self.dims(w);
        if p != wp {
            return Err(Error::shape(format!("linear: x is {n}x{p}, W is {wp}x{q}")));
        }
        let mut out = vec![T::zero(); n * q];
        let mut beta = T::zero();
        if let Some(b) = b {
            if self.dims(b) != (1, q) {
                return Err(Error::shape(format!(
                    "linear: bias is {:?}, expected 1x{q}",
                    self.dims(b)
                )));
            }
            let bias = self.value(b);
            out.chunks_mut(q).for_each(|r| r.copy_from_slice(bias));
            beta = T::one();
        }
        T::gemm(
            n,
            p,
            q,
            T::one(),
            self.value(x),
            p as isize,
            1,
            self.value(w),
            q as isize,
            1,
            beta,
            &mut out,
            q as isize,
            1,
        );
        self.push("linear", Op::Linear { x, w, b }, Cow::Owned(out), n, q)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (n, p) = self.dims(a);
        let (bp, q) = self.dims(b);
        if p != bp {
            return Err(Error::shape(format!("matmul: {n}x{p} times {bp}x{q}")));
        }
        let mut out = vec![T::zero(); n * q];
        T::gemm(
            n,
            p,
            q,
            T::one(),
            self.value(a),
            p as isize,
            1,
            self.value(b),
            q as isize,
            1,
            T::zero(),
            &mut out,
            q as isize,
            1,
        );
        self.push("matmul", Op::MatMul { a, b }, Cow::Owned(out), n, q)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        let (r, c) = self.dims(a);
        self.push("add", Op::Add { a, b }, Cow::Owned(out), r, c)
    }

    /// Adds a `1 x c` row to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(row)?;
        let (r, c) = self.dims(x);
        if self.dims(row) != (1, c) {
            return Err(Error::shape(format!(
                "add_row: row is {:?}, expected 1x{c}",
                self.dims(row)
            )));
        }
        let rv = self.value(row);
        let mut out = self.value(x).to_vec();
        out.chunks_mut(c).for_each(|o| add_assign(o, rv));
        self.push("add_row", Op::AddRow { x, row }, Cow::Owned(out), r, c)
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        self.check(x)?;
        let out = self.value(x).iter().map(|v| *v * c).collect();
        let (r, cols) = self.dims(x);
        self.push("scale", Op::Scale { x, c }, Cow::Owned(out), r, cols)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(format!(
                "mul: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        let (r, c) = self.dims(a);
        self.push("mul", Op::Mul { a, b }, Cow::Owned(out), r, c)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let s: T = self.value(x).iter().copied().sum();
        self.push("sum", Op::Sum { x }, Cow::Owned(vec![s]), 1, 1)
    }

    /// Row-wise normalization to zero mean and unit (biased) variance,
    /// then `* gamma + beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        if !(eps > T::zero()) {
            return Err(Error::config("layer_norm eps must be positive"));
        }
        let (r, c) = self.dims(x);
        if self.dims(gamma) != (1, c) || self.dims(beta) != (1, c) {
            return Err(Error::shape(format!("layer_norm: gamma/beta must be 1x{c}")));
        }
        let n = T::lit(c as f64);
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        self.push(
            "layer_norm",
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            Cow::Owned(out),
            r,
            c,
        )
    }

    /// `x * Phi(x)` with the exact Gaussian CDF.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let out = self.value(x).iter().map(|v| gelu_scalar(*v)).collect();
        let (r, c) = self.dims(x);
        self.push("gelu", Op::Gelu { x }, Cow::Owned(out), r, c)
    }

    /// Scaled dot-product self-attention on a packed `[Q | K | V]` input of
    /// width `3h`. Rows are grouped into independent sequences of `seq_len`;
    /// there is no mask inside a sequence. Output is `rows x h` with heads
    /// concatenated column-wise.
    pub fn attention(&mut self, qkv: NodeId, heads: usize, seq_len: usize) -> Result<NodeId> {
        self.check(qkv)?;
        let (rows, c3) = self.dims(qkv);
        if c3 % 3 != 0 {
            return Err(Error::shape(format!("attention: packed width {c3} not divisible by 3")));
        }
        let h = c3 / 3;
        if heads == 0 || h % heads != 0 {
            return Err(Error::config(format!("hidden size {h} not divisible by {heads} heads")));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::shape(format!("attention: {rows} rows not a multiple of {seq_len}")));
        }
        let dh = h / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let v = self.value(qkv);
        let nseq = rows / seq_len;
        let mut probs = vec![T::zero(); nseq * heads * seq_len * seq_len];
        let mut out = vec![T::zero(); rows * h];
        for s in 0..nseq {
            let base = s * seq_len;
            for hd in 0..heads {
                let qo = hd * dh;
                let ko = h + hd * dh;
                let vo = 2 * h + hd * dh;
                let p = &mut probs[(s * heads + hd) * seq_len * seq_len..][..seq_len * seq_len];
                for i in 0..seq_len {
                    let qi = &v[(base + i) * c3 + qo..][..dh];
                    let prow = &mut p[i * seq_len..(i + 1) * seq_len];
                    let mut max = T::neg_infinity();
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &v[(base + j) * c3 + ko..][..dh];
                        let d: T = qi.iter().zip(kj).map(|(a, b)| *a * *b).sum();
                        *pj = d * scale;
                        if *pj > max {
                            max = *pj;
                        }
                    }
                    let mut z = T::zero();
                    for pj in prow.iter_mut() {
                        *pj = (*pj - max).exp();
                        z = z + *pj;
                    }
                    for pj in prow.iter_mut() {
                        *pj = *pj / z;
                    }
                    let orow = &mut out[(base + i) * h + qo..][..dh];
                    for (j, pj) in prow.iter().enumerate() {
                        let vj = &v[(base + j) * c3 + vo..][..dh];
                        orow.iter_mut().zip(vj).for_each(|(o, x)| *o = *o + *pj * *x);
                    }
                }
            }
        }
        self.push(
            "attention",
            Op::Attention { qkv, heads, seq_len, probs },
            Cow::Owned(out),
            rows,
            h,
        )
    }

    /// Output row `r` is row `picks[r].1` of node `sources[picks[r].0]`.
    pub fn gather(&mut self, sources: &[NodeId], picks: &[(usize, usize)]) -> Result<NodeId> {
        if sources.is_empty() || picks.is_empty() {
            return Err(Error::shape("gather needs sources and picks"));
        }
        for &s in sources {
            self.check(s)?;
        }
        let cols = self.dims(sources[0]).1;
        if sources.iter().any(|&s| self.dims(s).1 != cols) {
            return Err(Error::shape("gather: sources differ in width"));
        }
        let mut out = Vec::with_capacity(picks.len() * cols);
        for &(si, r) in picks {
            let src = *sources
                .get(si)
                .ok_or_else(|| Error::Index(format!("gather source {si} out of range")))?;
            if r >= self.dims(src).0 {
                return Err(Error::Index(format!("gather row {r} out of range")));
            }
            out.extend_from_slice(self.row(src, r));
        }
        self.push(
            "gather",
            Op::Gather { sources: sources.to_vec(), picks: picks.to_vec() },
            Cow::Owned(out),
            picks.len(),
            cols,
        )
    }

    /// Identity on values, zero on gradients.
    pub fn stop(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let (r, c) = self.dims(x);
        let v = self.value(x).to_vec();
        self.push("stop", Op::Stop, Cow::Owned(v), r, c)
    }

    /// Mean softmax cross-entropy over the rows of `logits`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.check(logits)?;
        let (b, c) = self.dims(logits);
        if labels.len() != b {
            return Err(Error::shape(format!("{} labels for {b} logit rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} out of range for {c} classes")));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); b * c];
        let mut total = T::zero();
        for i in 0..b {
            let row = &lv[i * c..(i + 1) * c];
            let p = &mut probs[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            for j in 0..c {
                p[j] = (row[j] - lse).exp();
            }
            total = total + (lse - row[labels[i]]);
        }
        let loss = total / T::lit(b as f64);
        self.push(
            "cross_entropy",
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            Cow::Owned(vec![loss]),
            1,
            1,
        )
    }

    /// Propagate `d loss / d node` back to every leaf.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called on an empty graph".into()));
        }
        self.check(loss)?;
        if self.dims(loss) != (1, 1) {
            return Err(Error::shape(format!("loss must be scalar, got {:?}", self.dims(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::default();

        // Leaves created before the loss get an explicit zero entry so that
        // stopped or unused leaves report 0.0 rather than nothing.
        for node in &self.nodes[..=loss.0] {
            match &node.op {
                Op::Param(name) => {
                    out.params.entry(name.clone()).or_insert_with(|| vec![T::zero(); node.value.len()]);
                }
                Op::Rows(idx) => {
                    for &i in idx {
                        out.rows.entry(i).or_insert_with(|| vec![T::zero(); node.cols]);
                    }
                }
                _ => {}
            }
        }

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Param(name) => {
                    add_assign(out.params.get_mut(name).expect("registered above"), &g);
                }
                Op::Rows(idx) => {
                    for (k, &i) in idx.iter().enumerate() {
                        add_assign(
                            out.rows.get_mut(&i).expect("registered above"),
                            &g[k * node.cols..(k + 1) * node.cols],
                        );
                    }
                }
                Op::Input | Op::Stop => {}
                Op::Linear { x, w, b } => {
                    let (n, p) = self.dims(*x);
                    let q = node.cols;
                    let mut dx = vec![T::zero(); n * p];
                    // dx = g W^T
                    T::gemm(
                        n,
                        q,
                        p,
                        T::one(),
                        &g,
                        q as isize,
                        1,
                        self.value(*w),
                        1,
                        q as isize,
                        T::zero(),
                        &mut dx,
                        p as isize,
                        1,
                    );
                    // dW = x^T g
                    let mut dw = vec![T::zero(); p * q];
                    T::gemm(
                        p,
                        n,
                        q,
                        T::one(),
                        self.value(*x),
                        1,
                        p as isize,
                        &g,
                        q as isize,
                        1,
                        T::zero(),
                        &mut dw,
                        q as isize,
                        1,
                    );
                    if let Some(b) = b {
                        let mut db = vec![T::zero(); q];
                        g.chunks(q).for_each(|r| add_assign(&mut db, r));
                        accumulate(&mut grads, *b, db);
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::MatMul { a, b } => {
                    let (n, p) = self.dims(*a);
                    let q = node.cols;
                    let mut da = vec![T::zero(); n * p];
                    T::gemm(
                        n,
                        q,
                        p,
                        T::one(),
                        &g,
                        q as isize,
                        1,
                        self.value(*b),
                        1,
                        q as isize,
                        T::zero(),
                        &mut da,
                        p as isize,
                        1,
                    );
                    let mut db = vec![T::zero(); p * q];
                    T::gemm(
                        p,
                        n,
                        q,
                        T::one(),
                        self.value(*a),
                        1,
                        p as isize,
                        &g,
                        q as isize,
                        1,
                        T::zero(),
                        &mut db,
                        q as isize,
                        1,
                    );
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow { x, row } => {
                    let mut dr = vec![T::zero(); node.cols];
                    g.chunks(node.cols).for_each(|r| add_assign(&mut dr, r));
                    accumulate(&mut grads, *row, dr);
                    accumulate(&mut grads, *x, g);
                }
                Op::Scale { x, c } => {
                    let d = g.iter().map(|v| *v * *c).collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::Mul { a, b } => {
                    let da = g.iter().zip(self.value(*b)).map(|(g, y)| *g * *y).collect();
                    let db = g.iter().zip(self.value(*a)).map(|(g, x)| *g * *x).collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Sum { x } => {
                    let n = self.nodes[x.0].value.len();
                    accumulate(&mut grads, *x, vec![g[0]; n]);
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let (r, c) = (node.rows, node.cols);
                    let gm = self.value(*gamma);
                    let n = T::lit(c as f64);
                    let mut dx = vec![T::zero(); r * c];
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let hr = &xhat[i * c..(i + 1) * c];
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..c {
                            let d = gr[j] * gm[j];
                            mean_d = mean_d + d;
                            mean_dh = mean_dh + d * hr[j];
                            dg[j] = dg[j] + gr[j] * hr[j];
                            db[j] = db[j] + gr[j];
                        }
                        mean_d = mean_d / n;
                        mean_dh = mean_dh / n;
                        for j in 0..c {
                            let d = gr[j] * gm[j];
                            dx[i * c + j] = rstd[i] * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dg);
                    accumulate(&mut grads, *beta, db);
                }
                Op::Gelu { x } => {
                    let d = g
                        .iter()
                        .zip(self.value(*x))
                        .map(|(g, v)| *g * gelu_grad(*v))
                        .collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::Attention { qkv, heads, seq_len, probs } => {
                    let d = self.attention_backward(*qkv, *heads, *seq_len, probs, &g);
                    accumulate(&mut grads, *qkv, d);
                }
                Op::Gather { sources, picks } => {
                    let cols = node.cols;
                    let mut per_src: Vec<Option<Vec<T>>> = vec![None; sources.len()];
                    for (r, &(si, sr)) in picks.iter().enumerate() {
                        let len = self.nodes[sources[si].0].value.len();
                        let buf = per_src[si].get_or_insert_with(|| vec![T::zero(); len]);
                        add_assign(&mut buf[sr * cols..(sr + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                    for (si, buf) in per_src.into_iter().enumerate() {
                        if let Some(buf) = buf {
                            accumulate(&mut grads, sources[si], buf);
                        }
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let c = self.dims(*logits).1;
                    let scale = g[0] / T::lit(labels.len() as f64);
                    let mut d: Vec<T> = probs.iter().map(|p| *p * scale).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        d[i * c + l] = d[i * c + l] - scale;
                    }
                    accumulate(&mut grads, *logits, d);
                }
            }
        }

        let finite = out.params.values().chain(out.rows.values()).flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numerics { op: "backward" });
        }
        Ok(out)
    }

    fn attention_backward(
        &self,
        qkv: NodeId,
        heads: usize,
        seq_len: usize,
        probs: &[T],
        g: &[T],
    ) -> Vec<T> {
        let (rows, c3) = self.dims(qkv);
        let h = c3 / 3;
        let dh = h / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let v = self.value(qkv);
        let mut d = vec![T::zero(); rows * c3];
        let mut dp = vec![T::zero(); seq_len];
        for s in 0..rows / seq_len {
            let base = s * seq_len;
            for hd in 0..heads {
                let qo = hd * dh;
                let ko = h + hd * dh;
                let vo = 2 * h + hd * dh;
                let p = &probs[(s * heads + hd) * seq_len * seq_len..][..seq_len * seq_len];
                for i in 0..seq_len {
                    let gi = &g[(base + i) * h + qo..][..dh];
                    let prow = &p[i * seq_len..(i + 1) * seq_len];
                    // dV_j += p_ij g_i ; dP_ij = g_i . v_j
                    let mut dot = T::zero();
                    for j in 0..seq_len {
                        let vj = &v[(base + j) * c3 + vo..][..dh];
                        dp[j] = gi.iter().zip(vj).map(|(a, b)| *a * *b).sum();
                        dot = dot + dp[j] * prow[j];
                        let dvj = &mut d[(base + j) * c3 + vo..][..dh];
                        dvj.iter_mut().zip(gi).for_each(|(o, x)| *o = *o + prow[j] * *x);
                    }
                    // dS_ij = p_ij (dP_ij - sum_l p_il dP_il), scaled
                    for j in 0..seq_len {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let (qi_off, kj_off) = ((base + i) * c3 + qo, (base + j) * c3 + ko);
                        for t in 0..dh {
                            let kj = v[kj_off + t];
                            let qi = v[qi_off + t];
                            d[qi_off + t] = d[qi_off + t] + ds * kj;
                            d[kj_off + t] = d[kj_off + t] + ds * qi;
                        }
                    }
                }
            }
        }
        d
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, g: Vec<T>) {
    match &mut grads[id.0] {
        Some(acc) => add_assign(acc, &g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|v| (*v - max).exp()).sum::<T>().ln()
}

pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    x * half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}
