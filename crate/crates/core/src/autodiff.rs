//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its output value and the indices
//! of its inputs. Because nodes can only reference earlier nodes, the tape
//! is already in topological order and the backward pass is a single sweep
//! from the loss down to index 0.
//!
//! ```
//! use fedvit::autodiff::Tape;
//! use fedvit::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let w = tape.param("w", Tensor::scalar(3.0));
//! let y = tape.mul(w, w).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get("w").unwrap().item(), 6.0);
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::params::ParamSet;
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, softmax_rows_raw, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    AddTiled(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Gelu(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Slice {
        x: usize,
        rows: (usize, usize),
        cols: (usize, usize),
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    MeanRowGroups {
        x: usize,
        group: usize,
    },
    Sum(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a computation for one backward pass. Confined to a single task.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives no named gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf)
    }

    /// A named leaf whose gradient is reported by [`backward`](Self::backward).
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push_unchecked(value, Op::Leaf);
        self.params.push((name.into(), v.index));
        v
    }

    /// Registers every tensor of `params` as a named leaf.
    pub fn params(&mut self, params: &ParamSet) -> Vec<(String, Var)> {
        params
            .iter()
            .map(|(name, t)| (name.to_string(), self.param(name, t.clone())))
            .collect()
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVariable);
        }
        Ok(v.index)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        value.check_finite(name)?;
        Ok(self.push_unchecked(value, op))
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        let i = self.idx(v)?;
        let (r, c) = self.nodes[i].value.dims2(op)?;
        Ok((i, r, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, m, k) = self.mat(a, "matmul")?;
        let (ib, k2, n) = self.mat(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} times {k2}x{n}")));
        }
        let out = matmul_nn(
            self.nodes[ia].value.data(),
            self.nodes[ib].value.data(),
            m,
            k,
            n,
        );
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(ia, ib))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (ia, r, c) = self.mat(a, "transpose")?;
        let src = self.nodes[ia].value.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push_unchecked(Tensor::from_parts(vec![c, r], out), Op::Transpose(ia)))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(usize, usize)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok((ia, ib))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.same_shape(a, b, "add")?;
        let va = &self.nodes[ia].value;
        let out: Vec<f64> = va
            .data()
            .iter()
            .zip(self.nodes[ib].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = va.shape().to_vec();
        self.push("add", Tensor::from_parts(shape, out), Op::Add(ia, ib))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.same_shape(a, b, "mul")?;
        let va = &self.nodes[ia].value;
        let out: Vec<f64> = va
            .data()
            .iter()
            .zip(self.nodes[ib].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = va.shape().to_vec();
        self.push("mul", Tensor::from_parts(shape, out), Op::Mul(ia, ib))
    }

    /// `x[m×n] + b[n]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (ix, m, n) = self.mat(x, "add_row")?;
        let ib = self.idx(b)?;
        if self.nodes[ib].value.shape() != [n] {
            return Err(shape_err(
                "add_row",
                format!("bias {:?} for {m}x{n}", self.nodes[ib].value.shape()),
            ));
        }
        let bias = self.nodes[ib].value.data();
        let mut out = self.nodes[ix].value.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.push("add_row", Tensor::from_parts(vec![m, n], out), Op::AddRow(ix, ib))
    }

    /// `x[(g·t)×n] + p[t×n]`, adding `p` to each consecutive block of `t` rows.
    pub fn add_tiled(&mut self, x: Var, p: Var) -> Result<Var> {
        let (ix, m, n) = self.mat(x, "add_tiled")?;
        let (ip, t, n2) = self.mat(p, "add_tiled")?;
        if n != n2 || m % t != 0 {
            return Err(shape_err("add_tiled", format!("{m}x{n} tiled by {t}x{n2}")));
        }
        let tile = self.nodes[ip].value.data();
        let mut out = self.nodes[ix].value.data().to_vec();
        for block in out.chunks_mut(t * n) {
            for (o, &pv) in block.iter_mut().zip(tile) {
                *o += pv;
            }
        }
        self.push("add_tiled", Tensor::from_parts(vec![m, n], out), Op::AddTiled(ix, ip))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = &self.nodes[ix].value;
        let out = v.data().iter().map(|a| a * factor).collect();
        let shape = v.shape().to_vec();
        self.push("scale", Tensor::from_parts(shape, out), Op::Scale(ix, factor))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = &self.nodes[ix].value;
        let out = v.data().iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
        let shape = v.shape().to_vec();
        Ok(self.push_unchecked(Tensor::from_parts(shape, out), Op::Relu(ix)))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = &self.nodes[ix].value;
        let out = v
            .data()
            .iter()
            .map(|&a| 0.5 * a * (1.0 + (GELU_C * (a + 0.044715 * a * a * a)).tanh()))
            .collect();
        let shape = v.shape().to_vec();
        self.push("gelu", Tensor::from_parts(shape, out), Op::Gelu(ix))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (ix, m, n) = self.mat(x, "softmax_rows")?;
        let out = softmax_rows_raw(self.nodes[ix].value.data(), m, n);
        self.push("softmax_rows", Tensor::from_parts(vec![m, n], out), Op::SoftmaxRows(ix))
    }

    /// Per-row normalization to zero mean and unit variance, then `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(shape_err("layer_norm", "eps must be positive"));
        }
        let (ix, m, n) = self.mat(x, "layer_norm")?;
        let (ig, ib) = (self.idx(gamma)?, self.idx(beta)?);
        if self.nodes[ig].value.shape() != [n] || self.nodes[ib].value.shape() != [n] {
            return Err(shape_err("layer_norm", "gamma/beta must have one entry per column"));
        }
        let src = self.nodes[ix].value.data();
        let g = self.nodes[ig].value.data();
        let b = self.nodes[ib].value.data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = g[c] * h + b[c];
            }
        }
        self.push(
            "layer_norm",
            Tensor::from_parts(vec![m, n], out),
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                inv_std,
            },
        )
    }

    /// Sub-matrix `x[r0..r1, c0..c1]`.
    pub fn slice(&mut self, x: Var, rows: (usize, usize), cols: (usize, usize)) -> Result<Var> {
        let (ix, m, n) = self.mat(x, "slice")?;
        if rows.0 >= rows.1 || rows.1 > m || cols.0 >= cols.1 || cols.1 > n {
            return Err(shape_err("slice", format!("{rows:?},{cols:?} of {m}x{n}")));
        }
        let src = self.nodes[ix].value.data();
        let w = cols.1 - cols.0;
        let mut out = Vec::with_capacity((rows.1 - rows.0) * w);
        for r in rows.0..rows.1 {
            out.extend_from_slice(&src[r * n + cols.0..r * n + cols.1]);
        }
        Ok(self.push_unchecked(
            Tensor::from_parts(vec![rows.1 - rows.0, w], out),
            Op::Slice { x: ix, rows, cols },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut idx = Vec::with_capacity(parts.len());
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let (i, r, c) = self.mat(p, "concat_cols")?;
            idx.push(i);
            dims.push((r, c));
        }
        let m = dims.first().ok_or(Error::Empty("concat_cols input"))?.0;
        if dims.iter().any(|&(r, _)| r != m) {
            return Err(shape_err("concat_cols", "row counts differ"));
        }
        let n: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&i, &(_, c)) in idx.iter().zip(&dims) {
                out.extend_from_slice(&self.nodes[i].value.data()[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push_unchecked(Tensor::from_parts(vec![m, n], out), Op::ConcatCols(idx)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut idx = Vec::with_capacity(parts.len());
        let mut m = 0;
        let mut n = None;
        for &p in parts {
            let (i, r, c) = self.mat(p, "concat_rows")?;
            if *n.get_or_insert(c) != c {
                return Err(shape_err("concat_rows", "column counts differ"));
            }
            idx.push(i);
            m += r;
        }
        let n = n.ok_or(Error::Empty("concat_rows input"))?;
        let mut out = Vec::with_capacity(m * n);
        for &i in &idx {
            out.extend_from_slice(self.nodes[i].value.data());
        }
        Ok(self.push_unchecked(Tensor::from_parts(vec![m, n], out), Op::ConcatRows(idx)))
    }

    /// Mean of each consecutive block of `group` rows: `(g·group)×n → g×n`.
    pub fn mean_row_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (ix, m, n) = self.mat(x, "mean_row_groups")?;
        if group == 0 || m % group != 0 {
            return Err(shape_err("mean_row_groups", format!("{m} rows in groups of {group}")));
        }
        let g = m / group;
        let src = self.nodes[ix].value.data();
        let mut out = vec![0.0; g * n];
        for (k, block) in src.chunks(group * n).enumerate() {
            let dst = &mut out[k * n..(k + 1) * n];
            for row in block.chunks(n) {
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d += v;
                }
            }
            for d in dst.iter_mut() {
                *d /= group as f64;
            }
        }
        Ok(self.push_unchecked(
            Tensor::from_parts(vec![g, n], out),
            Op::MeanRowGroups { x: ix, group },
        ))
    }

    /// Sum of every entry, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.nodes[ix].value.data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(ix))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (il, b, k) = self.mat(logits, "cross_entropy")?;
        if labels.len() != b {
            return Err(shape_err(
                "cross_entropy",
                format!("{b} rows but {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        let z = self.nodes[il].value.data();
        let probs = softmax_rows_raw(z, b, k);
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &z[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        self.push(
            "cross_entropy",
            Tensor::scalar(total / b as f64),
            Op::CrossEntropy {
                logits: il,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Sign pattern of every ReLU input on the tape. Two evaluations with the
    /// same pattern lie on the same linear piece of every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(i) = node.op {
                out.extend(self.nodes[i].value.data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    /// Gradients of the scalar `loss` with respect to every named parameter.
    pub fn backward(&self, loss: Var) -> Result<ParamSet> {
        Ok(self.gradients(loss)?.into_params())
    }

    /// Full reverse sweep; the result answers gradient queries for any leaf.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<'_>> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[li].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { tape: self, grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| self.nodes[j].value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a].value.dims2("").unwrap();
                let n = self.nodes[b].value.shape()[1];
                accumulate(grads, a, &matmul_nt(g, val(b), m, n, k));
                accumulate(grads, b, &matmul_tn(val(a), g, m, k, n));
            }
            &Op::Transpose(a) => {
                let (r, c) = self.nodes[a].value.dims2("").unwrap();
                let mut d = vec![0.0; r * c];
                for i2 in 0..r {
                    for j in 0..c {
                        d[i2 * c + j] = g[j * r + i2];
                    }
                }
                accumulate(grads, a, &d);
            }
            &Op::Add(a, b) => {
                accumulate(grads, a, g);
                accumulate(grads, b, g);
            }
            &Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(val(b)).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.iter().zip(val(a)).map(|(x, y)| x * y).collect();
                accumulate(grads, a, &da);
                accumulate(grads, b, &db);
            }
            &Op::AddRow(x, b) => {
                let n = self.nodes[b].value.len();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(grads, x, g);
                accumulate(grads, b, &db);
            }
            &Op::AddTiled(x, p) => {
                let t = self.nodes[p].value.len();
                let mut dp = vec![0.0; t];
                for block in g.chunks(t) {
                    for (d, &v) in dp.iter_mut().zip(block) {
                        *d += v;
                    }
                }
                accumulate(grads, x, g);
                accumulate(grads, p, &dp);
            }
            &Op::Scale(x, f) => {
                let d: Vec<f64> = g.iter().map(|v| v * f).collect();
                accumulate(grads, x, &d);
            }
            &Op::Relu(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(val(x))
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(grads, x, &d);
            }
            &Op::Gelu(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(val(x))
                    .map(|(&gv, &a)| {
                        let u = GELU_C * (a + 0.044715 * a * a * a);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * a * a);
                        gv * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * du)
                    })
                    .collect();
                accumulate(grads, x, &d);
            }
            &Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let n = node.value.shape()[1];
                let mut d = vec![0.0; y.len()];
                for ((drow, yrow), grow) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for ((dv, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *dv = yv * (gv - dot);
                    }
                }
                accumulate(grads, x, &d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = self.nodes[*gamma].value.len();
                let gam = val(*gamma);
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut dx = vec![0.0; g.len()];
                for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for c in 0..n {
                        dgamma[c] += grow[c] * hrow[c];
                        dbeta[c] += grow[c];
                        let dh = grow[c] * gam[c];
                        sum_dh += dh;
                        sum_dh_h += dh * hrow[c];
                    }
                    let inv = inv_std[r];
                    for c in 0..n {
                        let dh = grow[c] * gam[c];
                        dx[r * n + c] =
                            inv * (dh - sum_dh / n as f64 - hrow[c] * sum_dh_h / n as f64);
                    }
                }
                accumulate(grads, *x, &dx);
                accumulate(grads, *gamma, &dgamma);
                accumulate(grads, *beta, &dbeta);
            }
            &Op::Slice { x, rows, cols } => {
                let n = self.nodes[x].value.shape()[1];
                let w = cols.1 - cols.0;
                let slot = grads[x].get_or_insert_with(|| vec![0.0; self.nodes[x].value.len()]);
                for (k, r) in (rows.0..rows.1).enumerate() {
                    let dst = &mut slot[r * n + cols.0..r * n + cols.1];
                    for (d, &v) in dst.iter_mut().zip(&g[k * w..(k + 1) * w]) {
                        *d += v;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.shape()[0];
                let n = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p].value.shape()[1];
                    let mut d = Vec::with_capacity(m * c);
                    for r in 0..m {
                        d.extend_from_slice(&g[r * n + offset..r * n + offset + c]);
                    }
                    accumulate(grads, p, &d);
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    accumulate(grads, p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            &Op::MeanRowGroups { x, group } => {
                let n = node.value.shape()[1];
                let mut d = vec![0.0; self.nodes[x].value.len()];
                for (k, block) in d.chunks_mut(group * n).enumerate() {
                    for row in block.chunks_mut(n) {
                        for (dv, &gv) in row.iter_mut().zip(&g[k * n..(k + 1) * n]) {
                            *dv = gv / group as f64;
                        }
                    }
                }
                accumulate(grads, x, &d);
            }
            &Op::Sum(x) => {
                let d = vec![g[0]; self.nodes[x].value.len()];
                accumulate(grads, x, &d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.nodes[*logits].value.shape()[1];
                let scale = g[0] / labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    d[r * k + y] -= scale;
                }
                accumulate(grads, *logits, &d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, contribution: &[f64]) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, &c) in acc.iter_mut().zip(contribution) {
                *a += c;
            }
        }
        slot @ None => *slot = Some(contribution.to_vec()),
    }
}

/// Result of a backward sweep.
pub struct Gradients<'t> {
    tape: &'t Tape,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients<'_> {
    /// Gradient with respect to any recorded value; zeros if unreachable.
    pub fn wrt(&self, v: Var) -> Result<Tensor> {
        let i = self.tape.idx(v)?;
        let shape = self.tape.nodes[i].value.shape().to_vec();
        Ok(match self.grads.get(i).and_then(Option::as_ref) {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        })
    }

    pub fn into_params(self) -> ParamSet {
        self.tape
            .params
            .iter()
            .map(|(name, i)| {
                let shape = self.tape.nodes[*i].value.shape().to_vec();
                let g = match self.grads.get(*i).and_then(Option::as_ref) {
                    Some(g) => Tensor::from_parts(shape, g.clone()),
                    None => Tensor::zeros(&shape),
                };
                (name.clone(), g)
            })
            .collect()
    }
}
