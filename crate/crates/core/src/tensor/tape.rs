//! Reverse-mode differentiation tape.
//!
//! Ops execute eagerly and record themselves; `backward` walks the records in
//! reverse. Every forward op validates shapes and rejects non-finite outputs.

use std::collections::HashMap;

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, b: Var },
    Scale { x: Var, c: f64 },
    Relu { x: Var },
    Softmax { x: Var },
    LseCols { x: Var },
    LseAll { x: Var },
    CrossEntropyLogits { logits: Var, target: usize },
    Concat { xs: Vec<Var> },
    ConcatCols { xs: Vec<Var> },
    StackRows { xs: Vec<Var> },
    SelectRow { x: Var, i: usize },
    SelectRows { x: Var, idx: Vec<usize> },
    Index { x: Var, i: usize },
    SumAll { x: Var },
    MaxAxis0 { x: Var },
    MaxAxis1 { x: Var },
    Conv1dSame { x: Var, w: Var, b: Var },
    ConvRows { s: Var, w: Var, b: Var },
    RelShift { x: Var },
    RepeatRow { x: Var },
    RepeatCol { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Dropout { x: Var, mask: Vec<f64> },
    NormalizeRows { x: Var },
    Reshape { x: Var },
    SliceCols { x: Var, from: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    track: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    rng: Rng,
    training: bool,
}

/// Gradients produced by `Tape::backward`, indexed by `Var`.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for every parameter bound through `Tape::bind`, zero when the
    /// parameter did not participate in the loss.
    pub fn for_params(&self, bound: &Bound) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (name, var) in bound.entries() {
            let g = self
                .get(*var)
                .cloned()
                .expect("bound parameter is always tracked");
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Parameter-name-to-Var mapping for one forward pass.
pub struct Bound {
    entries: Vec<(String, Var)>,
    map: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        match self.map.get(name) {
            Some(&i) => self.entries[i].1,
            None => panic!("parameter {name:?} is not bound on this tape"),
        }
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }
}

impl Tape {
    pub fn new(seed: u64, training: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            rng: Rng::new(seed),
            training,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf; it is tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let track = t.requires_grad;
        self.push_raw(t, Op::Leaf, track)
    }

    /// Insert an untracked constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// Bind every tensor of a parameter set as a tracked leaf.
    pub fn bind(&mut self, params: &ParamSet) -> Bound {
        let mut entries = Vec::with_capacity(params.len());
        let mut map = HashMap::with_capacity(params.len());
        for (name, tensor) in params.iter() {
            let mut t = tensor.clone();
            t.requires_grad = true;
            let var = self.leaf(t);
            map.insert(name.to_string(), entries.len());
            entries.push((name.to_string(), var));
        }
        Bound { entries, map }
    }

    fn push_raw(&mut self, value: Tensor, op: Op, track: bool) -> Var {
        self.nodes.push(Node { value, op, track });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: op_name.to_string(),
            });
        }
        let track = inputs.iter().any(|v| self.nodes[v.0].track);
        Ok(self.push_raw(value, op, track))
    }

    fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: lhs.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        }
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Self::shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        self.push("matmul", t, Op::MatMul { a, b }, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(Self::shape_err("transpose", tx, tx));
        }
        let (r, c) = (tx.shape()[0], tx.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = tx.data()[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        self.push("transpose", t, Op::Transpose { x }, &[x])
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err(op_name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(op_name, t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// `[n,m] + [m]`, the bias broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.shape().len() != 2 || tb.shape().len() != 1 || tx.shape()[1] != tb.shape()[0] {
            return Err(Self::shape_err("add_bias", tx, tb));
        }
        let (n, m) = (tx.shape()[0], tx.shape()[1]);
        let mut out = tx.data().to_vec();
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] += tb.data()[j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        self.push("add_bias", t, Op::AddBias { x, b }, &[x, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale".into() });
        }
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v * c).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("scale", t, Op::Scale { x, c }, &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("relu", t, Op::Relu { x }, &[x])
    }

    /// Softmax along the last axis: over the whole vector for rank 1, per row
    /// for rank 2.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols();
        let rows = tx.rows();
        let mut out = vec![0.0; tx.numel()];
        for i in 0..rows {
            softmax_row(&tx.data()[i * cols..(i + 1) * cols], &mut out[i * cols..(i + 1) * cols]);
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.push("softmax", t, Op::Softmax { x }, &[x])
    }

    /// `[r,c] -> [c]`, log-sum-exp down each column.
    pub fn lse_cols(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(Self::shape_err("lse_cols", tx, tx));
        }
        let (r, c) = (tx.shape()[0], tx.shape()[1]);
        let mut out = vec![0.0; c];
        for j in 0..c {
            let mut mx = f64::NEG_INFINITY;
            for i in 0..r {
                mx = mx.max(tx.data()[i * c + j]);
            }
            let s: f64 = (0..r).map(|i| (tx.data()[i * c + j] - mx).exp()).sum();
            out[j] = mx + s.ln();
        }
        let t = Tensor::new(vec![c], out)?;
        self.push("lse_cols", t, Op::LseCols { x }, &[x])
    }

    /// Log-sum-exp over all elements, to a scalar.
    pub fn lse_all(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let mx = tx.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = tx.data().iter().map(|&v| (v - mx).exp()).sum();
        let t = Tensor::scalar(mx + s.ln());
        self.push("lse_all", t, Op::LseAll { x }, &[x])
    }

    /// Softmax cross-entropy against a one-hot target, fused for stability:
    /// `lse(logits) - logits[target]`.
    pub fn cross_entropy_logits(&mut self, logits: Var, target: usize) -> Result<Var> {
        let tl = self.value(logits);
        if tl.shape().len() != 1 || target >= tl.numel() {
            return Err(Error::Numeric(format!(
                "cross_entropy_logits: target {} out of range for shape {:?}",
                target,
                tl.shape()
            )));
        }
        let mx = tl.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = tl.data().iter().map(|&v| (v - mx).exp()).sum();
        let loss = mx + s.ln() - tl.data()[target];
        let t = Tensor::scalar(loss);
        self.push(
            "cross_entropy_logits",
            t,
            Op::CrossEntropyLogits { logits, target },
            &[logits],
        )
    }

    /// Concatenate vectors into one vector.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Numeric("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        for &v in xs {
            let tv = self.value(v);
            if tv.shape().len() != 1 {
                return Err(Self::shape_err("concat", tv, tv));
            }
            data.extend_from_slice(tv.data());
        }
        let t = Tensor::vector(data);
        self.push("concat", t, Op::Concat { xs: xs.to_vec() }, xs)
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Numeric("concat_cols of zero tensors".into()));
        }
        let n = self.value(xs[0]).shape()[0];
        let mut total_cols = 0;
        for &v in xs {
            let tv = self.value(v);
            if tv.shape().len() != 2 || tv.shape()[0] != n {
                return Err(Self::shape_err("concat_cols", self.value(xs[0]), tv));
            }
            total_cols += tv.shape()[1];
        }
        let mut data = vec![0.0; n * total_cols];
        let mut col0 = 0;
        for &v in xs {
            let tv = self.value(v);
            let c = tv.shape()[1];
            for i in 0..n {
                data[i * total_cols + col0..i * total_cols + col0 + c]
                    .copy_from_slice(&tv.data()[i * c..(i + 1) * c]);
            }
            col0 += c;
        }
        let t = Tensor::new(vec![n, total_cols], data)?;
        self.push("concat_cols", t, Op::ConcatCols { xs: xs.to_vec() }, xs)
    }

    /// Stack vectors of equal length into a matrix, one per row.
    pub fn stack_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Numeric("stack_rows of zero tensors".into()));
        }
        let d = self.value(xs[0]).numel();
        let mut data = Vec::with_capacity(xs.len() * d);
        for &v in xs {
            let tv = self.value(v);
            if tv.shape().len() != 1 || tv.numel() != d {
                return Err(Self::shape_err("stack_rows", self.value(xs[0]), tv));
            }
            data.extend_from_slice(tv.data());
        }
        let t = Tensor::new(vec![xs.len(), d], data)?;
        self.push("stack_rows", t, Op::StackRows { xs: xs.to_vec() }, xs)
    }

    pub fn select_row(&mut self, x: Var, i: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 || i >= tx.shape()[0] {
            return Err(Error::Numeric(format!(
                "select_row: row {} out of range for shape {:?}",
                i,
                tx.shape()
            )));
        }
        let t = Tensor::vector(tx.row(i).to_vec());
        self.push("select_row", t, Op::SelectRow { x, i }, &[x])
    }

    /// Embedding-style lookup: gather rows of a table. Duplicate indices
    /// accumulate gradient.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 || idx.is_empty() {
            return Err(Error::Numeric(format!(
                "select_rows: bad request on shape {:?}",
                tx.shape()
            )));
        }
        let d = tx.shape()[1];
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= tx.shape()[0] {
                return Err(Error::Numeric(format!(
                    "select_rows: row {} out of range for shape {:?}",
                    i,
                    tx.shape()
                )));
            }
            data.extend_from_slice(tx.row(i));
        }
        let t = Tensor::new(vec![idx.len(), d], data)?;
        self.push(
            "select_rows",
            t,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let tx = self.value(x);
        if i >= tx.numel() {
            return Err(Error::Numeric(format!(
                "index: {} out of range for shape {:?}",
                i,
                tx.shape()
            )));
        }
        let t = Tensor::scalar(tx.data()[i]);
        self.push("index", t, Op::Index { x, i }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let t = Tensor::scalar(s);
        self.push("sum_all", t, Op::SumAll { x }, &[x])
    }

    /// `[n,m] -> [m]`, max over rows. Ties route gradient to the first max.
    pub fn max_axis0(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(Self::shape_err("max_axis0", tx, tx));
        }
        let (n, m) = (tx.shape()[0], tx.shape()[1]);
        let mut out = vec![f64::NEG_INFINITY; m];
        for i in 0..n {
            for j in 0..m {
                out[j] = out[j].max(tx.data()[i * m + j]);
            }
        }
        let t = Tensor::vector(out);
        self.push("max_axis0", t, Op::MaxAxis0 { x }, &[x])
    }

    /// `[n,m] -> [n]`, max over columns.
    pub fn max_axis1(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(Self::shape_err("max_axis1", tx, tx));
        }
        let (n, m) = (tx.shape()[0], tx.shape()[1]);
        let out = (0..n)
            .map(|i| {
                tx.data()[i * m..(i + 1) * m]
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let t = Tensor::vector(out);
        self.push("max_axis1", t, Op::MaxAxis1 { x }, &[x])
    }

    /// Same-length 1-D convolution over positions.
    /// `x: [len, cin]`, `w: [k, cin, cout]`, `b: [cout]` -> `[len, cout]`.
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.shape().len() != 2 || tw.shape().len() != 3 || tx.shape()[1] != tw.shape()[1] {
            return Err(Self::shape_err("conv1d_same", tx, tw));
        }
        let (len, cin) = (tx.shape()[0], tx.shape()[1]);
        let (k, cout) = (tw.shape()[0], tw.shape()[2]);
        let tb = self.value(b);
        if tb.shape() != [cout] {
            return Err(Self::shape_err("conv1d_same", self.value(w), tb));
        }
        let pad_l = (k - 1) / 2;
        let mut out = vec![0.0; len * cout];
        let (xd, wd, bd) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        for p in 0..len {
            for o in 0..cout {
                let mut acc = bd[o];
                for t in 0..k {
                    let src = p as isize + t as isize - pad_l as isize;
                    if src < 0 || src as usize >= len {
                        continue;
                    }
                    let src = src as usize;
                    for c in 0..cin {
                        acc += xd[src * cin + c] * wd[(t * cin + c) * cout + o];
                    }
                }
                out[p * cout + o] = acc;
            }
        }
        let t = Tensor::new(vec![len, cout], out)?;
        self.push("conv1d_same", t, Op::Conv1dSame { x, w, b }, &[x, w, b])
    }

    /// Convolution down the rows of a score matrix with one shared kernel and
    /// a per-column bias: `s: [n,m]`, `w: [2k+1]`, `b: [m]` -> `[n,m]`,
    /// zero-padded at the boundaries.
    pub fn conv_rows(&mut self, s: Var, w: Var, b: Var) -> Result<Var> {
        let (ts, tw, tb) = (self.value(s), self.value(w), self.value(b));
        if ts.shape().len() != 2 || tw.shape().len() != 1 || tw.numel() % 2 == 0 {
            return Err(Self::shape_err("conv_rows", ts, tw));
        }
        if tb.shape() != [ts.shape()[1]] {
            return Err(Self::shape_err("conv_rows", ts, tb));
        }
        let (n, m) = (ts.shape()[0], ts.shape()[1]);
        let k = (tw.numel() - 1) / 2;
        let (sd, wd, bd) = (ts.data(), tw.data(), tb.data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut acc = bd[j];
                for t in 0..2 * k + 1 {
                    let src = i as isize + t as isize - k as isize;
                    if src < 0 || src as usize >= n {
                        continue;
                    }
                    acc += wd[t] * sd[src as usize * m + j];
                }
                out[i * m + j] = acc;
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        self.push("conv_rows", t, Op::ConvRows { s, w, b }, &[s, w, b])
    }

    /// Gather relative scores: `x: [n, 2n-1] -> [n, n]` with
    /// `out[i][j] = x[i][i - j + n - 1]`, i.e. column index = position delta
    /// shifted to be non-negative.
    pub fn rel_shift(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 || tx.shape()[1] != 2 * tx.shape()[0] - 1 {
            return Err(Self::shape_err("rel_shift", tx, tx));
        }
        let n = tx.shape()[0];
        let w = 2 * n - 1;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = tx.data()[i * w + (i + n - 1 - j)];
            }
        }
        let t = Tensor::new(vec![n, n], out)?;
        self.push("rel_shift", t, Op::RelShift { x }, &[x])
    }

    /// `[m] -> [rows, m]`, each row a copy.
    pub fn repeat_row(&mut self, x: Var, rows: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 1 || rows == 0 {
            return Err(Self::shape_err("repeat_row", tx, tx));
        }
        let m = tx.numel();
        let mut data = Vec::with_capacity(rows * m);
        for _ in 0..rows {
            data.extend_from_slice(tx.data());
        }
        let t = Tensor::new(vec![rows, m], data)?;
        self.push("repeat_row", t, Op::RepeatRow { x }, &[x])
    }

    /// `[n] -> [n, cols]`, each column a copy.
    pub fn repeat_col(&mut self, x: Var, cols: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 1 || cols == 0 {
            return Err(Self::shape_err("repeat_col", tx, tx));
        }
        let n = tx.numel();
        let mut data = Vec::with_capacity(n * cols);
        for i in 0..n {
            for _ in 0..cols {
                data.push(tx.data()[i]);
            }
        }
        let t = Tensor::new(vec![n, cols], data)?;
        self.push("repeat_col", t, Op::RepeatCol { x }, &[x])
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let m = tx.cols();
        if tg.shape() != [m] || tb.shape() != [m] {
            return Err(Self::shape_err("layer_norm", tx, tg));
        }
        let rows = tx.rows();
        let mut out = vec![0.0; tx.numel()];
        for i in 0..rows {
            let row = &tx.data()[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..m {
                out[i * m + j] = (row[j] - mean) * inv * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm { x, gamma, beta },
            &[x, gamma, beta],
        )
    }

    /// Inverted dropout. In evaluation mode this is the identity (the input
    /// var is returned unchanged); in training mode kept entries are scaled
    /// by `1/(1-rate)` so the output matches the input in expectation.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Numeric(format!("dropout rate {rate} outside [0,1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).numel();
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.uniform() < rate { 0.0 } else { keep })
            .collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("dropout", t, Op::Dropout { x, mask }, &[x])
    }

    /// L2-normalize each row; zero rows pass through unchanged (their cosine
    /// similarity is defined as 0 downstream).
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let m = tx.cols();
        let rows = tx.rows();
        let mut out = vec![0.0; tx.numel()];
        for i in 0..rows {
            let row = &tx.data()[i * m..(i + 1) * m];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for j in 0..m {
                    out[i * m + j] = row[j] / norm;
                }
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.push("normalize_rows", t, Op::NormalizeRows { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != tx.numel() {
            return Err(Error::Numeric(format!(
                "reshape: {:?} -> {:?} changes element count",
                tx.shape(),
                shape
            )));
        }
        let t = Tensor::new(shape, tx.data().to_vec())?;
        self.push("reshape", t, Op::Reshape { x }, &[x])
    }

    /// Column slice of a matrix: `[n,m] -> [n, to-from]`.
    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 || from >= to || to > tx.shape()[1] {
            return Err(Error::Numeric(format!(
                "slice_cols: [{from}, {to}) out of range for shape {:?}",
                tx.shape()
            )));
        }
        let (n, m) = (tx.shape()[0], tx.shape()[1]);
        let w = to - from;
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&tx.data()[i * m + from..i * m + to]);
        }
        let t = Tensor::new(vec![n, w], data)?;
        self.push("slice_cols", t, Op::SliceCols { x, from }, &[x])
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Returns a gradient for every tracked
    /// node; tracked leaves that did not contribute get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Numeric(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = self
            .nodes
            .iter()
            .map(|n| {
                if n.track {
                    Some(Tensor::zeros(n.value.shape().to_vec()))
                } else {
                    None
                }
            })
            .collect();
        if grads[loss.0].is_none() {
            // Loss does not depend on any tracked tensor: every gradient is zero.
            return Ok(Grads { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            let g = grads[i].take().unwrap();
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: &[f64]) {
        if let Some(g) = grads[v.0].as_mut() {
            for (a, b) in g.data_mut().iter_mut().zip(delta) {
                *a += b;
            }
        }
    }

    fn propagate(
        &self,
        node: usize,
        op: &Op,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}

            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if grads[a.0].is_some() {
                    // dA = G @ B^T
                    let mut bt = vec![0.0; k * n];
                    for i in 0..k {
                        for j in 0..n {
                            bt[j * k + i] = tb.data()[i * n + j];
                        }
                    }
                    let da = matmul_raw(g.data(), &bt, m, n, k);
                    self.accumulate(grads, *a, &da);
                }
                if grads[b.0].is_some() {
                    // dB = A^T @ G
                    let mut at = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..k {
                            at[j * m + i] = ta.data()[i * k + j];
                        }
                    }
                    let db = matmul_raw(&at, g.data(), k, m, n);
                    self.accumulate(grads, *b, &db);
                }
            }

            Op::Transpose { x } => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = g.data()[i * c + j];
                    }
                }
                self.accumulate(grads, *x, &dx);
            }

            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.data());
                self.accumulate(grads, *b, g.data());
            }

            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.data());
                let neg: Vec<f64> = g.data().iter().map(|v| -v).collect();
                self.accumulate(grads, *b, &neg);
            }

            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da: Vec<f64> = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }

            Op::AddBias { x, b } => {
                self.accumulate(grads, *x, g.data());
                let (n, m) = (g.shape()[0], g.shape()[1]);
                let mut db = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        db[j] += g.data()[i * m + j];
                    }
                }
                self.accumulate(grads, *b, &db);
            }

            Op::Scale { x, c } => {
                let dx: Vec<f64> = g.data().iter().map(|v| v * c).collect();
                self.accumulate(grads, *x, &dx);
            }

            Op::Relu { x } => {
                let tx = self.value(*x);
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, &dx);
            }

            Op::Softmax { x } => {
                let out = &self.nodes[node].value;
                let cols = out.cols();
                let rows = out.rows();
                let mut dx = vec![0.0; out.numel()];
                for i in 0..rows {
                    let s = &out.data()[i * cols..(i + 1) * cols];
                    let gr = &g.data()[i * cols..(i + 1) * cols];
                    let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dx[i * cols + j] = s[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, &dx);
            }

            Op::LseCols { x } => {
                let tx = self.value(*x);
                let (r, c) = (tx.shape()[0], tx.shape()[1]);
                let out = &self.nodes[node].value;
                let mut dx = vec![0.0; r * c];
                for j in 0..c {
                    for i in 0..r {
                        dx[i * c + j] = g.data()[j] * (tx.data()[i * c + j] - out.data()[j]).exp();
                    }
                }
                self.accumulate(grads, *x, &dx);
            }

            Op::LseAll { x } => {
                let tx = self.value(*x);
                let out = self.nodes[node].value.scalar_value();
                let dx: Vec<f64> = tx
                    .data()
                    .iter()
                    .map(|&v| g.data()[0] * (v - out).exp())
                    .collect();
                self.accumulate(grads, *x, &dx);
            }

            Op::CrossEntropyLogits { logits, target } => {
                let tl = self.value(*logits);
                let mut probs = vec![0.0; tl.numel()];
                softmax_row(tl.data(), &mut probs);
                let g0 = g.data()[0];
                for (j, p) in probs.iter_mut().enumerate() {
                    let one_hot = if j == *target { 1.0 } else { 0.0 };
                    *p = g0 * (*p - one_hot);
                }
                self.accumulate(grads, *logits, &probs);
            }

            Op::Concat { xs } => {
                let mut off = 0;
                for &v in xs {
                    let n = self.value(v).numel();
                    self.accumulate(grads, v, &g.data()[off..off + n]);
                    off += n;
                }
            }

            Op::ConcatCols { xs } => {
                let n = g.shape()[0];
                let total = g.shape()[1];
                let mut col0 = 0;
                for &v in xs {
                    let c = self.value(v).shape()[1];
                    let mut dv = vec![0.0; n * c];
                    for i in 0..n {
                        dv[i * c..(i + 1) * c]
                            .copy_from_slice(&g.data()[i * total + col0..i * total + col0 + c]);
                    }
                    self.accumulate(grads, v, &dv);
                    col0 += c;
                }
            }

            Op::StackRows { xs } => {
                let d = g.shape()[1];
                for (r, &v) in xs.iter().enumerate() {
                    self.accumulate(grads, v, &g.data()[r * d..(r + 1) * d]);
                }
            }

            Op::SelectRow { x, i } => {
                let tx = self.value(*x);
                let c = tx.shape()[1];
                let mut dx = vec![0.0; tx.numel()];
                dx[i * c..(i + 1) * c].copy_from_slice(g.data());
                self.accumulate(grads, *x, &dx);
            }

            Op::SelectRows { x, idx } => {
                let tx = self.value(*x);
                let d = tx.shape()[1];
                let mut dx = vec![0.0; tx.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        dx[i * d + j] += g.data()[r * d + j];
                    }
                }
                self.accumulate(grads, *x, &dx);
            }

            Op::Index { x, i } => {
                let tx = self.value(*x);
                let mut dx = vec![0.0; tx.numel()];
                dx[*i] = g.data()[0];
                self.accumulate(grads, *x, &dx);
            }

            Op::SumAll { x } => {
                let tx = self.value(*x);
                let dx = vec![g.data()[0]; tx.numel()];
                self.accumulate(grads, *x, &dx);
            }

            Op::MaxAxis0 { x } => {
                let tx = self.value(*x);
                let (n, m) = (tx.shape()[0], tx.shape()[1]);
                let mut dx = vec![0.0; n * m];
                for j in 0..m {
                    let mut best = 0;
                    for i in 1..n {
                        if tx.data()[i * m + j] > tx.data()[best * m + j] {
                            best = i;
                        }
                    }
                    dx[best * m + j] = g.data()[j];
                }
                self.accumulate(grads, *x, &dx);
            }

            Op::MaxAxis1 { x } => {
                let tx = self.value(*x);
                let (n, m) = (tx.shape()[0], tx.shape()[1]);
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    let row = &tx.data()[i * m..(i + 1) * m];
                    let mut best = 0;
                    for j in 1..m {
                        if row[j] > row[best] {
                            best = j;
                        }
                    }
                    dx[i * m + best] = g.data()[i];
                }
                self.accumulate(grads, *x, &dx);
            }

            Op::Conv1dSame { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (len, cin) = (tx.shape()[0], tx.shape()[1]);
                let (k, cout) = (tw.shape()[0], tw.shape()[2]);
                let pad_l = (k - 1) / 2;
                let mut dx = vec![0.0; len * cin];
                let mut dw = vec![0.0; k * cin * cout];
                let mut db = vec![0.0; cout];
                for p in 0..len {
                    for o in 0..cout {
                        let go = g.data()[p * cout + o];
                        db[o] += go;
                        for t in 0..k {
                            let src = p as isize + t as isize - pad_l as isize;
                            if src < 0 || src as usize >= len {
                                continue;
                            }
                            let src = src as usize;
                            for c in 0..cin {
                                dx[src * cin + c] += go * tw.data()[(t * cin + c) * cout + o];
                                dw[(t * cin + c) * cout + o] += go * tx.data()[src * cin + c];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, &dx);
                self.accumulate(grads, *w, &dw);
                self.accumulate(grads, *b, &db);
            }

            Op::ConvRows { s, w, b } => {
                let (ts, tw) = (self.value(*s), self.value(*w));
                let (n, m) = (ts.shape()[0], ts.shape()[1]);
                let k = (tw.numel() - 1) / 2;
                let mut ds = vec![0.0; n * m];
                let mut dw = vec![0.0; tw.numel()];
                let mut db = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        let go = g.data()[i * m + j];
                        db[j] += go;
                        for t in 0..2 * k + 1 {
                            let src = i as isize + t as isize - k as isize;
                            if src < 0 || src as usize >= n {
                                continue;
                            }
                            ds[src as usize * m + j] += go * tw.data()[t];
                            dw[t] += go * ts.data()[src as usize * m + j];
                        }
                    }
                }
                self.accumulate(grads, *s, &ds);
                self.accumulate(grads, *w, &dw);
                self.accumulate(grads, *b, &db);
            }

            Op::RelShift { x } => {
                let n = g.shape()[0];
                let w = 2 * n - 1;
                let mut dx = vec![0.0; n * w];
                for i in 0..n {
                    for j in 0..n {
                        dx[i * w + (i + n - 1 - j)] += g.data()[i * n + j];
                    }
                }
                self.accumulate(grads, *x, &dx);
            }

            Op::RepeatRow { x } => {
                let m = self.value(*x).numel();
                let rows = g.shape()[0];
                let mut dx = vec![0.0; m];
                for i in 0..rows {
                    for j in 0..m {
                        dx[j] += g.data()[i * m + j];
                    }
                }
                self.accumulate(grads, *x, &dx);
            }

            Op::RepeatCol { x } => {
                let n = self.value(*x).numel();
                let cols = g.shape()[1];
                let mut dx = vec![0.0; n];
                for i in 0..n {
                    for j in 0..cols {
                        dx[i] += g.data()[i * cols + j];
                    }
                }
                self.accumulate(grads, *x, &dx);
            }

            Op::LayerNorm { x, gamma, beta } => {
                let (tx, tg) = (self.value(*x), self.value(*gamma));
                let m = tx.cols();
                let rows = tx.rows();
                let mut dx = vec![0.0; tx.numel()];
                let mut dgamma = vec![0.0; m];
                let mut dbeta = vec![0.0; m];
                for i in 0..rows {
                    let row = &tx.data()[i * m..(i + 1) * m];
                    let gr = &g.data()[i * m..(i + 1) * m];
                    let mean = row.iter().sum::<f64>() / m as f64;
                    let var =
                        row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = gr
                        .iter()
                        .zip(tg.data())
                        .map(|(&gv, &gm)| gv * gm)
                        .collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                        dx[i * m + j] = inv / m as f64
                            * (m as f64 * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.accumulate(grads, *x, &dx);
                self.accumulate(grads, *gamma, &dgamma);
                self.accumulate(grads, *beta, &dbeta);
            }

            Op::Dropout { x, mask } => {
                let dx: Vec<f64> = g.data().iter().zip(mask).map(|(a, b)| a * b).collect();
                self.accumulate(grads, *x, &dx);
            }

            Op::NormalizeRows { x } => {
                let tx = self.value(*x);
                let m = tx.cols();
                let rows = tx.rows();
                let out = &self.nodes[node].value;
                let mut dx = vec![0.0; tx.numel()];
                for i in 0..rows {
                    let row = &tx.data()[i * m..(i + 1) * m];
                    let y = &out.data()[i * m..(i + 1) * m];
                    let gr = &g.data()[i * m..(i + 1) * m];
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        dx[i * m + j] = (gr[j] - y[j] * dot) / norm;
                    }
                }
                self.accumulate(grads, *x, &dx);
            }

            Op::Reshape { x } => {
                self.accumulate(grads, *x, g.data());
            }

            Op::SliceCols { x, from } => {
                let tx = self.value(*x);
                let (n, m) = (tx.shape()[0], tx.shape()[1]);
                let w = g.shape()[1];
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    dx[i * m + from..i * m + from + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *x, &dx);
            }
        }
        Ok(())
    }
}

const LN_EPS: f64 = 1e-5;

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - mx).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}
