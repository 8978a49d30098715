//! Layers shared by the graph-embedding model, the fallback contextual
//! encoder and the sequence encoder: linear maps, layer norm, and multi-head
//! self-attention with relative positional scores and no `sqrt(d_k)` scaling.
//!
//! The attention score between positions i and j decomposes as
//! `q_i·k_j + q_i·r_{i-j} + u·k_j + v·r_{i-j}` with a sinusoidal relative
//! embedding `r` and learned global vectors `u`, `v` per head. The two
//! q-terms and the two global terms are folded together, so the forward pass
//! computes `(q+u)·k + (q+v)·r`.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Bound, ParamSet, Tape, Tensor, Var};

/// Fully-connected layer; parameters are `{name}.w` and `{name}.b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn register(&self, params: &mut ParamSet, rng: &mut Rng) {
        params.insert_xavier(format!("{}.w", self.name), self.in_dim, self.out_dim, rng);
        params.insert_zeros(format!("{}.b", self.name), vec![self.out_dim]);
    }

    /// `x: [n, in] -> [n, out]`
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let w = bound.var(&format!("{}.w", self.name));
        let b = bound.var(&format!("{}.b", self.name));
        let xw = tape.matmul(x, w)?;
        tape.add_bias(xw, b)
    }

    /// `x: [in] -> [out]`
    pub fn forward_vec(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let row = tape.reshape(x, vec![1, self.in_dim])?;
        let out = self.forward(tape, bound, row)?;
        tape.reshape(out, vec![self.out_dim])
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm {
            name: name.into(),
            dim,
        }
    }

    pub fn register(&self, params: &mut ParamSet) {
        params.insert(format!("{}.g", self.name), Tensor::vector(vec![1.0; self.dim]));
        params.insert_zeros(format!("{}.b", self.name), vec![self.dim]);
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let g = bound.var(&format!("{}.g", self.name));
        let b = bound.var(&format!("{}.b", self.name));
        tape.layer_norm(x, g, b)
    }
}

/// Sinusoidal embeddings of the pairwise position deltas.
///
/// `positions` must be consecutive integers; the returned table has
/// `2n-1` rows, row `r` embedding the delta `positions[0] - positions[n-1] + r`,
/// which lines up with what `Tape::rel_shift` gathers. Only differences of
/// positions enter, so shifting every position by a constant yields the same
/// table.
pub fn relative_position_table(positions: &[i64], dim: usize) -> Tensor {
    let n = positions.len();
    assert!(n >= 1);
    for w in positions.windows(2) {
        assert_eq!(w[1] - w[0], 1, "positions must be consecutive");
    }
    let lo = positions[0] - positions[n - 1];
    let rows = 2 * n - 1;
    let mut data = vec![0.0; rows * dim];
    for r in 0..rows {
        let delta = (lo + r as i64) as f64;
        for t in 0..dim {
            let rate = 1.0 / 10_000f64.powf(2.0 * (t / 2) as f64 / dim as f64);
            data[r * dim + t] = if t % 2 == 0 {
                (delta * rate).sin()
            } else {
                (delta * rate).cos()
            };
        }
    }
    Tensor::new(vec![rows, dim], data).expect("table shape is consistent")
}

/// Multi-head self-attention with relative positional scores and, by
/// construction, no score scaling.
#[derive(Debug, Clone)]
pub struct RelAttention {
    pub name: String,
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub attn_dropout: f64,
}

impl RelAttention {
    pub fn new(
        name: impl Into<String>,
        heads: usize,
        head_dim: usize,
        attn_dropout: f64,
    ) -> Self {
        RelAttention {
            name: name.into(),
            model_dim: heads * head_dim,
            heads,
            head_dim,
            attn_dropout,
        }
    }

    pub fn register(&self, params: &mut ParamSet, rng: &mut Rng) {
        let d = self.model_dim;
        let inner = self.heads * self.head_dim;
        params.insert_xavier(format!("{}.wq", self.name), d, inner, rng);
        params.insert_xavier(format!("{}.wk", self.name), d, inner, rng);
        params.insert_xavier(format!("{}.wv", self.name), d, inner, rng);
        params.insert_xavier(format!("{}.wo", self.name), inner, d, rng);
        params.insert_zeros(format!("{}.bo", self.name), vec![d]);
        params.insert_gaussian(format!("{}.u", self.name), vec![self.heads, self.head_dim], 0.1, rng);
        params.insert_gaussian(format!("{}.v", self.name), vec![self.heads, self.head_dim], 0.1, rng);
    }

    /// `x: [n, model_dim] -> [n, model_dim]`. When `trace` is given the raw
    /// per-head score matrices (pre-softmax) are appended to it.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        pos_offset: i64,
        trace: Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let n = tape.value(x).shape()[0];
        let dk = self.head_dim;
        let q = tape.matmul(x, bound.var(&format!("{}.wq", self.name)))?;
        let k = tape.matmul(x, bound.var(&format!("{}.wk", self.name)))?;
        let v = tape.matmul(x, bound.var(&format!("{}.wv", self.name)))?;
        let u_all = bound.var(&format!("{}.u", self.name));
        let v_all = bound.var(&format!("{}.v", self.name));

        let positions: Vec<i64> = (0..n as i64).map(|i| pos_offset + i).collect();
        let rel = tape.constant(relative_position_table(&positions, dk));
        let rel_t = tape.transpose(rel)?;

        let mut score_trace = trace;
        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dk, (h + 1) * dk)?;
            let kh = tape.slice_cols(k, h * dk, (h + 1) * dk)?;
            let vh = tape.slice_cols(v, h * dk, (h + 1) * dk)?;
            let uh = tape.select_row(u_all, h)?;
            let vh_glob = tape.select_row(v_all, h)?;

            // (q + u) k^T : content scores plus the global content bias
            let q_u = tape.add_bias(qh, uh)?;
            let kh_t = tape.transpose(kh)?;
            let content = tape.matmul(q_u, kh_t)?;

            // (q + v) r^T gathered by delta: positional scores plus the
            // global positional bias
            let q_v = tape.add_bias(qh, vh_glob)?;
            let pos_raw = tape.matmul(q_v, rel_t)?;
            let pos = tape.rel_shift(pos_raw)?;

            let scores = tape.add(content, pos)?;
            if let Some(t) = score_trace.as_deref_mut() {
                t.push(tape.value(scores).clone());
            }
            let attn = tape.softmax(scores)?;
            let attn = tape.dropout(attn, self.attn_dropout)?;
            head_outputs.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat_cols(&head_outputs)?;
        let out = tape.matmul(merged, bound.var(&format!("{}.wo", self.name)))?;
        tape.add_bias(out, bound.var(&format!("{}.bo", self.name)))
    }
}

/// Pre-norm-free transformer block: attention and feed-forward sublayers,
/// each with residual connection, dropout and layer norm.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub attn: RelAttention,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub fc_dropout: f64,
}

impl TransformerLayer {
    pub fn new(
        name: &str,
        heads: usize,
        head_dim: usize,
        ff_dim: usize,
        attn_dropout: f64,
        fc_dropout: f64,
    ) -> Self {
        let model_dim = heads * head_dim;
        TransformerLayer {
            attn: RelAttention::new(format!("{name}.attn"), heads, head_dim, attn_dropout),
            ff1: Linear::new(format!("{name}.ff1"), model_dim, ff_dim),
            ff2: Linear::new(format!("{name}.ff2"), ff_dim, model_dim),
            norm1: LayerNorm::new(format!("{name}.ln1"), model_dim),
            norm2: LayerNorm::new(format!("{name}.ln2"), model_dim),
            fc_dropout,
        }
    }

    pub fn register(&self, params: &mut ParamSet, rng: &mut Rng) {
        self.attn.register(params, rng);
        self.ff1.register(params, rng);
        self.ff2.register(params, rng);
        self.norm1.register(params);
        self.norm2.register(params);
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        pos_offset: i64,
        trace: Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let attended = self.attn.forward(tape, bound, x, pos_offset, trace)?;
        let attended = tape.dropout(attended, self.fc_dropout)?;
        let res1 = tape.add(x, attended)?;
        let h = self.norm1.forward(tape, bound, res1)?;

        let f = self.ff1.forward(tape, bound, h)?;
        let f = tape.relu(f)?;
        let f = tape.dropout(f, self.fc_dropout)?;
        let f = self.ff2.forward(tape, bound, f)?;
        let f = tape.dropout(f, self.fc_dropout)?;
        let res2 = tape.add(h, f)?;
        self.norm2.forward(tape, bound, res2)
    }
}

/// A stack of identically-shaped transformer layers.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub layers: Vec<TransformerLayer>,
}

impl TransformerStack {
    pub fn new(
        name: &str,
        layers: usize,
        heads: usize,
        head_dim: usize,
        attn_dropout: f64,
        fc_dropout: f64,
    ) -> Self {
        let model_dim = heads * head_dim;
        TransformerStack {
            layers: (0..layers)
                .map(|i| {
                    TransformerLayer::new(
                        &format!("{name}.l{i}"),
                        heads,
                        head_dim,
                        2 * model_dim,
                        attn_dropout,
                        fc_dropout,
                    )
                })
                .collect(),
        }
    }

    pub fn register(&self, params: &mut ParamSet, rng: &mut Rng) {
        for layer in &self.layers {
            layer.register(params, rng);
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, pos_offset: i64) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(tape, bound, h, pos_offset, None)?;
        }
        Ok(h)
    }

    /// Forward pass that also returns every layer's raw attention scores.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        pos_offset: i64,
    ) -> Result<(Var, Vec<Tensor>)> {
        let mut h = x;
        let mut trace = Vec::new();
        for layer in &self.layers {
            h = layer.forward(tape, bound, h, pos_offset, Some(&mut trace))?;
        }
        Ok((h, trace))
    }
}
