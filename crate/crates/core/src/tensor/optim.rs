//! Named parameter sets and the two optimizers used across the toolkit.

use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Ordered collection of named parameter tensors. Iteration order is
/// insertion order, which also fixes the checkpoint blob layout.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name:?}"
        );
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn insert_xavier(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut Rng) {
        self.insert(name, Tensor::xavier(rows, cols, rng));
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn insert_gaussian(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        std: f64,
        rng: &mut Rng,
    ) {
        self.insert(name, Tensor::gaussian(shape, std, rng));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Merge another set under a name prefix (used to embed frozen sub-models).
    pub fn absorb(&mut self, prefix: &str, other: &ParamSet) {
        for (name, t) in other.iter() {
            self.insert(format!("{prefix}{name}"), t.clone());
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// Bias-corrected Adam.
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// Classic momentum: `v = mu*v + g`, `p -= lr*v`.
    SgdMomentum { momentum: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd_momentum(momentum: f64) -> Self {
        OptimizerKind::SgdMomentum { momentum }
    }
}

/// Optimizer with per-parameter moment buffers, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub step_count: u64,
    first_moment: HashMap<String, Vec<f64>>,
    second_moment: HashMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer {
            kind,
            learning_rate,
            step_count: 0,
            first_moment: HashMap::new(),
            second_moment: HashMap::new(),
        }
    }

    /// Apply one update. Every parameter must have a gradient of its own
    /// shape; a missing gradient is an error.
    pub fn step(&mut self, params: &mut ParamSet, grads: &HashMap<String, Tensor>) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count;
        for i in 0..params.len() {
            let name = params.names[i].clone();
            let grad = grads
                .get(&name)
                .ok_or_else(|| Error::Numeric(format!("missing gradient for parameter {name:?}")))?;
            let param = &mut params.tensors[i];
            if grad.shape() != param.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer_step",
                    lhs: param.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            if !grad.all_finite() {
                return Err(Error::NonFinite {
                    op: format!("gradient of {name}"),
                });
            }
            let n = param.numel();
            match self.kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    let v = self
                        .first_moment
                        .entry(name)
                        .or_insert_with(|| vec![0.0; n]);
                    for ((pv, vv), gv) in param
                        .data_mut()
                        .iter_mut()
                        .zip(v.iter_mut())
                        .zip(grad.data())
                    {
                        *vv = momentum * *vv + gv;
                        *pv -= self.learning_rate * *vv;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let m = self
                        .first_moment
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; n]);
                    let v = self
                        .second_moment
                        .entry(name)
                        .or_insert_with(|| vec![0.0; n]);
                    let bc1 = 1.0 - beta1.powi(t as i32);
                    let bc2 = 1.0 - beta2.powi(t as i32);
                    for (((pv, mv), vv), gv) in param
                        .data_mut()
                        .iter_mut()
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                        .zip(grad.data())
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        let m_hat = *mv / bc1;
                        let v_hat = *vv / bc2;
                        *pv -= self.learning_rate * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Moment buffers in a stable order, for checkpointing.
    pub fn state_arrays(&self, params: &ParamSet) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (name, _) in params.iter() {
            if let Some(m) = self.first_moment.get(name) {
                out.push((format!("opt.m1.{name}"), m.clone()));
            }
            if let Some(v) = self.second_moment.get(name) {
                out.push((format!("opt.m2.{name}"), v.clone()));
            }
        }
        out
    }
}
