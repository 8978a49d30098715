//! Label-attention sentence representation.
//!
//! Cosine similarity between projected token vectors and learned tag-label
//! embeddings is the compatibility function; a convolution down the token
//! axis (one shared kernel, one bias per label) captures label behavior over
//! neighboring words; per-token max over labels then softmax over tokens
//! gives attention weights, and the sentence vector is the weighted sum of
//! the token vectors.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Bound, ParamSet, Tape, Var};

#[derive(Debug, Clone)]
pub struct SentenceAttention {
    pub name: String,
    /// Projection dimension d shared by token vectors and label embeddings.
    pub dim: usize,
    /// Number of tag labels m.
    pub labels: usize,
    /// Half-window k; the convolution kernel covers 2k+1 tokens.
    pub kernel: usize,
}

impl SentenceAttention {
    pub fn new(name: impl Into<String>, dim: usize, labels: usize, kernel: usize) -> Self {
        SentenceAttention {
            name: name.into(),
            dim,
            labels,
            kernel,
        }
    }

    pub fn register(&self, params: &mut ParamSet, rng: &mut Rng) {
        params.insert_gaussian(
            format!("{}.labels", self.name),
            vec![self.labels, self.dim],
            0.1,
            rng,
        );
        params.insert_gaussian(
            format!("{}.conv.w", self.name),
            vec![2 * self.kernel + 1],
            0.1,
            rng,
        );
        params.insert_zeros(format!("{}.conv.b", self.name), vec![self.labels]);
    }

    /// `tokens: [n, d]` -> sentence vector `[d]` plus the attention weights
    /// `[n]`. Boundary windows are zero-padded.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, tokens: Var) -> Result<(Var, Var)> {
        let n = tape.value(tokens).shape()[0];
        let labels = bound.var(&format!("{}.labels", self.name));
        let tokens_unit = tape.normalize_rows(tokens)?;
        let labels_unit = tape.normalize_rows(labels)?;
        let labels_t = tape.transpose(labels_unit)?;
        let simi = tape.matmul(tokens_unit, labels_t)?;
        let conv = tape.conv_rows(
            simi,
            bound.var(&format!("{}.conv.w", self.name)),
            bound.var(&format!("{}.conv.b", self.name)),
        )?;
        let scores = tape.max_axis1(conv)?;
        let alpha = tape.softmax(scores)?;
        let alpha_row = tape.reshape(alpha, vec![1, n])?;
        let s = tape.matmul(alpha_row, tokens)?;
        let s = tape.reshape(s, vec![self.dim])?;
        Ok((s, alpha))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn setup(kernel: usize, seed: u64) -> (SentenceAttention, ParamSet) {
        let layer = SentenceAttention::new("sent", 4, 3, kernel);
        let mut params = ParamSet::new();
        let mut rng = Rng::new(seed);
        layer.register(&mut params, &mut rng);
        (layer, params)
    }

    #[test]
    fn singleton_sentence_is_its_own_vector() {
        let (layer, params) = setup(1, 1);
        let mut tape = Tape::new(0, false);
        let bound = tape.bind(&params);
        let c = tape.constant(Tensor::matrix(1, 4, vec![0.5, -1.0, 2.0, 0.25]).unwrap());
        let (s, alpha) = layer.forward(&mut tape, &bound, c).unwrap();
        assert_eq!(tape.value(alpha).data(), &[1.0]);
        assert_eq!(tape.value(s).data(), &[0.5, -1.0, 2.0, 0.25]);
    }

    #[test]
    fn identical_rows_and_symmetric_kernel_average() {
        let (layer, mut params) = setup(1, 2);
        // symmetric kernel w[0] == w[2]
        *params.get_mut("sent.conv.w").unwrap() = Tensor::vector(vec![0.3, 1.1, 0.3]);
        let mut tape = Tape::new(0, false);
        let bound = tape.bind(&params);
        let row = vec![1.0, 0.0, -1.0, 0.5];
        let mut data = row.clone();
        data.extend_from_slice(&row);
        let c = tape.constant(Tensor::matrix(2, 4, data).unwrap());
        let (s, alpha) = layer.forward(&mut tape, &bound, c).unwrap();
        let a = tape.value(alpha).data();
        assert!((a[0] - 0.5).abs() < 1e-12 && (a[1] - 0.5).abs() < 1e-12);
        for (got, want) in tape.value(s).data().iter().zip(&row) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_sum_to_one() {
        let (layer, params) = setup(2, 3);
        let mut tape = Tape::new(0, false);
        let bound = tape.bind(&params);
        let mut rng = Rng::new(9);
        let data: Vec<f64> = (0..5 * 4).map(|_| rng.normal(0.0, 1.0)).collect();
        let c = tape.constant(Tensor::matrix(5, 4, data).unwrap());
        let (_, alpha) = layer.forward(&mut tape, &bound, c).unwrap();
        let sum: f64 = tape.value(alpha).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_rows_get_zero_similarity() {
        let (layer, params) = setup(1, 4);
        let mut tape = Tape::new(0, false);
        let bound = tape.bind(&params);
        let c = tape.constant(Tensor::matrix(2, 4, vec![0.0; 8]).unwrap());
        // must not error or produce NaN; similarity rows are all zero
        let (s, alpha) = layer.forward(&mut tape, &bound, c).unwrap();
        assert!(tape.value(alpha).data().iter().all(|w| w.is_finite()));
        assert_eq!(tape.value(s).data(), &[0.0, 0.0, 0.0, 0.0]);
    }
}
