//! Linear-chain CRF over BIOES tags: forward algorithm in log space,
//! negative log likelihood, and Viterbi decoding.
//!
//! The transition matrix is `(m+2) x (m+2)` with BOS as row `m` and EOS as
//! column `m+1`. Transitions the tag scheme forbids are pinned to `-1e4` and
//! never updated, which keeps the forward recursion branch-free while making
//! invalid paths unreachable in practice.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const PINNED_SCORE: f64 = -1e4;

/// The BIOES label inventory: `O` first, then B/I/E/S per entity type.
#[derive(Debug, Clone)]
pub struct TagSet {
    labels: Vec<String>,
    types: Vec<String>,
    index: HashMap<String, usize>,
}

impl TagSet {
    pub fn new(types: &[String]) -> Self {
        let labels = crate::tags::bioes_tag_list(types);
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        TagSet {
            labels,
            types: types.to_vec(),
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn id(&self, tag: &str) -> Result<usize> {
        self.index
            .get(tag)
            .copied()
            .ok_or_else(|| Error::data(format!("tag {tag:?} not in tag set")))
    }

    pub fn name(&self, id: usize) -> &str {
        &self.labels[id]
    }

    /// Labels without a `HEAD-TYPE` shape (including `O`) behave like
    /// outside tags: fully connectable. That covers unconstrained tag sets
    /// used for plain lattice work.
    fn head_and_type(&self, id: usize) -> (char, &str) {
        let label = &self.labels[id];
        match label.split_once('-') {
            Some((head, ty)) if head.len() == 1 => (head.chars().next().unwrap(), ty),
            _ => ('O', ""),
        }
    }

    /// A tag set with no structural constraints: `m` mutually-reachable tags.
    pub fn unconstrained(m: usize) -> Self {
        let labels: Vec<String> = (0..m).map(|i| format!("T{i}")).collect();
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        TagSet {
            labels,
            types: Vec::new(),
            index,
        }
    }
}

/// Per-sentence emission scores, `[n, m]`.
#[derive(Debug, Clone)]
pub struct TagLattice {
    pub emissions: Tensor,
}

impl TagLattice {
    pub fn new(emissions: Tensor) -> Result<Self> {
        if emissions.shape().len() != 2 {
            return Err(Error::Numeric("lattice emissions must be 2-D".into()));
        }
        Ok(TagLattice { emissions })
    }

    pub fn len(&self) -> usize {
        self.emissions.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tags(&self) -> usize {
        self.emissions.shape()[1]
    }
}

/// Structural transition rules plus BOS/EOS handling for a tag set.
#[derive(Debug, Clone)]
pub struct Crf {
    pub tags: TagSet,
}

impl Crf {
    pub fn new(tags: TagSet) -> Self {
        Crf { tags }
    }

    pub fn m(&self) -> usize {
        self.tags.len()
    }

    pub fn bos(&self) -> usize {
        self.m()
    }

    pub fn eos(&self) -> usize {
        self.m() + 1
    }

    pub fn dim(&self) -> usize {
        self.m() + 2
    }

    /// Scheme rule: after O/E/S (or BOS) only O, B or S may follow; after
    /// B/I only I or E of the same type; EOS is reachable only from O/E/S.
    pub fn allowed(&self, from: usize, to: usize) -> bool {

        if from == self.eos() || to == self.bos() {
            return false;
        }
        if from == self.bos() {
            if to == self.eos() {
                return false;
            }
            let (h, _) = self.tags.head_and_type(to);
            return matches!(h, 'O' | 'B' | 'S');
        }
        let (fh, ft) = self.tags.head_and_type(from);
        if to == self.eos() {
            return matches!(fh, 'O' | 'E' | 'S');
        }
        let (th, tt) = self.tags.head_and_type(to);
        match fh {
            'O' | 'E' | 'S' => matches!(th, 'O' | 'B' | 'S'),
            'B' | 'I' => matches!(th, 'I' | 'E') && ft == tt,
            _ => false,
        }
    }

    /// Fresh transition matrix: zeros with forbidden entries pinned.
    pub fn init_transitions(&self) -> Tensor {
        let d = self.dim();
        let mut data = vec![0.0; d * d];
        for from in 0..d {
            for to in 0..d {
                if !self.allowed(from, to) {
                    data[from * d + to] = PINNED_SCORE;
                }
            }
        }
        Tensor::new(vec![d, d], data).expect("square matrix")
    }

    /// Zero the gradient at every pinned entry so the optimizer never moves
    /// them (their moments stay zero as well).
    pub fn zero_pinned(&self, grad: &mut Tensor) {
        let d = self.dim();
        assert_eq!(grad.shape(), &[d, d]);
        let data = grad.data_mut();
        for from in 0..d {
            for to in 0..d {
                if !self.allowed(from, to) {
                    data[from * d + to] = 0.0;
                }
            }
        }
    }

    pub fn validate_gold(&self, gold: &[usize]) -> Result<()> {
        if gold.is_empty() {
            return Err(Error::data("empty gold sequence"));
        }
        let mut prev = self.bos();
        for (i, &g) in gold.iter().enumerate() {
            if g >= self.m() {
                return Err(Error::data(format!("gold tag id {g} out of range")));
            }
            if !self.allowed(prev, g) {
                return Err(Error::data(format!(
                    "gold transition {} -> {} at token {i} violates the tag scheme",
                    if prev == self.bos() { "BOS" } else { self.tags.name(prev) },
                    self.tags.name(g)
                )));
            }
            prev = g;
        }
        if !self.allowed(prev, self.eos()) {
            return Err(Error::data(format!(
                "gold sequence may not end with {}",
                self.tags.name(prev)
            )));
        }
        Ok(())
    }

    /// log sum over all `m^n` paths of `exp(path score)`, by the forward
    /// recursion in log space.
    pub fn log_partition(&self, lattice: &TagLattice, trans: &Tensor) -> f64 {
        let (n, m, d) = (lattice.len(), self.m(), self.dim());
        assert!(n >= 1);
        assert_eq!(lattice.tags(), m);
        let e = &lattice.emissions;
        let t = trans.data();
        let mut alpha: Vec<f64> = (0..m)
            .map(|j| e.at2(0, j) + t[self.bos() * d + j])
            .collect();
        let mut next = vec![0.0; m];
        for step in 1..n {
            for (j, slot) in next.iter_mut().enumerate() {
                *slot = log_sum_exp((0..m).map(|i| alpha[i] + t[i * d + j])) + e.at2(step, j);
            }
            std::mem::swap(&mut alpha, &mut next);
        }
        log_sum_exp((0..m).map(|i| alpha[i] + t[i * d + self.eos()]))
    }

    /// Score of one complete path including BOS/EOS transitions.
    pub fn path_score(&self, lattice: &TagLattice, trans: &Tensor, path: &[usize]) -> f64 {
        assert_eq!(path.len(), lattice.len());
        let d = self.dim();
        let t = trans.data();
        let mut score = t[self.bos() * d + path[0]];
        for (step, &tag) in path.iter().enumerate() {
            score += lattice.emissions.at2(step, tag);
            if step + 1 < path.len() {
                score += t[tag * d + path[step + 1]];
            }
        }
        score + t[path[path.len() - 1] * d + self.eos()]
    }

    /// Negative log likelihood of the gold path; non-negative up to rounding.
    pub fn nll(&self, lattice: &TagLattice, trans: &Tensor, gold: &[usize]) -> Result<f64> {
        self.validate_gold(gold)?;
        Ok(self.log_partition(lattice, trans) - self.path_score(lattice, trans, gold))
    }

    /// Highest-scoring path; score ties break toward the lower label index
    /// at each backtrack step.
    pub fn viterbi(&self, lattice: &TagLattice, trans: &Tensor) -> Vec<usize> {
        let (n, m, d) = (lattice.len(), self.m(), self.dim());
        assert!(n >= 1);
        let e = &lattice.emissions;
        let t = trans.data();
        let mut delta: Vec<f64> = (0..m)
            .map(|j| e.at2(0, j) + t[self.bos() * d + j])
            .collect();
        let mut back: Vec<Vec<usize>> = Vec::with_capacity(n.saturating_sub(1));
        for step in 1..n {
            let mut next = vec![f64::NEG_INFINITY; m];
            let mut arg = vec![0usize; m];
            for j in 0..m {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for i in 0..m {
                    let s = delta[i] + t[i * d + j];
                    if s > best {
                        best = s;
                        best_i = i;
                    }
                }
                next[j] = best + e.at2(step, j);
                arg[j] = best_i;
            }
            back.push(arg);
            delta = next;
        }
        let mut best = f64::NEG_INFINITY;
        let mut last = 0usize;
        for j in 0..m {
            let s = delta[j] + t[j * d + self.eos()];
            if s > best {
                best = s;
                last = j;
            }
        }
        let mut path = vec![last];
        for arg in back.iter().rev() {
            last = arg[last];
            path.push(last);
        }
        path.reverse();
        path
    }

    /// The training loss on the tape: same recursion built from
    /// differentiable ops, so gradients flow to emissions and transitions.
    pub fn nll_on_tape(
        &self,
        tape: &mut Tape,
        trans: Var,
        emissions: Var,
        gold: &[usize],
    ) -> Result<Var> {
        self.validate_gold(gold)?;
        let (m, d) = (self.m(), self.dim());
        let n = tape.value(emissions).shape()[0];
        assert_eq!(gold.len(), n);

        let tag_rows: Vec<usize> = (0..m).collect();
        let trans_rows = tape.select_rows(trans, &tag_rows)?; // [m, d]
        let trans_block = tape.slice_cols(trans_rows, 0, m)?; // [m, m]
        let eos_col = tape.slice_cols(trans_rows, self.eos(), self.eos() + 1)?;
        let eos_vec = tape.reshape(eos_col, vec![m])?;
        let bos_row = tape.select_row(trans, self.bos())?; // [d]
        let bos_mat = tape.reshape(bos_row, vec![1, d])?;
        let bos_block = tape.slice_cols(bos_mat, 0, m)?;
        let bos_vec = tape.reshape(bos_block, vec![m])?;

        let e0 = tape.select_row(emissions, 0)?;
        let mut alpha = tape.add(e0, bos_vec)?;
        for step in 1..n {
            let prev = tape.repeat_col(alpha, m)?; // [m, m], entry (i, j) = alpha[i]
            let summed = tape.add(prev, trans_block)?;
            let reduced = tape.lse_cols(summed)?;
            let e_t = tape.select_row(emissions, step)?;
            alpha = tape.add(reduced, e_t)?;
        }
        let final_scores = tape.add(alpha, eos_vec)?;
        let log_z = tape.lse_all(final_scores)?;

        // gold path score: per-step emission and transition picks
        let trans_flat = tape.reshape(trans, vec![d * d])?;
        let mut picks = Vec::with_capacity(2 * n + 1);
        picks.push(tape.index(trans_flat, self.bos() * d + gold[0])?);
        for (step, &g) in gold.iter().enumerate() {
            let row = tape.select_row(emissions, step)?;
            picks.push(tape.index(row, g)?);
            if step + 1 < n {
                picks.push(tape.index(trans_flat, g * d + gold[step + 1])?);
            }
        }
        picks.push(tape.index(trans_flat, gold[n - 1] * d + self.eos())?);
        let stacked = tape.concat(&picks)?;
        let gold_score = tape.sum_all(stacked)?;
        tape.sub(log_z, gold_score)
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = values.collect();
    let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + vals.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

/// Every complete path over a small lattice, with its score: the exhaustive
/// oracle the recursions are checked against.
pub fn enumerate_paths(crf: &Crf, lattice: &TagLattice, trans: &Tensor) -> Vec<(Vec<usize>, f64)> {
    let (n, m) = (lattice.len(), crf.m());
    let total = m.pow(n as u32);
    let mut out = Vec::with_capacity(total);
    for code in 0..total {
        let mut path = Vec::with_capacity(n);
        let mut rest = code;
        for _ in 0..n {
            path.push(rest % m);
            rest /= m;
        }
        let score = crf.path_score(lattice, trans, &path);
        out.push((path, score));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_type_tagset() -> TagSet {
        TagSet::new(&["LOC".to_string(), "PER".to_string()])
    }

    #[test]
    fn transition_rules() {
        let crf = Crf::new(two_type_tagset());
        let id = |t: &str| crf.tags.id(t).unwrap();
        assert!(crf.allowed(id("O"), id("B-LOC")));
        assert!(crf.allowed(id("B-LOC"), id("I-LOC")));
        assert!(crf.allowed(id("B-LOC"), id("E-LOC")));
        assert!(!crf.allowed(id("O"), id("I-LOC")));
        assert!(!crf.allowed(id("B-LOC"), id("I-PER")));
        assert!(!crf.allowed(id("B-LOC"), id("O")));
        assert!(crf.allowed(crf.bos(), id("S-PER")));
        assert!(!crf.allowed(crf.bos(), id("E-PER")));
        assert!(crf.allowed(id("S-PER"), crf.eos()));
        assert!(!crf.allowed(id("I-LOC"), crf.eos()));
    }

    fn uniform_crf(m: usize) -> (Crf, Tensor) {
        let crf = Crf::new(TagSet::unconstrained(m));
        let trans = Tensor::zeros(vec![m + 2, m + 2]);
        (crf, trans)
    }

    #[test]
    fn uniform_lattice_partition_is_ln_paths() {
        let (crf, trans) = uniform_crf(3);
        let lattice = TagLattice::new(Tensor::zeros(vec![2, 3])).unwrap();
        let z = crf.log_partition(&lattice, &trans);
        assert!((z - 9.0f64.ln()).abs() < 1e-12, "{z}");
    }

    #[test]
    fn single_token_partition_is_lse_of_emissions() {
        let (crf, trans) = uniform_crf(2);
        let lattice =
            TagLattice::new(Tensor::matrix(1, 2, vec![1.5, -0.5]).unwrap()).unwrap();
        let z = crf.log_partition(&lattice, &trans);
        let want = (1.5f64.exp() + (-0.5f64).exp()).ln();
        assert!((z - want).abs() < 1e-12);
    }

    #[test]
    fn partition_matches_enumeration() {
        let (crf, mut trans) = uniform_crf(3);
        let mut rng = crate::rng::Rng::new(17);
        for v in trans.data_mut() {
            *v = rng.normal(0.0, 1.0);
        }
        let e: Vec<f64> = (0..4 * 3).map(|_| rng.normal(0.0, 1.0)).collect();
        let lattice = TagLattice::new(Tensor::matrix(4, 3, e).unwrap()).unwrap();
        let z = crf.log_partition(&lattice, &trans);
        let brute = log_sum_exp(
            enumerate_paths(&crf, &lattice, &trans)
                .into_iter()
                .map(|(_, s)| s),
        );
        assert!((z - brute).abs() < 1e-9, "{z} vs {brute}");
    }

    #[test]
    fn uniform_nll_is_ln_paths() {
        let (crf, trans) = uniform_crf(3);
        let lattice = TagLattice::new(Tensor::zeros(vec![2, 3])).unwrap();
        let loss = crf.nll(&lattice, &trans, &[0, 1]).unwrap();
        assert!((loss - 9.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dominant_gold_path_has_near_zero_loss() {
        let (crf, trans) = uniform_crf(2);
        let mut e = Tensor::zeros(vec![3, 2]);
        for step in 0..3 {
            e.data_mut()[step * 2] = 100.0;
        }
        let lattice = TagLattice::new(e).unwrap();
        let loss = crf.nll(&lattice, &trans, &[0, 0, 0]).unwrap();
        assert!(loss >= -1e-9);
        assert!(loss < 1e-9, "{loss}");
    }

    #[test]
    fn viterbi_zero_transitions_is_per_token_argmax() {
        let (crf, trans) = uniform_crf(3);
        let lattice = TagLattice::new(
            Tensor::matrix(2, 3, vec![0.1, 0.9, 0.0, 0.7, 0.2, 0.1]).unwrap(),
        )
        .unwrap();
        assert_eq!(crf.viterbi(&lattice, &trans), vec![1, 0]);
    }

    #[test]
    fn viterbi_avoids_forbidden_transition_and_breaks_ties_low() {
        let (crf, mut trans) = uniform_crf(2);
        // transition 0 -> 1 heavily penalized
        trans.data_mut()[1] = -100.0;
        let lattice =
            TagLattice::new(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        // paths: [0,0]=1, [0,1]=-98, [1,0]=0, [1,1]=1; tie between [0,0] and [1,1]
        assert_eq!(crf.viterbi(&lattice, &trans), vec![0, 0]);
    }

    #[test]
    fn viterbi_score_equals_brute_force_max() {
        let mut rng = crate::rng::Rng::new(23);
        for _ in 0..20 {
            let n = 1 + rng.below(5);
            let m = 2 + rng.below(3);
            let (crf, mut trans) = uniform_crf(m);
            for v in trans.data_mut() {
                *v = rng.normal(0.0, 1.0);
            }
            let e: Vec<f64> = (0..n * m).map(|_| rng.normal(0.0, 1.0)).collect();
            let lattice = TagLattice::new(Tensor::matrix(n, m, e).unwrap()).unwrap();
            let path = crf.viterbi(&lattice, &trans);
            let got = crf.path_score(&lattice, &trans, &path);
            let best = enumerate_paths(&crf, &lattice, &trans)
                .into_iter()
                .map(|(_, s)| s)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((got - best).abs() < 1e-9);
        }
    }

    #[test]
    fn gold_violating_scheme_is_an_error() {
        let crf = Crf::new(two_type_tagset());
        let o = crf.tags.id("O").unwrap();
        let i_loc = crf.tags.id("I-LOC").unwrap();
        assert!(crf.validate_gold(&[o, i_loc]).is_err());
    }

    #[test]
    fn tape_nll_matches_pure_nll() {
        let (crf, mut trans) = uniform_crf(3);
        let mut rng = crate::rng::Rng::new(31);
        for v in trans.data_mut() {
            *v = rng.normal(0.0, 0.5);
        }
        let e: Vec<f64> = (0..5 * 3).map(|_| rng.normal(0.0, 1.0)).collect();
        let emissions = Tensor::matrix(5, 3, e).unwrap();
        let gold = vec![0, 2, 1, 1, 0];
        let pure = crf
            .nll(&TagLattice::new(emissions.clone()).unwrap(), &trans, &gold)
            .unwrap();

        let mut tape = Tape::new(0, false);
        let t_var = tape.leaf(trans.clone().with_grad());
        let e_var = tape.leaf(emissions.with_grad());
        let loss = crf.nll_on_tape(&mut tape, t_var, e_var, &gold).unwrap();
        assert!((tape.value(loss).scalar_value() - pure).abs() < 1e-10);
        // gradient flows to both emissions and transitions
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(e_var).unwrap().data().iter().any(|&g| g != 0.0));
        assert!(grads.get(t_var).unwrap().data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn pinned_transitions_keep_decodes_structurally_valid() {
        let types: Vec<String> = ["LOC", "PER"].iter().map(|s| s.to_string()).collect();
        let crf = Crf::new(TagSet::new(&types));
        let mut rng = crate::rng::Rng::new(61);
        let mut trans = crf.init_transitions();
        // jitter only the allowed entries, as training would
        let d = crf.dim();
        for from in 0..d {
            for to in 0..d {
                if crf.allowed(from, to) {
                    trans.data_mut()[from * d + to] = rng.normal(0.0, 2.0);
                }
            }
        }
        for _ in 0..50 {
            let n = 1 + rng.below(8);
            let m = crf.m();
            let e: Vec<f64> = (0..n * m).map(|_| rng.normal(0.0, 3.0)).collect();
            let lattice = TagLattice::new(Tensor::matrix(n, m, e).unwrap()).unwrap();
            let path = crf.viterbi(&lattice, &trans);
            crf.validate_gold(&path).expect("decoded path crossed a pinned transition");
        }
    }

    #[test]
    fn path_probabilities_sum_to_one() {
        let (crf, mut trans) = uniform_crf(2);
        let mut rng = crate::rng::Rng::new(41);
        for v in trans.data_mut() {
            *v = rng.normal(0.0, 1.0);
        }
        let e: Vec<f64> = (0..3 * 2).map(|_| rng.normal(0.0, 1.0)).collect();
        let lattice = TagLattice::new(Tensor::matrix(3, 2, e).unwrap()).unwrap();
        let z = crf.log_partition(&lattice, &trans);
        let total: f64 = enumerate_paths(&crf, &lattice, &trans)
            .into_iter()
            .map(|(_, s)| (s - z).exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-8, "{total}");
    }
}
