//! Span-level precision/recall/F1.
//!
//! A predicted span is correct only when start, end and label all match a
//! gold span. Empty denominators evaluate to 0.

use std::collections::HashSet;

use crate::tags::Span;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

/// Merge per-sentence (or per-shard) counts; summation makes parallel and
/// serial evaluation identical.
pub fn prf_from_counts(correct: usize, predicted: usize, gold: usize) -> Prf {
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(correct, predicted);
    let recall = ratio(correct, gold);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf {
        precision,
        recall,
        f1,
        correct,
        predicted,
        gold,
    }
}

/// Exact-match span F1 over aligned sentence lists.
pub fn span_f1(gold: &[Vec<Span>], pred: &[Vec<Span>]) -> Prf {
    assert_eq!(gold.len(), pred.len(), "gold/pred sentence counts differ");
    let mut correct = 0;
    let mut predicted = 0;
    let mut gold_total = 0;
    for (g, p) in gold.iter().zip(pred) {
        let gset: HashSet<&Span> = g.iter().collect();
        correct += p.iter().filter(|s| gset.contains(s)).count();
        predicted += p.len();
        gold_total += g.len();
    }
    prf_from_counts(correct, predicted, gold_total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(start: usize, end: usize, label: &str) -> Span {
        Span {
            start,
            end,
            label: label.to_string(),
        }
    }

    #[test]
    fn identical_nonempty_is_perfect() {
        let gold = vec![vec![span(0, 2, "PER")], vec![span(1, 2, "LOC")]];
        let got = span_f1(&gold, &gold);
        assert_eq!((got.precision, got.recall, got.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn no_predictions_is_all_zero() {
        let gold = vec![vec![span(0, 2, "PER")]];
        let got = span_f1(&gold, &[vec![]]);
        assert_eq!((got.precision, got.recall, got.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn partial_overlap_counts_as_wrong() {
        let gold = vec![vec![span(0, 2, "PER")]];
        let pred = vec![vec![span(0, 1, "PER")]];
        let got = span_f1(&gold, &pred);
        assert_eq!((got.precision, got.recall, got.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn label_must_match() {
        let gold = vec![vec![span(0, 2, "PER")]];
        let pred = vec![vec![span(0, 2, "LOC")]];
        assert_eq!(span_f1(&gold, &pred).f1, 0.0);
    }

    #[test]
    fn symmetric_under_sentence_reordering() {
        let a = vec![span(0, 1, "PER")];
        let b = vec![span(2, 3, "LOC"), span(0, 1, "ORG")];
        let gold = vec![a.clone(), b.clone()];
        let pred = vec![vec![span(0, 1, "PER")], vec![span(2, 3, "LOC")]];
        let direct = span_f1(&gold, &pred);
        let reordered = span_f1(
            &[b, a],
            &[vec![span(2, 3, "LOC")], vec![span(0, 1, "PER")]],
        );
        assert_eq!(direct, reordered);
    }
}
