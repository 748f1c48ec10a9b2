use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

/// Unweighted mean of per-class F1 over the classes that occur among the
/// labels or the predictions.
pub fn macro_f1(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::contract("macro-F1 of an empty split"));
    }
    let classes = predictions.iter().chain(labels).max().copied().unwrap_or(0) + 1;
    let (mut tp, mut fp, mut fneg) = (vec![0usize; classes], vec![0usize; classes], vec![0usize; classes]);
    for (&p, &l) in predictions.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[l] += 1;
        }
    }
    let scores: Vec<f64> = (0..classes)
        .filter(|&c| tp[c] + fp[c] + fneg[c] > 0)
        .map(|c| 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fneg[c]) as f64)
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4 with uniform weights and the brevity penalty
/// `exp(1 - r/c)` when the hypotheses are shorter than the references.
/// Orders for which the hypotheses contain no n-gram at all are left out of
/// the geometric mean.
pub fn corpus_bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::contract(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::contract("BLEU of an empty split"));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    for (h, r) in hypotheses.iter().zip(references) {
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (g, c) in &hc {
                matched[n - 1] += (*c).min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    let c: usize = hypotheses.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..4 {
        if total[n] == 0 {
            continue;
        }
        if matched[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
        orders += 1;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / orders as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_cases() {
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        // Per class: TP 1, FP 1, FN 1, TN 1.
        assert_eq!(macro_f1(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap(), 0.5);
        assert!(macro_f1(&[], &[]).is_err());
        assert!(macro_f1(&[0], &[0, 1]).is_err());
        // Class 1 predicted but absent from labels still counts, with F1 0.
        assert_eq!(macro_f1(&[1, 0], &[0, 0]).unwrap(), (2.0 / 3.0) / 2.0);
    }

    #[test]
    fn bleu_cases() {
        let refs = vec![vec![1, 2, 3, 4, 5], vec![6, 7, 8, 9]];
        assert_eq!(corpus_bleu(&refs, &refs).unwrap(), 1.0);
        assert_eq!(corpus_bleu(&[vec![9, 9]], &[vec![1, 2]]).unwrap(), 0.0);
        assert_eq!(corpus_bleu(&[Vec::<u8>::new()], &[vec![1]]).unwrap(), 0.0);
        assert!(corpus_bleu::<u8>(&[], &[]).is_err());
    }

    #[test]
    fn bleu_hand_computed() {
        // hyp "1 2 3 4" vs ref "1 2 3 5 6": p1 3/4, p2 2/3, p3 1/2, p4 0 -> 0.
        assert_eq!(corpus_bleu(&[vec![1, 2, 3, 4]], &[vec![1, 2, 3, 5, 6]]).unwrap(), 0.0);
        // hyp "1 2 3 4 5" vs ref "1 2 3 4 5 6": precisions 1, bp exp(1 - 6/5).
        let b = corpus_bleu(&[vec![1, 2, 3, 4, 5]], &[vec![1, 2, 3, 4, 5, 6]]).unwrap();
        assert!((b - (1.0f64 - 6.0 / 5.0).exp()).abs() < 1e-15);
    }
}
