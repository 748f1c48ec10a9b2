use serde::{Deserialize, Serialize};

use super::bpe::encode;
use super::lexer::pretokenize;
use super::vocab::Vocab;
use crate::error::{Error, Result};

/// How much BPE lengthens a corpus relative to its lexeme count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InflationReport {
    /// Mean over samples of `subtokens / lexemes`.
    pub mean_ratio: f64,
    /// Least-squares slope of subtokens regressed on lexemes; `None` when
    /// every sample has the same lexeme count.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    /// `[lexemes, subtokens]` per sample, specials excluded, in corpus order.
    pub pairs: Vec<[usize; 2]>,
}

/// Lexeme and subtoken counts for every sample. Samples without lexemes
/// are listed in `pairs` but excluded from the ratio and the regression.
pub fn inflation_stats<S: AsRef<str>>(corpus: &[S], vocab: &Vocab) -> Result<InflationReport> {
    if corpus.is_empty() {
        return Err(Error::contract("inflation statistics need a non-empty corpus"));
    }
    let pairs: Vec<[usize; 2]> = corpus
        .iter()
        .map(|text| {
            let text = text.as_ref();
            [pretokenize(text).len(), encode(text, vocab, false).len()]
        })
        .collect();

    let used: Vec<(f64, f64)> = pairs
        .iter()
        .filter(|p| p[0] > 0)
        .map(|p| (p[0] as f64, p[1] as f64))
        .collect();
    if used.is_empty() {
        return Err(Error::contract("no sample in the corpus has any lexeme"));
    }
    let n = used.len() as f64;
    let mean_ratio = used.iter().map(|(x, y)| y / x).sum::<f64>() / n;

    let mean_x = used.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = used.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = used.iter().map(|(x, _)| (x - mean_x).powi(2)).sum();
    let sxy: f64 = used.iter().map(|(x, y)| (x - mean_x) * (y - mean_y)).sum();
    let (slope, intercept) = if sxx > 0.0 {
        let slope = sxy / sxx;
        (Some(slope), Some(mean_y - slope * mean_x))
    } else {
        (None, None)
    };

    Ok(InflationReport {
        mean_ratio,
        slope,
        intercept,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::train_bpe;

    #[test]
    fn identity_segmentation_has_unit_ratio_and_slope() {
        let corpus = ["a + b", "a", "b = a + a - b"];
        let vocab = train_bpe(&corpus, 100).unwrap();
        let r = inflation_stats(&corpus, &vocab).unwrap();
        assert_eq!(r.mean_ratio, 1.0);
        assert!((r.slope.unwrap() - 1.0).abs() < 1e-12);
        assert!(r.intercept.unwrap().abs() < 1e-12);
    }

    #[test]
    fn direct_count_ratio() {
        // No merges: "ab" -> 2, "c" -> 1, "de" -> 2 subtokens over 3 lexemes.
        let vocab = train_bpe(&["ab c de"], 11).unwrap();
        assert!(vocab.merges().is_empty());
        let r = inflation_stats(&["ab c de"], &vocab).unwrap();
        assert_eq!(r.pairs, vec![[3, 5]]);
        assert!((r.mean_ratio - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.slope, None);
    }

    #[test]
    fn zero_lexeme_samples_are_excluded() {
        let vocab = train_bpe(&["ab ab"], 100).unwrap();
        let r = inflation_stats(&["", "ab ab", "   "], &vocab).unwrap();
        assert_eq!(r.pairs, vec![[0, 0], [2, 2], [0, 0]]);
        assert_eq!(r.mean_ratio, 1.0);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let vocab = train_bpe(&["ab"], 100).unwrap();
        assert!(inflation_stats::<&str>(&[], &vocab).is_err());
        assert!(inflation_stats(&[""], &vocab).is_err());
    }
}
