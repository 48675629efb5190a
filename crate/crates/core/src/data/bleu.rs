//! Corpus-level BLEU with the conventions of `multi-bleu.perl -lc`:
//! lowercased whitespace tokens, clipped n-gram counts, closest-reference
//! brevity penalty and no smoothing.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BleuScore {
    /// BLEU as a percentage.
    pub bleu: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<'a>(words: &'a [String], n: usize) -> HashMap<&'a [String], usize> {
    let mut m = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

/// One reference per hypothesis.
pub fn corpus_bleu(hypotheses: &[String], references: &[String], max_n: usize) -> Result<BleuScore> {
    if hypotheses.is_empty() {
        return Err(Error::Input("BLEU over an empty hypothesis set".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Input(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::Input("max_n must be at least 1".into()));
    }
    let mut correct = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        let (hw, rw) = (words(h), words(r));
        hyp_len += hw.len();
        ref_len += rw.len();
        for n in 1..=max_n {
            let hc = ngram_counts(&hw, n);
            let rc = ngram_counts(&rw, n);
            total[n - 1] += hw.len().saturating_sub(n - 1);
            correct[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    let precisions: Vec<f64> = correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| if t > 0 { c as f64 / t as f64 } else { 0.0 })
        .collect();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        100.0 * brevity_penalty * mean_log.exp()
    };
    Ok(BleuScore {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: &[&str]) -> Vec<String> {
        x.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn identical_corpus_scores_100() {
        let h = s(&["the cat sat on the mat", "A B C D"]);
        let r = s(&["the cat sat on the mat", "a b c d"]);
        assert!((corpus_bleu(&h, &r, 4).unwrap().bleu - 100.0).abs() < 1e-12);
    }

    #[test]
    fn brevity_penalty_case() {
        let b = corpus_bleu(&s(&["a b c d"]), &s(&["a b c d e"]), 4).unwrap();
        assert_eq!(format!("{:.2}", b.bleu), "77.88");
        assert!((b.brevity_penalty - (-0.25f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn no_matching_ngram_gives_zero() {
        let b = corpus_bleu(&s(&["x y z w"]), &s(&["a b c d"]), 4).unwrap();
        assert_eq!(b.bleu, 0.0);
        assert!(corpus_bleu(&[], &[], 4).is_err());
    }
}
