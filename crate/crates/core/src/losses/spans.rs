use cst_autodiff::{Scalar, Tensor};
use rand::Rng;

use crate::error::{Error, Result};

/// A source word's frame span and subword tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct WordSpan {
    pub word_index: usize,
    /// First frame, inclusive.
    pub start: usize,
    /// Last frame, inclusive.
    pub end: usize,
    pub tokens: Vec<usize>,
    pub masked: bool,
}

impl WordSpan {
    pub fn from_utterance(spans: &[(usize, usize)], tokens: &[Vec<usize>]) -> Vec<WordSpan> {
        spans
            .iter()
            .zip(tokens)
            .enumerate()
            .map(|(i, (&(s, e), t))| WordSpan {
                word_index: i,
                start: s,
                end: e,
                tokens: t.clone(),
                masked: false,
            })
            .collect()
    }
}

/// Length-normalized distribution over a token list: each occurrence
/// carries `1/n`, so a repeated token accumulates its multiplicity.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTarget {
    pub support: Vec<usize>,
    pub weights: Vec<f64>,
}

impl SoftTarget {
    pub fn from_tokens(tokens: &[usize]) -> Option<SoftTarget> {
        if tokens.is_empty() {
            return None;
        }
        let w = 1.0 / tokens.len() as f64;
        let mut support: Vec<usize> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for &t in tokens {
            match support.iter().position(|&s| s == t) {
                Some(i) => weights[i] += w,
                None => {
                    support.push(t);
                    weights.push(w);
                }
            }
        }
        Some(SoftTarget { support, weights })
    }

    /// `Σ q log q`, the constant part of `KL(q‖p)`.
    pub fn neg_entropy(&self) -> f64 {
        self.weights.iter().map(|&w| w * w.ln()).sum()
    }
}

/// Half-open encoder rows `[⌊s/4⌋, max(⌈e/4⌉, ⌊s/4⌋+1))` for inclusive frames
/// `s..=e`, clamped to `hidden_len`.
pub fn frame_to_hidden_span(s: usize, e: usize, hidden_len: usize) -> Result<(usize, usize)> {
    if s > e {
        return Err(Error::Input(format!("span start {s} after end {e}")));
    }
    let lo = s / 4;
    if lo >= hidden_len {
        return Err(Error::Input(format!(
            "span [{s}, {e}] lies beyond {hidden_len} encoder rows"
        )));
    }
    let hi = e.div_ceil(4).max(lo + 1).min(hidden_len);
    Ok((lo, hi))
}

/// Per-dimension mean over all frames of a `T×F` matrix.
pub fn frame_mean<T: Scalar>(features: &Tensor<T>) -> Vec<T> {
    let (t, f) = (features.shape()[0], features.shape()[1]);
    let mut mean = vec![0.0f64; f];
    for r in 0..t {
        for (m, x) in mean.iter_mut().zip(features.row(r)) {
            *m += x.to_f64();
        }
    }
    mean.iter().map(|&m| T::from_f64(m / t as f64)).collect()
}

/// Masks each word independently with probability `ratio` (at least one
/// word), overwriting its frames with the utterance's per-dimension mean.
pub fn select_and_mask<T: Scalar, R: Rng + ?Sized>(
    features: &Tensor<T>,
    spans: &mut [WordSpan],
    ratio: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if spans.is_empty() {
        return Err(Error::Input("masking an utterance without word spans".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {ratio} outside (0, 1)")));
    }
    for s in spans.iter_mut() {
        s.masked = rng.random_bool(ratio);
    }
    if !spans.iter().any(|s| s.masked) {
        let i = rng.random_range(0..spans.len());
        spans[i].masked = true;
    }
    let mean = frame_mean(features);
    let mut out = features.clone();
    let f = mean.len();
    for s in spans.iter().filter(|s| s.masked) {
        if s.end >= features.shape()[0] {
            return Err(Error::Input(format!("span end {} beyond {} frames", s.end, features.shape()[0])));
        }
        for r in s.start..=s.end {
            out.data_mut()[r * f..(r + 1) * f].copy_from_slice(&mean);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hidden_span_examples() {
        assert_eq!(frame_to_hidden_span(8, 15, 100).unwrap(), (2, 4));
        assert_eq!(frame_to_hidden_span(0, 3, 100).unwrap(), (0, 1));
        assert_eq!(frame_to_hidden_span(4, 4, 100).unwrap(), (1, 2));
        assert_eq!(frame_to_hidden_span(8, 30, 5).unwrap(), (2, 5));
        assert!(frame_to_hidden_span(40, 45, 10).is_err());
    }

    #[test]
    fn soft_target_merges_repeats() {
        let q = SoftTarget::from_tokens(&[5, 6, 5, 7]).unwrap();
        assert_eq!(q.support, vec![5, 6, 7]);
        assert_eq!(q.weights, vec![0.5, 0.25, 0.25]);
        assert!(SoftTarget::from_tokens(&[]).is_none());
    }

    fn spans(n: usize) -> Vec<WordSpan> {
        (0..n)
            .map(|i| WordSpan {
                word_index: i,
                start: 2 * i,
                end: 2 * i + 1,
                tokens: vec![3],
                masked: false,
            })
            .collect()
    }

    #[test]
    fn constant_utterance_is_unchanged() {
        let x = Tensor::filled(&[8, 3], 0.75f32);
        let mut sp = spans(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = select_and_mask(&x, &mut sp, 0.15, &mut rng).unwrap();
        assert_eq!(x, y);
        assert!(sp.iter().any(|s| s.masked));
    }

    #[test]
    fn masked_frames_hold_the_mean() {
        let x = Tensor::new(vec![4, 2], vec![0.0f64, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
        let mut sp = spans(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = select_and_mask(&x, &mut sp, 0.999, &mut rng).unwrap();
        assert!(sp.iter().all(|s| s.masked));
        assert!(y.data().chunks(2).all(|r| r == [3.0, 4.0]));
        assert!(select_and_mask(&x, &mut [], 0.15, &mut rng).is_err());
    }
}
