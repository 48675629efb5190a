use cst_autodiff::{Graph, Scalar, Tensor};

use super::net::{Ctx, DecoderKind, Depth};
use super::params::ParamStore;
use crate::data::vocab::{EOS, SOS};
use crate::error::{Error, Result};

/// Next-token log-probabilities given a prefix starting with `<s>`.
pub trait StepScorer {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    /// Bonus added per output token, `</s>` included.
    pub length_penalty: f64,
    /// Longest output, `</s>` included.
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Output tokens without `<s>` and `</s>`.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// `log_prob + length_penalty·(|tokens| + 1)`.
    pub score: f64,
}

/// Beam search over `score = log P(y) + β·|y|`. Each step keeps the best
/// `beam` one-token expansions of the live hypotheses (ties broken by lower
/// parent rank, then lower token id); expansions ending in `</s>` retire.
/// At `max_len` only `</s>` may be appended.
pub fn beam_search(scorer: &mut dyn StepScorer, cfg: BeamConfig) -> Result<Hypothesis> {
    if cfg.beam == 0 {
        return Err(Error::Config("beam must be at least 1".into()));
    }
    if cfg.max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![SOS], 0.0)];
    let mut done: Vec<Hypothesis> = Vec::new();
    for step in 0..cfg.max_len {
        let last = step + 1 == cfg.max_len;
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (rank, (prefix, lp)) in live.iter().enumerate() {
            let dist = scorer.next_log_probs(prefix)?;
            if dist.len() <= EOS {
                return Err(Error::Input(format!("scorer returned {} classes", dist.len())));
            }
            for (tok, &l) in dist.iter().enumerate() {
                if (last && tok != EOS) || !l.is_finite() {
                    continue;
                }
                cands.push((rank, tok, lp + l));
            }
        }
        cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        cands.truncate(cfg.beam);
        let mut next = Vec::with_capacity(cands.len());
        for (rank, tok, lp) in cands {
            let prefix = &live[rank].0;
            if tok == EOS {
                let tokens = prefix[1..].to_vec();
                let score = lp + cfg.length_penalty * (tokens.len() + 1) as f64;
                done.push(Hypothesis {
                    tokens,
                    log_prob: lp,
                    score,
                });
            } else {
                let mut p = prefix.clone();
                p.push(tok);
                next.push((p, lp));
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    done.into_iter()
        .reduce(|best, h| {
            if h.score > best.score || (h.score == best.score && h.tokens < best.tokens) {
                h
            } else {
                best
            }
        })
        .ok_or_else(|| Error::NonFinite("beam search produced no finite hypothesis"))
}

/// Argmax decoding, lowest id on ties.
pub fn greedy_search(scorer: &mut dyn StepScorer, length_penalty: f64, max_len: usize) -> Result<Hypothesis> {
    let mut prefix = vec![SOS];
    let mut lp = 0.0;
    for step in 0..max_len.max(1) {
        let dist = scorer.next_log_probs(&prefix)?;
        let tok = if step + 1 == max_len.max(1) {
            EOS
        } else {
            let mut best = 0;
            for (t, &l) in dist.iter().enumerate() {
                if l > dist[best] {
                    best = t;
                }
            }
            best
        };
        lp += dist[tok];
        if tok == EOS {
            break;
        }
        prefix.push(tok);
    }
    let tokens = prefix[1..].to_vec();
    let score = lp + length_penalty * (tokens.len() + 1) as f64;
    Ok(Hypothesis {
        tokens,
        log_prob: lp,
        score,
    })
}

/// Scores prefixes with a decoder attending to fixed encoder states.
pub struct ModelScorer<'a, T: Scalar> {
    params: &'a ParamStore<T>,
    memory: Tensor<T>,
    kind: DecoderKind,
}

impl<'a, T: Scalar> ModelScorer<'a, T> {
    /// Encodes `features` once; the translation decoder reads the top
    /// layer and the transcription decoder the tapped one.
    pub fn new(params: &'a ParamStore<T>, features: &Tensor<T>, kind: DecoderKind) -> Result<Self> {
        let mut ctx = Ctx::new(Graph::new(), params);
        let depth = match kind {
            DecoderKind::St => Depth::Full,
            DecoderKind::Asr => Depth::Asr,
        };
        let enc = ctx.encode_tensor(features, depth)?;
        let mem = enc.hidden_top.unwrap_or(enc.hidden_n);
        let memory = ctx.g.value(mem).clone();
        Ok(ModelScorer { params, memory, kind })
    }

    pub fn encoder_len(&self) -> usize {
        self.memory.shape()[0]
    }
}

impl<T: Scalar> StepScorer for ModelScorer<'_, T> {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut ctx = Ctx::new(Graph::new(), self.params);
        let mem = ctx.constant(self.memory.clone());
        let lp = ctx.decode_forward(self.kind, mem, prefix)?;
        let v = ctx.g.value(lp);
        Ok(v.row(prefix.len() - 1).iter().map(|x| x.to_f64()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed table: next-token distribution depends on the prefix length only.
    struct Table(Vec<Vec<f64>>);

    impl StepScorer for Table {
        fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
            Ok(self.0[(prefix.len() - 1).min(self.0.len() - 1)].iter().map(|p| p.ln()).collect())
        }
    }

    #[test]
    fn forced_sequence() {
        // vocab: unk sos eos a b; certain path "a b </s>"
        let mut t = Table(vec![
            vec![0.0, 0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0, 1.0, 0.0, 0.0],
        ]);
        let cfg = BeamConfig {
            beam: 3,
            length_penalty: 0.0,
            max_len: 10,
        };
        let h = beam_search(&mut t, cfg).unwrap();
        assert_eq!(h.tokens, vec![3, 4]);
        assert_eq!(h.log_prob, 0.0);
    }

    #[test]
    fn max_len_forces_eos() {
        let mut t = Table(vec![vec![0.0, 0.0, 0.1, 0.9, 0.0]]);
        let cfg = BeamConfig {
            beam: 2,
            length_penalty: 0.0,
            max_len: 3,
        };
        // The wider beam finds that stopping at once (ln 0.1) beats any
        // forced-finish continuation.
        assert!(beam_search(&mut t, cfg).unwrap().tokens.is_empty());
        let g = greedy_search(&mut t, 0.0, 3).unwrap();
        assert_eq!(g.tokens, vec![3, 3]);
        let b1 = beam_search(&mut t, BeamConfig { beam: 1, ..cfg }).unwrap();
        assert_eq!(b1, g);
    }

    #[test]
    fn length_penalty_favors_longer_output() {
        // Stopping now has p=0.5; continuing costs ln(0.5) per token.
        let mut t = Table(vec![vec![0.0, 0.0, 0.5, 0.5, 0.0]]);
        let short = beam_search(&mut t, BeamConfig { beam: 4, length_penalty: 0.0, max_len: 4 }).unwrap();
        assert!(short.tokens.is_empty());
        let long = beam_search(&mut t, BeamConfig { beam: 4, length_penalty: 1.0, max_len: 4 }).unwrap();
        assert_eq!(long.tokens, vec![3, 3, 3]);
    }
}
