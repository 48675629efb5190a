use std::collections::HashMap;

use crate::error::{Error, Result};

use super::Link;

/// Lexical translation probabilities `p(f | e)` of IBM Model 1, where `e`
/// is the conditioning side.
#[derive(Clone, Debug)]
pub struct Ibm1Model {
    cond_index: HashMap<String, u32>,
    gen_index: HashMap<String, u32>,
    probs: HashMap<(u32, u32), f64>,
    /// Expected counts per conditioning word from the last E-step.
    totals: Vec<f64>,
    smoothing: f64,
}

#[derive(Clone, Debug)]
pub struct Ibm1Result {
    pub model: Ibm1Model,
    /// Corpus log-likelihood before the first iteration and after each one.
    pub log_likelihoods: Vec<f64>,
    /// Sentence pairs skipped because one side was empty.
    pub skipped: usize,
}

impl Ibm1Model {
    pub fn gen_vocab_size(&self) -> usize {
        self.gen_index.len()
    }

    /// `p(f | e)`. Unseen conditioning words give the uniform distribution;
    /// unseen pairs fall back to the smoothing mass.
    pub fn prob(&self, e: &str, f: &str) -> f64 {
        let vf = self.gen_index.len().max(1) as f64;
        let Some(&ei) = self.cond_index.get(e) else {
            return 1.0 / vf;
        };
        if let Some(&fi) = self.gen_index.get(f) {
            if let Some(&p) = self.probs.get(&(ei, fi)) {
                return p;
            }
        }
        let tot = self.totals.get(ei as usize).copied().unwrap_or(0.0);
        if tot == 0.0 && self.smoothing == 0.0 {
            return 0.0;
        }
        self.smoothing / (tot + self.smoothing * vf)
    }

    fn pair_prob(&self, ei: u32, fi: u32) -> f64 {
        self.probs[&(ei, fi)]
    }
}

fn intern(index: &mut HashMap<String, u32>, w: &str) -> u32 {
    let n = index.len() as u32;
    *index.entry(w.to_string()).or_insert(n)
}

/// Runs `iterations` EM steps of IBM Model 1 for `p(generated | conditioning)`
/// over `(conditioning, generated)` sentence pairs, with add-`smoothing`
/// normalization in the M-step.
pub fn ibm1_em(pairs: &[(Vec<String>, Vec<String>)], iterations: usize, smoothing: f64) -> Result<Ibm1Result> {
    if iterations == 0 {
        return Err(Error::Config("ibm1: iterations must be at least 1".into()));
    }
    if smoothing < 0.0 {
        return Err(Error::Config("ibm1: smoothing must be non-negative".into()));
    }
    let mut cond_index = HashMap::new();
    let mut gen_index = HashMap::new();
    let mut corpus: Vec<(Vec<u32>, Vec<u32>)> = Vec::with_capacity(pairs.len());
    let mut skipped = 0;
    for (e, f) in pairs {
        if e.is_empty() || f.is_empty() {
            skipped += 1;
            continue;
        }
        let ei = e.iter().map(|w| intern(&mut cond_index, w)).collect();
        let fi = f.iter().map(|w| intern(&mut gen_index, w)).collect();
        corpus.push((ei, fi));
    }
    if skipped > 0 {
        log::warn!("ibm1: skipped {skipped} sentence pairs with an empty side");
    }
    if corpus.is_empty() {
        return Err(Error::Input("ibm1: corpus has no nonempty sentence pairs".into()));
    }

    let vf = gen_index.len() as f64;
    let mut probs: HashMap<(u32, u32), f64> = HashMap::new();
    for (e, f) in &corpus {
        for &ei in e {
            for &fi in f {
                probs.insert((ei, fi), 1.0 / vf);
            }
        }
    }
    let mut model = Ibm1Model {
        totals: vec![0.0; cond_index.len()],
        cond_index,
        gen_index,
        probs,
        smoothing,
    };

    let mut log_likelihoods = Vec::with_capacity(iterations + 1);
    for _ in 0..iterations {
        let mut counts: HashMap<(u32, u32), f64> = HashMap::with_capacity(model.probs.len());
        let mut totals = vec![0.0; model.totals.len()];
        let mut ll = 0.0;
        for (e, f) in &corpus {
            let le = e.len() as f64;
            for &fi in f {
                let z: f64 = e.iter().map(|&ei| model.pair_prob(ei, fi)).sum();
                ll += (z / le).ln();
                for &ei in e {
                    let c = model.pair_prob(ei, fi) / z;
                    *counts.entry((ei, fi)).or_insert(0.0) += c;
                    totals[ei as usize] += c;
                }
            }
        }
        log_likelihoods.push(ll);
        for (&(ei, fi), p) in model.probs.iter_mut() {
            let c = counts.get(&(ei, fi)).copied().unwrap_or(0.0);
            *p = (c + smoothing) / (totals[ei as usize] + smoothing * vf);
        }
        model.totals = totals;
    }
    log_likelihoods.push(corpus_log_likelihood(&model, &corpus));
    Ok(Ibm1Result {
        model,
        log_likelihoods,
        skipped,
    })
}

fn corpus_log_likelihood(model: &Ibm1Model, corpus: &[(Vec<u32>, Vec<u32>)]) -> f64 {
    let mut ll = 0.0;
    for (e, f) in corpus {
        let le = e.len() as f64;
        for &fi in f {
            let z: f64 = e.iter().map(|&ei| model.pair_prob(ei, fi)).sum();
            ll += (z / le).ln();
        }
    }
    ll
}

/// Links every generated word to its most probable conditioning word.
/// Returned links are `(conditioning_index, generated_index)`; ties go to the
/// lower conditioning index.
pub fn viterbi_align(model: &Ibm1Model, cond: &[String], generated: &[String]) -> Vec<Link> {
    if cond.is_empty() {
        return Vec::new();
    }
    generated
        .iter()
        .enumerate()
        .map(|(j, f)| {
            let mut best = 0;
            let mut best_p = model.prob(&cond[0], f);
            for (i, e) in cond.iter().enumerate().skip(1) {
                let p = model.prob(e, f);
                if p > best_p {
                    best = i;
                    best_p = p;
                }
            }
            (best, j)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(raw: &[(&str, &str)]) -> Vec<(Vec<String>, Vec<String>)> {
        raw.iter()
            .map(|(e, f)| {
                (
                    e.split_whitespace().map(String::from).collect(),
                    f.split_whitespace().map(String::from).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn single_pair_is_certain() {
        let r = ibm1_em(&pairs(&[("a", "x")]), 1, 0.0).unwrap();
        assert_eq!(r.model.prob("a", "x"), 1.0);
    }

    #[test]
    fn empty_pairs_are_skipped_and_counted() {
        let r = ibm1_em(&pairs(&[("a", "x"), ("", "y"), ("b", "")]), 2, 1e-6).unwrap();
        assert_eq!(r.skipped, 2);
        assert!(ibm1_em(&pairs(&[("", "y")]), 2, 1e-6).is_err());
        assert!(ibm1_em(&pairs(&[("a", "x")]), 0, 1e-6).is_err());
    }

    #[test]
    fn uniform_table_ties_go_to_lower_index() {
        // After initialization only (all co-occurring pairs equal), every
        // target word attaches to source 0.
        let p = pairs(&[("a b c", "x y z")]);
        let r = ibm1_em(&p, 1, 0.0).unwrap();
        let links = viterbi_align(&r.model, &p[0].0, &p[0].1);
        assert_eq!(links, vec![(0, 0), (0, 1), (0, 2)]);
    }

    #[test]
    fn single_word_pair_links_once() {
        let p = pairs(&[("a", "x"), ("a b", "x y")]);
        let r = ibm1_em(&p, 5, 1e-6).unwrap();
        assert_eq!(viterbi_align(&r.model, &p[0].0, &p[0].1), vec![(0, 0)]);
    }

    #[test]
    fn probabilities_normalize_per_conditioning_word() {
        let p = pairs(&[("a b", "x y"), ("b c", "y z"), ("a c", "x z"), ("a", "x")]);
        let r = ibm1_em(&p, 10, 1e-6).unwrap();
        for e in ["a", "b", "c"] {
            let s: f64 = ["x", "y", "z"].iter().map(|f| r.model.prob(e, f)).sum();
            assert!((s - 1.0).abs() < 1e-9, "{e}: {s}");
        }
    }
}
