//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use cst_core::losses::ctc_forward_backward;
use cst_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Probability of every collapsed label sequence, summed over all
/// `classes^frames` alignments.
pub fn brute_force_ctc(logits: &[f64], frames: usize, classes: usize, blank: usize) -> BTreeMap<Vec<usize>, f64> {
    let probs: Vec<f64> = (0..frames)
        .flat_map(|t| {
            let row = &logits[t * classes..(t + 1) * classes];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            row.iter().map(move |x| x.exp() / z).collect::<Vec<_>>()
        })
        .collect();
    let mut out = BTreeMap::new();
    let mut path = vec![0usize; frames];
    loop {
        let mut p = 1.0;
        for (t, &k) in path.iter().enumerate() {
            p *= probs[t * classes + k];
        }
        let mut label = Vec::new();
        let mut prev = None;
        for &k in &path {
            if Some(k) != prev && k != blank {
                label.push(k);
            }
            prev = Some(k);
        }
        *out.entry(label).or_insert(0.0) += p;
        // odometer increment
        let mut i = 0;
        loop {
            if i == frames {
                return out;
            }
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

fn all_labels(symbols: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut layer = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for l in &layer {
            for s in 0..symbols {
                let mut m: Vec<usize> = l.clone();
                m.push(s);
                next.push(m);
            }
        }
        out.extend(next.iter().cloned());
        layer = next;
    }
    out
}

pub struct CtcGridReport {
    pub compared: usize,
    pub max_abs_err: f64,
    pub infeasible: usize,
}

/// Every `frames ≤ max_frames`, label vocabulary of `1..=max_symbols`
/// non-blank symbols (blank last) and label length `≤ max_label`, with
/// random logits. Infeasible labels must be reported as such and have zero
/// brute-force mass.
pub fn ctc_grid(max_frames: usize, max_label: usize, max_symbols: usize, seed: u64) -> CtcGridReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CtcGridReport { compared: 0, max_abs_err: 0.0, infeasible: 0 };
    for symbols in 1..=max_symbols {
        let classes = symbols + 1;
        let blank = symbols;
        for frames in 1..=max_frames {
            let logits: Vec<f64> = (0..frames * classes).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mass = brute_force_ctc(&logits, frames, classes, blank);
            for label in all_labels(symbols, max_label) {
                let p = mass.get(&label).copied().unwrap_or(0.0);
                match ctc_forward_backward(&logits, frames, classes, &label, blank) {
                    Ok((nll, _)) => {
                        let err = (nll - (-p.ln())).abs();
                        report.max_abs_err = report.max_abs_err.max(if err.is_nan() { f64::INFINITY } else { err });
                        report.compared += 1;
                    }
                    Err(Error::CtcInfeasible { .. }) => {
                        assert_eq!(p, 0.0, "label {label:?} reported infeasible in {frames} frames");
                        report.infeasible += 1;
                    }
                    Err(e) => panic!("unexpected error {e}"),
                }
            }
        }
    }
    report
}

fn ngrams(tokens: &[String], n: usize) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for i in 0..(tokens.len() + 1).saturating_sub(n) {
        *m.entry(tokens[i..i + n].join("\u{1}")).or_insert(0) += 1;
    }
    m
}

/// Corpus BLEU in the manner of `multi-bleu.perl -lc` with one reference.
pub fn reference_bleu(hyps: &[&str], refs: &[&str]) -> f64 {
    let mut matched = [0usize; 4];
    let mut guessed = [0usize; 4];
    let mut c = 0usize;
    let mut r = 0usize;
    for (h, rf) in hyps.iter().zip(refs) {
        let h: Vec<String> = h.to_lowercase().split_whitespace().map(String::from).collect();
        let rf: Vec<String> = rf.to_lowercase().split_whitespace().map(String::from).collect();
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let hg = ngrams(&h, n);
            let rg = ngrams(&rf, n);
            for (g, k) in &hg {
                guessed[n - 1] += k;
                matched[n - 1] += (*k).min(rg.get(g).copied().unwrap_or(0));
            }
        }
    }
    if matched.contains(&0) {
        return 0.0;
    }
    let log_p: f64 = (0..4).map(|i| (matched[i] as f64 / guessed[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    100.0 * bp * log_p.exp()
}
