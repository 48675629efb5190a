//! Synthetic speech-translation corpus with known ground truth.
//!
//! Source words are strings of one or two "syllables" (the subword units).
//! Sentences come from a sparse first-order Markov chain over words, so a
//! masked word is partly predictable from its neighbours. Every word owns a
//! random prototype vector; each occurrence spans 4–8 frames of that
//! prototype plus Gaussian noise. Targets translate word by word through a
//! fixed bijection; with `reorder` a "modifier" word is moved after the word
//! that follows it, a deterministic local swap.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use cst_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, Utterance};
use super::vocab::Vocab;
use crate::align::pharaoh;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    /// Training utterances.
    pub n_utts: usize,
    /// Development utterances; all of them carry translations.
    pub n_dev: usize,
    /// Source and target word inventory size.
    pub vocab_size: usize,
    /// Inclusive range of frames per word.
    pub span_len: (usize, usize),
    pub noise: f64,
    pub reorder: bool,
    pub feat_dim: usize,
    /// Inclusive range of words per sentence.
    pub words_per_utt: (usize, usize),
    /// Fraction of training utterances emitted without a translation.
    pub asr_only_fraction: f64,
    /// Successors per word in the sentence Markov chain.
    pub branching: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            n_utts: 200,
            n_dev: 0,
            vocab_size: 20,
            span_len: (4, 8),
            noise: 0.1,
            reorder: true,
            feat_dim: 20,
            words_per_utt: (3, 7),
            asr_only_fraction: 0.0,
            branching: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    /// Subword inventory of the source side.
    pub src_vocab: Vocab,
    pub src_words: Vec<String>,
    pub tgt_words: Vec<String>,
    /// Generator's word translation table.
    pub gold_lexicon: BTreeMap<String, String>,
    /// `(src_index, tgt_index)` links per utterance id, for every utterance
    /// that has a translation.
    pub gold_alignments: BTreeMap<String, Vec<(usize, usize)>>,
}

const SRC_ONSETS: &str = "bdgklmnprst";
const TGT_ONSETS: &str = "cfhjvwyz";
const VOWELS: &str = "aeiou";

fn syllables(onsets: &str) -> Vec<String> {
    onsets
        .chars()
        .flat_map(|c| VOWELS.chars().map(move |v| format!("{c}{v}")))
        .collect()
}

impl SynthConfig {
    fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        let s = syllables(SRC_ONSETS).len();
        if self.vocab_size > s * s {
            return bad("vocab_size too large for the syllable inventory");
        }
        if self.span_len.0 == 0 || self.span_len.0 > self.span_len.1 {
            return bad("span_len must be a nonempty range of positive lengths");
        }
        if self.words_per_utt.0 == 0 || self.words_per_utt.0 > self.words_per_utt.1 {
            return bad("words_per_utt must be a nonempty range of positive counts");
        }
        if self.feat_dim == 0 || self.noise < 0.0 || !(0.0..=1.0).contains(&self.asr_only_fraction) {
            return bad("feat_dim > 0, noise >= 0 and asr_only_fraction in [0, 1] required");
        }
        if self.branching == 0 {
            return bad("branching must be positive");
        }
        Ok(())
    }
}

pub fn synth_corpus(config: &SynthConfig) -> Result<SynthCorpus> {
    config.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k = config.vocab_size;

    // Source words from a random syllable subset.
    let mut pool = syllables(SRC_ONSETS);
    pool.shuffle(&mut rng);
    // About two thirds of the words are a single syllable, the rest two.
    let n_syl = (2 * k).div_ceil(3).min(pool.len());
    let syl: Vec<String> = pool[..n_syl].to_vec();
    let mut src_vocab = Vocab::new();
    for s in &syl {
        src_vocab.insert(s);
    }
    let mut pairs: Vec<Vec<usize>> = Vec::new();
    for i in 0..n_syl {
        for j in 0..n_syl {
            pairs.push(vec![i, j]);
        }
    }
    pairs.shuffle(&mut rng);
    let mut shapes: Vec<Vec<usize>> = (0..n_syl).map(|i| vec![i]).collect();
    shapes.extend(pairs.into_iter().take(k.saturating_sub(n_syl)));
    shapes.shuffle(&mut rng);
    let src_words: Vec<String> = shapes
        .iter()
        .map(|sh| sh.iter().map(|&i| syl[i].as_str()).collect())
        .collect();
    let word_tokens: Vec<Vec<usize>> = shapes
        .iter()
        .map(|sh| sh.iter().map(|&i| src_vocab.id(&syl[i]).unwrap()).collect())
        .collect();

    // Target words: distinct two- or three-syllable strings.
    let tsyl = syllables(TGT_ONSETS);
    let mut seen = HashSet::new();
    let mut tgt_words = Vec::with_capacity(k);
    while tgt_words.len() < k {
        let n = rng.random_range(2..=3);
        let w: String = (0..n).map(|_| tsyl[rng.random_range(0..tsyl.len())].as_str()).collect();
        if seen.insert(w.clone()) {
            tgt_words.push(w);
        }
    }

    let successors: Vec<Vec<usize>> = (0..k)
        .map(|w| {
            let mut all: Vec<usize> = (0..k).filter(|&v| v != w || k == 1).collect();
            all.shuffle(&mut rng);
            all.truncate(config.branching.min(k));
            all
        })
        .collect();
    let n_mod = if config.reorder { k / 4 } else { 0 };
    let is_modifier = |w: usize| w < n_mod;

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let prototypes: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..config.feat_dim).map(|_| normal.sample(&mut rng)).collect())
        .collect();

    let mut gold_alignments = BTreeMap::new();
    let mut make = |rng: &mut ChaCha8Rng, id: String, with_tgt: bool| -> Utterance {
        let len = rng.random_range(config.words_per_utt.0..=config.words_per_utt.1);
        let mut sent = vec![rng.random_range(0..k)];
        while sent.len() < len {
            let prev = *sent.last().unwrap();
            let next = successors[prev][rng.random_range(0..successors[prev].len())];
            sent.push(next);
        }
        let mut frames: Vec<f32> = Vec::new();
        let mut spans = Vec::with_capacity(len);
        let mut t = 0;
        for &w in &sent {
            let span = rng.random_range(config.span_len.0..=config.span_len.1);
            for _ in 0..span {
                for &p in &prototypes[w] {
                    let noise = if config.noise > 0.0 { config.noise * normal.sample(rng) } else { 0.0 };
                    frames.push((p + noise) as f32);
                }
            }
            spans.push((t, t + span - 1));
            t += span;
        }
        // Target order with modifier swaps.
        let mut order = Vec::with_capacity(len);
        let mut i = 0;
        while i < len {
            if i + 1 < len && is_modifier(sent[i]) && !is_modifier(sent[i + 1]) {
                order.push(i + 1);
                order.push(i);
                i += 2;
            } else {
                order.push(i);
                i += 1;
            }
        }
        let tgt = with_tgt.then(|| order.iter().map(|&s| tgt_words[sent[s]].clone()).collect());
        if with_tgt {
            let mut links: Vec<(usize, usize)> = order.iter().enumerate().map(|(j, &s)| (s, j)).collect();
            links.sort_unstable();
            gold_alignments.insert(id.clone(), links);
        }
        Utterance {
            id,
            features: Tensor::new(vec![t, config.feat_dim], frames).expect("frame count"),
            src_words: sent.iter().map(|&w| src_words[w].clone()).collect(),
            spans,
            tgt_words: tgt,
            src_tokens: sent.iter().map(|&w| word_tokens[w].clone()).collect(),
        }
    };

    let mut train = Vec::with_capacity(config.n_utts);
    for i in 0..config.n_utts {
        let asr_only = rng.random::<f64>() < config.asr_only_fraction;
        train.push(make(&mut rng, format!("train-{i:05}"), !asr_only));
    }
    let mut dev = Vec::with_capacity(config.n_dev);
    for i in 0..config.n_dev {
        dev.push(make(&mut rng, format!("dev-{i:05}"), true));
    }

    let gold_lexicon = src_words.iter().cloned().zip(tgt_words.iter().cloned()).collect();
    Ok(SynthCorpus {
        config: config.clone(),
        train,
        dev,
        src_vocab,
        src_words,
        tgt_words,
        gold_lexicon,
        gold_alignments,
    })
}

impl SynthCorpus {
    /// Writes `train.jsonl`, `dev.jsonl`, `feats/`, `src_vocab.txt`,
    /// `gold_lexicon.tsv`, `gold_align.txt` (Pharaoh links for the training
    /// triples, in manifest order) and `synth_config.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_manifest(&dir.join("train.jsonl"), "feats", &self.train)?;
        write_manifest(&dir.join("dev.jsonl"), "feats", &self.dev)?;
        self.src_vocab.save(&dir.join("src_vocab.txt"))?;
        let mut lex = String::new();
        for (s, t) in &self.gold_lexicon {
            lex.push_str(&format!("{s}\t{t}\t1\n"));
        }
        fs::write(dir.join("gold_lexicon.tsv"), lex)?;
        let links: Vec<Vec<(usize, usize)>> = self
            .train
            .iter()
            .filter_map(|u| self.gold_alignments.get(&u.id).cloned())
            .collect();
        pharaoh::write(&dir.join("gold_align.txt"), &links)?;
        fs::write(
            dir.join("synth_config.json"),
            serde_json::to_string_pretty(&self.config)?,
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SynthConfig {
        SynthConfig {
            n_utts: 30,
            n_dev: 5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_noise_gives_identical_frames_within_a_span() {
        let c = synth_corpus(&SynthConfig { noise: 0.0, ..cfg() }).unwrap();
        for u in &c.train {
            for &(s, e) in &u.spans {
                for r in s..=e {
                    assert_eq!(u.features.row(r), u.features.row(s));
                }
            }
        }
    }

    #[test]
    fn no_reorder_means_identity_alignment() {
        let c = synth_corpus(&SynthConfig { reorder: false, ..cfg() }).unwrap();
        for links in c.gold_alignments.values() {
            assert!(links.iter().all(|&(s, t)| s == t));
        }
        for u in &c.train {
            let tgt = u.tgt_words.as_ref().unwrap();
            for (s, t) in u.src_words.iter().zip(tgt) {
                assert_eq!(&c.gold_lexicon[s], t);
            }
        }
    }

    #[test]
    fn reordering_follows_the_modifier_rule() {
        let c = synth_corpus(&SynthConfig { n_utts: 100, ..cfg() }).unwrap();
        let swapped = c
            .gold_alignments
            .values()
            .filter(|l| l.iter().any(|&(s, t)| s != t))
            .count();
        assert!(swapped > 0);
        for u in &c.train {
            let links = &c.gold_alignments[&u.id];
            let tgt = u.tgt_words.as_ref().unwrap();
            for &(s, t) in links {
                assert_eq!(c.gold_lexicon[&u.src_words[s]], tgt[t]);
            }
        }
    }

    #[test]
    fn spans_are_contiguous_and_within_range() {
        let c = synth_corpus(&cfg()).unwrap();
        for u in c.train.iter().chain(&c.dev) {
            u.validate().unwrap();
            assert_eq!(u.spans.last().unwrap().1 + 1, u.frames());
            for &(s, e) in &u.spans {
                assert!((4..=8).contains(&(e - s + 1)));
            }
        }
    }

    #[test]
    fn asr_only_fraction_drops_targets() {
        let c = synth_corpus(&SynthConfig {
            n_utts: 200,
            asr_only_fraction: 0.4,
            ..cfg()
        })
        .unwrap();
        let asr = c.train.iter().filter(|u| !u.is_triple()).count();
        assert!((50..110).contains(&asr), "{asr}");
        assert!(c.dev.iter().all(Utterance::is_triple));
    }

    #[test]
    fn reproducible_from_seed() {
        let a = synth_corpus(&cfg()).unwrap();
        let b = synth_corpus(&cfg()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.dev, b.dev);
        let c = synth_corpus(&SynthConfig { seed: 8, ..cfg() }).unwrap();
        assert_ne!(a.train, c.train);
    }
}
