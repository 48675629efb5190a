use cst_autodiff::Tensor;
use log::info;

use crate::align::{align_corpus, assign_targets, build_lexicon, FinalRule, LexiconTable, TargetAssignment};
use crate::data::{tokenize_fallback, tokenize_sentence, CmvnStats, TokenMode, Utterance, Vocab};
use crate::error::{Error, Result};
use crate::losses::WordSpan;

/// One utterance in the form the objectives consume.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub features: Tensor<f32>,
    /// Unmasked word spans with their source tokens.
    pub spans: Vec<WordSpan>,
    /// All source tokens in order.
    pub src_tokens: Vec<usize>,
    pub st_targets: Option<Vec<usize>>,
    /// Target tokens per source word; `None` when no assignment was made.
    pub fblt_targets: Option<Vec<Vec<usize>>>,
}

impl Example {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }
}

/// Converts utterances to examples. `assignments`, when given, must hold
/// one entry per utterance with one word list per source word.
pub fn build_examples(
    utts: &[Utterance],
    tgt_vocab: &Vocab,
    tgt_mode: TokenMode,
    assignments: Option<&[TargetAssignment]>,
) -> Result<Vec<Example>> {
    if let Some(a) = assignments {
        if a.len() != utts.len() {
            return Err(Error::Input(format!("{} assignments for {} utterances", a.len(), utts.len())));
        }
    }
    utts.iter()
        .enumerate()
        .map(|(i, u)| {
            let fblt_targets = match assignments {
                None => None,
                Some(a) => {
                    let per_word = &a[i].per_word;
                    if per_word.len() != u.src_words.len() {
                        return Err(Error::Input(format!(
                            "{}: {} assignments for {} words",
                            u.id,
                            per_word.len(),
                            u.src_words.len()
                        )));
                    }
                    Some(
                        per_word
                            .iter()
                            .map(|ws| ws.iter().flat_map(|w| tokenize_fallback(tgt_vocab, w, tgt_mode)).collect())
                            .collect(),
                    )
                }
            };
            Ok(Example {
                id: u.id.clone(),
                features: u.features.clone(),
                spans: WordSpan::from_utterance(&u.spans, &u.src_tokens),
                src_tokens: u.src_tokens.concat(),
                st_targets: u.tgt_words.as_ref().map(|t| tokenize_sentence(tgt_vocab, t, tgt_mode)),
                fblt_targets,
            })
        })
        .collect()
}

/// Target vocabulary over the translations in `utts`.
pub fn target_vocab(utts: &[Utterance], mode: TokenMode) -> Vocab {
    let mut v = Vocab::build(utts.iter().flat_map(|u| u.tgt_words.iter().flatten().map(String::as_str)), mode);
    if mode == TokenMode::Char {
        v.insert("▁");
    }
    v
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataOptions {
    pub tgt_mode: TokenMode,
    pub align_iterations: usize,
    pub align_smoothing: f64,
    pub final_rule: FinalRule,
}

impl Default for DataOptions {
    fn default() -> Self {
        DataOptions {
            tgt_mode: TokenMode::WholeWord,
            align_iterations: 10,
            align_smoothing: 1e-6,
            final_rule: FinalRule::Either,
        }
    }
}

/// Normalized training and dev examples plus everything derived from the
/// training side.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub cmvn: CmvnStats,
    pub tgt_vocab: Vocab,
    pub tgt_mode: TokenMode,
    pub lexicon: LexiconTable,
    pub assignments: Vec<TargetAssignment>,
}

/// Per-word target assignments for `utts`: alignment links for triples,
/// the lexicon's best translation otherwise.
pub fn corpus_assignments(utts: &[Utterance], opts: &DataOptions) -> Result<(LexiconTable, Vec<TargetAssignment>)> {
    let corpus: Vec<(Vec<String>, Vec<String>)> = utts
        .iter()
        .filter_map(|u| u.tgt_words.as_ref().map(|t| (u.src_words.clone(), t.clone())))
        .collect();
    if corpus.is_empty() {
        return Err(Error::Config("target assignment needs translated utterances".into()));
    }
    let run = align_corpus(&corpus, opts.align_iterations, opts.align_smoothing, opts.final_rule)?;
    let lexicon = build_lexicon(&run.pairs)?;
    let mut pairs = run.pairs.iter();
    let assignments = utts
        .iter()
        .map(|u| match u.tgt_words {
            Some(_) => {
                let p = pairs.next().expect("one aligned pair per triple");
                assign_targets(&u.src_words, Some((&p.tgt, &p.links)), None)
            }
            None => assign_targets(&u.src_words, None, Some(&lexicon)),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((lexicon, assignments))
}

/// CMVN from the training features (applied to both sides), target vocab,
/// alignment, lexicon and examples.
pub fn prepare(mut train: Vec<Utterance>, mut dev: Vec<Utterance>, opts: &DataOptions) -> Result<PreparedData> {
    let feats: Vec<Tensor<f32>> = train.iter().map(|u| u.features.clone()).collect();
    let cmvn = CmvnStats::estimate(&feats)?;
    for u in train.iter_mut().chain(dev.iter_mut()) {
        cmvn.apply(&mut u.features)?;
    }
    let tgt_vocab = target_vocab(&train, opts.tgt_mode);
    let (lexicon, assignments) = corpus_assignments(&train, opts)?;
    info!(
        "prepared {} train / {} dev utterances, {} target tokens, {} lexicon entries",
        train.len(),
        dev.len(),
        tgt_vocab.len(),
        lexicon.len()
    );
    Ok(PreparedData {
        train: build_examples(&train, &tgt_vocab, opts.tgt_mode, Some(&assignments))?,
        dev: build_examples(&dev, &tgt_vocab, opts.tgt_mode, None)?,
        cmvn,
        tgt_vocab,
        tgt_mode: opts.tgt_mode,
        lexicon,
        assignments,
    })
}
