//! Corpus formats, normalization, tokenization, synthetic data and BLEU.

pub mod bleu;
pub mod cmvn;
pub mod container;
pub mod manifest;
pub mod synth;
pub mod vocab;

pub use bleu::{corpus_bleu, BleuScore};
pub use cmvn::{cmvn, CmvnStats};
pub use manifest::{read_manifest, write_manifest, LoadedManifest, ManifestEntry, Utterance};
pub use synth::{synth_corpus, SynthConfig, SynthCorpus};
pub use vocab::{tokenize_fallback, tokenize_sentence, TokenMode, Vocab};
