use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const SPECIALS: [&str; 3] = ["<unk>", "<s>", "</s>"];

/// How a word is split when no subword segmentation is supplied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMode {
    Char,
    WholeWord,
}

/// Token inventory. Ids 0..3 are `<unk>`, `<s>`, `</s>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.insert(s);
        }
        v
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    /// Vocabulary covering `words` under `mode`, in first-seen order.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>, mode: TokenMode) -> Self {
        let mut v = Vocab::new();
        for w in words {
            match mode {
                TokenMode::WholeWord => {
                    v.insert(w);
                }
                TokenMode::Char => {
                    let mut buf = [0u8; 4];
                    for c in w.chars() {
                        v.insert(c.encode_utf8(&mut buf));
                    }
                }
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Joins ids back into words. In char mode tokens are concatenated
    /// within a word; `sep` marks word boundaries.
    pub fn detokenize(&self, ids: &[usize], mode: TokenMode) -> String {
        let pieces = ids.iter().filter(|&&i| i > EOS).map(|&i| self.tokens[i].as_str());
        match mode {
            TokenMode::WholeWord => pieces.collect::<Vec<_>>().join(" "),
            TokenMode::Char => pieces.collect::<String>().replace('▁', " ").trim().to_string(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<&str> = text.lines().collect();
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Input(format!(
                "{}: vocabulary must start with {:?}",
                path.display(),
                SPECIALS
            )));
        }
        let mut v = Vocab::new();
        for t in &tokens[SPECIALS.len()..] {
            v.insert(t);
        }
        Ok(v)
    }
}

/// Splits `word` into ids. Unknown pieces map to [`UNK`].
pub fn tokenize_fallback(vocab: &Vocab, word: &str, mode: TokenMode) -> Vec<usize> {
    match mode {
        TokenMode::WholeWord => vec![vocab.id(word).unwrap_or(UNK)],
        TokenMode::Char => {
            let mut buf = [0u8; 4];
            word.chars()
                .map(|c| vocab.id(c.encode_utf8(&mut buf)).unwrap_or(UNK))
                .collect()
        }
    }
}

/// Token ids of a whole sentence. Char mode inserts a `▁` boundary token
/// between words.
pub fn tokenize_sentence(vocab: &Vocab, words: &[String], mode: TokenMode) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, w) in words.iter().enumerate() {
        if mode == TokenMode::Char && i > 0 {
            out.push(vocab.id("▁").unwrap_or(UNK));
        }
        out.extend(tokenize_fallback(vocab, w, mode));
    }
    out
}
