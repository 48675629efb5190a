//! JSON-lines corpus manifests.
//!
//! Each line: `{"id", "feat", "src", "spans", "tgt"?, "src_tokens"}` where
//! `feat` is a container path relative to the manifest, and `spans` holds
//! one inclusive `[start, end]` frame pair per source word.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cst_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use super::container;
use crate::error::{Error, Result};

/// Utterances longer than this many frames are dropped at load time.
pub const MAX_FRAMES: usize = 3000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub feat: String,
    pub src: Vec<String>,
    pub spans: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tgt: Option<Vec<String>>,
    pub src_tokens: Vec<Vec<usize>>,
}

/// One speech utterance with its transcript and, for translation triples,
/// its target sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `T×F` features.
    pub features: Tensor<f32>,
    pub src_words: Vec<String>,
    /// Inclusive `(start, end)` frames per source word.
    pub spans: Vec<(usize, usize)>,
    pub tgt_words: Option<Vec<String>>,
    pub src_tokens: Vec<Vec<usize>>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn feat_dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Member of the translation set (has a target sentence).
    pub fn is_triple(&self) -> bool {
        self.tgt_words.is_some()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.features.rank() != 2 {
            return Err(format!("features must be T×F, got {:?}", self.features.shape()));
        }
        let t = self.frames();
        if self.spans.len() != self.src_words.len() {
            return Err(format!(
                "{} spans for {} source words",
                self.spans.len(),
                self.src_words.len()
            ));
        }
        if self.src_tokens.len() != self.src_words.len() {
            return Err(format!(
                "{} token lists for {} source words",
                self.src_tokens.len(),
                self.src_words.len()
            ));
        }
        let mut prev_end: Option<usize> = None;
        for (i, &(s, e)) in self.spans.iter().enumerate() {
            if s > e || e >= t {
                return Err(format!("span {i} [{s}, {e}] out of range for {t} frames"));
            }
            if let Some(p) = prev_end {
                if s <= p {
                    return Err(format!("span {i} [{s}, {e}] overlaps or precedes previous span"));
                }
            }
            prev_end = Some(e);
        }
        if let Some(i) = self.src_tokens.iter().position(Vec::is_empty) {
            return Err(format!("word {i} has no tokens"));
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct LoadedManifest {
    pub utterances: Vec<Utterance>,
    /// Utterances dropped for exceeding [`MAX_FRAMES`].
    pub discarded_long: usize,
}

pub fn read_manifest(path: &Path) -> Result<LoadedManifest> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = LoadedManifest::default();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Manifest {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let features = container::read(&base.join(&entry.feat)).map_err(|e| err(e.to_string()))?;
        let utt = Utterance {
            id: entry.id,
            features,
            src_words: entry.src,
            spans: entry.spans.iter().map(|s| (s[0], s[1])).collect(),
            tgt_words: entry.tgt,
            src_tokens: entry.src_tokens,
        };
        utt.validate().map_err(err)?;
        if utt.frames() > MAX_FRAMES {
            out.discarded_long += 1;
            continue;
        }
        out.utterances.push(utt);
    }
    if out.discarded_long > 0 {
        log::warn!(
            "{}: discarded {} utterances longer than {MAX_FRAMES} frames",
            path.display(),
            out.discarded_long
        );
    }
    Ok(out)
}

/// Writes `utts` as a manifest at `path`, with features under
/// `<dir>/<feat_subdir>/<id>.cstf`.
pub fn write_manifest(path: &Path, feat_subdir: &str, utts: &[Utterance]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(base.join(feat_subdir))?;
    let mut out = Vec::new();
    for u in utts {
        let rel = format!("{feat_subdir}/{}.cstf", u.id);
        container::write(&base.join(&rel), &u.features)?;
        let entry = ManifestEntry {
            id: u.id.clone(),
            feat: rel,
            src: u.src_words.clone(),
            spans: u.spans.iter().map(|&(s, e)| [s, e]).collect(),
            tgt: u.tgt_words.clone(),
            src_tokens: u.src_tokens.clone(),
        };
        serde_json::to_writer(&mut out, &entry)?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn feature_path(manifest: &Path, entry: &ManifestEntry) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(&entry.feat)
}
