use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::Link;
use crate::error::{Error, Result};

/// A sentence pair with its symmetrized `(src, tgt)` links.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedPair {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub links: Vec<Link>,
}

/// Source word → target distribution, each list sorted by descending
/// probability then ascending target word.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LexiconTable {
    entries: BTreeMap<String, Vec<(String, f64)>>,
}

impl LexiconTable {
    pub fn from_counts(counts: BTreeMap<String, BTreeMap<String, usize>>) -> Self {
        let mut entries = BTreeMap::new();
        for (src, row) in counts {
            let total: usize = row.values().sum();
            if total == 0 {
                continue;
            }
            let mut list: Vec<(String, f64)> =
                row.into_iter().filter(|&(_, c)| c > 0).map(|(t, c)| (t, c as f64 / total as f64)).collect();
            sort_row(&mut list);
            entries.insert(src, list);
        }
        LexiconTable { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &BTreeMap<String, Vec<(String, f64)>> {
        &self.entries
    }

    pub fn prob(&self, src: &str, tgt: &str) -> f64 {
        self.entries
            .get(src)
            .and_then(|row| row.iter().find(|(t, _)| t == tgt))
            .map_or(0.0, |&(_, p)| p)
    }

    /// Most probable target word for `src`.
    pub fn best(&self, src: &str) -> Option<&str> {
        self.entries.get(src).and_then(|row| row.first()).map(|(t, _)| t.as_str())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (s, row) in &self.entries {
            for (t, p) in row {
                writeln!(out, "{s}\t{t}\t{p}").unwrap();
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut entries: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("{}:{}: expected src\\ttgt\\tprob", path.display(), i + 1));
            let mut cols = line.split('\t');
            let (Some(s), Some(t), Some(p), None) = (cols.next(), cols.next(), cols.next(), cols.next()) else {
                return Err(bad());
            };
            let p: f64 = p.parse().map_err(|_| bad())?;
            if !(p > 0.0 && p <= 1.0) {
                return Err(bad());
            }
            entries.entry(s.to_string()).or_default().push((t.to_string(), p));
        }
        for row in entries.values_mut() {
            sort_row(row);
        }
        Ok(LexiconTable { entries })
    }
}

fn sort_row(row: &mut [(String, f64)]) {
    row.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

/// Lexical translation table from link counts:
/// `p(t | s) = links(s, t) / links(s, ·)`.
pub fn build_lexicon(pairs: &[AlignedPair]) -> Result<LexiconTable> {
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for (k, p) in pairs.iter().enumerate() {
        for &(s, t) in &p.links {
            if s >= p.src.len() || t >= p.tgt.len() {
                return Err(Error::Input(format!(
                    "pair {k}: link {s}-{t} out of range for {}×{} words",
                    p.src.len(),
                    p.tgt.len()
                )));
            }
            *counts.entry(p.src[s].clone()).or_default().entry(p.tgt[t].clone()).or_default() += 1;
        }
    }
    Ok(LexiconTable::from_counts(counts))
}

/// Target words assigned to each source word; empty for unaligned words.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TargetAssignment {
    pub per_word: Vec<Vec<String>>,
}

impl TargetAssignment {
    pub fn is_all_empty(&self) -> bool {
        self.per_word.iter().all(Vec::is_empty)
    }
}

/// With `aligned = Some((tgt, links))` each source word gets every target
/// word linked to it, in target order without duplicates. Otherwise each
/// source word gets the table's most probable translation, or nothing if
/// it is not in the table.
pub fn assign_targets(
    src: &[String],
    aligned: Option<(&[String], &[Link])>,
    table: Option<&LexiconTable>,
) -> Result<TargetAssignment> {
    let per_word = match (aligned, table) {
        (Some((tgt, links)), _) => {
            let mut sorted: Vec<Link> = links.to_vec();
            sorted.sort_by_key(|&(s, t)| (t, s));
            let mut per_word = vec![Vec::<String>::new(); src.len()];
            for (s, t) in sorted {
                if s >= src.len() || t >= tgt.len() {
                    return Err(Error::Input(format!(
                        "link {s}-{t} out of range for {}×{} words",
                        src.len(),
                        tgt.len()
                    )));
                }
                if !per_word[s].contains(&tgt[t]) {
                    per_word[s].push(tgt[t].clone());
                }
            }
            per_word
        }
        (None, Some(table)) => src
            .iter()
            .map(|w| table.best(w).map(|t| vec![t.to_string()]).unwrap_or_default())
            .collect(),
        (None, None) => {
            return Err(Error::Config(
                "assigning targets without a translation needs a lexicon table".into(),
            ))
        }
    };
    Ok(TargetAssignment { per_word })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn dog_table() -> LexiconTable {
        let mut pairs = Vec::new();
        for _ in 0..4 {
            pairs.push(AlignedPair { src: w("dog"), tgt: w("chien"), links: vec![(0, 0)] });
        }
        pairs.push(AlignedPair { src: w("dog"), tgt: w("chat"), links: vec![(0, 0)] });
        build_lexicon(&pairs).unwrap()
    }

    #[test]
    fn probabilities_are_link_frequencies() {
        let t = dog_table();
        assert!((t.prob("dog", "chien") - 0.8).abs() < 1e-15);
        assert!((t.prob("dog", "chat") - 0.2).abs() < 1e-15);
        assert_eq!(t.best("dog"), Some("chien"));
    }

    #[test]
    fn rows_sum_to_one_and_unlinked_words_are_absent() {
        let pairs = vec![
            AlignedPair { src: w("a b c"), tgt: w("x y z"), links: vec![(0, 0), (0, 1), (1, 1)] },
            AlignedPair { src: w("a b"), tgt: w("x z"), links: vec![(0, 0), (1, 1)] },
        ];
        let t = build_lexicon(&pairs).unwrap();
        assert!(!t.entries().contains_key("c"));
        for row in t.entries().values() {
            let s: f64 = row.iter().map(|r| r.1).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn argmax_assignment_for_untranslated_speech() {
        let t = dog_table();
        let a = assign_targets(&w("dog cat"), None, Some(&t)).unwrap();
        assert_eq!(a.per_word, vec![w("chien"), vec![]]);
        assert!(matches!(assign_targets(&w("dog"), None, None), Err(Error::Config(_))));
    }

    #[test]
    fn link_assignment_collects_all_linked_words() {
        let tgt = w("le gros chien");
        let a = assign_targets(&w("big dog"), Some((&tgt, &[(0, 2), (0, 1)])), None).unwrap();
        assert_eq!(a.per_word, vec![w("gros chien"), vec![]]);
        let dup = w("x x");
        let a = assign_targets(&w("a"), Some((&dup, &[(0, 0), (0, 1)])), None).unwrap();
        assert_eq!(a.per_word, vec![w("x")]);
    }

    #[test]
    fn tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lex.tsv");
        let t = dog_table();
        t.write(&p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "dog\tchien\t0.8\ndog\tchat\t0.2\n");
        assert_eq!(LexiconTable::read(&p).unwrap(), t);
    }
}
