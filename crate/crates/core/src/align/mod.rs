//! Word alignment and bilingual lexicon induction: IBM Model 1 in both
//! directions, grow-diag-final symmetrization, link-count lexicon
//! estimation and per-word target assignment.

mod ibm1;
mod lexicon;
pub mod pharaoh;
mod symmetrize;

pub use ibm1::{ibm1_em, viterbi_align, Ibm1Model, Ibm1Result};
pub use lexicon::{assign_targets, build_lexicon, AlignedPair, LexiconTable, TargetAssignment};
pub use symmetrize::{grow_diag_final, FinalRule};

/// `(src_index, tgt_index)`.
pub type Link = (usize, usize);

/// Source→target and target→source Viterbi links, both as `(src, tgt)`.
pub fn bidirectional_links(
    forward: &Ibm1Model,
    reverse: &Ibm1Model,
    src: &[String],
    tgt: &[String],
) -> (Vec<Link>, Vec<Link>) {
    let fwd = viterbi_align(forward, src, tgt);
    let rev = viterbi_align(reverse, tgt, src)
        .into_iter()
        .map(|(t, s)| (s, t))
        .collect();
    (fwd, rev)
}

/// Both directional models plus the symmetrized links of every pair.
#[derive(Clone, Debug)]
pub struct AlignmentRun {
    pub pairs: Vec<AlignedPair>,
    pub forward: Ibm1Result,
    pub reverse: Ibm1Result,
}

/// IBM Model 1 in both directions followed by grow-diag-final on every
/// `(src, tgt)` pair.
pub fn align_corpus(
    corpus: &[(Vec<String>, Vec<String>)],
    iterations: usize,
    smoothing: f64,
    rule: FinalRule,
) -> crate::Result<AlignmentRun> {
    let forward = ibm1_em(corpus, iterations, smoothing)?;
    let flipped: Vec<(Vec<String>, Vec<String>)> = corpus.iter().map(|(s, t)| (t.clone(), s.clone())).collect();
    let reverse = ibm1_em(&flipped, iterations, smoothing)?;
    let pairs = corpus
        .iter()
        .map(|(src, tgt)| {
            let (f, r) = bidirectional_links(&forward.model, &reverse.model, src, tgt);
            AlignedPair {
                src: src.clone(),
                tgt: tgt.clone(),
                links: grow_diag_final(&f, &r, src.len(), tgt.len(), rule),
            }
        })
        .collect();
    Ok(AlignmentRun { pairs, forward, reverse })
}
