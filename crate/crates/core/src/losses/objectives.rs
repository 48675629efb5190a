use cst_autodiff::{Graph, Scalar, Tensor, Var};

use super::ctc::{ctc_loss, ctc_min_frames};
use super::spans::{frame_to_hidden_span, SoftTarget, WordSpan};
use crate::data::vocab::{EOS, SOS};
use crate::error::{Error, Result};
use crate::model::{Ctx, DecoderKind, EncoderOutput};

/// Floor applied to probabilities inside [`kl_soft_loss`].
pub const KL_FLOOR: f64 = 1e-12;

/// A scalar loss node with the prediction counts behind it.
#[derive(Clone, Copy, Debug)]
pub struct LossTerm {
    pub loss: Var,
    pub correct: usize,
    pub total: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlValue {
    pub loss: f64,
    /// Support entries whose probability was raised to [`KL_FLOOR`].
    pub floored: usize,
}

/// `KL(q‖p) = Σ_i q_i (ln q_i − ln p[i])` over the support of `q`.
pub fn kl_soft_loss(p: &[f64], q: &SoftTarget) -> Result<KlValue> {
    let mut loss = 0.0;
    let mut floored = 0;
    for (&id, &w) in q.support.iter().zip(&q.weights) {
        let pi = *p
            .get(id)
            .ok_or_else(|| Error::Input(format!("target id {id} outside {} classes", p.len())))?;
        let pi = if pi < KL_FLOOR {
            floored += 1;
            KL_FLOOR
        } else {
            pi
        };
        loss += w * (w.ln() - pi.ln());
    }
    Ok(KlValue { loss, floored })
}

/// Graph form of [`kl_soft_loss`] on a `1×V` log-distribution.
pub fn kl_soft_node<T: Scalar>(g: &mut Graph<T>, log_p: Var, q: &SoftTarget) -> Result<Var> {
    let picked = g.gather(log_p, &q.support)?;
    let neg: Vec<f64> = q.weights.iter().map(|w| -w).collect();
    let cross = g.weighted_sum(picked, &neg)?;
    let c = g.constant(Tensor::scalar(T::from_f64(q.neg_entropy())));
    Ok(g.add(cross, c)?)
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn zero<T: Scalar>(g: &mut Graph<T>) -> Var {
    g.constant(Tensor::scalar(T::ZERO))
}

fn sum_terms<T: Scalar>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    match terms.len() {
        0 => Ok(zero(g)),
        1 => Ok(terms[0]),
        _ => Ok(g.add_all(terms)?),
    }
}

/// `α·ctc + (1−α)·ce`.
pub fn asr_loss<T: Scalar>(g: &mut Graph<T>, ctc: Var, ce: Var, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("ctc weight {alpha} outside [0, 1]")));
    }
    let a = g.scale(ctc, alpha);
    let b = g.scale(ce, 1.0 - alpha);
    Ok(g.add(a, b)?)
}

/// `w_fmlm·fmlm + w_fblt·fblt`; the plain sum at unit weights.
pub fn adv_loss<T: Scalar>(g: &mut Graph<T>, fmlm: Var, fblt: Var, weights: (f64, f64)) -> Result<Var> {
    let a = if weights.0 == 1.0 { fmlm } else { g.scale(fmlm, weights.0) };
    let b = if weights.1 == 1.0 { fblt } else { g.scale(fblt, weights.1) };
    Ok(g.add(a, b)?)
}

/// Token-summed negative log-likelihood of `targets` followed by `</s>`
/// under teacher-forced `(|targets|+1)×V` log-probabilities.
pub fn sequence_nll<T: Scalar>(g: &mut Graph<T>, log_probs: Var, targets: &[usize]) -> Result<LossTerm> {
    let shape = g.shape(log_probs).to_vec();
    let n = targets.len() + 1;
    if shape.len() != 2 || shape[0] != n {
        return Err(Error::Input(format!(
            "{:?} log-probabilities for {} targets plus </s>",
            shape,
            targets.len()
        )));
    }
    let v = shape[1];
    let gold: Vec<usize> = targets.iter().copied().chain(std::iter::once(EOS)).collect();
    if let Some(&bad) = gold.iter().find(|&&t| t >= v) {
        return Err(Error::Input(format!("target {bad} outside vocabulary of {v}")));
    }
    let idx: Vec<usize> = gold.iter().enumerate().map(|(i, &t)| i * v + t).collect();
    let picked = g.gather(log_probs, &idx)?;
    let loss = g.weighted_sum(picked, &vec![-1.0; n])?;
    let values = g.value(log_probs);
    let correct = (0..n).filter(|&i| argmax(values.row(i)) == gold[i]).count();
    Ok(LossTerm {
        loss,
        correct,
        total: n,
    })
}

/// Decoder input `<s> y…` for a target sequence.
pub fn teacher_prefix(targets: &[usize]) -> Vec<usize> {
    std::iter::once(SOS).chain(targets.iter().copied()).collect()
}

/// Cross-entropy of a decoder over `targets` given encoder memory.
pub fn decoder_nll<T: Scalar>(ctx: &mut Ctx<'_, T>, kind: DecoderKind, memory: Var, targets: &[usize]) -> Result<LossTerm> {
    let lp = ctx.decode_forward(kind, memory, &teacher_prefix(targets))?;
    sequence_nll(&mut ctx.g, lp, targets)
}

/// Translation loss `−log P(y^t | x)`.
pub fn st_loss<T: Scalar>(ctx: &mut Ctx<'_, T>, enc: &EncoderOutput, targets: &[usize]) -> Result<LossTerm> {
    let top = enc
        .hidden_top
        .ok_or_else(|| Error::Config("translation needs the full-depth encoder".into()))?;
    decoder_nll(ctx, DecoderKind::St, top, targets)
}

/// Parts of the transcription objective; `loss` is the weighted mix.
#[derive(Clone, Copy, Debug)]
pub struct AsrTerms {
    pub loss: Var,
    /// `None` when the transcript needs more frames than the encoder emits.
    pub ctc: Option<Var>,
    pub ce: LossTerm,
}

/// CTC on the tapped layer plus the transcription decoder's cross-entropy.
/// Utterances too short for CTC keep only the `(1−α)·ce` part.
pub fn asr_objective<T: Scalar>(ctx: &mut Ctx<'_, T>, enc: &EncoderOutput, tokens: &[usize], alpha: f64) -> Result<AsrTerms> {
    let blank = ctx.config().blank();
    let ctc = if ctc_min_frames(tokens) <= enc.len {
        let logits = ctx.ctc_logits(enc.hidden_n)?;
        Some(ctc_loss(&mut ctx.g, logits, tokens, blank)?)
    } else {
        None
    };
    let ce = decoder_nll(ctx, DecoderKind::Asr, enc.hidden_n, tokens)?;
    let loss = match ctc {
        Some(c) => asr_loss(&mut ctx.g, c, ce.loss, alpha)?,
        None => {
            let z = zero(&mut ctx.g);
            asr_loss(&mut ctx.g, z, ce.loss, alpha)?
        }
    };
    Ok(AsrTerms { loss, ctc, ce })
}

fn span_kl<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    hidden: Var,
    span: &WordSpan,
    q: &SoftTarget,
    fmlm: bool,
) -> Result<(Var, bool)> {
    let len = ctx.g.shape(hidden)[0];
    let (lo, hi) = frame_to_hidden_span(span.start, span.end, len)?;
    let pooled = ctx.g.mean_pool(hidden, lo, hi)?;
    let lp = if fmlm { ctx.fmlm_log_probs(pooled)? } else { ctx.fblt_log_probs(pooled)? };
    let hit = q.support.contains(&argmax(ctx.g.value(lp).data()));
    Ok((kl_soft_node(&mut ctx.g, lp, q)?, hit))
}

/// Masked-word prediction at the tapped layer: summed KL over masked spans
/// against each word's uniform subword distribution.
pub fn fmlm_loss<T: Scalar>(ctx: &mut Ctx<'_, T>, hidden_n: Var, spans: &[WordSpan]) -> Result<LossTerm> {
    if !spans.iter().any(|s| s.masked) {
        return Err(Error::Input("no masked word in utterance".into()));
    }
    let mut terms = Vec::new();
    let mut correct = 0;
    for s in spans.iter().filter(|s| s.masked) {
        let q = SoftTarget::from_tokens(&s.tokens)
            .ok_or_else(|| Error::Input(format!("word {} has no tokens", s.word_index)))?;
        let (kl, hit) = span_kl(ctx, hidden_n, s, &q, true)?;
        terms.push(kl);
        correct += hit as usize;
    }
    let loss = sum_terms(&mut ctx.g, &terms)?;
    Ok(LossTerm {
        loss,
        correct,
        total: terms.len(),
    })
}

/// Lexicon translation at the top layer: summed KL over every span with a
/// nonempty target assignment; `targets[i]` holds word `i`'s target tokens.
pub fn fblt_loss<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    hidden_top: Var,
    spans: &[WordSpan],
    targets: &[Vec<usize>],
) -> Result<LossTerm> {
    if targets.len() != spans.len() {
        return Err(Error::Input(format!(
            "{} target assignments for {} spans",
            targets.len(),
            spans.len()
        )));
    }
    let mut terms = Vec::new();
    let mut correct = 0;
    for (s, t) in spans.iter().zip(targets) {
        let Some(q) = SoftTarget::from_tokens(t) else {
            continue;
        };
        let (kl, hit) = span_kl(ctx, hidden_top, s, &q, false)?;
        terms.push(kl);
        correct += hit as usize;
    }
    let loss = sum_terms(&mut ctx.g, &terms)?;
    Ok(LossTerm {
        loss,
        correct,
        total: terms.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_examples() {
        let one = SoftTarget::from_tokens(&[1]).unwrap();
        let v = kl_soft_loss(&[0.25, 0.25, 0.25, 0.25], &one).unwrap();
        assert!((v.loss - 4f64.ln()).abs() < 1e-15);
        let two = SoftTarget::from_tokens(&[0, 2]).unwrap();
        let v = kl_soft_loss(&[0.25, 0.25, 0.25, 0.25], &two).unwrap();
        assert!((v.loss - 2f64.ln()).abs() < 1e-15);
        let v = kl_soft_loss(&[0.5, 0.0, 0.5, 0.0], &two).unwrap();
        assert_eq!(v.loss, 0.0);
        let v = kl_soft_loss(&[1.0, 0.0], &one).unwrap();
        assert_eq!(v.floored, 1);
    }

    #[test]
    fn asr_mix() {
        let mut g: Graph<f64> = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let e = g.constant(Tensor::scalar(1.0));
        let l = asr_loss(&mut g, c, e, 0.3).unwrap();
        assert!((g.value(l).item() - 1.3).abs() < 1e-15);
        let l = asr_loss(&mut g, c, e, 0.0).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let l = asr_loss(&mut g, c, e, 1.0).unwrap();
        assert_eq!(g.value(l).item(), 2.0);
    }

    #[test]
    fn uniform_sequence_nll() {
        let mut g: Graph<f64> = Graph::new();
        let lp = g.constant(Tensor::filled(&[3, 10], -(10f64.ln())));
        let t = sequence_nll(&mut g, lp, &[4, 5]).unwrap();
        assert!((g.value(t.loss).item() - 3.0 * 10f64.ln()).abs() < 1e-12);
    }
}
