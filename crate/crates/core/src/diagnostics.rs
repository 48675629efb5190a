//! Finite-difference checks of the composite training objectives through a
//! tiny randomly initialized model, in 64-bit.

use std::collections::BTreeMap;

use cst_autodiff::gradcheck::{rel_err, GradCheckReport};
use cst_autodiff::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{
    adv_loss, asr_objective, fblt_loss, fmlm_loss, recon_l1_loss, recon_predictions, select_and_mask, st_loss,
    WordSpan,
};
use crate::model::{Ctx, Depth, ModelConfig, ParamStore};

/// Largest acceptable relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

const STEP: f64 = 1e-5;
const PROBES_PER_CASE: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Asr,
    Fmlm,
    Fblt,
    Adv,
    St,
    Recon,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Asr,
        LossKind::Fmlm,
        LossKind::Fblt,
        LossKind::Adv,
        LossKind::St,
        LossKind::Recon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Asr => "asr",
            LossKind::Fmlm => "fmlm",
            LossKind::Fblt => "fblt",
            LossKind::Adv => "adv",
            LossKind::St => "st",
            LossKind::Recon => "recon",
        }
    }
}

/// Smallest model that still exercises every component.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        feat_dim: 6,
        d_model: 8,
        heads: 2,
        d_ff: 12,
        enc_blocks: 2,
        asr_blocks: 1,
        dec_blocks: 1,
        src_vocab: 7,
        tgt_vocab: 8,
        max_len: 64,
        conv_channels: 2,
        dropout: 0.0,
    }
}

/// A random utterance with everything each objective needs.
#[derive(Clone, Debug)]
pub struct GradCase {
    pub features: Tensor<f64>,
    /// `features` with the masked words' frames replaced.
    pub masked: Tensor<f64>,
    pub spans: Vec<WordSpan>,
    pub tokens: Vec<usize>,
    pub fblt_targets: Vec<Vec<usize>>,
    pub st_targets: Vec<usize>,
    pub frame_mask: Vec<bool>,
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(3..vocab)).collect()
}

/// Transcripts stay short enough for CTC to be feasible.
pub fn random_case(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let frames: usize = rng.random_range(13..=24);
    let hidden = frames.div_ceil(4);
    let words = rng.random_range(2..=3);
    let f = cfg.feat_dim;
    let features = Tensor::new(vec![frames, f], (0..frames * f).map(|_| rng.random_range(-1.5..1.5)).collect())?;
    let mut bounds: Vec<usize> = vec![0];
    for w in 1..words {
        bounds.push(w * frames / words);
    }
    bounds.push(frames);
    let mut per_word: Vec<Vec<usize>> = Vec::new();
    let mut budget = hidden;
    let mut prev = usize::MAX;
    for w in 0..words {
        let want = if budget > words - w { rng.random_range(1..=2) } else { 1 };
        let mut toks = Vec::new();
        for _ in 0..want {
            let mut t = rng.random_range(3..cfg.src_vocab);
            while t == prev {
                t = rng.random_range(3..cfg.src_vocab);
            }
            toks.push(t);
            prev = t;
        }
        budget -= toks.len();
        per_word.push(toks);
    }
    let spans_fr: Vec<(usize, usize)> = (0..words).map(|w| (bounds[w], bounds[w + 1] - 1)).collect();
    let mut spans = WordSpan::from_utterance(&spans_fr, &per_word);
    let masked = select_and_mask(&features, &mut spans, 0.5, rng)?;
    let fblt_targets = (0..words)
        .map(|_| {
            let n = rng.random_range(0..=2);
            random_tokens(rng, n, cfg.tgt_vocab)
        })
        .collect();
    let n = rng.random_range(1..=4);
    let st_targets = random_tokens(rng, n, cfg.tgt_vocab);
    let mut frame_mask: Vec<bool> = (0..frames).map(|_| rng.random_bool(0.3)).collect();
    frame_mask[rng.random_range(0..frames)] = true;
    Ok(GradCase {
        features,
        masked,
        spans,
        tokens: per_word.concat(),
        fblt_targets,
        st_targets,
        frame_mask,
    })
}

/// Value of `kind` on `case`, with parameter gradients if requested.
pub fn objective(
    kind: LossKind,
    params: &ParamStore<f64>,
    case: &GradCase,
    with_grads: bool,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let mut ctx = Ctx::new(Graph::new(), params);
    let loss = match kind {
        LossKind::Asr => {
            let enc = ctx.encode_tensor(&case.features, Depth::Asr)?;
            asr_objective(&mut ctx, &enc, &case.tokens, 0.3)?.loss
        }
        LossKind::Fmlm => {
            let enc = ctx.encode_tensor(&case.masked, Depth::Asr)?;
            fmlm_loss(&mut ctx, enc.hidden_n, &case.spans)?.loss
        }
        LossKind::Fblt => {
            let enc = ctx.encode_tensor(&case.masked, Depth::Full)?;
            let top = enc.hidden_top.expect("full depth");
            fblt_loss(&mut ctx, top, &case.spans, &case.fblt_targets)?.loss
        }
        LossKind::Adv => {
            let enc = ctx.encode_tensor(&case.masked, Depth::Full)?;
            let a = fmlm_loss(&mut ctx, enc.hidden_n, &case.spans)?.loss;
            let top = enc.hidden_top.expect("full depth");
            let b = fblt_loss(&mut ctx, top, &case.spans, &case.fblt_targets)?.loss;
            adv_loss(&mut ctx.g, a, b, (1.0, 1.0))?
        }
        LossKind::St => {
            let enc = ctx.encode_tensor(&case.features, Depth::Full)?;
            st_loss(&mut ctx, &enc, &case.st_targets)?.loss
        }
        LossKind::Recon => {
            let masked = {
                let mut m = case.features.clone();
                let f = m.shape()[1];
                for (r, _) in case.frame_mask.iter().enumerate().filter(|(_, &b)| b) {
                    m.data_mut()[r * f..(r + 1) * f].fill(0.0);
                }
                m
            };
            let enc = ctx.encode_tensor(&masked, Depth::Asr)?;
            let pred = recon_predictions(&mut ctx, enc.hidden_n, case.features.shape()[0])?;
            recon_l1_loss(&mut ctx.g, pred, &case.features, &case.frame_mask)?
        }
    };
    let value = ctx.g.value(loss).item();
    if !with_grads {
        return Ok((value, BTreeMap::new()));
    }
    ctx.g.backward(loss)?;
    Ok((value, ctx.grads()))
}

/// Random parameters with no zero biases or unit gains.
pub fn random_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<f64>> {
    let mut p = ParamStore::<f32>::init(cfg, seed)?.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let names: Vec<String> = p.names().cloned().collect();
    for n in names {
        for x in p.get_mut(&n).expect("listed").data_mut() {
            *x += rng.random_range(-0.1..0.1);
        }
    }
    Ok(p)
}

/// `cases` random models and inputs; on each, a few parameter coordinates
/// that reach the loss are compared against central differences.
pub fn loss_gradcheck(kind: LossKind, cases: usize, seed: u64) -> Result<GradCheckReport> {
    let cfg = tiny_config();
    let mut report = GradCheckReport::default();
    for c in 0..cases {
        let case_seed = seed.wrapping_mul(1_000_003).wrapping_add(c as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
        let case = random_case(&cfg, &mut rng)?;
        let mut params = random_params(&cfg, case_seed)?;
        let (_, grads) = objective(kind, &params, &case, true)?;
        let names: Vec<&String> = grads.keys().collect();
        if names.is_empty() {
            // every FBLT assignment empty: the loss is the constant zero
            continue;
        }
        for _ in 0..PROBES_PER_CASE {
            let name = names[rng.random_range(0..names.len())].clone();
            let i = rng.random_range(0..grads[&name].len());
            let orig = params.get(&name).expect("bound").data()[i];
            params.get_mut(&name).expect("bound").data_mut()[i] = orig + STEP;
            let (up, _) = objective(kind, &params, &case, false)?;
            params.get_mut(&name).expect("bound").data_mut()[i] = orig - STEP;
            let (down, _) = objective(kind, &params, &case, false)?;
            params.get_mut(&name).expect("bound").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = grads[&name][i];
            let e = rel_err(analytic, numeric);
            report.merge(&GradCheckReport {
                checked: 1,
                max_rel_err: e,
                worst: Some((c, i, analytic, numeric)),
            });
        }
    }
    Ok(report)
}
