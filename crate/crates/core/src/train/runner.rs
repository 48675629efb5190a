use std::collections::{BTreeMap, VecDeque};
use std::time::Instant;

use cst_autodiff::{Graph, Var};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::example::Example;
use super::optim::{clip_grad_norm, noam_lr, AdamState};
use super::plan::{CurriculumPlan, DataSource, PhaseKind, PhaseSpec, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{
    adv_loss, asr_objective, fblt_loss, fmlm_loss, mask_frames, recon_l1_loss, recon_predictions, select_and_mask,
    specaugment, st_loss,
};
use crate::model::{Ctx, Depth, ModelConfig, ParamStore};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: String,
    pub epoch: usize,
    /// Updates taken in this phase so far.
    pub steps: usize,
    pub lr: f64,
    /// Mean per-utterance objective.
    pub loss: f64,
    /// Headline token accuracy of the phase, if it predicts tokens.
    pub acc: Option<f64>,
    /// Per-objective means and accuracies.
    pub parts: BTreeMap<String, f64>,
    pub dev_loss: Option<f64>,
    pub dev_acc: Option<f64>,
    pub seconds: f64,
}

/// Result of one phase.
#[derive(Clone, Debug)]
pub struct PhaseOutcome {
    pub name: String,
    /// Parameters after the last update.
    pub params: ParamStore<f32>,
    /// Mean of the last `avg_last` epoch checkpoints (translation phases).
    pub averaged: Option<ParamStore<f32>>,
    pub metrics: Vec<EpochMetrics>,
    pub steps: usize,
}

impl PhaseOutcome {
    /// The parameters handed on: averaged if available.
    pub fn best(&self) -> &ParamStore<f32> {
        self.averaged.as_ref().unwrap_or(&self.params)
    }
}

pub type EpochHook<'a> = dyn FnMut(&EpochMetrics, &ParamStore<f32>) -> Result<()> + 'a;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed, |acc, &p| splitmix(acc ^ p))
}

fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

#[derive(Default)]
struct Tally {
    sums: BTreeMap<&'static str, (f64, usize)>,
    hits: BTreeMap<&'static str, (usize, usize)>,
}

impl Tally {
    fn value(&mut self, key: &'static str, v: f64) {
        let e = self.sums.entry(key).or_default();
        e.0 += v;
        e.1 += 1;
    }

    fn hits(&mut self, key: &'static str, correct: usize, total: usize) {
        let e = self.hits.entry(key).or_default();
        e.0 += correct;
        e.1 += total;
    }

    fn acc(&self, key: &str) -> Option<f64> {
        self.hits.get(key).filter(|h| h.1 > 0).map(|&(c, t)| c as f64 / t as f64)
    }

    fn parts(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (k, &(s, n)) in &self.sums {
            if *k == "ctc_skipped" {
                out.insert(k.to_string(), s);
            } else if n > 0 {
                out.insert(k.to_string(), s / n as f64);
            }
        }
        for k in self.hits.keys() {
            if let Some(a) = self.acc(k) {
                out.insert(format!("{k}_acc"), a);
            }
        }
        out
    }
}

fn fblt_targets(ex: &Example) -> Result<&[Vec<usize>]> {
    ex.fblt_targets
        .as_deref()
        .ok_or_else(|| Error::Config(format!("{}: lexicon translation needs target assignments", ex.id)))
}

fn adv_terms(
    ctx: &mut Ctx<'_, f32>,
    ex: &Example,
    fmlm: bool,
    fblt: bool,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    tally: &mut Tally,
) -> Result<Var> {
    let mut spans = ex.spans.clone();
    let masked = select_and_mask(&ex.features, &mut spans, cfg.mask_ratio, rng)?;
    let enc = ctx.encode_tensor(&masked, Depth::Full)?;
    let zero = ctx.constant(cst_autodiff::Tensor::scalar(0.0));
    let a = if fmlm {
        let t = fmlm_loss(ctx, enc.hidden_n, &spans)?;
        tally.value("fmlm", ctx.g.value(t.loss).item() as f64);
        tally.hits("fmlm", t.correct, t.total);
        t.loss
    } else {
        zero
    };
    let b = if fblt {
        let top = enc.hidden_top.expect("full depth");
        let t = fblt_loss(ctx, top, &spans, fblt_targets(ex)?)?;
        if t.total > 0 {
            tally.value("fblt", ctx.g.value(t.loss).item() as f64);
            tally.hits("fblt", t.correct, t.total);
        }
        t.loss
    } else {
        zero
    };
    Ok(adv_loss(&mut ctx.g, a, b, cfg.adv_weights)?)
}

fn asr_terms(
    ctx: &mut Ctx<'_, f32>,
    ex: &Example,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    tally: &mut Tally,
) -> Result<Var> {
    let feats = specaugment(&ex.features, &cfg.specaugment, rng);
    let enc = ctx.encode_tensor(&feats, Depth::Asr)?;
    let t = asr_objective(ctx, &enc, &ex.src_tokens, cfg.alpha)?;
    match t.ctc {
        Some(c) => tally.value("ctc", ctx.g.value(c).item() as f64),
        None => tally.value("ctc_skipped", 1.0),
    }
    tally.value("ce", ctx.g.value(t.ce.loss).item() as f64);
    tally.hits("ce", t.ce.correct, t.ce.total);
    Ok(t.loss)
}

/// Graph node of one utterance's phase objective.
fn example_loss(
    ctx: &mut Ctx<'_, f32>,
    kind: PhaseKind,
    ex: &Example,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    tally: &mut Tally,
) -> Result<Var> {
    match kind {
        PhaseKind::Asr => asr_terms(ctx, ex, cfg, rng, tally),
        PhaseKind::Adv { fmlm, fblt } => adv_terms(ctx, ex, fmlm, fblt, cfg, rng, tally),
        PhaseKind::Multi3 => {
            let a = asr_terms(ctx, ex, cfg, rng, tally)?;
            let b = adv_terms(ctx, ex, true, true, cfg, rng, tally)?;
            Ok(ctx.g.add(a, b)?)
        }
        PhaseKind::Recon => {
            let (masked, mask) = mask_frames(&ex.features, cfg.mask_ratio, rng)?;
            let enc = ctx.encode_tensor(&masked, Depth::Asr)?;
            let pred = recon_predictions(ctx, enc.hidden_n, ex.frames())?;
            let l = recon_l1_loss(&mut ctx.g, pred, &ex.features, &mask)?;
            tally.value("recon", ctx.g.value(l).item() as f64);
            Ok(l)
        }
        PhaseKind::St => {
            let targets = ex
                .st_targets
                .as_deref()
                .ok_or_else(|| Error::Config(format!("{}: translation phase on an untranslated utterance", ex.id)))?;
            let feats = specaugment(&ex.features, &cfg.specaugment, rng);
            let enc = ctx.encode_tensor(&feats, Depth::Full)?;
            let t = st_loss(ctx, &enc, targets)?;
            tally.value("st", ctx.g.value(t.loss).item() as f64);
            tally.hits("st", t.correct, t.total);
            Ok(t.loss)
        }
    }
}

fn headline(kind: PhaseKind) -> Option<&'static str> {
    match kind {
        PhaseKind::Asr => Some("ce"),
        PhaseKind::Adv { fmlm: true, .. } | PhaseKind::Multi3 => Some("fmlm"),
        PhaseKind::Adv { fblt: true, .. } => Some("fblt"),
        PhaseKind::Adv { .. } | PhaseKind::Recon => None,
        PhaseKind::St => Some("st"),
    }
}

/// The training examples `spec` draws from.
pub fn phase_examples<'a>(spec: &PhaseSpec, train: &'a [Example]) -> Vec<&'a Example> {
    match spec.data {
        DataSource::All => train.iter().collect(),
        DataSource::TranslationOnly => train.iter().filter(|e| e.st_targets.is_some()).collect(),
    }
}

/// Rejects data that cannot feed `spec` before any update is made.
pub fn check_phase_data(spec: &PhaseSpec, data: &[&Example]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config(format!("{}: no training examples", spec.name)));
    }
    let needs_spans = matches!(spec.kind, PhaseKind::Adv { .. } | PhaseKind::Multi3);
    let needs_targets = matches!(spec.kind, PhaseKind::Adv { fblt: true, .. } | PhaseKind::Multi3);
    for ex in data {
        if needs_spans && ex.spans.is_empty() {
            return Err(Error::Config(format!("{}: {} has no word spans", spec.name, ex.id)));
        }
        if needs_targets && ex.fblt_targets.is_none() {
            return Err(Error::Config(format!("{}: {} has no target assignment", spec.name, ex.id)));
        }
        if matches!(spec.kind, PhaseKind::Asr | PhaseKind::Multi3) && ex.src_tokens.is_empty() {
            return Err(Error::Config(format!("{}: {} has no transcript tokens", spec.name, ex.id)));
        }
    }
    Ok(())
}

/// Phase parameters: a fresh seeded initialization with `spec.transfer`
/// groups copied from `previous`.
pub fn phase_init(spec: &PhaseSpec, config: &ModelConfig, seed: u64, previous: Option<&ParamStore<f32>>) -> Result<ParamStore<f32>> {
    let mut params = ParamStore::init(config, seed)?;
    if let Some(prev) = previous {
        if !spec.transfer.is_empty() {
            params.transfer_from(prev, &spec.transfer)?;
        }
    }
    Ok(params)
}

/// Mean per-utterance translation loss and teacher-forced token accuracy
/// over the translated examples; `None` if there are none.
pub fn evaluate_st(params: &ParamStore<f32>, data: &[Example]) -> Result<Option<(f64, f64)>> {
    let mut loss = 0.0;
    let mut n = 0;
    let (mut correct, mut total) = (0, 0);
    for ex in data {
        let Some(targets) = &ex.st_targets else { continue };
        let mut ctx = Ctx::new(Graph::new(), params);
        let enc = ctx.encode_tensor(&ex.features, Depth::Full)?;
        let t = st_loss(&mut ctx, &enc, targets)?;
        loss += ctx.g.value(t.loss).item() as f64;
        n += 1;
        correct += t.correct;
        total += t.total;
    }
    Ok((n > 0).then(|| (loss / n as f64, correct as f64 / total as f64)))
}

/// Trains `params` on `spec` and returns the trained parameters.
pub fn run_phase(
    spec: &PhaseSpec,
    mut params: ParamStore<f32>,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_>,
) -> Result<PhaseOutcome> {
    cfg.validate()?;
    let data = phase_examples(spec, train);
    check_phase_data(spec, &data)?;
    let phase_seed = mix(&[cfg.seed, name_hash(&spec.name)]);
    let d_model = params.config.d_model;
    let mut adam = AdamState::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(phase_seed);
    let mut metrics = Vec::new();
    let mut recent: VecDeque<ParamStore<f32>> = VecDeque::new();
    let mut steps = 0;
    let budget = spec.max_steps.unwrap_or(usize::MAX);
    info!("{}: {} examples, {} epochs", spec.name, data.len(), spec.epochs);

    for epoch in 1..=spec.epochs {
        if steps >= budget {
            break;
        }
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut tally = Tally::default();
        let mut loss_sum = 0.0;
        let mut seen = 0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            if steps >= budget {
                break;
            }
            steps += 1;
            let mut ctx = Ctx::new(Graph::training(mix(&[phase_seed, steps as u64, 1])), &params);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(&[phase_seed, epoch as u64, i as u64]));
                let l = example_loss(&mut ctx, spec.kind, data[i], cfg, &mut rng, &mut tally)?;
                loss_sum += ctx.g.value(l).item() as f64;
                losses.push(l);
            }
            seen += batch.len();
            let total = if losses.len() == 1 { losses[0] } else { ctx.g.add_all(&losses)? };
            let mean = ctx.g.scale(total, 1.0 / batch.len() as f64);
            let value = ctx.g.value(mean).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            ctx.g.backward(mean)?;
            let mut grads = ctx.grads();
            drop(ctx);
            let norm = clip_grad_norm(&mut grads, cfg.grad_clip);
            if !norm.is_finite() {
                return Err(Error::NonFinite("gradient norm"));
            }
            tally.value("grad_norm", norm);
            lr = noam_lr(steps, cfg.warmup, d_model, cfg.lr_scale);
            adam.step(&mut params, &grads, lr, &cfg.adam)?;
        }
        if let Some(&(s, _)) = tally.sums.get("ctc_skipped") {
            warn!("{} epoch {epoch}: CTC dropped for {s} utterances too short for their transcript", spec.name);
        }
        let dev_eval = if spec.kind == PhaseKind::St { evaluate_st(&params, dev)? } else { None };
        let m = EpochMetrics {
            phase: spec.name.clone(),
            epoch,
            steps,
            lr,
            loss: loss_sum / seen.max(1) as f64,
            acc: headline(spec.kind).and_then(|k| tally.acc(k)),
            parts: tally.parts(),
            dev_loss: dev_eval.map(|d| d.0),
            dev_acc: dev_eval.map(|d| d.1),
            seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "{} epoch {epoch}: loss {:.4} acc {:?} dev {:?} ({:.1}s)",
            spec.name, m.loss, m.acc, dev_eval, m.seconds
        );
        hook(&m, &params)?;
        metrics.push(m);
        if spec.kind == PhaseKind::St {
            recent.push_back(params.clone());
            if recent.len() > cfg.avg_last {
                recent.pop_front();
            }
        }
    }
    let averaged = if recent.is_empty() {
        None
    } else {
        Some(ParamStore::average(&Vec::from(recent))?)
    };
    Ok(PhaseOutcome {
        name: spec.name.clone(),
        params,
        averaged,
        metrics,
        steps,
    })
}

/// Result of a whole pipeline.
#[derive(Clone, Debug)]
pub struct CurriculumOutcome {
    pub phases: Vec<PhaseOutcome>,
    /// Parameters of the final translation model.
    pub model: ParamStore<f32>,
    pub dev: Option<(f64, f64)>,
}

impl CurriculumOutcome {
    pub fn phase(&self, name: &str) -> Option<&PhaseOutcome> {
        self.phases.iter().find(|p| p.name == name)
    }
}

/// Runs every phase of `plan` in order, handing each phase's parameters to
/// the next.
pub fn run_curriculum(
    plan: &CurriculumPlan,
    config: &ModelConfig,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_>,
) -> Result<CurriculumOutcome> {
    cfg.validate()?;
    config.validate()?;
    for spec in &plan.phases {
        check_phase_data(spec, &phase_examples(spec, train))?;
    }
    let mut phases: Vec<PhaseOutcome> = Vec::new();
    for spec in &plan.phases {
        let init = phase_init(spec, config, cfg.seed, phases.last().map(PhaseOutcome::best))?;
        phases.push(run_phase(spec, init, train, dev, cfg, hook)?);
    }
    let model = phases
        .last()
        .ok_or_else(|| Error::Config("empty curriculum".into()))?
        .best()
        .clone();
    let dev = evaluate_st(&model, dev)?;
    Ok(CurriculumOutcome { phases, model, dev })
}
