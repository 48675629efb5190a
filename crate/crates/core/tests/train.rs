use std::collections::BTreeMap;

use cst_autodiff::Tensor;
use cst_core::data::{synth_corpus, SynthConfig};
use cst_core::model::{average_checkpoints, Group, ModelConfig, ParamStore};
use cst_core::train::{
    noam_lr, phase_init, prepare, run_curriculum, run_phase, AdamConfig, AdamState, CurriculumMode,
    CurriculumPlan, DataOptions, EpochMetrics, PhaseSpec, PreparedData, TrainConfig,
};
use cst_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_data(asr_only: f64) -> PreparedData {
    let sc = SynthConfig {
        n_utts: 96,
        n_dev: 16,
        vocab_size: 12,
        asr_only_fraction: asr_only,
        ..SynthConfig::default()
    };
    let c = synth_corpus(&sc).unwrap();
    prepare(c.train, c.dev, &DataOptions::default()).unwrap()
}

fn model_for(data: &PreparedData) -> ModelConfig {
    let src = data.train.iter().flat_map(|e| e.src_tokens.iter()).max().unwrap() + 1;
    ModelConfig::desk(data.train[0].features.shape()[1], src.max(4), data.tgt_vocab.len())
}

fn small_train(seed: u64) -> TrainConfig {
    TrainConfig { epochs: [5, 5, 5], avg_last: 2, ..TrainConfig::desk(seed) }
}

fn bits(p: &ParamStore<f32>) -> Vec<(String, Vec<u32>)> {
    p.iter().map(|(n, t)| (n.clone(), t.data().iter().map(|x| x.to_bits()).collect())).collect()
}

fn loss_bits(ms: &[EpochMetrics]) -> Vec<u64> {
    ms.iter().map(|m| m.loss.to_bits()).collect()
}

#[test]
fn noam_quarter_decay_and_peak() {
    for w in [1, 7, 400, 25_000] {
        assert_eq!(noam_lr(4 * w, w, 256, 1.0), noam_lr(w, w, 256, 1.0) / 2.0);
        assert!(noam_lr(w, w, 256, 1.0) >= noam_lr(w - w / 2, w, 256, 1.0));
        assert!(noam_lr(w, w, 256, 1.0) >= noam_lr(w + 1, w, 256, 1.0));
    }
}

fn scalar_store(v: f32) -> ParamStore<f32> {
    let cfg = ModelConfig { d_model: 8, d_ff: 8, heads: 2, conv_channels: 1, ..ModelConfig::desk(4, 5, 5) };
    let mut p = ParamStore::init(&cfg, 0).unwrap();
    p.get_mut("enc.0.ln1.g").unwrap().data_mut()[0] = v;
    p
}

#[test]
fn adam_first_step_moves_by_the_learning_rate() {
    for g in [0.5f32, -3.0, 1e-3] {
        let mut p = scalar_store(1.0);
        let mut grads = BTreeMap::new();
        let mut gv = vec![0.0f32; 8];
        gv[0] = g;
        grads.insert("enc.0.ln1.g".to_string(), gv);
        let mut s = AdamState::new();
        s.step(&mut p, &grads, 0.01, &AdamConfig::default()).unwrap();
        let x = p.get("enc.0.ln1.g").unwrap().data();
        let moved = 1.0 - x[0] as f64;
        assert!((moved - 0.01 * g.signum() as f64).abs() < 1e-6, "g {g}: moved {moved}");
        assert_eq!(x[1], 1.0);
    }
}

#[test]
fn adam_leaves_parameters_with_zero_gradient() {
    let mut p = scalar_store(0.25);
    let before = bits(&p);
    let mut grads = BTreeMap::new();
    grads.insert("enc.0.ln1.g".to_string(), vec![0.0f32; 8]);
    let mut s = AdamState::new();
    for _ in 0..3 {
        s.step(&mut p, &grads, 0.1, &AdamConfig::default()).unwrap();
    }
    assert_eq!(bits(&p), before);
}

#[test]
fn averaging_matches_an_independent_mean() {
    let cfg = ModelConfig::desk(6, 9, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let stores: Vec<ParamStore<f64>> = (0..5)
        .map(|i| {
            let mut p = ParamStore::<f32>::init(&cfg, i).unwrap().cast::<f64>();
            let names: Vec<String> = p.names().cloned().collect();
            for n in names {
                p.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|x| *x += rng.random_range(-1.0..1.0));
            }
            p
        })
        .collect();
    let avg = ParamStore::average(&stores).unwrap();
    for (name, t) in avg.iter() {
        for (i, &v) in t.data().iter().enumerate() {
            let mut s = 0.0;
            for st in &stores {
                s += st.get(name).unwrap().data()[i];
            }
            assert!((v - s / 5.0).abs() < 1e-12, "{name}[{i}]");
        }
    }
    let same = ParamStore::average(&[stores[0].clone(), stores[0].clone(), stores[0].clone()]).unwrap();
    for ((_, a), (_, b)) in same.iter().zip(stores[0].iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}

#[test]
fn averaging_checkpoint_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::desk(6, 9, 7);
    let mut a = ParamStore::<f32>::init(&cfg, 0).unwrap();
    let mut b = a.clone();
    a.get_mut("head.fmlm.w").unwrap().data_mut().fill(0.0);
    b.get_mut("head.fmlm.w").unwrap().data_mut().fill(2.0);
    let (pa, pb) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    a.save(&pa).unwrap();
    b.save(&pb).unwrap();
    let m = average_checkpoints(&[&pa, &pb]).unwrap();
    assert!(m.get("head.fmlm.w").unwrap().data().iter().all(|&x| x == 1.0));
    let other = ParamStore::<f32>::init(&ModelConfig::desk(6, 9, 8), 0).unwrap();
    let pc = dir.path().join("c.ckpt");
    other.save(&pc).unwrap();
    assert!(matches!(average_checkpoints(&[&pa, &pc]), Err(Error::Config(_))));
}

#[test]
fn phase_transfer_copies_exactly_the_declared_groups() {
    let cfg = ModelConfig::desk(20, 30, 25);
    let mut prev = ParamStore::<f32>::init(&cfg, 99).unwrap();
    let names: Vec<String> = prev.names().cloned().collect();
    for n in &names {
        prev.get_mut(n).unwrap().data_mut().iter_mut().for_each(|x| *x += 0.5);
    }
    let spec = PhaseSpec::adv(1, true, true);
    let next = phase_init(&spec, &cfg, 3, Some(&prev)).unwrap();
    let fresh = ParamStore::<f32>::init(&cfg, 3).unwrap();
    let transferred = |n: &str| {
        n.starts_with("frontend.") || n.starts_with("enc.norm_n") || (0..cfg.asr_blocks).any(|i| n.starts_with(&format!("enc.{i}.")))
    };
    assert_eq!(spec.transfer, vec![Group::Frontend, Group::EncoderBottom, Group::NormN]);
    for n in &names {
        let want = if transferred(n) { prev.get(n) } else { fresh.get(n) };
        assert_eq!(next.get(n), want, "{n}");
    }
}

#[test]
fn training_loss_falls_in_every_phase() {
    let data = small_data(0.25);
    let model = model_for(&data);
    let tc = small_train(1);
    let plan = CurriculumPlan::build(CurriculumMode::Full, &tc, data.train.len(), data.train.iter().filter(|e| e.st_targets.is_some()).count()).unwrap();
    let out = run_curriculum(&plan, &model, &data.train, &data.dev, &tc, &mut |_, _| Ok(())).unwrap();
    assert_eq!(out.phases.len(), 3);
    for p in &out.phases {
        let l: Vec<f64> = p.metrics.iter().map(|m| m.loss).collect();
        assert_eq!(l.len(), 5, "{}", p.name);
        assert!(l[4] < l[0], "{}: {l:?}", p.name);
        assert!(p.metrics.iter().all(|m| m.acc.is_some()));
    }
    let st = out.phase("phase3").unwrap();
    assert!(st.averaged.is_some());
    assert!(st.metrics.iter().all(|m| m.dev_loss.is_some()));
    // step counter restarts at every phase
    assert_eq!(out.phases[0].metrics[0].steps, 96usize.div_ceil(16));
    assert_eq!(out.phases[1].metrics[0].steps, 96usize.div_ceil(16));
    assert!(out.dev.is_some());
}

#[test]
fn identical_runs_are_bit_identical() {
    let data = small_data(0.0);
    let model = model_for(&data);
    let tc = TrainConfig { epochs: [2, 1, 2], ..small_train(5) };
    let plan = CurriculumPlan::build(CurriculumMode::Full, &tc, data.train.len(), data.train.len()).unwrap();
    let run = || run_curriculum(&plan, &model, &data.train, &data.dev, &tc, &mut |_, _| Ok(())).unwrap();
    let (a, b) = (run(), run());
    for (pa, pb) in a.phases.iter().zip(&b.phases) {
        assert_eq!(loss_bits(&pa.metrics), loss_bits(&pb.metrics));
    }
    assert_eq!(bits(&a.model), bits(&b.model));
}

#[test]
fn minus_phase2_is_phase1_then_translation() {
    let data = small_data(0.0);
    let model = model_for(&data);
    let tc = TrainConfig { epochs: [2, 1, 2], ..small_train(2) };
    let n = data.train.len();
    let plan = CurriculumPlan::build(CurriculumMode::MinusPhase2, &tc, n, n).unwrap();
    let whole = run_curriculum(&plan, &model, &data.train, &data.dev, &tc, &mut |_, _| Ok(())).unwrap();

    let asr = PhaseSpec::asr(2);
    let p1 = run_phase(&asr, phase_init(&asr, &model, tc.seed, None).unwrap(), &data.train, &data.dev, &tc, &mut |_, _| Ok(())).unwrap();
    let st = PhaseSpec::st(2);
    let p3 = run_phase(&st, phase_init(&st, &model, tc.seed, Some(p1.best())).unwrap(), &data.train, &data.dev, &tc, &mut |_, _| Ok(())).unwrap();
    assert_eq!(bits(&whole.model), bits(p3.best()));
}

#[test]
fn bad_configuration_fails_before_any_update() {
    let data = small_data(0.0);
    let model = model_for(&data);
    let mut calls = 0;
    let mut hook = |_: &EpochMetrics, _: &ParamStore<f32>| {
        calls += 1;
        Ok(())
    };
    let n = data.train.len();
    let bad = TrainConfig { batch_size: 0, ..small_train(1) };
    let plan = CurriculumPlan::build(CurriculumMode::Full, &small_train(1), n, n).unwrap();
    assert!(matches!(run_curriculum(&plan, &model, &data.train, &data.dev, &bad, &mut hook), Err(Error::Config(_))));
    let bad = TrainConfig { alpha: 1.5, ..small_train(1) };
    assert!(run_curriculum(&plan, &model, &data.train, &data.dev, &bad, &mut hook).is_err());

    // translation phase with no translated utterances
    let mut untranslated = data.train.clone();
    untranslated.iter_mut().for_each(|e| e.st_targets = None);
    assert!(run_curriculum(&plan, &model, &untranslated, &data.dev, &small_train(1), &mut hook).is_err());
    drop(hook);
    assert_eq!(calls, 0);
}

#[test]
fn too_short_features_are_rejected() {
    let data = small_data(0.0);
    let model = model_for(&data);
    let mut train = data.train.clone();
    train[0].features = Tensor::zeros(&[2, model.feat_dim]);
    let spec = PhaseSpec::asr(1);
    let init = phase_init(&spec, &model, 1, None).unwrap();
    assert!(run_phase(&spec, init, &train, &[], &small_train(1), &mut |_, _| Ok(())).is_err());
}
