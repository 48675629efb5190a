use cst_autodiff::{Graph, Tensor};
use cst_core::data::vocab::{EOS, SOS};
use cst_core::diagnostics::{random_params, tiny_config};
use cst_core::losses::st_loss;
use cst_core::model::{
    beam_search, greedy_search, param_count, BeamConfig, Ctx, DecoderKind, Depth, ModelConfig, ModelScorer,
    ParamStore, StepScorer,
};
use cst_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn features(frames: usize, dim: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![frames, dim], (0..frames * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

#[test]
fn frontend_quarters_time() {
    let cfg = ModelConfig { feat_dim: 83, ..tiny_config() };
    let params = ParamStore::<f64>::init(&cfg, 3).unwrap();
    let mut ctx = Ctx::new(Graph::new(), &params);
    let enc = ctx.encode_tensor(&features(100, 83, 1), Depth::Full).unwrap();
    assert_eq!(enc.len, 25);
    assert_eq!(ctx.g.shape(enc.hidden_n), &[25, cfg.d_model]);
    assert_eq!(ctx.g.shape(enc.hidden_top.unwrap()), &[25, cfg.d_model]);
    for t in [4, 5, 7, 8, 9, 13, 31] {
        let mut ctx = Ctx::new(Graph::new(), &params);
        let enc = ctx.encode_tensor(&features(t, 83, 2), Depth::Asr).unwrap();
        assert_eq!(enc.len, t.div_ceil(4), "T = {t}");
    }
}

#[test]
fn too_short_input_is_rejected() {
    let cfg = tiny_config();
    let params = ParamStore::<f64>::init(&cfg, 3).unwrap();
    let mut ctx = Ctx::new(Graph::new(), &params);
    assert!(ctx.encode_tensor(&features(3, cfg.feat_dim, 1), Depth::Asr).is_err());
}

fn decode_rows(params: &ParamStore<f64>, prefix: &[usize]) -> Tensor<f64> {
    let cfg = &params.config;
    let mut ctx = Ctx::new(Graph::new(), params);
    let enc = ctx.encode_tensor(&features(17, cfg.feat_dim, 5), Depth::Full).unwrap();
    let lp = ctx.decode_forward(DecoderKind::St, enc.hidden_top.unwrap(), prefix).unwrap();
    ctx.g.value(lp).clone()
}

#[test]
fn decoder_is_causal() {
    let params = random_params(&tiny_config(), 11).unwrap();
    let base = [SOS, 3, 4, 5, 6];
    let v = tiny_config().tgt_vocab;
    let a = decode_rows(&params, &base);
    for k in 1..base.len() {
        let mut edited = base;
        edited[k] = (edited[k] + 1) % v;
        let b = decode_rows(&params, &edited);
        let row_bits = |t: &Tensor<f64>, r: usize| t.row(r).iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        for r in 0..k {
            assert_eq!(row_bits(&a, r), row_bits(&b, r), "edit at {k} changed row {r}");
        }
        assert_ne!(row_bits(&a, k), row_bits(&b, k));
    }
}

#[test]
fn decoder_rows_are_distributions() {
    let params = random_params(&tiny_config(), 12).unwrap();
    let lp = decode_rows(&params, &[SOS, 3, 7, 4]);
    for r in 0..4 {
        let s: f64 = lp.row(r).iter().map(|x| x.exp()).sum();
        assert!((s - 1.0).abs() < 1e-6, "row {r} sums to {s}");
    }
}

#[test]
fn out_of_vocabulary_prefix_is_an_input_error() {
    let params = random_params(&tiny_config(), 12).unwrap();
    let mut ctx = Ctx::new(Graph::new(), &params);
    let enc = ctx.encode_tensor(&features(17, 6, 5), Depth::Full).unwrap();
    let mem = enc.hidden_top.unwrap();
    assert!(ctx.decode_forward(DecoderKind::St, mem, &[SOS, 99]).is_err());
    assert!(ctx.decode_forward(DecoderKind::St, mem, &[3, 4]).is_err());
}

#[test]
fn cross_attention_carries_gradient_to_encoder() {
    let params = random_params(&tiny_config(), 13).unwrap();
    let mut ctx = Ctx::new(Graph::new(), &params);
    let enc = ctx.encode_tensor(&features(17, 6, 5), Depth::Full).unwrap();
    let term = st_loss(&mut ctx, &enc, &[3, 4]).unwrap();
    ctx.g.backward(term.loss).unwrap();
    let grads = ctx.grads();
    let g = &grads["enc.0.att.q.w"];
    assert!(g.iter().any(|x| x.abs() > 1e-8));
}

#[test]
fn forward_is_deterministic() {
    let params = random_params(&tiny_config(), 14).unwrap();
    let a = decode_rows(&params, &[SOS, 3, 4]);
    let b = decode_rows(&params, &[SOS, 3, 4]);
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn tap_ignores_blocks_above_it() {
    let cfg = tiny_config();
    let params = random_params(&cfg, 15).unwrap();
    let mut perturbed = params.clone();
    let top_names: Vec<String> = perturbed
        .names()
        .filter(|n| n.starts_with(&format!("enc.{}.", cfg.asr_blocks)) || n.starts_with("enc.norm_top"))
        .cloned()
        .collect();
    assert!(!top_names.is_empty());
    for n in &top_names {
        for x in perturbed.get_mut(n).unwrap().data_mut() {
            *x += 0.3;
        }
    }
    let run = |p: &ParamStore<f64>| {
        let mut ctx = Ctx::new(Graph::new(), p);
        let enc = ctx.encode_tensor(&features(21, cfg.feat_dim, 9), Depth::Full).unwrap();
        (ctx.g.value(enc.hidden_n).clone(), ctx.g.value(enc.hidden_top.unwrap()).clone())
    };
    let (n_a, top_a) = run(&params);
    let (n_b, top_b) = run(&perturbed);
    assert_eq!(bits(&n_a), bits(&n_b));
    assert_ne!(bits(&top_a), bits(&top_b));
}

#[test]
fn parameter_count_depends_only_on_config() {
    let cfg = ModelConfig::desk(20, 40, 35);
    let a = ParamStore::<f32>::init(&cfg, 1).unwrap();
    let b = ParamStore::<f32>::init(&cfg, 2).unwrap();
    assert_eq!(a.numel(), b.numel());
    assert_eq!(a.numel(), param_count(&cfg));
}

#[test]
fn checkpoint_file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let p = ParamStore::<f32>::init(&ModelConfig::desk(20, 40, 35), 4).unwrap();
    p.save(&path).unwrap();
    let q = ParamStore::<f32>::load(&path).unwrap();
    assert_eq!(p.config, q.config);
    for ((na, ta), (nb, tb)) in p.iter().zip(q.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.shape(), tb.shape());
        let ba: Vec<u32> = ta.data().iter().map(|x| x.to_bits()).collect();
        let bb: Vec<u32> = tb.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(ba, bb, "{na}");
    }
}

/// Next-token distributions drawn from a seed and the prefix.
struct ToyModel {
    seed: u64,
    classes: usize,
}

impl StepScorer for ToyModel {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut h = self.seed;
        for &t in prefix {
            h = h.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(t as u64 + 1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let logits: Vec<f64> = (0..self.classes).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lse = logits.iter().map(|x| x.exp()).sum::<f64>().ln();
        Ok(logits.iter().map(|x| x - lse).collect())
    }
}

/// Best `log P + β·(|y|+1)` over every sequence that ends in `</s>` within
/// `max_len` tokens.
fn exhaustive(model: &mut ToyModel, beta: f64, max_len: usize) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut frontier: Vec<(Vec<usize>, f64)> = vec![(vec![SOS], 0.0)];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for (prefix, lp) in frontier {
            let dist = model.next_log_probs(&prefix).unwrap();
            for (tok, l) in dist.iter().enumerate() {
                if tok == EOS {
                    let y = prefix[1..].to_vec();
                    let score = lp + l + beta * (y.len() + 1) as f64;
                    if best.as_ref().is_none_or(|b| score > b.1) {
                        best = Some((y, score));
                    }
                } else {
                    let mut p = prefix.clone();
                    p.push(tok);
                    next.push((p, lp + l));
                }
            }
        }
        frontier = next;
    }
    best.unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn beam_of_ten_matches_exhaustive_search(seed in any::<u64>(), max_len in 1usize..=3, beta in 0.0f64..1.0) {
        let mut m = ToyModel { seed, classes: 3 };
        let (y, score) = exhaustive(&mut m, beta, max_len);
        let h = beam_search(&mut m, BeamConfig { beam: 10, length_penalty: beta, max_len }).unwrap();
        prop_assert_eq!(h.tokens, y);
        prop_assert!((h.score - score).abs() < 1e-12);
    }

    #[test]
    fn unbounded_beam_matches_exhaustive_search(seed in any::<u64>(), beta in 0.0f64..1.0) {
        let mut m = ToyModel { seed, classes: 4 };
        let (y, score) = exhaustive(&mut m, beta, 5);
        let h = beam_search(&mut m, BeamConfig { beam: 4usize.pow(5), length_penalty: beta, max_len: 5 }).unwrap();
        prop_assert_eq!(h.tokens, y);
        prop_assert!((h.score - score).abs() < 1e-12);
    }

    #[test]
    fn beam_of_one_is_greedy(seed in any::<u64>(), max_len in 1usize..8, beta in 0.0f64..1.0) {
        let mut m = ToyModel { seed, classes: 6 };
        let b = beam_search(&mut m, BeamConfig { beam: 1, length_penalty: beta, max_len }).unwrap();
        let g = greedy_search(&mut m, beta, max_len).unwrap();
        prop_assert_eq!(b, g);
    }
}

#[test]
fn beam_of_one_is_greedy_on_a_network() {
    for seed in 0..5 {
        let params = random_params(&tiny_config(), 100 + seed).unwrap();
        let x = features(23, 6, seed);
        let mut s = ModelScorer::new(&params, &x, DecoderKind::St).unwrap();
        let b = beam_search(&mut s, BeamConfig { beam: 1, length_penalty: 0.2, max_len: 12 }).unwrap();
        let g = greedy_search(&mut s, 0.2, 12).unwrap();
        assert_eq!(b, g);
    }
}
