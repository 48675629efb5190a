//! The `cst` command line: corpus synthesis, alignment, curriculum
//! training, decoding and scoring.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use cst_core::align::{
    align_corpus, assign_targets, build_lexicon, pharaoh, AlignedPair, FinalRule, LexiconTable, TargetAssignment,
};
use cst_core::data::{
    corpus_bleu, read_manifest, synth_corpus, CmvnStats, SynthConfig, TokenMode, Utterance, Vocab,
};
use cst_autodiff::gradcheck::op_suite;
use cst_core::diagnostics::{loss_gradcheck, LossKind, GRADCHECK_TOL};
use cst_core::model::{beam_search, greedy_search, BeamConfig, DecoderKind, ModelConfig, ModelScorer, ParamStore};
use cst_core::train::{
    build_examples, check_phase_data, evaluate_st, phase_examples, phase_init, run_curriculum, run_phase, target_vocab, CurriculumMode, CurriculumPlan,
    DataOptions, EpochMetrics, Example, PhaseOutcome, PhaseSpec, TrainConfig,
};
use cst_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "cst", version, about = "Curriculum pre-training for end-to-end speech translation")]
pub struct Cli {
    /// Directory that relative `--run` names resolve against.
    #[arg(long, env = "CST_RUN_ROOT", default_value = "runs", global = true)]
    pub run_root: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic speech translation corpus.
    Synth(SynthArgs),
    /// Word-align the training translations.
    Align(AlignArgs),
    /// Estimate a lexical translation table from alignments.
    BuildLexicon(LexiconArgs),
    /// Assign target words to every source word.
    AssignTargets(AssignArgs),
    /// Run the transcription or advanced pre-training phase.
    Pretrain(PretrainArgs),
    /// Train the translation model.
    Finetune(FinetuneArgs),
    /// Translate a manifest split with a trained model.
    Decode(DecodeArgs),
    /// Score hypotheses against references.
    EvalBleu(BleuArgs),
    /// Finite-difference check of every training objective.
    Gradcheck(GradcheckArgs),
    /// Run a whole curriculum variant.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub n_utts: usize,
    #[arg(long, default_value_t = 0)]
    pub n_dev: usize,
    /// Words per language.
    #[arg(long, default_value_t = 20)]
    pub vocab: usize,
    #[arg(long, default_value_t = 4)]
    pub span_min: usize,
    #[arg(long, default_value_t = 8)]
    pub span_max: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Keep target word order identical to the source.
    #[arg(long)]
    pub no_reorder: bool,
    #[arg(long, default_value_t = 20)]
    pub feat_dim: usize,
    /// Fraction of utterances without a translation.
    #[arg(long, default_value_t = 0.0)]
    pub asr_only: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RuleArg {
    Either,
    Both,
}

impl From<RuleArg> for FinalRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Either => FinalRule::Either,
            RuleArg::Both => FinalRule::Both,
        }
    }
}

#[derive(Args, Debug)]
pub struct AlignArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Pharaoh output, one line per translated training utterance.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub iterations: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub smoothing: f64,
    #[arg(long, value_enum, default_value_t = RuleArg::Either)]
    pub final_rule: RuleArg,
}

#[derive(Args, Debug)]
pub struct LexiconArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub alignment: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AssignArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub alignment: PathBuf,
    #[arg(long)]
    pub lexicon: PathBuf,
    /// JSON lines `{"id", "per_word"}` for every training utterance.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Paper,
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TgtModeArg {
    Char,
    Word,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Corpus directory with train.jsonl, dev.jsonl and src_vocab.txt.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory, relative to the run root unless absolute.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_enum, default_value_t = Profile::Paper)]
    pub profile: Profile,
    /// JSON file with `model` and/or `train` objects merged over the profile.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub avg_last: Option<usize>,
    #[arg(long)]
    pub lr_scale: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Epochs of the three phases, e.g. `10,5,10`.
    #[arg(long, value_parser = parse_epochs)]
    pub epochs: Option<[usize; 3]>,
    /// Target tokenization; characters for the paper profile, whole words
    /// for the desk profile.
    #[arg(long, value_enum)]
    pub tgt_mode: Option<TgtModeArg>,
    /// Precomputed target assignments instead of aligning on the fly.
    #[arg(long)]
    pub assignments: Option<PathBuf>,
}

fn parse_epochs(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<usize>| format!("expected three epoch counts, got {}", v.len()))
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("which").required(true).args(["phase", "multi3"]))]
pub struct PretrainArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub phase: Option<u8>,
    /// Transcription and both advanced objectives in a single phase.
    #[arg(long)]
    pub multi3: bool,
    /// Phase 2 starting checkpoint (default: the run's phase-1 result).
    #[arg(long, conflicts_with = "from_scratch")]
    pub from: Option<PathBuf>,
    /// Phase 2 from random initialization.
    #[arg(long)]
    pub from_scratch: bool,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Starting checkpoint (default: the run's phase-2 result).
    #[arg(long, conflicts_with = "from_scratch")]
    pub from: Option<PathBuf>,
    #[arg(long)]
    pub from_scratch: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// full, minus_fmlm, minus_fblt, minus_phase1, minus_phase2, multi3,
    /// no_pretrain or recon_pretrain.
    #[arg(long)]
    pub mode: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Dev,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Dev)]
    pub split: Split,
    /// Parameters to decode with (default: the run's final model).
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub beam: usize,
    #[arg(long, default_value_t = 0.2)]
    pub length_penalty: f64,
    #[arg(long, conflicts_with = "beam")]
    pub greedy: bool,
    /// Longest output in tokens (default: twice the encoder length).
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Hypothesis file (default: `<run>/decode.<split>.txt`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BleuArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub max_n: usize,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Random models and inputs per objective.
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> Result<Value> {
    let root = cli.run_root;
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Align(a) => align(a),
        Command::BuildLexicon(a) => lexicon(a),
        Command::AssignTargets(a) => assign(a),
        Command::Pretrain(a) => pretrain(&root, a),
        Command::Finetune(a) => finetune(&root, a),
        Command::Decode(a) => decode(&root, a),
        Command::EvalBleu(a) => eval_bleu(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate(&root, a),
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

fn synth(a: SynthArgs) -> Result<Value> {
    let cfg = SynthConfig {
        seed: a.seed,
        n_utts: a.n_utts,
        n_dev: a.n_dev,
        vocab_size: a.vocab,
        span_len: (a.span_min, a.span_max),
        noise: a.noise,
        reorder: !a.no_reorder,
        feat_dim: a.feat_dim,
        asr_only_fraction: a.asr_only,
        ..SynthConfig::default()
    };
    let corpus = synth_corpus(&cfg)?;
    corpus.write(&a.out)?;
    Ok(json!({
        "out": a.out,
        "train": corpus.train.len(),
        "dev": corpus.dev.len(),
        "src_vocab": corpus.src_vocab.len(),
        "tgt_words": corpus.tgt_words.len(),
    }))
}

/// A corpus directory as written by `synth`.
struct Dataset {
    train: Vec<Utterance>,
    dev: Vec<Utterance>,
    src_vocab: Vocab,
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    let train_path = dir.join("train.jsonl");
    let vocab_path = dir.join("src_vocab.txt");
    require(&train_path)?;
    require(&vocab_path)?;
    let dev_path = dir.join("dev.jsonl");
    let dev = if dev_path.exists() { read_manifest(&dev_path)?.utterances } else { Vec::new() };
    Ok(Dataset {
        train: read_manifest(&train_path)?.utterances,
        dev,
        src_vocab: Vocab::load(&vocab_path)?,
    })
}

fn translated(utts: &[Utterance]) -> Vec<(Vec<String>, Vec<String>)> {
    utts.iter()
        .filter_map(|u| u.tgt_words.as_ref().map(|t| (u.src_words.clone(), t.clone())))
        .collect()
}

fn aligned_pairs(utts: &[Utterance], alignment: &Path) -> Result<Vec<AlignedPair>> {
    require(alignment)?;
    let links = pharaoh::read(alignment)?;
    let corpus = translated(utts);
    if links.len() != corpus.len() {
        return Err(Error::Input(format!(
            "{}: {} alignment lines for {} translated utterances",
            alignment.display(),
            links.len(),
            corpus.len()
        )));
    }
    Ok(corpus
        .into_iter()
        .zip(links)
        .map(|((src, tgt), links)| AlignedPair { src, tgt, links })
        .collect())
}

fn align(a: AlignArgs) -> Result<Value> {
    let data = load_dataset(&a.data)?;
    let corpus = translated(&data.train);
    let run = align_corpus(&corpus, a.iterations, a.smoothing, a.final_rule.into())?;
    let links: Vec<_> = run.pairs.iter().map(|p| p.links.clone()).collect();
    pharaoh::write(&a.out, &links)?;
    Ok(json!({
        "out": a.out,
        "pairs": links.len(),
        "links": links.iter().map(Vec::len).sum::<usize>(),
        "forward_log_likelihood": run.forward.log_likelihoods,
        "reverse_log_likelihood": run.reverse.log_likelihoods,
    }))
}

fn lexicon(a: LexiconArgs) -> Result<Value> {
    let data = load_dataset(&a.data)?;
    let pairs = aligned_pairs(&data.train, &a.alignment)?;
    let table = build_lexicon(&pairs)?;
    table.write(&a.out)?;
    Ok(json!({ "out": a.out, "source_words": table.len() }))
}

#[derive(Serialize, Deserialize)]
struct AssignmentLine {
    id: String,
    per_word: Vec<Vec<String>>,
}

fn assignments_for(utts: &[Utterance], pairs: &[AlignedPair], table: &LexiconTable) -> Result<Vec<TargetAssignment>> {
    let mut pairs = pairs.iter();
    utts.iter()
        .map(|u| match u.tgt_words {
            Some(_) => {
                let p = pairs.next().expect("one aligned pair per translation");
                assign_targets(&u.src_words, Some((&p.tgt, &p.links)), None)
            }
            None => assign_targets(&u.src_words, None, Some(table)),
        })
        .collect()
}

fn assign(a: AssignArgs) -> Result<Value> {
    let data = load_dataset(&a.data)?;
    let pairs = aligned_pairs(&data.train, &a.alignment)?;
    require(&a.lexicon)?;
    let table = LexiconTable::read(&a.lexicon)?;
    let assignments = assignments_for(&data.train, &pairs, &table)?;
    let mut out = Vec::new();
    for (u, t) in data.train.iter().zip(&assignments) {
        serde_json::to_writer(
            &mut out,
            &AssignmentLine {
                id: u.id.clone(),
                per_word: t.per_word.clone(),
            },
        )?;
        out.push(b'\n');
    }
    fs::write(&a.out, out)?;
    let empty = assignments.iter().flat_map(|t| &t.per_word).filter(|w| w.is_empty()).count();
    Ok(json!({ "out": a.out, "utterances": assignments.len(), "unassigned_words": empty }))
}

fn read_assignments(path: &Path, utts: &[Utterance]) -> Result<Vec<TargetAssignment>> {
    require(path)?;
    let text = fs::read_to_string(path)?;
    let lines: Vec<AssignmentLine> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect::<Result<_>>()?;
    if lines.len() != utts.len() || lines.iter().zip(utts).any(|(l, u)| l.id != u.id) {
        return Err(Error::Input(format!("{}: assignments do not match the training manifest", path.display())));
    }
    Ok(lines.into_iter().map(|l| TargetAssignment { per_word: l.per_word }).collect())
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

/// Everything a training command runs with, snapshotted into the run
/// directory before the first update.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub data: PathBuf,
    pub profile: Profile,
    pub tgt_mode: TokenMode,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub phases: Vec<PhaseSpec>,
}

/// Normalized examples and the artifacts derived from the training side.
struct Prepared {
    train: Vec<Example>,
    dev: Vec<Example>,
    cmvn: CmvnStats,
    tgt_vocab: Vocab,
    lexicon: Option<LexiconTable>,
}

struct Session {
    run: PathBuf,
    cfg: RunConfig,
    data: Prepared,
}

impl Session {
    fn open(root: &Path, args: &TrainArgs, command: &str) -> Result<Session> {
        let ds = load_dataset(&args.data)?;
        let tgt_mode = match (args.tgt_mode, args.profile) {
            (Some(TgtModeArg::Char), _) | (None, Profile::Paper) => TokenMode::Char,
            (Some(TgtModeArg::Word), _) | (None, Profile::Desk) => TokenMode::WholeWord,
        };
        let feat_dim = ds
            .train
            .first()
            .ok_or_else(|| Error::Input("empty training manifest".into()))?
            .feat_dim();
        let tgt_vocab = target_vocab(&ds.train, tgt_mode);
        let (mut model, mut train) = match args.profile {
            Profile::Paper => (
                ModelConfig::paper(feat_dim, ds.src_vocab.len(), tgt_vocab.len()),
                TrainConfig::paper(args.seed),
            ),
            Profile::Desk => (
                ModelConfig::desk(feat_dim, ds.src_vocab.len(), tgt_vocab.len()),
                TrainConfig::desk(args.seed),
            ),
        };
        if let Some(path) = &args.config {
            require(path)?;
            let over: Value = serde_json::from_str(&fs::read_to_string(path)?)?;
            let mut m = serde_json::to_value(&model)?;
            let mut t = serde_json::to_value(&train)?;
            if let Some(v) = over.get("model") {
                merge(&mut m, v.clone());
            }
            if let Some(v) = over.get("train") {
                merge(&mut t, v.clone());
            }
            model = serde_json::from_value(m)?;
            train = serde_json::from_value(t)?;
        }
        train.seed = args.seed;
        if let Some(v) = args.alpha {
            train.alpha = v;
        }
        if let Some(v) = args.mask_ratio {
            train.mask_ratio = v;
        }
        if let Some(v) = args.warmup {
            train.warmup = v;
        }
        if let Some(v) = args.avg_last {
            train.avg_last = v;
        }
        if let Some(v) = args.lr_scale {
            train.lr_scale = v;
        }
        if let Some(v) = args.batch_size {
            train.batch_size = v;
        }
        if let Some(e) = args.epochs {
            train.epochs = e;
        }
        model.validate()?;
        train.validate()?;

        let mut train_utts = ds.train;
        let mut dev_utts = ds.dev;
        let feats: Vec<_> = train_utts.iter().map(|u| u.features.clone()).collect();
        let cmvn = CmvnStats::estimate(&feats)?;
        for u in train_utts.iter_mut().chain(dev_utts.iter_mut()) {
            cmvn.apply(&mut u.features)?;
        }
        let (lexicon, assignments) = match &args.assignments {
            Some(path) => (None, Some(read_assignments(path, &train_utts)?)),
            None if train_utts.iter().any(Utterance::is_triple) => {
                let (table, a) = cst_core::train::corpus_assignments(&train_utts, &DataOptions::default())?;
                (Some(table), Some(a))
            }
            None => (None, None),
        };
        let data = Prepared {
            train: build_examples(&train_utts, &tgt_vocab, tgt_mode, assignments.as_deref())?,
            dev: build_examples(&dev_utts, &tgt_vocab, tgt_mode, None)?,
            cmvn,
            tgt_vocab,
            lexicon,
        };
        Ok(Session {
            run: root.join(&args.run),
            cfg: RunConfig {
                command: command.to_string(),
                data: args.data.clone(),
                profile: args.profile,
                tgt_mode,
                model,
                train,
                phases: Vec::new(),
            },
            data,
        })
    }

    fn n_translated(&self) -> usize {
        self.data.train.iter().filter(|e| e.st_targets.is_some()).count()
    }

    /// Checks every phase's data, then writes the config snapshot and data
    /// artifacts.
    fn write_artifacts(&self) -> Result<()> {
        for spec in &self.cfg.phases {
            check_phase_data(spec, &phase_examples(spec, &self.data.train))?;
        }
        fs::create_dir_all(&self.run)?;
        let name = format!("config.{}.json", self.cfg.command);
        fs::write(self.run.join(name), serde_json::to_string_pretty(&self.cfg)?)?;
        self.data.cmvn.save(&self.run.join("cmvn.cstf"))?;
        self.data.tgt_vocab.save(&self.run.join("tgt_vocab.txt"))?;
        fs::write(self.run.join("tgt_mode.json"), serde_json::to_string(&self.cfg.tgt_mode)?)?;
        if let Some(t) = &self.data.lexicon {
            t.write(&self.run.join("lexicon.tsv"))?;
        }
        Ok(())
    }

    fn load_checkpoint(&self, path: &Path) -> Result<ParamStore<f32>> {
        require(path)?;
        let p = ParamStore::load(path)?;
        if p.config != self.cfg.model {
            return Err(Error::Config(format!(
                "{} was trained with a different model configuration",
                path.display()
            )));
        }
        Ok(p)
    }

    fn phase_dir(&self, name: &str) -> PathBuf {
        self.run.join(name)
    }

    /// Epoch hook that logs metrics and saves a checkpoint per epoch.
    fn hook(&self) -> impl FnMut(&EpochMetrics, &ParamStore<f32>) -> Result<()> + '_ {
        move |m, params| {
            let dir = self.phase_dir(&m.phase);
            if m.epoch == 1 {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("metrics.jsonl"), "")?;
            }
            let mut f = fs::OpenOptions::new().append(true).open(dir.join("metrics.jsonl"))?;
            serde_json::to_writer(&mut f, m)?;
            f.write_all(b"\n")?;
            params.save(&dir.join(format!("epoch_{:03}.ckpt", m.epoch)))
        }
    }

    fn finish_phase(&self, out: &PhaseOutcome) -> Result<Value> {
        out.params.save(&self.phase_dir(&out.name).join("final.ckpt"))?;
        if let Some(avg) = &out.averaged {
            avg.save(&self.run.join("model.ckpt"))?;
        }
        Ok(phase_summary(out))
    }
}

fn phase_summary(out: &PhaseOutcome) -> Value {
    let last = out.metrics.last();
    json!({
        "phase": out.name,
        "steps": out.steps,
        "epochs": out.metrics.len(),
        "loss": last.map(|m| m.loss),
        "acc": last.and_then(|m| m.acc),
        "parts": last.map(|m| m.parts.clone()),
    })
}

fn pretrain(root: &Path, a: PretrainArgs) -> Result<Value> {
    let command = if a.multi3 { "pretrain-multi3".to_string() } else { format!("pretrain-phase{}", a.phase.unwrap_or(1)) };
    let mut s = Session::open(root, &a.train, &command)?;
    let [e1, e2, _] = s.cfg.train.epochs;
    let (spec, from) = match (a.multi3, a.phase) {
        (true, _) => (PhaseSpec::multi3(e1 + e2), None),
        (false, Some(1)) => (PhaseSpec::asr(e1), None),
        _ => {
            let from = if a.from_scratch {
                None
            } else {
                let path = a.from.clone().unwrap_or_else(|| s.phase_dir("phase1").join("final.ckpt"));
                Some(s.load_checkpoint(&path)?)
            };
            (PhaseSpec::adv(e2, true, true), from)
        }
    };
    s.cfg.phases = vec![spec.clone()];
    let init = phase_init(&spec, &s.cfg.model, s.cfg.train.seed, from.as_ref())?;
    s.write_artifacts()?;
    let mut hook = s.hook();
    let out = run_phase(&spec, init, &s.data.train, &s.data.dev, &s.cfg.train, &mut hook)?;
    drop(hook);
    let summary = s.finish_phase(&out)?;
    Ok(json!({ "run": s.run, "phases": [summary] }))
}

fn finetune(root: &Path, a: FinetuneArgs) -> Result<Value> {
    let mut s = Session::open(root, &a.train, "finetune")?;
    let mut spec = PhaseSpec::st(s.cfg.train.epochs[2]);
    let from = if a.from_scratch {
        spec.transfer.clear();
        None
    } else {
        let path = a.from.clone().unwrap_or_else(|| s.phase_dir("phase2").join("final.ckpt"));
        Some(s.load_checkpoint(&path)?)
    };
    s.cfg.phases = vec![spec.clone()];
    let init = phase_init(&spec, &s.cfg.model, s.cfg.train.seed, from.as_ref())?;
    s.write_artifacts()?;
    let mut hook = s.hook();
    let out = run_phase(&spec, init, &s.data.train, &s.data.dev, &s.cfg.train, &mut hook)?;
    drop(hook);
    let summary = s.finish_phase(&out)?;
    let dev = evaluate_st(out.best(), &s.data.dev)?;
    Ok(json!({
        "run": s.run,
        "phases": [summary],
        "model": s.run.join("model.ckpt"),
        "dev_loss": dev.map(|d| d.0),
        "dev_acc": dev.map(|d| d.1),
    }))
}

fn ablate(root: &Path, a: AblateArgs) -> Result<Value> {
    let mode = CurriculumMode::parse(&a.mode)?;
    let mut s = Session::open(root, &a.train, &format!("ablate-{}", mode.name()))?;
    let plan = CurriculumPlan::build(mode, &s.cfg.train, s.data.train.len(), s.n_translated())?;
    s.cfg.phases = plan.phases.clone();
    s.write_artifacts()?;
    let mut hook = s.hook();
    let out = run_curriculum(&plan, &s.cfg.model, &s.data.train, &s.data.dev, &s.cfg.train, &mut hook)?;
    drop(hook);
    let phases = out.phases.iter().map(|p| s.finish_phase(p)).collect::<Result<Vec<_>>>()?;
    out.model.save(&s.run.join("model.ckpt"))?;
    Ok(json!({
        "run": s.run,
        "mode": mode.name(),
        "phases": phases,
        "model": s.run.join("model.ckpt"),
        "dev_loss": out.dev.map(|d| d.0),
        "dev_acc": out.dev.map(|d| d.1),
    }))
}

fn decode(root: &Path, a: DecodeArgs) -> Result<Value> {
    let run = root.join(&a.run);
    let model_path = a.model.clone().unwrap_or_else(|| run.join("model.ckpt"));
    let (cmvn_path, vocab_path, mode_path) = (run.join("cmvn.cstf"), run.join("tgt_vocab.txt"), run.join("tgt_mode.json"));
    for p in [&model_path, &cmvn_path, &vocab_path, &mode_path] {
        require(p)?;
    }
    let params = ParamStore::load(&model_path)?;
    let cmvn = CmvnStats::load(&cmvn_path)?;
    let vocab = Vocab::load(&vocab_path)?;
    let mode: TokenMode = serde_json::from_str(&fs::read_to_string(&mode_path)?)?;
    let ds = load_dataset(&a.data)?;
    let utts = match a.split {
        Split::Train => ds.train,
        Split::Dev => ds.dev,
    };
    if utts.is_empty() {
        return Err(Error::Input(format!("{:?} split is empty", a.split)));
    }
    let split = format!("{:?}", a.split).to_lowercase();
    let out_path = a.out.clone().unwrap_or_else(|| run.join(format!("decode.{split}.txt")));
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    let mut scored = Vec::new();
    for mut u in utts {
        cmvn.apply(&mut u.features)?;
        let mut scorer = ModelScorer::new(&params, &u.features, DecoderKind::St)?;
        let max_len = a
            .max_len
            .unwrap_or_else(|| (2 * scorer.encoder_len()).max(10))
            .min(params.config.max_len);
        let hyp = if a.greedy {
            greedy_search(&mut scorer, a.length_penalty, max_len)?
        } else {
            beam_search(
                &mut scorer,
                BeamConfig {
                    beam: a.beam,
                    length_penalty: a.length_penalty,
                    max_len,
                },
            )?
        };
        let text = vocab.detokenize(&hyp.tokens, mode);
        if let Some(t) = &u.tgt_words {
            scored.push(text.clone());
            refs.push(t.join(" "));
        }
        hyps.push(text);
    }
    fs::write(&out_path, hyps.iter().map(|h| format!("{h}\n")).collect::<String>())?;
    let bleu = if refs.is_empty() { None } else { Some(corpus_bleu(&scored, &refs, 4)?) };
    info!("decoded {} utterances into {}", hyps.len(), out_path.display());
    Ok(json!({ "out": out_path, "utterances": hyps.len(), "bleu": bleu }))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    require(path)?;
    Ok(fs::read_to_string(path)?.lines().map(String::from).collect())
}

fn eval_bleu(a: BleuArgs) -> Result<Value> {
    let hyps = read_lines(&a.hyp)?;
    let refs = read_lines(&a.reference)?;
    Ok(serde_json::to_value(corpus_bleu(&hyps, &refs, a.max_n)?)?)
}

fn gradcheck(a: GradcheckArgs) -> Result<Value> {
    let mut report = serde_json::Map::new();
    let mut pass = true;
    for kind in LossKind::ALL {
        let r = loss_gradcheck(kind, a.cases, a.seed)?;
        pass &= r.max_rel_err < GRADCHECK_TOL;
        report.insert(
            kind.name().to_string(),
            json!({ "checked": r.checked, "max_rel_err": r.max_rel_err }),
        );
    }
    let mut ops = serde_json::Map::new();
    for (name, r) in op_suite(a.cases, a.seed)? {
        pass &= r.max_rel_err < GRADCHECK_TOL;
        ops.insert(name.to_string(), json!({ "checked": r.checked, "max_rel_err": r.max_rel_err }));
    }
    if !pass {
        return Err(Error::Config(format!(
            "gradient check failed: {}",
            json!({ "objectives": report, "ops": ops })
        )));
    }
    Ok(json!({ "pass": pass, "objectives": report, "ops": ops }))
}
