use serde::{Deserialize, Serialize};

use super::optim::AdamConfig;
use crate::error::{Error, Result};
use crate::losses::SpecAugment;
use crate::model::{Depth, Group};

/// Pipeline variants. `NoPretrain` trains translation alone for the step
/// budget of the full curriculum; `ReconPretrain` replaces both
/// pre-training phases with masked-frame reconstruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurriculumMode {
    Full,
    MinusFmlm,
    MinusFblt,
    MinusPhase1,
    MinusPhase2,
    Multi3,
    NoPretrain,
    ReconPretrain,
}

impl CurriculumMode {
    pub const ALL: [CurriculumMode; 8] = [
        CurriculumMode::Full,
        CurriculumMode::MinusFmlm,
        CurriculumMode::MinusFblt,
        CurriculumMode::MinusPhase1,
        CurriculumMode::MinusPhase2,
        CurriculumMode::Multi3,
        CurriculumMode::NoPretrain,
        CurriculumMode::ReconPretrain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CurriculumMode::Full => "full",
            CurriculumMode::MinusFmlm => "minus_fmlm",
            CurriculumMode::MinusFblt => "minus_fblt",
            CurriculumMode::MinusPhase1 => "minus_phase1",
            CurriculumMode::MinusPhase2 => "minus_phase2",
            CurriculumMode::Multi3 => "multi3",
            CurriculumMode::NoPretrain => "no_pretrain",
            CurriculumMode::ReconPretrain => "recon_pretrain",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown curriculum mode {s}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    /// CTC plus transcription cross-entropy at the tapped layer.
    Asr,
    /// Masked-word prediction and/or lexicon translation on masked input.
    Adv { fmlm: bool, fblt: bool },
    /// Transcription and both advanced objectives in one phase.
    Multi3,
    /// L1 reconstruction of masked frames from the tapped layer.
    Recon,
    /// Speech translation.
    St,
}

impl PhaseKind {
    pub fn depth(self) -> Depth {
        match self {
            PhaseKind::Asr | PhaseKind::Recon => Depth::Asr,
            _ => Depth::Full,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Every training utterance.
    All,
    /// Utterances with a translation.
    TranslationOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    /// Also seeds the phase's randomness, so a phase behaves the same
    /// whichever pipeline it runs in.
    pub name: String,
    pub kind: PhaseKind,
    pub epochs: usize,
    /// Stop after this many updates even mid-epoch.
    pub max_steps: Option<usize>,
    pub data: DataSource,
    /// Groups copied from the previous phase; everything else starts from
    /// the seeded initializer.
    pub transfer: Vec<Group>,
}

impl PhaseSpec {
    pub fn asr(epochs: usize) -> Self {
        PhaseSpec {
            name: "phase1".into(),
            kind: PhaseKind::Asr,
            epochs,
            max_steps: None,
            data: DataSource::All,
            transfer: vec![],
        }
    }

    pub fn adv(epochs: usize, fmlm: bool, fblt: bool) -> Self {
        PhaseSpec {
            name: "phase2".into(),
            kind: PhaseKind::Adv { fmlm, fblt },
            epochs,
            max_steps: None,
            data: DataSource::All,
            transfer: vec![Group::Frontend, Group::EncoderBottom, Group::NormN],
        }
    }

    pub fn multi3(epochs: usize) -> Self {
        PhaseSpec {
            name: "multi3".into(),
            kind: PhaseKind::Multi3,
            epochs,
            max_steps: None,
            data: DataSource::All,
            transfer: vec![],
        }
    }

    pub fn recon(epochs: usize) -> Self {
        PhaseSpec {
            name: "recon".into(),
            kind: PhaseKind::Recon,
            epochs,
            max_steps: None,
            data: DataSource::All,
            transfer: vec![],
        }
    }

    pub fn st(epochs: usize) -> Self {
        PhaseSpec {
            name: "phase3".into(),
            kind: PhaseKind::St,
            epochs,
            max_steps: None,
            data: DataSource::TranslationOnly,
            transfer: vec![Group::Frontend, Group::EncoderBottom, Group::EncoderTop, Group::NormN, Group::NormTop],
        }
    }
}

/// Optimization and objective settings shared by all phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub warmup: usize,
    pub lr_scale: f64,
    pub grad_clip: f64,
    pub adam: AdamConfig,
    /// CTC weight in the transcription objective.
    pub alpha: f64,
    pub mask_ratio: f64,
    /// FMLM and FBLT weights in the advanced objective.
    pub adv_weights: (f64, f64),
    /// Applied to transcription and translation inputs.
    pub specaugment: SpecAugment,
    /// Epochs of the transcription, advanced and translation phases.
    pub epochs: [usize; 3],
    /// Translation checkpoints averaged into the final model.
    pub avg_last: usize,
}

impl TrainConfig {
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            seed,
            batch_size: 16,
            warmup: 400,
            lr_scale: 1.0,
            grad_clip: 5.0,
            adam: AdamConfig::default(),
            alpha: 0.3,
            mask_ratio: 0.15,
            adv_weights: (1.0, 1.0),
            specaugment: SpecAugment::OFF,
            epochs: [10, 5, 10],
            avg_last: 5,
        }
    }

    pub fn paper(seed: u64) -> Self {
        TrainConfig {
            batch_size: 64,
            warmup: 25000,
            specaugment: SpecAugment::PAPER,
            epochs: [50, 20, 50],
            ..Self::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.warmup == 0 || self.avg_last == 0 {
            return bad("batch size, warmup and avg_last must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask ratio {} outside (0, 1)", self.mask_ratio));
        }
        if self.lr_scale <= 0.0 {
            return bad("lr scale must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumPlan {
    pub mode: CurriculumMode,
    pub phases: Vec<PhaseSpec>,
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

impl CurriculumPlan {
    /// `n_all` training utterances, of which `n_st` carry translations.
    pub fn build(mode: CurriculumMode, cfg: &TrainConfig, n_all: usize, n_st: usize) -> Result<Self> {
        let [e1, e2, e3] = cfg.epochs;
        use CurriculumMode as M;
        let phases = match mode {
            M::Full => vec![PhaseSpec::asr(e1), PhaseSpec::adv(e2, true, true), PhaseSpec::st(e3)],
            M::MinusFmlm => vec![PhaseSpec::asr(e1), PhaseSpec::adv(e2, false, true), PhaseSpec::st(e3)],
            M::MinusFblt => vec![PhaseSpec::asr(e1), PhaseSpec::adv(e2, true, false), PhaseSpec::st(e3)],
            M::MinusPhase1 => vec![PhaseSpec::adv(e2, true, true), PhaseSpec::st(e3)],
            M::MinusPhase2 => vec![PhaseSpec::asr(e1), PhaseSpec::st(e3)],
            M::Multi3 => vec![PhaseSpec::multi3(e1 + e2), PhaseSpec::st(e3)],
            M::ReconPretrain => vec![PhaseSpec::recon(e1 + e2), PhaseSpec::st(e3)],
            M::NoPretrain => {
                if n_st == 0 {
                    return Err(Error::Config("no translation examples".into()));
                }
                let b = cfg.batch_size;
                let budget = (e1 + e2) * steps_per_epoch(n_all, b) + e3 * steps_per_epoch(n_st, b);
                let mut st = PhaseSpec::st(budget.div_ceil(steps_per_epoch(n_st, b)));
                st.max_steps = Some(budget);
                st.transfer.clear();
                vec![st]
            }
        };
        Ok(CurriculumPlan { mode, phases })
    }

    /// Updates the plan performs on `n_all` / `n_st` utterances.
    pub fn total_steps(&self, batch: usize, n_all: usize, n_st: usize) -> usize {
        self.phases
            .iter()
            .map(|p| {
                let n = match p.data {
                    DataSource::All => n_all,
                    DataSource::TranslationOnly => n_st,
                };
                let s = p.epochs * steps_per_epoch(n, batch);
                p.max_steps.map_or(s, |m| m.min(s))
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_matches_full_budget() {
        let cfg = TrainConfig::desk(1);
        let full = CurriculumPlan::build(CurriculumMode::Full, &cfg, 500, 300).unwrap();
        let base = CurriculumPlan::build(CurriculumMode::NoPretrain, &cfg, 500, 300).unwrap();
        assert_eq!(full.total_steps(16, 500, 300), base.total_steps(16, 500, 300));
        assert_eq!(base.phases.len(), 1);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in CurriculumMode::ALL {
            assert_eq!(CurriculumMode::parse(m.name()).unwrap(), m);
        }
        assert!(CurriculumMode::parse("bogus").is_err());
    }

    #[test]
    fn ablations_drop_the_right_phase() {
        let cfg = TrainConfig::desk(1);
        let p = CurriculumPlan::build(CurriculumMode::MinusPhase2, &cfg, 10, 5).unwrap();
        assert_eq!(p.phases.iter().map(|p| p.kind).collect::<Vec<_>>(), vec![PhaseKind::Asr, PhaseKind::St]);
        let p = CurriculumPlan::build(CurriculumMode::MinusFmlm, &cfg, 10, 5).unwrap();
        assert_eq!(p.phases[1].kind, PhaseKind::Adv { fmlm: false, fblt: true });
    }
}
