//! Curriculum training: phase plans, example preparation, the optimizer and
//! the phase runner.

mod example;
pub mod optim;
mod plan;
mod runner;

pub use example::{build_examples, corpus_assignments, prepare, target_vocab, DataOptions, Example, PreparedData};
pub use optim::{clip_grad_norm, noam_lr, AdamConfig, AdamState};
pub use plan::{CurriculumMode, CurriculumPlan, DataSource, PhaseKind, PhaseSpec, TrainConfig};
pub use runner::{
    check_phase_data, evaluate_st, phase_examples, phase_init, run_curriculum, run_phase, CurriculumOutcome, EpochHook, EpochMetrics,
    PhaseOutcome,
};
