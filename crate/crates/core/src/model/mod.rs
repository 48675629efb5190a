//! Convolutional frontend, Transformer encoder with two taps, transcription
//! and translation decoders, output heads and beam search.

pub mod beam;
pub mod config;
pub mod net;
pub mod params;

pub use beam::{beam_search, greedy_search, BeamConfig, Hypothesis, ModelScorer, StepScorer};
pub use config::ModelConfig;
pub use net::{positional_encoding, Ctx, DecoderKind, Depth, EncoderOutput};
pub use params::{average_checkpoints, param_count, param_specs, Group, ParamSpec, ParamStore};
