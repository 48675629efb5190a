//! Training objectives: CTC, transcription and translation cross-entropy,
//! masked-word and lexicon-translation KL losses, SpecAugment and frame
//! reconstruction.

pub mod augment;
pub mod ctc;
pub mod objectives;
pub mod spans;

pub use augment::{mask_frames, recon_l1_loss, recon_predictions, specaugment, SpecAugment};
pub use ctc::{ctc_forward_backward, ctc_loss, ctc_min_frames};
pub use objectives::{
    adv_loss, asr_loss, asr_objective, decoder_nll, fblt_loss, fmlm_loss, kl_soft_loss, kl_soft_node, sequence_nll,
    st_loss, teacher_prefix, AsrTerms, KlValue, LossTerm, KL_FLOOR,
};
pub use spans::{frame_mean, frame_to_hidden_span, select_and_mask, SoftTarget, WordSpan};
