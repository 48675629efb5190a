use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network sizes. `asr_blocks` is the tapped depth used for ASR and FMLM,
/// `enc_blocks` the full encoder depth used for FBLT and translation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub enc_blocks: usize,
    pub asr_blocks: usize,
    pub dec_blocks: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Longest sequence covered by the positional encodings.
    pub max_len: usize,
    pub conv_channels: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn desk(feat_dim: usize, src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            feat_dim,
            d_model: 32,
            heads: 4,
            d_ff: 128,
            enc_blocks: 6,
            asr_blocks: 4,
            dec_blocks: 3,
            src_vocab,
            tgt_vocab,
            max_len: 1024,
            conv_channels: 32,
            dropout: 0.0,
        }
    }

    pub fn paper(feat_dim: usize, src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            feat_dim,
            d_model: 256,
            heads: 4,
            d_ff: 2048,
            enc_blocks: 12,
            asr_blocks: 8,
            dec_blocks: 6,
            src_vocab,
            tgt_vocab,
            max_len: 1024,
            conv_channels: 256,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.asr_blocks == 0 || self.asr_blocks > self.enc_blocks {
            return bad(format!(
                "tapped depth {} must be in 1..={}",
                self.asr_blocks, self.enc_blocks
            ));
        }
        if self.src_vocab == 0 || self.tgt_vocab == 0 {
            return bad("vocabularies must be nonempty".into());
        }
        if self.feat_dim == 0 || self.d_ff == 0 || self.dec_blocks == 0 || self.conv_channels == 0 {
            return bad("feature dim, d_ff, decoder depth and conv channels must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Frequency bins left after the two stride-2 convolutions.
    pub fn conv_freq(&self) -> usize {
        self.feat_dim.div_ceil(2).div_ceil(2)
    }

    pub fn ctc_classes(&self) -> usize {
        self.src_vocab + 1
    }

    pub fn blank(&self) -> usize {
        self.src_vocab
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::desk(20, 10, 10).validate().unwrap();
        ModelConfig::paper(83, 5000, 300).validate().unwrap();
        let mut c = ModelConfig::desk(20, 10, 10);
        c.heads = 5;
        assert!(c.validate().is_err());
        c.heads = 4;
        c.asr_blocks = 7;
        assert!(c.validate().is_err());
    }
}
