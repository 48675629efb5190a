use std::collections::BTreeMap;

use cst_autodiff::{Graph, Scalar, Tensor, Var};

use super::config::ModelConfig;
use super::params::ParamStore;
use crate::data::vocab::SOS;
use crate::error::{Error, Result};

const NEG_INF: f64 = -1e9;
const LN_EPS: f64 = 1e-12;

/// How far up the encoder a forward pass runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Depth {
    /// Bottom `asr_blocks` blocks only.
    Asr,
    Full,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `L'×d` after block `asr_blocks` and its norm.
    pub hidden_n: Var,
    /// `L'×d` after the last block and its norm; absent at [`Depth::Asr`].
    pub hidden_top: Option<Var>,
    pub len: usize,
}

/// Which decoder stack to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    /// Transcription decoder over source tokens, used in ASR pre-training.
    Asr,
    /// Translation decoder over target tokens.
    St,
}

impl DecoderKind {
    fn prefix(self) -> &'static str {
        match self {
            DecoderKind::Asr => "asr_dec",
            DecoderKind::St => "st_dec",
        }
    }

    pub fn vocab(self, cfg: &ModelConfig) -> usize {
        match self {
            DecoderKind::Asr => cfg.src_vocab,
            DecoderKind::St => cfg.tgt_vocab,
        }
    }
}

/// Sinusoidal position table, `len×d`.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            pe[pos * d + i] = angle.sin();
            if i + 1 < d {
                pe[pos * d + i + 1] = angle.cos();
            }
        }
    }
    pe
}

/// A graph plus the parameters bound into it so far.
pub struct Ctx<'a, T: Scalar> {
    pub g: Graph<T>,
    params: &'a ParamStore<T>,
    bound: BTreeMap<String, Var>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(g: Graph<T>, params: &'a ParamStore<T>) -> Self {
        Ctx {
            g,
            params,
            bound: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &'a ModelConfig {
        &self.params.config
    }

    /// Graph leaf for parameter `name`, created on first use.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let v = self.g.param(t.clone());
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Gradients of every bound parameter after a backward pass.
    pub fn grads(&self) -> BTreeMap<String, Vec<T>> {
        self.bound
            .iter()
            .filter_map(|(n, &v)| self.g.grad(v).map(|g| (n.clone(), g.to_vec())))
            .collect()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.g.constant(t)
    }

    pub fn linear(&mut self, x: Var, prefix: &str, bias: bool) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let y = self.g.matmul(x, w)?;
        if bias {
            let b = self.p(&format!("{prefix}.b"))?;
            Ok(self.g.add(y, b)?)
        } else {
            Ok(y)
        }
    }

    pub fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.g"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        let n = self.g.layer_norm(x, LN_EPS)?;
        let n = self.g.mul(n, g)?;
        Ok(self.g.add(n, b)?)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.config().dropout;
        Ok(self.g.dropout(x, p)?)
    }

    fn attention(&mut self, query: Var, memory: Var, prefix: &str, mask: Option<Var>) -> Result<Var> {
        let cfg = self.config();
        let dk = cfg.d_model / cfg.heads;
        let q = self.linear(query, &format!("{prefix}.q"), true)?;
        let k = self.linear(memory, &format!("{prefix}.k"), true)?;
        let v = self.linear(memory, &format!("{prefix}.v"), true)?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let (a, b) = (h * dk, (h + 1) * dk);
            let qh = self.g.slice_cols(q, a, b)?;
            let kh = self.g.slice_cols(k, a, b)?;
            let vh = self.g.slice_cols(v, a, b)?;
            let kt = self.g.transpose(kh)?;
            let s = self.g.matmul(qh, kt)?;
            let mut s = self.g.scale(s, 1.0 / (dk as f64).sqrt());
            if let Some(m) = mask {
                s = self.g.add(s, m)?;
            }
            let att = self.g.softmax(s, 1)?;
            heads.push(self.g.matmul(att, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { self.g.concat_cols(&heads)? };
        self.linear(cat, &format!("{prefix}.o"), true)
    }

    fn ffn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.w1"), true)?;
        let h = self.g.relu(h);
        let h = self.dropout(h)?;
        self.linear(h, &format!("{prefix}.w2"), true)
    }

    fn residual(&mut self, x: Var, y: Var) -> Result<Var> {
        let y = self.dropout(y)?;
        Ok(self.g.add(x, y)?)
    }

    fn encoder_block(&mut self, x: Var, i: usize) -> Result<Var> {
        let b = format!("enc.{i}");
        let n = self.norm(x, &format!("{b}.ln1"))?;
        let a = self.attention(n, n, &format!("{b}.att"), None)?;
        let x = self.residual(x, a)?;
        let n = self.norm(x, &format!("{b}.ln2"))?;
        let f = self.ffn(n, &format!("{b}.ff"))?;
        self.residual(x, f)
    }

    /// `x·sqrt(d) + PE` for an `L×d` input.
    fn add_positions(&mut self, x: Var) -> Result<Var> {
        let (len, d) = (self.g.shape(x)[0], self.g.shape(x)[1]);
        if len > self.config().max_len {
            return Err(Error::Input(format!(
                "sequence length {len} exceeds max_len {}",
                self.config().max_len
            )));
        }
        let pe = self.g.constant(Tensor::from_f64(&[len, d], &positional_encoding(len, d))?);
        let x = self.g.scale(x, (d as f64).sqrt());
        Ok(self.g.add(x, pe)?)
    }

    /// Two stride-2 convolutions and a projection to `L'×d`, `L' = ceil(T/4)`.
    pub fn frontend(&mut self, features: Var) -> Result<Var> {
        let cfg = self.config();
        let s = self.g.shape(features).to_vec();
        if s.len() != 2 || s[1] != cfg.feat_dim {
            return Err(Error::Input(format!(
                "features {s:?} do not match feature dim {}",
                cfg.feat_dim
            )));
        }
        if s[0] < 4 {
            return Err(Error::Input(format!("{} frames is too short to downsample by 4", s[0])));
        }
        let x = self.g.reshape(features, &[1, s[0], s[1]])?;
        let (w1, b1) = (self.p("frontend.conv1.w")?, self.p("frontend.conv1.b")?);
        let x = self.g.conv2d(x, w1, b1, 2)?;
        let x = self.g.relu(x);
        let (w2, b2) = (self.p("frontend.conv2.w")?, self.p("frontend.conv2.b")?);
        let x = self.g.conv2d(x, w2, b2, 2)?;
        let x = self.g.relu(x);
        let cs = self.g.shape(x).to_vec();
        let x = self.g.permute(x, &[1, 0, 2])?;
        let x = self.g.reshape(x, &[cs[1], cs[0] * cs[2]])?;
        self.linear(x, "frontend.proj", true)
    }

    pub fn encode(&mut self, features: Var, depth: Depth) -> Result<EncoderOutput> {
        let cfg = self.config();
        let x = self.frontend(features)?;
        let len = self.g.shape(x)[0];
        let x = self.add_positions(x)?;
        let mut x = self.dropout(x)?;
        for i in 0..cfg.asr_blocks {
            x = self.encoder_block(x, i)?;
        }
        let hidden_n = self.norm(x, "enc.norm_n")?;
        let hidden_top = match depth {
            Depth::Asr => None,
            Depth::Full => {
                for i in cfg.asr_blocks..cfg.enc_blocks {
                    x = self.encoder_block(x, i)?;
                }
                Some(self.norm(x, "enc.norm_top")?)
            }
        };
        Ok(EncoderOutput {
            hidden_n,
            hidden_top,
            len,
        })
    }

    pub fn encode_tensor(&mut self, features: &Tensor<T>, depth: Depth) -> Result<EncoderOutput> {
        let f = self.g.constant(features.clone());
        self.encode(f, depth)
    }

    /// Teacher-forced decoder pass. `prefix` starts with `<s>`; returns
    /// `|prefix|×V` log-probabilities of the next token at each position.
    pub fn decode_forward(&mut self, kind: DecoderKind, memory: Var, prefix: &[usize]) -> Result<Var> {
        let cfg = self.config();
        let vocab = kind.vocab(cfg);
        if prefix.first() != Some(&SOS) {
            return Err(Error::Input("decoder prefix must start with <s>".into()));
        }
        if let Some(&bad) = prefix.iter().find(|&&t| t >= vocab) {
            return Err(Error::Input(format!("token {bad} outside vocabulary of {vocab}")));
        }
        let pfx = kind.prefix();
        let u = prefix.len();
        let table = self.p(&format!("{pfx}.embed"))?;
        let x = self.g.embedding(table, prefix)?;
        let x = self.add_positions(x)?;
        let mut x = self.dropout(x)?;
        let mask: Vec<f64> = (0..u * u)
            .map(|k| if k % u > k / u { NEG_INF } else { 0.0 })
            .collect();
        let mask = self.g.constant(Tensor::from_f64(&[u, u], &mask)?);
        for i in 0..cfg.dec_blocks {
            let b = format!("{pfx}.{i}");
            let n = self.norm(x, &format!("{b}.ln1"))?;
            let a = self.attention(n, n, &format!("{b}.self"), Some(mask))?;
            x = self.residual(x, a)?;
            let n = self.norm(x, &format!("{b}.ln2"))?;
            let a = self.attention(n, memory, &format!("{b}.cross"), None)?;
            x = self.residual(x, a)?;
            let n = self.norm(x, &format!("{b}.ln3"))?;
            let f = self.ffn(n, &format!("{b}.ff"))?;
            x = self.residual(x, f)?;
        }
        let x = self.norm(x, &format!("{pfx}.norm"))?;
        let logits = self.linear(x, &format!("{pfx}.out"), true)?;
        Ok(self.g.log_softmax(logits, 1)?)
    }

    /// `L'×(|V_s|+1)` CTC logits; the blank is the last column.
    pub fn ctc_logits(&mut self, hidden_n: Var) -> Result<Var> {
        self.linear(hidden_n, "head.ctc", true)
    }

    /// `1×|V_s|` log-distribution over source tokens for a pooled `d` vector.
    pub fn fmlm_log_probs(&mut self, pooled: Var) -> Result<Var> {
        self.head_log_probs(pooled, "head.fmlm")
    }

    /// `1×|V_t|` log-distribution over target tokens for a pooled `d` vector.
    pub fn fblt_log_probs(&mut self, pooled: Var) -> Result<Var> {
        self.head_log_probs(pooled, "head.fblt")
    }

    fn head_log_probs(&mut self, pooled: Var, prefix: &str) -> Result<Var> {
        let d = self.g.shape(pooled).iter().product::<usize>();
        let row = self.g.reshape(pooled, &[1, d])?;
        let logits = self.linear(row, prefix, false)?;
        Ok(self.g.log_softmax(logits, 1)?)
    }

    /// `L'×4F` frame predictions, row `j` covering frames `4j..4j+4`.
    pub fn recon_frames(&mut self, hidden_n: Var) -> Result<Var> {
        self.linear(hidden_n, "head.recon", true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_table_first_rows() {
        let pe = positional_encoding(2, 4);
        assert_eq!(&pe[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe[4] - 1f64.sin()).abs() < 1e-15);
        assert!((pe[6] - 0.01f64.sin()).abs() < 1e-15);
    }
}
