use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use cst_autodiff::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::data::container;
use crate::error::{Error, Result};

/// Parameter groups that phases transfer or reinitialize as a unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Frontend,
    /// Encoder blocks below the tap at `asr_blocks`.
    EncoderBottom,
    /// Encoder blocks from `asr_blocks` up to `enc_blocks`.
    EncoderTop,
    NormN,
    NormTop,
    CtcHead,
    FmlmHead,
    FbltHead,
    ReconHead,
    AsrDecoder,
    StDecoder,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: Group,
    init: Init,
}

fn linear(out: &mut Vec<ParamSpec>, group: Group, prefix: &str, din: usize, dout: usize, bias: bool) {
    out.push(ParamSpec {
        name: format!("{prefix}.w"),
        shape: vec![din, dout],
        group,
        init: Init::Uniform { fan_in: din },
    });
    if bias {
        out.push(ParamSpec {
            name: format!("{prefix}.b"),
            shape: vec![dout],
            group,
            init: Init::Zeros,
        });
    }
}

fn norm(out: &mut Vec<ParamSpec>, group: Group, prefix: &str, d: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.g"),
        shape: vec![d],
        group,
        init: Init::Ones,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.b"),
        shape: vec![d],
        group,
        init: Init::Zeros,
    });
}

fn attention(out: &mut Vec<ParamSpec>, group: Group, prefix: &str, d: usize) {
    for p in ["q", "k", "v", "o"] {
        linear(out, group, &format!("{prefix}.{p}"), d, d, true);
    }
}

fn ffn(out: &mut Vec<ParamSpec>, group: Group, prefix: &str, d: usize, ff: usize) {
    linear(out, group, &format!("{prefix}.w1"), d, ff, true);
    linear(out, group, &format!("{prefix}.w2"), ff, d, true);
}

fn decoder(out: &mut Vec<ParamSpec>, group: Group, prefix: &str, cfg: &ModelConfig, vocab: usize) {
    let d = cfg.d_model;
    out.push(ParamSpec {
        name: format!("{prefix}.embed"),
        shape: vec![vocab, d],
        group,
        init: Init::Uniform { fan_in: d },
    });
    for i in 0..cfg.dec_blocks {
        let b = format!("{prefix}.{i}");
        norm(out, group, &format!("{b}.ln1"), d);
        attention(out, group, &format!("{b}.self"), d);
        norm(out, group, &format!("{b}.ln2"), d);
        attention(out, group, &format!("{b}.cross"), d);
        norm(out, group, &format!("{b}.ln3"), d);
        ffn(out, group, &format!("{b}.ff"), d, cfg.d_ff);
    }
    norm(out, group, &format!("{prefix}.norm"), d);
    linear(out, group, &format!("{prefix}.out"), d, vocab, true);
}

/// Every parameter of the model, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let c = cfg.conv_channels;
    let mut out = Vec::new();
    out.push(ParamSpec {
        name: "frontend.conv1.w".into(),
        shape: vec![c, 1, 3, 3],
        group: Group::Frontend,
        init: Init::Uniform { fan_in: 9 },
    });
    out.push(ParamSpec {
        name: "frontend.conv1.b".into(),
        shape: vec![c],
        group: Group::Frontend,
        init: Init::Zeros,
    });
    out.push(ParamSpec {
        name: "frontend.conv2.w".into(),
        shape: vec![c, c, 3, 3],
        group: Group::Frontend,
        init: Init::Uniform { fan_in: 9 * c },
    });
    out.push(ParamSpec {
        name: "frontend.conv2.b".into(),
        shape: vec![c],
        group: Group::Frontend,
        init: Init::Zeros,
    });
    linear(&mut out, Group::Frontend, "frontend.proj", c * cfg.conv_freq(), d, true);
    for i in 0..cfg.enc_blocks {
        let g = if i < cfg.asr_blocks { Group::EncoderBottom } else { Group::EncoderTop };
        let b = format!("enc.{i}");
        norm(&mut out, g, &format!("{b}.ln1"), d);
        attention(&mut out, g, &format!("{b}.att"), d);
        norm(&mut out, g, &format!("{b}.ln2"), d);
        ffn(&mut out, g, &format!("{b}.ff"), d, cfg.d_ff);
    }
    norm(&mut out, Group::NormN, "enc.norm_n", d);
    norm(&mut out, Group::NormTop, "enc.norm_top", d);
    linear(&mut out, Group::CtcHead, "head.ctc", d, cfg.ctc_classes(), true);
    linear(&mut out, Group::FmlmHead, "head.fmlm", d, cfg.src_vocab, false);
    linear(&mut out, Group::FbltHead, "head.fblt", d, cfg.tgt_vocab, false);
    linear(&mut out, Group::ReconHead, "head.recon", d, 4 * cfg.feat_dim, true);
    decoder(&mut out, Group::AsrDecoder, "asr_dec", cfg, cfg.src_vocab);
    decoder(&mut out, Group::StDecoder, "st_dec", cfg, cfg.tgt_vocab);
    out
}

pub fn param_count(cfg: &ModelConfig) -> usize {
    param_specs(cfg).iter().map(|s| s.shape.iter().product::<usize>()).sum()
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn init_tensor<T: Scalar>(spec: &ParamSpec, seed: u64) -> Tensor<T> {
    match spec.init {
        Init::Zeros => Tensor::zeros(&spec.shape),
        Init::Ones => Tensor::filled(&spec.shape, T::ONE),
        Init::Uniform { fan_in } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&spec.name));
            let a = 1.0 / (fan_in as f64).sqrt();
            let n: usize = spec.shape.iter().product();
            let data = (0..n).map(|_| T::from_f64(rng.random_range(-a..a))).collect();
            Tensor::new(spec.shape.clone(), data).expect("spec shape")
        }
    }
}

/// Named model parameters. Each tensor's initial value depends only on the
/// seed and its name, so reinitializing one group leaves no trace on others.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let tensors = param_specs(config)
            .iter()
            .map(|s| (s.name.clone(), init_tensor(s, seed)))
            .collect();
        Ok(ParamStore {
            config: config.clone(),
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Copies every tensor of `groups` from `other`.
    pub fn transfer_from(&mut self, other: &ParamStore<T>, groups: &[Group]) -> Result<()> {
        for spec in param_specs(&self.config) {
            if !groups.contains(&spec.group) {
                continue;
            }
            let src = other
                .tensors
                .get(&spec.name)
                .ok_or_else(|| Error::Config(format!("source parameters lack {}", spec.name)))?;
            if src.shape() != spec.shape.as_slice() {
                return Err(Error::Config(format!(
                    "{}: shape {:?} does not match {:?}",
                    spec.name,
                    src.shape(),
                    spec.shape
                )));
            }
            self.tensors.insert(spec.name, src.clone());
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Elementwise mean of stores sharing one configuration.
    pub fn average(stores: &[ParamStore<T>]) -> Result<Self> {
        let Some(first) = stores.first() else {
            return Err(Error::Input("averaging zero checkpoints".into()));
        };
        if let Some(s) = stores.iter().find(|s| s.config != first.config) {
            return Err(Error::Config(format!(
                "checkpoint configs differ: {:?} vs {:?}",
                s.config, first.config
            )));
        }
        let k = stores.len() as f64;
        let mut tensors = BTreeMap::new();
        for (name, t) in &first.tensors {
            let mut acc = vec![0.0f64; t.numel()];
            for s in stores {
                let u = s.tensors.get(name).filter(|u| u.shape() == t.shape()).ok_or_else(|| {
                    Error::Config(format!("checkpoint tensor {name} missing or reshaped"))
                })?;
                for (a, &x) in acc.iter_mut().zip(u.data()) {
                    *a += x.to_f64();
                }
            }
            let data = acc.iter().map(|&a| T::from_f64(a / k)).collect();
            tensors.insert(name.clone(), Tensor::new(t.shape().to_vec(), data)?);
        }
        Ok(ParamStore {
            config: first.config.clone(),
            tensors,
        })
    }
}

const CKPT_MAGIC: &[u8; 4] = b"CSTM";

fn read_u32(bytes: &[u8], at: &mut usize) -> Result<usize> {
    let b = bytes
        .get(*at..*at + 4)
        .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
    *at += 4;
    Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
}

impl ParamStore<f32> {
    /// `"CSTM"`, JSON config length and bytes, tensor count, then per tensor
    /// its name length, name and container blob.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.config).expect("config serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            container::encode_into(t, &mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.get(..4) != Some(CKPT_MAGIC.as_slice()) {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut at = 4;
        let hlen = read_u32(bytes, &mut at)?;
        let header = bytes
            .get(at..at + hlen)
            .ok_or_else(|| Error::Format("checkpoint header truncated".into()))?;
        let config: ModelConfig = serde_json::from_slice(header)?;
        at += hlen;
        let count = read_u32(bytes, &mut at)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = read_u32(bytes, &mut at)?;
            let name = bytes
                .get(at..at + nlen)
                .and_then(|b| std::str::from_utf8(b).ok())
                .ok_or_else(|| Error::Format("bad tensor name".into()))?
                .to_string();
            at += nlen;
            let (t, used) = container::decode_prefix(&bytes[at..])?;
            at += used;
            tensors.insert(name, t);
        }
        if at != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        for spec in param_specs(&config) {
            match tensors.get(&spec.name) {
                Some(t) if t.shape() == spec.shape.as_slice() => {}
                _ => return Err(Error::Format(format!("checkpoint tensor {} missing or misshapen", spec.name))),
            }
        }
        Ok(ParamStore { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Mean of the checkpoints stored at `paths`.
pub fn average_checkpoints(paths: &[&Path]) -> Result<ParamStore<f32>> {
    let stores = paths.iter().map(|p| ParamStore::load(p)).collect::<Result<Vec<_>>>()?;
    ParamStore::average(&stores)
}
