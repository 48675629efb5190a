use std::path::Path;

use cst_autodiff::Tensor;

use super::container;
use crate::error::{Error, Result};

/// Floor applied to per-dimension standard deviations.
pub const STD_FLOOR: f64 = 1e-10;

/// Per-dimension corpus mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct CmvnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl CmvnStats {
    /// Two-pass estimate over every frame of `corpus`.
    pub fn estimate(corpus: &[Tensor<f32>]) -> Result<Self> {
        let Some(first) = corpus.first() else {
            return Err(Error::Input("cmvn over an empty corpus".into()));
        };
        let d = first.shape()[1];
        if let Some(f) = corpus.iter().find(|f| f.shape()[1] != d) {
            return Err(Error::Input(format!("feature dim {} differs from {d}", f.shape()[1])));
        }
        let rows = || corpus.iter().flat_map(|f| (0..f.shape()[0]).map(move |r| f.row(r)));
        let n = rows().count() as f64;
        let mut mean = vec![0.0; d];
        for row in rows() {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += x as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in rows() {
            for ((v, &x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x as f64 - m).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
        Ok(CmvnStats { mean, std })
    }

    pub fn apply(&self, features: &mut Tensor<f32>) -> Result<()> {
        let d = features.shape()[1];
        if d != self.mean.len() {
            return Err(Error::Input(format!(
                "feature dim {d} does not match cmvn stats dim {}",
                self.mean.len()
            )));
        }
        for (k, x) in features.data_mut().iter_mut().enumerate() {
            let j = k % d;
            *x = ((*x as f64 - self.mean[j]) / self.std[j]) as f32;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let to_t = |v: &[f64]| Tensor::new(vec![v.len()], v.iter().map(|&x| x as f32).collect());
        let (m, s) = (to_t(&self.mean)?, to_t(&self.std)?);
        container::write_all(path, &[&m, &s])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ts = container::read_all(path)?;
        match ts.as_slice() {
            [m, s] if m.rank() == 1 && m.shape() == s.shape() => Ok(CmvnStats {
                mean: m.to_f64_vec(),
                std: s.to_f64_vec(),
            }),
            _ => Err(Error::Format(format!(
                "{}: expected two equal-length rank-1 tensors",
                path.display()
            ))),
        }
    }
}

/// Estimates statistics on `corpus` and normalizes it in place.
pub fn cmvn(corpus: &mut [Tensor<f32>]) -> Result<CmvnStats> {
    let stats = CmvnStats::estimate(corpus)?;
    for f in corpus.iter_mut() {
        stats.apply(f)?;
    }
    Ok(stats)
}
