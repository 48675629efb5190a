use cst_autodiff::{Graph, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::spans::frame_mean;
use crate::error::{Error, Result};
use crate::model::Ctx;

/// Band widths and counts for frequency and time masking.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecAugment {
    pub freq_width: usize,
    pub freq_masks: usize,
    pub time_width: usize,
    pub time_masks: usize,
}

impl SpecAugment {
    pub const PAPER: SpecAugment = SpecAugment {
        freq_width: 30,
        freq_masks: 2,
        time_width: 40,
        time_masks: 2,
    };

    pub const OFF: SpecAugment = SpecAugment {
        freq_width: 0,
        freq_masks: 0,
        time_width: 0,
        time_masks: 0,
    };

    pub fn is_off(&self) -> bool {
        (self.freq_width == 0 || self.freq_masks == 0) && (self.time_width == 0 || self.time_masks == 0)
    }
}

/// Zeroes `freq_masks` bands of width `U{0..=freq_width}` along the feature
/// axis and `time_masks` bands of width `U{0..=time_width}` along time,
/// widths clamped to the matrix.
pub fn specaugment<T: Scalar, R: Rng + ?Sized>(features: &Tensor<T>, cfg: &SpecAugment, rng: &mut R) -> Tensor<T> {
    let mut out = features.clone();
    let (t, f) = (features.shape()[0], features.shape()[1]);
    for _ in 0..cfg.freq_masks {
        let w = rng.random_range(0..=cfg.freq_width).min(f);
        let f0 = rng.random_range(0..=f - w);
        for r in 0..t {
            out.data_mut()[r * f + f0..r * f + f0 + w].fill(T::ZERO);
        }
    }
    for _ in 0..cfg.time_masks {
        let w = rng.random_range(0..=cfg.time_width).min(t);
        let t0 = rng.random_range(0..=t - w);
        out.data_mut()[t0 * f..(t0 + w) * f].fill(T::ZERO);
    }
    out
}

/// Replaces each frame with probability `ratio` by the utterance mean.
/// Returns the masked copy and the per-frame mask.
pub fn mask_frames<T: Scalar, R: Rng + ?Sized>(
    features: &Tensor<T>,
    ratio: f64,
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<bool>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let (t, f) = (features.shape()[0], features.shape()[1]);
    let mut mask: Vec<bool> = (0..t).map(|_| rng.random_bool(ratio)).collect();
    if !mask.contains(&true) {
        mask[rng.random_range(0..t)] = true;
    }
    let mean = frame_mean(features);
    let mut out = features.clone();
    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        out.data_mut()[r * f..(r + 1) * f].copy_from_slice(&mean);
    }
    Ok((out, mask))
}

/// Mean absolute error between `pred` and `target` (both `T×F`) over the
/// rows flagged in `mask`.
pub fn recon_l1_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>, mask: &[bool]) -> Result<Var> {
    if g.shape(pred) != target.shape() || target.shape()[0] != mask.len() {
        return Err(Error::Input(format!(
            "prediction {:?}, target {:?}, mask {}",
            g.shape(pred),
            target.shape(),
            mask.len()
        )));
    }
    let f = target.shape()[1];
    let n = mask.iter().filter(|&&m| m).count() * f;
    if n == 0 {
        return Err(Error::Input("reconstruction mask selects no frames".into()));
    }
    let tgt = g.constant(target.clone());
    let diff = g.sub(pred, tgt)?;
    let abs = g.abs(diff);
    let weights: Vec<f64> = mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(if m { 1.0 / n as f64 } else { 0.0 }, f))
        .collect();
    Ok(g.weighted_sum(abs, &weights)?)
}

/// Predicted `T×F` frames from the tapped encoder layer: row `j` of the
/// `L'×4F` head output covers frames `4j..4j+4`.
pub fn recon_predictions<T: Scalar>(ctx: &mut Ctx<'_, T>, hidden_n: Var, frames: usize) -> Result<Var> {
    let f = ctx.config().feat_dim;
    let out = ctx.recon_frames(hidden_n)?;
    let rows = ctx.g.shape(out)[0];
    let flat = ctx.g.reshape(out, &[4 * rows, f])?;
    Ok(ctx.g.slice_rows(flat, 0, frames)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_width_is_identity() {
        let x = Tensor::new(vec![5, 3], (0..15).map(|v| v as f32 + 1.0).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(specaugment(&x, &SpecAugment::OFF, &mut rng), x);
        let cfg = SpecAugment { freq_width: 0, freq_masks: 2, time_width: 0, time_masks: 2 };
        assert_eq!(specaugment(&x, &cfg, &mut rng), x);
    }

    #[test]
    fn masked_cells_are_exactly_zero() {
        let x = Tensor::filled(&[50, 20], 3.0f32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = specaugment(&x, &SpecAugment::PAPER, &mut rng);
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 3.0));
    }

    #[test]
    fn l1_cases() {
        let mut g: Graph<f64> = Graph::new();
        let t = Tensor::new(vec![3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let same = g.constant(t.clone());
        let l = recon_l1_loss(&mut g, same, &t, &[true, false, true]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let shifted = Tensor::new(vec![3, 3], t.data().iter().map(|v| v + 1.0).collect()).unwrap();
        let p = g.constant(shifted);
        let l = recon_l1_loss(&mut g, p, &t, &[true, true, false]).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-12);
        // rows 0 and 2 of [[1,2,3],[4,5,6],[7,8,9]] against zeros: (6 + 24) / 6
        let z = g.constant(Tensor::zeros(&[3, 3]));
        let l = recon_l1_loss(&mut g, z, &t, &[true, false, true]).unwrap();
        assert!((g.value(l).item() - 5.0).abs() < 1e-12);
    }
}
