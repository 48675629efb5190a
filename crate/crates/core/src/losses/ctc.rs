//! Connectionist temporal classification in the log domain.

use cst_autodiff::{CustomOp, Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Minimum number of frames that can emit `labels`: one per label plus a
/// separating blank between equal neighbours.
pub fn ctc_min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// `-log P(labels | logits)` and its gradient with respect to the logits.
/// `logits` is row-major `frames×classes`; `blank` is a class index.
pub fn ctc_forward_backward(
    logits: &[f64],
    frames: usize,
    classes: usize,
    labels: &[usize],
    blank: usize,
) -> Result<(f64, Vec<f64>)> {
    if logits.len() != frames * classes || frames == 0 {
        return Err(Error::Input(format!(
            "ctc logits of length {} for {frames}×{classes}",
            logits.len()
        )));
    }
    if blank >= classes {
        return Err(Error::Input(format!("blank {blank} outside {classes} classes")));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes || l == blank) {
        return Err(Error::Input(format!("ctc label {l} is the blank or out of range")));
    }
    let required = ctc_min_frames(labels);
    if required > frames {
        return Err(Error::CtcInfeasible {
            labels: labels.len(),
            required,
            frames,
        });
    }

    // log-softmax per frame
    let mut logp = vec![0.0; frames * classes];
    for t in 0..frames {
        let row = &logits[t * classes..(t + 1) * classes];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        for k in 0..classes {
            logp[t * classes + k] = row[k] - lse;
        }
    }

    // extended sequence: blank, l1, blank, l2, ..., blank
    let s_len = 2 * labels.len() + 1;
    let ext: Vec<usize> = (0..s_len).map(|s| if s % 2 == 0 { blank } else { labels[s / 2] }).collect();
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    // alpha includes the emission at t; beta covers frames after t only.
    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = logp[blank];
    if s_len > 1 {
        alpha[1] = logp[ext[1]];
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut a = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                a = log_add(a, alpha[(t - 1) * s_len + s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = a + logp[t * classes + ext[s]];
        }
    }
    let mut beta = vec![ninf; frames * s_len];
    let last = frames - 1;
    beta[last * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last * s_len + s_len - 2] = 0.0;
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let step = |s2: usize| beta[(t + 1) * s_len + s2] + logp[(t + 1) * classes + ext[s2]];
            let mut b = step(s);
            if s + 1 < s_len {
                b = log_add(b, step(s + 1));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, step(s + 2));
            }
            beta[t * s_len + s] = b;
        }
    }
    let mut log_total = alpha[last * s_len + s_len - 1];
    if s_len > 1 {
        log_total = log_add(log_total, alpha[last * s_len + s_len - 2]);
    }
    if !log_total.is_finite() {
        return Err(Error::NonFinite("ctc total path probability"));
    }

    let mut grad = vec![0.0; frames * classes];
    for t in 0..frames {
        let mut occ = vec![ninf; classes];
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s];
            occ[ext[s]] = log_add(occ[ext[s]], v);
        }
        for k in 0..classes {
            grad[t * classes + k] = logp[t * classes + k].exp() - (occ[k] - log_total).exp();
        }
    }
    Ok((-log_total, grad))
}

struct CtcOp<T> {
    grad: Vec<T>,
}

impl<T: Scalar> CustomOp<T> for CtcOp<T> {
    fn name(&self) -> &'static str {
        "ctc"
    }

    fn backward(&self, out_grad: &[T], _inputs: &[&Tensor<T>], _output: &Tensor<T>) -> Vec<Option<Vec<T>>> {
        let g = out_grad[0];
        vec![Some(self.grad.iter().map(|&x| x * g).collect())]
    }
}

/// CTC loss of `frames×classes` logits against `labels` as a graph node.
/// Computed in 64-bit whatever the graph precision.
pub fn ctc_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize], blank: usize) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(Error::Input(format!("ctc logits must be rank 2, got {shape:?}")));
    }
    let z = g.value(logits).to_f64_vec();
    let (nll, grad) = ctc_forward_backward(&z, shape[0], shape[1], labels, blank)?;
    let op = CtcOp {
        grad: grad.iter().map(|&x| T::from_f64(x)).collect(),
    };
    Ok(g.custom(&[logits], Tensor::scalar(T::from_f64(nll)), Box::new(op)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_frame_single_label() {
        let z = [0.3, -1.0, 2.0];
        let (nll, _) = ctc_forward_backward(&z, 1, 3, &[1], 2).unwrap();
        let lse = z.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((nll - (lse - z[1])).abs() < 1e-12);
    }

    #[test]
    fn two_frames_uniform() {
        let (nll, _) = ctc_forward_backward(&[0.0; 6], 2, 3, &[0], 2).unwrap();
        assert!((nll - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infeasible_is_its_own_error() {
        match ctc_forward_backward(&[0.0; 6], 2, 3, &[0, 0], 2) {
            Err(Error::CtcInfeasible { required: 3, frames: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert_eq!(ctc_min_frames(&[1, 1, 2, 2]), 6);
    }

    #[test]
    fn empty_label_is_all_blank() {
        let z = [0.5, 0.1, -0.2, 0.7];
        let (nll, _) = ctc_forward_backward(&z, 2, 2, &[], 1).unwrap();
        let lp = |t: usize| z[2 * t + 1] - (z[2 * t].exp() + z[2 * t + 1].exp()).ln();
        assert!((nll + lp(0) + lp(1)).abs() < 1e-12);
    }
}
