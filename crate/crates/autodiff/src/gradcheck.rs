//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input, element, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        if self.worst.is_none() || other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Which coordinates of each input to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most `n` coordinates per input, chosen with `seed`.
    Sample { n: usize, seed: u64 },
}

/// Compares the gradient of `f(inputs)` (summed to a scalar) against central
/// differences with step `h`. Every input is a trainable leaf.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, coverage: Coverage, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_impl(inputs, h, coverage, None, f)
}

/// Like [`check`] but on training-mode graphs seeded with `seed`, so every
/// evaluation draws the same dropout masks.
pub fn check_training<F>(
    inputs: &[Tensor<f64>],
    h: f64,
    coverage: Coverage,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_impl(inputs, h, coverage, Some(seed), f)
}

fn check_impl<F>(
    inputs: &[Tensor<f64>],
    h: f64,
    coverage: Coverage,
    seed: Option<u64>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let make = || seed.map(Graph::training).unwrap_or_default();
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = make();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data().iter().sum())
    };

    let mut g = make();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let root = if g.value(out).numel() == 1 { out } else { g.sum(out) };
    g.backward(root)?;

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = g.grad(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let n = inputs[k].numel();
        let coords: Vec<usize> = match coverage {
            Coverage::All => (0..n).collect(),
            Coverage::Sample { n: m, seed } if m < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9E37_79B9));
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            Coverage::Sample { .. } => (0..n).collect(),
        };
        for e in coords {
            let orig = work[k].data()[e];
            work[k].data_mut()[e] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[e] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = rel_err(analytic[e], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((k, e, analytic[e], numeric));
            }
        }
    }
    Ok(report)
}

type OpFn = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// One differentiable op in a small scalar-valued harness.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub f: OpFn,
    /// Run on a training-mode graph.
    pub training: bool,
}

fn fixed(g: &mut Graph<f64>, shape: &[usize], data: &[f64]) -> Result<Var> {
    Ok(g.constant(Tensor::from_f64(shape, data)?))
}

/// Every op of [`Graph`], each composed with whatever it takes to give it a
/// nontrivial upstream gradient.
pub fn op_cases() -> Vec<OpCase> {
    let case = |name, shapes: Vec<Vec<usize>>, f: OpFn| OpCase { name, shapes, f, training: false };
    vec![
        case("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
        case("add_broadcast", vec![vec![3, 4], vec![4]], |g, v| g.add(v[0], v[1])),
        case("sub", vec![vec![3, 4], vec![3, 4]], |g, v| g.sub(v[0], v[1])),
        case("mul_broadcast", vec![vec![2, 3, 4], vec![3, 4]], |g, v| g.mul(v[0], v[1])),
        case("scale", vec![vec![5]], |g, v| Ok(g.scale(v[0], -1.7))),
        case("transpose", vec![vec![3, 2]], |g, v| {
            let w = fixed(g, &[3, 2], &[1.0, -2.0, 0.5, 3.0, -1.0, 2.0])?;
            let tr = g.transpose(v[0])?;
            let wt = g.transpose(w)?;
            g.mul(tr, wt)
        }),
        case("softmax_last", vec![vec![3, 5]], |g, v| {
            let y = g.softmax(v[0], 1)?;
            let w = fixed(g, &[5], &[1.0, -2.0, 0.5, 3.0, -1.0])?;
            g.mul(y, w)
        }),
        case("softmax_first", vec![vec![3, 2, 2]], |g, v| {
            let y = g.softmax(v[0], 0)?;
            let w = fixed(g, &[2, 2], &[1.0, -2.0, 0.5, 3.0])?;
            g.mul(y, w)
        }),
        case("log_softmax", vec![vec![4, 3]], |g, v| {
            let y = g.log_softmax(v[0], 1)?;
            g.weighted_sum(y, &[1.0, 0.0, 2.0, -1.0, 0.5, 0.0, 0.0, 0.0, 1.0, 0.3, 0.3, 0.4])
        }),
        case("layer_norm", vec![vec![3, 6]], |g, v| {
            let y = g.layer_norm(v[0], 1e-5)?;
            let w = fixed(g, &[6], &[1.0, -2.0, 0.5, 3.0, -1.0, 0.2])?;
            g.mul(y, w)
        }),
        case("relu", vec![vec![10]], |g, v| Ok(g.relu(v[0]))),
        case("gelu", vec![vec![10]], |g, v| Ok(g.gelu(v[0]))),
        case("abs", vec![vec![10]], |g, v| Ok(g.abs(v[0]))),
        case("embedding", vec![vec![5, 3]], |g, v| {
            let e = g.embedding(v[0], &[4, 0, 4, 2])?;
            let w = fixed(g, &[3], &[1.0, -2.0, 0.5])?;
            g.mul(e, w)
        }),
        case("conv2d", vec![vec![2, 7, 5], vec![3, 2, 3, 3], vec![3]], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 2)?;
            Ok(g.gelu(y))
        }),
        case("reshape_permute", vec![vec![2, 3, 4]], |g, v| {
            let p = g.permute(v[0], &[1, 0, 2])?;
            let r = g.reshape(p, &[3, 8])?;
            let w: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
            g.weighted_sum(r, &w)
        }),
        case("mean_pool", vec![vec![6, 3]], |g, v| {
            let m = g.mean_pool(v[0], 1, 4)?;
            Ok(g.gelu(m))
        }),
        case("slice_concat", vec![vec![3, 6]], |g, v| {
            let a = g.slice_cols(v[0], 0, 2)?;
            let b = g.slice_cols(v[0], 4, 6)?;
            let c = g.concat_cols(&[b, a])?;
            let r = g.slice_rows(c, 1, 3)?;
            Ok(g.gelu(r))
        }),
        case("gather", vec![vec![3, 4]], |g, v| {
            let y = g.gelu(v[0]);
            g.gather(y, &[0, 5, 5, 11])
        }),
        case("add_all", vec![vec![2, 3], vec![2, 3], vec![2, 3]], |g, v| {
            let s = g.add_all(v)?;
            let m = g.mul(s, v[0])?;
            Ok(g.sum(m))
        }),
        OpCase {
            name: "dropout",
            shapes: vec![vec![12]],
            f: |g, v| {
                let y = g.dropout(v[0], 0.3)?;
                Ok(g.gelu(y))
            },
            training: true,
        },
    ]
}

/// `trials` random draws of every op in [`op_cases`] with entries in
/// `[-2, 2)`, checked at every coordinate with step `1e-5`.
pub fn op_suite(trials: usize, seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for case in op_cases() {
        let mut report = GradCheckReport::default();
        for trial in 0..trials {
            let inputs: Vec<Tensor<f64>> = case
                .shapes
                .iter()
                .map(|s| {
                    let n: usize = s.iter().product();
                    Tensor::from_f64(s, &(0..n).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>())
                })
                .collect::<Result<_>>()?;
            let r = if case.training {
                check_training(&inputs, 1e-5, Coverage::All, trial as u64, case.f)?
            } else {
                check(&inputs, 1e-5, Coverage::All, case.f)?
            };
            report.merge(&r);
        }
        out.push((case.name, report));
    }
    Ok(out)
}
