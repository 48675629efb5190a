use crate::graph::{Graph, Op, Var};
use crate::ops::{axis_split, matmul_raw, permute_index, transpose_raw, GELU_A, GELU_C};
use crate::scalar::Scalar;

/// Gradient contributions of node `i` to its inputs.
pub(crate) fn backward_op<T: Scalar>(g: &Graph<T>, i: usize, dy: &[T]) -> Vec<(Var, Vec<T>)> {
    let node = &g.nodes[i];
    let out = &node.value;
    let val = |v: Var| &g.nodes[v.0].value;
    let wants = |v: Var| g.nodes[v.0].requires_grad;
    let mut res = Vec::new();

    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            if wants(*a) {
                res.push((*a, dy.to_vec()));
            }
            if wants(*b) {
                res.push((*b, reduce_to_suffix(dy, val(*b).numel())));
            }
        }
        Op::Sub { a, b } => {
            if wants(*a) {
                res.push((*a, dy.to_vec()));
            }
            if wants(*b) {
                let mut gb = reduce_to_suffix(dy, val(*b).numel());
                gb.iter_mut().for_each(|x| *x = -*x);
                res.push((*b, gb));
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let m = bv.len().max(1);
            if wants(*a) {
                let ga = dy.iter().enumerate().map(|(k, &d)| d * bv[k % m]).collect();
                res.push((*a, ga));
            }
            if wants(*b) {
                let prod: Vec<T> = dy.iter().zip(av).map(|(&d, &x)| d * x).collect();
                res.push((*b, reduce_to_suffix(&prod, m)));
            }
        }
        Op::Scale { a, c } => {
            res.push((*a, dy.iter().map(|&d| d * *c).collect()));
        }
        Op::Abs { a } => {
            let ga = dy
                .iter()
                .zip(val(*a).data())
                .map(|(&d, &x)| {
                    if x > T::ZERO {
                        d
                    } else if x < T::ZERO {
                        -d
                    } else {
                        T::ZERO
                    }
                })
                .collect();
            res.push((*a, ga));
        }
        Op::MatMul { a, b } => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if wants(*a) {
                // dA = dY · Bᵀ
                let bt = transpose_raw(val(*b).data(), k, n);
                res.push((*a, matmul_raw(dy, &bt, m, n, k)));
            }
            if wants(*b) {
                // dB = Aᵀ · dY
                let at = transpose_raw(val(*a).data(), m, k);
                res.push((*b, matmul_raw(&at, dy, k, m, n)));
            }
        }
        Op::Transpose { a } => {
            let s = out.shape();
            res.push((*a, transpose_raw(dy, s[0], s[1])));
        }
        Op::Softmax { a, axis } => {
            let (outer, len, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            let mut gx = vec![T::ZERO; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let dot: T = (0..len).map(|j| dy[idx(j)] * y[idx(j)]).sum();
                    for j in 0..len {
                        gx[idx(j)] = y[idx(j)] * (dy[idx(j)] - dot);
                    }
                }
            }
            res.push((*a, gx));
        }
        Op::LogSoftmax { a, axis } => {
            let (outer, len, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            let mut gx = vec![T::ZERO; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let total: T = (0..len).map(|j| dy[idx(j)]).sum();
                    for j in 0..len {
                        gx[idx(j)] = dy[idx(j)] - y[idx(j)].exp() * total;
                    }
                }
            }
            res.push((*a, gx));
        }
        Op::LayerNorm { a, inv_std } => {
            let d = *out.shape().last().unwrap();
            let xhat = out.data();
            let n = T::from_usize(d);
            let mut gx = vec![T::ZERO; xhat.len()];
            for (r, &is) in inv_std.iter().enumerate() {
                let span = r * d..(r + 1) * d;
                let (dyr, xr) = (&dy[span.clone()], &xhat[span.clone()]);
                let mean_dy = dyr.iter().copied().sum::<T>() / n;
                let mean_dyx = dyr.iter().zip(xr).map(|(&u, &v)| u * v).sum::<T>() / n;
                for ((gv, &u), &v) in gx[span].iter_mut().zip(dyr).zip(xr) {
                    *gv = is * (u - mean_dy - v * mean_dyx);
                }
            }
            res.push((*a, gx));
        }
        Op::Relu { a } => {
            let ga = dy
                .iter()
                .zip(val(*a).data())
                .map(|(&d, &x)| if x > T::ZERO { d } else { T::ZERO })
                .collect();
            res.push((*a, ga));
        }
        Op::Gelu { a } => {
            let (c, k) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
            let half = T::from_f64(0.5);
            let three = T::from_f64(3.0);
            let ga = dy
                .iter()
                .zip(val(*a).data())
                .map(|(&d, &x)| {
                    let th = (c * (x + k * x * x * x)).tanh();
                    let dinner = c * (T::ONE + three * k * x * x);
                    d * (half * (T::ONE + th) + half * x * (T::ONE - th * th) * dinner)
                })
                .collect();
            res.push((*a, ga));
        }
        Op::Embedding { table, ids } => {
            let tv = val(*table);
            let d = tv.shape()[1];
            let mut gt = vec![T::ZERO; tv.numel()];
            for (r, &id) in ids.iter().enumerate() {
                for c in 0..d {
                    gt[id * d + c] += dy[r * d + c];
                }
            }
            res.push((*table, gt));
        }
        Op::Dropout { a, mask } => {
            res.push((*a, dy.iter().zip(mask).map(|(&d, &m)| d * m).collect()));
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            pad,
        } => {
            let (si, sw) = (val(*input).shape(), val(*weight).shape());
            let (cin, h, w) = (si[0], si[1], si[2]);
            let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
            let (oh, ow) = (out.shape()[1], out.shape()[2]);
            let (pt, pl) = *pad;
            let x = val(*input).data();
            let wt = val(*weight).data();
            let mut gx = vec![T::ZERO; x.len()];
            let mut gw = vec![T::ZERO; wt.len()];
            let mut gb = vec![T::ZERO; cout];
            for co in 0..cout {
                let dplane = &dy[co * oh * ow..(co + 1) * oh * ow];
                gb[co] = dplane.iter().copied().sum();
                for ci in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let widx = ((co * cin + ci) * kh + ky) * kw + kx;
                            let wv = wt[widx];
                            let mut acc = T::ZERO;
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - pt as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let base = (ci * h + iy as usize) * w;
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - pl as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let d = dplane[oy * ow + ox];
                                    acc += d * x[base + ix as usize];
                                    gx[base + ix as usize] += d * wv;
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
            if wants(*input) {
                res.push((*input, gx));
            }
            if wants(*weight) {
                res.push((*weight, gw));
            }
            if wants(*bias) {
                res.push((*bias, gb));
            }
        }
        Op::Reshape { a } => res.push((*a, dy.to_vec())),
        Op::Permute { a, perm } => {
            let src = permute_index(val(*a).shape(), perm);
            let mut ga = vec![T::ZERO; dy.len()];
            for (o, &s) in src.iter().enumerate() {
                ga[s] = dy[o];
            }
            res.push((*a, ga));
        }
        Op::MeanRows { a, from, to } => {
            let av = val(*a);
            let d = av.shape()[1];
            let n = T::from_usize(to - from);
            let mut ga = vec![T::ZERO; av.numel()];
            for r in *from..*to {
                for c in 0..d {
                    ga[r * d + c] = dy[c] / n;
                }
            }
            res.push((*a, ga));
        }
        Op::SliceCols { a, start } => {
            let av = val(*a);
            let (rows, cols) = (av.shape()[0], av.shape()[1]);
            let w = out.shape()[1];
            let mut ga = vec![T::ZERO; av.numel()];
            for r in 0..rows {
                ga[r * cols + start..r * cols + start + w].copy_from_slice(&dy[r * w..(r + 1) * w]);
            }
            res.push((*a, ga));
        }
        Op::ConcatCols { parts } => {
            let rows = out.shape()[0];
            let total = out.shape()[1];
            let mut offset = 0;
            for &p in parts {
                let w = val(p).shape()[1];
                if wants(p) {
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&dy[r * total + offset..r * total + offset + w]);
                    }
                    res.push((p, gp));
                }
                offset += w;
            }
        }
        Op::SliceRows { a, start } => {
            let av = val(*a);
            let d = av.shape()[1];
            let mut ga = vec![T::ZERO; av.numel()];
            ga[start * d..start * d + dy.len()].copy_from_slice(dy);
            res.push((*a, ga));
        }
        Op::Gather { a, idx } => {
            let mut ga = vec![T::ZERO; val(*a).numel()];
            for (k, &i) in idx.iter().enumerate() {
                ga[i] += dy[k];
            }
            res.push((*a, ga));
        }
        Op::WeightedSum { a, weights } => {
            res.push((*a, weights.iter().map(|&w| w * dy[0]).collect()));
        }
        Op::SumAll { a } => res.push((*a, vec![dy[0]; val(*a).numel()])),
        Op::Custom { inputs, op } => {
            let ins: Vec<_> = inputs.iter().map(|&v| val(v)).collect();
            for (v, gr) in inputs.iter().zip(op.backward(dy, &ins, out)) {
                if let Some(gr) = gr {
                    res.push((*v, gr));
                }
            }
        }
    }
    res
}

/// Sums `dy` over the leading repeats of a trailing block of length `m`.
fn reduce_to_suffix<T: Scalar>(dy: &[T], m: usize) -> Vec<T> {
    if dy.len() == m {
        return dy.to_vec();
    }
    let mut out = vec![T::ZERO; m];
    for (k, &d) in dy.iter().enumerate() {
        out[k % m] += d;
    }
    out
}
