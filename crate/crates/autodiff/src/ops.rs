use rand::Rng;

use crate::error::{AdError, Result};
use crate::graph::{Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

/// Output length and leading pad of a same-padded strided window.
pub fn same_pad(len: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(len);
    (out, total / 2)
}

impl<T: Scalar> Graph<T> {
    fn binary_broadcast(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !is_suffix(&sa, &sb) {
            return Err(AdError::Shape {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let m = bv.len().max(1);
        let data = av
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % m]))
            .collect();
        Tensor::new(sa, data)
    }

    /// `a + b`, where `b`'s shape may be a trailing suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_broadcast("add", a, b, |x, y| x + y)?;
        Ok(self.record(t, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_broadcast("sub", a, b, |x, y| x - y)?;
        Ok(self.record(t, Op::Sub { a, b }))
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_broadcast("mul", a, b, |x, y| x * y)?;
        Ok(self.record(t, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x * c).collect())
            .expect("same shape");
        self.record(t, Op::Scale { a, c })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x.abs()).collect())
            .expect("same shape");
        self.record(t, Op::Abs { a })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AdError::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.record(t, Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(AdError::Invalid {
                op: "transpose",
                msg: format!("expected rank 2, got {s:?}"),
            });
        }
        let t = Tensor::new(vec![s[1], s[0]], transpose_raw(self.value(a).data(), s[0], s[1]))?;
        Ok(self.record(t, Op::Transpose { a }))
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        let rank = self.shape(a).len();
        if axis >= rank {
            return Err(AdError::Axis { op, axis, rank });
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let v = self.value(a);
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let mut out = v.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut mx = out[idx(0)];
                for j in 1..len {
                    mx = mx.max(out[idx(j)]);
                }
                let mut sum = T::ZERO;
                for j in 0..len {
                    let e = (out[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.record(t, Op::Softmax { a, axis }))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", a, axis)?;
        let v = self.value(a);
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let mut out = v.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut mx = out[idx(0)];
                for j in 1..len {
                    mx = mx.max(out[idx(j)]);
                }
                let mut sum = T::ZERO;
                for j in 0..len {
                    sum += (out[idx(j)] - mx).exp();
                }
                let lse = mx + sum.ln();
                for j in 0..len {
                    out[idx(j)] -= lse;
                }
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.record(t, Op::LogSoftmax { a, axis }))
    }

    /// Normalizes over the last axis to zero mean and unit variance, without
    /// the affine part.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let v = self.value(a);
        let Some(&d) = v.shape().last() else {
            return Err(AdError::Invalid {
                op: "layer_norm",
                msg: "scalar input".into(),
            });
        };
        let rows = v.numel() / d.max(1);
        let eps = T::from_f64(eps);
        let n = T::from_usize(d);
        let mut out = v.data().to_vec();
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let is = T::ONE / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.record(t, Op::LayerNorm { a, inv_std }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = v
            .data()
            .iter()
            .map(|&x| if x > T::ZERO { x } else { T::ZERO })
            .collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.record(t, Op::Relu { a })
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (c, k) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
        let half = T::from_f64(0.5);
        let data = v
            .data()
            .iter()
            .map(|&x| half * x * (T::ONE + (c * (x + k * x * x * x)).tanh()))
            .collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.record(t, Op::Gelu { a })
    }

    /// Rows of `table` (`V×d`) selected by `ids`, giving `len(ids)×d`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(AdError::Invalid {
                op: "embedding",
                msg: format!("table must be rank 2, got {s:?}"),
            });
        }
        let (v, d) = (s[0], s[1]);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(AdError::Index {
                    op: "embedding",
                    index: id,
                    len: v,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.record(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Inverted dropout with a Bernoulli mask drawn from the graph's seed.
    /// Returns `a` unchanged in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(AdError::Invalid {
                op: "dropout",
                msg: format!("rate {p} outside [0, 1)"),
            });
        }
        if !self.is_training() || p == 0.0 {
            return Ok(a);
        }
        let n = self.value(a).numel();
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < p {
                    T::ZERO
                } else {
                    keep
                }
            })
            .collect();
        let v = self.value(a);
        let data = v.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.record(t, Op::Dropout { a, mask }))
    }

    /// Same-padded strided 2-D convolution.
    ///
    /// `input` is `[C_in, H, W]`, `weight` is `[C_out, C_in, kh, kw]` and
    /// `bias` is `[C_out]`. The output is `[C_out, ceil(H/s), ceil(W/s)]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        let sb = self.shape(bias).to_vec();
        if si.len() != 3 || sw.len() != 4 || sw[1] != si[0] || sb != [sw[0]] {
            return Err(AdError::Shape {
                op: "conv2d",
                lhs: si,
                rhs: sw,
            });
        }
        if stride == 0 || si[1] == 0 || si[2] == 0 {
            return Err(AdError::Invalid {
                op: "conv2d",
                msg: "zero stride or empty input".into(),
            });
        }
        let (cin, h, w) = (si[0], si[1], si[2]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        let (oh, pt) = same_pad(h, kh, stride);
        let (ow, pl) = same_pad(w, kw, stride);
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let b = self.value(bias).data();
        let mut out = vec![T::ZERO; cout * oh * ow];
        for co in 0..cout {
            let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = b[co]);
            for ci in 0..cin {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wt[((co * cin + ci) * kh + ky) * kw + kx];
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pt as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            for (ox, o) in orow.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - pl as isize;
                                if ix >= 0 && ix < w as isize {
                                    *o += wv * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![cout, oh, ow], out)?;
        Ok(self.record(
            t,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad: (pt, pl),
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if numel(shape) != v.numel() {
            return Err(AdError::Shape {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let t = Tensor::new(shape.to_vec(), v.data().to_vec())?;
        Ok(self.record(t, Op::Reshape { a }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = perm.to_vec();
        seen.sort_unstable();
        if perm.len() != s.len() || seen != (0..s.len()).collect::<Vec<_>>() {
            return Err(AdError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {}", s.len()),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let data = permute_raw(self.value(a).data(), &s, perm);
        let t = Tensor::new(out_shape, data)?;
        Ok(self.record(
            t,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Mean of rows `from..to` of an `L×d` tensor, giving `[d]`.
    pub fn mean_pool(&mut self, a: Var, from: usize, to: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(AdError::Invalid {
                op: "mean_pool",
                msg: format!("expected rank 2, got {s:?}"),
            });
        }
        if from >= to || to > s[0] {
            return Err(AdError::Invalid {
                op: "mean_pool",
                msg: format!("span [{from}, {to}) empty or outside {} rows", s[0]),
            });
        }
        let d = s[1];
        let v = self.value(a);
        let mut out = vec![T::ZERO; d];
        for r in from..to {
            for (o, &x) in out.iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        let n = T::from_usize(to - from);
        out.iter_mut().for_each(|o| *o /= n);
        let t = Tensor::new(vec![d], out)?;
        Ok(self.record(t, Op::MeanRows { a, from, to }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(AdError::Invalid {
                op: "slice_cols",
                msg: format!("columns [{start}, {end}) of {s:?}"),
            });
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(s[0] * (end - start));
        for r in 0..s[0] {
            out.extend_from_slice(&v.row(r)[start..end]);
        }
        let t = Tensor::new(vec![s[0], end - start], out)?;
        Ok(self.record(t, Op::SliceCols { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(AdError::Invalid {
                op: "concat_cols",
                msg: "no inputs".into(),
            });
        };
        let rows = self.shape(first)[0];
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(AdError::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            cols += s[1];
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        Ok(self.record(
            t,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || start >= end || end > s[0] {
            return Err(AdError::Invalid {
                op: "slice_rows",
                msg: format!("rows [{start}, {end}) of {s:?}"),
            });
        }
        let d = s[1];
        let data = self.value(a).data()[start * d..end * d].to_vec();
        let t = Tensor::new(vec![end - start, d], data)?;
        Ok(self.record(t, Op::SliceRows { a, start }))
    }

    /// Elements at flat row-major positions `idx`, giving `[len(idx)]`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= v.numel() {
                return Err(AdError::Index {
                    op: "gather",
                    index: i,
                    len: v.numel(),
                });
            }
            out.push(v.data()[i]);
        }
        let t = Tensor::new(vec![idx.len()], out)?;
        Ok(self.record(
            t,
            Op::Gather {
                a,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Scalar `Σ w_i a_i` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let v = self.value(a);
        if weights.len() != v.numel() {
            return Err(AdError::Shape {
                op: "weighted_sum",
                lhs: v.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let weights: Vec<T> = weights.iter().map(|&w| T::from_f64(w)).collect();
        let s = v.data().iter().zip(&weights).map(|(&x, &w)| x * w).sum();
        Ok(self.record(Tensor::scalar(s), Op::WeightedSum { a, weights }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.record(Tensor::scalar(s), Op::SumAll { a })
    }

    /// Sum of scalars, in order.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        match terms {
            [] => Ok(self.constant(Tensor::scalar(T::ZERO))),
            [first, rest @ ..] => {
                let mut acc = *first;
                for &t in rest {
                    acc = self.add(acc, t)?;
                }
                Ok(acc)
            }
        }
    }
}

pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Output element `o` (in output layout) reads input element `src[o]`.
pub(crate) fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let total = numel(shape);
    let mut src = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    for _ in 0..total {
        let off: usize = (0..rank).map(|i| counter[i] * in_strides[perm[i]]).sum();
        src.push(off);
        for i in (0..rank).rev() {
            counter[i] += 1;
            if counter[i] < out_shape[i] {
                break;
            }
            counter[i] = 0;
        }
    }
    src
}

fn permute_raw<T: Scalar>(a: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    permute_index(shape, perm).into_iter().map(|i| a[i]).collect()
}
