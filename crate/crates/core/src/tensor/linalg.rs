//! Matrix product, shape surgery, axiswise reductions, and normalization.

use super::{axis_split, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// out += a[m×k] · b[k×n]
pub(crate) fn mm_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == S::zero() {
                continue;
            }
            let brow = &b[kk * n..kk * n + n];
            let orow = &mut out[i * n..i * n + n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out += a[m×k] · b[n×k]ᵀ
pub(crate) fn mm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..i * k + k];
        for j in 0..n {
            let brow = &b[j * k..j * k + k];
            let mut acc = S::zero();
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            out[i * n + j] += acc;
        }
    }
}

/// out += a[k×m]ᵀ · b[k×n]
pub(crate) fn mm_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for kk in 0..k {
        let brow = &b[kk * n..kk * n + n];
        for i in 0..m {
            let av = a[kk * m + i];
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[i * n..i * n + n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

impl<S: Scalar> Tensor<S> {
    /// Standard 2-D matrix product.
    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        if self.rank() != 2 || rhs.rank() != 2 {
            return Err(Error::dim(format!(
                "matmul expects 2-D operands, got {:?} and {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (rhs.shape()[0], rhs.shape()[1]);
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {:?} × {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let mut out = vec![S::zero(); m * n];
        mm_nn(&self.data(), &rhs.data(), m, k, n, &mut out);
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            move |g, parents| {
                // dA = g · Bᵀ, dB = Aᵀ · g
                parents[0].with_grad_buffer(|ga| {
                    mm_nt(g, &parents[1].data(), m, n, k, ga);
                });
                parents[1].with_grad_buffer(|gb| {
                    mm_tn(&parents[0].data(), g, k, m, n, gb);
                });
            },
        ))
    }

    /// Add a length-n bias to every row of an [m, n] tensor.
    pub fn add_row_bias(&self, bias: &Tensor<S>) -> Result<Tensor<S>> {
        if self.rank() != 2 {
            return Err(Error::dim(format!(
                "add_row_bias expects a 2-D tensor, got {:?}",
                self.shape()
            )));
        }
        let (m, n) = (self.shape()[0], self.shape()[1]);
        if bias.numel() != n {
            return Err(Error::dim(format!(
                "add_row_bias: bias wants {n} values, got {}",
                bias.numel()
            )));
        }
        let src = self.data();
        let b = bias.data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = src[i * n + j] + b[j];
            }
        }
        drop(src);
        drop(b);
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), bias.clone()],
            move |g, parents| {
                parents[0].add_grad(g);
                let mut db = vec![S::zero(); n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += g[i * n + j];
                    }
                }
                parents[1].add_grad(&db);
            },
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor<S>> {
        if self.rank() != 2 {
            return Err(Error::dim(format!(
                "transpose expects a 2-D tensor, got {:?}",
                self.shape()
            )));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let src = self.data();
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            vec![c, r],
            out,
            vec![self.clone()],
            move |g, parents| {
                let mut gt = vec![S::zero(); r * c];
                for j in 0..c {
                    for i in 0..r {
                        gt[i * c + j] = g[j * r + i];
                    }
                }
                parents[0].add_grad(&gt);
            },
        ))
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::dim(format!(
                "reshape {:?} -> {:?}: element count differs",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            |g, parents| {
                parents[0].add_grad(g);
            },
        ))
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(parts: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors".to_string()));
        }
        let rank = parts[0].rank();
        if axis >= rank {
            return Err(Error::dim(format!("concat axis {axis} out of rank {rank}")));
        }
        for p in parts {
            if p.rank() != rank {
                return Err(Error::dim("concat rank mismatch".to_string()));
            }
            for (d, (&a, &b)) in parts[0].shape().iter().zip(p.shape()).enumerate() {
                if d != axis && a != b {
                    return Err(Error::dim(format!(
                        "concat: shape {:?} vs {:?} differ off-axis",
                        parts[0].shape(),
                        p.shape()
                    )));
                }
            }
        }
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let (outer, total_len, inner) = axis_split(&out_shape, axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();

        let mut out = vec![S::zero(); outer * total_len * inner];
        let mut offset = 0;
        for (p, &len) in parts.iter().zip(&lens) {
            let src = p.data();
            for o in 0..outer {
                let dst_base = (o * total_len + offset) * inner;
                let src_base = o * len * inner;
                out[dst_base..dst_base + len * inner]
                    .copy_from_slice(&src[src_base..src_base + len * inner]);
            }
            offset += len;
        }

        let parents: Vec<Tensor<S>> = parts.iter().map(|p| (*p).clone()).collect();
        Ok(Tensor::from_op(out_shape, out, parents, move |g, parents| {
            let mut offset = 0;
            for (p, &len) in parents.iter().zip(&lens) {
                p.with_grad_buffer(|gp| {
                    for o in 0..outer {
                        let src_base = (o * total_len + offset) * inner;
                        let dst_base = o * len * inner;
                        for t in 0..len * inner {
                            gp[dst_base + t] += g[src_base + t];
                        }
                    }
                });
                offset += len;
            }
        }))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<S>> {
        if axis >= self.rank() {
            return Err(Error::dim(format!(
                "narrow axis {axis} out of rank {}",
                self.rank()
            )));
        }
        if start + len > self.shape()[axis] {
            return Err(Error::dim(format!(
                "narrow [{start}, {}) exceeds extent {}",
                start + len,
                self.shape()[axis]
            )));
        }
        let (outer, full, inner) = axis_split(self.shape(), axis);
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let src = self.data();
        let mut out = vec![S::zero(); outer * len * inner];
        for o in 0..outer {
            let src_base = (o * full + start) * inner;
            let dst_base = o * len * inner;
            out[dst_base..dst_base + len * inner]
                .copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        drop(src);
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            move |g, parents| {
                parents[0].with_grad_buffer(|gp| {
                    for o in 0..outer {
                        let dst_base = (o * full + start) * inner;
                        let src_base = o * len * inner;
                        for t in 0..len * inner {
                            gp[dst_base + t] += g[src_base + t];
                        }
                    }
                });
            },
        ))
    }

    /// Gather elements by flat index; output is 1-D.
    pub fn gather_flat(&self, indices: &[usize]) -> Result<Tensor<S>> {
        let n = self.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::dim(format!(
                "gather_flat index {bad} out of {n} elements"
            )));
        }
        let src = self.data();
        let out: Vec<S> = indices.iter().map(|&i| src[i]).collect();
        drop(src);
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            vec![indices.len()],
            out,
            vec![self.clone()],
            move |g, parents| {
                parents[0].with_grad_buffer(|gp| {
                    for (&i, &gi) in idx.iter().zip(g) {
                        gp[i] += gi;
                    }
                });
            },
        ))
    }

    /// Sum out one axis.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<S>> {
        if axis >= self.rank() {
            return Err(Error::dim(format!(
                "sum_axis axis {axis} out of rank {}",
                self.rank()
            )));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut out_shape: Vec<usize> = self.shape().to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let src = self.data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            move |g, parents| {
                parents[0].with_grad_buffer(|gp| {
                    for o in 0..outer {
                        for j in 0..len {
                            let base = (o * len + j) * inner;
                            for i in 0..inner {
                                gp[base + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            },
        ))
    }

    /// Softmax along `axis` (max-shifted for stability).
    pub fn softmax(&self, axis: usize) -> Result<Tensor<S>> {
        if axis >= self.rank() {
            return Err(Error::dim(format!(
                "softmax axis {axis} out of rank {}",
                self.rank()
            )));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let src = self.data();
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = src[at(0)];
                for j in 1..len {
                    mx = mx.max(src[at(j)]);
                }
                let mut denom = S::zero();
                for j in 0..len {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    denom += e;
                }
                for j in 0..len {
                    out[at(j)] /= denom;
                }
            }
        }
        drop(src);
        let saved = out.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |g, parents| {
                // dx = y ⊙ (g − Σ_j g_j y_j) per slice
                let mut contrib = vec![S::zero(); saved.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut dot = S::zero();
                        for j in 0..len {
                            dot += g[at(j)] * saved[at(j)];
                        }
                        for j in 0..len {
                            contrib[at(j)] = saved[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                parents[0].add_grad(&contrib);
            },
        ))
    }

    /// log(softmax(x)) along `axis`, computed stably.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<S>> {
        if axis >= self.rank() {
            return Err(Error::dim(format!(
                "log_softmax axis {axis} out of rank {}",
                self.rank()
            )));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let src = self.data();
        let mut out = vec![S::zero(); src.len()];
        let mut soft = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = src[at(0)];
                for j in 1..len {
                    mx = mx.max(src[at(j)]);
                }
                let mut denom = S::zero();
                for j in 0..len {
                    denom += (src[at(j)] - mx).exp();
                }
                let log_denom = denom.ln();
                for j in 0..len {
                    out[at(j)] = src[at(j)] - mx - log_denom;
                    soft[at(j)] = (src[at(j)] - mx).exp() / denom;
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |g, parents| {
                // dx = g − softmax ⊙ Σ_j g_j per slice
                let mut contrib = vec![S::zero(); soft.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut gsum = S::zero();
                        for j in 0..len {
                            gsum += g[at(j)];
                        }
                        for j in 0..len {
                            contrib[at(j)] = g[at(j)] - soft[at(j)] * gsum;
                        }
                    }
                }
                parents[0].add_grad(&contrib);
            },
        ))
    }

    /// Layer normalization over the last axis of a 2-D tensor, with affine
    /// parameters `gamma` and `beta` of length C.
    pub fn layer_norm(&self, gamma: &Tensor<S>, beta: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
        if self.rank() != 2 {
            return Err(Error::dim(format!(
                "layer_norm expects [T, C], got {:?}",
                self.shape()
            )));
        }
        let (t, c) = (self.shape()[0], self.shape()[1]);
        if gamma.numel() != c || beta.numel() != c {
            return Err(Error::dim(format!(
                "layer_norm affine params want {c} elements, got {} and {}",
                gamma.numel(),
                beta.numel()
            )));
        }
        let src = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let cn = S::from_usize(c);
        let mut out = vec![S::zero(); t * c];
        let mut xhat = vec![S::zero(); t * c];
        let mut inv_std = vec![S::zero(); t];
        for r in 0..t {
            let row = &src[r * c..(r + 1) * c];
            let mu = row.iter().fold(S::zero(), |a, &v| a + v) / cn;
            let var = row
                .iter()
                .fold(S::zero(), |a, &v| a + (v - mu) * (v - mu))
                / cn;
            let istd = S::one() / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..c {
                let xh = (row[j] - mu) * istd;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * gm[j] + bt[j];
            }
        }
        drop(src);
        drop(gm);
        drop(bt);
        Ok(Tensor::from_op(
            vec![t, c],
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g, parents| {
                let gm = parents[1].data();
                let mut gx = vec![S::zero(); t * c];
                let mut ggamma = vec![S::zero(); c];
                let mut gbeta = vec![S::zero(); c];
                for r in 0..t {
                    let mut sum_dxhat = S::zero();
                    let mut sum_dxhat_xhat = S::zero();
                    for j in 0..c {
                        let idx = r * c + j;
                        let dxhat = g[idx] * gm[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat[idx];
                        ggamma[j] += g[idx] * xhat[idx];
                        gbeta[j] += g[idx];
                    }
                    let istd = inv_std[r];
                    for j in 0..c {
                        let idx = r * c + j;
                        let dxhat = g[idx] * gm[j];
                        gx[idx] =
                            istd * (dxhat - sum_dxhat / cn - xhat[idx] * sum_dxhat_xhat / cn);
                    }
                }
                drop(gm);
                parents[0].add_grad(&gx);
                parents[1].add_grad(&ggamma);
                parents[2].add_grad(&gbeta);
            },
        ))
    }
}
