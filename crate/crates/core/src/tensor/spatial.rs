//! Batched spatial helpers used by the regression head: per-map means,
//! spatial broadcasting, and batch standardization.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn expect_4d<S: Scalar>(t: &Tensor<S>, op: &str) -> Result<(usize, usize, usize, usize)> {
    if t.rank() != 4 {
        return Err(Error::dim(format!(
            "{op} expects [n,c,h,w], got {:?}",
            t.shape()
        )));
    }
    let s = t.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

impl<S: Scalar> Tensor<S> {
    /// Mean over the spatial extent of each `[n,c,h,w]` map, giving `[n,c]`.
    pub fn spatial_mean(&self) -> Result<Tensor<S>> {
        let (n, c, h, w) = expect_4d(self, "spatial_mean")?;
        let hw = h * w;
        let inv = S::one() / S::from_usize(hw);
        let src = self.data();
        let mut out = vec![S::zero(); n * c];
        for i in 0..n * c {
            let mut acc = S::zero();
            for t in 0..hw {
                acc += src[i * hw + t];
            }
            out[i] = acc * inv;
        }
        drop(src);
        Ok(Tensor::from_op(
            vec![n, c],
            out,
            vec![self.clone()],
            move |g, parents| {
                parents[0].with_grad_buffer(|gp| {
                    for i in 0..n * c {
                        let gi = g[i] * inv;
                        for t in 0..hw {
                            gp[i * hw + t] += gi;
                        }
                    }
                });
            },
        ))
    }

    /// Broadcast `[n,f]` across an `h×w` grid, giving `[n,f,h,w]`.
    pub fn tile_spatial(&self, h: usize, w: usize) -> Result<Tensor<S>> {
        if self.rank() != 2 {
            return Err(Error::dim(format!(
                "tile_spatial expects [n,f], got {:?}",
                self.shape()
            )));
        }
        let (n, f) = (self.shape()[0], self.shape()[1]);
        let hw = h * w;
        let src = self.data();
        let mut out = vec![S::zero(); n * f * hw];
        for i in 0..n * f {
            out[i * hw..(i + 1) * hw].fill(src[i]);
        }
        drop(src);
        Ok(Tensor::from_op(
            vec![n, f, h, w],
            out,
            vec![self.clone()],
            move |g, parents| {
                let mut gp = vec![S::zero(); n * f];
                for i in 0..n * f {
                    for t in 0..hw {
                        gp[i] += g[i * hw + t];
                    }
                }
                parents[0].add_grad(&gp);
            },
        ))
    }

    /// Standardize each channel of `[n,c,h,w]` to zero mean and unit variance
    /// over the whole batch (statistics over n, h, w).
    pub fn standardize_batch(&self, eps: S) -> Result<Tensor<S>> {
        let (n, c, h, w) = expect_4d(self, "standardize_batch")?;
        if n == 0 {
            return Ok(Tensor::zeros(&[0, c, h, w]));
        }
        let hw = h * w;
        let m = S::from_usize(n * hw);
        let src = self.data();
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for t in 0..hw {
                    mean[ch] += src[base + t];
                }
            }
        }
        for v in mean.iter_mut() {
            *v /= m;
        }
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for t in 0..hw {
                    let d = src[base + t] - mean[ch];
                    var[ch] += d * d;
                }
            }
        }
        for v in var.iter_mut() {
            *v /= m;
        }
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let mut out = vec![S::zero(); src.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for t in 0..hw {
                    out[base + t] = (src[base + t] - mean[ch]) * inv_std[ch];
                }
            }
        }
        drop(src);
        let xhat = out.clone();
        Ok(Tensor::from_op(
            vec![n, c, h, w],
            out,
            vec![self.clone()],
            move |g, parents| {
                // dx = inv_std · (g − mean(g) − xhat · mean(g ⊙ xhat)) per channel
                let mut sum_g = vec![S::zero(); c];
                let mut sum_gx = vec![S::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for t in 0..hw {
                            sum_g[ch] += g[base + t];
                            sum_gx[ch] += g[base + t] * xhat[base + t];
                        }
                    }
                }
                let mut dx = vec![S::zero(); g.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        let mg = sum_g[ch] / m;
                        let mgx = sum_gx[ch] / m;
                        for t in 0..hw {
                            dx[base + t] =
                                inv_std[ch] * (g[base + t] - mg - xhat[base + t] * mgx);
                        }
                    }
                }
                parents[0].add_grad(&dx);
            },
        ))
    }

    /// `out[c,·] = x[c,·] * scale[c] + shift[c]` for a `[c,h,w]` map.
    pub fn channel_affine(&self, scale: &Tensor<S>, shift: &Tensor<S>) -> Result<Tensor<S>> {
        if self.rank() != 3 {
            return Err(Error::dim(format!(
                "channel_affine expects [c,h,w], got {:?}",
                self.shape()
            )));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if scale.numel() != c || shift.numel() != c {
            return Err(Error::dim(format!(
                "channel_affine params want {c} values, got {} and {}",
                scale.numel(),
                shift.numel()
            )));
        }
        let hw = h * w;
        let src = self.data();
        let sc = scale.data();
        let sh = shift.data();
        let mut out = vec![S::zero(); src.len()];
        for ch in 0..c {
            for t in 0..hw {
                out[ch * hw + t] = src[ch * hw + t] * sc[ch] + sh[ch];
            }
        }
        drop(src);
        drop(sc);
        drop(sh);
        Ok(Tensor::from_op(
            vec![c, h, w],
            out,
            vec![self.clone(), scale.clone(), shift.clone()],
            move |g, parents| {
                let x = parents[0].data();
                let sc = parents[1].data();
                let mut dx = vec![S::zero(); x.len()];
                let mut dsc = vec![S::zero(); c];
                let mut dsh = vec![S::zero(); c];
                for ch in 0..c {
                    for t in 0..hw {
                        let gi = g[ch * hw + t];
                        dx[ch * hw + t] = gi * sc[ch];
                        dsc[ch] += gi * x[ch * hw + t];
                        dsh[ch] += gi;
                    }
                }
                drop(x);
                drop(sc);
                parents[0].add_grad(&dx);
                parents[1].add_grad(&dsc);
                parents[2].add_grad(&dsh);
            },
        ))
    }

    /// `out[i,c,·] = x[i,c,·] * scale[i,c] + shift[i,c]` for `[n,c,h,w]` maps.
    pub fn affine_per_instance(
        &self,
        scale: &Tensor<S>,
        shift: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        let (n, c, h, w) = expect_4d(self, "affine_per_instance")?;
        for (t, name) in [(scale, "scale"), (shift, "shift")] {
            if t.shape() != [n, c] {
                return Err(Error::dim(format!(
                    "affine_per_instance {name} must be [{n},{c}], got {:?}",
                    t.shape()
                )));
            }
        }
        let hw = h * w;
        let src = self.data();
        let sc = scale.data();
        let sh = shift.data();
        let mut out = vec![S::zero(); src.len()];
        for i in 0..n * c {
            for t in 0..hw {
                out[i * hw + t] = src[i * hw + t] * sc[i] + sh[i];
            }
        }
        drop(src);
        drop(sc);
        drop(sh);
        Ok(Tensor::from_op(
            vec![n, c, h, w],
            out,
            vec![self.clone(), scale.clone(), shift.clone()],
            move |g, parents| {
                let x = parents[0].data();
                let sc = parents[1].data();
                let mut dx = vec![S::zero(); x.len()];
                let mut dsc = vec![S::zero(); n * c];
                let mut dsh = vec![S::zero(); n * c];
                for i in 0..n * c {
                    for t in 0..hw {
                        let gi = g[i * hw + t];
                        dx[i * hw + t] = gi * sc[i];
                        dsc[i] += gi * x[i * hw + t];
                        dsh[i] += gi;
                    }
                }
                drop(x);
                drop(sc);
                parents[0].add_grad(&dx);
                parents[1].add_grad(&dsc);
                parents[2].add_grad(&dsh);
            },
        ))
    }
}
