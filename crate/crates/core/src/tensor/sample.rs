//! Bilinear sampling and resizing.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// The four integer neighbors of a fractional coordinate with their weights.
/// Neighbors falling outside `[0, extent)` read zero (zero-padding).
#[inline]
pub(crate) fn bilinear_taps<S: Scalar>(y: S, x: S) -> [(isize, isize, S); 4] {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let (y0, x0) = (y0.as_f64() as isize, x0.as_f64() as isize);
    let one = S::one();
    [
        (y0, x0, (one - fy) * (one - fx)),
        (y0, x0 + 1, (one - fy) * fx),
        (y0 + 1, x0, fy * (one - fx)),
        (y0 + 1, x0 + 1, fy * fx),
    ]
}

#[inline]
fn in_bounds(y: isize, x: isize, h: usize, w: usize) -> bool {
    y >= 0 && x >= 0 && y < h as isize && x < w as isize
}

impl<S: Scalar> Tensor<S> {
    /// Sample `[c,h,w]` at fractional `(y,x)` locations given as a `[p,2]`
    /// tensor; returns `[c,p]`. Differentiable with respect to both the map
    /// and the points.
    pub fn bilinear_sample(&self, points: &Tensor<S>) -> Result<Tensor<S>> {
        if self.rank() != 3 {
            return Err(Error::dim(format!(
                "bilinear_sample expects [c,h,w], got {:?}",
                self.shape()
            )));
        }
        if points.rank() != 2 || points.shape()[1] != 2 {
            return Err(Error::dim(format!(
                "bilinear_sample points must be [p,2], got {:?}",
                points.shape()
            )));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let p = points.shape()[0];
        let src = self.data();
        let pts = points.data();
        let mut out = vec![S::zero(); c * p];
        for i in 0..p {
            let taps = bilinear_taps(pts[i * 2], pts[i * 2 + 1]);
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                let mut acc = S::zero();
                for &(ty, tx, wt) in &taps {
                    if in_bounds(ty, tx, h, w) {
                        acc += wt * plane[ty as usize * w + tx as usize];
                    }
                }
                out[ch * p + i] = acc;
            }
        }
        drop(src);
        drop(pts);
        Ok(Tensor::from_op(
            vec![c, p],
            out,
            vec![self.clone(), points.clone()],
            move |g, parents| {
                let src = parents[0].data();
                let pts = parents[1].data();
                let mut dmap = vec![S::zero(); c * h * w];
                let mut dpts = vec![S::zero(); p * 2];
                for i in 0..p {
                    let y = pts[i * 2];
                    let x = pts[i * 2 + 1];
                    let taps = bilinear_taps(y, x);
                    let y0 = y.floor().as_f64() as isize;
                    let x0 = x.floor().as_f64() as isize;
                    let fy = y - y.floor();
                    let fx = x - x.floor();
                    for ch in 0..c {
                        let gi = g[ch * p + i];
                        if gi == S::zero() {
                            continue;
                        }
                        let plane = &src[ch * h * w..(ch + 1) * h * w];
                        let at = |ty: isize, tx: isize| -> S {
                            if in_bounds(ty, tx, h, w) {
                                plane[ty as usize * w + tx as usize]
                            } else {
                                S::zero()
                            }
                        };
                        for &(ty, tx, wt) in &taps {
                            if in_bounds(ty, tx, h, w) {
                                dmap[(ch * h + ty as usize) * w + tx as usize] += gi * wt;
                            }
                        }
                        // d/dy and d/dx of the bilinear form
                        let v00 = at(y0, x0);
                        let v01 = at(y0, x0 + 1);
                        let v10 = at(y0 + 1, x0);
                        let v11 = at(y0 + 1, x0 + 1);
                        let one = S::one();
                        let dy = (v10 - v00) * (one - fx) + (v11 - v01) * fx;
                        let dx = (v01 - v00) * (one - fy) + (v11 - v10) * fy;
                        dpts[i * 2] += gi * dy;
                        dpts[i * 2 + 1] += gi * dx;
                    }
                }
                drop(src);
                drop(pts);
                parents[0].add_grad(&dmap);
                parents[1].add_grad(&dpts);
            },
        ))
    }

    /// Bilinear resize of `[c,h,w]` to `[c,out_h,out_w]`, align-corners-false
    /// with edge clamping; exact on constant inputs.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
        if self.rank() != 3 {
            return Err(Error::dim(format!(
                "bilinear_resize expects [c,h,w], got {:?}",
                self.shape()
            )));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::dim("bilinear_resize output extents must be >= 1"));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);

        // Per-axis source taps: (i0, i1, frac) with edge clamping.
        fn taps(out_n: usize, in_n: usize) -> Vec<(usize, usize, f64)> {
            let scale = in_n as f64 / out_n as f64;
            (0..out_n)
                .map(|i| {
                    let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                    let i0 = (src.floor() as usize).min(in_n - 1);
                    let i1 = (i0 + 1).min(in_n - 1);
                    (i0, i1, src - i0 as f64)
                })
                .collect()
        }
        let ty = taps(out_h, h);
        let tx = taps(out_w, w);

        let src = self.data();
        let mut out = vec![S::zero(); c * out_h * out_w];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fy = S::from_f64(fy);
                    let fx = S::from_f64(fx);
                    let one = S::one();
                    let v = plane[y0 * w + x0] * (one - fy) * (one - fx)
                        + plane[y0 * w + x1] * (one - fy) * fx
                        + plane[y1 * w + x0] * fy * (one - fx)
                        + plane[y1 * w + x1] * fy * fx;
                    out[(ch * out_h + oy) * out_w + ox] = v;
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            vec![c, out_h, out_w],
            out,
            vec![self.clone()],
            move |g, parents| {
                let mut dx = vec![S::zero(); c * h * w];
                for ch in 0..c {
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let gi = g[(ch * out_h + oy) * out_w + ox];
                            let fy = S::from_f64(fy);
                            let fx = S::from_f64(fx);
                            let one = S::one();
                            let base = ch * h * w;
                            dx[base + y0 * w + x0] += gi * (one - fy) * (one - fx);
                            dx[base + y0 * w + x1] += gi * (one - fy) * fx;
                            dx[base + y1 * w + x0] += gi * fy * (one - fx);
                            dx[base + y1 * w + x1] += gi * fy * fx;
                        }
                    }
                }
                parents[0].add_grad(&dx);
            },
        ))
    }
}
