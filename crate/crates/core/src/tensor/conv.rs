//! 2-D convolution (cross-correlation convention, zero padding).

use super::linalg::{mm_nn, mm_nt, mm_tn};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    sy: usize,
    sx: usize,
    py: usize,
    px: usize,
    oh: usize,
    ow: usize,
}

/// col[(c·kh·kw) × (oh·ow)] laid out row-major; zero outside the input.
fn im2col<S: Scalar>(x: &[S], g: &ConvGeom, col: &mut [S]) {
    let l = g.oh * g.ow;
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * l;
                for oy in 0..g.oh {
                    let iy = (oy * g.sy + ky) as isize - g.py as isize;
                    if iy < 0 || iy >= g.h as isize {
                        for ox in 0..g.ow {
                            col[row + oy * g.ow + ox] = S::zero();
                        }
                        continue;
                    }
                    let src = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.sx + kx) as isize - g.px as isize;
                        col[row + oy * g.ow + ox] = if ix < 0 || ix >= g.w as isize {
                            S::zero()
                        } else {
                            x[src + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the column gradient back onto the input image.
fn col2im_add<S: Scalar>(col: &[S], g: &ConvGeom, x_grad: &mut [S]) {
    let l = g.oh * g.ow;
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * l;
                for oy in 0..g.oh {
                    let iy = (oy * g.sy + ky) as isize - g.py as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.sx + kx) as isize - g.px as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x_grad[dst + ix as usize] += col[row + oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<S: Scalar> Tensor<S> {
    /// Convolve `[n,c,h,w]` (or `[c,h,w]`, treated as n=1) with weights
    /// `[o,c,kh,kw]`. `bias`, when given, is one value per output channel.
    pub fn conv2d(
        &self,
        weight: &Tensor<S>,
        bias: Option<&Tensor<S>>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Tensor<S>> {
        let batched = match self.rank() {
            3 => false,
            4 => true,
            r => {
                return Err(Error::dim(format!(
                    "conv2d input must be 3-D or 4-D, got rank {r}"
                )))
            }
        };
        if weight.rank() != 4 {
            return Err(Error::dim(format!(
                "conv2d weight must be [o,c,kh,kw], got {:?}",
                weight.shape()
            )));
        }
        let (n, c, h, w) = if batched {
            let s = self.shape();
            (s[0], s[1], s[2], s[3])
        } else {
            let s = self.shape();
            (1, s[0], s[1], s[2])
        };
        let ws = weight.shape();
        let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c {
            return Err(Error::dim(format!(
                "conv2d: input has {c} channels, weight expects {wc}"
            )));
        }
        if let Some(b) = bias {
            if b.numel() != o {
                return Err(Error::dim(format!(
                    "conv2d bias wants {o} values, got {}",
                    b.numel()
                )));
            }
        }
        let (sy, sx) = stride;
        let (py, px) = pad;
        if sy == 0 || sx == 0 {
            return Err(Error::dim("conv2d stride must be positive".to_string()));
        }
        if h + 2 * py < kh || w + 2 * px < kw {
            return Err(Error::dim(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * py,
                w + 2 * px
            )));
        }
        let oh = (h + 2 * py - kh) / sy + 1;
        let ow = (w + 2 * px - kw) / sx + 1;
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            sy,
            sx,
            py,
            px,
            oh,
            ow,
        };

        let ckk = c * kh * kw;
        let l = oh * ow;
        let mut out = vec![S::zero(); n * o * l];
        {
            let x = self.data();
            let wd = weight.data();
            let mut col = vec![S::zero(); ckk * l];
            for b in 0..n {
                im2col(&x[b * c * h * w..(b + 1) * c * h * w], &geom, &mut col);
                mm_nn(&wd, &col, o, ckk, l, &mut out[b * o * l..(b + 1) * o * l]);
            }
        }
        if let Some(bt) = bias {
            let bd = bt.data();
            for b in 0..n {
                for ch in 0..o {
                    let base = (b * o + ch) * l;
                    for t in 0..l {
                        out[base + t] += bd[ch];
                    }
                }
            }
        }

        let out_shape = if batched {
            vec![n, o, oh, ow]
        } else {
            vec![o, oh, ow]
        };
        let mut parents = vec![self.clone(), weight.clone()];
        let has_bias = bias.is_some();
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(out_shape, out, parents, move |g, parents| {
            let x = parents[0].data();
            let wd = parents[1].data();
            let ckk = geom.c * geom.kh * geom.kw;
            let l = geom.oh * geom.ow;
            let mut col = vec![S::zero(); ckk * l];
            let mut dcol = vec![S::zero(); ckk * l];
            let mut dx = vec![S::zero(); geom.n * geom.c * geom.h * geom.w];
            let mut dw = vec![S::zero(); geom.o * ckk];
            for b in 0..geom.n {
                let gb = &g[b * geom.o * l..(b + 1) * geom.o * l];
                im2col(
                    &x[b * geom.c * geom.h * geom.w..(b + 1) * geom.c * geom.h * geom.w],
                    &geom,
                    &mut col,
                );
                // dW += g · colᵀ
                mm_nt(gb, &col, geom.o, l, ckk, &mut dw);
                // dcol = Wᵀ · g
                dcol.iter_mut().for_each(|v| *v = S::zero());
                mm_tn(&wd, gb, ckk, geom.o, l, &mut dcol);
                col2im_add(
                    &dcol,
                    &geom,
                    &mut dx[b * geom.c * geom.h * geom.w..(b + 1) * geom.c * geom.h * geom.w],
                );
            }
            drop(x);
            drop(wd);
            parents[0].add_grad(&dx);
            parents[1].add_grad(&dw);
            if has_bias {
                let mut db = vec![S::zero(); geom.o];
                for b in 0..geom.n {
                    for ch in 0..geom.o {
                        let base = (b * geom.o + ch) * l;
                        for t in 0..l {
                            db[ch] += g[base + t];
                        }
                    }
                }
                parents[2].add_grad(&db);
            }
        }))
    }
}
