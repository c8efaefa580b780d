//! Adaptive scale-aware 3D regression head.
//!
//! Per-RoI pipeline: encode the 2D box size into a scale feature, refine the
//! RoI-aligned semantics, fuse both into deformable-convolution offsets and a
//! variance-based attention mask, then run six parallel regression branches
//! (modulated deformable conv, attentive normalization, LeakyReLU, 1×1 conv)
//! for the 3D outputs.

use crate::ehfam::{conv_init, Linear};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// RoI-Align output grid (d × d).
pub const ROI_SIZE: usize = 7;
/// Width of the encoded scale feature.
pub const SCALE_FEAT: usize = 32;
/// Mixture components in attentive normalization.
pub const AN_COMPONENTS: usize = 5;
/// Constant in the variance-attention denominator.
pub const SIMAM_LAMBDA: f64 = 1e-4;

/// Axis-aligned rectangle on the stride-4 feature map.
#[derive(Debug, Clone, Copy)]
pub struct RoiRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl RoiRect {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }
}

/// One batch of regions: aligned features `[n,C,7,7]`, raw 2D box sizes
/// `[n,2]` (width, height in image pixels), and the source rectangles.
pub struct RoiBatch<S: Scalar> {
    pub features: Tensor<S>,
    pub sizes: Tensor<S>,
    pub boxes: Vec<RoiRect>,
    pub degenerate: Vec<bool>,
}

impl<S: Scalar> RoiBatch<S> {
    /// Extract RoIs from a stride-4 feature map. Box sizes are converted to
    /// image pixels with the given stride.
    pub fn from_feature_map(f: &Tensor<S>, boxes: &[RoiRect], stride: usize) -> Result<Self> {
        let (features, degenerate) = roi_align(f, boxes)?;
        let mut sizes = Vec::with_capacity(boxes.len() * 2);
        for b in boxes {
            sizes.push(S::from_f64(b.width() * stride as f64));
            sizes.push(S::from_f64(b.height() * stride as f64));
        }
        Ok(RoiBatch {
            features,
            sizes: Tensor::from_vec(&[boxes.len(), 2], sizes)?,
            boxes: boxes.to_vec(),
            degenerate,
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// RoI sampling position with edge clamping: positions outside
/// `[-1, extent]` read zero, positions in the border band clamp to the edge.
#[inline]
fn roi_sample_taps<S: Scalar>(
    y: S,
    x: S,
    h: usize,
    w: usize,
) -> Option<([usize; 2], [usize; 2], S, S)> {
    let yf = y.as_f64();
    let xf = x.as_f64();
    if yf < -1.0 || yf > h as f64 || xf < -1.0 || xf > w as f64 {
        return None;
    }
    let yf = yf.max(0.0);
    let xf = xf.max(0.0);
    let mut y0 = yf.floor() as usize;
    let mut x0 = xf.floor() as usize;
    let (y1, fy) = if y0 >= h - 1 {
        y0 = h - 1;
        (h - 1, 0.0)
    } else {
        (y0 + 1, yf - y0 as f64)
    };
    let (x1, fx) = if x0 >= w - 1 {
        x0 = w - 1;
        (w - 1, 0.0)
    } else {
        (x0 + 1, xf - x0 as f64)
    };
    Some(([y0, y1], [x0, x1], S::from_f64(fy), S::from_f64(fx)))
}

/// RoI-Align on a `[C,H,W]` map: each of the 7×7 output cells is the mean of
/// a 2×2 grid of bilinear samples inside its bin. Boxes are clamped to the
/// map; a box with no area left after clamping yields zero features and a
/// raised flag. Differentiable with respect to the map.
pub fn roi_align<S: Scalar>(f: &Tensor<S>, boxes: &[RoiRect]) -> Result<(Tensor<S>, Vec<bool>)> {
    if f.rank() != 3 {
        return Err(Error::dim(format!(
            "roi_align expects [c,h,w], got {:?}",
            f.shape()
        )));
    }
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let n = boxes.len();
    let d = ROI_SIZE;

    struct BinPlan<S> {
        // (flat sample weights) per cell: up to 4 samples × 4 taps
        taps: Vec<(usize, S)>, // (spatial index, weight) pairs into one channel plane
    }
    let mut plans: Vec<BinPlan<S>> = Vec::with_capacity(n * d * d);
    let mut degenerate = vec![false; n];
    for (bi, b) in boxes.iter().enumerate() {
        let x0 = b.x0.max(0.0).min(w as f64);
        let x1 = b.x1.max(0.0).min(w as f64);
        let y0 = b.y0.max(0.0).min(h as f64);
        let y1 = b.y1.max(0.0).min(h as f64);
        let bw = (x1 - x0) / d as f64;
        let bh = (y1 - y0) / d as f64;
        if bw <= 0.0 || bh <= 0.0 {
            degenerate[bi] = true;
            for _ in 0..d * d {
                plans.push(BinPlan { taps: Vec::new() });
            }
            continue;
        }
        for i in 0..d {
            for j in 0..d {
                let mut taps = Vec::with_capacity(16);
                for sy in 0..2 {
                    for sx in 0..2 {
                        let y = y0 + (i as f64 + (sy as f64 + 0.5) / 2.0) * bh;
                        let x = x0 + (j as f64 + (sx as f64 + 0.5) / 2.0) * bw;
                        if let Some(([ty0, ty1], [tx0, tx1], fy, fx)) =
                            roi_sample_taps::<S>(S::from_f64(y), S::from_f64(x), h, w)
                        {
                            let quarter = S::from_f64(0.25);
                            let one = S::one();
                            taps.push((ty0 * w + tx0, quarter * (one - fy) * (one - fx)));
                            taps.push((ty0 * w + tx1, quarter * (one - fy) * fx));
                            taps.push((ty1 * w + tx0, quarter * fy * (one - fx)));
                            taps.push((ty1 * w + tx1, quarter * fy * fx));
                        }
                    }
                }
                plans.push(BinPlan { taps });
            }
        }
    }

    let src = f.data();
    let mut out = vec![S::zero(); n * c * d * d];
    for bi in 0..n {
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            let base = (bi * c + ch) * d * d;
            for cell in 0..d * d {
                let plan = &plans[bi * d * d + cell];
                let mut acc = S::zero();
                for &(idx, wt) in &plan.taps {
                    acc += plane[idx] * wt;
                }
                out[base + cell] = acc;
            }
        }
    }
    drop(src);

    let tensor = Tensor::from_op(
        vec![n, c, d, d],
        out,
        vec![f.clone()],
        move |g, parents| {
            parents[0].with_grad_buffer(|gf| {
                for bi in 0..n {
                    for ch in 0..c {
                        let base = (bi * c + ch) * d * d;
                        let plane = ch * h * w;
                        for cell in 0..d * d {
                            let gi = g[base + cell];
                            if gi == S::zero() {
                                continue;
                            }
                            for &(idx, wt) in &plans[bi * d * d + cell].taps {
                                gf[plane + idx] += gi * wt;
                            }
                        }
                    }
                }
            });
        },
    );
    Ok((tensor, degenerate))
}

/// Pre-projection variance-attention argument: `V / ((1/(d·d−1))·ΣV + λ) + 0.5`
/// where `V` is the squared deviation from the per-channel spatial mean.
/// Adding a constant to the input leaves the result unchanged.
pub fn simam_argument<S: Scalar>(fr: &Tensor<S>, lambda: S) -> Result<Tensor<S>> {
    if fr.rank() != 4 {
        return Err(Error::dim(format!(
            "variance attention expects [n,c,d,d], got {:?}",
            fr.shape()
        )));
    }
    let (h, w) = (fr.shape()[2], fr.shape()[3]);
    let dd = h * w;
    if dd <= 1 {
        return Err(Error::contract(
            "variance attention needs a spatial extent larger than 1",
        ));
    }
    let mu = fr.spatial_mean()?.tile_spatial(h, w)?;
    let v = fr.sub(&mu)?.square();
    // ΣV/(dd−1) = mean(V)·dd/(dd−1)
    let denom = v
        .spatial_mean()?
        .mul_scalar(S::from_usize(dd) / S::from_usize(dd - 1))
        .add_scalar(lambda)
        .tile_spatial(h, w)?;
    Ok(v.div(&denom)?.add_scalar(S::from_f64(0.5)))
}

/// Modulated deformable 3×3 convolution (pad 1): each kernel tap reads the
/// input at `p + P_k + ΔS_k(p)` with bilinear interpolation (zero outside)
/// and is weighted by its mask value. Differentiable with respect to the
/// input, the offsets, the masks, the kernel, and the bias.
pub fn modulated_deform_conv<S: Scalar>(
    fr: &Tensor<S>,
    offsets: &Tensor<S>,
    masks: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<Tensor<S>> {
    if fr.rank() != 4 || offsets.rank() != 4 || masks.rank() != 4 {
        return Err(Error::dim(
            "deform conv expects 4-D input, offsets and masks",
        ));
    }
    let (n, c, h, w) = (fr.shape()[0], fr.shape()[1], fr.shape()[2], fr.shape()[3]);
    if offsets.shape() != [n, 18, h, w] {
        return Err(Error::dim(format!(
            "deform conv offsets must be [{n},18,{h},{w}], got {:?}",
            offsets.shape()
        )));
    }
    if masks.shape() != [n, 9, h, w] {
        return Err(Error::dim(format!(
            "deform conv masks must be [{n},9,{h},{w}], got {:?}",
            masks.shape()
        )));
    }
    if weight.rank() != 4 || weight.shape()[1] != c || weight.shape()[2] != 3 || weight.shape()[3] != 3
    {
        return Err(Error::dim(format!(
            "deform conv weight must be [o,{c},3,3], got {:?}",
            weight.shape()
        )));
    }
    let o = weight.shape()[0];
    if bias.numel() != o {
        return Err(Error::dim(format!(
            "deform conv bias wants {o} values, got {}",
            bias.numel()
        )));
    }

    let hw = h * w;
    let sample = |plane: &[S], y: S, x: S| -> S {
        let taps = crate::tensor::bilinear_taps(y, x);
        let mut acc = S::zero();
        for &(ty, tx, wt) in &taps {
            if ty >= 0 && tx >= 0 && ty < h as isize && tx < w as isize {
                acc += wt * plane[ty as usize * w + tx as usize];
            }
        }
        acc
    };

    let fr_d = fr.data();
    let off_d = offsets.data();
    let m_d = masks.data();
    let w_d = weight.data();
    let b_d = bias.data();
    let mut out = vec![S::zero(); n * o * hw];
    let mut sampled = vec![S::zero(); c];
    for b in 0..n {
        let fr_base = b * c * hw;
        for py in 0..h {
            for px in 0..w {
                let p = py * w + px;
                for oc in 0..o {
                    out[(b * o + oc) * hw + p] = b_d[oc];
                }
                for k in 0..9 {
                    let (ky, kx) = (k / 3, k % 3);
                    let dy = off_d[(b * 18 + 2 * k) * hw + p];
                    let dx = off_d[(b * 18 + 2 * k + 1) * hw + p];
                    let m = m_d[(b * 9 + k) * hw + p];
                    let y = S::from_usize(py) + S::from_f64(ky as f64 - 1.0) + dy;
                    let x = S::from_usize(px) + S::from_f64(kx as f64 - 1.0) + dx;
                    for (ch, s) in sampled.iter_mut().enumerate() {
                        *s = sample(&fr_d[fr_base + ch * hw..fr_base + (ch + 1) * hw], y, x);
                    }
                    for oc in 0..o {
                        let wrow = &w_d[(oc * c) * 9 + k..];
                        let mut acc = S::zero();
                        for ch in 0..c {
                            acc += wrow[ch * 9] * sampled[ch];
                        }
                        out[(b * o + oc) * hw + p] += m * acc;
                    }
                }
            }
        }
    }
    drop(fr_d);
    drop(off_d);
    drop(m_d);
    drop(w_d);
    drop(b_d);

    Ok(Tensor::from_op(
        vec![n, o, h, w],
        out,
        vec![
            fr.clone(),
            offsets.clone(),
            masks.clone(),
            weight.clone(),
            bias.clone(),
        ],
        move |g, parents| {
            let fr_d = parents[0].data();
            let off_d = parents[1].data();
            let m_d = parents[2].data();
            let w_d = parents[3].data();
            let mut d_fr = vec![S::zero(); n * c * hw];
            let mut d_off = vec![S::zero(); n * 18 * hw];
            let mut d_m = vec![S::zero(); n * 9 * hw];
            let mut d_w = vec![S::zero(); o * c * 9];
            let mut d_b = vec![S::zero(); o];
            let mut sampled = vec![S::zero(); c];
            let mut grad_y = vec![S::zero(); c];
            let mut grad_x = vec![S::zero(); c];
            let mut cw = vec![S::zero(); c];
            for b in 0..n {
                let fr_base = b * c * hw;
                for py in 0..h {
                    for px in 0..w {
                        let p = py * w + px;
                        for oc in 0..o {
                            d_b[oc] += g[(b * o + oc) * hw + p];
                        }
                        for k in 0..9 {
                            let (ky, kx) = (k / 3, k % 3);
                            let dy = off_d[(b * 18 + 2 * k) * hw + p];
                            let dx = off_d[(b * 18 + 2 * k + 1) * hw + p];
                            let m = m_d[(b * 9 + k) * hw + p];
                            let y = S::from_usize(py) + S::from_f64(ky as f64 - 1.0) + dy;
                            let x = S::from_usize(px) + S::from_f64(kx as f64 - 1.0) + dx;
                            let taps = crate::tensor::bilinear_taps(y, x);
                            let y0 = y.floor();
                            let x0 = x.floor();
                            let fy = y - y0;
                            let fx = x - x0;
                            let (iy0, ix0) = (y0.as_f64() as isize, x0.as_f64() as isize);
                            for ch in 0..c {
                                let plane = &fr_d[fr_base + ch * hw..fr_base + (ch + 1) * hw];
                                let at = |ty: isize, tx: isize| -> S {
                                    if ty >= 0 && tx >= 0 && ty < h as isize && tx < w as isize {
                                        plane[ty as usize * w + tx as usize]
                                    } else {
                                        S::zero()
                                    }
                                };
                                let mut acc = S::zero();
                                for &(ty, tx, wt) in &taps {
                                    if ty >= 0 && tx >= 0 && ty < h as isize && tx < w as isize {
                                        acc += wt * plane[ty as usize * w + tx as usize];
                                    }
                                }
                                sampled[ch] = acc;
                                let one = S::one();
                                let v00 = at(iy0, ix0);
                                let v01 = at(iy0, ix0 + 1);
                                let v10 = at(iy0 + 1, ix0);
                                let v11 = at(iy0 + 1, ix0 + 1);
                                grad_y[ch] = (v10 - v00) * (one - fx) + (v11 - v01) * fx;
                                grad_x[ch] = (v01 - v00) * (one - fy) + (v11 - v10) * fy;
                            }
                            // cw[c] = Σ_o g_o · W[o,c,k]
                            for ch in 0..c {
                                cw[ch] = S::zero();
                            }
                            let mut dm = S::zero();
                            for oc in 0..o {
                                let go = g[(b * o + oc) * hw + p];
                                if go == S::zero() {
                                    continue;
                                }
                                let wrow = &w_d[(oc * c) * 9 + k..];
                                let gm = go * m;
                                for ch in 0..c {
                                    cw[ch] += go * wrow[ch * 9];
                                    d_w[(oc * c + ch) * 9 + k] += gm * sampled[ch];
                                }
                            }
                            let mut doff_y = S::zero();
                            let mut doff_x = S::zero();
                            for ch in 0..c {
                                dm += cw[ch] * sampled[ch];
                                let coef = m * cw[ch];
                                if coef != S::zero() {
                                    for &(ty, tx, wt) in &taps {
                                        if ty >= 0
                                            && tx >= 0
                                            && ty < h as isize
                                            && tx < w as isize
                                        {
                                            d_fr[fr_base
                                                + ch * hw
                                                + ty as usize * w
                                                + tx as usize] += coef * wt;
                                        }
                                    }
                                    doff_y += coef * grad_y[ch];
                                    doff_x += coef * grad_x[ch];
                                }
                            }
                            d_m[(b * 9 + k) * hw + p] += dm;
                            d_off[(b * 18 + 2 * k) * hw + p] += doff_y;
                            d_off[(b * 18 + 2 * k + 1) * hw + p] += doff_x;
                        }
                    }
                }
            }
            drop(fr_d);
            drop(off_d);
            drop(m_d);
            drop(w_d);
            parents[0].add_grad(&d_fr);
            parents[1].add_grad(&d_off);
            parents[2].add_grad(&d_m);
            parents[3].add_grad(&d_w);
            parents[4].add_grad(&d_b);
        },
    ))
}

/// Feature standardization whose affine parameters are an instance-specific
/// convex mixture of learned (scale, shift) component pairs. Training
/// standardizes with live batch statistics and maintains running averages;
/// inference standardizes with the frozen running statistics.
pub struct AttentiveNorm<S: Scalar> {
    pub mlp_in: Linear<S>,
    pub mlp_out: Linear<S>,
    pub gammas: Tensor<S>,
    pub betas: Tensor<S>,
    pub eps: S,
    pub momentum: f64,
    /// Untracked buffers, updated by EMA during training.
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    components: usize,
}

impl<S: Scalar> AttentiveNorm<S> {
    pub fn new(channels: usize, components: usize, rng: &mut Rng) -> Self {
        let k = components.max(1);
        let gam: Vec<S> = (0..k * channels)
            .map(|_| rng.uniform::<S>(0.9, 1.1))
            .collect();
        AttentiveNorm {
            mlp_in: Linear::new(channels, 16, rng),
            mlp_out: Linear::new(16, k, rng),
            gammas: Tensor::from_vec(&[k, channels], gam).unwrap().requiring_grad(),
            betas: Tensor::zeros(&[k, channels]).requiring_grad(),
            eps: S::from_f64(1e-5),
            momentum: 0.1,
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            components: k,
        }
    }

    /// Softmax mixture weights `[n,K]` over the learned components.
    pub fn mixture_weights(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let pooled = x.spatial_mean()?;
        let hidden = self.mlp_in.forward(&pooled)?.relu();
        self.mlp_out.forward(&hidden)?.softmax(1)
    }

    /// Update the running statistics from the live batch (no gradient).
    fn track_stats(&self, x: &Tensor<S>) {
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let m = S::from_usize(n * h * w);
        let d = x.data();
        let mut rm = self.running_mean.to_vec();
        let mut rv = self.running_var.to_vec();
        let mom = S::from_f64(self.momentum);
        for ch in 0..c {
            let mut mean = S::zero();
            for b in 0..n {
                let base = (b * c + ch) * h * w;
                for t in 0..h * w {
                    mean += d[base + t];
                }
            }
            mean /= m;
            let mut var = S::zero();
            for b in 0..n {
                let base = (b * c + ch) * h * w;
                for t in 0..h * w {
                    let dv = d[base + t] - mean;
                    var += dv * dv;
                }
            }
            var /= m;
            rm[ch] = (S::one() - mom) * rm[ch] + mom * mean;
            rv[ch] = (S::one() - mom) * rv[ch] + mom * var;
        }
        drop(d);
        self.running_mean.set_data(rm).expect("buffer shape fixed");
        self.running_var.set_data(rv).expect("buffer shape fixed");
    }

    pub fn forward(&self, x: &Tensor<S>, training: bool) -> Result<Tensor<S>> {
        if x.shape()[0] == 0 {
            return Ok(Tensor::zeros(x.shape()));
        }
        let std = if training {
            self.track_stats(x);
            x.standardize_batch(self.eps)?
        } else {
            // frozen statistics: a plain per-channel affine on each instance
            let c = x.shape()[1];
            let rm = self.running_mean.to_vec();
            let rv = self.running_var.to_vec();
            let inv: Vec<S> = rv.iter().map(|&v| S::one() / (v + self.eps).sqrt()).collect();
            let n = x.shape()[0];
            let mut sc = Vec::with_capacity(n * c);
            let mut sh = Vec::with_capacity(n * c);
            for _ in 0..n {
                for ch in 0..c {
                    sc.push(inv[ch]);
                    sh.push(-rm[ch] * inv[ch]);
                }
            }
            x.affine_per_instance(
                &Tensor::from_vec(&[n, c], sc)?,
                &Tensor::from_vec(&[n, c], sh)?,
            )?
        };
        let wts = self.mixture_weights(x)?;
        let scale = wts.matmul(&self.gammas)?;
        let shift = wts.matmul(&self.betas)?;
        std.affine_per_instance(&scale, &shift)
    }



    pub fn components(&self) -> usize {
        self.components
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.mlp_in.params(&format!("{prefix}.mlp_in"), out);
        self.mlp_out.params(&format!("{prefix}.mlp_out"), out);
        out.push((format!("{prefix}.gammas"), self.gammas.clone()));
        out.push((format!("{prefix}.betas"), self.betas.clone()));
        // buffers ride along in snapshots; the optimizer skips them since
        // they never accumulate gradients
        out.push((format!("{prefix}.running_mean"), self.running_mean.clone()));
        out.push((format!("{prefix}.running_var"), self.running_var.clone()));
    }
}

/// One output branch: deformable conv, attentive norm, LeakyReLU, 1×1 conv.
pub struct HeadBranch<S: Scalar> {
    pub deform_w: Tensor<S>,
    pub deform_b: Tensor<S>,
    pub norm: AttentiveNorm<S>,
    pub out_w: Tensor<S>,
    pub out_b: Tensor<S>,
}

impl<S: Scalar> HeadBranch<S> {
    fn new(channels: usize, out_channels: usize, out_bias: f64, rng: &mut Rng) -> Self {
        HeadBranch {
            deform_w: conv_init(&[channels, channels, 3, 3], channels * 9, rng),
            deform_b: Tensor::zeros(&[channels]).requiring_grad(),
            norm: AttentiveNorm::new(channels, AN_COMPONENTS, rng),
            out_w: conv_init(&[out_channels, channels, 1, 1], channels, rng),
            out_b: Tensor::full(&[out_channels], S::from_f64(out_bias)).requiring_grad(),
        }
    }

    fn forward(
        &self,
        fr: &Tensor<S>,
        offsets: &Tensor<S>,
        masks: &Tensor<S>,
        training: bool,
    ) -> Result<Tensor<S>> {
        let fde = modulated_deform_conv(fr, offsets, masks, &self.deform_w, &self.deform_b)?;
        let fnorm = self.norm.forward(&fde, training)?;
        fnorm
            .leaky_relu(S::from_f64(0.01))
            .conv2d(&self.out_w, Some(&self.out_b), (1, 1), (0, 0))
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.dw"), self.deform_w.clone()));
        out.push((format!("{prefix}.db"), self.deform_b.clone()));
        self.norm.params(&format!("{prefix}.an"), out);
        out.push((format!("{prefix}.ow"), self.out_w.clone()));
        out.push((format!("{prefix}.ob"), self.out_b.clone()));
    }
}

/// The six head outputs for one RoI batch.
pub struct Head3dOutput<S: Scalar> {
    /// 3D box sizes (h, w, l) in meters, `[n,3]`.
    pub s3d: Tensor<S>,
    /// Projected-center offset in stride-4 pixels, `[n,2]`.
    pub o3d: Tensor<S>,
    /// 12 orientation-bin logits followed by 12 residuals, `[n,24]`.
    pub theta: Tensor<S>,
    /// Decoded per-cell depth in meters (strictly positive), `[n,7,7]`.
    pub depth: Tensor<S>,
    /// Per-cell depth log-σ, `[n,7,7]`.
    pub depth_unc: Tensor<S>,
    /// Per-cell depth attention logits, `[n,7,7]`.
    pub depth_map: Tensor<S>,
}

impl<S: Scalar> Head3dOutput<S> {
    fn attention_weights(&self) -> Result<Tensor<S>> {
        let n = self.depth_map.shape()[0];
        let dd = ROI_SIZE * ROI_SIZE;
        self.depth_map.reshape(&[n, dd])?.softmax(1)
    }

    /// Softmax(DM)-weighted mean of the per-cell depths, `[n]`.
    pub fn aggregated_depth(&self) -> Result<Tensor<S>> {
        let n = self.depth.shape()[0];
        let dd = ROI_SIZE * ROI_SIZE;
        self.attention_weights()?
            .mul(&self.depth.reshape(&[n, dd])?)?
            .sum_axis(1)
    }

    /// Softmax(DM)-weighted mean of the per-cell log-σ, `[n]`.
    pub fn aggregated_log_sigma(&self) -> Result<Tensor<S>> {
        let n = self.depth_unc.shape()[0];
        let dd = ROI_SIZE * ROI_SIZE;
        self.attention_weights()?
            .mul(&self.depth_unc.reshape(&[n, dd])?)?
            .sum_axis(1)
    }
}

/// The full head with its learned state.
pub struct Asrh<S: Scalar> {
    pub channels: usize,
    /// Image extents used to normalize raw 2D sizes before encoding.
    pub norm_extents: (f64, f64),
    pub scale_in: Linear<S>,
    pub scale_out: Linear<S>,
    pub refine_w1: Tensor<S>,
    pub refine_b1: Tensor<S>,
    pub refine_w2: Tensor<S>,
    pub refine_b2: Tensor<S>,
    pub off_w1: Tensor<S>,
    pub off_b1: Tensor<S>,
    pub off_w2: Tensor<S>,
    pub off_b2: Tensor<S>,
    pub y_proj_w: Tensor<S>,
    pub y_proj_b: Tensor<S>,
    pub m_proj_w: Tensor<S>,
    pub m_proj_b: Tensor<S>,
    pub branches: [HeadBranch<S>; 6],
}

/// Branch order in [`Asrh::branches`] with output width and bias prior.
/// The depth logit bias starts at the decode of a mid-range (20 m) depth so
/// training refines rather than climbs from the ~1 m decode of a zero logit.
pub const BRANCH_CHANNELS: [(&str, usize, f64); 6] = [
    ("s3d", 3, 0.0),
    ("o3d", 2, 0.0),
    ("theta", 24, 0.0),
    ("depth", 1, -3.0),
    ("depth_unc", 1, 0.0),
    ("depth_map", 1, 0.0),
];

impl<S: Scalar> Asrh<S> {
    pub fn new(channels: usize, norm_extents: (f64, f64), rng: &mut Rng) -> Self {
        let c = channels;
        Asrh {
            channels: c,
            norm_extents,
            scale_in: Linear::new(2, 64, rng),
            scale_out: Linear::new(64, SCALE_FEAT, rng),
            refine_w1: conv_init(&[c, c, 3, 3], c * 9, rng),
            refine_b1: Tensor::zeros(&[c]).requiring_grad(),
            refine_w2: conv_init(&[c, c, 3, 3], c * 9, rng),
            refine_b2: Tensor::zeros(&[c]).requiring_grad(),
            off_w1: conv_init(&[c, c + SCALE_FEAT, 3, 3], (c + SCALE_FEAT) * 9, rng),
            off_b1: Tensor::zeros(&[c]).requiring_grad(),
            // zero-init so training starts from plain convolution
            off_w2: Tensor::zeros(&[18, c, 1, 1]).requiring_grad(),
            off_b2: Tensor::zeros(&[18]).requiring_grad(),
            y_proj_w: conv_init(&[c, c, 1, 1], c, rng),
            y_proj_b: Tensor::zeros(&[c]).requiring_grad(),
            m_proj_w: conv_init(&[9, c, 1, 1], c, rng),
            m_proj_b: Tensor::zeros(&[9]).requiring_grad(),
            branches: [
                HeadBranch::new(c, BRANCH_CHANNELS[0].1, BRANCH_CHANNELS[0].2, rng),
                HeadBranch::new(c, BRANCH_CHANNELS[1].1, BRANCH_CHANNELS[1].2, rng),
                HeadBranch::new(c, BRANCH_CHANNELS[2].1, BRANCH_CHANNELS[2].2, rng),
                HeadBranch::new(c, BRANCH_CHANNELS[3].1, BRANCH_CHANNELS[3].2, rng),
                HeadBranch::new(c, BRANCH_CHANNELS[4].1, BRANCH_CHANNELS[4].2, rng),
                HeadBranch::new(c, BRANCH_CHANNELS[5].1, BRANCH_CHANNELS[5].2, rng),
            ],
        }
    }

    /// Map raw 2D sizes `[n,2]` (pixels) to the tiled scale feature
    /// `[n,32,7,7]`. Sizes must be strictly positive.
    pub fn scale_encoder(&self, sizes: &Tensor<S>) -> Result<Tensor<S>> {
        if sizes.rank() != 2 || sizes.shape()[1] != 2 {
            return Err(Error::dim(format!(
                "scale encoder expects [n,2] sizes, got {:?}",
                sizes.shape()
            )));
        }
        if sizes.data().iter().any(|v| *v <= S::zero()) {
            return Err(Error::contract("scale encoder requires positive 2D sizes"));
        }
        let n = sizes.shape()[0];
        let (nw, nh) = self.norm_extents;
        // dimensionless sizes; the rescale is part of the graph
        let scale = Tensor::from_vec(
            &[n, 2],
            vec![S::from_f64(1.0 / nw), S::from_f64(1.0 / nh)].repeat(n),
        )?;
        let normalized = sizes.mul(&scale)?;
        let encoded = self
            .scale_out
            .forward(&self.scale_in.forward(&normalized)?.mish())?;
        encoded.tile_spatial(ROI_SIZE, ROI_SIZE)
    }

    /// Two 3×3 convolutions with a ReLU in between, channel-preserving.
    pub fn refine_semantic(&self, features: &Tensor<S>) -> Result<Tensor<S>> {
        features
            .conv2d(&self.refine_w1, Some(&self.refine_b1), (1, 1), (1, 1))?
            .relu()
            .conv2d(&self.refine_w2, Some(&self.refine_b2), (1, 1), (1, 1))
    }

    /// Concatenate scale and semantic features, then 3×3 conv, ReLU, 1×1 conv
    /// down to the 18 per-tap offset channels.
    pub fn scale_aware_offsets(&self, go: &Tensor<S>, fr: &Tensor<S>) -> Result<Tensor<S>> {
        let cat = Tensor::concat(&[go, fr], 1)?;
        cat.conv2d(&self.off_w1, Some(&self.off_b1), (1, 1), (1, 1))?
            .relu()
            .conv2d(&self.off_w2, Some(&self.off_b2), (1, 1), (0, 0))
    }

    /// Variance attention: the SimAM-style argument, a 1×1 projection with
    /// sigmoid into per-channel weights Y, and the 9-channel tap mask M.
    pub fn variance_attention(&self, fr: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let arg = simam_argument(fr, S::from_f64(SIMAM_LAMBDA))?;
        let y = arg
            .conv2d(&self.y_proj_w, Some(&self.y_proj_b), (1, 1), (0, 0))?
            .sigmoid();
        let m = fr
            .mul(&y)?
            .conv2d(&self.m_proj_w, Some(&self.m_proj_b), (1, 1), (0, 0))?
            .sigmoid();
        Ok((y, m))
    }

    pub fn forward(&self, roi: &RoiBatch<S>) -> Result<Head3dOutput<S>> {
        self.forward_mode(roi, false)
    }

    pub fn forward_mode(&self, roi: &RoiBatch<S>, training: bool) -> Result<Head3dOutput<S>> {
        let n = roi.len();
        let d = ROI_SIZE;
        if n == 0 {
            return Ok(Head3dOutput {
                s3d: Tensor::zeros(&[0, 3]),
                o3d: Tensor::zeros(&[0, 2]),
                theta: Tensor::zeros(&[0, 24]),
                depth: Tensor::zeros(&[0, d, d]),
                depth_unc: Tensor::zeros(&[0, d, d]),
                depth_map: Tensor::zeros(&[0, d, d]),
            });
        }
        let go = self.scale_encoder(&roi.sizes)?;
        let fr = self.refine_semantic(&roi.features)?;
        let offsets = self.scale_aware_offsets(&go, &fr)?;
        let (_, masks) = self.variance_attention(&fr)?;

        let mut maps = Vec::with_capacity(6);
        for branch in &self.branches {
            maps.push(branch.forward(&fr, &offsets, &masks, training)?);
        }
        // vector heads read the RoI center cell: unlike a grid average it
        // does not dilute when the predicted box is looser than the GT crop
        let mid = d / 2;
        let pool = |t: &Tensor<S>| -> Result<Tensor<S>> {
            let ch = t.shape()[1];
            t.narrow(2, mid, 1)?.narrow(3, mid, 1)?.reshape(&[n, ch])
        };
        let squeeze = |t: &Tensor<S>| t.reshape(&[n, d, d]);

        // depth = 1/σ(x) − 1 > 0 for any finite logit; the clamp keeps the
        // f32 path away from rounding σ(x) to exactly 1
        let depth_logits = squeeze(&maps[3])?.clamp(S::from_f64(-14.0), S::from_f64(14.0));
        let depth = depth_logits.sigmoid().recip().add_scalar(-S::one());

        Ok(Head3dOutput {
            s3d: pool(&maps[0])?,
            o3d: pool(&maps[1])?,
            theta: pool(&maps[2])?,
            depth,
            depth_unc: squeeze(&maps[4])?,
            depth_map: squeeze(&maps[5])?,
        })
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.scale_in.params(&format!("{prefix}.scale_in"), out);
        self.scale_out.params(&format!("{prefix}.scale_out"), out);
        for (name, t) in [
            ("refine_w1", &self.refine_w1),
            ("refine_b1", &self.refine_b1),
            ("refine_w2", &self.refine_w2),
            ("refine_b2", &self.refine_b2),
            ("off_w1", &self.off_w1),
            ("off_b1", &self.off_b1),
            ("off_w2", &self.off_w2),
            ("off_b2", &self.off_b2),
            ("y_proj_w", &self.y_proj_w),
            ("y_proj_b", &self.y_proj_b),
            ("m_proj_w", &self.m_proj_w),
            ("m_proj_b", &self.m_proj_b),
        ] {
            out.push((format!("{prefix}.{name}"), t.clone()));
        }
        for (i, b) in self.branches.iter().enumerate() {
            b.params(&format!("{prefix}.head{}_{}", i, BRANCH_CHANNELS[i].0), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn roi_align_constant_map_gives_constant_rois() {
        let f = Tensor::<f64>::full(&[2, 10, 12], 3.25);
        let boxes = [
            RoiRect { x0: 1.0, y0: 2.0, x1: 9.5, y1: 8.0 },
            RoiRect { x0: 0.0, y0: 0.0, x1: 12.0, y1: 10.0 },
        ];
        let (out, degenerate) = roi_align(&f, &boxes).unwrap();
        assert_eq!(out.shape(), &[2, 2, 7, 7]);
        assert!(degenerate.iter().all(|d| !d));
        for &v in out.data().iter() {
            assert_relative_eq!(v, 3.25, epsilon = 1e-9);
        }
    }

    #[test]
    fn roi_align_empty_batch() {
        let f = Tensor::<f64>::zeros(&[3, 8, 8]);
        let (out, degenerate) = roi_align(&f, &[]).unwrap();
        assert_eq!(out.shape(), &[0, 3, 7, 7]);
        assert!(degenerate.is_empty());
    }

    #[test]
    fn roi_align_degenerate_box_zeroes_and_flags() {
        let f = Tensor::<f64>::ones(&[1, 8, 8]);
        let boxes = [RoiRect { x0: -5.0, y0: -5.0, x1: -1.0, y1: -1.0 }];
        let (out, degenerate) = roi_align(&f, &boxes).unwrap();
        assert!(degenerate[0]);
        assert!(out.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn roi_align_full_map_matches_dense_bilinear_oracle() {
        // 7×7 map, box covering it exactly: compare against an independent
        // scalar evaluation of the same 2×2-per-bin bilinear sampling.
        let mut rng = Rng::seed_from(41);
        let f = Tensor::<f64>::rand_uniform(&[1, 7, 7], -1.0, 1.0, &mut rng);
        let boxes = [RoiRect { x0: 0.0, y0: 0.0, x1: 7.0, y1: 7.0 }];
        let (out, _) = roi_align(&f, &boxes).unwrap();
        let d = f.data();
        let bil = |y: f64, x: f64| -> f64 {
            let y = y.max(0.0).min(6.0);
            let x = x.max(0.0).min(6.0);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(6), (x0 + 1).min(6));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            d[y0 * 7 + x0] * (1.0 - fy) * (1.0 - fx)
                + d[y0 * 7 + x1] * (1.0 - fy) * fx
                + d[y1 * 7 + x0] * fy * (1.0 - fx)
                + d[y1 * 7 + x1] * fy * fx
        };
        for i in 0..7 {
            for j in 0..7 {
                let mut want = 0.0;
                for sy in 0..2 {
                    for sx in 0..2 {
                        want += bil(
                            i as f64 + (sy as f64 + 0.5) / 2.0,
                            j as f64 + (sx as f64 + 0.5) / 2.0,
                        );
                    }
                }
                want /= 4.0;
                assert_relative_eq!(out.data()[i * 7 + j], want, epsilon = 1e-9);
            }
        }
    }

    fn tiny_asrh(c: usize, seed: u64) -> (Asrh<f64>, Rng) {
        let mut rng = Rng::seed_from(seed);
        let asrh = Asrh::<f64>::new(c, (64.0, 64.0), &mut rng);
        (asrh, rng)
    }

    #[test]
    fn scale_encoder_tiles_and_is_deterministic() {
        let (asrh, _) = tiny_asrh(4, 1);
        let sizes = Tensor::<f64>::from_vec(&[2, 2], vec![10.0, 20.0, 10.0, 20.0]).unwrap();
        let go = asrh.scale_encoder(&sizes).unwrap();
        assert_eq!(go.shape(), &[2, SCALE_FEAT, 7, 7]);
        let d = go.data();
        let hw = 49;
        // identical inputs give identical slices; each slice is constant
        for f in 0..SCALE_FEAT {
            let a = d[f * hw];
            for t in 0..hw {
                assert_relative_eq!(d[f * hw + t], a, epsilon = 1e-12);
                assert_relative_eq!(d[(SCALE_FEAT + f) * hw + t], a, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn scale_encoder_rejects_nonpositive_sizes() {
        let (asrh, _) = tiny_asrh(4, 2);
        let sizes = Tensor::<f64>::from_vec(&[1, 2], vec![10.0, 0.0]).unwrap();
        assert!(asrh.scale_encoder(&sizes).is_err());
    }

    #[test]
    fn scale_encoder_gradient_reaches_sizes() {
        let (asrh, _) = tiny_asrh(4, 3);
        let sizes = Tensor::<f64>::param_from_vec(&[2, 2], vec![10.0, 20.0, 30.0, 5.0]).unwrap();
        asrh.scale_encoder(&sizes).unwrap().sum().backward().unwrap();
        let g = sizes.grad().unwrap();
        assert!(g.iter().any(|v| v.abs() > 1e-8));
    }

    #[test]
    fn refine_zero_input_zero_bias_is_zero_and_shape_preserved() {
        let (asrh, _) = tiny_asrh(4, 4);
        let x = Tensor::<f64>::zeros(&[2, 4, 7, 7]);
        let y = asrh.refine_semantic(&x).unwrap();
        assert_eq!(y.shape(), &[2, 4, 7, 7]);
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn offsets_are_zero_at_initialization_with_18_channels() {
        let (asrh, mut rng) = tiny_asrh(4, 5);
        let go = Tensor::<f64>::rand_uniform(&[2, SCALE_FEAT, 7, 7], -1.0, 1.0, &mut rng);
        let fr = Tensor::<f64>::rand_uniform(&[2, 4, 7, 7], -1.0, 1.0, &mut rng);
        let off = asrh.scale_aware_offsets(&go, &fr).unwrap();
        assert_eq!(off.shape(), &[2, 18, 7, 7]);
        assert!(off.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn simam_constant_input_gives_uniform_half_argument() {
        let fr = Tensor::<f64>::full(&[2, 3, 7, 7], 4.2);
        let arg = simam_argument(&fr, 1e-4).unwrap();
        for &v in arg.data().iter() {
            assert_relative_eq!(v, 0.5, epsilon = 1e-9);
        }
    }

    #[test]
    fn simam_is_invariant_to_constant_shift() {
        let mut rng = Rng::seed_from(6);
        let fr = Tensor::<f64>::rand_uniform(&[1, 2, 7, 7], -1.0, 1.0, &mut rng);
        let shifted = fr.add_scalar(3.7);
        let a = simam_argument(&fr, 1e-4).unwrap().to_vec();
        let b = simam_argument(&shifted, 1e-4).unwrap().to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn simam_hot_pixel_dominates() {
        let mut data = vec![0.0f64; 49];
        data[17] = 5.0;
        let fr = Tensor::<f64>::from_vec(&[1, 1, 7, 7], data).unwrap();
        let arg = simam_argument(&fr, 1e-4).unwrap();
        let d = arg.data();
        let hot = d[17];
        for (i, &v) in d.iter().enumerate() {
            if i != 17 {
                assert!(hot > v, "hot pixel must carry the largest argument");
            }
        }
    }

    #[test]
    fn variance_attention_mask_in_unit_interval() {
        let (asrh, mut rng) = tiny_asrh(4, 7);
        let fr = Tensor::<f64>::rand_uniform(&[2, 4, 7, 7], -2.0, 2.0, &mut rng);
        let (y, m) = asrh.variance_attention(&fr).unwrap();
        assert_eq!(y.shape(), &[2, 4, 7, 7]);
        assert_eq!(m.shape(), &[2, 9, 7, 7]);
        assert!(m.to_vec().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn deform_conv_with_zero_offsets_unit_masks_is_dense_conv() {
        let mut rng = Rng::seed_from(8);
        let (n, c, o) = (2, 3, 4);
        let fr = Tensor::<f64>::rand_uniform(&[n, c, 7, 7], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::rand_uniform(&[o, c, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform(&[o], -0.5, 0.5, &mut rng);
        let offsets = Tensor::<f64>::zeros(&[n, 18, 7, 7]);
        let masks = Tensor::<f64>::ones(&[n, 9, 7, 7]);
        let got = modulated_deform_conv(&fr, &offsets, &masks, &w, &b).unwrap();
        let want = fr.conv2d(&w, Some(&b), (1, 1), (1, 1)).unwrap();
        let max = got
            .to_vec()
            .iter()
            .zip(want.to_vec())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max <= 1e-6, "degenerate deform conv deviates by {max}");
    }

    #[test]
    fn deform_conv_integer_shift_matches_shifted_dense_conv() {
        // all taps shifted by (0,1): equals a dense conv of the input shifted
        // one column left. The first input column is zeroed so the value that
        // shifts into the dense conv's padding region is zero on both paths.
        let mut rng = Rng::seed_from(9);
        let (n, c, o) = (1, 2, 2);
        let mut fr_data = Rng::seed_from(90).uniform_vec::<f64>(n * c * 49, -1.0, 1.0);
        for ch in 0..c {
            for y in 0..7 {
                fr_data[(ch * 7 + y) * 7] = 0.0;
            }
        }
        let fr = Tensor::<f64>::from_vec(&[n, c, 7, 7], fr_data).unwrap();
        let w = Tensor::<f64>::rand_uniform(&[o, c, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::zeros(&[o]);
        let mut off = vec![0.0f64; n * 18 * 49];
        for k in 0..9 {
            for p in 0..49 {
                off[(2 * k + 1) * 49 + p] = 1.0; // dx = 1
            }
        }
        let offsets = Tensor::<f64>::from_vec(&[n, 18, 7, 7], off).unwrap();
        let masks = Tensor::<f64>::ones(&[n, 9, 7, 7]);
        let got = modulated_deform_conv(&fr, &offsets, &masks, &w, &b).unwrap();

        let src = fr.to_vec();
        let mut shifted = vec![0.0f64; src.len()];
        for ch in 0..c {
            for y in 0..7 {
                for x in 0..6 {
                    shifted[(ch * 7 + y) * 7 + x] = src[(ch * 7 + y) * 7 + x + 1];
                }
            }
        }
        let shifted = Tensor::<f64>::from_vec(&[n, c, 7, 7], shifted).unwrap();
        let want = shifted.conv2d(&w, Some(&b), (1, 1), (1, 1)).unwrap();
        let max = got
            .to_vec()
            .iter()
            .zip(want.to_vec())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max <= 1e-5, "shifted deform conv deviates by {max}");
    }

    #[test]
    fn deform_conv_zero_mask_outputs_bias() {
        let mut rng = Rng::seed_from(10);
        let fr = Tensor::<f64>::rand_uniform(&[1, 2, 7, 7], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::rand_uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let offsets = Tensor::<f64>::zeros(&[1, 18, 7, 7]);
        let masks = Tensor::<f64>::zeros(&[1, 9, 7, 7]);
        let out = modulated_deform_conv(&fr, &offsets, &masks, &w, &b).unwrap();
        let d = out.data();
        for oc in 0..3 {
            for p in 0..49 {
                assert_relative_eq!(d[oc * 49 + p], b.data()[oc], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn attentive_norm_k1_is_plain_affine_normalization() {
        let mut rng = Rng::seed_from(11);
        let an = AttentiveNorm::<f64>::new(3, 1, &mut rng);
        let x = Tensor::<f64>::rand_uniform(&[4, 3, 7, 7], -2.0, 2.0, &mut rng);
        let got = an.forward(&x, true).unwrap();
        let std = x.standardize_batch(an.eps).unwrap();
        // K=1: softmax weight is exactly 1, so scale/shift are the single pair
        let scale = an.gammas.to_vec();
        let shift = an.betas.to_vec();
        let sd = std.to_vec();
        for b in 0..4 {
            for ch in 0..3 {
                for t in 0..49 {
                    let idx = (b * 3 + ch) * 49 + t;
                    let want = sd[idx] * scale[ch] + shift[ch];
                    assert_relative_eq!(got.to_vec()[idx], want, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn attentive_norm_mixture_weights_sum_to_one() {
        let mut rng = Rng::seed_from(12);
        let an = AttentiveNorm::<f64>::new(4, AN_COMPONENTS, &mut rng);
        let x = Tensor::<f64>::rand_uniform(&[3, 4, 7, 7], -1.0, 1.0, &mut rng);
        let w = an.mixture_weights(&x).unwrap();
        let d = w.data();
        for i in 0..3 {
            let s: f64 = d[i * AN_COMPONENTS..(i + 1) * AN_COMPONENTS].iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn attentive_norm_identical_instances_get_identical_affine() {
        let mut rng = Rng::seed_from(13);
        let an = AttentiveNorm::<f64>::new(3, AN_COMPONENTS, &mut rng);
        let one = Tensor::<f64>::rand_uniform(&[1, 3, 7, 7], -1.0, 1.0, &mut rng).to_vec();
        let mut two = one.clone();
        two.extend_from_slice(&one);
        let x = Tensor::<f64>::from_vec(&[2, 3, 7, 7], two).unwrap();
        let w = an.mixture_weights(&x).unwrap().to_vec();
        for k in 0..AN_COMPONENTS {
            assert_relative_eq!(w[k], w[AN_COMPONENTS + k], epsilon = 1e-12);
        }
    }

    #[test]
    fn head_forward_shapes_and_depth_properties() {
        let (asrh, mut rng) = tiny_asrh(4, 14);
        let f = Tensor::<f64>::rand_uniform(&[4, 16, 16], -1.0, 1.0, &mut rng);
        let boxes = [
            RoiRect { x0: 1.0, y0: 1.0, x1: 9.0, y1: 7.0 },
            RoiRect { x0: 4.0, y0: 2.0, x1: 14.0, y1: 15.0 },
            RoiRect { x0: 0.0, y0: 0.0, x1: 16.0, y1: 16.0 },
        ];
        let roi = RoiBatch::from_feature_map(&f, &boxes, 4).unwrap();
        let out = asrh.forward(&roi).unwrap();
        assert_eq!(out.s3d.shape(), &[3, 3]);
        assert_eq!(out.o3d.shape(), &[3, 2]);
        assert_eq!(out.theta.shape(), &[3, 24]);
        assert_eq!(out.depth.shape(), &[3, 7, 7]);
        assert_eq!(out.depth_unc.shape(), &[3, 7, 7]);
        assert_eq!(out.depth_map.shape(), &[3, 7, 7]);
        assert!(out.depth.to_vec().iter().all(|&v| v > 0.0));

        // aggregated depth is a convex combination of per-cell depths
        let agg = out.aggregated_depth().unwrap().to_vec();
        let depth = out.depth.to_vec();
        for (i, &a) in agg.iter().enumerate() {
            let cells = &depth[i * 49..(i + 1) * 49];
            let lo = cells.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = cells.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(a >= lo - 1e-9 && a <= hi + 1e-9);
        }
    }

    #[test]
    fn head_forward_empty_batch() {
        let (asrh, _) = tiny_asrh(4, 15);
        let f = Tensor::<f64>::zeros(&[4, 8, 8]);
        let roi = RoiBatch::from_feature_map(&f, &[], 4).unwrap();
        let out = asrh.forward(&roi).unwrap();
        assert_eq!(out.s3d.shape(), &[0, 3]);
        assert_eq!(out.depth.shape(), &[0, 7, 7]);
    }

    #[test]
    fn offset_sensitivity_to_sizes_with_generic_weights() {
        // with a non-zero final offset conv, perturbing SR must change ΔS
        let (mut asrh, mut rng) = tiny_asrh(4, 16);
        asrh.off_w2 = Tensor::rand_uniform(&[18, 4, 1, 1], -0.5, 0.5, &mut rng).requiring_grad();
        let f = Tensor::<f64>::rand_uniform(&[4, 16, 16], -1.0, 1.0, &mut rng);
        let boxes = [RoiRect { x0: 2.0, y0: 2.0, x1: 10.0, y1: 12.0 }];
        let roi = RoiBatch::from_feature_map(&f, &boxes, 4).unwrap();

        let eval = |sizes: &Tensor<f64>| -> Vec<f64> {
            let go = asrh.scale_encoder(sizes).unwrap();
            let fr = asrh.refine_semantic(&roi.features).unwrap();
            asrh.scale_aware_offsets(&go, &fr).unwrap().to_vec()
        };
        let base = eval(&roi.sizes);
        let mut bumped = roi.sizes.to_vec();
        bumped[0] += 1.0;
        let other = eval(&Tensor::from_vec(&[1, 2], bumped).unwrap());
        let max_delta = base
            .iter()
            .zip(&other)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_delta > 1e-8, "offsets insensitive to 2D scale");
    }
}
