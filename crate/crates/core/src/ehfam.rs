//! Efficient hybrid feature aggregator: multi-head self-attention on the
//! deepest pyramid level, then a convolutional upsample/fusion chain that
//! produces the stride-4 feature map consumed by every detection head.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FPN_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone)]
pub struct EhfamConfig {
    pub channels: usize,
    pub heads: usize,
    pub value_dim: usize,
}

impl Default for EhfamConfig {
    fn default() -> Self {
        EhfamConfig {
            channels: 64,
            heads: 8,
            value_dim: 128,
        }
    }
}

impl EhfamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.value_dim == 0 || self.channels == 0 {
            return Err(Error::config(
                "ehfam: channels, heads and value_dim must all be >= 1",
            ));
        }
        if self.channels % 2 != 0 {
            return Err(Error::config("ehfam: channels must be even"));
        }
        Ok(())
    }
}

/// The four backbone scales at strides 4/8/16/32, each with C channels.
pub struct FeaturePyramid<S: Scalar> {
    pub s1: Tensor<S>,
    pub s2: Tensor<S>,
    pub s3: Tensor<S>,
    pub s4: Tensor<S>,
}

impl<S: Scalar> FeaturePyramid<S> {
    pub fn validate(&self) -> Result<()> {
        let levels = [&self.s1, &self.s2, &self.s3, &self.s4];
        let c = self.s1.shape()[0];
        for pair in levels.windows(2) {
            let (a, b) = (pair[0].shape(), pair[1].shape());
            if a.len() != 3 || b.len() != 3 {
                return Err(Error::dim("pyramid levels must be [c,h,w]"));
            }
            if b[0] != c {
                return Err(Error::dim("pyramid levels must share channel count"));
            }
            if a[1] != b[1] * 2 || a[2] != b[2] * 2 {
                return Err(Error::dim(format!(
                    "pyramid extents must halve per level: {:?} then {:?}",
                    a, b
                )));
            }
        }
        Ok(())
    }
}

/// Fixed 2-D sinusoidal embedding, `[h·w, channels]`. The first half of the
/// channels encodes the row index, the second half the column index.
pub fn positional_embedding<S: Scalar>(
    height: usize,
    width: usize,
    channels: usize,
) -> Result<Tensor<S>> {
    if channels % 2 != 0 {
        return Err(Error::config(format!(
            "positional embedding needs an even channel count, got {channels}"
        )));
    }
    let half = channels / 2;
    let t = height * width;
    let mut data = vec![S::zero(); t * channels];
    let wave = |pos: usize, i: usize, dim: usize| -> f64 {
        let exponent = 2.0 * (i / 2) as f64 / dim as f64;
        let angle = pos as f64 / 10_000f64.powf(exponent);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    };
    for y in 0..height {
        for x in 0..width {
            let row = (y * width + x) * channels;
            for i in 0..half {
                data[row + i] = S::from_f64(wave(y, i, half));
                data[row + half + i] = S::from_f64(wave(x, i, half));
            }
        }
    }
    Tensor::from_vec(&[t, channels], data)
}

pub(crate) fn conv_init<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng).requiring_grad()
}

/// Dense layer `y = x·W + b` with `W: [in, out]`.
pub struct Linear<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(dim_in: usize, dim_out: usize, rng: &mut Rng) -> Self {
        Linear {
            weight: conv_init(&[dim_in, dim_out], dim_in, rng),
            bias: Tensor::zeros(&[dim_out]).requiring_grad(),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.matmul(&self.weight)?.add_row_bias(&self.bias)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.w"), self.weight.clone()));
        out.push((format!("{prefix}.b"), self.bias.clone()));
    }
}

/// One post-norm transformer encoder layer over a `[T, C]` sequence.
pub struct Encoder<S: Scalar> {
    pub wq: Vec<Tensor<S>>,
    pub wk: Vec<Tensor<S>>,
    pub wv: Vec<Tensor<S>>,
    pub wo: Tensor<S>,
    pub ln1_gamma: Tensor<S>,
    pub ln1_beta: Tensor<S>,
    pub ln2_gamma: Tensor<S>,
    pub ln2_beta: Tensor<S>,
    pub ffn_in: Linear<S>,
    pub ffn_out: Linear<S>,
    heads: usize,
    value_dim: usize,
}

impl<S: Scalar> Encoder<S> {
    pub fn new(cfg: &EhfamConfig, rng: &mut Rng) -> Self {
        let c = cfg.channels;
        let dv = cfg.value_dim;
        let proj = |rng: &mut Rng| conv_init(&[c, dv], c, rng);
        Encoder {
            wq: (0..cfg.heads).map(|_| proj(rng)).collect(),
            wk: (0..cfg.heads).map(|_| proj(rng)).collect(),
            wv: (0..cfg.heads).map(|_| proj(rng)).collect(),
            wo: conv_init(&[cfg.heads * dv, c], cfg.heads * dv, rng),
            ln1_gamma: Tensor::ones(&[c]).requiring_grad(),
            ln1_beta: Tensor::zeros(&[c]).requiring_grad(),
            ln2_gamma: Tensor::ones(&[c]).requiring_grad(),
            ln2_beta: Tensor::zeros(&[c]).requiring_grad(),
            ffn_in: Linear::new(c, 4 * c, rng),
            ffn_out: Linear::new(4 * c, c, rng),
            heads: cfg.heads,
            value_dim: cfg.value_dim,
        }
    }

    /// Scaled dot-product attention over all heads, concatenated and
    /// projected; no residual or normalization. Queries and keys see the
    /// positional embedding, values do not.
    pub fn attention_core(&self, x_seq: &Tensor<S>, pe: Option<&Tensor<S>>) -> Result<Tensor<S>> {
        let xq = match pe {
            Some(p) => x_seq.add(p)?,
            None => x_seq.clone(),
        };
        let inv_sqrt_dv = S::from_f64(1.0 / (self.value_dim as f64).sqrt());
        let mut heads = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let q = xq.matmul(&self.wq[i])?;
            let k = xq.matmul(&self.wk[i])?;
            let v = x_seq.matmul(&self.wv[i])?;
            let scores = q.matmul(&k.transpose()?)?.mul_scalar(inv_sqrt_dv);
            let attn = scores.softmax(1)?;
            heads.push(attn.matmul(&v)?);
        }
        let refs: Vec<&Tensor<S>> = heads.iter().collect();
        Tensor::concat(&refs, 1)?.matmul(&self.wo)
    }

    /// Per-head attention matrices (forward only), for audits.
    pub fn attention_maps(
        &self,
        x_seq: &Tensor<S>,
        pe: Option<&Tensor<S>>,
    ) -> Result<Vec<Tensor<S>>> {
        let xq = match pe {
            Some(p) => x_seq.add(p)?.detach(),
            None => x_seq.detach(),
        };
        let inv_sqrt_dv = S::from_f64(1.0 / (self.value_dim as f64).sqrt());
        (0..self.heads)
            .map(|i| {
                let q = xq.matmul(&self.wq[i].detach())?;
                let k = xq.matmul(&self.wk[i].detach())?;
                q.matmul(&k.transpose()?)?
                    .mul_scalar(inv_sqrt_dv)
                    .softmax(1)
            })
            .collect()
    }

    /// Full layer: attention, residual, norm, FFN, residual, norm.
    pub fn forward(&self, x_seq: &Tensor<S>, pe: Option<&Tensor<S>>) -> Result<Tensor<S>> {
        let eps = S::from_f64(1e-5);
        let z = self.attention_core(x_seq, pe)?;
        let y1 = x_seq
            .add(&z)?
            .layer_norm(&self.ln1_gamma, &self.ln1_beta, eps)?;
        let f = self.ffn_out.forward(&self.ffn_in.forward(&y1)?.mish())?;
        y1.add(&f)?.layer_norm(&self.ln2_gamma, &self.ln2_beta, eps)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        for (i, t) in self.wq.iter().enumerate() {
            out.push((format!("{prefix}.wq{i}"), t.clone()));
        }
        for (i, t) in self.wk.iter().enumerate() {
            out.push((format!("{prefix}.wk{i}"), t.clone()));
        }
        for (i, t) in self.wv.iter().enumerate() {
            out.push((format!("{prefix}.wv{i}"), t.clone()));
        }
        out.push((format!("{prefix}.wo"), self.wo.clone()));
        out.push((format!("{prefix}.ln1_g"), self.ln1_gamma.clone()));
        out.push((format!("{prefix}.ln1_b"), self.ln1_beta.clone()));
        out.push((format!("{prefix}.ln2_g"), self.ln2_gamma.clone()));
        out.push((format!("{prefix}.ln2_b"), self.ln2_beta.clone()));
        self.ffn_in.params(&format!("{prefix}.ffn_in"), out);
        self.ffn_out.params(&format!("{prefix}.ffn_out"), out);
    }
}

/// Self-attention over a `[C,h,w]` map: flatten to a sequence, run the
/// encoder with the sinusoidal embedding, reshape back.
pub fn multi_head_self_attention<S: Scalar>(
    s4: &Tensor<S>,
    encoder: &Encoder<S>,
) -> Result<Tensor<S>> {
    if s4.rank() != 3 {
        return Err(Error::dim(format!(
            "attention input must be [c,h,w], got {:?}",
            s4.shape()
        )));
    }
    let (c, h, w) = (s4.shape()[0], s4.shape()[1], s4.shape()[2]);
    let x_seq = s4.reshape(&[c, h * w])?.transpose()?;
    let pe = positional_embedding::<S>(h, w, c)?;
    let out = encoder.forward(&x_seq, Some(&pe))?;
    out.transpose()?.reshape(&[c, h, w])
}

/// Per-channel affine normalization with externally managed statistics.
/// Statistics stay frozen during forward passes, which keeps the block
/// foldable into a single convolution.
pub struct ChannelNorm<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub mean: Vec<S>,
    pub var: Vec<S>,
    pub eps: S,
}

impl<S: Scalar> ChannelNorm<S> {
    pub fn identity(channels: usize) -> Self {
        ChannelNorm {
            gamma: Tensor::ones(&[channels]).requiring_grad(),
            beta: Tensor::zeros(&[channels]).requiring_grad(),
            mean: vec![S::zero(); channels],
            var: vec![S::one(); channels],
            eps: S::from_f64(1e-5),
        }
    }

    pub fn random(channels: usize, rng: &mut Rng) -> Self {
        ChannelNorm {
            gamma: Tensor::rand_uniform(&[channels], 0.5, 1.5, rng).requiring_grad(),
            beta: Tensor::rand_uniform(&[channels], -0.5, 0.5, rng).requiring_grad(),
            mean: (0..channels).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            var: (0..channels).map(|_| rng.uniform(0.25, 2.0)).collect(),
            eps: S::from_f64(1e-5),
        }
    }

    fn inv_std(&self) -> Vec<S> {
        self.var
            .iter()
            .map(|&v| S::one() / (v + self.eps).sqrt())
            .collect()
    }

    /// Effective per-channel (scale, shift) given the frozen statistics:
    /// y = x·γ/√(v+ε) + (β − γ·m/√(v+ε)).
    pub fn effective_affine(&self) -> Result<(Tensor<S>, Tensor<S>)> {
        let c = self.mean.len();
        let inv = self.inv_std();
        let inv_t = Tensor::from_vec(&[c], inv.clone())?;
        let neg_mean_inv: Vec<S> = self.mean.iter().zip(&inv).map(|(&m, &i)| -m * i).collect();
        let neg_mean_inv_t = Tensor::from_vec(&[c], neg_mean_inv)?;
        let scale = self.gamma.mul(&inv_t)?;
        let shift = self.beta.add(&self.gamma.mul(&neg_mean_inv_t)?)?;
        Ok((scale, shift))
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (scale, shift) = self.effective_affine()?;
        x.channel_affine(&scale, &shift)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.g"), self.gamma.clone()));
        out.push((format!("{prefix}.b"), self.beta.clone()));
    }
}

/// 1×7 then 7×1 convolution (each followed by Mish), then 2× bilinear
/// upsampling.
pub struct UpsampleBlock<S: Scalar> {
    pub w_row: Tensor<S>,
    pub b_row: Tensor<S>,
    pub w_col: Tensor<S>,
    pub b_col: Tensor<S>,
}

impl<S: Scalar> UpsampleBlock<S> {
    pub fn new(channels: usize, rng: &mut Rng) -> Self {
        UpsampleBlock {
            w_row: conv_init(&[channels, channels, 1, 7], channels * 7, rng),
            b_row: Tensor::zeros(&[channels]).requiring_grad(),
            w_col: conv_init(&[channels, channels, 7, 1], channels * 7, rng),
            b_col: Tensor::zeros(&[channels]).requiring_grad(),
        }
    }

    /// Centered-delta kernels and zero biases, so each conv passes its input
    /// through unchanged.
    pub fn delta(channels: usize) -> Self {
        let mut row = vec![S::zero(); channels * channels * 7];
        let mut col = vec![S::zero(); channels * channels * 7];
        for c in 0..channels {
            row[(c * channels + c) * 7 + 3] = S::one();
            col[(c * channels + c) * 7 + 3] = S::one();
        }
        UpsampleBlock {
            w_row: Tensor::from_vec(&[channels, channels, 1, 7], row).unwrap(),
            b_row: Tensor::zeros(&[channels]),
            w_col: Tensor::from_vec(&[channels, channels, 7, 1], col).unwrap(),
            b_col: Tensor::zeros(&[channels]),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let y = x
            .conv2d(&self.w_row, Some(&self.b_row), (1, 1), (0, 3))?
            .mish()
            .conv2d(&self.w_col, Some(&self.b_col), (1, 1), (3, 0))?
            .mish();
        let (h, w) = (y.shape()[1], y.shape()[2]);
        y.bilinear_resize(2 * h, 2 * w)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.w_row"), self.w_row.clone()));
        out.push((format!("{prefix}.b_row"), self.b_row.clone()));
        out.push((format!("{prefix}.w_col"), self.w_col.clone()));
        out.push((format!("{prefix}.b_col"), self.b_col.clone()));
    }
}

/// Three-branch block (3×3 conv + norm, 1×1 conv + norm, identity + norm)
/// summed and passed through Mish; collapsible to one 3×3 convolution.
pub struct FusionBlock<S: Scalar> {
    pub w3: Tensor<S>,
    pub norm3: ChannelNorm<S>,
    pub w1: Tensor<S>,
    pub norm1: ChannelNorm<S>,
    pub norm_id: ChannelNorm<S>,
    channels: usize,
}

impl<S: Scalar> FusionBlock<S> {
    pub fn new(channels: usize, rng: &mut Rng) -> Self {
        FusionBlock {
            w3: conv_init(&[channels, channels, 3, 3], channels * 9, rng),
            norm3: ChannelNorm::identity(channels),
            w1: conv_init(&[channels, channels, 1, 1], channels, rng),
            norm1: ChannelNorm::identity(channels),
            norm_id: ChannelNorm::identity(channels),
            channels,
        }
    }

    /// Fully randomized weights and statistics, for equivalence audits.
    pub fn random(channels: usize, rng: &mut Rng) -> Self {
        FusionBlock {
            w3: Tensor::rand_uniform(&[channels, channels, 3, 3], -0.5, 0.5, rng),
            norm3: ChannelNorm::random(channels, rng),
            w1: Tensor::rand_uniform(&[channels, channels, 1, 1], -0.5, 0.5, rng),
            norm1: ChannelNorm::random(channels, rng),
            norm_id: ChannelNorm::random(channels, rng),
            channels,
        }
    }

    pub fn forward_train(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        if x.shape()[0] != self.channels {
            return Err(Error::dim(format!(
                "fusion block expects {} channels, got {}",
                self.channels,
                x.shape()[0]
            )));
        }
        let b3 = self
            .norm3
            .forward(&x.conv2d(&self.w3, None, (1, 1), (1, 1))?)?;
        let b1 = self
            .norm1
            .forward(&x.conv2d(&self.w1, None, (1, 1), (0, 0))?)?;
        let bid = self.norm_id.forward(x)?;
        Ok(b3.add(&b1)?.add(&bid)?.mish())
    }

    /// Fold the three branches into a single 3×3 kernel and bias: each
    /// branch's frozen normalization folds into its convolution
    /// (ŵ = γ/√(v+ε)·w, b̂ = β − γ·m/√(v+ε)), the 1×1 kernel embeds at the
    /// center tap, and the identity branch becomes a center-tap delta.
    pub fn reparameterize(&self) -> Result<(Tensor<S>, Tensor<S>)> {
        let c = self.channels;
        let mut kernel = vec![S::zero(); c * c * 9];
        let mut bias = vec![S::zero(); c];

        let fold = |norm: &ChannelNorm<S>| -> (Vec<S>, Vec<S>) {
            let inv = norm.inv_std();
            let g = norm.gamma.data();
            let b = norm.beta.data();
            let scale: Vec<S> = g.iter().zip(&inv).map(|(&g, &i)| g * i).collect();
            let shift: Vec<S> = b
                .iter()
                .zip(norm.mean.iter().zip(&inv))
                .zip(g.iter())
                .map(|((&b, (&m, &i)), &g)| b - g * m * i)
                .collect();
            (scale, shift)
        };

        let (s3, sh3) = fold(&self.norm3);
        {
            let w = self.w3.data();
            for o in 0..c {
                for t in 0..c * 9 {
                    kernel[o * c * 9 + t] += s3[o] * w[o * c * 9 + t];
                }
            }
        }
        let (s1, sh1) = fold(&self.norm1);
        {
            let w = self.w1.data();
            for o in 0..c {
                for ic in 0..c {
                    kernel[(o * c + ic) * 9 + 4] += s1[o] * w[o * c + ic];
                }
            }
        }
        let (sid, shid) = fold(&self.norm_id);
        for o in 0..c {
            kernel[(o * c + o) * 9 + 4] += sid[o];
        }
        for o in 0..c {
            bias[o] = sh3[o] + sh1[o] + shid[o];
        }
        Ok((
            Tensor::from_vec(&[c, c, 3, 3], kernel)?,
            Tensor::from_vec(&[c], bias)?,
        ))
    }

    /// Single-path forward using a collapsed kernel from [`Self::reparameterize`].
    pub fn forward_infer(
        &self,
        x: &Tensor<S>,
        collapsed: &(Tensor<S>, Tensor<S>),
    ) -> Result<Tensor<S>> {
        Ok(x.conv2d(&collapsed.0, Some(&collapsed.1), (1, 1), (1, 1))?
            .mish())
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.w3"), self.w3.clone()));
        out.push((format!("{prefix}.w1"), self.w1.clone()));
        self.norm3.params(&format!("{prefix}.n3"), out);
        self.norm1.params(&format!("{prefix}.n1"), out);
        self.norm_id.params(&format!("{prefix}.nid"), out);
    }
}

/// The whole aggregator: encoder on S4, then upsample+fuse against S3, S2, S1.
pub struct Ehfam<S: Scalar> {
    pub cfg: EhfamConfig,
    pub encoder: Encoder<S>,
    pub up: [UpsampleBlock<S>; 3],
    pub fuse: [FusionBlock<S>; 3],
}

impl<S: Scalar> Ehfam<S> {
    pub fn new(cfg: EhfamConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(Ehfam {
            encoder: Encoder::new(&cfg, rng),
            up: [
                UpsampleBlock::new(c, rng),
                UpsampleBlock::new(c, rng),
                UpsampleBlock::new(c, rng),
            ],
            fuse: [
                FusionBlock::new(c, rng),
                FusionBlock::new(c, rng),
                FusionBlock::new(c, rng),
            ],
            cfg,
        })
    }

    /// Aggregate the pyramid into the stride-4 feature map `[C, H/4, W/4]`.
    /// The merge at each level is elementwise addition of the upsampled deep
    /// feature and the lateral feature, followed by the fusion block.
    pub fn aggregate(&self, pyramid: &FeaturePyramid<S>) -> Result<Tensor<S>> {
        pyramid.validate()?;
        let mut x = multi_head_self_attention(&pyramid.s4, &self.encoder)?;
        for (i, lateral) in [&pyramid.s3, &pyramid.s2, &pyramid.s1]
            .into_iter()
            .enumerate()
        {
            let upped = self.up[i].forward(&x)?;
            x = self.fuse[i].forward_train(&upped.add(lateral)?)?;
        }
        Ok(x)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.encoder.params(&format!("{prefix}.enc"), out);
        for i in 0..3 {
            self.up[i].params(&format!("{prefix}.up{i}"), out);
            self.fuse[i].params(&format!("{prefix}.fuse{i}"), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg(c: usize, heads: usize, dv: usize) -> EhfamConfig {
        EhfamConfig {
            channels: c,
            heads,
            value_dim: dv,
        }
    }

    #[test]
    fn positional_embedding_in_unit_range_and_deterministic() {
        let a = positional_embedding::<f64>(4, 4, 8).unwrap();
        let b = positional_embedding::<f64>(4, 4, 8).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
        assert!(a.to_vec().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn positional_embedding_rows_are_distinct() {
        let pe = positional_embedding::<f64>(4, 4, 8).unwrap();
        let d = pe.data();
        for a in 0..16 {
            for b in (a + 1)..16 {
                let ra = &d[a * 8..(a + 1) * 8];
                let rb = &d[b * 8..(b + 1) * 8];
                assert!(
                    ra.iter().zip(rb).any(|(x, y)| (x - y).abs() > 1e-9),
                    "positions {a} and {b} collide"
                );
            }
        }
    }

    #[test]
    fn positional_embedding_rejects_odd_channels() {
        assert!(positional_embedding::<f64>(2, 2, 7).is_err());
    }

    #[test]
    fn zero_query_key_identity_value_averages_rows() {
        // One head, W_q = W_k = 0, W_v = I, W_o = I: every output row is the
        // uniform average of all input rows (softmax of a zero score matrix).
        let c = 4;
        let mut rng = Rng::seed_from(3);
        let mut enc = Encoder::<f64>::new(&cfg(c, 1, c), &mut rng);
        enc.wq[0] = Tensor::zeros(&[c, c]);
        enc.wk[0] = Tensor::zeros(&[c, c]);
        let mut eye = vec![0.0; c * c];
        for i in 0..c {
            eye[i * c + i] = 1.0;
        }
        enc.wv[0] = Tensor::from_vec(&[c, c], eye.clone()).unwrap();
        enc.wo = Tensor::from_vec(&[c, c], eye).unwrap();

        let x = Tensor::from_vec(&[3, c], (0..12).map(|v| v as f64).collect()).unwrap();
        let z = enc.attention_core(&x, None).unwrap();
        let xd = x.data();
        for j in 0..c {
            let avg = (xd[j] + xd[c + j] + xd[2 * c + j]) / 3.0;
            for t in 0..3 {
                assert_relative_eq!(z.data()[t * c + j], avg, epsilon = 1e-9);
            }
        }
        // plus residual, as wired in the full layer before normalization
        let with_res = x.add(&z).unwrap();
        assert_relative_eq!(with_res.data()[0], xd[0] + 4.0, epsilon = 1e-9);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = Rng::seed_from(11);
        let enc = Encoder::<f64>::new(&cfg(6, 3, 8), &mut rng);
        let x = Tensor::rand_uniform(&[5, 6], -2.0, 2.0, &mut rng);
        for map in enc.attention_maps(&x, None).unwrap() {
            let d = map.data();
            for r in 0..5 {
                let s: f64 = d[r * 5..(r + 1) * 5].iter().sum();
                assert!((s - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let mut rng = Rng::seed_from(5);
        let enc = Encoder::<f64>::new(&cfg(4, 2, 3), &mut rng);
        let x = Tensor::rand_uniform(&[1, 4], -1.0, 1.0, &mut rng);
        let z = enc.attention_core(&x, None).unwrap();
        // softmax over a single token is 1, so z = concat_i(x·Wv_i)·Wo
        let mut vs = Vec::new();
        for i in 0..2 {
            vs.push(x.matmul(&enc.wv[i]).unwrap());
        }
        let refs: Vec<&Tensor<f64>> = vs.iter().collect();
        let want = Tensor::concat(&refs, 1).unwrap().matmul(&enc.wo).unwrap();
        for (a, b) in z.to_vec().iter().zip(want.to_vec()) {
            assert_relative_eq!(a, &b, epsilon = 1e-12);
        }
    }

    #[test]
    fn attention_core_is_permutation_equivariant() {
        let mut rng = Rng::seed_from(17);
        let enc = Encoder::<f64>::new(&cfg(4, 2, 6), &mut rng);
        let x = Tensor::rand_uniform(&[4, 4], -1.0, 1.0, &mut rng);
        let perm = [2usize, 0, 3, 1];
        let xd = x.to_vec();
        let mut px = vec![0.0; 16];
        for (dst, &src) in perm.iter().enumerate() {
            px[dst * 4..(dst + 1) * 4].copy_from_slice(&xd[src * 4..(src + 1) * 4]);
        }
        let x_perm = Tensor::from_vec(&[4, 4], px).unwrap();
        let z = enc.forward(&x, None).unwrap().to_vec();
        let zp = enc.forward(&x_perm, None).unwrap().to_vec();
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..4 {
                assert!((zp[dst * 4 + j] - z[src * 4 + j]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn upsample_block_doubles_extents() {
        let mut rng = Rng::seed_from(2);
        let block = UpsampleBlock::<f64>::new(3, &mut rng);
        let x = Tensor::rand_uniform(&[3, 5, 8], -1.0, 1.0, &mut rng);
        let y = block.forward(&x).unwrap();
        assert_eq!(y.shape(), &[3, 10, 16]);
    }

    #[test]
    fn delta_kernels_reduce_block_to_activated_resize() {
        let mut rng = Rng::seed_from(9);
        let block = UpsampleBlock::<f64>::delta(2);
        let x = Tensor::rand_uniform(&[2, 4, 4], -2.0, 2.0, &mut rng);
        let got = block.forward(&x).unwrap();
        let want = x.mish().mish().bilinear_resize(8, 8).unwrap();
        for (a, b) in got.to_vec().iter().zip(want.to_vec()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn separable_pair_equals_dense_7x7_outer_product() {
        // 1×7 then 7×1 (no activation in between) must match one dense 7×7
        // conv whose kernel is the outer product, per channel.
        let mut rng = Rng::seed_from(23);
        let c = 2;
        let mut row = vec![0.0f64; c * c * 7];
        let mut col = vec![0.0f64; c * c * 7];
        for ch in 0..c {
            for t in 0..7 {
                row[(ch * c + ch) * 7 + t] = rng.uniform::<f64>(-1.0, 1.0);
                col[(ch * c + ch) * 7 + t] = rng.uniform::<f64>(-1.0, 1.0);
            }
        }
        let w_row = Tensor::from_vec(&[c, c, 1, 7], row.clone()).unwrap();
        let w_col = Tensor::from_vec(&[c, c, 7, 1], col.clone()).unwrap();
        let x = Tensor::rand_uniform(&[c, 9, 9], -1.0, 1.0, &mut rng);
        let got = x
            .conv2d(&w_row, None, (1, 1), (0, 3))
            .unwrap()
            .conv2d(&w_col, None, (1, 1), (3, 0))
            .unwrap();

        let mut dense = vec![0.0f64; c * c * 49];
        for ch in 0..c {
            for ky in 0..7 {
                for kx in 0..7 {
                    dense[((ch * c + ch) * 7 + ky) * 7 + kx] =
                        col[(ch * c + ch) * 7 + ky] * row[(ch * c + ch) * 7 + kx];
                }
            }
        }
        let w_dense = Tensor::from_vec(&[c, c, 7, 7], dense).unwrap();
        let want = x.conv2d(&w_dense, None, (1, 1), (3, 3)).unwrap();
        for (a, b) in got.to_vec().iter().zip(want.to_vec()) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn fusion_zero_input_is_finite() {
        let mut rng = Rng::seed_from(4);
        let block = FusionBlock::<f64>::random(3, &mut rng);
        let y = block.forward_train(&Tensor::zeros(&[3, 5, 5])).unwrap();
        assert!(y.all_finite());
    }

    #[test]
    fn fusion_identity_branch_alone_passes_normalized_input() {
        let mut rng = Rng::seed_from(6);
        let mut block = FusionBlock::<f64>::random(2, &mut rng);
        block.w3 = Tensor::zeros(&[2, 2, 3, 3]);
        block.w1 = Tensor::zeros(&[2, 2, 1, 1]);
        for n in [&mut block.norm3, &mut block.norm1] {
            n.gamma = Tensor::ones(&[2]);
            n.beta = Tensor::zeros(&[2]);
            n.mean = vec![0.0; 2];
            n.var = vec![1.0 - 1e-5; 2];
        }
        let x = Tensor::rand_uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
        let got = block.forward_train(&x).unwrap();
        let want = block.norm_id.forward(&x).unwrap().mish();
        for (a, b) in got.to_vec().iter().zip(want.to_vec()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn reparam_trivial_branches_return_w3() {
        let mut rng = Rng::seed_from(8);
        let mut block = FusionBlock::<f64>::random(2, &mut rng);
        block.w1 = Tensor::zeros(&[2, 2, 1, 1]);
        for n in [&mut block.norm3, &mut block.norm1, &mut block.norm_id] {
            n.gamma = Tensor::ones(&[2]);
            n.beta = Tensor::zeros(&[2]);
            n.mean = vec![0.0; 2];
            n.var = vec![1.0 - 1e-5; 2];
        }
        block.norm_id.gamma = Tensor::zeros(&[2]);
        let (k, b) = block.reparameterize().unwrap();
        for (a, w) in k.to_vec().iter().zip(block.w3.to_vec()) {
            assert!((a - w).abs() <= 1e-9);
        }
        assert!(b.to_vec().iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn reparam_matches_multibranch_forward() {
        let mut rng = Rng::seed_from(29);
        for seed in 0..5u64 {
            let mut r = Rng::seed_from(seed * 1000 + 1);
            let block = FusionBlock::<f64>::random(3, &mut r);
            let collapsed = block.reparameterize().unwrap();
            for _ in 0..4 {
                let x = Tensor::rand_uniform(&[3, 6, 6], -2.0, 2.0, &mut rng);
                let a = block.forward_train(&x).unwrap().to_vec();
                let b = block.forward_infer(&x, &collapsed).unwrap().to_vec();
                let max = a
                    .iter()
                    .zip(&b)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0f64, f64::max);
                assert!(max <= 1e-5, "reparam deviates by {max}");
            }
        }
    }

    #[test]
    fn reparam_bias_is_sum_of_folded_branch_biases() {
        let mut rng = Rng::seed_from(31);
        let block = FusionBlock::<f64>::random(3, &mut rng);
        let (_, bias) = block.reparameterize().unwrap();
        // each branch on a zero input produces exactly its folded shift
        let zero = Tensor::zeros(&[3, 3, 3]);
        let b3 = block
            .norm3
            .forward(&zero.conv2d(&block.w3, None, (1, 1), (1, 1)).unwrap())
            .unwrap();
        let b1 = block
            .norm1
            .forward(&zero.conv2d(&block.w1, None, (1, 1), (0, 0)).unwrap())
            .unwrap();
        let bid = block.norm_id.forward(&zero).unwrap();
        for ch in 0..3 {
            let want = b3.data()[ch * 9] + b1.data()[ch * 9] + bid.data()[ch * 9];
            assert_relative_eq!(bias.data()[ch], want, epsilon = 1e-9);
        }
    }

    #[test]
    fn aggregate_has_stride4_shape_and_reaches_all_levels() {
        let mut rng = Rng::seed_from(12);
        let c = 4;
        let ehfam = Ehfam::<f64>::new(cfg(c, 2, 8), &mut rng).unwrap();
        let make = |h: usize, w: usize, rng: &mut Rng| {
            Tensor::rand_uniform(&[c, h, w], -1.0, 1.0, rng).requiring_grad()
        };
        let pyramid = FeaturePyramid {
            s1: make(16, 24, &mut rng),
            s2: make(8, 12, &mut rng),
            s3: make(4, 6, &mut rng),
            s4: make(2, 3, &mut rng),
        };
        let f = ehfam.aggregate(&pyramid).unwrap();
        assert_eq!(f.shape(), &[c, 16, 24]);
        assert!(f.all_finite());

        f.sum().backward().unwrap();
        for (name, level) in [
            ("s1", &pyramid.s1),
            ("s2", &pyramid.s2),
            ("s3", &pyramid.s3),
            ("s4", &pyramid.s4),
        ] {
            let g = level.grad().expect("gradient must reach every level");
            assert!(
                g.iter().any(|v| v.abs() > 0.0),
                "gradient through {name} vanished"
            );
        }
    }

    #[test]
    fn aggregate_is_deterministic_and_finite_at_scale_10() {
        let build = || {
            let mut rng = Rng::seed_from(77);
            let ehfam = Ehfam::<f64>::new(cfg(4, 2, 8), &mut rng).unwrap();
            let pyramid = FeaturePyramid {
                s1: Tensor::rand_uniform(&[4, 8, 8], -10.0, 10.0, &mut rng),
                s2: Tensor::rand_uniform(&[4, 4, 4], -10.0, 10.0, &mut rng),
                s3: Tensor::rand_uniform(&[4, 2, 2], -10.0, 10.0, &mut rng),
                s4: Tensor::rand_uniform(&[4, 1, 1], -10.0, 10.0, &mut rng),
            };
            let f = ehfam.aggregate(&pyramid).unwrap();
            assert!(f.all_finite());
            f.to_vec()
        };
        assert_eq!(build(), build());
    }
}
