//! Training losses: penalty-reduced focal heatmap loss, the selective
//! confidence-guided auxiliary term, masked L1 regression, multi-bin
//! orientation, and Laplacian aleatoric depth.

use serde::Serialize;

use crate::asrh::Head3dOutput;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NUM_ORIENTATION_BINS: usize = 12;
pub const BIN_WIDTH: f64 = 2.0 * std::f64::consts::PI / NUM_ORIENTATION_BINS as f64;

#[derive(Debug, Clone)]
pub struct LossWeightsConfig {
    pub scg_lambda: f64,
    pub scg_threshold: f64,
    pub top_k: usize,
    pub focal_alpha: f64,
    pub focal_beta: f64,
}

impl Default for LossWeightsConfig {
    fn default() -> Self {
        LossWeightsConfig {
            scg_lambda: 0.01,
            scg_threshold: 0.9,
            top_k: 50,
            focal_alpha: 2.0,
            focal_beta: 4.0,
        }
    }
}

impl LossWeightsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.scg_threshold && self.scg_threshold < 1.0) {
            return Err(Error::config("scg_threshold must lie in (0,1)"));
        }
        if self.scg_lambda < 0.0 {
            return Err(Error::config("scg_lambda must be >= 0"));
        }
        if self.top_k == 0 {
            return Err(Error::config("top_k must be >= 1"));
        }
        Ok(())
    }
}

/// One annotated object as seen by the heatmap renderer (stride-4 cells).
#[derive(Debug, Clone, Copy)]
pub struct HeatInstance {
    pub class_id: usize,
    /// Center in map coordinates (x, y).
    pub center: (f64, f64),
    /// 2D box extent in map cells (w, h).
    pub size: (f64, f64),
}

/// Rendered ground-truth heatmap plus the exact positive cells.
pub struct HeatmapTarget<S: Scalar> {
    pub gaussians: Tensor<S>,
    pub positives: Vec<(usize, usize, usize)>,
}

/// CornerNet-style radius such that a box shifted by r keeps IoU at least
/// `min_overlap` with the original.
pub fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let a1 = 1.0;
    let b1 = height + width;
    let c1 = width * height * (1.0 - min_overlap) / (1.0 + min_overlap);
    let sq1 = (b1 * b1 - 4.0 * a1 * c1).max(0.0).sqrt();
    let r1 = (b1 + sq1) / 2.0;

    let a2 = 4.0;
    let b2 = 2.0 * (height + width);
    let c2 = (1.0 - min_overlap) * width * height;
    let sq2 = (b2 * b2 - 4.0 * a2 * c2).max(0.0).sqrt();
    let r2 = (b2 + sq2) / 2.0;

    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (height + width);
    let c3 = (min_overlap - 1.0) * width * height;
    let sq3 = (b3 * b3 - 4.0 * a3 * c3).max(0.0).sqrt();
    let r3 = (b3 + sq3) / 2.0;

    r1.min(r2).min(r3)
}

impl<S: Scalar> HeatmapTarget<S> {
    /// Render per-class Gaussians (max-combined) with value exactly 1 at
    /// each annotated center cell; radius from the 0.7-overlap rule.
    pub fn render(
        num_classes: usize,
        h: usize,
        w: usize,
        instances: &[HeatInstance],
    ) -> Result<Self> {
        let mut data = vec![S::zero(); num_classes * h * w];
        let mut positives = Vec::with_capacity(instances.len());
        for inst in instances {
            if inst.class_id >= num_classes {
                return Err(Error::contract(format!(
                    "class id {} out of {num_classes}",
                    inst.class_id
                )));
            }
            let cx = inst.center.0.floor() as isize;
            let cy = inst.center.1.floor() as isize;
            if cx < 0 || cy < 0 || cx >= w as isize || cy >= h as isize {
                return Err(Error::contract("instance center outside the heatmap"));
            }
            let (cx, cy) = (cx as usize, cy as usize);
            let radius = gaussian_radius(inst.size.1, inst.size.0, 0.7).floor().max(0.0) as isize;
            let sigma = (2.0 * radius as f64 + 1.0) / 6.0;
            let plane = inst.class_id * h * w;
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    let y = cy as isize + dy;
                    let x = cx as isize + dx;
                    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                        continue;
                    }
                    let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                    let idx = plane + y as usize * w + x as usize;
                    if S::from_f64(v) > data[idx] {
                        data[idx] = S::from_f64(v);
                    }
                }
            }
            data[plane + cy * w + cx] = S::one();
            positives.push((inst.class_id, cy, cx));
        }
        Ok(HeatmapTarget {
            gaussians: Tensor::from_vec(&[num_classes, h, w], data)?,
            positives,
        })
    }
}

/// Penalty-reduced focal loss on a sigmoid heatmap:
/// −1/N [ Σ_pos (1−p)^α·log p + Σ_neg (1−Y)^β·p^α·log(1−p) ],
/// with N = max(1, #positives) and α = 2, β = 4.
pub fn focal_heatmap_loss<S: Scalar>(
    pred: &Tensor<S>,
    target: &HeatmapTarget<S>,
    cfg: &LossWeightsConfig,
) -> Result<Tensor<S>> {
    if pred.shape() != target.gaussians.shape() {
        return Err(Error::dim(format!(
            "focal loss: prediction {:?} vs target {:?}",
            pred.shape(),
            target.gaussians.shape()
        )));
    }
    if cfg.focal_alpha != 2.0 {
        return Err(Error::config("focal loss is implemented for alpha = 2"));
    }
    let shape = pred.shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let numel = pred.numel();
    let mut pos_mask = vec![S::zero(); numel];
    for &(c, y, x) in &target.positives {
        pos_mask[(c * h + y) * w + x] = S::one();
    }
    let neg_weight: Vec<S> = target
        .gaussians
        .data()
        .iter()
        .zip(&pos_mask)
        .map(|(&y, &p)| {
            if p == S::one() {
                S::zero()
            } else {
                S::from_f64((1.0 - y.as_f64()).powf(cfg.focal_beta))
            }
        })
        .collect();
    let pos_mask = Tensor::from_vec(&shape, pos_mask)?;
    let neg_weight = Tensor::from_vec(&shape, neg_weight)?;

    let p = pred.clamp(S::from_f64(1e-6), S::from_f64(1.0 - 1e-6));
    let one_minus_p = p.neg().add_scalar(S::one());
    let pos_term = pos_mask.mul(&one_minus_p.square().mul(&p.ln())?)?.sum();
    let neg_term = neg_weight
        .mul(&p.square().mul(&one_minus_p.ln())?)?
        .sum();
    let n = target.positives.len().max(1);
    Ok(pos_term
        .add(&neg_term)?
        .mul_scalar(-S::one() / S::from_usize(n)))
}

/// 3×3 local maxima of a `[classes,h,w]` heatmap, best-first.
/// A peak survives iff it equals the max of its 3×3 neighborhood; ties are
/// broken by flat index for determinism.
pub fn suppressed_peaks<S: Scalar>(
    heat: &[S],
    num_classes: usize,
    h: usize,
    w: usize,
) -> Vec<(f64, usize, usize, usize)> {
    let mut peaks = Vec::new();
    for c in 0..num_classes {
        let plane = &heat[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let v = plane[y * w + x];
                let mut is_peak = true;
                'scan: for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (ny, nx) = (y as isize + dy, x as isize + dx);
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        if plane[ny as usize * w + nx as usize] > v {
                            is_peak = false;
                            break 'scan;
                        }
                    }
                }
                if is_peak {
                    peaks.push((v.as_f64(), c, y, x));
                }
            }
        }
    }
    peaks.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| ((a.1 * h + a.2) * w + a.3).cmp(&((b.1 * h + b.2) * w + b.3)))
    });
    peaks
}

/// Selective confidence-guided loss: −(1/B)·Σ_{j≤K} log(t_j)·[t_j > T] over
/// the suppressed top-K peaks of one image (B = 1 here; the trainer averages
/// over its batch). The threshold indicator is constant under
/// differentiation, so gradient flows only into above-threshold peaks.
pub fn scg_loss<S: Scalar>(pred: &Tensor<S>, k: usize, threshold: f64) -> Result<Tensor<S>> {
    if pred.rank() != 3 {
        return Err(Error::dim(format!(
            "scg loss expects [classes,h,w], got {:?}",
            pred.shape()
        )));
    }
    if k == 0 {
        return Err(Error::contract("scg loss requires K >= 1"));
    }
    let (cls, h, w) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    let peaks = {
        let data = pred.data();
        suppressed_peaks(&data, cls, h, w)
    };
    let selected: Vec<usize> = peaks
        .iter()
        .take(k)
        .filter(|(score, _, _, _)| *score > threshold)
        .map(|&(_, c, y, x)| (c * h + y) * w + x)
        .collect();
    if selected.is_empty() {
        return Ok(Tensor::zeros(&[1]));
    }
    Ok(pred.gather_flat(&selected)?.ln().sum().neg())
}

/// Eq: focal + λ·SCG.
pub fn heatmap_loss<S: Scalar>(
    pred: &Tensor<S>,
    target: &HeatmapTarget<S>,
    cfg: &LossWeightsConfig,
) -> Result<Tensor<S>> {
    cfg.validate()?;
    let focal = focal_heatmap_loss(pred, target, cfg)?;
    let scg = scg_loss(pred, cfg.top_k, cfg.scg_threshold)?;
    focal.add(&scg.mul_scalar(S::from_f64(cfg.scg_lambda)))
}

/// Mean absolute error over masked entries; 0 when the mask is empty.
pub fn l1_masked<S: Scalar>(
    pred: &Tensor<S>,
    target: &Tensor<S>,
    mask: &Tensor<S>,
) -> Result<Tensor<S>> {
    if pred.shape() != target.shape() || pred.shape() != mask.shape() {
        return Err(Error::dim(format!(
            "l1_masked: shapes {:?} / {:?} / {:?} must match",
            pred.shape(),
            target.shape(),
            mask.shape()
        )));
    }
    let count = mask.data().iter().filter(|&&m| m != S::zero()).count();
    if count == 0 {
        return Ok(Tensor::zeros(&[1]));
    }
    Ok(pred
        .sub(target)?
        .abs()
        .mul(mask)?
        .sum()
        .mul_scalar(S::one() / S::from_usize(count)))
}

pub fn wrap_to_pi(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut v = (a + std::f64::consts::PI).rem_euclid(two_pi);
    if v < 0.0 {
        v += two_pi;
    }
    v - std::f64::consts::PI
}

/// Bin index and half-width-normalized residual for an observation angle.
pub fn encode_alpha(alpha: f64) -> (usize, f64) {
    let a = wrap_to_pi(alpha);
    let bin = (((a + std::f64::consts::PI) / BIN_WIDTH).floor() as usize)
        .min(NUM_ORIENTATION_BINS - 1);
    let center = bin_center(bin);
    (bin, (a - center) / (BIN_WIDTH / 2.0))
}

pub fn bin_center(bin: usize) -> f64 {
    -std::f64::consts::PI + (bin as f64 + 0.5) * BIN_WIDTH
}

pub fn decode_alpha(bin: usize, residual_norm: f64) -> f64 {
    wrap_to_pi(bin_center(bin) + residual_norm * (BIN_WIDTH / 2.0))
}

/// Decode the predicted angle from one 24-wide head row: argmax bin logit
/// plus that bin's residual.
pub fn decode_alpha_row<S: Scalar>(row: &[S]) -> f64 {
    debug_assert_eq!(row.len(), 2 * NUM_ORIENTATION_BINS);
    let mut best = 0;
    for b in 1..NUM_ORIENTATION_BINS {
        if row[b] > row[best] {
            best = b;
        }
    }
    decode_alpha(best, row[NUM_ORIENTATION_BINS + best].as_f64())
}

/// Cross-entropy over the 12 bin logits plus L1 on the ground-truth bin's
/// residual, averaged over instances.
pub fn multibin_loss<S: Scalar>(theta: &Tensor<S>, gt_alphas: &[f64]) -> Result<Tensor<S>> {
    let n = gt_alphas.len();
    if theta.rank() != 2 || theta.shape() != [n, 2 * NUM_ORIENTATION_BINS] {
        return Err(Error::dim(format!(
            "multibin loss expects [{n},24] logits+residuals, got {:?}",
            theta.shape()
        )));
    }
    if n == 0 {
        return Ok(Tensor::zeros(&[1]));
    }
    let logits = theta.narrow(1, 0, NUM_ORIENTATION_BINS)?;
    let residuals = theta.narrow(1, NUM_ORIENTATION_BINS, NUM_ORIENTATION_BINS)?;
    let mut idx = Vec::with_capacity(n);
    let mut res_targets = Vec::with_capacity(n);
    for (i, &alpha) in gt_alphas.iter().enumerate() {
        let (bin, res) = encode_alpha(alpha);
        idx.push(i * NUM_ORIENTATION_BINS + bin);
        res_targets.push(S::from_f64(res));
    }
    let ce = logits
        .log_softmax(1)?
        .gather_flat(&idx)?
        .sum()
        .mul_scalar(-S::one() / S::from_usize(n));
    let res_target = Tensor::from_vec(&[n], res_targets)?;
    let res_l1 = residuals
        .gather_flat(&idx)?
        .sub(&res_target)?
        .abs()
        .sum()
        .mul_scalar(S::one() / S::from_usize(n));
    ce.add(&res_l1)
}

/// Laplacian aleatoric depth loss, mean over instances of
/// (√2/σ)·|d_gt − d_pred| + log σ with σ = exp(log_sigma) and log_sigma
/// clamped to [−10, 10].
pub fn laplacian_depth_loss<S: Scalar>(
    d_pred: &Tensor<S>,
    log_sigma: &Tensor<S>,
    d_gt: &[f64],
) -> Result<Tensor<S>> {
    let n = d_gt.len();
    if d_pred.numel() != n || log_sigma.numel() != n {
        return Err(Error::dim(format!(
            "laplacian depth loss: {n} targets vs {} predictions / {} sigmas",
            d_pred.numel(),
            log_sigma.numel()
        )));
    }
    if n == 0 {
        return Ok(Tensor::zeros(&[1]));
    }
    let gt = Tensor::from_vec(&[n], d_gt.iter().map(|&v| S::from_f64(v)).collect())?;
    let s = log_sigma.reshape(&[n])?.clamp(S::from_f64(-10.0), S::from_f64(10.0));
    let inv_sigma = s.neg().exp();
    let resid = d_pred.reshape(&[n])?.sub(&gt)?.abs();
    Ok(resid
        .mul(&inv_sigma)?
        .mul_scalar(S::from_f64(std::f64::consts::SQRT_2))
        .add(&s)?
        .mean())
}

/// Per-term loss values for one training step; serializes to one JSON object.
#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    pub step: usize,
    pub focal: f64,
    pub scg: f64,
    pub heatmap: f64,
    pub o2d: f64,
    pub s2d: f64,
    pub o3d: f64,
    pub s3d: f64,
    pub theta: f64,
    pub depth: f64,
    pub total: f64,
}

/// Ground truth for one instance, aligned with the RoI batch row order.
#[derive(Debug, Clone)]
pub struct InstanceTarget {
    pub class_id: usize,
    /// Positive cell (y, x) on the stride-4 map.
    pub cell: (usize, usize),
    /// Fractional center offset within the cell (x, y).
    pub o2d: [f64; 2],
    /// 2D box size in stride-4 cells (w, h).
    pub s2d: [f64; 2],
    /// Projected 3D center minus 2D center, stride-4 pixels (x, y).
    pub o3d: [f64; 2],
    /// 3D dimensions (h, w, l) meters.
    pub s3d: [f64; 3],
    pub alpha: f64,
    pub depth: f64,
}

/// Predictions entering the loss: the three 2D maps and the 3D head output.
pub struct Predictions<'a, S: Scalar> {
    pub heatmap: &'a Tensor<S>,
    pub o2d: &'a Tensor<S>,
    pub s2d: &'a Tensor<S>,
    pub head3d: &'a Head3dOutput<S>,
}

fn map_l1_at_cells<S: Scalar>(
    pred: &Tensor<S>,
    values: impl Fn(&InstanceTarget) -> [f64; 2],
    targets: &[InstanceTarget],
) -> Result<Tensor<S>> {
    let shape = pred.shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let mut target = vec![S::zero(); pred.numel()];
    let mut mask = vec![S::zero(); pred.numel()];
    for t in targets {
        let (y, x) = t.cell;
        let v = values(t);
        for ch in 0..2 {
            target[(ch * h + y) * w + x] = S::from_f64(v[ch]);
            mask[(ch * h + y) * w + x] = S::one();
        }
    }
    l1_masked(
        pred,
        &Tensor::from_vec(&shape, target)?,
        &Tensor::from_vec(&shape, mask)?,
    )
}

/// Assemble every term of the training objective:
/// L = L_heatmap + L1(O2D) + L1(S2D) + L1(O3D) + L1(S3D) + L_theta + L_depth,
/// all unit-weighted. Returns the differentiable total plus the report.
pub fn total_loss<S: Scalar>(
    preds: &Predictions<'_, S>,
    heat_target: &HeatmapTarget<S>,
    targets: &[InstanceTarget],
    cfg: &LossWeightsConfig,
    step: usize,
) -> Result<(Tensor<S>, LossReport)> {
    cfg.validate()?;
    let n = targets.len();
    if preds.head3d.s3d.shape()[0] != n {
        return Err(Error::contract(format!(
            "head output rows ({}) must match instance targets ({n})",
            preds.head3d.s3d.shape()[0]
        )));
    }

    let focal = focal_heatmap_loss(preds.heatmap, heat_target, cfg)?;
    let scg = scg_loss(preds.heatmap, cfg.top_k, cfg.scg_threshold)?;
    let heat = focal.add(&scg.mul_scalar(S::from_f64(cfg.scg_lambda)))?;

    let o2d = map_l1_at_cells(preds.o2d, |t| t.o2d, targets)?;
    let s2d = map_l1_at_cells(preds.s2d, |t| t.s2d, targets)?;

    // 3D rows: L1 against per-instance vectors with a full mask
    let row_l1 = |pred: &Tensor<S>, get: &dyn Fn(&InstanceTarget) -> Vec<f64>| -> Result<Tensor<S>> {
        if n == 0 {
            return Ok(Tensor::zeros(&[1]));
        }
        let width = pred.shape()[1];
        let mut tv = Vec::with_capacity(n * width);
        for t in targets {
            for v in get(t) {
                tv.push(S::from_f64(v));
            }
        }
        let target = Tensor::from_vec(&[n, width], tv)?;
        let mask = Tensor::ones(&[n, width]);
        l1_masked(pred, &target, &mask)
    };
    let o3d = row_l1(&preds.head3d.o3d, &|t| t.o3d.to_vec())?;
    let s3d = row_l1(&preds.head3d.s3d, &|t| t.s3d.to_vec())?;

    let alphas: Vec<f64> = targets.iter().map(|t| t.alpha).collect();
    let theta = multibin_loss(&preds.head3d.theta, &alphas)?;

    let depths: Vec<f64> = targets.iter().map(|t| t.depth).collect();
    let depth = if n == 0 {
        Tensor::zeros(&[1])
    } else {
        laplacian_depth_loss(
            &preds.head3d.aggregated_depth()?,
            &preds.head3d.aggregated_log_sigma()?,
            &depths,
        )?
    };

    let total = heat
        .add(&o2d)?
        .add(&s2d)?
        .add(&o3d)?
        .add(&s3d)?
        .add(&theta)?
        .add(&depth)?;
    let report = LossReport {
        step,
        focal: focal.item().as_f64(),
        scg: scg.item().as_f64(),
        heatmap: heat.item().as_f64(),
        o2d: o2d.item().as_f64(),
        s2d: s2d.item().as_f64(),
        o3d: o3d.item().as_f64(),
        s3d: s3d.item().as_f64(),
        theta: theta.item().as_f64(),
        depth: depth.item().as_f64(),
        total: total.item().as_f64(),
    };
    Ok((total, report))
}
