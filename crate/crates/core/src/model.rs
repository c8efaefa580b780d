//! Toy end-to-end detector: a small strided backbone producing the four
//! pyramid levels, the aggregated stride-4 map, CenterNet-style 2D heads
//! and decoding, RoI assembly, and the 3D regression head — plus the
//! synthetic scene generator used for desk-scale training.

use crate::asrh::{Asrh, Head3dOutput, RoiBatch, RoiRect};
use crate::ehfam::{conv_init, Ehfam, EhfamConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::eval::Box3D;
use crate::kitti::{CalibRecord, LabelRecord};
use crate::losses::{
    decode_alpha_row, suppressed_peaks, wrap_to_pi, HeatInstance, HeatmapTarget, InstanceTarget,
};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct DetectorConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub top_k: usize,
    pub score_threshold: f64,
    pub seed: u64,
    pub attention_heads: usize,
    pub attention_value_dim: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            input_h: 96,
            input_w: 192,
            channels: 32,
            num_classes: 3,
            class_names: vec!["Car".into(), "Pedestrian".into(), "Cyclist".into()],
            top_k: 50,
            score_threshold: 0.25,
            seed: 42,
            attention_heads: 8,
            attention_value_dim: 128,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_h < 64 || self.input_w < 64 {
            return Err(Error::config("input extents must be at least 64"));
        }
        if self.input_h % 32 != 0 || self.input_w % 32 != 0 {
            return Err(Error::config("input extents must be divisible by 32"));
        }
        if self.top_k == 0 {
            return Err(Error::config("top_k must be >= 1"));
        }
        if self.num_classes == 0 || self.class_names.len() != self.num_classes {
            return Err(Error::config(
                "num_classes must match the class name list",
            ));
        }
        Ok(())
    }

    pub fn class_id(&self, kind: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == kind)
    }

    fn ehfam(&self) -> EhfamConfig {
        EhfamConfig {
            channels: self.channels,
            heads: self.attention_heads,
            value_dim: self.attention_value_dim,
        }
    }
}

/// One decoded detection.
#[derive(Debug, Clone)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    /// (left, top, right, bottom) pixels.
    pub box2d: [f64; 4],
    pub box3d: Box3D,
    pub alpha: f64,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::contract(format!("score {} outside [0,1]", self.score)));
        }
        if self.box3d.z <= 0.0 {
            return Err(Error::contract("detection depth must be positive"));
        }
        self.box3d.validate()
    }

    pub fn to_label_record(&self, cfg: &DetectorConfig) -> LabelRecord {
        LabelRecord {
            kind: cfg.class_names[self.class_id].clone(),
            truncated: 0.0,
            occluded: 0,
            alpha: self.alpha,
            bbox: self.box2d,
            dims: [self.box3d.h, self.box3d.w, self.box3d.l],
            loc: [self.box3d.x, self.box3d.y, self.box3d.z],
            ry: self.box3d.ry,
            score: Some(self.score),
        }
    }
}

struct ConvLayer<S: Scalar> {
    w: Tensor<S>,
    b: Tensor<S>,
    stride: (usize, usize),
    pad: (usize, usize),
}

impl<S: Scalar> ConvLayer<S> {
    fn new(
        c_in: usize,
        c_out: usize,
        k: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        rng: &mut Rng,
    ) -> Self {
        ConvLayer {
            w: conv_init(&[c_out, c_in, k.0, k.1], c_in * k.0 * k.1, rng),
            b: Tensor::zeros(&[c_out]).requiring_grad(),
            stride,
            pad,
        }
    }

    fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.conv2d(&self.w, Some(&self.b), self.stride, self.pad)
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

/// Stem (two stride-2 convolutions to stride 4) followed by three stride-2
/// stages; Mish after every convolution.
pub struct Backbone<S: Scalar> {
    stem1: ConvLayer<S>,
    stem2: ConvLayer<S>,
    stage2: ConvLayer<S>,
    stage3: ConvLayer<S>,
    stage4: ConvLayer<S>,
}

impl<S: Scalar> Backbone<S> {
    pub fn new(channels: usize, rng: &mut Rng) -> Self {
        let half = (channels / 2).max(1);
        Backbone {
            stem1: ConvLayer::new(3, half, (3, 3), (2, 2), (1, 1), rng),
            stem2: ConvLayer::new(half, channels, (3, 3), (2, 2), (1, 1), rng),
            stage2: ConvLayer::new(channels, channels, (3, 3), (2, 2), (1, 1), rng),
            stage3: ConvLayer::new(channels, channels, (3, 3), (2, 2), (1, 1), rng),
            stage4: ConvLayer::new(channels, channels, (3, 3), (2, 2), (1, 1), rng),
        }
    }

    /// Image `[3,H,W]` with values in [0,1] to the four pyramid scales.
    pub fn forward(&self, image: &Tensor<S>) -> Result<FeaturePyramid<S>> {
        if image.rank() != 3 || image.shape()[0] != 3 {
            return Err(Error::dim(format!(
                "backbone expects [3,H,W], got {:?}",
                image.shape()
            )));
        }
        let s1 = self
            .stem2
            .forward(&self.stem1.forward(image)?.mish())?
            .mish();
        let s2 = self.stage2.forward(&s1)?.mish();
        let s3 = self.stage3.forward(&s2)?.mish();
        let s4 = self.stage4.forward(&s3)?.mish();
        Ok(FeaturePyramid { s1, s2, s3, s4 })
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.stem1.params(&format!("{prefix}.stem1"), out);
        self.stem2.params(&format!("{prefix}.stem2"), out);
        self.stage2.params(&format!("{prefix}.stage2"), out);
        self.stage3.params(&format!("{prefix}.stage3"), out);
        self.stage4.params(&format!("{prefix}.stage4"), out);
    }
}

/// The three 2D heads over the aggregated map: class heatmap (sigmoid),
/// center offsets, and 2D sizes, each conv3×3 → ReLU → conv1×1.
pub struct Heads2d<S: Scalar> {
    heat_conv: ConvLayer<S>,
    heat_out: ConvLayer<S>,
    off_conv: ConvLayer<S>,
    off_out: ConvLayer<S>,
    size_conv: ConvLayer<S>,
    size_out: ConvLayer<S>,
}

/// Sigmoid bias prior so the initial heatmap sits near probability 0.1.
pub const HEATMAP_PRIOR_BIAS: f64 = -2.19;

impl<S: Scalar> Heads2d<S> {
    pub fn new(channels: usize, num_classes: usize, rng: &mut Rng) -> Self {
        let mut heat_out = ConvLayer::new(channels, num_classes, (1, 1), (1, 1), (0, 0), rng);
        // small weights plus the prior bias keep initial heatmaps near 0.1
        heat_out.w = Tensor::rand_uniform(&[num_classes, channels, 1, 1], -0.01, 0.01, rng)
            .requiring_grad();
        heat_out.b =
            Tensor::full(&[num_classes], S::from_f64(HEATMAP_PRIOR_BIAS)).requiring_grad();
        Heads2d {
            heat_conv: ConvLayer::new(channels, channels, (3, 3), (1, 1), (1, 1), rng),
            heat_out,
            off_conv: ConvLayer::new(channels, channels, (3, 3), (1, 1), (1, 1), rng),
            off_out: ConvLayer::new(channels, 2, (1, 1), (1, 1), (0, 0), rng),
            size_conv: ConvLayer::new(channels, channels, (3, 3), (1, 1), (1, 1), rng),
            size_out: ConvLayer::new(channels, 2, (1, 1), (1, 1), (0, 0), rng),
        }
    }

    pub fn forward(&self, f: &Tensor<S>) -> Result<Heads2dOut<S>> {
        let head = |conv: &ConvLayer<S>, out: &ConvLayer<S>| -> Result<Tensor<S>> {
            out.forward(&conv.forward(f)?.relu())
        };
        Ok(Heads2dOut {
            heatmap: head(&self.heat_conv, &self.heat_out)?.sigmoid(),
            o2d: head(&self.off_conv, &self.off_out)?,
            s2d: head(&self.size_conv, &self.size_out)?,
        })
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.heat_conv.params(&format!("{prefix}.heat_conv"), out);
        self.heat_out.params(&format!("{prefix}.heat_out"), out);
        self.off_conv.params(&format!("{prefix}.off_conv"), out);
        self.off_out.params(&format!("{prefix}.off_out"), out);
        self.size_conv.params(&format!("{prefix}.size_conv"), out);
        self.size_out.params(&format!("{prefix}.size_out"), out);
    }
}

pub struct Heads2dOut<S: Scalar> {
    /// `[classes, H/4, W/4]`, already sigmoid-activated.
    pub heatmap: Tensor<S>,
    /// `[2, H/4, W/4]` fractional center offsets (x, y).
    pub o2d: Tensor<S>,
    /// `[2, H/4, W/4]` box sizes in stride-4 cells (w, h).
    pub s2d: Tensor<S>,
}

/// One decoded 2D candidate (full-resolution pixels).
#[derive(Debug, Clone)]
pub struct Candidate2d {
    pub class_id: usize,
    pub score: f64,
    pub center: (f64, f64),
    pub size: (f64, f64),
    pub cell: (usize, usize),
}

/// 3×3 local-maximum suppression, top-K across classes, threshold filter;
/// centers are `(peak + offset)·stride`, sizes come from the size map.
pub fn decode_heatmap<S: Scalar>(
    out: &Heads2dOut<S>,
    top_k: usize,
    score_threshold: f64,
) -> Vec<Candidate2d> {
    let shape = out.heatmap.shape();
    let (classes, h, w) = (shape[0], shape[1], shape[2]);
    let heat = out.heatmap.data();
    let off = out.o2d.data();
    let size = out.s2d.data();
    let mut picks = Vec::new();
    for (score, c, y, x) in suppressed_peaks(&heat, classes, h, w) {
        if picks.len() >= top_k {
            break;
        }
        if score <= score_threshold {
            break; // peaks are sorted best-first
        }
        let ox = off[y * w + x].as_f64();
        let oy = off[(h + y) * w + x].as_f64();
        let sw = size[y * w + x].as_f64();
        let sh = size[(h + y) * w + x].as_f64();
        picks.push(Candidate2d {
            class_id: c,
            score,
            center: ((x as f64 + ox) * 4.0, (y as f64 + oy) * 4.0),
            size: (sw * 4.0, sh * 4.0),
            cell: (y, x),
        });
    }
    picks
}

/// The full detector.
pub struct Detector<S: Scalar> {
    pub cfg: DetectorConfig,
    pub backbone: Backbone<S>,
    pub ehfam: Ehfam<S>,
    pub heads2d: Heads2d<S>,
    pub asrh: Asrh<S>,
}

impl<S: Scalar> Detector<S> {
    pub fn new(cfg: DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::seed_from(cfg.seed);
        Ok(Detector {
            backbone: Backbone::new(cfg.channels, &mut rng),
            ehfam: Ehfam::new(cfg.ehfam(), &mut rng)?,
            heads2d: Heads2d::new(cfg.channels, cfg.num_classes, &mut rng),
            asrh: Asrh::new(
                cfg.channels,
                (cfg.input_w as f64, cfg.input_h as f64),
                &mut rng,
            ),
            cfg,
        })
    }

    pub fn params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.backbone.params("backbone", &mut out);
        self.ehfam.params("ehfam", &mut out);
        self.heads2d.params("heads2d", &mut out);
        self.asrh.params("asrh", &mut out);
        out
    }

    /// Backbone + aggregation + 2D heads.
    pub fn forward_maps(&self, image: &Tensor<S>) -> Result<(Tensor<S>, Heads2dOut<S>)> {
        let pyramid = self.backbone.forward(image)?;
        let f = self.ehfam.aggregate(&pyramid)?;
        let heads = self.heads2d.forward(&f)?;
        Ok((f, heads))
    }

    /// 3D head over RoIs taken from decoded 2D candidates.
    pub fn forward_rois(
        &self,
        f: &Tensor<S>,
        candidates: &[Candidate2d],
    ) -> Result<(RoiBatch<S>, Head3dOutput<S>)> {
        let boxes: Vec<RoiRect> = candidates
            .iter()
            .map(|c| RoiRect {
                x0: (c.center.0 - c.size.0 / 2.0) / 4.0,
                y0: (c.center.1 - c.size.1 / 2.0) / 4.0,
                x1: (c.center.0 + c.size.0 / 2.0) / 4.0,
                y1: (c.center.1 + c.size.1 / 2.0) / 4.0,
            })
            .collect();
        let roi = RoiBatch::from_feature_map(f, &boxes, 4)?;
        let head = self.asrh.forward(&roi)?;
        Ok((roi, head))
    }

    /// Full pipeline on one image.
    pub fn forward_full(&self, image: &Tensor<S>, calib: &CalibRecord) -> Result<Vec<Detection>> {
        calib.validate()?;
        let (f, heads) = self.forward_maps(image)?;
        let candidates: Vec<Candidate2d> =
            decode_heatmap(&heads, self.cfg.top_k, self.cfg.score_threshold)
                .into_iter()
                .filter(|c| c.size.0 > 1e-3 && c.size.1 > 1e-3)
                .collect();
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        let (_, head) = self.forward_rois(&f, &candidates)?;

        let s3d = head.s3d.data();
        let o3d = head.o3d.data();
        let theta = head.theta.data();
        let depth = head.aggregated_depth()?;
        let log_sigma = head.aggregated_log_sigma()?;
        let depth = depth.data();
        let log_sigma = log_sigma.data();

        let mut dets = Vec::with_capacity(candidates.len());
        for (i, cand) in candidates.iter().enumerate() {
            let dims_h = s3d[i * 3].as_f64().max(0.01);
            let dims_w = s3d[i * 3 + 1].as_f64().max(0.01);
            let dims_l = s3d[i * 3 + 2].as_f64().max(0.01);
            let u3 = cand.center.0 + o3d[i * 2].as_f64() * 4.0;
            let v3 = cand.center.1 + o3d[i * 2 + 1].as_f64() * 4.0;
            let z = depth[i].as_f64();
            let (x, y_center, z) = calib.unproject(u3, v3, z);
            let alpha = decode_alpha_row(&theta[i * 24..(i + 1) * 24]);
            let ry = wrap_to_pi(alpha + x.atan2(z));
            let sigma = log_sigma[i].as_f64().exp();
            let score = (cand.score * (-sigma).exp()).clamp(0.0, 1.0);
            let det = Detection {
                class_id: cand.class_id,
                score,
                box2d: [
                    (cand.center.0 - cand.size.0 / 2.0).max(0.0),
                    (cand.center.1 - cand.size.1 / 2.0).max(0.0),
                    (cand.center.0 + cand.size.0 / 2.0).min(self.cfg.input_w as f64),
                    (cand.center.1 + cand.size.1 / 2.0).min(self.cfg.input_h as f64),
                ],
                box3d: Box3D {
                    x,
                    y: y_center + dims_h / 2.0,
                    z,
                    h: dims_h,
                    w: dims_w,
                    l: dims_l,
                    ry,
                },
                alpha,
            };
            det.validate()?;
            dets.push(det);
        }
        Ok(dets)
    }
}

/// Training targets derived from KITTI labels for one image.
pub fn build_training_targets<S: Scalar>(
    labels: &[LabelRecord],
    calib: &CalibRecord,
    cfg: &DetectorConfig,
) -> Result<(HeatmapTarget<S>, Vec<InstanceTarget>, Vec<RoiRect>)> {
    let (h4, w4) = (cfg.input_h / 4, cfg.input_w / 4);
    let mut heat_instances = Vec::new();
    let mut targets = Vec::new();
    let mut rois = Vec::new();
    for rec in labels {
        let Some(class_id) = cfg.class_id(&rec.kind) else {
            continue;
        };
        let cx = (rec.bbox[0] + rec.bbox[2]) / 2.0;
        let cy = (rec.bbox[1] + rec.bbox[3]) / 2.0;
        let bw = rec.bbox[2] - rec.bbox[0];
        let bh = rec.bbox[3] - rec.bbox[1];
        if bw <= 0.0 || bh <= 0.0 {
            return Err(Error::contract("degenerate 2D box in labels"));
        }
        let cell_x = ((cx / 4.0).floor() as usize).min(w4 - 1);
        let cell_y = ((cy / 4.0).floor() as usize).min(h4 - 1);
        heat_instances.push(HeatInstance {
            class_id,
            center: (cx / 4.0, cy / 4.0),
            size: (bw / 4.0, bh / 4.0),
        });
        // projected 3D center (the cuboid center, half a height above loc)
        let (u3, v3) = calib.project(rec.loc[0], rec.loc[1] - rec.dims[0] / 2.0, rec.loc[2]);
        targets.push(InstanceTarget {
            class_id,
            cell: (cell_y, cell_x),
            o2d: [cx / 4.0 - cell_x as f64, cy / 4.0 - cell_y as f64],
            s2d: [bw / 4.0, bh / 4.0],
            o3d: [(u3 - cx) / 4.0, (v3 - cy) / 4.0],
            s3d: rec.dims,
            alpha: rec.alpha,
            depth: rec.loc[2],
        });
        rois.push(RoiRect {
            x0: rec.bbox[0] / 4.0,
            y0: rec.bbox[1] / 4.0,
            x1: rec.bbox[2] / 4.0,
            y1: rec.bbox[3] / 4.0,
        });
    }
    let heat = HeatmapTarget::render(cfg.num_classes, h4, w4, &heat_instances)?;
    Ok((heat, targets, rois))
}

/// A rendered synthetic scene with its annotations and calibration.
pub struct SynthScene<S: Scalar> {
    pub image: Tensor<S>,
    pub labels: Vec<LabelRecord>,
    pub calib: CalibRecord,
}

/// Fixed synthetic car dimensions (h, w, l).
pub const SYNTH_CAR_DIMS: [f64; 3] = [1.5, 1.6, 3.9];
/// Ground height of the synthetic camera (bottom face y).
const SYNTH_GROUND_Y: f64 = 1.0;

/// Render axis-colored rectangles whose pixel size follows the pinhole
/// projection of randomized 3D boxes (z sampled in [5,40] m, rejected until
/// the projected 2D box lies inside the image). The fill color encodes the
/// box attributes the appearance must carry at this scale: G is depth/50,
/// B is the observation angle mapped to [0,1].
pub fn synth_scene<S: Scalar>(seed: u64, n_objects: usize, cfg: &DetectorConfig) -> SynthScene<S> {
    assert!(n_objects <= 8, "generator supports at most 8 objects");
    let (h, w) = (cfg.input_h, cfg.input_w);
    // long focal: near/mid objects clear the 25/40 px difficulty cutoffs
    let f = 3.0 * h as f64;
    let calib = CalibRecord::pinhole(f, w as f64 / 2.0, h as f64 / 2.0);
    let mut rng = Rng::seed_from(seed ^ 0x53_43_45_4e);
    let mut image = vec![S::zero(); 3 * h * w];
    let mut labels: Vec<LabelRecord> = Vec::new();

    let [dh, dw, dl] = SYNTH_CAR_DIMS;
    'objects: for _ in 0..n_objects {
        for _attempt in 0..200 {
            let z = rng.uniform::<f64>(5.0, 40.0).as_f64();
            let x = rng.uniform::<f64>(-0.35, 0.35).as_f64() * z * (w as f64) / f;
            let ry = rng.uniform::<f64>(-std::f64::consts::PI, std::f64::consts::PI).as_f64();
            let y_bottom = SYNTH_GROUND_Y + rng.uniform::<f64>(-0.05, 0.05).as_f64();

            // project all 8 corners for the exact 2D box
            let (c, s) = (ry.cos(), ry.sin());
            let mut min_u = f64::INFINITY;
            let mut max_u = f64::NEG_INFINITY;
            let mut min_v = f64::INFINITY;
            let mut max_v = f64::NEG_INFINITY;
            for &dx in &[-dl / 2.0, dl / 2.0] {
                for &dy in &[0.0, -dh] {
                    for &dz in &[-dw / 2.0, dw / 2.0] {
                        let px = x + c * dx + s * dz;
                        let pz = z - s * dx + c * dz;
                        let py = y_bottom + dy;
                        let (u, v) = calib.project(px, py, pz);
                        min_u = min_u.min(u);
                        max_u = max_u.max(u);
                        min_v = min_v.min(v);
                        max_v = max_v.max(v);
                    }
                }
            }
            let margin = 2.0;
            if min_u < margin
                || min_v < margin
                || max_u > w as f64 - margin
                || max_v > h as f64 - margin
                || (max_u - min_u) < 4.0
                || (max_v - min_v) < 4.0
            {
                continue;
            }
            // keep rectangles apart so the toy task stays unambiguous
            let overlaps = labels.iter().any(|l| {
                let ix = (max_u.min(l.bbox[2]) - min_u.max(l.bbox[0])).max(0.0);
                let iy = (max_v.min(l.bbox[3]) - min_v.max(l.bbox[1])).max(0.0);
                let inter = ix * iy;
                let a = (max_u - min_u) * (max_v - min_v);
                let b = (l.bbox[2] - l.bbox[0]) * (l.bbox[3] - l.bbox[1]);
                inter / (a + b - inter) > 0.05
            });
            if overlaps {
                continue;
            }

            let alpha = wrap_to_pi(ry - x.atan2(z));
            // appearance carries what geometry alone cannot at this scale:
            // depth in G, observation angle as a wrap-free sin/cos pair
            let color = [
                S::from_f64(0.55 + 0.45 * alpha.sin()),
                S::from_f64(z / 50.0),
                S::from_f64(0.55 + 0.45 * alpha.cos()),
            ];
            for v in min_v.floor() as usize..=(max_v.ceil() as usize).min(h - 1) {
                for u in min_u.floor() as usize..=(max_u.ceil() as usize).min(w - 1) {
                    for ch in 0..3 {
                        image[(ch * h + v) * w + u] = color[ch];
                    }
                }
            }
            labels.push(LabelRecord {
                kind: "Car".to_string(),
                truncated: 0.0,
                occluded: 0,
                alpha,
                bbox: [min_u, min_v, max_u, max_v],
                dims: [dh, dw, dl],
                loc: [x, y_bottom, z],
                ry,
                score: None,
            });
            continue 'objects;
        }
        // crowded frame: give up on this object rather than overlap
        break;
    }

    SynthScene {
        image: Tensor::from_vec(&[3, h, w], image).expect("image buffer matches shape"),
        labels,
        calib,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny_cfg() -> DetectorConfig {
        DetectorConfig {
            input_h: 64,
            input_w: 96,
            channels: 8,
            attention_heads: 2,
            attention_value_dim: 8,
            ..DetectorConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(DetectorConfig::default().validate().is_ok());
        assert!(DetectorConfig {
            input_h: 100,
            ..DetectorConfig::default()
        }
        .validate()
        .is_err());
        assert!(DetectorConfig {
            input_h: 32,
            ..DetectorConfig::default()
        }
        .validate()
        .is_err());
        assert!(DetectorConfig {
            top_k: 0,
            ..DetectorConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn backbone_strides_are_4_8_16_32() {
        let cfg = tiny_cfg();
        let det = Detector::<f32>::new(cfg.clone()).unwrap();
        let mut rng = Rng::seed_from(1);
        let img = Tensor::rand_uniform(&[3, 64, 96], 0.0, 1.0, &mut rng);
        let p = det.backbone.forward(&img).unwrap();
        assert_eq!(p.s1.shape(), &[8, 16, 24]);
        assert_eq!(p.s2.shape(), &[8, 8, 12]);
        assert_eq!(p.s3.shape(), &[8, 4, 6]);
        assert_eq!(p.s4.shape(), &[8, 2, 3]);
        assert!(p.s1.all_finite() && p.s4.all_finite());
    }

    #[test]
    fn backbone_zero_image_zero_bias_gives_zero_pyramid() {
        let det = Detector::<f64>::new(tiny_cfg()).unwrap();
        let img = Tensor::zeros(&[3, 64, 96]);
        let p = det.backbone.forward(&img).unwrap();
        for level in [&p.s1, &p.s2, &p.s3, &p.s4] {
            assert!(level.to_vec().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backbone_rejects_bad_extents() {
        let det = Detector::<f64>::new(tiny_cfg()).unwrap();
        assert!(det.backbone.forward(&Tensor::zeros(&[1, 64, 96])).is_err());
    }

    #[test]
    fn heads_have_contract_channel_counts_and_ranges() {
        let det = Detector::<f64>::new(tiny_cfg()).unwrap();
        let mut rng = Rng::seed_from(2);
        let f = Tensor::rand_uniform(&[8, 16, 24], -1.0, 1.0, &mut rng);
        let out = det.heads2d.forward(&f).unwrap();
        assert_eq!(out.heatmap.shape(), &[3, 16, 24]);
        assert_eq!(out.o2d.shape(), &[2, 16, 24]);
        assert_eq!(out.s2d.shape(), &[2, 16, 24]);
        assert!(out.heatmap.to_vec().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn initial_heatmap_mean_is_near_prior() {
        let det = Detector::<f64>::new(tiny_cfg()).unwrap();
        let mut rng = Rng::seed_from(3);
        let f = Tensor::rand_uniform(&[8, 16, 24], -1.0, 1.0, &mut rng);
        let out = det.heads2d.forward(&f).unwrap();
        let d = out.heatmap.data();
        let mean: f64 = d.iter().sum::<f64>() / d.len() as f64;
        assert!((mean - 0.1).abs() <= 0.05, "prior mean off: {mean}");
    }

    fn bump_maps(h: usize, w: usize) -> Heads2dOut<f64> {
        // one clean Gaussian bump at (5, 7) with offset (0.3, 0.6), size (3, 2) cells
        let mut heat = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - 5.0).powi(2) + (x as f64 - 7.0).powi(2);
                heat[y * w + x] = (-d2 / 4.0).exp() * 0.9;
            }
        }
        let mut o2d = vec![0.0; 2 * h * w];
        o2d[5 * w + 7] = 0.3;
        o2d[(h + 5) * w + 7] = 0.6;
        let mut s2d = vec![0.0; 2 * h * w];
        s2d[5 * w + 7] = 3.0;
        s2d[(h + 5) * w + 7] = 2.0;
        Heads2dOut {
            heatmap: Tensor::from_vec(&[1, h, w], heat).unwrap(),
            o2d: Tensor::from_vec(&[2, h, w], o2d).unwrap(),
            s2d: Tensor::from_vec(&[2, h, w], s2d).unwrap(),
        }
    }

    #[test]
    fn decode_single_bump_yields_one_candidate_at_mode() {
        let out = bump_maps(16, 24);
        let picks = decode_heatmap(&out, 50, 0.25);
        assert_eq!(picks.len(), 1);
        let c = &picks[0];
        assert_eq!(c.cell, (5, 7));
        assert_relative_eq!(c.center.0, (7.0 + 0.3) * 4.0);
        assert_relative_eq!(c.center.1, (5.0 + 0.6) * 4.0);
        assert_relative_eq!(c.size.0, 12.0);
        assert_relative_eq!(c.size.1, 8.0);
    }

    #[test]
    fn decode_zero_heatmap_with_threshold_yields_nothing() {
        let zero = Heads2dOut {
            heatmap: Tensor::<f64>::zeros(&[1, 8, 8]),
            o2d: Tensor::zeros(&[2, 8, 8]),
            s2d: Tensor::zeros(&[2, 8, 8]),
        };
        assert!(decode_heatmap(&zero, 50, 0.1).is_empty());
    }

    #[test]
    fn decode_k1_returns_global_best() {
        let mut heat = vec![0.0; 64];
        heat[10] = 0.8;
        heat[50] = 0.95;
        let out = Heads2dOut {
            heatmap: Tensor::<f64>::from_vec(&[1, 8, 8], heat).unwrap(),
            o2d: Tensor::zeros(&[2, 8, 8]),
            s2d: Tensor::ones(&[2, 8, 8]),
        };
        let picks = decode_heatmap(&out, 1, 0.1);
        assert_eq!(picks.len(), 1);
        assert_relative_eq!(picks[0].score, 0.95);
    }

    #[test]
    fn decode_roundtrip_from_rendered_targets() {
        // render GT gaussians with exact offsets/sizes, then decode back
        let cfg = tiny_cfg();
        let mut rng = Rng::seed_from(5);
        let mut instances = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..3 {
            let cx = rng.uniform::<f64>(3.0, 20.0);
            let cy = rng.uniform::<f64>(3.0, 13.0);
            let (bw, bh) = (rng.uniform::<f64>(2.0, 5.0), rng.uniform::<f64>(2.0, 4.0));
            if truth
                .iter()
                .any(|&(px, py, _, _): &(f64, f64, f64, f64)| {
                    (px - cx).abs() < 4.0 && (py - cy).abs() < 4.0
                })
            {
                continue;
            }
            instances.push(HeatInstance {
                class_id: 0,
                center: (cx, cy),
                size: (bw, bh),
            });
            truth.push((cx, cy, bw, bh));
        }
        let target =
            HeatmapTarget::<f64>::render(1, cfg.input_h / 4, cfg.input_w / 4, &instances).unwrap();
        let (h4, w4) = (cfg.input_h / 4, cfg.input_w / 4);
        let mut o2d = vec![0.0; 2 * h4 * w4];
        let mut s2d = vec![0.0; 2 * h4 * w4];
        for &(cx, cy, bw, bh) in &truth {
            let (ix, iy) = (cx.floor() as usize, cy.floor() as usize);
            o2d[iy * w4 + ix] = cx - ix as f64;
            o2d[(h4 + iy) * w4 + ix] = cy - iy as f64;
            s2d[iy * w4 + ix] = bw;
            s2d[(h4 + iy) * w4 + ix] = bh;
        }
        let out = Heads2dOut {
            heatmap: target.gaussians.clone(),
            o2d: Tensor::from_vec(&[2, h4, w4], o2d).unwrap(),
            s2d: Tensor::from_vec(&[2, h4, w4], s2d).unwrap(),
        };
        let picks = decode_heatmap(&out, 50, 0.5);
        assert_eq!(picks.len(), truth.len());
        for &(cx, cy, bw, bh) in &truth {
            let hit = picks.iter().find(|p| {
                (p.center.0 / 4.0 - cx).abs() <= 1.0 && (p.center.1 / 4.0 - cy).abs() <= 1.0
            });
            let hit = hit.expect("every GT center must decode back");
            assert!((hit.center.0 / 4.0 - cx).abs() < 1e-4);
            assert!((hit.center.1 / 4.0 - cy).abs() < 1e-4);
            assert!((hit.size.0 / 4.0 - bw).abs() < 1e-4);
            assert!((hit.size.1 / 4.0 - bh).abs() < 1e-4);
        }
    }

    #[test]
    fn synth_scene_boxes_inside_image_and_deterministic() {
        let cfg = DetectorConfig::default();
        let a = synth_scene::<f32>(7, 3, &cfg);
        let b = synth_scene::<f32>(7, 3, &cfg);
        assert_eq!(a.image.to_vec(), b.image.to_vec());
        assert_eq!(a.labels.len(), b.labels.len());
        assert!(!a.labels.is_empty());
        for l in &a.labels {
            assert!(l.bbox[0] >= 0.0 && l.bbox[1] >= 0.0);
            assert!(l.bbox[2] <= cfg.input_w as f64);
            assert!(l.bbox[3] <= cfg.input_h as f64);
            assert!(l.loc[2] >= 5.0 && l.loc[2] <= 40.0);
        }
    }

    #[test]
    fn synth_nearer_objects_project_larger() {
        let cfg = DetectorConfig::default();
        // gather many scenes to compare areas across depths
        let mut samples: Vec<(f64, f64)> = Vec::new();
        for seed in 0..12 {
            for l in synth_scene::<f32>(seed, 2, &cfg).labels {
                let area = (l.bbox[2] - l.bbox[0]) * (l.bbox[3] - l.bbox[1]);
                samples.push((l.loc[2], area));
            }
        }
        samples.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        // same fixed dims everywhere: area must decrease with depth, allow
        // yaw-induced wiggle by comparing distant quantiles
        let near: f64 = samples[..3].iter().map(|s| s.1).sum::<f64>() / 3.0;
        let far: f64 = samples[samples.len() - 3..].iter().map(|s| s.1).sum::<f64>() / 3.0;
        assert!(near > far, "nearer objects must cover more pixels");
    }

    #[test]
    fn synth_labels_roundtrip_through_kitti_io() {
        let cfg = DetectorConfig::default();
        let scene = synth_scene::<f32>(3, 3, &cfg);
        let text = crate::kitti::write_label_file(&scene.labels);
        let back = crate::kitti::parse_label_file(&text).unwrap();
        assert_eq!(back, scene.labels);
    }

    #[test]
    fn build_targets_are_consistent_with_projection() {
        let cfg = DetectorConfig::default();
        let scene = synth_scene::<f64>(11, 2, &cfg);
        let (heat, targets, rois) =
            build_training_targets::<f64>(&scene.labels, &scene.calib, &cfg).unwrap();
        assert_eq!(targets.len(), scene.labels.len());
        assert_eq!(rois.len(), targets.len());
        assert_eq!(heat.positives.len(), targets.len());
        for (t, l) in targets.iter().zip(&scene.labels) {
            assert!(t.o2d[0] >= 0.0 && t.o2d[0] < 1.0);
            assert!(t.o2d[1] >= 0.0 && t.o2d[1] < 1.0);
            assert_relative_eq!(t.depth, l.loc[2]);
            // o3d is small: projected 3D center sits near the 2D box center
            assert!(t.o3d[0].abs() < 4.0 && t.o3d[1].abs() < 4.0);
        }
    }

    #[test]
    fn forward_full_on_untrained_weights_is_mostly_empty_but_valid() {
        let det = Detector::<f32>::new(tiny_cfg()).unwrap();
        let scene = synth_scene::<f32>(1, 2, &det.cfg);
        let dets = det.forward_full(&scene.image, &scene.calib).unwrap();
        for d in &dets {
            d.validate().unwrap();
        }
        // prior bias keeps raw scores near 0.1, under the 0.25 threshold
        assert!(dets.len() <= 5);
    }
}
