//! Rotated-box geometry and the AP|R40 evaluation protocol: BEV polygon
//! IoU via half-plane clipping, 3D IoU with vertical overlap, greedy
//! score-ordered matching with ignore handling, and 40-point interpolated
//! average precision.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kitti::{classify_difficulty, Difficulty, LabelRecord};

/// Bottom-center 3D box in the camera frame (y grows downward; the box
/// spans `[y−h, y]` vertically).
#[derive(Debug, Clone, Copy)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub ry: f64,
}

impl Box3D {
    pub fn validate(&self) -> Result<()> {
        if self.h <= 0.0 || self.w <= 0.0 || self.l <= 0.0 {
            return Err(Error::contract(format!(
                "box dimensions must be positive: h={} w={} l={}",
                self.h, self.w, self.l
            )));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.h * self.w * self.l
    }

    pub fn from_label(rec: &LabelRecord) -> Self {
        Box3D {
            x: rec.loc[0],
            y: rec.loc[1],
            z: rec.loc[2],
            h: rec.dims[0],
            w: rec.dims[1],
            l: rec.dims[2],
            ry: rec.ry,
        }
    }
}

/// Ground-plane footprint: an l×w rectangle rotated by ry about (x, z),
/// counter-clockwise vertex order.
pub fn bev_polygon(b: &Box3D) -> [[f64; 2]; 4] {
    let (c, s) = (b.ry.cos(), b.ry.sin());
    // length extends along the heading (camera x at ry=0), width across
    let corners = [
        (b.l / 2.0, b.w / 2.0),
        (-b.l / 2.0, b.w / 2.0),
        (-b.l / 2.0, -b.w / 2.0),
        (b.l / 2.0, -b.w / 2.0),
    ];
    let mut out = [[0.0; 2]; 4];
    for (i, (dx, dz)) in corners.into_iter().enumerate() {
        out[i] = [b.x + c * dx + s * dz, b.z - s * dx + c * dz];
    }
    out
}

/// Signed shoelace area (positive for counter-clockwise rings).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let j = (i + 1) % poly.len();
        acc += poly[i][0] * poly[j][1] - poly[j][0] * poly[i][1];
    }
    acc / 2.0
}

/// Sutherland–Hodgman clip of a convex subject polygon against a convex
/// clip polygon (both counter-clockwise).
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut poly: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if poly.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let inside = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0;
        let cross = |p: [f64; 2], q: [f64; 2]| -> [f64; 2] {
            let dc = [b[0] - a[0], b[1] - a[1]];
            let dp = [q[0] - p[0], q[1] - p[1]];
            let denom = dc[0] * dp[1] - dc[1] * dp[0];
            let t = ((a[0] - p[0]) * dc[1] - (a[1] - p[1]) * dc[0]) / -denom;
            [p[0] + t * dp[0], p[1] + t * dp[1]]
        };
        let input = std::mem::take(&mut poly);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            if inside(cur) {
                if !inside(prev) {
                    poly.push(cross(prev, cur));
                }
                poly.push(cur);
            } else if inside(prev) {
                poly.push(cross(prev, cur));
            }
        }
    }
    poly
}

/// Area of the intersection of two convex counter-clockwise polygons.
/// Degenerate results (area < 1e-12) count as empty.
pub fn intersection_area(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let inter = clip_convex(a, b);
    let area = polygon_area(&inter).abs();
    if area < 1e-12 {
        0.0
    } else {
        area
    }
}

/// Bird's-eye-view IoU of two boxes.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let pa = bev_polygon(a);
    let pb = bev_polygon(b);
    let inter = intersection_area(&pa, &pb);
    let area_a = polygon_area(&pa).abs();
    let area_b = polygon_area(&pb).abs();
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Full 3D IoU: BEV intersection times vertical overlap of `[y−h, y]`.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let pa = bev_polygon(a);
    let pb = bev_polygon(b);
    let inter_bev = intersection_area(&pa, &pb);
    let y_overlap = (a.y.min(b.y) - (a.y - a.h).max(b.y - b.h)).max(0.0);
    let inter = inter_bev * y_overlap;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Ap3d,
    ApBev,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Ap3d => "ap3d",
            Metric::ApBev => "apbev",
        }
    }

    fn overlap(&self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            Metric::Ap3d => iou_3d(a, b),
            Metric::ApBev => bev_iou(a, b),
        }
    }
}

/// Per-class IoU thresholds and the evaluated classes.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub thresholds: Vec<(String, f64)>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: vec![
                ("Car".to_string(), 0.7),
                ("Pedestrian".to_string(), 0.5),
                ("Cyclist".to_string(), 0.5),
            ],
        }
    }
}

impl EvalConfig {
    pub fn threshold(&self, class: &str) -> Result<f64> {
        self.thresholds
            .iter()
            .find(|(c, _)| c == class)
            .map(|(_, t)| *t)
            .ok_or_else(|| Error::config(format!("class {class:?} not in evaluation config")))
    }

    pub fn validate(&self) -> Result<()> {
        for (c, t) in &self.thresholds {
            if !(0.0 < *t && *t <= 1.0) {
                return Err(Error::config(format!(
                    "IoU threshold for {c:?} must lie in (0,1], got {t}"
                )));
            }
        }
        Ok(())
    }
}

/// One frame's annotations and detections, as parsed label records.
#[derive(Debug, Clone, Default)]
pub struct EvalFrame {
    pub gts: Vec<LabelRecord>,
    pub dets: Vec<LabelRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DetOutcome {
    TruePositive,
    FalsePositive,
    Ignored,
}

/// Match result of one frame: scored detections in detection order plus the
/// number of counted ground truths.
#[derive(Debug, Clone, Default)]
pub struct FrameMatch {
    pub scored: Vec<(f64, bool)>, // (score, is_tp); ignored dets are absent
    pub valid_gt: usize,
}

/// Greedy score-ordered matching of one frame for one class/difficulty.
///
/// Ground truths of the class that are harder than the evaluated difficulty
/// are ignored (matches to them are neither TP nor FP, and they are not
/// counted as recallable). Detections covering DontCare regions by more
/// than half their 2D area are likewise dropped.
pub fn match_frame(
    frame: &EvalFrame,
    class: &str,
    difficulty: Difficulty,
    cfg: &EvalConfig,
    metric: Metric,
) -> Result<FrameMatch> {
    let thr = cfg.threshold(class)?;

    struct Gt {
        boxx: Box3D,
        ignored: bool,
        matched: bool,
    }
    let mut gts: Vec<Gt> = Vec::new();
    let mut dontcare: Vec<[f64; 4]> = Vec::new();
    for rec in &frame.gts {
        if rec.is_dontcare() {
            dontcare.push(rec.bbox);
            continue;
        }
        if rec.kind != class {
            continue;
        }
        gts.push(Gt {
            boxx: Box3D::from_label(rec),
            ignored: classify_difficulty(rec) > difficulty,
            matched: false,
        });
    }

    let mut det_idx: Vec<usize> = (0..frame.dets.len())
        .filter(|&i| frame.dets[i].kind == class)
        .collect();
    det_idx.sort_by(|&a, &b| {
        let sa = frame.dets[a].score.unwrap_or(0.0);
        let sb = frame.dets[b].score.unwrap_or(0.0);
        sb.partial_cmp(&sa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut outcomes: Vec<(usize, f64, DetOutcome)> = Vec::new();
    for &di in &det_idx {
        let det = &frame.dets[di];
        // labels replayed as detections count as full-confidence hits
        let score = det.score.unwrap_or(1.0);
        let dbox = Box3D::from_label(det);

        let mut best: Option<(usize, f64)> = None;
        let mut best_ignored: Option<f64> = None;
        for (gi, gt) in gts.iter().enumerate() {
            let ov = metric.overlap(&dbox, &gt.boxx);
            if ov < thr {
                continue;
            }
            if gt.ignored {
                if best_ignored.map_or(true, |b| ov > b) {
                    best_ignored = Some(ov);
                }
            } else if !gt.matched && best.map_or(true, |(_, b)| ov > b) {
                best = Some((gi, ov));
            }
        }
        let outcome = if let Some((gi, _)) = best {
            gts[gi].matched = true;
            DetOutcome::TruePositive
        } else if best_ignored.is_some() {
            DetOutcome::Ignored
        } else if overlaps_dontcare(det.bbox, &dontcare) {
            DetOutcome::Ignored
        } else {
            DetOutcome::FalsePositive
        };
        outcomes.push((di, score, outcome));
    }

    // restore original detection order for deterministic accumulation
    outcomes.sort_by_key(|&(di, _, _)| di);
    Ok(FrameMatch {
        scored: outcomes
            .into_iter()
            .filter(|(_, _, o)| *o != DetOutcome::Ignored)
            .map(|(_, s, o)| (s, o == DetOutcome::TruePositive))
            .collect(),
        valid_gt: gts.iter().filter(|g| !g.ignored).count(),
    })
}

/// 2D intersection-over-detection-area > 0.5 against any DontCare region.
fn overlaps_dontcare(bbox: [f64; 4], dontcare: &[[f64; 4]]) -> bool {
    let area = ((bbox[2] - bbox[0]) * (bbox[3] - bbox[1])).max(1e-12);
    for dc in dontcare {
        let ix = (bbox[2].min(dc[2]) - bbox[0].max(dc[0])).max(0.0);
        let iy = (bbox[3].min(dc[3]) - bbox[1].max(dc[1])).max(0.0);
        if ix * iy / area > 0.5 {
            return true;
        }
    }
    false
}

/// Precision/recall curve accumulated over frames.
#[derive(Debug, Clone)]
pub struct PrCurve {
    /// (recall, precision) after each detection in global score order.
    pub points: Vec<(f64, f64)>,
    pub total_gt: usize,
}

/// Merge per-frame matches (in frame order) into one PR curve. Ties in
/// score break by (frame, detection) index, so accumulation is
/// order-independent.
pub fn accumulate_curve(frames: &[FrameMatch]) -> PrCurve {
    let total_gt: usize = frames.iter().map(|f| f.valid_gt).sum();
    let mut entries: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (fi, f) in frames.iter().enumerate() {
        for (di, &(score, tp)) in f.scored.iter().enumerate() {
            entries.push((score, fi, di, tp));
        }
    }
    entries.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points = Vec::with_capacity(entries.len());
    for (_, _, _, is_tp) in entries {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        if total_gt > 0 {
            points.push((
                tp as f64 / total_gt as f64,
                tp as f64 / (tp + fp) as f64,
            ));
        }
    }
    PrCurve { points, total_gt }
}

/// Full matching pipeline over all frames.
pub fn match_and_score(
    frames: &[EvalFrame],
    class: &str,
    difficulty: Difficulty,
    cfg: &EvalConfig,
    metric: Metric,
) -> Result<PrCurve> {
    cfg.validate()?;
    let matches: Vec<FrameMatch> = frames
        .iter()
        .map(|f| match_frame(f, class, difficulty, cfg, metric))
        .collect::<Result<_>>()?;
    Ok(accumulate_curve(&matches))
}

/// AP|R40 as a percentage: mean over the 40 recall positions
/// {1/40, …, 40/40} of the best precision at recall ≥ r. Zero ground
/// truths define an AP of 0.
pub fn average_precision_r40(curve: &PrCurve) -> f64 {
    if curve.total_gt == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 1..=40 {
        let r = i as f64 / 40.0;
        let best = curve
            .points
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0f64, f64::max);
        total += best;
    }
    total / 40.0 * 100.0
}

/// Histogram of true-positive confidence scores per difficulty, using the
/// 3D-IoU > `iou_min` criterion.
pub fn confidence_histogram(
    frames: &[EvalFrame],
    class: &str,
    iou_min: f64,
    bins: usize,
) -> Result<BTreeMap<Difficulty, Vec<usize>>> {
    if bins == 0 {
        return Err(Error::config("histogram needs at least one bin"));
    }
    let cfg = EvalConfig {
        thresholds: vec![(class.to_string(), iou_min)],
    };
    let mut out = BTreeMap::new();
    for difficulty in Difficulty::ALL {
        let mut hist = vec![0usize; bins];
        for frame in frames {
            let m = match_frame(frame, class, difficulty, &cfg, Metric::Ap3d)?;
            for (score, tp) in m.scored {
                if tp {
                    let b = ((score * bins as f64) as usize).min(bins - 1);
                    hist[b] += 1;
                }
            }
        }
        out.insert(difficulty, hist);
    }
    Ok(out)
}

/// Evaluation report: class → difficulty → AP values.
#[derive(Debug, Clone, Serialize)]
pub struct ApEntry {
    pub ap3d: f64,
    pub apbev: f64,
    pub gt_count: usize,
}

pub fn evaluate_all(
    frames: &[EvalFrame],
    cfg: &EvalConfig,
) -> Result<BTreeMap<String, BTreeMap<String, ApEntry>>> {
    let mut report = BTreeMap::new();
    for (class, _) in &cfg.thresholds {
        let mut per_diff = BTreeMap::new();
        for difficulty in Difficulty::ALL {
            let c3d = match_and_score(frames, class, difficulty, cfg, Metric::Ap3d)?;
            let cbev = match_and_score(frames, class, difficulty, cfg, Metric::ApBev)?;
            per_diff.insert(
                difficulty.name().to_string(),
                ApEntry {
                    ap3d: average_precision_r40(&c3d),
                    apbev: average_precision_r40(&cbev),
                    gt_count: c3d.total_gt,
                },
            );
        }
        report.insert(class.clone(), per_diff);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn boxx(x: f64, z: f64, ry: f64) -> Box3D {
        Box3D {
            x,
            y: 1.65,
            z,
            h: 1.5,
            w: 1.6,
            l: 3.9,
            ry,
        }
    }

    #[test]
    fn bev_polygon_axis_aligned() {
        let b = Box3D {
            x: 0.0,
            y: 0.0,
            z: 0.0,
            h: 1.0,
            w: 2.0,
            l: 4.0,
            ry: 0.0,
        };
        let poly = bev_polygon(&b);
        let mut xs: Vec<f64> = poly.iter().map(|p| p[0]).collect();
        let mut zs: Vec<f64> = poly.iter().map(|p| p[1]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_relative_eq!(xs[0], -2.0);
        assert_relative_eq!(xs[3], 2.0);
        assert_relative_eq!(zs[0], -1.0);
        assert_relative_eq!(zs[3], 1.0);
        assert!(polygon_area(&poly) > 0.0, "vertices must be counter-clockwise");
    }

    #[test]
    fn bev_polygon_quarter_turn_swaps_extents() {
        let b = Box3D {
            x: 0.0,
            y: 0.0,
            z: 0.0,
            h: 1.0,
            w: 2.0,
            l: 4.0,
            ry: std::f64::consts::FRAC_PI_2,
        };
        let poly = bev_polygon(&b);
        let max_x = poly.iter().map(|p| p[0].abs()).fold(0.0f64, f64::max);
        let max_z = poly.iter().map(|p| p[1].abs()).fold(0.0f64, f64::max);
        assert_relative_eq!(max_x, 1.0, epsilon = 1e-12);
        assert_relative_eq!(max_z, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn bev_polygon_invariant_under_pi_rotation() {
        let a = bev_polygon(&boxx(3.0, 10.0, 0.7));
        let b = bev_polygon(&boxx(3.0, 10.0, 0.7 + std::f64::consts::PI));
        // same vertex set, possibly reordered
        for va in &a {
            assert!(
                b.iter()
                    .any(|vb| (va[0] - vb[0]).abs() < 1e-9 && (va[1] - vb[1]).abs() < 1e-9),
                "vertex {va:?} missing after π rotation"
            );
        }
    }

    #[test]
    fn identical_boxes_have_unit_iou() {
        let b = boxx(1.0, 15.0, 0.3);
        assert!((bev_iou(&b, &b) - 1.0).abs() <= 1e-9);
        assert!((iou_3d(&b, &b) - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn disjoint_boxes_have_zero_iou() {
        let a = boxx(0.0, 10.0, 0.0);
        let b = boxx(100.0, 10.0, 0.0);
        assert_eq!(bev_iou(&a, &b), 0.0);
        assert_eq!(iou_3d(&a, &b), 0.0);
    }

    #[test]
    fn half_overlapping_unit_squares_give_one_third() {
        let a = Box3D { x: 0.0, y: 0.0, z: 0.0, h: 1.0, w: 1.0, l: 1.0, ry: 0.0 };
        let b = Box3D { x: 0.5, y: 0.0, z: 0.0, h: 1.0, w: 1.0, l: 1.0, ry: 0.0 };
        assert!((bev_iou(&a, &b) - 1.0 / 3.0).abs() <= 1e-6);
    }

    #[test]
    fn same_footprint_half_vertical_overlap_is_one_third() {
        let a = Box3D { x: 0.0, y: 1.0, z: 5.0, h: 1.0, w: 1.0, l: 1.0, ry: 0.0 };
        let b = Box3D { x: 0.0, y: 1.5, z: 5.0, h: 1.0, w: 1.0, l: 1.0, ry: 0.0 };
        assert!((iou_3d(&a, &b) - 1.0 / 3.0).abs() <= 1e-6);
        let c = Box3D { y: 3.0, ..b };
        assert_eq!(iou_3d(&a, &c), 0.0);
    }

    #[test]
    fn iou_is_symmetric_and_bounded() {
        let mut rng = Rng::seed_from(5);
        for _ in 0..1000 {
            let a = boxx(
                rng.uniform::<f64>(-10.0, 10.0),
                rng.uniform::<f64>(5.0, 30.0),
                rng.uniform::<f64>(-3.2, 3.2),
            );
            let b = boxx(
                rng.uniform::<f64>(-10.0, 10.0),
                rng.uniform::<f64>(5.0, 30.0),
                rng.uniform::<f64>(-3.2, 3.2),
            );
            let ab = bev_iou(&a, &b);
            let ba = bev_iou(&b, &a);
            assert!(
                (ab - ba).abs() < 1e-12,
                "bev_iou asymmetric: {ab} vs {ba}"
            );
            assert!((0.0..=1.0).contains(&ab));
            let ab3 = iou_3d(&a, &b);
            assert!((ab3 - iou_3d(&b, &a)).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&ab3));
            assert!((iou_3d(&a, &a) - 1.0).abs() <= 1e-9);
        }
    }

    /// Monte-Carlo rasterization oracle for polygon intersection.
    fn mc_intersection_area(a: &[[f64; 2]; 4], b: &[[f64; 2]; 4], grid: usize) -> f64 {
        let all: Vec<[f64; 2]> = a.iter().chain(b.iter()).cloned().collect();
        let min_x = all.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let max_x = all.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        let min_z = all.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        let max_z = all.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
        let inside = |poly: &[[f64; 2]; 4], p: [f64; 2]| -> bool {
            for i in 0..4 {
                let q = poly[i];
                let r = poly[(i + 1) % 4];
                if (r[0] - q[0]) * (p[1] - q[1]) - (r[1] - q[1]) * (p[0] - q[0]) < 0.0 {
                    return false;
                }
            }
            true
        };
        let mut hits = 0usize;
        for gy in 0..grid {
            for gx in 0..grid {
                let p = [
                    min_x + (gx as f64 + 0.5) / grid as f64 * (max_x - min_x),
                    min_z + (gy as f64 + 0.5) / grid as f64 * (max_z - min_z),
                ];
                if inside(a, p) && inside(b, p) {
                    hits += 1;
                }
            }
        }
        hits as f64 / (grid * grid) as f64 * (max_x - min_x) * (max_z - min_z)
    }

    #[test]
    fn clipping_matches_monte_carlo_rasterization() {
        let mut rng = Rng::seed_from(7);
        let mut checked = 0;
        while checked < 60 {
            let a = boxx(
                rng.uniform::<f64>(-2.0, 2.0),
                rng.uniform::<f64>(8.0, 12.0),
                rng.uniform::<f64>(-3.2, 3.2),
            );
            let b = boxx(
                a.x + rng.uniform::<f64>(-2.0, 2.0),
                a.z + rng.uniform::<f64>(-2.0, 2.0),
                rng.uniform::<f64>(-3.2, 3.2),
            );
            if bev_iou(&a, &b) <= 0.05 {
                continue;
            }
            checked += 1;
            let pa = bev_polygon(&a);
            let pb = bev_polygon(&b);
            let exact = intersection_area(&pa, &pb);
            let mc = mc_intersection_area(&pa, &pb, 400);
            let rel = (exact - mc).abs() / exact.max(1e-9);
            assert!(rel <= 0.02, "clipping vs rasterization: {exact} vs {mc}");
        }
    }

    fn frame_with(gts: Vec<LabelRecord>, dets: Vec<LabelRecord>) -> EvalFrame {
        EvalFrame { gts, dets }
    }

    fn car(x: f64, z: f64, ry: f64, height_px: f64, score: Option<f64>) -> LabelRecord {
        LabelRecord {
            kind: "Car".into(),
            truncated: 0.0,
            occluded: 0,
            alpha: 0.0,
            bbox: [100.0, 100.0, 180.0, 100.0 + height_px],
            dims: [1.5, 1.6, 3.9],
            loc: [x, 1.65, z],
            ry,
            score,
        }
    }

    #[test]
    fn perfect_match_is_full_precision_recall() {
        let frames = [frame_with(
            vec![car(0.0, 10.0, 0.1, 50.0, None)],
            vec![car(0.0, 10.0, 0.1, 50.0, Some(0.9))],
        )];
        let curve = match_and_score(
            &frames,
            "Car",
            Difficulty::Easy,
            &EvalConfig::default(),
            Metric::Ap3d,
        )
        .unwrap();
        assert_eq!(curve.total_gt, 1);
        assert_eq!(curve.points, vec![(1.0, 1.0)]);
        assert_relative_eq!(average_precision_r40(&curve), 100.0);
    }

    #[test]
    fn disjoint_detection_scores_zero_ap() {
        let frames = [frame_with(
            vec![car(0.0, 10.0, 0.0, 50.0, None)],
            vec![car(50.0, 10.0, 0.0, 50.0, Some(0.9))],
        )];
        let curve = match_and_score(
            &frames,
            "Car",
            Difficulty::Easy,
            &EvalConfig::default(),
            Metric::Ap3d,
        )
        .unwrap();
        assert_eq!(average_precision_r40(&curve), 0.0);
    }

    #[test]
    fn greedy_prefers_highest_iou_gt() {
        // two GTs close together, the higher-scored detection overlaps both:
        // greedy must take the higher-IoU one and leave the other for the
        // second detection
        let gt_a = car(0.0, 10.0, 0.0, 50.0, None);
        let gt_b = car(1.4, 10.0, 0.0, 50.0, None);
        let det_1 = car(0.1, 10.0, 0.0, 50.0, Some(0.95)); // best on A
        let det_2 = car(1.5, 10.0, 0.0, 50.0, Some(0.90)); // best on B
        let frames = [frame_with(vec![gt_a, gt_b], vec![det_2, det_1])];
        let cfg = EvalConfig {
            thresholds: vec![("Car".into(), 0.3)],
        };
        let curve = match_and_score(&frames, "Car", Difficulty::Easy, &cfg, Metric::ApBev).unwrap();
        let tp_count = curve.points.len();
        assert_eq!(tp_count, 2);
        assert_relative_eq!(average_precision_r40(&curve), 100.0);
    }

    /// Exhaustive max-cardinality matcher for small instances.
    fn optimal_tp(dets: &[Box3D], gts: &[Box3D], thr: f64, metric: Metric) -> usize {
        fn recurse(
            di: usize,
            dets: &[Box3D],
            gts: &[Box3D],
            used: &mut [bool],
            thr: f64,
            metric: Metric,
        ) -> usize {
            if di == dets.len() {
                return 0;
            }
            // skip this detection
            let mut best = recurse(di + 1, dets, gts, used, thr, metric);
            for gi in 0..gts.len() {
                if used[gi] {
                    continue;
                }
                if metric.overlap(&dets[di], &gts[gi]) >= thr {
                    used[gi] = true;
                    best = best.max(1 + recurse(di + 1, dets, gts, used, thr, metric));
                    used[gi] = false;
                }
            }
            best
        }
        let mut used = vec![false; gts.len()];
        recurse(0, dets, gts, &mut used, thr, metric)
    }

    #[test]
    fn greedy_equals_exhaustive_on_random_instances() {
        let mut rng = Rng::seed_from(11);
        for _ in 0..200 {
            // physically plausible ground truths: rejection-sample low overlap
            let n_gt = rng.gen_range_usize(1, 6);
            let mut gts: Vec<Box3D> = Vec::new();
            while gts.len() < n_gt {
                let cand = boxx(
                    rng.uniform::<f64>(-8.0, 8.0),
                    rng.uniform::<f64>(5.0, 25.0),
                    rng.uniform::<f64>(-3.1, 3.1),
                );
                if gts.iter().all(|g| bev_iou(g, &cand) < 0.2) {
                    gts.push(cand);
                }
            }
            let n_det = rng.gen_range_usize(1, 6);
            let mut dets = Vec::new();
            for i in 0..n_det {
                if i < gts.len() && rng.gen_f64() < 0.7 {
                    let g = &gts[i];
                    dets.push(boxx(
                        g.x + rng.uniform::<f64>(-0.4, 0.4),
                        g.z + rng.uniform::<f64>(-0.4, 0.4),
                        g.ry + rng.uniform::<f64>(-0.1, 0.1),
                    ));
                } else {
                    dets.push(boxx(
                        rng.uniform::<f64>(-8.0, 8.0),
                        rng.uniform::<f64>(5.0, 25.0),
                        rng.uniform::<f64>(-3.1, 3.1),
                    ));
                }
            }

            let frame = frame_with(
                gts.iter()
                    .map(|g| {
                        let mut r = car(g.x, g.z, g.ry, 50.0, None);
                        r.loc = [g.x, g.y, g.z];
                        r
                    })
                    .collect(),
                dets.iter()
                    .enumerate()
                    .map(|(i, d)| {
                        let mut r = car(d.x, d.z, d.ry, 50.0, Some(0.9 - 0.01 * i as f64));
                        r.loc = [d.x, d.y, d.z];
                        r
                    })
                    .collect(),
            );
            let cfg = EvalConfig::default();
            let m = match_frame(&frame, "Car", Difficulty::Easy, &cfg, Metric::ApBev).unwrap();
            let greedy_tp = m.scored.iter().filter(|(_, tp)| *tp).count();
            let optimal = optimal_tp(&dets, &gts, 0.7, Metric::ApBev);
            assert_eq!(greedy_tp, optimal, "greedy diverged from optimal matching");
        }
    }

    #[test]
    fn harder_gts_are_ignored_not_false_negatives() {
        // a hard GT (small box) evaluated at Easy: not recallable, and a
        // detection matching it is neither TP nor FP
        let mut hard_gt = car(0.0, 10.0, 0.0, 50.0, None);
        hard_gt.occluded = 2;
        let frames = [frame_with(
            vec![hard_gt, car(5.0, 10.0, 0.0, 50.0, None)],
            vec![
                car(0.0, 10.0, 0.0, 50.0, Some(0.95)),
                car(5.0, 10.0, 0.0, 50.0, Some(0.9)),
            ],
        )];
        let curve = match_and_score(
            &frames,
            "Car",
            Difficulty::Easy,
            &EvalConfig::default(),
            Metric::Ap3d,
        )
        .unwrap();
        assert_eq!(curve.total_gt, 1);
        assert_relative_eq!(average_precision_r40(&curve), 100.0);
    }

    #[test]
    fn dontcare_overlaps_are_neither_tp_nor_fp() {
        let mut dc = car(0.0, 10.0, 0.0, 40.0, None);
        dc.kind = "DontCare".into();
        dc.bbox = [100.0, 100.0, 180.0, 140.0];
        let mut det = car(30.0, 10.0, 0.0, 40.0, Some(0.9));
        det.bbox = [110.0, 105.0, 170.0, 135.0]; // fully inside the DontCare
        let frames = [frame_with(
            vec![dc, car(5.0, 10.0, 0.0, 50.0, None)],
            vec![det, car(5.0, 10.0, 0.0, 50.0, Some(0.8))],
        )];
        let curve = match_and_score(
            &frames,
            "Car",
            Difficulty::Easy,
            &EvalConfig::default(),
            Metric::Ap3d,
        )
        .unwrap();
        // the stray detection is absorbed by DontCare, precision stays 1
        assert_relative_eq!(average_precision_r40(&curve), 100.0);
    }

    #[test]
    fn half_recall_at_full_precision_gives_50() {
        let frames = [frame_with(
            vec![car(0.0, 10.0, 0.0, 50.0, None), car(8.0, 10.0, 0.0, 50.0, None)],
            vec![car(0.0, 10.0, 0.0, 50.0, Some(0.9))],
        )];
        let curve = match_and_score(
            &frames,
            "Car",
            Difficulty::Easy,
            &EvalConfig::default(),
            Metric::Ap3d,
        )
        .unwrap();
        assert_relative_eq!(average_precision_r40(&curve), 50.0);
    }

    #[test]
    fn unknown_class_is_a_config_error() {
        let frames = [EvalFrame::default()];
        assert!(match_and_score(
            &frames,
            "Tractor",
            Difficulty::Easy,
            &EvalConfig::default(),
            Metric::Ap3d
        )
        .is_err());
    }

    #[test]
    fn adding_a_false_positive_never_increases_ap() {
        let gt = vec![car(0.0, 10.0, 0.0, 50.0, None)];
        let base = [frame_with(gt.clone(), vec![car(0.0, 10.0, 0.0, 50.0, Some(0.9))])];
        let with_fp = [frame_with(
            gt,
            vec![
                car(0.0, 10.0, 0.0, 50.0, Some(0.9)),
                car(50.0, 10.0, 0.0, 50.0, Some(0.95)),
            ],
        )];
        let cfg = EvalConfig::default();
        let ap_base = average_precision_r40(
            &match_and_score(&base, "Car", Difficulty::Easy, &cfg, Metric::Ap3d).unwrap(),
        );
        let ap_fp = average_precision_r40(
            &match_and_score(&with_fp, "Car", Difficulty::Easy, &cfg, Metric::Ap3d).unwrap(),
        );
        assert!(ap_fp <= ap_base);
    }

    #[test]
    fn confidence_histogram_counts_true_positives() {
        let frames = [frame_with(
            vec![car(0.0, 10.0, 0.0, 50.0, None)],
            vec![
                car(0.0, 10.0, 0.0, 50.0, Some(0.95)),
                car(50.0, 10.0, 0.0, 50.0, Some(0.4)), // FP, not counted
            ],
        )];
        let hist = confidence_histogram(&frames, "Car", 0.5, 10).unwrap();
        let easy = &hist[&Difficulty::Easy];
        assert_eq!(easy.iter().sum::<usize>(), 1);
        assert_eq!(easy[9], 1);
        let empty = confidence_histogram(&[EvalFrame::default()], "Car", 0.5, 10).unwrap();
        assert!(empty[&Difficulty::Easy].iter().all(|&c| c == 0));
    }

    proptest! {
        #[test]
        fn self_iou_is_one(
            x in -20.0f64..20.0,
            z in 1.0f64..50.0,
            ry in -3.14f64..3.14,
            h in 0.5f64..3.0,
            w in 0.5f64..3.0,
            l in 0.5f64..6.0,
        ) {
            let b = Box3D { x, y: 1.65, z, h, w, l, ry };
            prop_assert!((bev_iou(&b, &b) - 1.0).abs() <= 1e-9);
            prop_assert!((iou_3d(&b, &b) - 1.0).abs() <= 1e-9);
        }
    }
}
