//! Desk-scale training on synthetic scenes, plus inference over the same
//! generator. Everything is deterministic given the seed.

use std::io::Write;
use std::path::Path;

use crate::asrh::RoiBatch;
use crate::error::{Error, Result};
use crate::kitti;
use crate::losses::{total_loss, LossReport, LossWeightsConfig, Predictions};
use crate::model::{build_training_targets, synth_scene, Detector, DetectorConfig, SynthScene};
use crate::optim::Adam;
use crate::weights;

#[derive(Debug, Clone)]
pub struct ToyTrainConfig {
    pub detector: DetectorConfig,
    pub losses: LossWeightsConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub scenes: usize,
    pub max_objects: usize,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        ToyTrainConfig {
            detector: DetectorConfig::default(),
            losses: LossWeightsConfig::default(),
            steps: 600,
            batch: 4,
            lr: 1e-3,
            scenes: 20,
            max_objects: 3,
        }
    }
}

pub struct TrainOutcome {
    pub reports: Vec<LossReport>,
    /// Mean total loss of the first ten steps.
    pub initial_mean: f64,
    pub final_total: f64,
}

/// Number of objects in scene `i` (cycles 1..=max).
fn scene_objects(i: usize, max_objects: usize) -> usize {
    1 + i % max_objects.max(1)
}

pub fn scene_for_index<SJ: crate::scalar::Scalar>(
    cfg: &DetectorConfig,
    base_seed: u64,
    i: usize,
    max_objects: usize,
) -> SynthScene<SJ> {
    synth_scene(base_seed + i as u64, scene_objects(i, max_objects), cfg)
}

/// Write a scene's annotation and calibration files.
fn write_scene_files(scene: &SynthScene<f32>, idx: usize, out_dir: &Path) -> Result<()> {
    let labels_dir = out_dir.join("labels");
    let calib_dir = out_dir.join("calib");
    std::fs::create_dir_all(&labels_dir)?;
    std::fs::create_dir_all(&calib_dir)?;
    std::fs::write(
        labels_dir.join(format!("{idx:06}.txt")),
        kitti::write_label_file(&scene.labels),
    )?;
    std::fs::write(
        calib_dir.join(format!("{idx:06}.txt")),
        kitti::write_calib(&scene.calib),
    )?;
    Ok(())
}

/// Train the toy detector on `cfg.scenes` synthetic scenes. When `out_dir`
/// is given, writes per-step reports (JSONL), the weight snapshot, the scene
/// labels/calibrations, and KITTI-format predictions on the training scenes.
pub fn train_toy(cfg: &ToyTrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.detector.validate()?;
    cfg.losses.validate()?;
    if cfg.batch == 0 || cfg.steps == 0 || cfg.scenes == 0 {
        return Err(Error::config("steps, batch and scenes must be >= 1"));
    }

    let seed = cfg.detector.seed;
    let scenes: Vec<SynthScene<f32>> = (0..cfg.scenes)
        .map(|i| scene_for_index(&cfg.detector, seed, i, cfg.max_objects))
        .collect();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        for (i, scene) in scenes.iter().enumerate() {
            write_scene_files(scene, i, dir)?;
        }
    }

    let detector = Detector::<f32>::new(cfg.detector.clone())?;
    let targets: Vec<_> = scenes
        .iter()
        .map(|s| build_training_targets::<f32>(&s.labels, &s.calib, &cfg.detector))
        .collect::<Result<Vec<_>>>()?;

    let params = detector.params();
    let mut opt = Adam::new(cfg.lr, &params);
    let mut reports: Vec<LossReport> = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        opt.zero_grads(&params);
        let mut batch_total: Option<crate::tensor::Tensor<f32>> = None;
        let mut acc = LossReport {
            step,
            focal: 0.0,
            scg: 0.0,
            heatmap: 0.0,
            o2d: 0.0,
            s2d: 0.0,
            o3d: 0.0,
            s3d: 0.0,
            theta: 0.0,
            depth: 0.0,
            total: 0.0,
        };
        for j in 0..cfg.batch {
            let idx = (step * cfg.batch + j) % scenes.len();
            let scene = &scenes[idx];
            let (heat_target, inst_targets, rois) = &targets[idx];
            let (f, heads) = detector.forward_maps(&scene.image)?;
            let roi = RoiBatch::from_feature_map(&f, rois, 4)?;
            let head3d = detector.asrh.forward_mode(&roi, true)?;
            let preds = Predictions {
                heatmap: &heads.heatmap,
                o2d: &heads.o2d,
                s2d: &heads.s2d,
                head3d: &head3d,
            };
            let (loss, report) = total_loss(&preds, heat_target, inst_targets, &cfg.losses, step)?;
            batch_total = Some(match batch_total {
                None => loss,
                Some(prev) => prev.add(&loss)?,
            });
            acc.focal += report.focal;
            acc.scg += report.scg;
            acc.heatmap += report.heatmap;
            acc.o2d += report.o2d;
            acc.s2d += report.s2d;
            acc.o3d += report.o3d;
            acc.s3d += report.s3d;
            acc.theta += report.theta;
            acc.depth += report.depth;
            acc.total += report.total;
        }
        let inv = 1.0 / cfg.batch as f64;
        for v in [
            &mut acc.focal,
            &mut acc.scg,
            &mut acc.heatmap,
            &mut acc.o2d,
            &mut acc.s2d,
            &mut acc.o3d,
            &mut acc.s3d,
            &mut acc.theta,
            &mut acc.depth,
            &mut acc.total,
        ] {
            *v *= inv;
        }
        let loss = batch_total
            .expect("batch is non-empty")
            .mul_scalar(1.0 / cfg.batch as f32);
        if !acc.total.is_finite() {
            return Err(Error::contract(format!(
                "training diverged: non-finite loss at step {step}"
            )));
        }
        loss.backward()?;
        opt.step(&params);
        reports.push(acc);
    }

    if let Some(dir) = out_dir {
        let mut log = std::fs::File::create(dir.join("loss_log.jsonl"))?;
        for r in &reports {
            writeln!(log, "{}", serde_json::to_string(r)?)?;
        }
        weights::save(&params, &dir.join("weights.bin"))?;
        // predictions on the training scenes
        let preds_dir = dir.join("preds");
        std::fs::create_dir_all(&preds_dir)?;
        for (i, scene) in scenes.iter().enumerate() {
            let dets = detector.forward_full(&scene.image, &scene.calib)?;
            let recs: Vec<_> = dets
                .iter()
                .map(|d| d.to_label_record(&cfg.detector))
                .collect();
            std::fs::write(
                preds_dir.join(format!("{i:06}.txt")),
                kitti::write_result_file(&recs)?,
            )?;
        }
    }

    let warmup = reports.len().min(10);
    let initial_mean = reports[..warmup].iter().map(|r| r.total).sum::<f64>() / warmup as f64;
    let final_total = reports.last().map(|r| r.total).unwrap_or(f64::NAN);
    Ok(TrainOutcome {
        reports,
        initial_mean,
        final_total,
    })
}

/// Render `n_scenes` scenes from the generator, run the full pipeline, and
/// write result files (and the matching labels/calibrations for later
/// evaluation). Returns per-scene detection counts.
pub fn run_inference(
    detector: &Detector<f32>,
    base_seed: u64,
    n_scenes: usize,
    max_objects: usize,
    out_dir: &Path,
) -> Result<Vec<usize>> {
    let results_dir = out_dir.join("results");
    std::fs::create_dir_all(&results_dir)?;
    let mut counts = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        let scene: SynthScene<f32> =
            scene_for_index(&detector.cfg, base_seed, i, max_objects);
        write_scene_files(&scene, i, out_dir)?;
        let dets = detector.forward_full(&scene.image, &scene.calib)?;
        let recs: Vec<_> = dets
            .iter()
            .map(|d| d.to_label_record(&detector.cfg))
            .collect();
        std::fs::write(
            results_dir.join(format!("{i:06}.txt")),
            kitti::write_result_file(&recs)?,
        )?;
        counts.push(dets.len());
    }
    Ok(counts)
}
