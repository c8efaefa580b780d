//! Command-line interface: gradient audits, re-parameterization checks,
//! toy training, inference on synthetic scenes, and KITTI-protocol
//! evaluation. Exit codes: 0 success, 1 numerical/acceptance failure,
//! 2 usage or configuration error.

mod settings;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use mono3d::ehfam::FusionBlock;
use mono3d::error::Error;
use mono3d::eval::{
    accumulate_curve, average_precision_r40, confidence_histogram, match_frame, ApEntry,
    EvalConfig, EvalFrame, FrameMatch, Metric,
};
use mono3d::kitti::{self, Difficulty};
use mono3d::model::Detector;
use mono3d::rng::Rng;
use mono3d::tensor::Tensor;
use mono3d::train::{run_inference, train_toy};
use mono3d::{audit, weights};

use settings::Settings;

#[derive(Parser)]
#[command(
    name = "mono3d",
    about = "Monocular 3D detection toolkit: audits, toy training, inference, evaluation",
    after_help = "Config keys (file via --config, overrides via --set key=value):\n\
        seed, input_h, input_w, channels, num_classes, top_k, score_threshold,\n\
        heads, value_dim, steps, batch, lr, scenes, max_objects,\n\
        scg_lambda, scg_threshold, iou_car, iou_pedestrian, iou_cyclist"
)]
struct Cli {
    /// Seed for every random choice (overrides the config key).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Flat TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set channels=64 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference audit of every differentiable operator and loss.
    Gradcheck {
        /// Glob over check names (e.g. "deform_*"). Non-default fixtures
        /// such as negative_control run only when matched explicitly.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// Multi-branch vs collapsed fusion block equivalence and timing.
    ReparamCheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long, default_value_t = 20)]
        inputs: usize,
    },
    /// Train the toy detector on synthetic scenes; writes loss JSONL,
    /// weights, labels/calib and predictions under --out.
    ToyTrain,
    /// Render scenes and run the full pipeline with trained weights.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 20)]
        scenes: usize,
    },
    /// Evaluate KITTI-format detections against ground-truth labels.
    Eval {
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long)]
        det_dir: PathBuf,
        /// Comma-separated class list.
        #[arg(long, default_value = "Car,Pedestrian,Cyclist")]
        classes: String,
        /// Histogram bins for the confidence report.
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                // divergence and broken numerical gates are runtime failures
                Error::Contract(_) => 1,
                _ => 2,
            }
        }
    };
    std::process::exit(code);
}

fn dispatch(cli: &Cli) -> mono3d::Result<i32> {
    let mut settings = Settings::load(cli.config.as_deref(), &cli.set)?;
    if let Some(seed) = cli.seed {
        settings.put_u64("seed", seed);
    }
    match &cli.command {
        Command::Gradcheck {
            filter,
            seeds,
            eps,
            tol,
        } => cmd_gradcheck(filter.as_deref(), *seeds, *eps, *tol),
        Command::ReparamCheck {
            seeds,
            channels,
            inputs,
        } => cmd_reparam_check(&settings, *seeds, *channels, *inputs, &cli.out),
        Command::ToyTrain => cmd_toy_train(&settings, &cli.out),
        Command::Infer { weights, scenes } => cmd_infer(&settings, weights, *scenes, &cli.out),
        Command::Eval {
            gt_dir,
            det_dir,
            classes,
            bins,
        } => cmd_eval(&settings, gt_dir, det_dir, classes, *bins, &cli.out),
    }
}

fn cmd_gradcheck(filter: Option<&str>, seeds: u64, eps: f64, tol: f64) -> mono3d::Result<i32> {
    let started = Instant::now();
    let Some(outcome) = audit::run_audit(filter, seeds, eps, tol)? else {
        eprintln!(
            "gradcheck: no check matches filter {:?}",
            filter.unwrap_or("*")
        );
        return Ok(2);
    };
    for r in &outcome.reports {
        println!("{r}");
    }
    println!(
        "gradcheck: {} checks x {} seeds in {:.2}s",
        outcome.reports.len(),
        seeds,
        started.elapsed().as_secs_f64()
    );
    Ok(if outcome.all_passed { 0 } else { 1 })
}

fn cmd_reparam_check(
    settings: &Settings,
    seeds: u64,
    channels: usize,
    inputs: usize,
    out: &Path,
) -> mono3d::Result<i32> {
    let base_seed = settings.u64("seed", 42);
    std::fs::create_dir_all(out)?;
    let mut csv = String::from("seed,max_abs_dev,t_multibranch_ms,t_collapsed_ms\n");
    let mut all_ok = true;
    for s in 0..seeds {
        let mut rng = Rng::seed_from(base_seed + s);
        let block = FusionBlock::<f64>::random(channels, &mut rng);
        let collapsed = block.reparameterize()?;
        let probes: Vec<Tensor<f64>> = (0..inputs.max(1))
            .map(|_| Tensor::rand_uniform(&[channels, 8, 8], -2.0, 2.0, &mut rng))
            .collect();
        let mut max_dev = 0.0f64;
        for x in &probes {
            let a = block.forward_train(x)?.to_vec();
            let b = block.forward_infer(x, &collapsed)?.to_vec();
            for (va, vb) in a.iter().zip(&b) {
                max_dev = max_dev.max((va - vb).abs());
            }
        }
        let timer = Instant::now();
        for _ in 0..100 {
            block.forward_train(&probes[0])?;
        }
        let t_train = timer.elapsed().as_secs_f64() * 1000.0;
        let timer = Instant::now();
        for _ in 0..100 {
            block.forward_infer(&probes[0], &collapsed)?;
        }
        let t_infer = timer.elapsed().as_secs_f64() * 1000.0;
        let ok = max_dev <= 1e-5;
        all_ok &= ok;
        println!(
            "{} seed={} max_abs_dev={max_dev:.3e} multibranch={t_train:.1}ms collapsed={t_infer:.1}ms",
            if ok { "PASS" } else { "FAIL" },
            base_seed + s
        );
        csv.push_str(&format!(
            "{},{max_dev:.3e},{t_train:.3},{t_infer:.3}\n",
            base_seed + s
        ));
    }
    std::fs::write(out.join("reparam_timing.csv"), csv)?;
    Ok(if all_ok { 0 } else { 1 })
}

fn cmd_toy_train(settings: &Settings, out: &Path) -> mono3d::Result<i32> {
    let cfg = settings.train_config()?;
    let started = Instant::now();
    let outcome = train_toy(&cfg, Some(out))?;
    let ratio = outcome.final_total / outcome.initial_mean;
    println!(
        "toy-train: {} steps in {:.1}s  initial(10-step mean)={:.4}  final={:.4}  ratio={:.4}",
        cfg.steps,
        started.elapsed().as_secs_f64(),
        outcome.initial_mean,
        outcome.final_total,
        ratio
    );
    println!("artifacts under {}", out.display());
    Ok(0)
}

fn cmd_infer(
    settings: &Settings,
    weights_path: &Path,
    scenes: usize,
    out: &Path,
) -> mono3d::Result<i32> {
    let cfg = settings.train_config()?;
    let detector = Detector::<f32>::new(cfg.detector.clone())?;
    let params = detector.params();
    weights::load(&params, weights_path)?;
    let counts = run_inference(&detector, cfg.detector.seed, scenes, cfg.max_objects, out)?;
    for (i, n) in counts.iter().enumerate() {
        println!("scene {i:06}: {n} detections");
    }
    println!(
        "infer: {} scenes, {} detections total, results under {}",
        scenes,
        counts.iter().sum::<usize>(),
        out.join("results").display()
    );
    Ok(0)
}

fn read_frames(gt_dir: &Path, det_dir: &Path) -> mono3d::Result<Vec<EvalFrame>> {
    let mut names: Vec<String> = std::fs::read_dir(gt_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().to_string())
        .filter(|n| n.ends_with(".txt"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::config(format!(
            "no .txt label files under {}",
            gt_dir.display()
        )));
    }
    let mut frames = Vec::with_capacity(names.len());
    for name in names {
        let gts = kitti::parse_label_file(&std::fs::read_to_string(gt_dir.join(&name))?)?;
        let det_path = det_dir.join(&name);
        let dets = if det_path.exists() {
            kitti::parse_label_file(&std::fs::read_to_string(det_path)?)?
        } else {
            Vec::new()
        };
        frames.push(EvalFrame { gts, dets });
    }
    Ok(frames)
}

type EvalReport = BTreeMap<String, BTreeMap<String, ApEntry>>;

/// Per-frame matching fanned out over a bounded worker pool; accumulation
/// is order-independent, so the result equals the serial evaluation.
fn parallel_evaluate(frames: &[EvalFrame], cfg: &EvalConfig) -> mono3d::Result<EvalReport> {
    let mut combos: Vec<(String, Difficulty, Metric)> = Vec::new();
    for (class, _) in &cfg.thresholds {
        for difficulty in Difficulty::ALL {
            for metric in [Metric::Ap3d, Metric::ApBev] {
                combos.push((class.clone(), difficulty, metric));
            }
        }
    }

    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .clamp(1, 8);
    let chunk_len = frames.len().div_ceil(workers).max(1);

    // per_frame[frame][combo] = FrameMatch
    let mut per_frame: Vec<Vec<FrameMatch>> = Vec::with_capacity(frames.len());
    std::thread::scope(|scope| -> mono3d::Result<()> {
        let mut handles = Vec::new();
        for chunk in frames.chunks(chunk_len) {
            let combos = &combos;
            handles.push(scope.spawn(move || -> mono3d::Result<Vec<Vec<FrameMatch>>> {
                chunk
                    .iter()
                    .map(|frame| {
                        combos
                            .iter()
                            .map(|(class, difficulty, metric)| {
                                match_frame(frame, class, *difficulty, cfg, *metric)
                            })
                            .collect()
                    })
                    .collect()
            }));
        }
        for h in handles {
            per_frame.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(())
    })?;

    let mut report: EvalReport = BTreeMap::new();
    for (ci, (class, difficulty, metric)) in combos.iter().enumerate() {
        let column: Vec<FrameMatch> = per_frame.iter().map(|f| f[ci].clone()).collect();
        let curve = accumulate_curve(&column);
        let ap = average_precision_r40(&curve);
        let entry = report
            .entry(class.clone())
            .or_default()
            .entry(difficulty.name().to_string())
            .or_insert(ApEntry {
                ap3d: 0.0,
                apbev: 0.0,
                gt_count: curve.total_gt,
            });
        match metric {
            Metric::Ap3d => entry.ap3d = ap,
            Metric::ApBev => entry.apbev = ap,
        }
        entry.gt_count = curve.total_gt;
    }
    Ok(report)
}

fn cmd_eval(
    settings: &Settings,
    gt_dir: &Path,
    det_dir: &Path,
    classes: &str,
    bins: usize,
    out: &Path,
) -> mono3d::Result<i32> {
    let class_list: Vec<&str> = classes.split(',').filter(|c| !c.is_empty()).collect();
    if class_list.is_empty() {
        return Err(Error::config("empty class list"));
    }
    let eval_cfg = EvalConfig {
        thresholds: class_list
            .iter()
            .map(|&c| (c.to_string(), settings.iou_for(c)))
            .collect(),
    };
    eval_cfg.validate()?;
    let frames = read_frames(gt_dir, det_dir)?;
    let report = parallel_evaluate(&frames, &eval_cfg)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("eval_report.json"), &json)?;

    let mut csv = String::from("class,difficulty,bin_low,bin_high,count\n");
    for &class in &class_list {
        let hist = confidence_histogram(&frames, class, 0.5, bins)?;
        for (difficulty, counts) in &hist {
            for (b, count) in counts.iter().enumerate() {
                csv.push_str(&format!(
                    "{class},{},{:.3},{:.3},{count}\n",
                    difficulty.name(),
                    b as f64 / bins as f64,
                    (b + 1) as f64 / bins as f64,
                ));
            }
        }
    }
    std::fs::write(out.join("confidence_histogram.csv"), csv)?;
    Ok(0)
}
