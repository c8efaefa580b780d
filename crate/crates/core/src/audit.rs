//! Gradient audit registry: every differentiable operator and loss, checked
//! against central finite differences in 64-bit mode.
//!
//! Probe inputs steer clear of non-differentiable points (ReLU/abs kinks,
//! clamp edges, integer sampling coordinates, the SCG threshold), which the
//! audits themselves would otherwise flag as false positives.

use crate::asrh::{modulated_deform_conv, roi_align, simam_argument, AttentiveNorm, Asrh, RoiRect};
use crate::ehfam::{Encoder, EhfamConfig, FusionBlock, UpsampleBlock};
use crate::error::Result;
use crate::losses::{
    encode_alpha, focal_heatmap_loss, heatmap_loss, l1_masked, laplacian_depth_loss,
    multibin_loss, scg_loss, HeatInstance, HeatmapTarget, LossWeightsConfig,
};
use crate::rng::Rng;
use crate::tensor::{grad_check, GradReport, Tensor};

type CheckFn = Box<dyn Fn(u64, f64, f64) -> Result<GradReport>>;

pub struct AuditCheck {
    pub name: &'static str,
    /// Negative controls are excluded from the default run.
    pub default_on: bool,
    run: CheckFn,
}

impl AuditCheck {
    pub fn run(&self, seed: u64, eps: f64, tol: f64) -> Result<GradReport> {
        (self.run)(seed, eps, tol)
    }
}

fn check(name: &'static str, run: impl Fn(u64, f64, f64) -> Result<GradReport> + 'static) -> AuditCheck {
    AuditCheck {
        name,
        default_on: true,
        run: Box::new(run),
    }
}

fn rand(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, &mut Rng::seed_from(seed))
}

/// Random values with |v| bounded away from zero, for kinked activations.
fn rand_off_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Rng::seed_from(seed);
    let data = (0..shape.iter().product())
        .map(|_| {
            let sign = if rng.gen_f64() < 0.5 { -1.0 } else { 1.0 };
            sign * rng.uniform::<f64>(0.15, 1.2)
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Offsets whose fractional part sits in [0.15, 0.45], so a ±eps probe never
/// crosses an integer sampling coordinate.
fn rand_fractional(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Rng::seed_from(seed);
    let data = (0..shape.iter().product())
        .map(|_| {
            let base = if rng.gen_f64() < 0.5 { -1.0 } else { 0.0 };
            base + rng.uniform::<f64>(0.15, 0.45)
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// An isolated-bump heatmap: constant background with well-separated peak
/// values at scattered cells, far from the SCG threshold band.
fn bump_heatmap_on(base: f64, seed: u64) -> Tensor<f64> {
    let mut rng = Rng::seed_from(seed);
    let (h, w) = (8, 8);
    let mut data = vec![base; h * w];
    let values = [0.95, 0.93, 0.6, 0.45];
    let mut cells: Vec<usize> = Vec::new();
    while cells.len() < values.len() {
        let y = 1 + rng.gen_range_usize(0, h - 2);
        let x = 1 + rng.gen_range_usize(0, w - 2);
        if cells
            .iter()
            .all(|&c| (c / w).abs_diff(y) > 2 || (c % w).abs_diff(x) > 2)
        {
            cells.push(y * w + x);
        }
    }
    for (&c, &v) in cells.iter().zip(&values) {
        data[c] = v;
    }
    Tensor::from_vec(&[1, h, w], data).unwrap()
}

fn focal_fixture(seed: u64) -> (Tensor<f64>, HeatmapTarget<f64>) {
    let pred = rand(&[2, 6, 6], 0.1, 0.9, seed);
    let target = HeatmapTarget::render(
        2,
        6,
        6,
        &[
            HeatInstance {
                class_id: 0,
                center: (2.0, 2.0),
                size: (3.0, 2.0),
            },
            HeatInstance {
                class_id: 1,
                center: (4.0, 3.0),
                size: (2.0, 2.0),
            },
        ],
    )
    .unwrap();
    (pred, target)
}

/// The full registry.
pub fn all_checks() -> Vec<AuditCheck> {
    let mut checks = vec![
        check("add", |s, e, t| {
            let c = rand(&[12], -1.0, 1.0, s + 900);
            grad_check("add", move |x| Ok(x.add(&c)?.square().sum()), &rand(&[12], -1.0, 1.0, s), e, t)
        }),
        check("sub", |s, e, t| {
            let c = rand(&[12], -1.0, 1.0, s + 900);
            grad_check("sub", move |x| Ok(x.sub(&c)?.square().sum()), &rand(&[12], -1.0, 1.0, s), e, t)
        }),
        check("mul", |s, e, t| {
            let c = rand(&[12], -1.0, 1.0, s + 900);
            grad_check("mul", move |x| Ok(x.mul(&c)?.sum()), &rand(&[12], -1.0, 1.0, s), e, t)
        }),
        check("div", |s, e, t| {
            let c = rand(&[12], 0.7, 1.7, s + 900);
            grad_check("div", move |x| Ok(x.div(&c)?.sum()), &rand(&[12], -1.0, 1.0, s), e, t)
        }),
        check("add_scalar", |s, e, t| {
            grad_check("add_scalar", |x| Ok(x.add_scalar(0.7).square().sum()), &rand(&[9], -1.0, 1.0, s), e, t)
        }),
        check("mul_scalar", |s, e, t| {
            grad_check("mul_scalar", |x| Ok(x.mul_scalar(-1.3).square().sum()), &rand(&[9], -1.0, 1.0, s), e, t)
        }),
        check("square", |s, e, t| {
            grad_check("square", |x| Ok(x.square().sum()), &rand(&[9], -2.0, 2.0, s), e, t)
        }),
        check("sqrt", |s, e, t| {
            grad_check("sqrt", |x| Ok(x.sqrt().sum()), &rand(&[9], 0.3, 2.0, s), e, t)
        }),
        check("exp", |s, e, t| {
            grad_check("exp", |x| Ok(x.exp().sum()), &rand(&[9], -1.5, 1.5, s), e, t)
        }),
        check("ln", |s, e, t| {
            grad_check("ln", |x| Ok(x.ln().sum()), &rand(&[9], 0.3, 2.0, s), e, t)
        }),
        check("recip", |s, e, t| {
            grad_check("recip", |x| Ok(x.recip().sum()), &rand(&[9], 0.4, 1.5, s), e, t)
        }),
        check("abs", |s, e, t| {
            grad_check("abs", |x| Ok(x.abs().sum()), &rand_off_zero(&[9], s), e, t)
        }),
        check("tanh", |s, e, t| {
            grad_check("tanh", |x| Ok(x.tanh().sum()), &rand(&[9], -2.0, 2.0, s), e, t)
        }),
        check("sigmoid", |s, e, t| {
            grad_check("sigmoid", |x| Ok(x.sigmoid().sum()), &rand(&[9], -3.0, 3.0, s), e, t)
        }),
        check("softplus", |s, e, t| {
            grad_check("softplus", |x| Ok(x.softplus().sum()), &rand(&[9], -3.0, 3.0, s), e, t)
        }),
        check("mish", |s, e, t| {
            grad_check("mish", |x| Ok(x.mish().sum()), &rand(&[9], -3.0, 3.0, s), e, t)
        }),
        check("relu", |s, e, t| {
            grad_check("relu", |x| Ok(x.relu().sum()), &rand_off_zero(&[9], s), e, t)
        }),
        check("leaky_relu", |s, e, t| {
            grad_check("leaky_relu", |x| Ok(x.leaky_relu(0.01).sum()), &rand_off_zero(&[9], s), e, t)
        }),
        check("clamp", |s, e, t| {
            grad_check("clamp", |x| Ok(x.clamp(-1.0, 1.0).square().sum()), &rand(&[9], -0.7, 0.7, s), e, t)
        }),
        check("sum", |s, e, t| {
            grad_check("sum", |x| Ok(x.sum()), &rand(&[9], -1.0, 1.0, s), e, t)
        }),
        check("mean", |s, e, t| {
            grad_check("mean", |x| Ok(x.square().mean()), &rand(&[9], -1.0, 1.0, s), e, t)
        }),
        check("softmax", |s, e, t| {
            let w = rand(&[3, 5], -1.0, 1.0, s + 900);
            grad_check("softmax", move |x| Ok(x.softmax(1)?.mul(&w)?.sum()), &rand(&[3, 5], -2.0, 2.0, s), e, t)
        }),
        check("log_softmax", |s, e, t| {
            let w = rand(&[3, 5], -1.0, 1.0, s + 900);
            grad_check("log_softmax", move |x| Ok(x.log_softmax(1)?.mul(&w)?.sum()), &rand(&[3, 5], -2.0, 2.0, s), e, t)
        }),
        check("sum_axis", |s, e, t| {
            grad_check("sum_axis", |x| Ok(x.sum_axis(0)?.square().sum()), &rand(&[3, 4], -1.0, 1.0, s), e, t)
        }),
        check("reshape", |s, e, t| {
            grad_check("reshape", |x| Ok(x.reshape(&[2, 6])?.square().sum()), &rand(&[3, 4], -1.0, 1.0, s), e, t)
        }),
        check("transpose", |s, e, t| {
            let w = rand(&[12], -1.0, 1.0, s + 900);
            grad_check("transpose", move |x| Ok(x.transpose()?.reshape(&[12])?.mul(&w)?.sum()), &rand(&[3, 4], -1.0, 1.0, s), e, t)
        }),
        check("concat", |s, e, t| {
            let c = rand(&[2, 3], -1.0, 1.0, s + 900);
            grad_check("concat", move |x| Ok(Tensor::concat(&[x, &c], 1)?.square().sum()), &rand(&[2, 4], -1.0, 1.0, s), e, t)
        }),
        check("narrow", |s, e, t| {
            grad_check("narrow", |x| Ok(x.narrow(1, 1, 2)?.square().sum()), &rand(&[3, 4], -1.0, 1.0, s), e, t)
        }),
        check("gather_flat", |s, e, t| {
            grad_check("gather_flat", |x| Ok(x.gather_flat(&[0, 3, 3, 7])?.square().sum()), &rand(&[8], -1.0, 1.0, s), e, t)
        }),
        check("add_row_bias_x", |s, e, t| {
            let b = rand(&[4], -1.0, 1.0, s + 900);
            grad_check("add_row_bias_x", move |x| Ok(x.add_row_bias(&b)?.square().sum()), &rand(&[3, 4], -1.0, 1.0, s), e, t)
        }),
        check("add_row_bias_b", |s, e, t| {
            let x = rand(&[3, 4], -1.0, 1.0, s + 900);
            grad_check("add_row_bias_b", move |b| Ok(x.add_row_bias(b)?.square().sum()), &rand(&[4], -1.0, 1.0, s), e, t)
        }),
        check("matmul_lhs", |s, e, t| {
            let rhs = rand(&[4, 3], -1.0, 1.0, s + 900);
            grad_check("matmul_lhs", move |x| Ok(x.matmul(&rhs)?.square().sum()), &rand(&[2, 4], -1.0, 1.0, s), e, t)
        }),
        check("matmul_rhs", |s, e, t| {
            let lhs = rand(&[2, 4], -1.0, 1.0, s + 900);
            grad_check("matmul_rhs", move |x| Ok(lhs.matmul(x)?.square().sum()), &rand(&[4, 3], -1.0, 1.0, s), e, t)
        }),
        check("layer_norm_x", |s, e, t| {
            let g = rand(&[5], 0.5, 1.5, s + 900);
            let b = rand(&[5], -0.5, 0.5, s + 901);
            grad_check("layer_norm_x", move |x| Ok(x.layer_norm(&g, &b, 1e-5)?.square().sum()), &rand(&[3, 5], -2.0, 2.0, s), e, t)
        }),
        check("layer_norm_gamma", |s, e, t| {
            let x = rand(&[3, 5], -2.0, 2.0, s + 900);
            let b = rand(&[5], -0.5, 0.5, s + 901);
            grad_check("layer_norm_gamma", move |g| Ok(x.layer_norm(g, &b, 1e-5)?.square().sum()), &rand(&[5], 0.5, 1.5, s), e, t)
        }),
        check("layer_norm_beta", |s, e, t| {
            let x = rand(&[3, 5], -2.0, 2.0, s + 900);
            let g = rand(&[5], 0.5, 1.5, s + 901);
            grad_check("layer_norm_beta", move |b| Ok(x.layer_norm(&g, b, 1e-5)?.square().sum()), &rand(&[5], -0.5, 0.5, s), e, t)
        }),
        check("conv2d_x", |s, e, t| {
            let w = rand(&[3, 2, 3, 3], -0.7, 0.7, s + 900);
            let b = rand(&[3], -0.3, 0.3, s + 901);
            grad_check("conv2d_x", move |x| Ok(x.conv2d(&w, Some(&b), (1, 1), (1, 1))?.square().sum()), &rand(&[1, 2, 5, 5], -1.0, 1.0, s), e, t)
        }),
        check("conv2d_w", |s, e, t| {
            let x = rand(&[1, 2, 5, 5], -1.0, 1.0, s + 900);
            grad_check("conv2d_w", move |w| Ok(x.conv2d(w, None, (1, 1), (1, 1))?.square().sum()), &rand(&[3, 2, 3, 3], -0.7, 0.7, s), e, t)
        }),
        check("conv2d_bias", |s, e, t| {
            let x = rand(&[1, 2, 5, 5], -1.0, 1.0, s + 900);
            let w = rand(&[3, 2, 3, 3], -0.7, 0.7, s + 901);
            grad_check("conv2d_bias", move |b| Ok(x.conv2d(&w, Some(b), (1, 1), (1, 1))?.square().sum()), &rand(&[3], -0.3, 0.3, s), e, t)
        }),
        check("conv2d_strided_x", |s, e, t| {
            let w = rand(&[2, 2, 3, 3], -0.7, 0.7, s + 900);
            grad_check("conv2d_strided_x", move |x| Ok(x.conv2d(&w, None, (2, 2), (1, 1))?.square().sum()), &rand(&[1, 2, 6, 6], -1.0, 1.0, s), e, t)
        }),
        check("bilinear_resize", |s, e, t| {
            grad_check("bilinear_resize", |x| Ok(x.bilinear_resize(5, 7)?.square().sum()), &rand(&[2, 3, 4], -1.0, 1.0, s), e, t)
        }),
        check("bilinear_sample_map", |s, e, t| {
            let pts = rand_fractional(&[5, 2], s + 900).add_scalar(2.0).detach();
            grad_check("bilinear_sample_map", move |x| Ok(x.bilinear_sample(&pts)?.square().sum()), &rand(&[2, 6, 6], -1.0, 1.0, s), e, t)
        }),
        check("bilinear_sample_points", |s, e, t| {
            let map = rand(&[2, 6, 6], -1.0, 1.0, s + 900);
            grad_check("bilinear_sample_points", move |pts| Ok(map.bilinear_sample(pts)?.square().sum()), &rand_fractional(&[5, 2], s).add_scalar(2.0).detach(), e, t)
        }),
        check("roi_align", |s, e, t| {
            grad_check(
                "roi_align",
                |x| {
                    let boxes = [
                        RoiRect { x0: 0.6, y0: 0.8, x1: 4.7, y1: 5.1 },
                        RoiRect { x0: 1.3, y0: 0.2, x1: 5.8, y1: 3.9 },
                    ];
                    Ok(roi_align(x, &boxes)?.0.square().sum())
                },
                &rand(&[2, 6, 6], -1.0, 1.0, s),
                e,
                t,
            )
        }),
        check("spatial_mean", |s, e, t| {
            grad_check("spatial_mean", |x| Ok(x.spatial_mean()?.square().sum()), &rand(&[2, 3, 3, 3], -1.0, 1.0, s), e, t)
        }),
        check("tile_spatial", |s, e, t| {
            let w = rand(&[2, 3, 2, 2], -1.0, 1.0, s + 900);
            grad_check("tile_spatial", move |x| Ok(x.tile_spatial(2, 2)?.mul(&w)?.sum()), &rand(&[2, 3], -1.0, 1.0, s), e, t)
        }),
        check("standardize_batch", |s, e, t| {
            let w = rand(&[2, 3, 3, 3], -1.0, 1.0, s + 900);
            grad_check("standardize_batch", move |x| Ok(x.standardize_batch(1e-5)?.mul(&w)?.sum()), &rand(&[2, 3, 3, 3], -2.0, 2.0, s), e, t)
        }),
        check("affine_per_instance_x", |s, e, t| {
            let sc = rand(&[2, 3], 0.5, 1.5, s + 900);
            let sh = rand(&[2, 3], -0.5, 0.5, s + 901);
            grad_check("affine_per_instance_x", move |x| Ok(x.affine_per_instance(&sc, &sh)?.square().sum()), &rand(&[2, 3, 2, 2], -1.0, 1.0, s), e, t)
        }),
        check("affine_per_instance_scale", |s, e, t| {
            let x = rand(&[2, 3, 2, 2], -1.0, 1.0, s + 900);
            let sh = rand(&[2, 3], -0.5, 0.5, s + 901);
            grad_check("affine_per_instance_scale", move |sc| Ok(x.affine_per_instance(sc, &sh)?.square().sum()), &rand(&[2, 3], 0.5, 1.5, s), e, t)
        }),
        check("channel_affine", |s, e, t| {
            let sc = rand(&[3], 0.5, 1.5, s + 900);
            let sh = rand(&[3], -0.5, 0.5, s + 901);
            grad_check("channel_affine", move |x| Ok(x.channel_affine(&sc, &sh)?.square().sum()), &rand(&[3, 4, 4], -1.0, 1.0, s), e, t)
        }),
    ];

    // ASRH fused operators
    let deform_fixture = |seed: u64| {
        (
            rand(&[1, 4, 7, 7], -1.0, 1.0, seed),
            rand_fractional(&[1, 18, 7, 7], seed + 1),
            rand(&[1, 9, 7, 7], 0.1, 0.9, seed + 2),
            rand(&[3, 4, 3, 3], -0.6, 0.6, seed + 3),
            rand(&[3], -0.3, 0.3, seed + 4),
        )
    };
    checks.push(check("deform_conv_input", move |s, e, t| {
        let (_, off, m, w, b) = deform_fixture(s);
        grad_check("deform_conv_input", move |fr| Ok(modulated_deform_conv(fr, &off, &m, &w, &b)?.square().sum()), &rand(&[1, 4, 7, 7], -1.0, 1.0, s), e, t)
    }));
    checks.push(check("deform_conv_offsets", move |s, e, t| {
        let (fr, off, m, w, b) = deform_fixture(s);
        grad_check("deform_conv_offsets", move |o| Ok(modulated_deform_conv(&fr, o, &m, &w, &b)?.square().sum()), &off, e, t)
    }));
    checks.push(check("deform_conv_masks", move |s, e, t| {
        let (fr, off, m, w, b) = deform_fixture(s);
        grad_check("deform_conv_masks", move |mm| Ok(modulated_deform_conv(&fr, &off, mm, &w, &b)?.square().sum()), &m, e, t)
    }));
    checks.push(check("deform_conv_weight", move |s, e, t| {
        let (fr, off, m, w, b) = deform_fixture(s);
        grad_check("deform_conv_weight", move |ww| Ok(modulated_deform_conv(&fr, &off, &m, ww, &b)?.square().sum()), &w, e, t)
    }));
    checks.push(check("deform_conv_bias", move |s, e, t| {
        let (fr, off, m, w, b) = deform_fixture(s);
        grad_check("deform_conv_bias", move |bb| Ok(modulated_deform_conv(&fr, &off, &m, &w, bb)?.square().sum()), &b, e, t)
    }));
    checks.push(check("simam_argument", |s, e, t| {
        // probe away from the per-channel mean (zero-gradient points) and
        // weight with a positive functional so no coordinate gradient
        // vanishes by cancellation
        let w = rand(&[1, 2, 7, 7], 1.0, 2.0, s + 900);
        grad_check("simam_argument", move |x| Ok(simam_argument(x, 1e-4)?.mul(&w)?.sum()), &rand_off_zero(&[1, 2, 7, 7], s), e, t)
    }));
    checks.push(check("attentive_norm", |s, e, t| {
        let an = AttentiveNorm::<f64>::new(3, 5, &mut Rng::seed_from(s + 900));
        grad_check("attentive_norm", move |x| Ok(an.forward(x, true)?.square().sum()), &rand(&[2, 3, 4, 4], -1.0, 1.0, s), e, t)
    }));
    checks.push(check("scale_encoder", |s, e, t| {
        let asrh = Asrh::<f64>::new(4, (64.0, 64.0), &mut Rng::seed_from(s + 900));
        grad_check("scale_encoder", move |sizes| Ok(asrh.scale_encoder(sizes)?.square().sum()), &rand(&[2, 2], 5.0, 40.0, s), e, t)
    }));

    // EH-FAM composites
    checks.push(check("attention_encoder", |s, e, t| {
        let cfg = EhfamConfig { channels: 4, heads: 2, value_dim: 6 };
        let enc = Encoder::<f64>::new(&cfg, &mut Rng::seed_from(s + 900));
        grad_check("attention_encoder", move |x| Ok(enc.forward(x, None)?.square().sum()), &rand(&[5, 4], -1.0, 1.0, s), e, t)
    }));
    checks.push(check("upsample_block", |s, e, t| {
        let block = UpsampleBlock::<f64>::new(2, &mut Rng::seed_from(s + 900));
        grad_check("upsample_block", move |x| Ok(block.forward(x)?.square().sum()), &rand(&[2, 3, 4], -1.0, 1.0, s), e, t)
    }));
    checks.push(check("fusion_block", |s, e, t| {
        let block = FusionBlock::<f64>::random(2, &mut Rng::seed_from(s + 900));
        grad_check("fusion_block", move |x| Ok(block.forward_train(x)?.square().sum()), &rand(&[2, 4, 4], -1.0, 1.0, s), e, t)
    }));

    // losses
    checks.push(check("focal_heatmap_loss", |s, e, t| {
        let (pred0, target) = focal_fixture(s);
        let cfg = LossWeightsConfig::default();
        grad_check("focal_heatmap_loss", move |p| focal_heatmap_loss(p, &target, &cfg), &pred0, e, t)
    }));
    checks.push(check("scg_loss", |s, e, t| {
        grad_check("scg_loss", |p| scg_loss(p, 3, 0.9), &bump_heatmap_on(0.0, s), e, t)
    }));
    checks.push(check("heatmap_loss", |s, e, t| {
        let target = HeatmapTarget::render(
            1,
            8,
            8,
            &[HeatInstance { class_id: 0, center: (3.0, 3.0), size: (2.0, 2.0) }],
        )
        .unwrap();
        let cfg = LossWeightsConfig { top_k: 3, ..LossWeightsConfig::default() };
        // background 0.3 keeps every focal gradient well away from zero
        grad_check("heatmap_loss", move |p| heatmap_loss(p, &target, &cfg), &bump_heatmap_on(0.3, s), e, t)
    }));
    checks.push(check("l1_masked", |s, e, t| {
        let x0 = rand(&[3, 4], -1.0, 1.0, s);
        // keep residuals away from the |·| kink
        let target = x0.add_scalar(0.3).detach();
        let mut mask = vec![1.0; 12];
        mask[5] = 0.0;
        let mask = Tensor::from_vec(&[3, 4], mask).unwrap();
        grad_check("l1_masked", move |p| l1_masked(p, &target, &mask), &x0, e, t)
    }));
    checks.push(check("multibin_loss", |s, e, t| {
        let mut rng = Rng::seed_from(s);
        let alphas = [rng.uniform::<f64>(-3.0, 3.0), rng.uniform::<f64>(-3.0, 3.0)];
        let mut theta = rand(&[2, 24], -1.0, 1.0, s + 900).to_vec();
        // keep the supervised residual entries away from their targets
        for (i, &a) in alphas.iter().enumerate() {
            let (bin, res) = encode_alpha(a);
            theta[i * 24 + 12 + bin] = res + 0.3;
        }
        let theta = Tensor::from_vec(&[2, 24], theta).unwrap();
        grad_check("multibin_loss", move |th| multibin_loss(th, &alphas), &theta, e, t)
    }));
    checks.push(check("laplacian_depth_pred", |s, e, t| {
        let log_sigma = rand(&[3], -0.5, 0.5, s + 900);
        grad_check("laplacian_depth_pred", move |d| laplacian_depth_loss(d, &log_sigma, &[5.0, 10.0, 20.0]), &rand(&[3], 6.0, 18.0, s), e, t)
    }));
    checks.push(check("laplacian_depth_sigma", |s, e, t| {
        let d = rand(&[3], 6.0, 18.0, s + 900);
        grad_check("laplacian_depth_sigma", move |ls| laplacian_depth_loss(&d, ls, &[5.0, 10.0, 20.0]), &rand(&[3], -0.5, 0.5, s), e, t)
    }));

    // negative control: forward x², recorded derivative deliberately wrong
    checks.push(AuditCheck {
        name: "negative_control",
        default_on: false,
        run: Box::new(|s, e, t| {
            grad_check(
                "negative_control",
                |x| Ok(x.unary_op(|v| v * v, |v| v).sum()),
                &rand(&[6], 0.5, 1.5, s),
                e,
                t,
            )
        }),
    });
    checks
}

/// Minimal glob matcher: `*` matches any run of characters.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    fn inner(p: &[u8], n: &[u8]) -> bool {
        match (p.first(), n.first()) {
            (None, None) => true,
            (Some(b'*'), _) => {
                inner(&p[1..], n) || (!n.is_empty() && inner(p, &n[1..]))
            }
            (Some(pc), Some(nc)) if pc == nc => inner(&p[1..], &n[1..]),
            _ => false,
        }
    }
    inner(pattern.as_bytes(), name.as_bytes())
}

pub struct AuditOutcome {
    /// Worst report per check (max relative error over seeds).
    pub reports: Vec<GradReport>,
    pub all_passed: bool,
}

/// Run every matching check over `seeds` seeds. `filter = None` runs all
/// default checks; an explicit filter may also select non-default fixtures.
pub fn run_audit(filter: Option<&str>, seeds: u64, eps: f64, tol: f64) -> Result<Option<AuditOutcome>> {
    let selected: Vec<AuditCheck> = all_checks()
        .into_iter()
        .filter(|c| match filter {
            Some(pat) => glob_match(pat, c.name),
            None => c.default_on,
        })
        .collect();
    if selected.is_empty() {
        return Ok(None);
    }
    let mut reports = Vec::with_capacity(selected.len());
    let mut all_passed = true;
    for c in &selected {
        let mut worst: Option<GradReport> = None;
        for seed in 0..seeds {
            let r = c.run(seed, eps, tol)?;
            if worst.as_ref().map_or(true, |w| r.max_rel_error > w.max_rel_error) {
                worst = Some(r);
            }
        }
        let worst = worst.expect("at least one seed");
        all_passed &= worst.passed;
        reports.push(worst);
    }
    Ok(Some(AuditOutcome { reports, all_passed }))
}
