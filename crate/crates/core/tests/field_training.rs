//! Desk-scale training runs for the condition field.
//!
//! One fixture trains a field on a tiny two-scene dataset (one train scene,
//! one held-out-composition test scene) with one azimuth withheld, and the
//! tests interrogate that single run: overfit quality, loss monotonicity,
//! held-out-view quality, quadrature stability, and text steering.

use std::path::PathBuf;
use std::sync::OnceLock;

use mvdiff_core::field::{downsample_avg, train_field, FieldConfig, FieldNet, TrainReport};
use mvdiff_core::numerics::tensor::Tensor;
use mvdiff_core::scenegen::{generate_dataset, load_image, tokenize, CameraPose, DatasetManifest};
use tempfile::TempDir;

const HOLDOUT_AZIMUTH: usize = 7;

struct Fixture {
    _dir: TempDir,
    data_dir: PathBuf,
    ckpt_dir: PathBuf,
    manifest: DatasetManifest,
    config: FieldConfig,
    net: FieldNet,
    report: TrainReport,
}

fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        let manifest = generate_dataset(&data_dir, 2, 3, 32, 1).unwrap();
        assert_eq!(manifest.train_scenes().count(), 1);
        assert_eq!(manifest.test_scenes().count(), 1);

        let config = FieldConfig {
            seed: 5,
            holdout_azimuth: Some(HOLDOUT_AZIMUTH),
            ..FieldConfig::default()
        };
        let ckpt_dir = dir.path().join("field-ckpt");
        let (net, report) = train_field(&manifest, &data_dir, &config, &ckpt_dir).unwrap();
        Fixture {
            _dir: dir,
            data_dir,
            ckpt_dir,
            manifest,
            config,
            net,
            report,
        }
    })
}

/// Coarse-resolution ground truth for one view of a scene, as [3, r, r].
fn coarse_target(fix: &Fixture, scene_idx: usize, view_idx: usize) -> Tensor<f32> {
    let scene = &fix.manifest.scenes[scene_idx];
    let img = load_image(&fix.data_dir.join(&scene.views[view_idx].image)).unwrap();
    downsample_avg(&img, fix.config.coarse_res).unwrap()
}

fn coarse_pose(fix: &Fixture, scene_idx: usize, view_idx: usize) -> CameraPose {
    let view = &fix.manifest.scenes[scene_idx].views[view_idx];
    CameraPose::new(
        view.azimuth_index,
        view.elevation,
        fix.manifest.radius,
        fix.manifest.focal,
        fix.config.coarse_res,
    )
    .unwrap()
}

fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let n = a.len() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n
}

fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    -10.0 * mse(a, b).log10()
}

fn train_scene_index(fix: &Fixture) -> usize {
    fix.manifest
        .scenes
        .iter()
        .position(|s| matches!(s.split, mvdiff_core::scenegen::Split::Train))
        .unwrap()
}

#[test]
fn single_scene_overfit_reaches_the_mse_target() {
    let fix = fixture();
    let si = train_scene_index(fix);
    let scene = &fix.manifest.scenes[si];
    let tokens = tokenize(&scene.coarse_text).unwrap();

    let mut total = 0.0;
    let mut count = 0usize;
    for vi in 0..scene.views.len() {
        if scene.views[vi].azimuth_index == HOLDOUT_AZIMUTH {
            continue;
        }
        let pose = coarse_pose(fix, si, vi);
        let render = fix
            .net
            .render_pose(&pose, &tokens, fix.config.render_samples, None)
            .unwrap();
        total += mse(&render, &coarse_target(fix, si, vi));
        count += 1;
    }
    let train_mse = total / count as f64;
    eprintln!("train MSE over {count} views: {train_mse:.3e}");
    assert!(
        train_mse < 1e-3,
        "train MSE {train_mse:.3e} after {} steps",
        fix.report.losses.len()
    );

    // The checkpoint on disk reproduces the in-memory net bit for bit.
    assert!(fix.ckpt_dir.join("meta.json").is_file());
    assert!(fix.ckpt_dir.join("loss.json").is_file());
    let (loaded, meta) = FieldNet::load(&fix.ckpt_dir).unwrap();
    assert_eq!(meta.step, fix.report.losses.len() as u64);
    let pose = coarse_pose(fix, si, 0);
    let a = fix.net.render_pose(&pose, &tokens, 64, None).unwrap();
    let b = loaded.render_pose(&pose, &tokens, 64, None).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn smoothed_loss_never_rises_across_500_step_windows() {
    let fix = fixture();
    let losses = &fix.report.losses;
    assert_eq!(losses.len(), fix.config.steps);

    let window = 101usize;
    let ma: Vec<f64> = losses
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect();
    for i in 0..ma.len().saturating_sub(500) {
        assert!(
            ma[i + 500] <= ma[i] + 1e-4,
            "smoothed loss rose from {:.6e} (step {i}) to {:.6e} (step {})",
            ma[i],
            ma[i + 500],
            i + 500
        );
    }
}

#[test]
fn held_out_azimuth_beats_random_init_by_ten_db() {
    let fix = fixture();
    let si = train_scene_index(fix);
    let scene = &fix.manifest.scenes[si];
    let tokens = tokenize(&scene.coarse_text).unwrap();
    let vi = scene
        .views
        .iter()
        .position(|v| v.azimuth_index == HOLDOUT_AZIMUTH)
        .unwrap();
    let pose = coarse_pose(fix, si, vi);
    let target = coarse_target(fix, si, vi);

    let trained = fix
        .net
        .render_pose(&pose, &tokens, fix.config.render_samples, None)
        .unwrap();
    let fresh = FieldNet::init(&FieldConfig {
        seed: 99,
        ..fix.config.clone()
    })
    .unwrap();
    let random = fresh
        .render_pose(&pose, &tokens, fix.config.render_samples, None)
        .unwrap();

    let gain = psnr(&trained, &target) - psnr(&random, &target);
    eprintln!(
        "held-out azimuth: trained {:.2} dB, random {:.2} dB",
        psnr(&trained, &target),
        psnr(&random, &target)
    );
    assert!(
        gain >= 10.0,
        "held-out azimuth PSNR gain over random init: {gain:.2} dB"
    );
}

#[test]
fn render_is_stable_under_sample_doubling() {
    let fix = fixture();
    let si = train_scene_index(fix);
    let tokens = tokenize(&fix.manifest.scenes[si].coarse_text).unwrap();
    let pose = coarse_pose(fix, si, HOLDOUT_AZIMUTH);

    let n = fix.config.render_samples;
    let base = fix.net.render_pose(&pose, &tokens, n, None).unwrap();
    let fine = fix.net.render_pose(&pose, &tokens, 2 * n, None).unwrap();
    let worst = base
        .data()
        .iter()
        .zip(fine.data())
        .map(|(&a, &b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    eprintln!("doubling samples moved the worst pixel by {worst:.3e}");
    assert!(
        worst < 2e-3,
        "doubling samples moved a pixel by {worst:.3e}"
    );
}

#[test]
fn coarse_texts_steer_the_trained_field() {
    let fix = fixture();
    let si = train_scene_index(fix);
    let scene = &fix.manifest.scenes[si];
    let trained_tokens = tokenize(&scene.coarse_text).unwrap();
    let other_text = if scene.coarse_text == "yellow cone" {
        "red cube"
    } else {
        "yellow cone"
    };
    let other_tokens = tokenize(other_text).unwrap();

    // Probe the object region: a small grid inside the unit ball.
    let mut points = Vec::new();
    for i in 0..5 {
        for j in 0..5 {
            for k in 0..5 {
                points.push([
                    -0.5 + 0.25 * i as f64,
                    -0.5 + 0.25 * j as f64,
                    -0.5 + 0.25 * k as f64,
                ]);
            }
        }
    }
    let (sig_a, _) = fix.net.eval_points(&points, &trained_tokens).unwrap();
    let (sig_b, _) = fix.net.eval_points(&points, &other_tokens).unwrap();
    let mean_abs: f64 = sig_a
        .iter()
        .zip(&sig_b)
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum::<f64>()
        / points.len() as f64;
    eprintln!("text swap moved the density by mean |Δσ| = {mean_abs:.3e}");
    assert!(
        mean_abs > 1e-5,
        "swapping the coarse text left the density unchanged (mean |Δσ| = {mean_abs:.3e})"
    );
}
