//! Scratch calibration pilot: builds the desk dataset and field once into
//! target/desk-cache, then runs short denoiser trainings at candidate
//! learning rates. Not part of the deliverable.

use std::path::Path;
use std::time::Instant;

use mvdiff_core::field::{train_field, FieldConfig, FieldNet};
use mvdiff_core::pipeline::{train_denoiser, DenoiserTrainConfig};
use mvdiff_core::scenegen::{generate_dataset, DatasetManifest};

fn main() {
    let cache = Path::new("target/desk-cache");
    let data_dir = cache.join("dataset");
    let manifest = if data_dir.join("manifest.json").exists() {
        eprintln!("dataset: cached");
        DatasetManifest::load(&data_dir.join("manifest.json")).unwrap()
    } else {
        std::fs::create_dir_all(&data_dir).unwrap();
        let t = Instant::now();
        let m = generate_dataset(&data_dir, 64, 17, 32, 1).unwrap();
        eprintln!("dataset: {:.1?}", t.elapsed());
        m
    };

    let field_dir = cache.join("field");
    let field = if field_dir.join("field_config.json").exists() {
        eprintln!("field: cached");
        FieldNet::load(&field_dir).unwrap().0
    } else {
        std::fs::create_dir_all(&field_dir).unwrap();
        let t = Instant::now();
        let (f, report) =
            train_field(&manifest, &data_dir, &FieldConfig::default(), &field_dir).unwrap();
        let n = report.losses.len();
        let head: f64 = report.losses[..100].iter().sum::<f64>() / 100.0;
        let tail: f64 = report.losses[n - 100..].iter().sum::<f64>() / 100.0;
        eprintln!(
            "field: {:.1?}, loss head {head:.5} tail {tail:.5}",
            t.elapsed()
        );
        f
    };

    for lr in [1e-4f64, 2e-4, 3e-4] {
        let cfg = DenoiserTrainConfig {
            steps: 1000,
            lr,
            seed: 0,
            ..Default::default()
        };
        let out = cache.join(format!("pilot-lr-{lr:e}"));
        std::fs::create_dir_all(&out).unwrap();
        let t = Instant::now();
        let (_net, report) = train_denoiser(&manifest, &data_dir, &field, &cfg, &out).unwrap();
        let w = 100;
        let head: f64 = report.losses[..w].iter().sum::<f64>() / w as f64;
        let mid: f64 = report.losses[450..550].iter().sum::<f64>() / 100.0;
        let tail: f64 =
            report.losses[report.losses.len() - w..].iter().sum::<f64>() / w as f64;
        eprintln!(
            "lr {lr:.0e}: loss head {head:.4} mid {mid:.4} tail {tail:.4} ({:.1?})",
            t.elapsed()
        );
    }
}
