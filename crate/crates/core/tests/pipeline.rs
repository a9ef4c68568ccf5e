use std::path::Path;

use sdmp_core::config::ExperimentConfig;
use sdmp_core::dataset::{read_dataset, GeometrySpec, INDEX_FILE};
use sdmp_core::denoiser::Material;
use sdmp_core::pipeline::{self, read_metrics_csv, Method, MetricRecord, RunInfo, METRICS_HEADER};

/// 32² grid, a handful of phantoms, networks trained for a few steps.
fn tiny(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.output_dir = out.to_path_buf();
    c.geometry = GeometrySpec::desk(32);
    c.acquisition.views = 30;
    c.dataset.n_train = 3;
    c.dataset.n_test = 2;
    c.decomp.stride = 3;
    c.decomp.train.epochs = 2;
    c.denoiser.train.steps = 20;
    c.denoiser.train.crop = 16;
    c.solver.t_sample = 4;
    c.sweep.angles = vec![20, 30];
    c.sweep.lambdas = vec![1e-3];
    c.sweep.xis = vec![0.0, 1.0];
    c.sweep.t_samples = vec![2, 4];
    c.sweep.seeds = vec![0];
    c.sweep.n_records = 1;
    c
}

fn strip_runtime(rows: &[MetricRecord]) -> Vec<MetricRecord> {
    rows.iter().cloned().map(|r| MetricRecord { runtime: 0.0, ..r }).collect()
}

#[test]
fn end_to_end_emits_every_method_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&dir.path().join("a"));
    let (prep, rows) = pipeline::run_pipeline(&cfg).unwrap();
    for m in [Method::Fbp, Method::DecompMod, Method::Oracle] {
        assert_eq!(rows.iter().filter(|r| r.method == m).count(), 4, "{m:?}");
    }
    let out = &cfg.output_dir;
    let text = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
    assert_eq!(read_metrics_csv(out.join("metrics.csv")).unwrap(), rows);
    assert!(out.join("montages/test_0003.png").is_file());
    assert!(pipeline::image_path(out, "test_0004", Material::Water, Method::DecompMod).is_file());
    assert!(out.join("traces/test_0004_bone_decomp_mod.csv").is_file());
    let info = RunInfo::read(&out.join("run_info.toml")).unwrap();
    assert_eq!(info.data_range, prep.range);
    assert!(rows.iter().all(|r| r.psnr.is_finite() && r.ssim.is_finite() && r.runtime >= 0.0));

    let again = tiny(&dir.path().join("b"));
    let (_, rows2) = pipeline::run_pipeline(&again).unwrap();
    assert_eq!(strip_runtime(&rows), strip_runtime(&rows2));
    for f in ["models/decomp.sdnw", "models/denoiser_bone.sdnw", "images/test_0003_bone_decomp_mod.sdmp"] {
        assert_eq!(std::fs::read(out.join(f)).unwrap(), std::fs::read(again.output_dir.join(f)).unwrap(), "{f}");
    }

    // Checkpoints from the first run skip training entirely.
    let mut reuse = tiny(&dir.path().join("c"));
    reuse.checkpoints.decomp = Some(out.join("models/decomp.sdnw"));
    reuse.checkpoints.bone = Some(out.join("models/denoiser_bone.sdnw"));
    reuse.checkpoints.water = Some(out.join("models/denoiser_water.sdnw"));
    let (_, rows3) = pipeline::run_pipeline(&reuse).unwrap();
    assert_eq!(strip_runtime(&rows), strip_runtime(&rows3));
    assert!(!reuse.output_dir.join("models/decomp.sdnw").exists());
}

#[test]
fn sweeps_cover_their_axes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.dataset.n_test = 1;
    cfg.methods = vec![Method::Fbp, Method::DecompMod];
    let prep = pipeline::prepare(&cfg).unwrap();

    let rows = pipeline::run_angle_sweep(&cfg, &prep).unwrap();
    for a in [20, 30] {
        for m in [Method::Fbp, Method::DecompMod] {
            assert_eq!(rows.iter().filter(|r| r.angles == a && r.method == m).count(), 2);
        }
    }
    assert_eq!(read_metrics_csv(dir.path().join("angle_sweep.csv")).unwrap(), rows);

    let rows = pipeline::run_param_study(&cfg, &prep).unwrap();
    let dm: Vec<_> = rows.iter().filter(|r| r.method == Method::DecompMod).collect();
    // ξ ∈ {0, 1} at T = 4, plus T = 2; two materials each.
    assert_eq!(dm.len(), 6);
    assert!(dm.iter().any(|r| r.t_sample == Some(2) && r.xi == Some(1.0)));
    assert!(dm.iter().any(|r| r.t_sample == Some(4) && r.xi == Some(0.0)));
    assert_eq!(rows.iter().filter(|r| r.method == Method::Fbp).count(), 2);
}

#[test]
fn failures_name_their_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.dataset.n_train = 0;
    let msg = pipeline::prepare(&cfg).err().expect("no training data").to_string();
    assert!(msg.contains("stage `train-decomp`"), "{msg}");
    // The simulated dataset survives the failure.
    assert!(dir.path().join("dataset").join(INDEX_FILE).is_file());
}

#[test]
fn dataset_directory_is_verified_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let model = cfg.spectral_model().unwrap();
    let (manifest, data) = pipeline::simulate(&cfg, &model).unwrap();
    let ds = dir.path().join("ds");
    sdmp_core::dataset::write_dataset(&manifest, &data, &ds).unwrap();
    let (m2, d2) = read_dataset(&ds).unwrap();
    assert_eq!(m2, manifest);
    assert_eq!(d2, data);

    let victim = ds.join("train_0000_y.sdmp");
    let mut bytes = std::fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&victim, bytes).unwrap();
    let err = read_dataset(&ds).err().expect("tampered file").to_string();
    assert!(err.contains("checksum"), "{err}");
}
