use std::path::{Path, PathBuf};
use std::process::Command;

fn sdmp(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_sdmp")).args(args).env("RUST_LOG", "warn").output().unwrap();
    assert!(
        out.status.success(),
        "sdmp {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// A config layered on the smoke run, shrunk to a few seconds.
fn tiny_config(dir: &Path) -> PathBuf {
    let smoke = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let text = format!(
        r#"include = "{}"
output_dir = "out"

[dataset]
n_train = 2
n_test = 1

[decomp.train]
epochs = 1

[denoiser.train]
steps = 10

[solver]
t_sample = 3
"#,
        smoke.display()
    );
    let path = dir.join("tiny.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn verbs_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    let s = |p: &Path| p.to_str().unwrap().to_string();

    sdmp(&["simulate", "-c", cfg]);
    let data = out.join("dataset");
    assert!(data.join("index.tsv").is_file());
    sdmp(&["train-decomp", "-c", cfg, "--data", &s(&data)]);
    sdmp(&["train-denoiser", "-c", cfg, "--material", "bone", "--data", &s(&data)]);
    sdmp(&["train-denoiser", "-c", cfg, "--material", "water", "--data", &s(&data)]);
    for f in ["decomp.sdnw", "denoiser_bone.sdnw", "denoiser_water.sdnw"] {
        assert!(out.join(f).is_file(), "{f}");
    }

    let recon = dir.path().join("recon");
    sdmp(&[
        "reconstruct",
        "-c",
        cfg,
        "--out",
        &s(&recon),
        "--sino",
        &s(&data.join("test_0002_y.sdmp")),
        "--counts",
        &s(&data.join("test_0002_counts.sdmp")),
        "--decomp",
        &s(&out.join("decomp.sdnw")),
        "--denoiser",
        &s(&out.join("denoiser_water.sdnw")),
    ]);
    for f in ["water.sdmp", "water_fbp.sdmp", "water_trace.csv"] {
        assert!(recon.join(f).is_file(), "{f}");
    }
    assert!(!recon.join("bone.sdmp").exists());

    let eval = dir.path().join("eval");
    let printed = sdmp(&["evaluate", "-c", cfg, "--out", &s(&eval), "--models", &s(&out)]);
    let table = String::from_utf8_lossy(&printed.stdout);
    assert!(table.contains("DEcomp-MoD") && table.contains("FBP"), "{table}");
    let metrics = std::fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3 * 2);
    // Checkpoints were loaded, not retrained.
    assert!(!eval.join("models/decomp.sdnw").exists());
}

#[test]
fn bad_input_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let out = Command::new(env!("CARGO_BIN_EXE_sdmp"))
        .args(["evaluate", "-c", missing.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.toml"));
}
