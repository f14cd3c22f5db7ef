//! End-to-end runs of the `pftseg` binary on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[dataset]
resolution = 16
n_train_labeled = 3
n_support = 4
n_test = 3
n_pretrain = 12

[decoder]
output_resolution = 16
channels = [8, 8, 8]
latent_dim = 8

[pretrain]
iterations = 4
batch_size = 4

[invert]
iterations = 3

[finetune]
iterations = 2
support_batch = 2

[classifier]
hidden = [8]
epochs = 1
pixels_per_image = 64

[bench]
shots = [1]
seeds = [0]
methods = ["pftgan", "baseline"]
renders = 1
"#;

fn pftseg(work: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pftseg"))
        .arg("--workdir")
        .arg(work)
        .arg("--config")
        .arg(work.join("tiny.toml"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(work: &Path, args: &[&str]) -> String {
    let out = pftseg(work, args);
    assert!(
        out.status.success(),
        "pftseg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fails(work: &Path, args: &[&str], code: i32) -> String {
    let out = pftseg(work, args);
    assert_eq!(out.status.code(), Some(code), "pftseg {args:?}");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn full_pipeline_and_error_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let work = tmp.path();
    std::fs::write(work.join("tiny.toml"), TINY).unwrap();

    let err = fails(work, &["finetune"], 6);
    assert!(err.contains("pftseg gen-data"), "{err}");
    fails(work, &["finetune", "--method", "bogus"], 64);
    fails(work, &["no-such-command"], 64);
    let err = fails(work, &["show-config", "--set", "decoder.output_resolution=32"], 2);
    assert!(err.contains("resolution"), "{err}");

    ok(work, &["gen-data"]);
    let err = fails(work, &["invert"], 6);
    assert!(err.contains("pftseg pretrain"), "{err}");
    assert!(ok(work, &["pretrain"]).contains("held-out reconstruction loss"));
    let err = fails(work, &["finetune"], 6);
    assert!(err.contains("pftseg invert"), "{err}");
    ok(work, &["invert"]);

    let err = fails(work, &["classify", "--shots", "1", "--seed", "0"], 6);
    assert!(
        err.contains("pftseg finetune --method pftgan --shots 1 --seed 0"),
        "{err}"
    );
    ok(work, &["finetune"]);
    ok(work, &["classify"]);
    assert!(ok(work, &["eval"]).contains("test mIoU"));
    ok(work, &["render"]);
    let cell = work.join("runs/pftgan-1shot-seed0");
    for f in [
        "ckpt/stage1.ckpt",
        "ckpt/stage3.ckpt",
        "classifier.ckpt",
        "eval.json",
        "loss_trace.csv",
        "manifest.json",
    ] {
        assert!(cell.join(f).exists(), "{f} missing");
    }

    let label = work.join("data/labels/test-0000.png");
    let out = work.join("label-rgb.png");
    ok(
        work,
        &[
            "render",
            "--label",
            label.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
    );
    assert!(out.exists());

    let summary = ok(work, &["bench"]);
    assert!(summary.contains("pftgan"), "{summary}");
    for f in ["report.csv", "report.json", "summary.txt"] {
        assert!(work.join("bench").join(f).exists(), "{f} missing");
    }
}
