use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[backbone]
embed_dim = 16
layers = 2
heads = 2
tap_layers = [1, 2]

[trainer]
batch_size = 4
epochs = 2

[data]
real_train = 8
val = 8
synthetic = 8
"#;

fn pvit(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_pvit"))
        .arg("--config")
        .arg(dir.join("run.toml"))
        .args(args)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), TINY).unwrap();
    dir
}

#[test]
fn training_twice_writes_identical_metrics() {
    let dir = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        pvit(
            dir.path(),
            &["--seed", "4", "--out-dir", out.to_str().unwrap(), "train"],
        );
    }
    let metrics = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics, fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(String::from_utf8(metrics).unwrap().lines().count(), 3);
    assert_eq!(
        fs::read(a.join("final.ckpt")).unwrap(),
        fs::read(b.join("final.ckpt")).unwrap()
    );
}

#[test]
fn generated_files_train_like_the_in_memory_corpus() {
    let dir = setup();
    let data = dir.path().join("data");
    let (from_files, in_memory) = (dir.path().join("f"), dir.path().join("m"));
    pvit(dir.path(), &["--out-dir", data.to_str().unwrap(), "gen-data"]);
    for split in ["real", "val", "synthetic"] {
        assert!(data.join(format!("{split}.bin")).exists());
    }
    pvit(
        dir.path(),
        &[
            "--out-dir",
            from_files.to_str().unwrap(),
            "train",
            "--data",
            data.to_str().unwrap(),
        ],
    );
    pvit(dir.path(), &["--out-dir", in_memory.to_str().unwrap(), "train"]);
    assert_eq!(
        fs::read(from_files.join("metrics.csv")).unwrap(),
        fs::read(in_memory.join("metrics.csv")).unwrap()
    );

    let eval = dir.path().join("e");
    let ckpt = from_files.join("final.ckpt");
    pvit(
        dir.path(),
        &[
            "--out-dir",
            eval.to_str().unwrap(),
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
        ],
    );
    assert_eq!(
        fs::read(eval.join("eval.json")).unwrap(),
        fs::read(from_files.join("eval.json")).unwrap()
    );
}

#[test]
fn params_reports_the_prompt_group() {
    let dir = setup();
    let out = pvit(dir.path(), &["--out-dir", dir.path().to_str().unwrap(), "params"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["train"]["groups"]["prompts"], 5 * 16);
    assert_eq!(report["inference"]["groups"]["task_heads"], 0);
}

#[test]
fn gradcheck_and_ablate_run() {
    let dir = setup();
    let out = pvit(dir.path(), &["gradcheck", "--per-tensor", "2"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["max_rel_error"].as_f64().unwrap() < 1e-3);

    let out_dir = dir.path().join("abl");
    pvit(
        dir.path(),
        &[
            "--out-dir",
            out_dir.to_str().unwrap(),
            "ablate",
            "--variants",
            "baseline,np",
            "--seeds",
            "1,2",
        ],
    );
    let csv = fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    assert!(csv.starts_with("variant,mean_acc,sd_acc,gap_vs_baseline,seed_1,seed_2\nbaseline,"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn contract_violations_exit_nonzero() {
    let dir = setup();
    fs::write(
        dir.path().join("bad.toml"),
        "[variant]\nkind = \"mt\"\nprompt_count = 5\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_pvit"))
        .args(["--config", dir.path().join("bad.toml").to_str().unwrap(), "params"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid variant"));
}
