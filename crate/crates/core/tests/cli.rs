use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
data_root = "data"
output_dir = "run"
crop = 64

[network]
style = "unet"
base_width = 4
depth = 2

[schedule]
batch_size = 8

[[schedule.phases]]
epochs = 1
rate = 1e-3

[[schedule.phases]]
epochs = 1
rate = 1e-4

[synth]
count = 20
"#;

fn segkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segkit"))
        .current_dir(dir)
        .args(["--threads", "1", "--quiet"])
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), TINY).unwrap();
    let o = segkit(dir.path(), &["--config", "c.toml", "synth"]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(segkit(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(segkit(dir.path(), &["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(segkit(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "colour = 1\n[eval]\nthreshold = 7.0\n").unwrap();
    let o = segkit(dir.path(), &["--config", "bad.toml", "split"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("colour") && err.contains("threshold"), "{err}");
}

#[test]
fn split_of_empty_directory_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("empty/images")).unwrap();
    let o = segkit(dir.path(), &["split", "--data-root", "empty", "--out", "folds.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("folds.csv").exists());
    let o = segkit(dir.path(), &["train", "--data-root", "missing"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing"), "{}", stderr(&o));
}

#[test]
fn split_prints_fold_sizes_and_is_deterministic() {
    let dir = tiny_workspace();
    let o = segkit(dir.path(), &["--config", "c.toml", "split", "--out", "a.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "fold_sizes=4,4,4,4,4");
    segkit(dir.path(), &["--config", "c.toml", "split", "--out", "b.csv"]);
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.csv")).unwrap());
    assert!(String::from_utf8(a).unwrap().starts_with("sample_id,fold\n"));
}

#[test]
fn train_resume_predict_detect_evaluate() {
    let dir = tiny_workspace();
    let p = dir.path();
    let o = segkit(p, &["--config", "c.toml", "train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["checkpoint_final.ckpt", "checkpoint_best.ckpt", "history.csv", "folds.csv", "config.toml"] {
        assert!(p.join("run").join(f).exists(), "{f}");
    }
    let history = std::fs::read(p.join("run/history.csv")).unwrap();
    let final_ckpt = std::fs::read(p.join("run/checkpoint_final.ckpt")).unwrap();
    assert_eq!(String::from_utf8_lossy(&history).lines().count(), 3);

    // a completed run resumes with no further epochs
    let o = segkit(p, &["--config", "c.toml", "train", "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(p.join("run/history.csv")).unwrap(), history);
    assert_eq!(std::fs::read(p.join("run/checkpoint_final.ckpt")).unwrap(), final_ckpt);

    std::fs::create_dir_all(p.join("in")).unwrap();
    for id in ["synth_0000", "synth_0001"] {
        std::fs::copy(p.join(format!("data/images/{id}.png")), p.join(format!("in/{id}.png"))).unwrap();
    }
    std::fs::write(p.join("in/broken.png"), b"not an image").unwrap();
    let o = segkit(p, &["--config", "c.toml", "predict", "--images", "in", "--out", "pred"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("broken.png"));
    let mut written: Vec<String> = std::fs::read_dir(p.join("pred"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    written.sort();
    assert_eq!(written, vec!["synth_0000.png", "synth_0001.png"]);

    let o = segkit(p, &["--config", "c.toml", "detect", "--masks", "data/masks", "--out", "det.jsonl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(p.join("det.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 20);
    assert!(lines.iter().all(|l| l["id"].is_string() && l["lesions"].is_array()));

    let o = segkit(
        p,
        &["--config", "c.toml", "evaluate", "--checkpoint", "run/checkpoint_final.ckpt", "run/checkpoint_best.ckpt"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(p.join("run/report/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);
    assert!(report.starts_with("model,IOU,Dice,Time,Precision,Recall,F1,images\n"));
}
