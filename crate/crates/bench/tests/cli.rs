use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ssam(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssam"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn small_set(dir: &Path) {
    fs::write(dir.join("spec.json"), r#"{"images_per_class": 8}"#).unwrap();
    let o = ssam(&["gen-data", "--spec", "spec.json", "--seed", "1", "--out", "d.bin"], dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_data_writes_dataset_and_both_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    small_set(dir.path());
    for f in ["d.bin", "d.bin.vit.emb", "d.bin.conv.emb"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let o = ssam(&["adapt", "--data", "d.bin", "--encoder", "conv", "--steps", "1", "--report", "r"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = fs::read_to_string(dir.path().join("r/run.json")).unwrap();
    assert!(run.contains("\"frozen_state_unchanged\": true"));
    assert!(!run.contains("seconds"));
}

#[test]
fn episodic_sgd_run_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    small_set(dir.path());
    let args = [
        "adapt", "--data", "d.bin", "--mode", "episodic", "--optimizer", "sgd", "--insertion-layer", "2",
        "--batch", "8", "--report", "r",
    ];
    let o = ssam(&args, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("r/heatmap_post.csv").is_file());
}

#[test]
fn config_and_format_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    small_set(dir.path());
    let o = ssam(&["adapt", "--data", "missing.bin", "--report", "r"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = ssam(&["adapt", "--data", "d.bin", "--batch", "0", "--report", "r"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = ssam(&["adapt", "--data", "d.bin", "--insertion-layer", "9", "--report", "r"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    fs::write(dir.path().join("junk.bin"), b"not a dataset at all, just words").unwrap();
    fs::copy(dir.path().join("d.bin.vit.emb"), dir.path().join("junk.bin.vit.emb")).unwrap();
    let o = ssam(&["adapt", "--data", "junk.bin", "--report", "r"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("at byte 0"));
    fs::write(dir.path().join("grid.json"), r#"{"alphas": []}"#).unwrap();
    let o = ssam(&["ablate", "--data", "d.bin", "--grid", "grid.json", "--report", "g"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn diverging_run_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    small_set(dir.path());
    let o = ssam(
        &["adapt", "--data", "d.bin", "--optimizer", "sgd", "--lr", "1e308", "--steps", "3", "--report", "r"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = ssam(&["gradcheck", "--instances", "1"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let o = ssam(&["gradcheck", "--instances", "1", "--corrupt-component", "l_ca"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("l_ca on vit@0") && !err.contains("l_pir"), "{err}");
    let o = ssam(&["gradcheck", "--dim", "1", "--classes", "2", "--instances", "1"], dir.path());
    assert!(o.status.success());
    let o = ssam(&["gradcheck", "--batch", "40"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}
