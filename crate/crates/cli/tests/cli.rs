//! Binary-level tests: exit codes, machine-parseable error lines, the spec
//! file flow, and cross-command consistency.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fti-distill"))
}

fn write_dataset(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("data.csv");
    let status = bin()
        .args([
            "gen-data",
            "--classes",
            "4",
            "--dim",
            "6",
            "--per-class",
            "40",
            "--noise",
            "0.8",
            "--separation",
            "4.0",
            "--seed",
            "3",
            "--out",
        ])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    out
}

fn train_teacher(dir: &Path, data: &Path) -> std::path::PathBuf {
    let out = dir.join("teacher.ckpt");
    let status = bin()
        .args(["train-teacher", "--data"])
        .arg(data)
        .args([
            "--arch",
            "6,12,4",
            "--seed",
            "1",
            "--patience",
            "4",
            "--max-epochs",
            "20",
            "--out",
        ])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    out
}

#[test]
fn gen_data_emits_dataset_and_split_indices() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path());
    assert!(data.exists());
    let split = data.with_extension("split.csv");
    let text = std::fs::read_to_string(&split).unwrap();
    assert!(text.starts_with("id,role"));
    let trains = text.lines().filter(|l| l.ends_with(",train")).count();
    let vals = text.lines().filter(|l| l.ends_with(",val")).count();
    // 80-20 over the 128-sample pool
    assert_eq!(trains, 102);
    assert_eq!(vals, 26);
}

#[test]
fn invalid_params_exit_nonzero_with_error_class() {
    let dir = tempfile::tempdir().unwrap();
    // per-class 1 makes any split impossible
    let output = bin()
        .args([
            "gen-data",
            "--classes",
            "3",
            "--dim",
            "4",
            "--per-class",
            "1",
            "--out",
        ])
        .arg(dir.path().join("x.csv"))
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.lines().any(|l| l.starts_with("error[InvalidInput]:")),
        "stderr was: {stderr}"
    );
}

#[test]
fn corrupt_checkpoint_reports_cache_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path());
    let bogus = dir.path().join("bogus.ckpt");
    std::fs::write(&bogus, b"not a checkpoint").unwrap();
    let output = bin()
        .args(["analyze", "--data"])
        .arg(&data)
        .arg("--checkpoints")
        .arg(&bogus)
        .args(["--mode", "flatness", "--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.lines().any(|l| l.starts_with("error[CacheCorrupt]:")),
        "stderr was: {stderr}"
    );
}

#[test]
fn budget_beyond_pool_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path());
    let teacher = train_teacher(dir.path(), &data);
    let output = bin()
        .args(["distill", "--data"])
        .arg(&data)
        .arg("--teacher")
        .arg(&teacher)
        .args([
            "--methods",
            "kd",
            "--budget",
            "100000",
            "--student",
            "6,6,4",
            "--seeds",
            "1",
            "--lrs",
            "0.05",
            "--max-epochs",
            "2",
            "--out",
        ])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("error[InvalidInput]"), "stderr: {stderr}");
}

#[test]
fn spec_file_drives_distill_and_report_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path());
    let teacher = train_teacher(dir.path(), &data);
    let out = dir.path().join("results");
    let spec_path = dir.path().join("exp.cfg");
    std::fs::write(
        &spec_path,
        format!(
            "[dataset]\npath = {}\n\n[teacher]\ncheckpoint = {}\n\n\
             [experiment]\nmethods = ce-only,ckd\nbudgets = 40\nseeds = 1\nlrs = 0.05\n\
             student_widths = 6,6,4\nbatch_size = 16\nmax_epochs = 4\npatience = 2\njobs = 2\n\n\
             [output]\ndir = {}\n",
            data.display(),
            teacher.display(),
            out.display()
        ),
    )
    .unwrap();
    let status = bin().args(["distill", "--spec"]).arg(&spec_path).status().unwrap();
    assert!(status.success());
    let table = std::fs::read_to_string(out.join("reports/results_table.txt")).unwrap();
    assert!(table.contains("ce-only"));
    assert!(table.contains("ckd"));
    assert!(table.contains("n=40"));
    assert!(out.join("manifest.txt").exists());
    assert!(out.join("logs/runs.jsonl").exists());

    // report rebuilds the same aggregate cells from the log
    let output = bin()
        .args(["report", "--runs"])
        .arg(out.join("logs/runs.jsonl"))
        .output()
        .unwrap();
    assert!(output.status.success());
    let printed = String::from_utf8_lossy(&output.stdout);
    for line in table.lines().skip(2) {
        let cell = line.split_whitespace().last().unwrap();
        assert!(printed.contains(cell), "missing cell {cell} in report output");
    }
}

#[test]
fn ablate_k_at_two_matches_distill_ckd() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path());
    let teacher = train_teacher(dir.path(), &data);
    let common: Vec<String> = [
        "--student", "6,6,4", "--seeds", "1,2", "--lrs", "0.05", "--batch-size", "16",
        "--max-epochs", "4", "--patience", "2", "--budget", "40", "--jobs", "2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();

    let distill_out = dir.path().join("distill");
    let status = bin()
        .args(["distill", "--data"])
        .arg(&data)
        .arg("--teacher")
        .arg(&teacher)
        .args(["--methods", "ckd", "--k", "2"])
        .args(&common)
        .arg("--out")
        .arg(&distill_out)
        .status()
        .unwrap();
    assert!(status.success());

    let ablate_out = dir.path().join("ablate");
    let status = bin()
        .args(["ablate-k", "--data"])
        .arg(&data)
        .arg("--teacher")
        .arg(&teacher)
        .args(["--k-grid", "2,3"])
        .args(&common)
        .arg("--out")
        .arg(&ablate_out)
        .status()
        .unwrap();
    assert!(status.success());

    // the k=2 ablation point reproduces the distill ckd cell
    let table = std::fs::read_to_string(distill_out.join("reports/results_table.txt")).unwrap();
    let cell = table
        .lines()
        .find(|l| l.starts_with("ckd"))
        .unwrap()
        .split_whitespace()
        .last()
        .unwrap()
        .to_string();
    let curve = std::fs::read_to_string(ablate_out.join("reports/k_ablation_table.txt")).unwrap();
    let k2_row = curve.lines().find(|l| l.starts_with("2 ")).unwrap();
    assert!(
        k2_row.contains(&cell),
        "k=2 row '{k2_row}' does not match distill cell '{cell}'"
    );
}

#[test]
fn white_box_without_flag_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path());
    let teacher = train_teacher(dir.path(), &data);
    let output = bin()
        .args(["distill", "--data"])
        .arg(&data)
        .arg("--teacher")
        .arg(&teacher)
        .args([
            "--methods",
            "fitnets",
            "--budget",
            "40",
            "--student",
            "6,6,4",
            "--seeds",
            "1",
            "--lrs",
            "0.05",
            "--max-epochs",
            "2",
            "--out",
        ])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("white-box"), "stderr: {stderr}");
}
