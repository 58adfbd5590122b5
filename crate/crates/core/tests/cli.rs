use dat_core::cli::dispatch;
use std::fs;
use std::path::Path;
use std::process::Command;

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["dat"];
    argv.extend_from_slice(args);
    dispatch(argv)
}

const SMALL: [&str; 8] = [
    "--set", "bank_size=1500",
    "--set", "n_per_class=10",
    "--set", "epochs=2",
    "--set", "holdout_per_class=20",
];

fn generate(dir: &Path) {
    let d = dir.to_str().unwrap();
    let mut args = vec!["synth-gen", "-o", d];
    args.extend_from_slice(&SMALL);
    assert_eq!(run(&args), 0);
    let mut args = vec!["sample", "-o", d];
    args.extend_from_slice(&SMALL);
    assert_eq!(run(&args), 0);
}

#[test]
fn gradcheck_passes() {
    assert_eq!(run(&["gradcheck", "--seed", "0"]), 0);
}

#[test]
fn flags_reproduce_the_supervised_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path());
    let d = tmp.path().to_str().unwrap();
    let a = tmp.path().join("flags");
    let b = tmp.path().join("keys");
    let mut args = vec!["train", "-o", a.to_str().unwrap(), "--no-unlabeled", "--no-contrastive", "--mu", "0"];
    args.extend_from_slice(&SMALL);
    let data = format!("dataset={d}/dataset.datd");
    let hold = format!("holdout={d}/holdout.datd");
    args.extend_from_slice(&["--set", &data, "--set", &hold]);
    assert_eq!(run(&args), 0);
    let mut args = vec!["train", "-o", b.to_str().unwrap(), "--set", "eta=0", "--set", "lambda=0", "--set", "mu=0"];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(&["--set", &data, "--set", &hold]);
    assert_eq!(run(&args), 0);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("checkpoint.datc")).unwrap(), fs::read(b.join("checkpoint.datc")).unwrap());
}

#[test]
fn sample_reports_precision_above_base_rate() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().to_str().unwrap();
    assert_eq!(run(&["synth-gen", "-o", d, "--set", "rho_in=0.25", "--set", "bank_size=4000"]), 0);
    assert_eq!(run(&["sample", "-o", d, "--set", "rho_in=0.25", "--set", "bank_size=4000"]), 0);
    let report = fs::read_to_string(tmp.path().join("precision.txt")).unwrap();
    let p: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("precision = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(p > 0.25, "{report}");
}

#[test]
fn resolved_config_replays_bit_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path());
    let d = tmp.path().to_str().unwrap();
    let mut args = vec!["train", "-o", d, "--set", "anchor_reduction=mean", "--set", "tau=0.2"];
    args.extend_from_slice(&SMALL);
    assert_eq!(run(&args), 0);
    let metrics = fs::read(tmp.path().join("metrics.csv")).unwrap();
    let ckpt = fs::read(tmp.path().join("checkpoint.datc")).unwrap();
    let replay = tmp.path().join("replay");
    let cfg = tmp.path().join("resolved-config");
    assert_eq!(run(&["train", "-c", cfg.to_str().unwrap(), "-o", replay.to_str().unwrap()]), 0);
    assert_eq!(fs::read(replay.join("metrics.csv")).unwrap(), metrics);
    assert_eq!(fs::read(replay.join("checkpoint.datc")).unwrap(), ckpt);
    let ck = tmp.path().join("checkpoint.datc");
    assert_eq!(run(&["eval", "-o", d, "--checkpoint", ck.to_str().unwrap()]), 0);
    assert_eq!(run(&["inspect", ck.to_str().unwrap()]), 0);
}

#[test]
fn sweep_writes_cells_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path());
    let d = tmp.path().to_str().unwrap();
    let mut args = vec!["sweep", "-o", d, "--mus", "2,3", "--thresholds", "0.5,0.95"];
    args.extend_from_slice(&SMALL);
    assert_eq!(run(&args), 0);
    let summary = fs::read_to_string(tmp.path().join("sweep/summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "mu,t_thresh,final_acc");
    assert_eq!(&lines[1][..8], "2,0.5,0.");
    assert_eq!(lines.len(), 5);
    assert!(tmp.path().join("sweep/mu3_t0.95/metrics.csv").exists());
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["train", "--set", "no_such_key=1"]), 1);
    assert_eq!(run(&["train", "--set", "t_thresh=1.5"]), 1);
    assert_eq!(run(&["inspect", "/nonexistent/file.datb"]), 2);
    assert_eq!(run(&["train", "-c", "/nonexistent/config"]), 2);
    assert_eq!(run(&["bogus-command"]), 1);
    let tmp = tempfile::tempdir().unwrap();
    let junk = tmp.path().join("junk");
    fs::write(&junk, b"DATBxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxx").unwrap();
    assert_eq!(run(&["inspect", junk.to_str().unwrap()]), 1);
}

#[test]
fn binary_help_lists_keys() {
    let out = Command::new(env!("CARGO_BIN_EXE_dat")).arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for key in ["stage1_multiplier", "anchor_reduction", "t_thresh", "memory_budget_bytes"] {
        assert!(text.contains(key), "{key}");
    }
    let out = Command::new(env!("CARGO_BIN_EXE_dat")).args(["gradcheck", "--seed", "3"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}
