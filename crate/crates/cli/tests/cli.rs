//! Drive the built binary the way a user would: write a config, run the
//! subcommands in order, and check the files and output they leave behind.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sca"))
        .args(args)
        .output()
        .expect("binary should launch")
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("cell.cfg");
    let text = format!(
        "defense = none\n\
         threat_model = split\n\
         seed = 5\n\
         epochs = 2\n\
         synth_per_class = 12\n\
         attack_epochs = 4\n\
         surrogate_hidden = 32\n\
         out_dir = {}\n",
        dir.join("runs").display()
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();

    let train = sca(&["train", cfg]);
    assert!(train.status.success(), "train failed: {train:?}");
    let stdout = String::from_utf8_lossy(&train.stdout);
    assert!(stdout.contains("test accuracy"), "missing accuracy line: {stdout}");
    assert!(stdout.contains("checkpoint written"), "missing path line: {stdout}");

    let eval = sca(&["evaluate", cfg]);
    assert!(eval.status.success(), "evaluate failed: {eval:?}");
    assert!(String::from_utf8_lossy(&eval.stdout).contains("train accuracy"));

    let attack = sca(&["attack", cfg]);
    assert!(attack.status.success(), "attack failed: {attack:?}");
    assert!(String::from_utf8_lossy(&attack.stdout).contains("psnr"));

    let csv = dir.path().join("runs/results.csv");
    assert!(csv.exists());

    let report = sca(&["report", csv.to_str().unwrap()]);
    assert!(report.status.success(), "report failed: {report:?}");
    let table = String::from_utf8_lossy(&report.stdout);
    assert!(table.contains("| Defense |"), "not a table: {table}");
    assert!(table.contains("| none |"));
}

#[test]
fn seed_override_changes_the_result_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();

    assert!(sca(&["train", cfg]).status.success());
    assert!(sca(&["attack", cfg]).status.success());
    // A different attack stream against the same checkpoint: new inverter
    // init and noise draws, so the row must differ.
    assert!(sca(&["attack", cfg, "--seed-attack", "99"]).status.success());

    let csv = fs::read_to_string(dir.path().join("runs/results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "header plus two rows: {csv}");
    assert_ne!(lines[1], lines[2], "seed override must change the row");
}

#[test]
fn config_errors_reach_stderr_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.cfg");
    fs::write(&path, "defense = none\nseed = 1\nwat\n").unwrap();
    let out = sca(&["train", path.to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 3"), "stderr should cite the line: {stderr}");
}

#[test]
fn attacking_without_a_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = sca(&["attack", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn reserved_defense_ids_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gan.cfg");
    fs::write(&path, "defense = gan\nseed = 1\n").unwrap();
    let out = sca(&["train", path.to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("scope"), "should name the scope problem: {stderr}");
}
