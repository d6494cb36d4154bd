use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nextdit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut all = args.to_vec();
    all.extend(["--out", out]);
    run(&all)
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let header = rdr.headers().unwrap().iter().map(String::from).collect();
    let rows = rdr
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

#[test]
fn help_exits_zero_and_usage_errors_exit_two() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["schedule", "--help"])), 0);
    assert_eq!(code(&run(&["no-such-command"])), 2);
    assert_eq!(code(&run(&["schedule", "--bogus"])), 2);
    assert_eq!(code(&run(&["schedule", "--steps", "many"])), 2);
}

#[test]
fn invalid_values_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["schedule", "--kind", "cubic"][..],
        &["schedule", "--kind", "rational", "--sigma", "0.5", "--form", "literal"],
        &["schedule", "--steps", "0"],
        &["partition", "--height", "448", "--max-patches", "64", "--max-aspect", "4"],
        &["partition", "--height", "448", "--width", "224", "--max-patches", "64", "--max-aspect", "0.5"],
        &["rope-scan", "--dhead", "25"],
        &["rope-scan", "--scale", "0.5"],
        &["sample", "--context-drop", "0.5"],
        &["gen"],
        &["probe", "--norm", "layer"],
    ] {
        let o = run_in(dir.path(), args);
        assert_eq!(code(&o), 2, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let ghost = dir.path().join("nowhere");
    let o = run_in(dir.path(), &["gen", "--checkpoint", ghost.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn schedule_matches_the_golden_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["schedule"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = csv_rows(&dir.path().join("schedule.csv"));
    assert_eq!(header, ["i", "t"]);
    let golden: Vec<f64> = include_str!("golden/schedule_default.csv")
        .lines()
        .skip(1)
        .map(|l| l.split_once(',').unwrap().1.parse().unwrap())
        .collect();
    assert_eq!(rows.len(), golden.len());
    for (i, (row, want)) in rows.iter().zip(&golden).enumerate() {
        assert_eq!(row[0], i.to_string());
        let t: f64 = row[1].parse().unwrap();
        assert!((t - want).abs() <= 1e-12, "t_{i}: {t} vs {want}");
    }
    assert_eq!(rows[0][1].parse::<f64>().unwrap(), 0.0);
    assert_eq!(rows[20][1].parse::<f64>().unwrap(), 1.0);
}

#[test]
fn flags_override_config_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"kind": "uniform", "steps": 10}"#).unwrap();
    let cfg = cfg.to_str().unwrap();

    let o = run_in(dir.path(), &["schedule", "--config", cfg]);
    assert_eq!(code(&o), 0);
    let (_, rows) = csv_rows(&dir.path().join("schedule.csv"));
    assert_eq!(rows.len(), 11);
    assert_eq!(rows[5][1].parse::<f64>().unwrap(), 0.5);

    let o = run_in(dir.path(), &["schedule", "--config", cfg, "--steps", "4"]);
    assert_eq!(code(&o), 0);
    let (_, rows) = csv_rows(&dir.path().join("schedule.csv"));
    let ts: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(ts, [0.0, 0.25, 0.5, 0.75, 1.0]);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"kind": "uniform", "stpes": 10}"#).unwrap();
    assert_eq!(code(&run_in(dir.path(), &["schedule", "--config", bad.to_str().unwrap()])), 2);
    let missing = dir.path().join("missing.json");
    assert_eq!(code(&run_in(dir.path(), &["schedule", "--config", missing.to_str().unwrap()])), 2);
}

#[test]
fn analytic_sampling_is_reproducible_and_lands_on_the_target() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let args = ["sample", "--solver", "rk4", "--schedule", "uniform", "--steps", "32", "--n", "2048", "--seed", "3"];
    assert_eq!(code(&run_in(a.path(), &args)), 0);
    assert_eq!(code(&run_in(b.path(), &args)), 0);
    let read = |d: &Path| fs::read(d.join("samples.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    let mut other = args.to_vec();
    *other.last_mut().unwrap() = "4";
    assert_eq!(code(&run_in(c.path(), &other)), 0);
    assert_ne!(read(a.path()), read(c.path()));

    let (header, rows) = csv_rows(&a.path().join("samples.csv"));
    assert_eq!(header, ["x0", "x1"]);
    assert_eq!(rows.len(), 2048);
    for d in 0..2 {
        let col: Vec<f64> = rows.iter().map(|r| r[d].parse().unwrap()).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
        assert!((mean - 2.0).abs() < 0.05 && (sd - 0.5).abs() < 0.05, "{mean} {sd}");
    }
}

#[test]
fn negative_means_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["sample", "--mean", "-1,3,0.5", "--n", "16"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (header, _) = csv_rows(&dir.path().join("samples.csv"));
    assert_eq!(header, ["x0", "x1", "x2"]);
}

#[test]
fn diagnose_writes_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["diagnose", "--steps", "20", "--n", "64"]);
    assert_eq!(code(&o), 0);
    let (header, rows) = csv_rows(&dir.path().join("diagnose.csv"));
    assert_eq!(header, ["i", "t", "tau", "kappa"]);
    assert_eq!(rows.len(), 20);
    assert!(rows[0][3].is_empty());
    assert!(rows[10][3].parse::<f64>().unwrap() > 0.0);
}

#[test]
fn rope_scan_lists_every_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["rope-scan"]);
    assert_eq!(code(&o), 0);
    let (_, rows) = csv_rows(&dir.path().join("ropescan.csv"));
    assert_eq!(rows.len(), 60);
    let names: std::collections::BTreeSet<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names.len(), 5);
}

#[test]
fn partition_picks_the_aspect_matched_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(
        dir.path(),
        &["partition", "--height", "448", "--width", "224", "--max-patches", "128", "--max-aspect", "4"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = String::from_utf8(o.stdout).unwrap();
    assert!(summary.contains("grid (16,8)") && summary.contains("256x128"), "{summary}");
    let (header, rows) = csv_rows(&dir.path().join("candidates.csv"));
    assert_eq!(header, ["h_p", "w_p", "height", "width", "score", "chosen"]);
    let chosen: Vec<_> = rows.iter().filter(|r| r[5] == "true").collect();
    assert_eq!(chosen.len(), 1);
    assert_eq!((chosen[0][0].as_str(), chosen[0][1].as_str()), ("16", "8"));
}

#[test]
fn probe_writes_both_norm_styles() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["probe", "--layers", "3", "--samples", "8", "--timesteps", "0,1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["probe_sandwich.csv", "probe_prenorm.csv"] {
        let (header, rows) = csv_rows(&dir.path().join(name));
        assert_eq!(header, ["layer", "t", "rms_mean", "rms_max"]);
        assert_eq!(rows.len(), 2 * 4);
    }
}

#[test]
fn train_then_generate_from_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["train", "--steps", "20", "--batch", "32", "--dim", "16", "--blocks", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = csv_rows(&dir.path().join("loss.csv"));
    assert_eq!(header, ["step", "loss"]);
    assert_eq!(rows.len(), 20);
    assert!(dir.path().join("checkpoint/manifest.json").exists());
    let pgm = fs::read(dir.path().join("density.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n128 128\n255\n"));
    assert_eq!(pgm.len(), b"P5\n128 128\n255\n".len() + 128 * 128);

    let ckpt = dir.path().join("checkpoint");
    let gen_dir = tempfile::tempdir().unwrap();
    let args = ["gen", "--checkpoint", ckpt.to_str().unwrap(), "--n", "100", "--pixels", "32", "--context-drop", "0.75"];
    let o = run_in(gen_dir.path(), &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (_, rows) = csv_rows(&gen_dir.path().join("samples.csv"));
    assert_eq!(rows.len(), 100);
    assert!(rows.iter().flatten().all(|v| v.parse::<f64>().unwrap().is_finite()));
    let pgm = fs::read(gen_dir.path().join("density.pgm")).unwrap();
    assert_eq!(pgm.len(), b"P5\n32 32\n255\n".len() + 32 * 32);
}
