use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};
use tempfile::tempdir;

fn prcaps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prcaps"))
        .args(args)
        .env_remove("PRCAPS_NUM_THREADS")
        .output()
        .expect("failed to launch prcaps")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("killed by signal")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A small cycle/clique problem and a small model, for fast runs.
fn write_small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(
        &path,
        r#"
[data.synthetic]
family = "CYCLE_CLIQUE"
cycles = 3
cliques = 3

[model]
encoder_dim = 8
capsule_layers = 2
space_dim = 2
time_dim = 2
primary_capsules = 3
hidden_capsules = 3

[model.routing]
perspectives = 2
iterations = 2

[train]
epochs = 4
"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_without_a_dataset_names_the_missing_field() {
    let dir = tempdir().unwrap();
    let o = prcaps(&["train", "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("data.path"), "{}", stderr(&o));
}

#[test]
fn train_on_a_nonexistent_dataset_is_an_io_error() {
    let dir = tempdir().unwrap();
    let o = prcaps(&["train", "--data", s(&dir.path().join("nowhere")), "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn invalid_flags_and_configs_exit_with_code_two() {
    let dir = tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let out = dir.path().join("run");
    let o = prcaps(&["train", "--config", &cfg, "--K", "0", "--out", s(&out)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nno_such_key = 1\n").unwrap();
    let o = prcaps(&["train", "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn tree_quick_run_writes_one_report_row_per_epoch() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("tree");
    let o = prcaps(&["gen-synthetic", "--family", "TREE", "--out", s(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = dir.path().join("run");
    let t0 = Instant::now();
    let o = prcaps(&["train", "--data", s(&data), "--out", s(&out)]);
    let elapsed = t0.elapsed();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(elapsed <= Duration::from_secs(60), "took {elapsed:?}");
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 100);
    for f in ["checkpoint.prcaps", "resolved_config.toml", "timing.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn same_seed_gives_identical_reports() {
    let dir = tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = prcaps(&["train", "--config", &cfg, "--seed", "7", "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        reports.push(std::fs::read(out.join("report.csv")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let out = dir.path().join("c");
    let o = prcaps(&["train", "--config", &cfg, "--seed", "8", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_ne!(std::fs::read(out.join("report.csv")).unwrap(), reports[0]);
}

#[test]
fn refuses_to_clobber_without_overwrite() {
    let dir = tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let out = dir.path().join("run");
    let args = ["train", "--config", &cfg, "--out", s(&out)];
    assert_eq!(code(&prcaps(&args)), 0);
    let before = std::fs::read(out.join("report.csv")).unwrap();
    let o = prcaps(&args);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("--overwrite"), "{}", stderr(&o));
    let mut again = args.to_vec();
    again.push("--overwrite");
    assert_eq!(code(&prcaps(&again)), 0);
    assert_eq!(std::fs::read(out.join("report.csv")).unwrap(), before);
}

#[test]
fn gen_synthetic_summary_reload_and_determinism() {
    let dir = tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let args = |out: &Path| {
        vec![
            "gen-synthetic".to_string(),
            "--family".into(),
            "TREE".into(),
            "--depth".into(),
            "3".into(),
            "--branching".into(),
            "2".into(),
            "--seed".into(),
            "9".into(),
            "--out".into(),
            s(out).into(),
        ]
    };
    let run = |out: &Path| {
        let v = args(out);
        prcaps(&v.iter().map(String::as_str).collect::<Vec<_>>())
    };
    let o = run(&a);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "15 nodes 14 edges 2 classes");
    assert_eq!(code(&run(&b)), 0);
    let mut files: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    files.sort();
    assert!(!files.is_empty());
    for f in &files {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f:?}");
    }

    // The written dataset trains as-is.
    let out = dir.path().join("run");
    let cfg = write_small_config(dir.path());
    let o = prcaps(&["train", "--config", &cfg, "--data", s(&a), "--epochs", "2", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn gen_synthetic_rejects_an_invalid_spec() {
    let dir = tempdir().unwrap();
    let o = prcaps(&["gen-synthetic", "--family", "TREE", "--branching", "0", "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = prcaps(&["gen-synthetic", "--noise", "1.5", "--out", s(&dir.path().join("y"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn eval_and_export_embeddings_from_a_checkpoint() {
    let dir = tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let out = dir.path().join("run");
    assert_eq!(code(&prcaps(&["train", "--config", &cfg, "--out", s(&out)])), 0);
    let ck = out.join("checkpoint.prcaps");

    let o = prcaps(&["eval", "--checkpoint", s(&ck)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for key in ["train_acc=", "val_acc=", "test_acc="] {
        assert!(stdout(&o).contains(key), "{}", stdout(&o));
    }

    let emb = dir.path().join("emb");
    let o = prcaps(&["export-embeddings", "--checkpoint", s(&ck), "--out", s(&emb)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(emb.join("embeddings.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&header[..2], &["id", "label"]);
    // 3 cycles and 3 cliques of 4 nodes; tangent dim s + t = 4.
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 24);
    for r in &rows {
        assert_eq!(r.len(), 2 + 4);
        assert!(r[2..].iter().all(|v| v.parse::<f64>().unwrap().is_finite()));
    }
}

#[test]
fn export_with_a_mismatched_dataset_exits_with_code_two() {
    let dir = tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let out = dir.path().join("run");
    assert_eq!(code(&prcaps(&["train", "--config", &cfg, "--out", s(&out)])), 0);
    let other = dir.path().join("tree");
    assert_eq!(code(&prcaps(&["gen-synthetic", "--family", "TREE", "--depth", "3", "--out", s(&other)])), 0);
    let o = prcaps(&[
        "export-embeddings",
        "--checkpoint",
        s(&out.join("checkpoint.prcaps")),
        "--data",
        s(&other),
        "--out",
        s(&dir.path().join("emb")),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn ablate_routing_classifier_grid_writes_a_six_row_summary() {
    let dir = tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let out = dir.path().join("abl");
    let o = prcaps(&["ablate", "--config", &cfg, "--seeds", "2", "--epochs", "2", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 6, "{summary}");
    let header: Vec<&str> = summary.lines().next().unwrap().split(',').collect();
    let mean_col = header.iter().position(|h| *h == "mean_test_acc").expect("mean_test_acc column");
    for r in rows {
        let mean: f64 = r.split(',').nth(mean_col).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&mean), "{r}");
    }
}

#[test]
fn thread_count_must_be_a_positive_integer() {
    let dir = tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let o = Command::new(env!("CARGO_BIN_EXE_prcaps"))
        .args(["ablate", "--config", &cfg, "--seeds", "1", "--out", s(&dir.path().join("abl"))])
        .env("PRCAPS_NUM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("PRCAPS_NUM_THREADS"), "{}", stderr(&o));
}
