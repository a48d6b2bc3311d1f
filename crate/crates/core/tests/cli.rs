mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use common::{fixture_config, write_config, write_fixture};
use qmatch::model::load_checkpoint;
use qmatch::train::{read_results, Task, TrialResult};

fn qmatch(args: &[&str], data_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qmatch"))
        .args(args)
        .env("QMATCH_DATA_DIR", data_dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    data: std::path::PathBuf,
    out: std::path::PathBuf,
    config: std::path::PathBuf,
}

fn fixture(rows: usize, edit: impl FnOnce(&mut serde_json::Value)) -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("out");
    fs::create_dir_all(&data).unwrap();
    write_fixture(&data, rows, 7);
    let mut cfg = fixture_config(&data, &out);
    edit(&mut cfg);
    let config = write_config(&tmp.path().join("run.json"), &cfg);
    Fixture {
        _tmp: tmp,
        data,
        out,
        config,
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn dry_run_prints_resolved_config_without_writing() {
    let f = fixture(400, |_| {});
    let o = qmatch(
        &[
            "pretrain",
            "--config",
            s(&f.config),
            "--seeds",
            "3,4",
            "--algorithm",
            "vime",
            "--dry-run",
        ],
        &f.data,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cfg: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(cfg["seeds"], serde_json::json!([3, 4]));
    assert_eq!(cfg["algorithm"], "vime");
    assert_eq!(cfg["encoder"]["layer_widths"], serde_json::json!([32, 32, 64]));
    assert!(!f.out.exists());
}

#[test]
fn prepare_data_manifests_are_byte_identical_on_rerun() {
    let f = fixture(400, |_| {});
    let first = qmatch(&["prepare-data", "--config", s(&f.config)], &f.data);
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    assert!(stdout(&first).contains("test 60"), "{}", stdout(&first));
    let splits = fs::read(f.out.join("splits.json")).unwrap();
    let prep = fs::read(f.out.join("preprocess.json")).unwrap();
    let again = qmatch(&["prepare-data", "--config", s(&f.config)], &f.data);
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(fs::read(f.out.join("splits.json")).unwrap(), splits);
    assert_eq!(fs::read(f.out.join("preprocess.json")).unwrap(), prep);
}

#[test]
fn preset_on_wrong_shaped_csv_is_a_schema_error() {
    let tmp = tempfile::tempdir().unwrap();
    let schema = r#"{"name":"adult","columns":[
        {"name":"a","type":"numeric"},{"name":"b","type":"numeric"},{"name":"y","type":"label"}]}"#;
    fs::write(tmp.path().join("adult.schema.json"), schema).unwrap();
    fs::write(tmp.path().join("adult.csv"), "a,b,y\n1,2\n").unwrap();
    let out = tmp.path().join("out");
    let o = qmatch(
        &["prepare-data", "--preset", "adult-1pct", "--out", s(&out)],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(
        stderr(&o).contains("schema adult expects 3 fields, found 2"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn config_errors_exit_with_two() {
    let f = fixture(400, |c| c["learning_rate"] = serde_json::json!(1.0));
    assert_eq!(
        qmatch(&["pretrain", "--config", s(&f.config)], &f.data).status.code(),
        Some(2)
    );
    assert_eq!(
        qmatch(&["pretrain", "--preset", "iris-1pct"], &f.data).status.code(),
        Some(2)
    );
    assert_eq!(qmatch(&["explode"], &f.data).status.code(), Some(2));
    assert_eq!(
        qmatch(&["pretrain", "--algorithm", "byol"], &f.data).status.code(),
        Some(2)
    );
    assert_eq!(qmatch(&["--help"], &f.data).status.code(), Some(0));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let f = fixture(400, |_| {});
    let o = qmatch(&["linear-eval", "--config", s(&f.config)], &f.data);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("run pretrain first"), "{}", stderr(&o));
}

#[test]
fn pretrain_then_evaluate_and_report() {
    let f = fixture(400, |_| {});
    let start = Instant::now();
    let o = qmatch(&["pretrain", "--config", s(&f.config), "--seed", "1"], &f.data);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(start.elapsed().as_secs() < 60);

    let ckpt = load_checkpoint::<f32>(f.out.join("qmatch-seed1.ckpt"), None).unwrap();
    assert_eq!(ckpt.meta.algorithm, "qmatch");
    assert_eq!(ckpt.meta.seed, 1);
    assert!(ckpt.params.all_finite());
    assert!(ckpt.ema.is_some());
    assert!(ckpt.array("queue").is_some());
    assert!(ckpt.meta.extra["queue_mean_cosine"].as_f64().unwrap() < 0.9);

    for cmd in ["linear-eval", "finetune"] {
        let o = qmatch(&[cmd, "--config", s(&f.config), "--seed", "1"], &f.data);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", stderr(&o));
    }
    let results = f.out.join("results.jsonl");
    let rows = read_results(&results).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0].task, rows[1].task), (Task::Linear, Task::Finetune));

    let report_dir = f.out.join("report");
    let o = qmatch(&["report", s(&results), "--out", s(&report_dir)], &f.data);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("± 0.00"), "{text}");
    assert_eq!(fs::read_to_string(report_dir.join("report.txt")).unwrap(), text);
    let json: serde_json::Value = serde_json::from_slice(&fs::read(report_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["linear"]["cells"]["qmatch"]["fixture"]["std"], 0.0);
    assert_eq!(json["linear"]["average_rank"]["qmatch"], 1.0);
}

#[test]
fn supervised_baseline_needs_no_checkpoint() {
    let f = fixture(400, |_| {});
    let o = qmatch(
        &[
            "linear-eval",
            "--config",
            s(&f.config),
            "--algorithm",
            "supervised",
            "--seeds",
            "0,1",
        ],
        &f.data,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("over 2 seeds"));
    let o = qmatch(
        &["pretrain", "--config", s(&f.config), "--algorithm", "supervised"],
        &f.data,
    );
    assert_eq!(o.status.code(), Some(2));
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|x| x.unwrap().iter().map(String::from).collect())
        .collect()
}

#[test]
fn corruption_heatmap_has_one_row_per_cell() {
    let f = fixture(400, |c| {
        c["sweep"] = serde_json::json!({"p_student": [0.0, 0.3], "p_teacher": [0.0, 0.5]});
        c["pretext_loop"]["max_epochs"] = serde_json::json!(2);
        c["pretext_loop"]["patience"] = serde_json::json!(1);
    });
    let o = qmatch(&["sweep", "corruption-heatmap", "--config", s(&f.config)], &f.data);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = csv_rows(&f.out.join("sweep-corruption-heatmap.csv"));
    assert_eq!(rows.len(), 4);
    let cells: Vec<(String, String)> = rows.iter().map(|r| (r[0].clone(), r[1].clone())).collect();
    for pt in ["0", "0.5"] {
        for ps in ["0", "0.3"] {
            assert!(cells.contains(&(pt.to_string(), ps.to_string())), "{cells:?}");
        }
    }
    assert!(rows.iter().all(|r| r.iter().all(|v| !v.is_empty())));
    assert_eq!(csv_rows(&f.out.join("sweep-corruption-heatmap-summary.csv")).len(), 4);
}

#[test]
fn queue_size_sweep_has_one_row_per_size_and_seed() {
    let f = fixture(400, |c| {
        c["sweep"] = serde_json::json!({"queue_sizes": [512, 2048]});
        c["pretext_loop"]["max_epochs"] = serde_json::json!(2);
        c["pretext_loop"]["patience"] = serde_json::json!(1);
    });
    let o = qmatch(
        &["sweep", "queue-size", "--config", s(&f.config), "--seeds", "0,1"],
        &f.data,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = csv_rows(&f.out.join("sweep-queue-size.csv"));
    let keys: Vec<(&str, &str)> = rows.iter().map(|r| (r[0].as_str(), r[1].as_str())).collect();
    assert_eq!(keys, [("512", "0"), ("512", "1"), ("2048", "0"), ("2048", "1")]);
}

fn result(alg: &str, ds: &str, acc: f64) -> TrialResult {
    TrialResult {
        algorithm: alg.into(),
        dataset: ds.into(),
        task: Task::Linear,
        hyperparameters: Default::default(),
        seed: 0,
        val_accuracy: acc,
        test_accuracy: acc,
        wall_time_s: 0.0,
        failed: None,
    }
}

#[test]
fn report_on_two_algorithms_and_two_datasets() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("r.jsonl");
    qmatch::train::append_results(
        &path,
        &[
            result("a", "x", 90.0),
            result("b", "x", 80.0),
            result("a", "y", 60.0),
            result("b", "y", 70.0),
            result("a", "y", 62.0),
        ],
    )
    .unwrap();
    let o = qmatch(&["report", s(&path)], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
    assert_eq!(lines.len(), 4, "{text}");
    assert!(lines[1].contains('x') && lines[1].contains('y') && lines[1].trim_end().ends_with("rank"));
    assert!(lines[2].starts_with('a') && lines[2].contains("61.00 ± 1.41") && lines[2].trim_end().ends_with("1.5"));
    assert!(lines[3].starts_with('b') && lines[3].trim_end().ends_with("1.5"));
}
