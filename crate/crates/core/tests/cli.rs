use std::path::Path;
use std::process::{Command, Output};

fn dfqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfqa")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = "\
task.frames = 8
task.height = 3
task.width = 3
task.event_frames = 2
task.patch = 2
task.train_size = 6
task.test_size = 4
model.d_model = 8
model.heads = 2
sampler.queries = 4
sampler.layers = 1
dep.heads = 2
train.epochs = 1
train.batch_size = 3
";

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.conf");
    std::fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn memmodel_reports_the_deformable_sequence_length() {
    let o = dfqa(&[
        "memmodel",
        "--strategy",
        "dsr",
        "--frames",
        "32",
        "--queries",
        "25",
        "--qlen",
        "100",
    ]);
    assert!(o.status.success());
    let rec: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(rec["sequence_len"], 157);
    assert_eq!(rec["cost"], 157.0 * 157.0);
}

#[test]
fn memmodel_table_lists_each_strategy_and_frame_count() {
    let o = dfqa(&["memmodel", "--frames", "8,32"]);
    assert!(o.status.success());
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    let baseline = lines.iter().find(|r| r["strategy"] == "baseline").unwrap();
    assert_eq!(baseline["max_frames"], 60);
}

#[test]
fn check_passes_on_a_fresh_build() {
    let o = dfqa(&["check"]);
    assert!(o.status.success(), "{}", stdout(&o));
    for line in stdout(&o).lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(rec["passed"], true, "{line}");
    }
}

#[test]
fn usage_errors_exit_nonzero() {
    let o = dfqa(&["frobnicate"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = dfqa(&["memmodel", "--no-such-flag"]);
    assert!(!o.status.success());
    let o = dfqa(&["gen", "--set", "task.nonsense=3"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("task.nonsense"));
    let o = dfqa(&[]);
    assert!(!o.status.success());
}

#[test]
fn sweep_writes_one_trial_per_arm_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let conf = small_config(dir.path());
    let report = dir.path().join("report.json");
    let o = dfqa(&[
        "sweep",
        "--config",
        &conf,
        "--seeds",
        "5",
        "--strategies",
        "dense,sparse",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["trials"].as_array().unwrap().len(), 10);
    assert_eq!(r["summaries"].as_array().unwrap().len(), 2);
    assert_eq!(r["comparisons"].as_array().unwrap().len(), 1);
}

#[test]
fn gen_train_eval_dump_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let conf = small_config(dir.path());
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();

    let o = dfqa(&["gen", "-c", &conf, "--out", &p("data.jsonl")]);
    assert!(o.status.success());
    let data = std::fs::read_to_string(p("data.jsonl")).unwrap();
    assert_eq!(data.lines().count(), 1 + 6 + 4);

    let o = dfqa(&[
        "train",
        "-c",
        &conf,
        "--data",
        &p("data.jsonl"),
        "--checkpoint",
        &p("model.ckpt"),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let steps: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(steps.len(), 2);
    assert!(steps.iter().all(|s| s["loss"].as_f64().unwrap().is_finite()));

    let o = dfqa(&[
        "eval",
        "-c",
        &conf,
        "--data",
        &p("data.jsonl"),
        "--checkpoint",
        &p("model.ckpt"),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rec: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    let acc = rec["test_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    // A checkpoint only loads into the configuration it was trained with.
    let o = dfqa(&[
        "eval",
        "-c",
        &conf,
        "--set",
        "model.layers=1",
        "--checkpoint",
        &p("model.ckpt"),
    ]);
    assert!(!o.status.success());

    let o = dfqa(&[
        "dump-samples",
        "-c",
        &conf,
        "--checkpoint",
        &p("model.ckpt"),
        "--index",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // 4 queries x 1 layer x 4 heads x 8 points.
    assert_eq!(stdout(&o).lines().count(), 4 * 4 * 8);
}
