use std::path::Path;
use std::process::{Command, Output};

use pruner_core::engine::records_from_jsonl;
use pruner_core::problem::{gemm, workload_to_toml, SubgraphTask};
use serde_json::Value;

fn pruner(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pruner"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = pruner(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &[&str] = &[
    "--trials", "30", "--rounds", "6", "--batch", "5", "--pop-size", "32", "--n-steps", "4",
    "--draft-size", "24", "--hidden", "8", "--train-epochs", "2",
];

fn tune_into(dir: &Path, seed: &str, threads: &str) {
    let mut args = vec!["--threads", threads, "tune", "--seed", seed, "--out", path(dir)];
    args.extend_from_slice(SMALL);
    ok(&args);
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    ["records.jsonl", "best_schedules.json", "curve.csv", "curve.json", "summary.json"]
        .iter()
        .map(|f| (f.to_string(), std::fs::read(dir.join(f)).unwrap()))
        .collect()
}

#[test]
fn tune_is_byte_identical_across_runs_and_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    tune_into(&a, "7", "1");
    tune_into(&b, "7", "1");
    tune_into(&c, "7", "2");
    assert_eq!(artifacts(&a), artifacts(&b));
    assert_eq!(artifacts(&a), artifacts(&c));

    let d = tmp.path().join("d");
    tune_into(&d, "8", "1");
    assert_ne!(artifacts(&a)[0], artifacts(&d)[0]);
}

#[test]
fn tune_artifacts_are_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    tune_into(tmp.path(), "3", "1");
    let log = records_from_jsonl(&std::fs::read_to_string(tmp.path().join("records.jsonl")).unwrap()).unwrap();
    assert_eq!(log.len(), 30);
    let summary: Value = serde_json::from_slice(&std::fs::read(tmp.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["trials"], 30);
    // at most draft_size + batch learned-model forwards per round
    assert!(summary["max_invocations_per_round"].as_u64().unwrap() <= 24 + 5);
    for t in summary["tasks"].as_array().unwrap() {
        let i = t["task"].as_u64().unwrap() as usize;
        let best = log
            .iter()
            .filter(|r| r.task == i)
            .map(|r| r.latency_s)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(t["best_latency_s"].as_f64().unwrap(), best);
    }
    let csv = std::fs::read_to_string(tmp.path().join("curve.csv")).unwrap();
    assert_eq!(csv.lines().count(), 31);
}

#[test]
fn help_lists_every_config_field_with_its_default() {
    let help = ok(&["tune", "--help"]);
    for (flag, default) in [
        ("--trials", "2000"),
        ("--rounds", "200"),
        ("--batch", "10"),
        ("--draft-size", "512"),
        ("--pop-size", "512"),
        ("--n-steps", "32"),
        ("--random-mix", "0.2"),
        ("--decay", "0.9"),
        ("--mode", "online"),
        ("--moa-enabled", "true"),
        ("--momentum", "0.99"),
        ("--hidden", "64"),
        ("--train-epochs", "10"),
        ("--train-lr", "0.01"),
        ("--train-batch", "512"),
    ] {
        let line = help
            .lines()
            .find(|l| l.contains(&format!("{flag} ")))
            .unwrap_or_else(|| panic!("{flag} missing from help"));
        assert!(line.contains(&format!("[default: {default}]")), "{line}");
    }
    assert!(help.contains("--seed"));
}

#[test]
fn config_file_and_flags_combine() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tuner.toml");
    std::fs::write(
        &cfg,
        "trials = 10\nrounds = 2\nbatch = 5\npop_size = 16\nn_steps = 2\ndraft_size = 16\nhidden = 4\ntrain_epochs = 1\n",
    )
    .unwrap();
    let out = tmp.path().join("o");
    ok(&["tune", "--seed", "1", "--config", path(&cfg), "--trials", "15", "--rounds", "3", "--out", path(&out)]);
    let log = std::fs::read_to_string(out.join("records.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 15);

    std::fs::write(&cfg, "trials = 10\nbogus = 1\n").unwrap();
    let bad = pruner(&["tune", "--seed", "1", "--config", path(&cfg), "--out", path(&out)]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("bogus"));
}

#[test]
fn inspect_reports_the_gemm_reference() {
    let tmp = tempfile::tempdir().unwrap();
    let workload = tmp.path().join("gemm.toml");
    std::fs::write(
        &workload,
        workload_to_toml(&[SubgraphTask {
            op: gemm("gemm128", 128, 128, 128),
            weight: 1,
        }]),
    )
    .unwrap();
    let schedule = r#"{"factors":{"m":[4,8,2,2],"n":[4,8,2,2],"k":[4,8,4]},"unroll":1}"#;
    let table = ok(&["inspect", "--workload", path(&workload), "--task", "gemm128", "--schedule", schedule]);
    let first = table.lines().next().unwrap();
    assert!(first.starts_with("load_l2_l1[A]"), "{first}");
    for needle in ["s1=24", "s4=64", "s6=16", "s5=65536", "s7=32"] {
        assert!(first.contains(needle), "{needle} not in {first}");
    }
    assert!(table.lines().nth(1).unwrap().contains("p_l2_c=1.0"));
    assert!(table.contains("s8=2097152"));

    let json: Value = serde_json::from_str(&ok(&[
        "inspect", "--workload", path(&workload), "--schedule", schedule, "--json",
    ]))
    .unwrap();
    let stmts = json["statements"].as_array().unwrap();
    assert_eq!(stmts.len(), 6);
    assert_eq!(stmts[0]["symbols"]["s1"], 24);
    assert_eq!(stmts[4]["penalties"]["p_l1_c"], 0.5);
    let expected = 2_097_152.0 / (1.0e12 * (1.0 + 2048.0 / 24.0) * 0.5) + 2.0 * 65_536.0 / 1.0e11 + 16_384.0 / (1.0e11 / 8.0);
    let total = json["total_s"].as_f64().unwrap();
    assert!((total - expected).abs() <= 1e-12 * expected, "{total} vs {expected}");

    let file = tmp.path().join("s.json");
    std::fs::write(&file, schedule).unwrap();
    let from_file = ok(&["inspect", "--workload", path(&workload), "--schedule", &format!("@{}", path(&file))]);
    assert_eq!(from_file, table);
}

#[test]
fn train_then_eval_reports_each_k() {
    let tmp = tempfile::tempdir().unwrap();
    let m = tmp.path().join("m");
    ok(&["train", "--seed", "2", "--samples", "40", "--hidden", "6", "--epochs", "3", "--out", path(&m)]);
    let report: Value = serde_json::from_slice(&std::fs::read(m.join("train_report.json")).unwrap()).unwrap();
    assert_eq!(report["examples"], 120);

    let model = m.join("model.json");
    let e = tmp.path().join("e");
    let table = ok(&[
        "eval", "--model", path(&model), "--samples", "40", "--k", "1", "--k", "5", "--draft-size", "16",
        "--out", path(&e),
    ]);
    let top_rows: Vec<_> = table.lines().filter(|l| l.starts_with("Top_k")).collect();
    assert_eq!(top_rows.len(), 2);
    let metrics: Value = serde_json::from_slice(&std::fs::read(e.join("metrics.json")).unwrap()).unwrap();
    let tops = metrics["top_k"].as_array().unwrap();
    let (t1, t5) = (tops[0]["top_k"].as_f64().unwrap(), tops[1]["top_k"].as_f64().unwrap());
    assert!(0.0 < t1 && t1 <= t5 && t5 <= 1.0, "{t1} {t5}");
    for row in metrics["best_k"].as_array().unwrap() {
        let v = row["best_k"].as_f64().unwrap();
        assert!(0.0 < v && v <= 1.0);
    }

    // the checkpoint seeds a tuning run
    let t = tmp.path().join("t");
    let mut args = vec!["tune", "--seed", "1", "--model", path(&model), "--out", path(&t)];
    args.extend_from_slice(&SMALL[..SMALL.len() - 4]);
    args.extend_from_slice(&["--train-epochs", "1"]);
    ok(&args);
}

#[test]
fn bench_writes_both_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["bench", "--seed", "4", "--baseline", "random", "--out", path(tmp.path())];
    args.extend_from_slice(SMALL);
    ok(&args);
    for dir in ["pruner", "random"] {
        assert!(tmp.path().join(dir).join("records.jsonl").exists());
    }
    let summary: Value = serde_json::from_slice(&std::fs::read(tmp.path().join("summary.json")).unwrap()).unwrap();
    let runs = summary["runs"].as_array().unwrap();
    assert_eq!(runs[1]["model_invocations"], 0);
    assert_eq!(summary["target_source"], "oracle optimum");
}

#[test]
fn exit_codes_distinguish_usage_from_runtime_errors() {
    let usage = pruner(&["tune", "--out", "x"]);
    assert_eq!(usage.status.code(), Some(2));
    let usage = pruner(&["tune", "--seed", "1", "--out", "x", "--mode", "sometimes"]);
    assert_eq!(usage.status.code(), Some(2));

    let runtime = pruner(&["tune", "--seed", "1", "--out", "x", "--trials", "7"]);
    assert_eq!(runtime.status.code(), Some(1));
    let err = String::from_utf8_lossy(&runtime.stderr);
    assert!(err.starts_with("error[E_INVALID]"), "{err}");

    let missing = pruner(&["inspect", "--workload", "/nonexistent/w.toml", "--schedule", "{}"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error[E_IO]"));

    let mismatch = pruner(&["inspect", "--schedule", r#"{"factors":{},"unroll":1}"#]);
    assert_eq!(mismatch.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&mismatch.stderr).starts_with("error[E_SKETCH]"));
}
