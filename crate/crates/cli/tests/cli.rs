use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::Value;

fn rptq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rptq")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = rptq(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn fails(args: &[&str], code: i32) -> Value {
    let o = rptq(args);
    assert_eq!(o.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stderr).unwrap()
}

/// Small model so each test finishes in seconds.
fn small_config(dir: &Path, samples: usize, tokens: usize) -> PathBuf {
    let cfg = serde_json::json!({
        "dims": {"layers": 1, "hidden": 32, "heads": 4, "ffn": 128},
        "model_seed": 5,
        "calib_samples": samples,
        "calib_tokens": tokens,
        "eval_samples": 2,
        "eval_tokens": 8,
        "mode": "W4A4",
        "clusters": {"r1": 8, "r2": 2, "r3": 2, "r4": 8, "r5": 8},
        "weights": "gptq",
        "forward": "dequant",
        "grouping": "kmeans",
        "gptq": {"damp": 0.01, "cross_cluster": false},
        "gptq_rows": 512,
        "seed": 0
    });
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stages(cfg: &Path, out: &Path, extra: &[&str]) -> Value {
    for stage in ["init", "calibrate", "plan", "quantize"] {
        let mut args = vec![stage, "--config", s(cfg), "--out", s(out)];
        args.extend_from_slice(extra);
        ok(&args);
    }
    let mut args = vec!["run", "--config", s(cfg), "--out", s(out)];
    args.extend_from_slice(extra);
    serde_json::from_str(&ok(&args)).unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn site_total(report: &Value) -> f64 {
    report["site_mse"].as_object().unwrap().values().map(|v| v.as_f64().unwrap()).sum()
}

#[test]
fn staged_run_is_byte_identical_across_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 16, 8);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ra = stages(&cfg, &a, &[]);
    let rb = stages(&cfg, &b, &[]);
    assert_eq!(ra, rb);
    assert_eq!(tree(&a), tree(&b));
    assert_eq!(ra["layer_output_mse"].as_array().unwrap().len(), 1);
    assert_eq!(ra["site_mse"].as_object().unwrap().len(), 7);

    // rerunning one stage in place leaves every file unchanged
    let before = tree(&a);
    ok(&["plan", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["run", "--config", s(&cfg), "--out", s(&a)]);
    assert_eq!(tree(&a), before);
}

#[test]
fn pipeline_matches_separate_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 16, 8);
    let staged = stages(&cfg, &tmp.path().join("a"), &["--weights", "rtn"]);
    let out = tmp.path().join("b");
    let one: Value = serde_json::from_str(
        ok(&["pipeline", "--config", s(&cfg), "--out", s(&out), "--weights", "rtn"])
            .lines()
            .skip(4)
            .collect::<Vec<_>>()
            .join("\n")
            .as_str(),
    )
    .unwrap();
    assert_eq!(staged, one);
    assert_eq!(one["weights"], "rtn");
}

#[test]
fn calibration_counts_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 256, 2);
    let out = tmp.path().join("o");
    ok(&["init", "--config", s(&cfg), "--out", s(&out)]);
    ok(&["calibrate", "--config", s(&cfg), "--out", s(&out)]);
    let stats: Value = serde_json::from_str(&fs::read_to_string(out.join("calib/layer0/q.stats.json")).unwrap()).unwrap();
    assert_eq!(stats["samples_seen"], 256);
    assert!(out.join("calib/layer0/qk_joint.json").exists());
}

#[test]
fn single_sample_single_token_stats_are_the_observed_values() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 1, 1);
    let out = tmp.path().join("o");
    ok(&["init", "--config", s(&cfg), "--out", s(&out)]);
    ok(&["calibrate", "--config", s(&cfg), "--out", s(&out)]);
    let csv = ok(&["stats-dump", "--out", s(&out), "--site", "ln1_out"]);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("channel,min,max"));
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 32);
    for r in rows {
        let f: Vec<&str> = r.split(',').collect();
        assert_eq!(f[1], f[2], "{r}");
    }
}

#[test]
fn kv_mode_report_has_only_cache_sites() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 16, 8);
    let r = stages(&cfg, &tmp.path().join("o"), &["--mode", "W4A4KV"]);
    let keys: Vec<&String> = r["site_mse"].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["k", "v"]);
    assert_eq!(r["mode"], "W4A4KV");
}

#[test]
fn single_cluster_everywhere_is_no_better() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 32, 8);
    let clustered = stages(&cfg, &tmp.path().join("a"), &[]);
    let flat = stages(&cfg, &tmp.path().join("b"), &["--clusters", "1,1,1,1,1"]);
    assert!(site_total(&flat) >= site_total(&clustered), "{flat} vs {clustered}");
}

#[test]
fn integer_forward_matches_dequant_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 16, 8);
    let d = stages(&cfg, &tmp.path().join("a"), &["--forward", "dequant"]);
    let i = stages(&cfg, &tmp.path().join("b"), &["--forward", "integer"]);
    let (a, b) = (d["output_mse"].as_f64().unwrap(), i["output_mse"].as_f64().unwrap());
    assert!((a - b).abs() <= 1e-3 * a.max(1e-12), "{a} vs {b}");
}

#[test]
fn stage_order_violations_are_validation_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 8, 4);
    let out = tmp.path().join("o");
    let e = fails(&["calibrate", "--config", s(&cfg), "--out", s(&out)], 1);
    assert_eq!(e["kind"], "validation");
    assert!(e["message"].as_str().unwrap().contains("config.json"));
    ok(&["init", "--config", s(&cfg), "--out", s(&out)]);
    ok(&["calibrate", "--config", s(&cfg), "--out", s(&out)]);
    let e = fails(&["quantize", "--config", s(&cfg), "--out", s(&out)], 1);
    assert!(e["message"].as_str().unwrap().contains("plan"));
    let e = fails(&["run", "--config", s(&cfg), "--out", s(&out)], 1);
    assert!(e["message"].as_str().unwrap().contains("quant"));
}

#[test]
fn bad_flags_are_validation_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    for args in [
        vec!["init", "--mode", "W4A", "--out", s(&out)],
        vec!["init", "--clusters", "0,1,1,1,1", "--out", s(&out)],
        vec!["init", "--clusters", "1,2,3", "--out", s(&out)],
        vec!["init", "--weights", "magic", "--out", s(&out)],
        vec!["init", "--config", "/nonexistent/config.json", "--out", s(&out)],
        vec!["frobnicate"],
    ] {
        let e = fails(&args, 1);
        assert_eq!(e["kind"], "validation", "{args:?}");
    }
    assert!(!out.join("model").exists());
}

#[test]
fn unplannable_clusters_are_runtime_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 8, 4);
    let out = tmp.path().join("o");
    ok(&["init", "--config", s(&cfg), "--out", s(&out)]);
    ok(&["calibrate", "--config", s(&cfg), "--out", s(&out)]);
    // 9 clusters cannot split an 8-channel head
    let e = fails(&["plan", "--config", s(&cfg), "--out", s(&out), "--clusters", "8,9,2,8,8"], 2);
    assert_eq!(e["kind"], "runtime");
}

#[test]
fn ablation_csv_shape_and_fixed_point() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 16, 8);
    let out = tmp.path().join("o");
    let report = stages(&cfg, &out, &[]);
    let csv = ok(&["ablate", "--config", s(&cfg), "--out", s(&out), "--sites", "R1", "--sweep", "1,2,4,8,32"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "site,g,activation_mse,output_mse");
    assert_eq!(lines.len(), 6);
    assert_eq!(fs::read_to_string(out.join("ablation.csv")).unwrap(), csv);

    // g at the configured value reproduces the run report
    let fixed = ok(&["ablate", "--config", s(&cfg), "--out", s(&out), "--sites", "R1", "--sweep", "8"]);
    let row: Vec<&str> = fixed.lines().nth(1).unwrap().split(',').collect();
    let mse: f64 = row[3].parse().unwrap();
    let want = report["output_mse"].as_f64().unwrap();
    assert!((mse - want).abs() <= 1e-6 * want, "{mse} vs {want}");
}

#[test]
fn memest_single_cell_and_proportions() {
    let csv = ok(&["memest", "--models", "opt-175b", "--modes", "W4A16", "--batches", "64", "--seqlens", "8192"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0].split(',').count(), 8);
    let csv = ok(&[
        "memest", "--models", "opt-175b", "--modes", "W4A16", "--batches", "64", "--seqlens", "8192", "--proportions",
    ]);
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let kv = header.iter().position(|h| *h == "kv_frac").unwrap();
    let frac: f64 = row[kv].parse().unwrap();
    assert!((frac - 0.9195).abs() < 0.05, "{frac}");
}

#[test]
fn memest_golden_report_covers_the_table() {
    let csv = ok(&["memest", "--golden"]);
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 189);
    let within = rows
        .iter()
        .filter(|r| r.rsplit(',').next().unwrap().parse::<f64>().unwrap() < 0.1)
        .count();
    assert!(within * 10 >= rows.len() * 8);
}

#[test]
fn memest_rejects_unknown_inputs() {
    assert_eq!(fails(&["memest", "--models", "opt-9000"], 1)["kind"], "validation");
    assert_eq!(fails(&["memest", "--modes", "W4"], 1)["kind"], "validation");
    assert_eq!(fails(&["memest", "--batches", "0"], 1)["kind"], "validation");
}

#[test]
fn default_config_completes_within_a_minute() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let t = Instant::now();
    let stdout = ok(&["pipeline", "--out", s(&out)]);
    let elapsed = t.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "{elapsed:.1} s");
    assert!(stdout.contains("\"mode\": \"W4A4\""));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["clusters"]["r1"], 32);
    assert_eq!(report["weights"], "gptq");
}
