use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_geoanchor"));
    c.env_remove("GEO_ANCHOR_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn corpus(dir: &Path, n: usize) -> String {
    let root = dir.join("scenes");
    let o = run(&["synth", "--out", root.to_str().unwrap(), "--count", &n.to_string(), "--seed", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    root.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_2() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
    let o = run(&["sweep", "--task", "detect", "--out", "x.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("root"));
    let o = run(&["iou", "1,2,3", "1,2,3,1,1,1,0,0,0"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn iou_prints_json() {
    let o = run(&["iou", "0,0,5,1,1,1,0,0,0", "0.5 0 5 1 1 1 0 0 0"]);
    assert!(o.status.success());
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((v["iou"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn sweep_writes_eleven_entries_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let root = corpus(dir.path(), 4);
    let out = dir.path().join("report.json");
    let table = dir.path().join("table.txt");
    let o = run(&[
        "sweep",
        "--root",
        &root,
        "--task",
        "detect",
        "--out",
        out.to_str().unwrap(),
        "--table",
        table.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let entries = v["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 11);
    assert_eq!(entries[0]["factor"], 0.5);
    assert_eq!(v["provenance"]["seed"], 0);
    assert_eq!(v["provenance"]["config_digest"].as_str().unwrap().len(), 64);
    let t = fs::read_to_string(&table).unwrap();
    assert!(t.starts_with("Method"));
    assert_eq!(String::from_utf8(o.stdout).unwrap(), t);
}

#[test]
fn traces_are_deterministic_and_verify() {
    let dir = tempfile::tempdir().unwrap();
    let root = corpus(dir.path(), 3);
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for p in [&a, &b] {
        let o = run(&["gen-traces", "--root", &root, "--task", "ground", "--seed", "5", "--out", p.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let o = run(&["verify-traces", "--root", &root, "--traces", a.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let reports: Vec<Value> =
        String::from_utf8(o.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!reports.is_empty() && reports.iter().all(|r| r["passed"] == true));
}

#[test]
fn corrupted_trace_fails_with_scene_and_step() {
    let dir = tempfile::tempdir().unwrap();
    let root = corpus(dir.path(), 3);
    let traces = dir.path().join("t.jsonl");
    let o = run(&["gen-traces", "--root", &root, "--task", "detect", "--out", traces.to_str().unwrap()]);
    assert!(o.status.success());
    let text = fs::read_to_string(&traces).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut t: Value = serde_json::from_str(&lines[1]).unwrap();
    let scene_id = t["scene_id"].as_str().unwrap().to_string();
    let content = t["turns"][6]["content"].as_str().unwrap().to_string();
    let pos = content.find("Z_bar[1]").unwrap();
    let line_end = pos + content[pos..].find('\n').unwrap();
    let eq = pos + content[pos..line_end].rfind('=').unwrap();
    let digit = eq + content[eq..].find(|c: char| c.is_ascii_digit()).unwrap();
    let mut bytes = content.into_bytes();
    bytes[digit] = if bytes[digit] == b'9' { b'1' } else { bytes[digit] + 1 };
    t["turns"][6]["content"] = Value::String(String::from_utf8(bytes).unwrap());
    lines[1] = t.to_string();
    fs::write(&traces, lines.join("\n")).unwrap();

    let report = dir.path().join("report.jsonl");
    let o = run(&[
        "verify-traces",
        "--root",
        &root,
        "--traces",
        traces.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains(&scene_id) && err.contains("mean_depth"), "{err}");
    assert_eq!(fs::read_to_string(&report).unwrap().lines().count(), 3);
}

#[test]
fn seed_precedence_flag_env_config() {
    let dir = tempfile::tempdir().unwrap();
    let root = corpus(dir.path(), 1);
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, format!("# run\nroot = {root}\nseed = 11\n")).unwrap();
    let out = dir.path().join("t.jsonl");
    let seed_of = |extra: &[&str], env: Option<&str>| -> u64 {
        let mut c = bin();
        c.args(["--config", cfg.to_str().unwrap(), "gen-traces", "--task", "detect", "--out", out.to_str().unwrap()]);
        c.args(extra);
        if let Some(e) = env {
            c.env("GEO_ANCHOR_SEED", e);
        }
        let o = c.output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        let v: Value = serde_json::from_str(fs::read_to_string(&out).unwrap().lines().next().unwrap()).unwrap();
        assert_eq!(v["header"]["provenance"]["seed"], v["header"]["seed"]);
        v["header"]["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of(&[], None), 11);
    assert_eq!(seed_of(&[], Some("12")), 12);
    assert_eq!(seed_of(&["--seed", "13"], Some("12")), 13);

    fs::write(&cfg, "colour = blue\n").unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "iou", "0,0,5,1,1,1,0,0,0", "0,0,5,1,1,1,0,0,0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_detect_and_ground_emit_json() {
    let dir = tempfile::tempdir().unwrap();
    let root = corpus(dir.path(), 3);
    for cmd in ["eval-detect", "eval-ground"] {
        let o = run(&[cmd, "--root", &root, "--estimator", "category_prior", "--scale", "0.7"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let v: Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(v["scale"], 0.7);
        let m = v["score"]["metric"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&m));
    }
    let o = run(&["eval-detect", "--root", &root, "--intrinsics", "sideways"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn serve_tools_over_stdio() {
    let dir = tempfile::tempdir().unwrap();
    let root = corpus(dir.path(), 1);
    let mut child = bin()
        .args(["serve-tools", "--root", &root])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let req = r#"{"scene_id":"synth_0000","call":{"call_id":"a","tool_name":"camera_intrinsics","arguments":{}}}"#;
    writeln!(child.stdin.take().unwrap(), "{req}\nnonsense").unwrap();
    let o = child.wait_with_output().unwrap();
    assert!(o.status.success());
    let lines: Vec<Value> =
        String::from_utf8(o.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["call_id"], "a");
    assert!(lines[0]["result"]["fx"].is_number());
    assert_eq!(lines[1]["error"]["kind"], "bad_request");
}

#[test]
fn ingest_requires_existing_input() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["ingest", "--input", dir.path().join("none").to_str().unwrap(), "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
}
