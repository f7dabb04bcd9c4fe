use std::path::Path;
use std::process::{Command, Output};

fn hsiq(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsiq"))
        .args(args)
        .arg("--out")
        .arg(out)
        .args(["--set", "height=24", "--set", "width=32", "--scenes", "2", "--set", "calib_scenes=2"])
        .output()
        .unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(hsiq(dir.path(), &["eval"]).status.code(), Some(3));
    assert_eq!(hsiq(dir.path(), &["gen", "--set", "colour=red"]).status.code(), Some(2));
    assert_eq!(hsiq(dir.path(), &["gen", "--engine", "abacus"]).status.code(), Some(2));
    assert_eq!(hsiq(dir.path(), &["gen", "--preset", "nope"]).status.code(), Some(2));
    assert!(hsiq(dir.path(), &["verify-mac"]).status.success());
}

#[test]
fn staged_run_writes_hashed_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for stage in ["gen", "calib", "build", "transform", "quantize", "infer", "eval", "perf"] {
        let o = hsiq(out, &[stage]);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let text = std::fs::read_to_string(out.join("summaries").join("eval_int.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["command"], "eval_int");
    assert_eq!(v["config_sha256"].as_str().unwrap().len(), 64);
    let arts = v["artifacts"].as_object().unwrap();
    assert!(!arts.is_empty());
    for (rel, _) in arts {
        assert!(out.join(rel).exists(), "{rel}");
    }
    let perf = std::fs::read_to_string(out.join("perf").join("perf.txt")).unwrap();
    assert!(perf.contains("1.229 TOPs"));
}
