use std::path::Path;
use std::process::{Command, Output};

fn observa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_observa"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn small_run(dir: &Path) -> Vec<String> {
    vec![
        "--output".into(),
        dir.display().to_string(),
        "--subjects".into(),
        "3".into(),
        "--observers-per-context".into(),
        "1".into(),
        "--scenarios".into(),
        "1".into(),
        "--set".into(),
        "resamples=20".into(),
    ]
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(observa(&["run", "--no-such-flag"]).status.code(), Some(1));
}

#[test]
fn api_key_settings_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = observa(&["run", "-o", dir.path().to_str().unwrap(), "--set", "api_key=sk-secret"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("environment"));
}

#[test]
fn mock_run_prints_summary() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("run");
    let mut args = vec!["run".to_string(), "-q".into()];
    args.extend(small_run(&root));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = observa(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("Mean Deviation"), "{stdout}");
    assert!(root.join("manifest.json").exists());

    // A rerun picks up the stored settings and has nothing left to do.
    let again = observa(&["report", "-o", root.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(again.stdout, out.stdout);
}

#[test]
fn stages_run_one_at_a_time() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("run");
    for stage in ["gen", "simulate", "assess", "analyze", "report"] {
        let mut args = vec![stage.to_string(), "-q".into()];
        args.extend(small_run(&root));
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = observa(&args);
        assert_eq!(out.status.code(), Some(0), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(root.join("report/summary.txt").exists());
}

#[test]
fn analyze_without_upstream_stages_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = observa(&["analyze", "-o", dir.path().join("empty").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unreachable_endpoint_is_a_backend_failure() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let endpoint = format!("http://127.0.0.1:{port}/v1");
    let out = observa(&[
        "gen",
        "-q",
        "-o",
        dir.path().join("run").to_str().unwrap(),
        "--backend",
        "openai",
        "--endpoint",
        &endpoint,
        "--subjects",
        "1",
        "--set",
        "max_attempts=1",
        "--set",
        "api_key_env=OBSERVA_TEST_UNSET_KEY",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
