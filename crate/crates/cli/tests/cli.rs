use std::path::{Path, PathBuf};
use std::process::Command;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn write_config(dir: &Path, mock: &str) -> PathBuf {
    let text = format!(
        r#"store_path = "store"
audit_dir = "audit"
scenario = "wildlife"
log_level = "warn"

[clustering]
k_policy = {{ fixed = 5 }}

[retrieval]
top_k = 2

[gateway]
mock_script = "{mock}"

[gateway.roles.describer]
backend = "mock"
[gateway.roles.extractor]
backend = "mock"
[gateway.roles.embedder]
backend = "mock"
[gateway.roles.scorer]
backend = "mock"
[gateway.roles.sa_reasoner]
backend = "mock"
[gateway.roles.ca_reasoner]
backend = "mock"
"#,
        mock = fixture(mock).display()
    );
    let path = dir.join("vidkg.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn vidkg(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_vidkg")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn line<'a>(stdout: &'a str, prefix: &str) -> &'a str {
    stdout.lines().find_map(|l| l.strip_prefix(prefix)).unwrap_or_else(|| panic!("no `{prefix}` in {stdout}"))
}

#[test]
fn ingest_block_fixture_reports_nine_events() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "blocks_18_mock.json");
    let src = fixture("blocks_18_stream.json");
    let (code, out, err) = vidkg(&["ingest", "--config", cfg.to_str().unwrap(), "--source", src.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(line(&out, "events added: "), "9");
    assert!(line(&out, "gateway calls: ").contains("per chunk"));
    assert!(out.contains("wall time: "));

    let (code, out, _) = vidkg(&["ingest", "--config", cfg.to_str().unwrap(), "--source", src.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(line(&out, "events added: "), "0");
    assert!(out.contains("(18 already indexed)"));
}

#[test]
fn missing_source_exits_2_and_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "blocks_18_mock.json");
    let missing = dir.path().join("no_such_stream.txt");
    let (code, _, err) = vidkg(&["ingest", "--config", cfg.to_str().unwrap(), "--source", missing.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("no_such_stream.txt"), "{err}");
}

#[test]
fn query_on_empty_store_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "wildlife_12_mock.json");
    let (code, _, err) = vidkg(&["query", "--config", cfg.to_str().unwrap(), "--text", "what happened?"]);
    assert_eq!(code, 3);
    assert!(err.contains("EMPTY_GRAPH"));
}

#[test]
fn scripted_query_and_depth_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "wildlife_12_mock.json");
    let cfg = cfg.to_str().unwrap();
    let src = fixture("wildlife_12_stream.json");
    assert_eq!(vidkg(&["ingest", "--config", cfg, "--source", src.to_str().unwrap()]).0, 0);
    let q = std::fs::read_to_string(fixture("wildlife_12_query.txt")).unwrap();
    let (code, out, err) = vidkg(&["query", "--config", cfg, "--text", q.trim()]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(line(&out, "answer: "), "A");
    let score: f64 = line(&out, "score: ").parse().unwrap();
    assert!(score > 0.0 && score <= 1.0);
    let audit = std::fs::read_to_string(line(&out, "audit: ")).unwrap();
    assert_eq!(audit.lines().filter(|l| l.contains(r#""record":"leaf""#)).count(), 13);

    let (code, out, _) = vidkg(&["query", "--config", cfg, "--text", q.trim(), "--depth", "1"]);
    assert_eq!(code, 0);
    let audit = std::fs::read_to_string(line(&out, "audit: ")).unwrap();
    assert_eq!(audit.lines().filter(|l| l.contains(r#""record":"leaf""#)).count(), 1);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[search]\nmax_depth = 3\nbranching = 4\n").unwrap();
    let (code, _, err) = vidkg(&["query", "--config", cfg.to_str().unwrap(), "--text", "x"]);
    assert_eq!(code, 64);
    assert!(err.contains("branching") && err.contains("line 3"), "{err}");
}
