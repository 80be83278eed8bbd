use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn deltaknn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deltaknn"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = deltaknn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Synthetic corpus plus config in a fresh directory.
fn synth(train_per_label: usize, test_per_label: usize) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    ok(&[
        "synth",
        d,
        "--train-per-label",
        &train_per_label.to_string(),
        "--test-per-label",
        &test_per_label.to_string(),
    ]);
    let config = dir.path().join("config.toml");
    (dir, config)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn five_document_matrix_is_complete_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("train.jsonl");
    let mut lines = String::new();
    for i in 0..5 {
        let label = if i % 2 == 0 { "P" } else { "H" };
        lines.push_str(&format!(
            "{{\"id\": \"d{i}\", \"text\": \"words {i}\", \"label\": \"{label}\"}}\n"
        ));
    }
    fs::write(&corpus, lines).unwrap();
    fs::write(
        dir.path().join("mock.json"),
        r#"{"default": {"label": "P", "confidence": 0.7}}"#,
    )
    .unwrap();
    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        "runs = 2\n[corpus]\npath = \"train.jsonl\"\n[backend]\nmock_rules = \"mock.json\"\n",
    )
    .unwrap();

    let dry = ok(&["build-matrix", "-c", s(&config), "--dry-run"]);
    assert!(dry.contains("zero-shot calls: 10"), "{dry}");
    assert!(dry.contains("one-shot calls: 40"), "{dry}");
    assert!(!dir.path().join("out/matrix.json").exists());

    ok(&["build-matrix", "-c", s(&config)]);
    let path = dir.path().join("out/matrix.json");
    let first = fs::read(&path).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&first).unwrap();
    let values = v["values"].as_array().unwrap();
    assert_eq!(values.len(), 25);
    assert_eq!(values.iter().filter(|x| !x.is_null()).count(), 20);
    assert_eq!(v["schema"], 1);
    assert!(v["metadata"].get("created").is_none());
    let raw = fs::read_to_string(dir.path().join("out/matrix.raw.jsonl")).unwrap();
    assert_eq!(raw.lines().count(), 10 + 40);

    ok(&["build-matrix", "-c", s(&config)]);
    assert_eq!(fs::read(&path).unwrap(), first);

    ok(&["build-matrix", "-c", s(&config), "--record-time"]);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    assert!(v["metadata"]["created"]
        .as_str()
        .unwrap()
        .starts_with("unix:"));

    let summary = ok(&["inspect-matrix", s(&path)]);
    assert!(summary.contains("documents: 5"));
    assert!(summary.contains("off-diagonal entries: 20"));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        "[corpus]\npath = \"missing.jsonl\"\n[backend]\nmock_rules = \"m.json\"\n",
    )
    .unwrap();
    let out = deltaknn(&["build-matrix", "-c", s(&config)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.jsonl"));

    assert_eq!(deltaknn(&["eval"]).status.code(), Some(2));
    assert_eq!(
        deltaknn(&["eval", "-c", "/nonexistent/run.toml"])
            .status
            .code(),
        Some(2)
    );
    fs::write(&config, "unknown_key = 3\n").unwrap();
    assert_eq!(deltaknn(&["eval", "-c", s(&config)]).status.code(), Some(2));
}

#[test]
fn strategies_ask_only_for_what_they_need() {
    let (_dir, config) = synth(4, 2);
    // No matrix yet: zero-shot runs, gain-KNN names the command that builds one.
    let table = ok(&[
        "eval",
        "-c",
        s(&config),
        "--strategy",
        "zero-shot",
        "--n-shot",
        "0",
    ]);
    assert!(table.contains("zero_shot"));
    let out = deltaknn(&["eval", "-c", s(&config), "--strategy", "delta-knn"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("deltaknn build-matrix"), "{err}");
    assert!(err.contains("matrix.json"), "{err}");

    // ConE needs log-probabilities the mock rule file does not provide.
    let out = deltaknn(&["eval", "-c", s(&config), "--strategy", "cone"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("log-probabilities"));

    let dry = ok(&["eval", "-c", s(&config), "--runs", "2", "--dry-run"]);
    assert!(dry.contains("backend calls: 8"), "{dry}");
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

#[test]
fn mock_pipeline_report_matches_fixture() {
    let (dir, config) = synth(6, 3);
    ok(&["build-matrix", "-c", s(&config)]);
    ok(&["eval", "-c", s(&config), "--k", "5"]);
    let report = fs::read_to_string(dir.path().join("out/report.json")).unwrap();
    let expected = fixture("synth_eval_report.json");
    if std::env::var_os("DELTAKNN_BLESS").is_some() {
        fs::write(&expected, &report).unwrap();
    }
    assert_eq!(report, fs::read_to_string(&expected).unwrap());

    // The resolved config reproduces the run on its own.
    let resolved = dir.path().join("out/config.resolved.toml");
    let again = dir.path().join("again");
    ok(&["eval", "-c", s(&resolved), "--output-dir", s(&again)]);
    assert_eq!(
        fs::read_to_string(again.join("report.json")).unwrap(),
        report
    );

    let preds = fs::read_to_string(dir.path().join("out/predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 3 * 6);
    let first: serde_json::Value = serde_json::from_str(preds.lines().next().unwrap()).unwrap();
    for key in ["id", "gold", "pred", "p_patient", "demos", "raw"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn sweeps_have_the_expected_shape() {
    let (dir, config) = synth(6, 3);
    ok(&["build-matrix", "-c", s(&config), "--runs", "1"]);
    let out = |name: &str| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(dir.path().join("out").join(name)).unwrap())
            .unwrap()
    };

    let text = ok(&[
        "sweep",
        "k",
        "-c",
        s(&config),
        "--runs",
        "1",
        "--k-range",
        "1..5",
    ]);
    assert!(text.contains("best_k = "));
    let k = out("sweep_k.json");
    assert_eq!(k["points"].as_array().unwrap().len(), 5);
    assert!(k["best_k"].as_u64().is_some());

    ok(&[
        "sweep",
        "prompt-grid",
        "-c",
        s(&config),
        "--runs",
        "1",
        "--strategy",
        "random",
    ]);
    let grid = out("sweep_prompt_grid.json");
    let rows: Vec<u64> = grid["points"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["value"].as_u64().unwrap())
        .collect();
    assert_eq!(rows, vec![1, 2, 3, 4, 5, 6, 7]);

    ok(&[
        "sweep",
        "nshot",
        "-c",
        s(&config),
        "--runs",
        "1",
        "--n-values",
        "0,2,4",
    ]);
    assert_eq!(
        out("sweep_nshot.json")["points"].as_array().unwrap().len(),
        3
    );

    let text = ok(&["sweep", "ordering", "-c", s(&config), "--runs", "1"]);
    assert!(text.contains("min ") && text.contains("max "));
    let ord = out("sweep_ordering.json");
    assert_eq!(ord["entries"].as_array().unwrap().len(), 24);
    // The mock averages over demonstrations, so order never matters.
    assert_eq!(ord["std"], 0.0);
}

#[test]
fn embeddings_can_be_imported() {
    let (dir, config) = synth(3, 1);
    let src = dir.path().join("embeddings.jsonl");
    let dest = dir.path().join("imported.jsonl");
    ok(&[
        "embed",
        "-c",
        s(&config),
        "--from",
        s(&src),
        "--embeddings",
        s(&dest),
    ]);
    assert_eq!(
        fs::read_to_string(&src).unwrap(),
        fs::read_to_string(&dest).unwrap()
    );

    fs::write(&src, "{\"id\": \"train-P-000\", \"vector\": [1.0, 0.0]}\n").unwrap();
    let out = deltaknn(&[
        "embed",
        "-c",
        s(&config),
        "--from",
        s(&src),
        "--embeddings",
        s(&dest),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no vector"));
}

#[test]
fn shipped_replication_config_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/replication.toml");
    let c = deltaknn_cli::RunConfig::load(&path).unwrap();
    assert_eq!(c.selection.n_shot, 4);
    assert!(c.selection.balance);
    assert_eq!(c.selection.k_neighbors, 13);
    assert_eq!(c.runs, 3);
    assert_eq!(c.backend.temperature, 0.01);
    assert_eq!(
        c.prompt.template().unwrap(),
        deltaknn::PromptTemplate::full()
    );
}
