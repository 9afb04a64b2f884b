use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn dslr(args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dslr"));
    c.args(args);
    c
}

fn run(c: &mut Command) -> Output {
    c.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Flags shared by the mock-backed runs.
fn mock_args() -> Vec<String> {
    mock_args_with(&fixture("mock_scores.jsonl"))
}

fn mock_args_with(table: &Path) -> Vec<String> {
    [
        "--corpus", p(&fixture("corpus20.jsonl")),
        "--dataset", p(&fixture("dataset10.jsonl")),
        "--scorer", "mock",
        "--scorer-table", p(table),
        "--reader-table", p(&fixture("mock_reader.json")),
        "--clock-step-ms", "1",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn with_mock(sub: &str, extra: &[&str]) -> Command {
    let mut c = dslr(&[sub]);
    c.args(mock_args()).args(extra);
    c
}

fn rendered_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["rendered"].as_str().unwrap().to_string())
        .collect()
}

#[test]
fn index_three_documents_and_rebuilds_identically() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    fs::write(
        &corpus,
        concat!(
            "{\"id\":\"a\",\"title\":\"Nitrogen\",\"text\":\"A chemical element.\"}\n",
            "{\"id\":\"b\",\"title\":\"Oxygen\",\"text\":\"Another element.\"}\n",
            "{\"id\":\"c\",\"title\":\"Series\",\"text\":\"Grace and Frankie.\"}\n",
        ),
    )
    .unwrap();
    let (one, two) = (dir.path().join("1.idx"), dir.path().join("2.idx"));
    for out in [&one, &two] {
        let o = run(&mut dslr(&["index", "--corpus", p(&corpus), "--out", p(out)]));
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("3 documents"));
    }
    assert_eq!(fs::read(&one).unwrap(), fs::read(&two).unwrap());
    assert!(dir.path().join("1.idx.config.toml").exists());
}

#[test]
fn malformed_corpus_line_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    fs::write(&corpus, "{\"id\":\"a\",\"title\":\"T\",\"text\":\"x\"}\n{not json\n").unwrap();
    let o = run(&mut dslr(&["index", "--corpus", p(&corpus), "--out", p(&dir.path().join("i"))]));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn missing_input_file_is_input_error() {
    let o = run(&mut dslr(&["index", "--corpus", "/nonexistent/c.jsonl", "--out", "/tmp/x"]));
    assert_eq!(code(&o), 2);
}

#[test]
fn refine_matches_golden_and_prebuilt_index() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.jsonl");
    let o = run(&mut with_mock("refine", &["--threshold", "0.5", "--out", p(&out)]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(&out).unwrap(),
        fs::read_to_string(fixture("golden/refined_dslr.jsonl")).unwrap()
    );

    let idx = dir.path().join("i.idx");
    run(&mut dslr(&["index", "--corpus", p(&fixture("corpus20.jsonl")), "--out", p(&idx)]));
    let out2 = dir.path().join("r2.jsonl");
    let o = run(&mut with_mock("refine", &["--index", p(&idx), "--threshold", "0.5", "--out", p(&out2)]));
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(&out).unwrap(), fs::read(&out2).unwrap());
}

#[test]
fn negative_infinity_threshold_reproduces_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let (refined, baseline) = (dir.path().join("r.jsonl"), dir.path().join("b.jsonl"));
    for (out, extra) in [(&refined, ["--threshold", "-inf"]), (&baseline, ["--mode", "passage"])] {
        let mut c = with_mock("refine", &extra);
        c.args(["--top-n", "3", "--out", p(out)]);
        let o = run(&mut c);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = rendered_lines(&refined);
    assert_eq!(a.len(), 10);
    assert_eq!(a, rendered_lines(&baseline));
}

#[test]
fn remote_scorer_without_endpoint_is_upstream_error() {
    let o = run(&mut dslr(&[
        "refine", "--corpus", p(&fixture("corpus20.jsonl")), "--dataset", p(&fixture("dataset10.jsonl")),
        "--scorer", "remote", "--threshold", "0.5",
    ]));
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn unreachable_scorer_is_upstream_error() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = format!("http://127.0.0.1:{port}");
    let o = run(&mut dslr(&[
        "refine", "--corpus", p(&fixture("corpus20.jsonl")), "--dataset", p(&fixture("dataset10.jsonl")),
        "--scorer", "remote", "--scorer-url", &url, "--scorer-timeout-ms", "500", "--threshold", "0.5",
    ]));
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_64() {
    let o = run(&mut with_mock("eval", &["--mode", "random", "--threshold", "0.5"]));
    assert_eq!(code(&o), 64);
    assert!(stderr(&o).contains("--seed"), "{}", stderr(&o));
    assert_eq!(code(&run(&mut with_mock("eval", &["--mode", "fixed_sent"]))), 64);
    assert_eq!(code(&run(&mut with_mock("eval", &[]))), 64, "threshold missing");
    assert_eq!(code(&run(&mut with_mock("eval", &["--mode", "bogus"]))), 64);
    assert_eq!(code(&run(&mut dslr(&["frobnicate"]))), 64);
    assert_eq!(code(&run(&mut dslr(&["refine", "--top-n", "x"]))), 64);
    assert_eq!(code(&run(&mut with_mock("calibrate", &[]))), 64, "seed missing");
    assert_eq!(code(&run(&mut dslr(&["--help"]))), 0);
}

#[test]
fn seeded_modes_run_with_seed() {
    let o = run(&mut with_mock("eval", &["--mode", "random", "--threshold", "0.5", "--seed", "3"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(&mut with_mock("eval", &["--mode", "fixed_rand", "--budget", "20", "--seed", "3"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn eval_is_reproducible_and_matches_golden_records() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for i in 0..2 {
        let (rec, rep) = (dir.path().join(format!("rec{i}")), dir.path().join(format!("rep{i}")));
        let o = run(&mut with_mock("eval", &["--threshold", "0.5", "--out", p(&rec), "--report", p(&rep)]));
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        outputs.push((fs::read(&rec).unwrap(), fs::read(&rep).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(
        String::from_utf8(outputs[0].0.clone()).unwrap(),
        fs::read_to_string(fixture("golden/records_dslr.jsonl")).unwrap()
    );
    let report: Value = serde_json::from_slice(&outputs[0].1).unwrap();
    let golden: Value = serde_json::from_str(&fs::read_to_string(fixture("golden/report_dslr.json")).unwrap()).unwrap();
    for key in ["accuracy", "hit_rate", "avg_tokens", "avg_e2e_ms", "n_queries", "n_errors"] {
        assert_eq!(report[key], golden[key], "{key}");
    }
}

fn failing_table(dir: &Path, queries: &[&str]) -> PathBuf {
    let mut table = fs::read_to_string(fixture("mock_scores.jsonl")).unwrap();
    for q in queries {
        table.push_str(&serde_json::json!({"query": q, "fail": true}).to_string());
        table.push('\n');
    }
    let path = dir.join("failing.jsonl");
    fs::write(&path, table).unwrap();
    path
}

#[test]
fn injected_failures_are_fail_soft() {
    let dir = tempfile::tempdir().unwrap();
    let question = "who created the python programming language";
    let table = failing_table(dir.path(), &[question]);
    let (rec, rep) = (dir.path().join("rec"), dir.path().join("rep"));
    let mut c = dslr(&["eval", "--threshold", "0.5", "--out", p(&rec), "--report", p(&rep)]);
    c.args(mock_args_with(&table));
    let o = run(&mut c);
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    let records: Vec<Value> = fs::read_to_string(&rec)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 10);
    let errors: Vec<&Value> = records.iter().filter(|r| r.get("error").is_some()).collect();
    assert_eq!(errors.len(), 1);
    let report: Value = serde_json::from_str(&fs::read_to_string(&rep).unwrap()).unwrap();
    assert_eq!(report["n_queries"], 9);
    assert_eq!(report["n_errors"], 1);

    let mut c = dslr(&["eval", "--threshold", "0.5", "--max-failure-rate", "0.1"]);
    c.args(mock_args_with(&table));
    assert_eq!(code(&run(&mut c)), 0, "at the ceiling is tolerated");
}

#[test]
fn sweep_writes_nine_rows_and_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let o = run(&mut with_mock("sweep", &["--percentiles", "10..90", "--seed", "7", "--out", p(&out)]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(
        reader.headers().unwrap(),
        vec!["percentile", "threshold", "accuracy", "avg_tokens", "avg_e2e_ms"]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 10);
    assert_eq!(&rows[9][0], "oracle");
    let acc = |r: &csv::StringRecord| r[2].parse::<f64>().unwrap();
    let best = rows[..9].iter().map(acc).fold(0.0, f64::max);
    assert!(acc(&rows[9]) >= best);

    let again = dir.path().join("again.csv");
    run(&mut with_mock("sweep", &["--seed", "7", "--out", p(&again)]));
    assert_eq!(fs::read(&out).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn calibrate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut specs = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("t{i}.json"));
        let hist = dir.path().join(format!("h{i}.csv"));
        let mut c = with_mock("calibrate", &["--seed", "11", "--sample-size", "5", "--out", p(&out)]);
        c.args(["--dataset", p(&fixture("dataset50.jsonl")), "--histogram", p(&hist), "--bins", "4"]);
        let o = run(&mut c);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        specs.push((fs::read(&out).unwrap(), fs::read(&hist).unwrap()));
    }
    assert_eq!(specs[0], specs[1]);
    let spec: Value = serde_json::from_slice(&specs[0].0).unwrap();
    assert_eq!(spec["source_datasets"], serde_json::json!(["dataset10", "dataset50"]));
    assert_eq!(spec["sample_size"], 5);
    assert_eq!(spec["percentile"], 90.0);
    let hist = String::from_utf8(specs[0].1.clone()).unwrap();
    assert_eq!(hist.lines().count(), 5);

    // The calibrated threshold file drives refinement.
    let out = dir.path().join("r.jsonl");
    let o = run(&mut with_mock("refine", &["--threshold-file", p(&dir.path().join("t0.json")), "--out", p(&out)]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first: Value = serde_json::from_str(fs::read_to_string(&out).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["threshold"], spec["value"]);
}

#[test]
fn config_layers_file_env_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "top_n = 2\nworkers = 3\nthreshold = \"-inf\"\n").unwrap();
    let emit = |env: Option<&str>, flag: Option<&str>| {
        let mut c = dslr(&["--emit-config", "refine", "--config", p(&cfg)]);
        if let Some(v) = env {
            c.env("DSLR_TOP_N", v);
        }
        if let Some(v) = flag {
            c.args(["--top-n", v]);
        }
        let o = run(&mut c);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        String::from_utf8(o.stdout).unwrap()
    };
    let file_only = emit(None, None);
    assert!(file_only.contains("top_n = 2") && file_only.contains("workers = 3"), "{file_only}");
    assert!(file_only.contains("threshold = \"-inf\""));
    assert!(emit(Some("5"), None).contains("top_n = 5"));
    assert!(emit(Some("5"), Some("7")).contains("top_n = 7"));

    // The emitted config is itself a valid config file.
    let emitted = dir.path().join("emitted.toml");
    fs::write(&emitted, &file_only).unwrap();
    let o = run(&mut dslr(&["--emit-config", "refine", "--config", p(&emitted)]));
    assert_eq!(String::from_utf8(o.stdout).unwrap(), file_only);
}

#[test]
fn bad_config_file_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "treshold = 0.5\n").unwrap();
    let o = run(&mut dslr(&["--emit-config", "refine", "--config", p(&cfg)]));
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn retrieve_lists_ranked_hits() {
    let o = run(&mut dslr(&[
        "retrieve", "--corpus", p(&fixture("corpus20.jsonl")), "--dataset", p(&fixture("dataset10.jsonl")), "--top-n", "3",
    ]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 10);
    let v: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(v["query_id"], "q01");
    let hits = v["hits"].as_array().unwrap();
    assert_eq!(hits.len(), 3);
    assert_eq!(hits[0]["id"], "d01");
    let scores: Vec<f64> = hits.iter().map(|h| h["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
}
