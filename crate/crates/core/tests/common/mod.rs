#![allow(dead_code)]

use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use dslr_core::corpus::{build_index, read_corpus_jsonl, CorpusIndex, PassageDoc};
use dslr_core::eval::{read_dataset_jsonl, QaExample};
use dslr_core::reader::MockReader;
use dslr_core::score::MockScorer;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn corpus() -> Vec<PassageDoc> {
    read_corpus_jsonl(BufReader::new(File::open(fixture("corpus20.jsonl")).unwrap())).unwrap()
}

pub fn index() -> CorpusIndex {
    build_index(corpus()).unwrap()
}

pub fn dataset(name: &str) -> Vec<QaExample> {
    read_dataset_jsonl(BufReader::new(File::open(fixture(name)).unwrap())).unwrap()
}

pub fn mock_scorer() -> MockScorer {
    MockScorer::from_jsonl("mock", BufReader::new(File::open(fixture("mock_scores.jsonl")).unwrap())).unwrap()
}

pub fn mock_reader() -> MockReader {
    MockReader::from_json(BufReader::new(File::open(fixture("mock_reader.json")).unwrap())).unwrap()
}

/// Compare `actual` with a golden file; `DSLR_BLESS=1` rewrites it instead.
pub fn check_golden(name: &str, actual: &str) -> Result<(), String> {
    let path = fixture("golden").join(name);
    if std::env::var_os("DSLR_BLESS").is_some() {
        fs::write(&path, actual).unwrap();
        return Ok(());
    }
    let expected = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected == actual {
        Ok(())
    } else {
        let line = expected
            .lines()
            .zip(actual.lines())
            .position(|(a, b)| a != b)
            .map_or_else(|| "length".to_string(), |i| format!("line {}", i + 1));
        Err(format!("{name} differs from golden at {line}"))
    }
}
