//! Shared helpers for the integration tests: fixture paths and full pipeline
//! runs against the scripted backend.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use fastrag_core::eval::{load_qa, AnswerRecord};
use fastrag_core::kg::KnowledgeGraph;
use fastrag_core::retrieval::RetrievalStrategy;
use fastrag_core::run::{make_backend, Pipeline, RunDir};
use fastrag_core::Config;
use tempfile::TempDir;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn scratch() -> TempDir {
    tempfile::Builder::new()
        .prefix("fastrag-")
        .tempdir_in(env!("CARGO_TARGET_TMPDIR"))
        .expect("tempdir")
}

/// `logs` or `configs`, with relative paths resolved against the fixtures.
pub fn config(dataset: &str) -> Config {
    Config::from_file(&fixtures().join(format!("{dataset}.config.json"))).expect("fixture config")
}

pub fn open(dir: &Path, config: Config, force: bool) -> Pipeline {
    let backend = make_backend(&config).expect("backend");
    Pipeline::open(RunDir::new(dir), config, backend, force).expect("open run dir")
}

pub fn qa_path(dataset: &str) -> PathBuf {
    fixtures().join(format!("qa/{dataset}.json"))
}

pub fn oracle(name: &str) -> serde_json::Value {
    let path = fixtures().join("oracle").join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).expect("oracle json")
}

/// Extract, build the graph and answer the dataset's QA file with all four
/// strategies.
pub fn full_run(dataset: &str, dir: &Path) -> (Pipeline, Vec<AnswerRecord>) {
    let mut p = open(dir, config(dataset), false);
    p.extract().expect("extract");
    p.build_kg().expect("build-kg");
    let items = load_qa(&qa_path(dataset)).expect("qa");
    let (answers, _) = p.eval(&items, &RetrievalStrategy::ALL).expect("eval");
    (p, answers)
}

pub struct CachedRun {
    pub dir: TempDir,
    pub graph: KnowledgeGraph,
    pub answers: Vec<AnswerRecord>,
}

/// One full run per dataset per test binary.
pub fn cached(dataset: &str) -> &'static CachedRun {
    static LOGS: OnceLock<CachedRun> = OnceLock::new();
    static CONFIGS: OnceLock<CachedRun> = OnceLock::new();
    let cell = match dataset {
        "logs" => &LOGS,
        "configs" => &CONFIGS,
        other => panic!("no fixture dataset {other}"),
    };
    cell.get_or_init(|| {
        let dir = scratch();
        let (p, answers) = full_run(dataset, dir.path());
        let graph = p.load_graph().expect("graph");
        CachedRun { dir, graph, answers }
    })
}
