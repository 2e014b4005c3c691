//! Run directories: artifacts, the manifest with stage flags, and a pipeline
//! driver that resumes from whatever a previous invocation left behind.
//!
//! ```text
//! <run>/manifest.json  ingest.json  samples.json  schema.json  step1.json
//!       step2.json  scripts/  entities.jsonl  report.json  sweep.csv
//!       graph.json  ledger.jsonl  answers.jsonl  grades.jsonl
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::config::{BackendKind, Config};
use crate::error::{Error, Result};
use crate::eval::{
    read_jsonl, run_qa_suite, write_jsonl, AnswerRecord, CostReport, Prices, QaItem, SuiteSettings,
};
use crate::extraction::{
    run_step1, run_step2, split_corpus, sweep_sample_size, sweep_to_csv, sample_chunks,
    EntityRecord, ExtractionReport, SamplingOutcome, Step1Outcome, Step2Outcome, SweepRow,
};
use crate::ingest::{chunk_corpus, load_corpus, SourceCorpus};
use crate::kg::KnowledgeGraph;
use crate::llm::{Backend, Gateway, LiveBackend, ScriptedBackend, UsageLedger, UsageRecord};
use crate::retrieval::RetrievalStrategy;
use crate::schema::{derive_step1, derive_step2, SchemaDoc};
use crate::script::{ParserScript, ScriptStage};

pub const MANIFEST: &str = "manifest.json";
pub const INGEST: &str = "ingest.json";
pub const SAMPLES: &str = "samples.json";
pub const SCHEMA: &str = "schema.json";
pub const STEP1: &str = "step1.json";
pub const STEP2: &str = "step2.json";
pub const SCRIPTS: &str = "scripts";
pub const ENTITIES: &str = "entities.jsonl";
pub const REPORT: &str = "report.json";
pub const SWEEP: &str = "sweep.csv";
pub const GRAPH: &str = "graph.json";
pub const LEDGER: &str = "ledger.jsonl";
pub const ANSWERS: &str = "answers.jsonl";
pub const GRADES: &str = "grades.jsonl";
/// Hand-written record of a run made by some other system, for comparisons.
pub const EXTERNAL_RUN: &str = "external_run.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineStage {
    Ingest,
    Sample,
    Step1,
    Step2,
    Kg,
}

impl PipelineStage {
    pub const ORDER: [PipelineStage; 5] = [
        PipelineStage::Ingest,
        PipelineStage::Sample,
        PipelineStage::Step1,
        PipelineStage::Step2,
        PipelineStage::Kg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PipelineStage::Ingest => "ingest",
            PipelineStage::Sample => "sample",
            PipelineStage::Step1 => "step1",
            PipelineStage::Step2 => "step2",
            PipelineStage::Kg => "kg",
        }
    }
}

impl fmt::Display for PipelineStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: PipelineStage,
    pub completed: bool,
    pub started_unix_ms: Option<u64>,
    pub finished_unix_ms: Option<u64>,
}

impl StageEntry {
    pub fn duration_ms(&self) -> u64 {
        match (self.started_unix_ms, self.finished_unix_ms) {
            (Some(s), Some(f)) if f >= s => f - s,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_unix_ms: u64,
    pub config: Map<String, Value>,
    pub stages: Vec<StageEntry>,
    /// Wall time of Q&A suites, which are not pipeline stages.
    #[serde(default)]
    pub eval_ms: u64,
    #[serde(default)]
    pub last_error: Option<String>,
}

impl RunManifest {
    pub fn new(run_id: &str, config: &Config) -> Self {
        RunManifest {
            run_id: run_id.to_string(),
            created_unix_ms: now_ms(),
            config: config.snapshot(),
            stages: PipelineStage::ORDER
                .iter()
                .map(|&stage| StageEntry {
                    stage,
                    completed: false,
                    started_unix_ms: None,
                    finished_unix_ms: None,
                })
                .collect(),
            eval_ms: 0,
            last_error: None,
        }
    }

    fn entry(&mut self, stage: PipelineStage) -> &mut StageEntry {
        self.stages
            .iter_mut()
            .find(|e| e.stage == stage)
            .expect("manifest lists every stage")
    }

    pub fn is_complete(&self, stage: PipelineStage) -> bool {
        self.stages.iter().any(|e| e.stage == stage && e.completed)
    }

    /// Marks `stage` started and clears it and every later stage.
    pub fn begin(&mut self, stage: PipelineStage) -> Result<()> {
        if let Some(prev) = PipelineStage::ORDER.iter().take_while(|s| **s != stage).last() {
            if !self.is_complete(*prev) {
                return Err(Error::StageOrder(format!("{stage} needs {prev} to be complete")));
            }
        }
        for e in self.stages.iter_mut().filter(|e| e.stage >= stage) {
            e.completed = false;
            e.finished_unix_ms = None;
        }
        let e = self.entry(stage);
        e.started_unix_ms = Some(now_ms());
        Ok(())
    }

    pub fn complete(&mut self, stage: PipelineStage) {
        let e = self.entry(stage);
        e.completed = true;
        e.finished_unix_ms = Some(now_ms());
        self.last_error = None;
    }

    /// Sum of completed stage durations plus Q&A time.
    pub fn total_time_ms(&self) -> u64 {
        self.stages
            .iter()
            .filter(|e| e.completed)
            .map(StageEntry::duration_ms)
            .sum::<u64>()
            + self.eval_ms
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }
}

/// Paths inside one run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn run_id(&self) -> String {
        self.root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into())
    }

    pub fn script_path(&self, stage: &ScriptStage, extension: &str) -> PathBuf {
        self.root
            .join(SCRIPTS)
            .join(format!("{}.{extension}", stage.file_stem()))
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Scope order for the persisted ledger: unscoped records first, then by
/// scope name. Within a scope the original order is kept.
fn sorted_ledger(mut records: Vec<UsageRecord>) -> Vec<UsageRecord> {
    records.sort_by(|a, b| a.scope.cmp(&b.scope));
    records
}

pub fn read_ledger(path: &Path) -> Result<Vec<UsageRecord>> {
    if !path.exists() {
        return Err(Error::Input(format!("missing ledger {}", path.display())));
    }
    read_jsonl(path)
}

/// Backend chosen by configuration (and `FASTRAG_BACKEND`).
pub fn make_backend(config: &Config) -> Result<Arc<dyn Backend>> {
    match config.backend_kind()? {
        BackendKind::Scripted => {
            let dir = config.llm.fixtures_dir.as_ref().ok_or_else(|| {
                Error::Config("the scripted backend needs llm.fixtures_dir".into())
            })?;
            Ok(Arc::new(ScriptedBackend::from_dir(dir)?))
        }
        BackendKind::Live => Ok(Arc::new(LiveBackend::from_env()?)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Step1File {
    sampling: SamplingOutcome,
    sections: Vec<Value>,
    unassigned_lines: usize,
    splitter: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Step2File {
    section_schemas: Value,
    sections: Vec<crate::extraction::SectionOutcome>,
}

/// Outcome of a stage request: freshly run or already complete.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageRun {
    Ran,
    Skipped,
}

pub struct Pipeline {
    pub dir: RunDir,
    pub config: Config,
    gateway: Gateway,
    manifest: RunManifest,
    force: bool,
}

impl Pipeline {
    /// Opens (or creates) a run directory. Persisted ledger records are loaded
    /// so report counters cover work done by earlier invocations.
    pub fn open(dir: RunDir, config: Config, backend: Arc<dyn Backend>, force: bool) -> Result<Self> {
        config.validate()?;
        fs::create_dir_all(dir.root()).map_err(|e| Error::io(dir.root(), e))?;
        let manifest_path = dir.path(MANIFEST);
        let mut manifest = if manifest_path.exists() {
            RunManifest::load(&manifest_path)?
        } else {
            RunManifest::new(&dir.run_id(), &config)
        };
        manifest.config = config.snapshot();
        let ledger_path = dir.path(LEDGER);
        let records = if ledger_path.exists() { read_jsonl(&ledger_path)? } else { Vec::new() };
        let gateway = Gateway::with_ledger(backend, Arc::new(UsageLedger::from_records(records)));
        let p = Pipeline {
            dir,
            config,
            gateway,
            manifest,
            force,
        };
        p.save_manifest()?;
        Ok(p)
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn save_manifest(&self) -> Result<()> {
        write_json(&self.dir.path(MANIFEST), &self.manifest)
    }

    pub fn save_ledger(&self) -> Result<()> {
        write_jsonl(&self.dir.path(LEDGER), &sorted_ledger(self.gateway.ledger().records()))
    }

    fn fail(&mut self, e: Error) -> Error {
        self.manifest.last_error = Some(e.to_string());
        let _ = self.save_manifest();
        let _ = self.save_ledger();
        e
    }

    fn needs(&self, stage: PipelineStage) -> bool {
        self.force || !self.manifest.is_complete(stage)
    }

    pub fn load_corpus(&self) -> Result<SourceCorpus> {
        if self.config.corpus.paths.is_empty() {
            return Err(Error::Config("corpus.paths is empty".into()));
        }
        load_corpus(&self.config.corpus.paths)
    }

    pub fn ingest(&mut self) -> Result<(SourceCorpus, StageRun)> {
        let corpus = self.load_corpus()?;
        if !self.needs(PipelineStage::Ingest) {
            return Ok((corpus, StageRun::Skipped));
        }
        self.manifest.begin(PipelineStage::Ingest)?;
        let chunks = chunk_corpus(
            &corpus,
            self.config.ingest.chunk_tokens,
            self.config.ingest.overlap_tokens,
        )
        .map_err(|e| self.fail(e))?;
        let summary = json!({
            "documents": corpus.documents.iter().map(|d| json!({
                "doc_id": d.doc_id,
                "lines": d.lines.len(),
            })).collect::<Vec<_>>(),
            "lines": corpus.line_count(),
            "non_blank_lines": corpus.non_blank_line_count(),
            "chunks": chunks.len(),
            "chunk_tokens": self.config.ingest.chunk_tokens,
            "overlap_tokens": self.config.ingest.overlap_tokens,
        });
        write_json(&self.dir.path(INGEST), &summary)?;
        self.manifest.complete(PipelineStage::Ingest);
        self.save_manifest()?;
        Ok((corpus, StageRun::Ran))
    }

    pub fn sample(&mut self) -> Result<(SamplingOutcome, StageRun)> {
        let (corpus, ran) = self.ingest()?;
        let path = self.dir.path(SAMPLES);
        if ran == StageRun::Skipped && !self.needs(PipelineStage::Sample) {
            return Ok((read_json(&path)?, StageRun::Skipped));
        }
        self.manifest.begin(PipelineStage::Sample)?;
        let chunks = chunk_corpus(
            &corpus,
            self.config.ingest.chunk_tokens,
            self.config.ingest.overlap_tokens,
        )?;
        let lines: Vec<_> = corpus.lines().cloned().collect();
        let outcome = sample_chunks(&lines, &chunks, self.config.sampling.target_samples, &self.config)
            .map_err(|e| self.fail(e))?;
        write_json(&path, &outcome)?;
        self.manifest.complete(PipelineStage::Sample);
        self.save_manifest()?;
        Ok((outcome, StageRun::Ran))
    }

    fn write_script(&self, script: &ParserScript) -> Result<PathBuf> {
        let path = self.dir.script_path(&script.stage, &self.config.sandbox.script_extension);
        let parent = path.parent().expect("scripts dir");
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        fs::write(&path, &script.source_code).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn persist_step1(&self, s1: &Step1Outcome) -> Result<()> {
        write_json(&self.dir.path(SCHEMA), &s1.schema.json_schema)?;
        let script_path = self.write_script(&s1.splitter)?;
        let rel = script_path
            .strip_prefix(self.dir.root())
            .unwrap_or(&script_path)
            .to_string_lossy()
            .replace('\\', "/");
        let file = Step1File {
            sampling: s1.sampling.clone(),
            sections: s1
                .step1
                .sections
                .iter()
                .zip(&s1.sections)
                .map(|(t, s)| json!({"name": t.name, "description": t.description, "lines": s.lines.len()}))
                .collect(),
            unassigned_lines: s1.unassigned.len(),
            splitter: json!({"path": rel, "verified_on": s1.splitter.verified_on}),
        };
        write_json(&self.dir.path(STEP1), &file)
    }

    /// Rebuilds Step 1 results from disk by re-running the stored splitter.
    fn load_step1(&self, corpus: &SourceCorpus) -> Result<Step1Outcome> {
        let file: Step1File = read_json(&self.dir.path(STEP1))?;
        let schema = SchemaDoc::from_value(read_json(&self.dir.path(SCHEMA))?);
        let step1 = derive_step1(&schema)?;
        let stage = ScriptStage::SectionSplitter;
        let path = self.dir.script_path(&stage, &self.config.sandbox.script_extension);
        let source = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let verified_on = file
            .splitter
            .get("verified_on")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .unwrap_or_default();
        let (sections, unassigned) = split_corpus(corpus, &source, &step1, &self.config.sandbox)?;
        Ok(Step1Outcome {
            sampling: file.sampling,
            schema,
            step1,
            splitter: ParserScript {
                source_code: source,
                stage,
                verified_on,
            },
            sections,
            unassigned,
        })
    }

    fn step1(&mut self, corpus: &SourceCorpus) -> Result<Step1Outcome> {
        if !self.needs(PipelineStage::Step1) {
            return self.load_step1(corpus);
        }
        if !self.manifest.is_complete(PipelineStage::Sample) || self.force {
            self.sample()?;
        }
        self.manifest.begin(PipelineStage::Step1)?;
        self.gateway
            .ledger()
            .retain(|r| r.scope.as_deref().is_some_and(|s| !s.starts_with("step2/")));
        let s1 = match run_step1(corpus, &self.config, &self.gateway, None) {
            Ok(s) => s,
            Err(e) => return Err(self.fail(e)),
        };
        self.persist_step1(&s1)?;
        self.manifest.complete(PipelineStage::Step1);
        self.save_manifest()?;
        self.save_ledger()?;
        info!(
            "step 1: {} sections, {} unassigned lines",
            s1.sections.len(),
            s1.unassigned.len()
        );
        Ok(s1)
    }

    /// Runs (or resumes) ingest, sampling, Step 1 and Step 2, then writes
    /// `entities.jsonl` and `report.json`.
    pub fn extract(&mut self) -> Result<(ExtractionReport, StageRun)> {
        if !self.needs(PipelineStage::Step2) {
            return Ok((read_json(&self.dir.path(REPORT))?, StageRun::Skipped));
        }
        let (corpus, _) = self.ingest()?;
        let s1 = self.step1(&corpus)?;
        self.manifest.begin(PipelineStage::Step2)?;
        self.gateway
            .ledger()
            .retain(|r| !r.scope.as_deref().is_some_and(|s| s.starts_with("step2/")));
        let s2 = match derive_step2(&s1.schema)
            .and_then(|map| Ok((run_step2(&s1.sections, &map, &self.config, &self.gateway)?, map)))
        {
            Ok(v) => v,
            Err(e) => return Err(self.fail(e)),
        };
        let (s2, map): (Step2Outcome, _) = s2;
        for s in &s2.sections {
            if let Some(script) = &s.script {
                self.write_script(script)?;
            }
        }
        write_json(
            &self.dir.path(STEP2),
            &Step2File {
                section_schemas: serde_json::to_value(&map).expect("serializable"),
                sections: s2.sections.clone(),
            },
        )?;
        write_jsonl(&self.dir.path(ENTITIES), &s2.entities)?;
        let ledger = self.gateway.ledger().records();
        let extraction_records: Vec<UsageRecord> = ledger
            .into_iter()
            .filter(|r| r.scope.as_deref().is_none_or(|s| s.starts_with("step2/")))
            .collect();
        let report = ExtractionReport::build(
            &self.config.dataset_name,
            &corpus,
            &s1,
            &s2,
            &sorted_ledger(extraction_records),
        );
        write_json(&self.dir.path(REPORT), &report)?;
        self.manifest.complete(PipelineStage::Step2);
        self.save_manifest()?;
        self.save_ledger()?;
        Ok((report, StageRun::Ran))
    }

    /// Sample-size sweep over `1..=sweep.max_samples`, written to `sweep.csv`.
    pub fn sweep(&mut self) -> Result<Vec<SweepRow>> {
        let corpus = self.load_corpus()?;
        self.gateway
            .ledger()
            .retain(|r| !r.scope.as_deref().is_some_and(|s| s.starts_with("sweep/")));
        let rows = sweep_sample_size(&corpus, &self.config, &self.gateway, self.config.sweep.max_samples)
            .map_err(|e| self.fail(e))?;
        fs::write(self.dir.path(SWEEP), sweep_to_csv(&rows)).map_err(|e| Error::io(self.dir.path(SWEEP), e))?;
        self.save_ledger()?;
        Ok(rows)
    }

    pub fn entities(&self) -> Result<Vec<EntityRecord>> {
        if !self.manifest.is_complete(PipelineStage::Step2) {
            return Err(Error::StageOrder("extraction not complete; run extract first".into()));
        }
        read_jsonl(&self.dir.path(ENTITIES))
    }

    pub fn build_kg(&mut self) -> Result<(KnowledgeGraph, StageRun)> {
        if !self.needs(PipelineStage::Kg) {
            return Ok((self.load_graph()?, StageRun::Skipped));
        }
        let entities = self.entities()?;
        self.manifest.begin(PipelineStage::Kg)?;
        let g = KnowledgeGraph::build(&entities);
        g.save(&self.dir.path(GRAPH))?;
        self.manifest.complete(PipelineStage::Kg);
        self.save_manifest()?;
        Ok((g, StageRun::Ran))
    }

    pub fn load_graph(&self) -> Result<KnowledgeGraph> {
        if !self.manifest.is_complete(PipelineStage::Kg) {
            return Err(Error::StageOrder("graph not built; run build-kg first".into()));
        }
        KnowledgeGraph::load(&self.dir.path(GRAPH))
    }

    /// Answers every item with every strategy and writes `answers.jsonl`.
    /// Existing answers are kept unless `--force` was given.
    pub fn eval(&mut self, items: &[QaItem], strategies: &[RetrievalStrategy]) -> Result<(Vec<AnswerRecord>, StageRun)> {
        let graph = self.load_graph()?;
        let path = self.dir.path(ANSWERS);
        if path.exists() && !self.force {
            return Ok((read_jsonl(&path)?, StageRun::Skipped));
        }
        self.gateway
            .ledger()
            .retain(|r| !r.scope.as_deref().is_some_and(|s| s.starts_with("qa/")));
        let started = now_ms();
        let answers = run_qa_suite(
            items,
            strategies,
            &graph,
            &self.gateway,
            &SuiteSettings::from_config(&self.config),
        )
        .map_err(|e| self.fail(e))?;
        write_jsonl(&path, &answers)?;
        self.manifest.eval_ms = now_ms().saturating_sub(started);
        self.save_manifest()?;
        self.save_ledger()?;
        Ok((answers, StageRun::Ran))
    }
}

/// An externally measured run (another system, or a run made elsewhere).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalRun {
    pub dataset: String,
    pub system: String,
    pub total_time_min: f64,
    pub total_cost_usd: f64,
    #[serde(default)]
    pub request_count: usize,
    #[serde(default)]
    pub coverage: Option<f64>,
}

/// Cost report of one run directory, computed only from persisted files:
/// `ledger.jsonl` for usage, `manifest.json` for time and `report.json` (if
/// present) for coverage. A directory holding `external_run.json` instead is
/// reported as recorded.
pub fn build_cost_report(dir: &Path, prices: &Prices, system: &str) -> Result<CostReport> {
    let external = dir.join(EXTERNAL_RUN);
    if external.exists() {
        let r: ExternalRun = read_json(&external)?;
        return Ok(CostReport {
            dataset: r.dataset,
            system: r.system,
            total_time_min: r.total_time_min,
            total_cost_usd: r.total_cost_usd,
            request_count: r.request_count,
            input_chars: 0,
            output_chars: 0,
            coverage: r.coverage,
        });
    }
    let records = read_ledger(&dir.join(LEDGER))?;
    let manifest_path = dir.join(MANIFEST);
    let (time_ms, dataset) = if manifest_path.exists() {
        let m = RunManifest::load(&manifest_path)?;
        let name = m
            .config
            .get("dataset_name")
            .and_then(Value::as_str)
            .unwrap_or(&m.run_id)
            .to_string();
        (m.total_time_ms(), name)
    } else {
        (0, RunDir::new(dir).run_id())
    };
    let report_path = dir.join(REPORT);
    let coverage = if report_path.exists() {
        let r: ExtractionReport = read_json(&report_path)?;
        Some(r.coverage)
    } else {
        None
    };
    Ok(CostReport::from_ledger(&dataset, system, &records, prices, time_ms, coverage))
}
