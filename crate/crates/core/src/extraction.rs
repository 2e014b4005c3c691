//! Two-step extraction: split the corpus into sections, then parse each
//! section into entities. Also hosts the coverage metric and the sample-size
//! sweep.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::ingest::{chunk_corpus, chunk_lines, join_lines, Chunk, Line, SourceCorpus};
use crate::llm::{Gateway, UsageRecord, UsageTotals};
use crate::sampling::{
    build_frequency_matrix, extract_keywords, preprocess_lines, search_sample_parameters,
    select_samples,
};
use crate::schema::{
    derive_step1, derive_step2, learn_schema, SchemaDoc, SectionSchemaMap, Step1Schema, INPUT_DATA,
};
use crate::script::{
    execute_source, learn_parser, validate_parser_output, ParserScript, ParserTarget,
    SandboxConfig, UNASSIGNED,
};
use crate::Real;

/// One extracted entity: its type, properties and the source lines it covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub entity_type: String,
    pub properties: Map<String, Value>,
    pub input_data: Vec<String>,
}

impl EntityRecord {
    /// Splits a parser output object into properties and `input_data` lines.
    /// Blank lines are dropped.
    pub fn from_object(entity_type: &str, mut object: Map<String, Value>) -> Self {
        let lines: Vec<String> = match object.remove(INPUT_DATA) {
            Some(Value::String(s)) => s.lines().map(str::to_string).collect(),
            Some(Value::Array(items)) => items
                .into_iter()
                .flat_map(|v| match v {
                    Value::String(s) => s.lines().map(str::to_string).collect::<Vec<_>>(),
                    other => vec![other.to_string()],
                })
                .collect(),
            _ => Vec::new(),
        };
        EntityRecord {
            entity_type: entity_type.to_string(),
            properties: object,
            input_data: lines.into_iter().filter(|l| !l.trim().is_empty()).collect(),
        }
    }
}

/// Which chunks were picked and with what keyword parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingOutcome {
    pub n_clusters: usize,
    pub n_terms_per_cluster: usize,
    pub keywords: Vec<String>,
    pub n_chunks: usize,
    pub selected_chunk_ids: Vec<usize>,
    pub achieved_coverage: f64,
    /// Winning `(chunk_id, gain)` of each greedy step.
    pub per_step_gains: Vec<(usize, f64)>,
    pub truncated: bool,
}

/// Keyword extraction plus greedy selection over `chunks` built from `lines`.
///
/// With a `target`, the keyword parameters are searched over the configured
/// grid; otherwise the configured `n_clusters` and `n_terms_per_cluster` are
/// used as is.
pub fn sample_chunks(
    lines: &[Line],
    chunks: &[Chunk],
    target: Option<usize>,
    config: &Config,
) -> Result<SamplingOutcome> {
    let matrix = build_frequency_matrix(&preprocess_lines(lines));
    let selection_cfg = config.selection_config();
    let mut out = match target {
        Some(t) => {
            let p = search_sample_parameters::<Real>(
                &matrix,
                chunks,
                t,
                &config.sampling.grid,
                config.sampling.random_seed,
                &selection_cfg,
            )?;
            SamplingOutcome {
                n_clusters: p.n_clusters,
                n_terms_per_cluster: p.n_terms_per_cluster,
                keywords: p.keywords.into_iter().collect(),
                n_chunks: chunks.len(),
                selected_chunk_ids: p.selection.selected_chunk_ids,
                achieved_coverage: p.selection.achieved_coverage,
                per_step_gains: p.selection.per_step_gains,
                truncated: p.truncated,
            }
        }
        None => {
            let kw_cfg = config.keyword_config();
            let keywords = extract_keywords::<Real>(&matrix, &kw_cfg)?;
            let sel = select_samples::<Real>(chunks, &keywords, &selection_cfg);
            SamplingOutcome {
                n_clusters: kw_cfg.n_clusters,
                n_terms_per_cluster: kw_cfg.n_terms_per_cluster,
                keywords: keywords.into_iter().collect(),
                n_chunks: chunks.len(),
                selected_chunk_ids: sel.selected_chunk_ids,
                achieved_coverage: sel.achieved_coverage,
                per_step_gains: sel.per_step_gains,
                truncated: false,
            }
        }
    };
    if out.selected_chunk_ids.is_empty() {
        if let Some(first) = chunks.first() {
            warn!("sample selection picked nothing; falling back to the first chunk");
            out.selected_chunk_ids.push(first.chunk_id);
        }
    }
    Ok(out)
}

fn pick<'a>(chunks: &'a [Chunk], ids: &[usize]) -> Vec<Chunk> {
    let by_id: BTreeMap<usize, &'a Chunk> = chunks.iter().map(|c| (c.chunk_id, c)).collect();
    ids.iter().filter_map(|id| by_id.get(id).map(|c| (*c).clone())).collect()
}

/// The lines the splitter assigned to one section, in corpus order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub lines: Vec<Line>,
}

#[derive(Debug, Clone)]
pub struct Step1Outcome {
    pub sampling: SamplingOutcome,
    pub schema: SchemaDoc,
    pub step1: Step1Schema,
    pub splitter: ParserScript,
    /// In schema order; may contain empty sections.
    pub sections: Vec<Section>,
    pub unassigned: Vec<Line>,
}

impl Step1Outcome {
    pub fn assigned_line_count(&self) -> usize {
        self.sections.iter().map(|s| s.lines.len()).sum()
    }

    pub fn populated_sections(&self) -> usize {
        self.sections.iter().filter(|s| !s.lines.is_empty()).count()
    }
}

/// Runs the splitter over every document. Lines the script leaves out, assigns
/// twice (after the first time) or to unknown sections go to the unassigned
/// list; a document whose script run fails is unassigned entirely. Blank lines
/// are dropped.
pub fn split_corpus(
    corpus: &SourceCorpus,
    splitter: &str,
    step1: &Step1Schema,
    sandbox: &SandboxConfig,
) -> Result<(Vec<Section>, Vec<Line>)> {
    let mut sections: Vec<Section> = step1
        .section_names()
        .map(|n| Section {
            name: n.to_string(),
            lines: Vec::new(),
        })
        .collect();
    let index: BTreeMap<String, usize> = sections
        .iter()
        .enumerate()
        .map(|(i, s)| (s.name.clone(), i))
        .collect();
    let mut unassigned = Vec::new();

    for doc in &corpus.documents {
        let n = doc.lines.len();
        let mut owner: Vec<Option<usize>> = vec![None; n + 1];
        let run = execute_source(splitter, &doc.text(), sandbox)?;
        let parsed: Option<Map<String, Value>> = if run.succeeded() {
            serde_json::from_str::<Value>(run.stdout.trim())
                .ok()
                .and_then(|v| v.as_object().cloned())
        } else {
            None
        };
        match parsed {
            None => warn!(
                "splitter failed on {}; all its lines are unassigned: {}",
                doc.doc_id,
                if run.succeeded() {
                    "output is not a JSON object".to_string()
                } else {
                    run.failure_message(sandbox.time_limit_ms)
                }
            ),
            Some(obj) => {
                for (name, numbers) in obj {
                    let Some(&si) = index.get(&name) else {
                        if name != UNASSIGNED {
                            warn!("splitter produced unknown section {name:?} on {}", doc.doc_id);
                        }
                        continue;
                    };
                    for v in numbers.as_array().into_iter().flatten() {
                        match v.as_u64().map(|x| x as usize) {
                            Some(k) if (1..=n).contains(&k) && owner[k].is_none() => {
                                owner[k] = Some(si)
                            }
                            _ => {}
                        }
                    }
                }
            }
        }
        for line in &doc.lines {
            if line.text.trim().is_empty() {
                continue;
            }
            match owner[line.number] {
                Some(si) => sections[si].lines.push(line.clone()),
                None => unassigned.push(line.clone()),
            }
        }
    }
    Ok((sections, unassigned))
}

/// Chunks and samples the corpus, learns the schema and the splitter, and
/// splits the whole corpus into sections.
pub fn run_step1(
    corpus: &SourceCorpus,
    config: &Config,
    gateway: &Gateway,
    scope: Option<&str>,
) -> Result<Step1Outcome> {
    if corpus.non_blank_line_count() == 0 {
        return Err(Error::Input("empty corpus".into()));
    }
    let chunks = chunk_corpus(corpus, config.ingest.chunk_tokens, config.ingest.overlap_tokens)?;
    let lines: Vec<Line> = corpus.lines().cloned().collect();
    let sampling = sample_chunks(&lines, &chunks, config.sampling.target_samples, config)?;
    let samples = pick(&chunks, &sampling.selected_chunk_ids);
    info!(
        "step 1: {} of {} chunks selected",
        samples.len(),
        chunks.len()
    );
    let policy = config.retry_policy();
    let scope = scope.map(str::to_string);
    let schema = learn_schema(&samples, gateway, &policy, &config.schema, scope.clone())?;
    let step1 = derive_step1(&schema)?;
    let splitter = learn_parser(
        &samples,
        ParserTarget::Splitter {
            schema: &step1,
            line_count: 0,
        },
        None,
        gateway,
        &policy,
        &config.sandbox,
        scope,
    )?;
    let (sections, unassigned) =
        split_corpus(corpus, &splitter.source_code, &step1, &config.sandbox)?;
    Ok(Step1Outcome {
        sampling,
        schema,
        step1,
        splitter,
        sections,
        unassigned,
    })
}

pub fn step2_scope(section: &str) -> String {
    format!("step2/{section}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionStatus {
    Ok,
    /// No lines were assigned to the section.
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionOutcome {
    pub name: String,
    pub status: SectionStatus,
    pub line_count: usize,
    pub sampling: Option<SamplingOutcome>,
    pub entity_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub script: Option<ParserScript>,
}

#[derive(Debug, Clone, Default)]
pub struct Step2Outcome {
    /// Sorted by section name.
    pub sections: Vec<SectionOutcome>,
    pub entities: Vec<EntityRecord>,
}

impl Step2Outcome {
    pub fn failed_sections(&self) -> Vec<String> {
        self.sections
            .iter()
            .filter(|s| s.status == SectionStatus::Failed)
            .map(|s| s.name.clone())
            .collect()
    }
}

fn parse_section(
    section: &Section,
    schema: &Value,
    config: &Config,
    gateway: &Gateway,
) -> Result<(SamplingOutcome, ParserScript, Vec<EntityRecord>)> {
    let mut chunks = Vec::new();
    chunk_lines(
        &section.lines,
        config.step2_chunk_tokens(),
        config.ingest.overlap_tokens,
        &mut chunks,
    );
    let sampling = sample_chunks(&section.lines, &chunks, config.step2_target_samples(), config)?;
    let samples = pick(&chunks, &sampling.selected_chunk_ids);
    let target = ParserTarget::Section { schema };
    let script = learn_parser(
        &samples,
        target,
        Some(&section.name),
        gateway,
        &config.retry_policy(),
        &config.sandbox,
        Some(step2_scope(&section.name)),
    )?;
    let run = execute_source(&script.source_code, &join_lines(&section.lines), &config.sandbox)?;
    if !run.succeeded() {
        return Err(Error::Input(format!(
            "parser failed on the full section: {}",
            run.failure_message(config.sandbox.time_limit_ms)
        )));
    }
    validate_parser_output(&run.stdout, &target)
        .map_err(|m| Error::Input(format!("parser output on the full section: {m}")))?;
    let value: Value = serde_json::from_str(run.stdout.trim()).expect("validated above");
    let entities = value
        .as_array()
        .into_iter()
        .flatten()
        .filter_map(|v| v.as_object().cloned())
        .map(|o| EntityRecord::from_object(&section.name, o))
        .collect();
    Ok((sampling, script, entities))
}

/// Learns and runs one parser per non-empty section on a bounded worker pool.
/// A section that fails is recorded and the others proceed; configuration
/// errors (missing interpreter, missing fixtures) abort.
pub fn run_step2(
    sections: &[Section],
    schemas: &SectionSchemaMap,
    config: &Config,
    gateway: &Gateway,
) -> Result<Step2Outcome> {
    let mut ordered: Vec<&Section> = sections.iter().collect();
    ordered.sort_by(|a, b| a.name.cmp(&b.name));
    let results: Vec<Mutex<Option<Result<SectionOutcome>>>> =
        ordered.iter().map(|_| Mutex::new(None)).collect();
    let entities: Vec<Mutex<Vec<EntityRecord>>> =
        ordered.iter().map(|_| Mutex::new(Vec::new())).collect();
    let next = AtomicUsize::new(0);
    let workers = config.extraction.workers.max(1).min(ordered.len().max(1));

    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(section) = ordered.get(i) else {
                    break;
                };
                let mut outcome = SectionOutcome {
                    name: section.name.clone(),
                    status: SectionStatus::Ok,
                    line_count: section.lines.len(),
                    sampling: None,
                    entity_count: 0,
                    error: None,
                    script: None,
                };
                let result = if section.lines.is_empty() {
                    outcome.status = SectionStatus::Skipped;
                    Ok(outcome)
                } else if let Some(schema) = schemas.get(&section.name) {
                    match parse_section(section, schema, config, gateway) {
                        Ok((sampling, script, es)) => {
                            outcome.sampling = Some(sampling);
                            outcome.script = Some(script);
                            outcome.entity_count = es.len();
                            *entities[i].lock().unwrap() = es;
                            Ok(outcome)
                        }
                        Err(e @ Error::Config(_)) => Err(e),
                        Err(e) => {
                            warn!("section {} failed: {e}", section.name);
                            outcome.status = SectionStatus::Failed;
                            outcome.error = Some(e.to_string());
                            Ok(outcome)
                        }
                    }
                } else {
                    outcome.status = SectionStatus::Failed;
                    outcome.error = Some("no schema for this section".into());
                    Ok(outcome)
                };
                *results[i].lock().unwrap() = Some(result);
            });
        }
    });

    let mut out = Step2Outcome::default();
    for (r, es) in results.into_iter().zip(entities) {
        out.sections
            .push(r.into_inner().unwrap().expect("every section was processed")?);
        out.entities.extend(es.into_inner().unwrap());
    }
    Ok(out)
}

/// Everything a full extraction produces.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub step1: Step1Outcome,
    pub section_schemas: SectionSchemaMap,
    pub step2: Step2Outcome,
}

/// Step 1 followed by Step 2, without persisting anything.
pub fn run_extraction(corpus: &SourceCorpus, config: &Config, gateway: &Gateway) -> Result<Extraction> {
    let step1 = run_step1(corpus, config, gateway, None)?;
    let section_schemas = derive_step2(&step1.schema)?;
    let step2 = run_step2(&step1.sections, &section_schemas, config, gateway)?;
    Ok(Extraction {
        step1,
        section_schemas,
        step2,
    })
}

/// Share of non-blank corpus lines whose trimmed text appears in some entity's
/// `input_data`.
pub fn compute_coverage(corpus: &SourceCorpus, entities: &[EntityRecord]) -> f64 {
    let covered: HashSet<&str> = entities
        .iter()
        .flat_map(|e| e.input_data.iter().map(|l| l.trim()))
        .collect();
    let mut total = 0usize;
    let mut hit = 0usize;
    for line in corpus.lines() {
        let t = line.text.trim();
        if t.is_empty() {
            continue;
        }
        total += 1;
        if covered.contains(t) {
            hit += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Headline numbers of an extraction run. Request and character counters are
/// ledger sums; `total_time_s` is the summed LLM latency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub dataset: String,
    pub coverage: f64,
    pub identified_types: usize,
    pub extracted_types: usize,
    pub entity_counts: BTreeMap<String, usize>,
    pub total_entities: usize,
    pub unassigned_lines: usize,
    pub failed_sections: Vec<String>,
    pub total_requests: usize,
    pub total_in_chars: usize,
    pub total_out_chars: usize,
    pub total_time_s: f64,
    pub step1: UsageTotals,
    pub step2: UsageTotals,
    pub by_stage: BTreeMap<String, UsageTotals>,
}

impl ExtractionReport {
    pub fn build(
        dataset: &str,
        corpus: &SourceCorpus,
        step1: &Step1Outcome,
        step2: &Step2Outcome,
        ledger: &[UsageRecord],
    ) -> Self {
        let mut entity_counts = BTreeMap::new();
        for e in &step2.entities {
            *entity_counts.entry(e.entity_type.clone()).or_insert(0) += 1;
        }
        let totals = UsageTotals::of(ledger);
        let mut by_stage: BTreeMap<String, Vec<&UsageRecord>> = BTreeMap::new();
        for r in ledger {
            by_stage.entry(r.stage.to_string()).or_default().push(r);
        }
        ExtractionReport {
            dataset: dataset.to_string(),
            coverage: compute_coverage(corpus, &step2.entities),
            identified_types: step1.step1.sections.len(),
            extracted_types: entity_counts.len(),
            total_entities: step2.entities.len(),
            entity_counts,
            unassigned_lines: step1.unassigned.len(),
            failed_sections: step2.failed_sections(),
            total_requests: totals.requests,
            total_in_chars: totals.input_chars,
            total_out_chars: totals.output_chars,
            total_time_s: totals.latency_ms as f64 / 1000.0,
            step1: UsageTotals::of(ledger.iter().filter(|r| r.scope.is_none())),
            step2: UsageTotals::of(
                ledger
                    .iter()
                    .filter(|r| r.scope.as_deref().is_some_and(|s| s.starts_with("step2/"))),
            ),
            by_stage: by_stage
                .into_iter()
                .map(|(k, v)| (k, UsageTotals::of(v)))
                .collect(),
        }
    }
}

/// One point of the sample-size sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub samples: usize,
    pub identified_types: usize,
    pub extracted_types: usize,
    pub coverage: f64,
    pub input_chars: usize,
    pub output_chars: usize,
    pub latency_ms: u64,
    pub requests: usize,
    pub status: String,
}

pub fn sweep_scope(samples: usize) -> String {
    format!("sweep/{samples}")
}

/// Runs Step 1 for every sample count `1..=max_samples`. Identified types are
/// the schema's sections, extracted types the sections the splitter actually
/// populated, and coverage the share of non-blank lines assigned to a section.
/// Failed points are recorded and the sweep carries on.
pub fn sweep_sample_size(
    corpus: &SourceCorpus,
    config: &Config,
    gateway: &Gateway,
    max_samples: usize,
) -> Result<Vec<SweepRow>> {
    if corpus.non_blank_line_count() == 0 {
        return Err(Error::Input("empty corpus".into()));
    }
    let total = corpus.non_blank_line_count() as f64;
    let mut rows = Vec::new();
    for k in 1..=max_samples {
        let mut cfg = config.clone();
        cfg.sampling.target_samples = Some(k);
        let scope = sweep_scope(k);
        let outcome = run_step1(corpus, &cfg, gateway, Some(&scope));
        let usage = gateway.ledger().totals_for_scope(&scope);
        let mut row = SweepRow {
            samples: k,
            identified_types: 0,
            extracted_types: 0,
            coverage: 0.0,
            input_chars: usage.input_chars,
            output_chars: usage.output_chars,
            latency_ms: usage.latency_ms,
            requests: usage.requests,
            status: "ok".into(),
        };
        match outcome {
            Ok(o) => {
                row.identified_types = o.step1.sections.len();
                row.extracted_types = o.populated_sections();
                row.coverage = o.assigned_line_count() as f64 / total;
            }
            Err(e) => {
                warn!("sweep point {k} failed: {e}");
                row.status = format!("failed: {}", e.to_string().replace(['\n', '\r'], " "));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(SweepRowCsv {
            samples: r.samples,
            identified_types: r.identified_types,
            extracted_types: r.extracted_types,
            coverage: format!("{:.4}", r.coverage),
            input_chars: r.input_chars,
            output_chars: r.output_chars,
            latency_ms: r.latency_ms,
            requests: r.requests,
            status: &r.status,
        })
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

#[derive(Serialize)]
struct SweepRowCsv<'a> {
    samples: usize,
    identified_types: usize,
    extracted_types: usize,
    coverage: String,
    input_chars: usize,
    output_chars: usize,
    latency_ms: u64,
    requests: usize,
    status: &'a str,
}

/// Entity type names in first-seen order without duplicates.
pub fn entity_types(entities: &[EntityRecord]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    entities
        .iter()
        .filter(|e| seen.insert(e.entity_type.as_str()))
        .map(|e| e.entity_type.clone())
        .collect()
}
