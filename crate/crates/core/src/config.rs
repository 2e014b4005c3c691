//! Pipeline configuration.
//!
//! A config file is one JSON document whose keys are dotted paths such as
//! `"ingest.chunk_tokens"`; nested objects are flattened to the same form.
//! Command-line overrides go through [`Config::apply`] as well, so file values
//! and overrides accept exactly the same keys.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::llm::RetryPolicy;
use crate::sampling::{KeywordExtractionConfig, SampleSelectionConfig};
use crate::schema::SchemaLimits;
use crate::script::SandboxConfig;

pub const ENV_BACKEND: &str = "FASTRAG_BACKEND";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub chunk_tokens: usize,
    pub overlap_tokens: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            chunk_tokens: 1000,
            overlap_tokens: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub n_clusters: usize,
    pub n_terms_per_cluster: usize,
    pub coverage_threshold: f64,
    pub random_seed: u64,
    /// When set, `(n_clusters, n_terms_per_cluster)` is searched over `grid`
    /// for a selection of this many chunks.
    pub target_samples: Option<usize>,
    pub grid: Vec<(usize, usize)>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            n_clusters: 4,
            n_terms_per_cluster: 4,
            coverage_threshold: 1.0,
            random_seed: 42,
            target_samples: None,
            grid: default_grid(),
        }
    }
}

/// `(n_c, n_t)` for `n_c` in 1..=8 and `n_t` in 1..=8, row-major.
pub fn default_grid() -> Vec<(usize, usize)> {
    (1..=8).flat_map(|c| (1..=8).map(move |t| (c, t))).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Step2Config {
    /// Defaults to `sampling.target_samples`.
    pub target_samples: Option<usize>,
    /// Defaults to `ingest.chunk_tokens`.
    pub chunk_tokens: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Scripted,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub max_attempts: u32,
    /// Falls back to `FASTRAG_BACKEND`, then to `live`.
    pub backend: Option<BackendKind>,
    pub fixtures_dir: Option<PathBuf>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            max_attempts: RetryPolicy::default().max_attempts,
            backend: None,
            fixtures_dir: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub paths: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub input_price_per_char: f64,
    pub output_price_per_char: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub table_budget_bytes: usize,
    pub text_limit: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            table_budget_bytes: 16 * 1024,
            text_limit: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkerConfig {
    pub workers: usize,
}

impl Default for WorkerConfig {
    fn default() -> Self {
        WorkerConfig { workers: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub max_samples: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { max_samples: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub dataset_name: String,
    pub corpus: CorpusConfig,
    pub ingest: IngestConfig,
    pub sampling: SamplingConfig,
    pub step2: Step2Config,
    pub schema: SchemaLimits,
    pub sandbox: SandboxConfig,
    pub llm: LlmConfig,
    pub extraction: WorkerConfig,
    pub retrieval: RetrievalConfig,
    pub eval: WorkerConfig,
    pub sweep: SweepConfig,
    pub cost: CostConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            dataset_name: "dataset".into(),
            corpus: CorpusConfig::default(),
            ingest: IngestConfig::default(),
            sampling: SamplingConfig::default(),
            step2: Step2Config::default(),
            schema: SchemaLimits::default(),
            sandbox: SandboxConfig::default(),
            llm: LlmConfig::default(),
            extraction: WorkerConfig::default(),
            retrieval: RetrievalConfig::default(),
            eval: WorkerConfig::default(),
            sweep: SweepConfig::default(),
            cost: CostConfig::default(),
        }
    }
}

fn flatten_into(prefix: &str, value: &Value, out: &mut Vec<(String, Value)>) {
    match value {
        Value::Object(map) if !map.is_empty() => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

/// Flattens nested objects into `(dotted key, leaf value)` pairs.
pub fn flatten(value: &Value) -> Vec<(String, Value)> {
    let mut out = Vec::new();
    flatten_into("", value, &mut out);
    out
}

/// Parses a `--set` value: JSON when it parses, otherwise a plain string.
pub fn parse_override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl Config {
    /// Sets one dotted key. Unknown keys and ill-typed values are user errors.
    pub fn apply(&mut self, key: &str, value: Value) -> Result<()> {
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut tree;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        if slot.is_object() && !value.is_object() {
            return Err(Error::Config(format!("config key {key:?} is a section, not a value")));
        }
        *slot = value;
        *self = serde_json::from_value(tree)
            .map_err(|e| Error::Config(format!("bad value for {key:?}: {e}")))?;
        Ok(())
    }

    /// Applies every key of a (possibly nested) JSON document.
    pub fn apply_document(&mut self, doc: &Value) -> Result<()> {
        if !doc.is_object() {
            return Err(Error::Config("config document must be a JSON object".into()));
        }
        for (k, v) in flatten(doc) {
            self.apply(&k, v)?;
        }
        Ok(())
    }

    /// Defaults overlaid with the file. Relative corpus and fixture paths are
    /// resolved against the file's directory.
    pub fn from_file(path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Config::default();
        cfg.apply_document(&doc)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in &mut cfg.corpus.paths {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(d) = &mut cfg.llm.fixtures_dir {
            if d.is_relative() {
                *d = base.join(&*d);
            }
        }
        Ok(cfg)
    }

    /// All settings as a flat dotted-key map (for run manifests).
    pub fn snapshot(&self) -> Map<String, Value> {
        flatten(&serde_json::to_value(self).expect("config serializes"))
            .into_iter()
            .collect()
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.llm.max_attempts,
        }
    }

    pub fn keyword_config(&self) -> KeywordExtractionConfig {
        KeywordExtractionConfig {
            n_clusters: self.sampling.n_clusters,
            n_terms_per_cluster: self.sampling.n_terms_per_cluster,
            random_seed: self.sampling.random_seed,
        }
    }

    pub fn selection_config(&self) -> SampleSelectionConfig {
        SampleSelectionConfig {
            coverage_threshold: self.sampling.coverage_threshold,
        }
    }

    pub fn step2_chunk_tokens(&self) -> usize {
        self.step2.chunk_tokens.unwrap_or(self.ingest.chunk_tokens)
    }

    pub fn step2_target_samples(&self) -> Option<usize> {
        self.step2.target_samples.or(self.sampling.target_samples)
    }

    pub fn backend_kind(&self) -> Result<BackendKind> {
        if let Some(b) = self.llm.backend {
            return Ok(b);
        }
        match std::env::var(ENV_BACKEND).ok().as_deref() {
            None | Some("") | Some("live") => Ok(BackendKind::Live),
            Some("scripted") => Ok(BackendKind::Scripted),
            Some(other) => Err(Error::Config(format!(
                "{ENV_BACKEND} must be 'scripted' or 'live', got {other:?}"
            ))),
        }
    }

    /// Rejects values that would make the pipeline misbehave later.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.ingest.chunk_tokens == 0 {
            return bad("ingest.chunk_tokens must be positive");
        }
        if self.ingest.overlap_tokens >= self.ingest.chunk_tokens {
            return bad("ingest.overlap_tokens must be smaller than ingest.chunk_tokens");
        }
        if self.step2_chunk_tokens() <= self.ingest.overlap_tokens {
            return bad("step2.chunk_tokens must be larger than ingest.overlap_tokens");
        }
        if !(0.0..=1.0).contains(&self.sampling.coverage_threshold) {
            return bad("sampling.coverage_threshold must be within [0, 1]");
        }
        if self.sampling.n_clusters == 0 || self.sampling.n_terms_per_cluster == 0 {
            return bad("sampling.n_clusters and sampling.n_terms_per_cluster must be positive");
        }
        if self.sampling.target_samples == Some(0) || self.step2.target_samples == Some(0) {
            return bad("target_samples must be positive");
        }
        if self.sampling.grid.is_empty() {
            return bad("sampling.grid must not be empty");
        }
        if self.llm.max_attempts == 0 {
            return bad("llm.max_attempts must be positive");
        }
        if self.extraction.workers == 0 || self.eval.workers == 0 {
            return bad("worker counts must be positive");
        }
        if self.sweep.max_samples == 0 {
            return bad("sweep.max_samples must be positive");
        }
        if self.cost.input_price_per_char < 0.0 || self.cost.output_price_per_char < 0.0 {
            return bad("prices must not be negative");
        }
        Ok(())
    }
}
