//! LLM access: a uniform gateway over interchangeable backends, with a
//! validation/repair loop and exact character accounting.

mod live;
mod scripted;

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use live::LiveBackend;
pub use scripted::ScriptedBackend;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    SchemaInit,
    SchemaRefine,
    SchemaRepair,
    ScriptInit,
    ScriptRefine,
    ScriptRepair,
    QueryGraph,
    QueryText,
    QueryHybrid,
    Synthesize,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::SchemaInit,
        Stage::SchemaRefine,
        Stage::SchemaRepair,
        Stage::ScriptInit,
        Stage::ScriptRefine,
        Stage::ScriptRepair,
        Stage::QueryGraph,
        Stage::QueryText,
        Stage::QueryHybrid,
        Stage::Synthesize,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::SchemaInit => "schema_init",
            Stage::SchemaRefine => "schema_refine",
            Stage::SchemaRepair => "schema_repair",
            Stage::ScriptInit => "script_init",
            Stage::ScriptRefine => "script_refine",
            Stage::ScriptRepair => "script_repair",
            Stage::QueryGraph => "query_graph",
            Stage::QueryText => "query_text",
            Stage::QueryHybrid => "query_hybrid",
            Stage::Synthesize => "synthesize",
        }
    }

    /// Stage used when re-asking after a failed attempt.
    pub fn repair_stage(self) -> Stage {
        match self {
            Stage::SchemaInit | Stage::SchemaRefine => Stage::SchemaRepair,
            Stage::ScriptInit | Stage::ScriptRefine => Stage::ScriptRepair,
            other => other,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub stage: Stage,
    /// Namespace for fixture replay and accounting, e.g. `step2/Interface`.
    pub scope: Option<String>,
    pub system_text: String,
    pub user_text: String,
    pub attempt: u32,
}

impl PromptRequest {
    pub fn new(stage: Stage, system_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        PromptRequest {
            stage,
            scope: None,
            system_text: system_text.into(),
            user_text: user_text.into(),
            attempt: 1,
        }
    }

    pub fn with_scope(mut self, scope: Option<String>) -> Self {
        self.scope = scope;
        self
    }

    pub fn input_chars(&self) -> usize {
        self.system_text.chars().count() + self.user_text.chars().count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptResponse {
    pub text: String,
    pub input_chars: usize,
    pub output_chars: usize,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 4 }
    }
}

/// What a backend hands back for one call.
#[derive(Debug, Clone)]
pub struct Completion {
    pub text: String,
    pub latency_ms: u64,
}

pub trait Backend: Send + Sync {
    /// `Error::Transport` is retryable; any other error aborts the call chain.
    fn complete(&self, request: &PromptRequest) -> Result<Completion>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<String>,
    pub attempt: u32,
    pub input_chars: usize,
    pub output_chars: usize,
    pub latency_ms: u64,
    pub success: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub requests: usize,
    pub input_chars: usize,
    pub output_chars: usize,
    pub latency_ms: u64,
}

impl UsageTotals {
    pub fn of<'a>(records: impl IntoIterator<Item = &'a UsageRecord>) -> Self {
        records
            .into_iter()
            .fold(UsageTotals::default(), |mut t, r| {
                t.requests += 1;
                t.input_chars += r.input_chars;
                t.output_chars += r.output_chars;
                t.latency_ms += r.latency_ms;
                t
            })
    }
}

/// Append-only usage log, shared between concurrent callers.
#[derive(Debug, Default)]
pub struct UsageLedger {
    records: Mutex<Vec<UsageRecord>>,
}

impl UsageLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// A ledger continuing from previously persisted records.
    pub fn from_records(records: Vec<UsageRecord>) -> Self {
        UsageLedger {
            records: Mutex::new(records),
        }
    }

    /// Drops every record for which `keep` returns false.
    pub fn retain(&self, keep: impl FnMut(&UsageRecord) -> bool) {
        self.records.lock().unwrap().retain(keep);
    }

    fn append(&self, record: UsageRecord) -> usize {
        let mut records = self.records.lock().unwrap();
        records.push(record);
        records.len() - 1
    }

    fn mark_failed(&self, index: usize) {
        self.records.lock().unwrap()[index].success = false;
    }

    pub fn len(&self) -> usize {
        self.records.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> Vec<UsageRecord> {
        self.records.lock().unwrap().clone()
    }

    pub fn totals(&self) -> UsageTotals {
        UsageTotals::of(self.records.lock().unwrap().iter())
    }

    /// Totals over records in scope `prefix` or any scope nested under it
    /// (`step2` covers `step2/Interface` but `sweep/1` does not cover `sweep/10`).
    pub fn totals_for_scope(&self, prefix: &str) -> UsageTotals {
        UsageTotals::of(self.records.lock().unwrap().iter().filter(|r| {
            r.scope.as_deref().is_some_and(|s| {
                s == prefix || s.strip_prefix(prefix).is_some_and(|rest| rest.starts_with('/'))
            })
        }))
    }
}

pub const FEEDBACK_HEADER: &str = "PREVIOUS ATTEMPT FAILED:";

#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn Backend>,
    ledger: Arc<UsageLedger>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("records", &self.ledger.len())
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: impl Backend + 'static) -> Self {
        Self::with_ledger(Arc::new(backend), Arc::new(UsageLedger::new()))
    }

    pub fn with_ledger(backend: Arc<dyn Backend>, ledger: Arc<UsageLedger>) -> Self {
        Gateway { backend, ledger }
    }

    pub fn ledger(&self) -> &Arc<UsageLedger> {
        &self.ledger
    }

    fn call(&self, request: &PromptRequest) -> (Result<PromptResponse>, usize) {
        let input_chars = request.input_chars();
        let outcome = self.backend.complete(request);
        let (output_chars, latency_ms, ok) = match &outcome {
            Ok(c) => (c.text.chars().count(), c.latency_ms, true),
            Err(_) => (0, 0, false),
        };
        let index = self.ledger.append(UsageRecord {
            stage: request.stage,
            scope: request.scope.clone(),
            attempt: request.attempt,
            input_chars,
            output_chars,
            latency_ms,
            success: ok,
        });
        let response = outcome.map(|c| PromptResponse {
            text: c.text,
            input_chars,
            output_chars,
            latency_ms,
        });
        (response, index)
    }

    /// One backend call; always leaves exactly one ledger record.
    pub fn complete(&self, request: &PromptRequest) -> Result<PromptResponse> {
        self.call(request).0
    }

    /// Calls until `validator` accepts, feeding each failure back to the model.
    ///
    /// Retries switch to the stage's repair variant and append the failure
    /// message (and the rejected response) to the original user text.
    pub fn complete_with_validation<F>(
        &self,
        request: &PromptRequest,
        mut validator: F,
        policy: &RetryPolicy,
    ) -> Result<PromptResponse>
    where
        F: FnMut(&PromptResponse) -> std::result::Result<(), String>,
    {
        let mut current = request.clone();
        let mut last_message = String::from("no attempts made");
        for attempt in 1..=policy.max_attempts.max(1) {
            current.attempt = attempt;
            let (outcome, index) = self.call(&current);
            let feedback = match outcome {
                Ok(response) => match validator(&response) {
                    Ok(()) => return Ok(response),
                    Err(message) => {
                        self.ledger.mark_failed(index);
                        last_message = message;
                        format!(
                            "{FEEDBACK_HEADER} {last_message}\n--- rejected response ---\n{}",
                            response.text
                        )
                    }
                },
                Err(Error::Transport(message)) => {
                    last_message = format!("transport error: {message}");
                    format!("{FEEDBACK_HEADER} {last_message}")
                }
                Err(other) => return Err(other),
            };
            current = PromptRequest {
                stage: request.stage.repair_stage(),
                scope: request.scope.clone(),
                system_text: request.system_text.clone(),
                user_text: format!("{}\n\n{feedback}", request.user_text),
                attempt,
            };
        }
        Err(Error::StageExhausted {
            stage: request.stage,
            attempts: policy.max_attempts.max(1),
            sample_index: None,
            last_message,
        })
    }
}

/// Removes a surrounding Markdown code fence, if present.
pub fn strip_code_fence(text: &str) -> &str {
    let t = text.trim();
    if let Some(rest) = t.strip_prefix("```") {
        let body = match rest.find('\n') {
            Some(i) => &rest[i + 1..],
            None => rest,
        };
        let body = body.trim_end();
        return body.strip_suffix("```").unwrap_or(body).trim_end_matches('\n');
    }
    t
}
