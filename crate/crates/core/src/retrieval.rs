//! Question answering over the knowledge graph with four strategies.
//!
//! * Graph: the model writes a mini query, its rows are interpreted.
//! * Text: the model writes a text search, the matching lines are interpreted.
//! * Combined: both of the above run in parallel and one synthesis prompt sees
//!   both result tables.
//! * Hybrid: one prompt carries the schema and the text syntax and yields one
//!   mini query that may use `TEXT()`.

use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::kg::{parse_query, parse_text_query, KnowledgeGraph, ResultTable};
use crate::llm::{strip_code_fence, Gateway, PromptRequest, RetryPolicy, Stage, UsageRecord, UsageTotals};
use crate::prompts;

pub const UNABLE_MARKER: &str = "[unable to answer]";
pub const NO_RESULTS_MARKER: &str = "[no results]";

const SYSTEM: &str = "You are a precise assistant for questions about network logs and device configurations.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalStrategy {
    Graph,
    Text,
    Combined,
    Hybrid,
}

impl RetrievalStrategy {
    pub const ALL: [RetrievalStrategy; 4] = [
        RetrievalStrategy::Graph,
        RetrievalStrategy::Text,
        RetrievalStrategy::Combined,
        RetrievalStrategy::Hybrid,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RetrievalStrategy::Graph => "graph",
            RetrievalStrategy::Text => "text",
            RetrievalStrategy::Combined => "combined",
            RetrievalStrategy::Hybrid => "hybrid",
        }
    }

    /// Parses `all` or a comma-separated list.
    pub fn parse_list(s: &str) -> Result<Vec<RetrievalStrategy>> {
        if s.trim().eq_ignore_ascii_case("all") {
            return Ok(Self::ALL.to_vec());
        }
        let mut out = Vec::new();
        for part in s.split(',') {
            let st: RetrievalStrategy = part.trim().parse()?;
            if !out.contains(&st) {
                out.push(st);
            }
        }
        Ok(out)
    }
}

impl fmt::Display for RetrievalStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RetrievalStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Input(format!(
                    "unknown strategy {s:?}; expected graph, text, combined, hybrid or all"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub question: String,
    pub strategy: RetrievalStrategy,
    pub text: String,
    pub generated_queries: Vec<String>,
    pub raw_results: Vec<ResultTable>,
    /// Usage records of this answer's prompts, in stage order.
    pub ledger_slice: Vec<UsageRecord>,
}

impl Answer {
    pub fn usage(&self) -> UsageTotals {
        UsageTotals::of(&self.ledger_slice)
    }

    pub fn is_unable(&self) -> bool {
        self.text.starts_with(UNABLE_MARKER)
    }

    /// Compact JSON for the command line: text, queries and row counts.
    pub fn summary_json(&self) -> serde_json::Value {
        json!({
            "strategy": self.strategy,
            "question": self.question,
            "text": self.text,
            "queries": self.generated_queries,
            "result_rows": self.raw_results.iter().map(|t| t.rows.len()).collect::<Vec<_>>(),
            "requests": self.ledger_slice.len(),
        })
    }
}

/// Cuts `s` to at most `budget` bytes on a character boundary.
pub fn truncate_bytes(s: &str, budget: usize) -> String {
    if s.len() <= budget {
        return s.to_string();
    }
    let mut end = budget;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    format!("{} ...[truncated]", &s[..end])
}

enum Branch {
    Graph,
    Text,
    Hybrid,
}

struct BranchResult {
    query: String,
    table: ResultTable,
}

pub struct Retriever<'a> {
    graph: &'a KnowledgeGraph,
    gateway: &'a Gateway,
    policy: RetryPolicy,
    table_budget_bytes: usize,
    text_limit: usize,
    schema_text: String,
}

impl<'a> Retriever<'a> {
    pub fn new(
        graph: &'a KnowledgeGraph,
        gateway: &'a Gateway,
        policy: RetryPolicy,
        table_budget_bytes: usize,
        text_limit: usize,
    ) -> Self {
        Retriever {
            graph,
            gateway,
            policy,
            table_budget_bytes,
            text_limit,
            schema_text: graph.export_schema().to_string(),
        }
    }

    fn text_table(&self, query: &str) -> Result<ResultTable> {
        let hits = self.graph.text_search(query, self.text_limit)?;
        Ok(ResultTable {
            columns: vec!["text".into(), "entity".into(), "entity_id".into(), "score".into()],
            rows: hits
                .into_iter()
                .map(|h| {
                    let text = self.graph.node(h.line).properties.get("text").cloned();
                    let (label, id) = match h.parent {
                        Some(p) => (json!(self.graph.node(p).label), json!(p)),
                        None => (json!(null), json!(null)),
                    };
                    vec![text.unwrap_or_default(), label, id, json!(h.score)]
                })
                .collect(),
        })
    }

    /// Asks for a query and runs it; `Ok(None)` when the repair loop gave up.
    fn branch(&self, kind: Branch, question: &str, scope: &str) -> Result<Option<BranchResult>> {
        let (stage, user) = match kind {
            Branch::Graph => (
                Stage::QueryGraph,
                prompts::render(
                    prompts::QUERY_GRAPH,
                    &[
                        ("graph_schema", &self.schema_text),
                        ("grammar", prompts::GRAMMAR),
                        ("question", question),
                    ],
                ),
            ),
            Branch::Text => (
                Stage::QueryText,
                prompts::render(
                    prompts::QUERY_TEXT,
                    &[("text_syntax", prompts::TEXT_SYNTAX), ("question", question)],
                ),
            ),
            Branch::Hybrid => (
                Stage::QueryHybrid,
                prompts::render(
                    prompts::QUERY_HYBRID,
                    &[
                        ("graph_schema", &self.schema_text),
                        ("grammar", prompts::GRAMMAR),
                        ("text_syntax", prompts::TEXT_SYNTAX),
                        ("question", question),
                    ],
                ),
            ),
        };
        let request = PromptRequest::new(stage, SYSTEM, user).with_scope(Some(scope.to_string()));
        let is_text = matches!(kind, Branch::Text);
        let mut accepted = None;
        let outcome = self.gateway.complete_with_validation(
            &request,
            |resp| {
                let q = strip_code_fence(&resp.text).trim().to_string();
                if is_text {
                    parse_text_query(&q).map_err(|e| e.to_string())?;
                } else {
                    parse_query(&q).map_err(|e| e.to_string())?;
                }
                accepted = Some(q);
                Ok(())
            },
            &self.policy,
        );
        match outcome {
            Ok(_) => {
                let query = accepted.expect("validator accepted");
                let table = if is_text {
                    self.text_table(&query)?
                } else {
                    self.graph.run_query(&query)?
                };
                Ok(Some(BranchResult { query, table }))
            }
            Err(e @ Error::StageExhausted { .. }) => {
                warn!("{scope}: {e}");
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    fn synthesize(&self, question: &str, results: &[(&str, &BranchResult)], scope: &str) -> Result<Option<String>> {
        let mut blocks = Vec::new();
        for (name, r) in results {
            let body = serde_json::to_string(&r.table).expect("table serializes");
            blocks.push(format!(
                "{name} query: {}\n{name} results ({} rows):\n{}",
                r.query,
                r.table.rows.len(),
                truncate_bytes(&body, self.table_budget_bytes)
            ));
        }
        let user = prompts::render(
            prompts::SYNTHESIZE,
            &[("question", question), ("results", &blocks.join("\n\n"))],
        );
        let request =
            PromptRequest::new(Stage::Synthesize, SYSTEM, user).with_scope(Some(scope.to_string()));
        match self.gateway.complete_with_validation(
            &request,
            |resp| {
                if resp.text.trim().is_empty() {
                    Err("the answer is empty".into())
                } else {
                    Ok(())
                }
            },
            &self.policy,
        ) {
            Ok(r) => Ok(Some(r.text.trim().to_string())),
            Err(e @ Error::StageExhausted { .. }) => {
                warn!("{scope}: {e}");
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    /// Answers one question. `scope` must be unique among concurrent answers;
    /// it keys scripted fixtures and selects this answer's ledger records.
    pub fn answer(&self, question: &str, strategy: RetrievalStrategy, scope: &str) -> Result<Answer> {
        let in_scope = |r: &UsageRecord| r.scope.as_deref() == Some(scope);
        let before = self.gateway.ledger().records().iter().filter(|r| in_scope(r)).count();

        let branches: Vec<(&str, Option<BranchResult>)> = match strategy {
            RetrievalStrategy::Graph => vec![("Graph", self.branch(Branch::Graph, question, scope)?)],
            RetrievalStrategy::Text => vec![("Text", self.branch(Branch::Text, question, scope)?)],
            RetrievalStrategy::Hybrid => {
                vec![("Hybrid", self.branch(Branch::Hybrid, question, scope)?)]
            }
            RetrievalStrategy::Combined => {
                let (g, t) = std::thread::scope(|s| {
                    let g = s.spawn(|| self.branch(Branch::Graph, question, scope));
                    let t = s.spawn(|| self.branch(Branch::Text, question, scope));
                    (g.join().expect("graph branch"), t.join().expect("text branch"))
                });
                vec![("Graph", g?), ("Text", t?)]
            }
        };

        let done: Vec<(&str, &BranchResult)> = branches
            .iter()
            .filter_map(|(n, b)| b.as_ref().map(|b| (*n, b)))
            .collect();
        let text = if done.is_empty() {
            UNABLE_MARKER.to_string()
        } else {
            match self.synthesize(question, &done, scope)? {
                None => UNABLE_MARKER.to_string(),
                Some(t) if done.iter().all(|(_, b)| b.table.is_empty()) => {
                    format!("{NO_RESULTS_MARKER} {t}")
                }
                Some(t) => t,
            }
        };

        let mut ledger_slice: Vec<UsageRecord> = self
            .gateway
            .ledger()
            .records()
            .into_iter()
            .filter(in_scope)
            .skip(before)
            .collect();
        ledger_slice.sort_by_key(|r| (r.stage, r.attempt));
        Ok(Answer {
            question: question.to_string(),
            strategy,
            text,
            generated_queries: done.iter().map(|(_, b)| b.query.clone()).collect(),
            raw_results: done.iter().map(|(_, b)| b.table.clone()).collect(),
            ledger_slice,
        })
    }
}
