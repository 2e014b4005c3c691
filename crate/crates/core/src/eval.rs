//! Q&A suites, manual grades and cost reports.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::llm::{Gateway, RetryPolicy, UsageRecord, UsageTotals};
use crate::retrieval::{RetrievalStrategy, Retriever};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub question: String,
    #[serde(default)]
    pub reference_answer: String,
    #[serde(default)]
    pub source: String,
}

pub fn load_qa(path: &Path) -> Result<Vec<QaItem>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let items: Vec<QaItem> = serde_json::from_str(&text)
        .map_err(|e| Error::Input(format!("{}: not a QA array: {e}", path.display())))?;
    if let Some(i) = items.iter().position(|q| q.question.trim().is_empty()) {
        return Err(Error::Input(format!("{}: item {} has an empty question", path.display(), i + 1)));
    }
    Ok(items)
}

/// `q003-hybrid` for the third item.
pub fn answer_id(item: usize, strategy: RetrievalStrategy) -> String {
    format!("q{:03}-{strategy}", item + 1)
}

pub fn qa_scope(item: usize, strategy: RetrievalStrategy) -> String {
    format!("qa/{}", answer_id(item, strategy))
}

/// One persisted answer of the suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub id: String,
    pub item: usize,
    pub strategy: RetrievalStrategy,
    pub question: String,
    pub reference_answer: String,
    pub text: String,
    pub queries: Vec<String>,
    pub result_rows: Vec<usize>,
    pub requests: usize,
    pub input_chars: usize,
    pub output_chars: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteSettings {
    pub policy: RetryPolicy,
    pub table_budget_bytes: usize,
    pub text_limit: usize,
    pub workers: usize,
}

impl SuiteSettings {
    pub fn from_config(config: &crate::Config) -> Self {
        SuiteSettings {
            policy: config.retry_policy(),
            table_budget_bytes: config.retrieval.table_budget_bytes,
            text_limit: config.retrieval.text_limit,
            workers: config.eval.workers,
        }
    }
}

/// Answers every `(item, strategy)` cell on a bounded pool. The result is
/// ordered by item, then by the order of `strategies`.
pub fn run_qa_suite(
    items: &[QaItem],
    strategies: &[RetrievalStrategy],
    graph: &KnowledgeGraph,
    gateway: &Gateway,
    settings: &SuiteSettings,
) -> Result<Vec<AnswerRecord>> {
    let workers = settings.workers;
    let cells: Vec<(usize, RetrievalStrategy)> = (0..items.len())
        .flat_map(|i| strategies.iter().map(move |s| (i, *s)))
        .collect();
    let retriever = Retriever::new(
        graph,
        gateway,
        settings.policy,
        settings.table_budget_bytes,
        settings.text_limit,
    );
    let slots: Vec<Mutex<Option<Result<AnswerRecord>>>> =
        cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers.max(1).min(cells.len().max(1)) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(i, strategy)) = cells.get(k) else {
                    break;
                };
                let item = &items[i];
                let record = retriever
                    .answer(&item.question, strategy, &qa_scope(i, strategy))
                    .map(|a| {
                        let usage = a.usage();
                        AnswerRecord {
                            id: answer_id(i, strategy),
                            item: i + 1,
                            strategy,
                            question: item.question.clone(),
                            reference_answer: item.reference_answer.clone(),
                            text: a.text,
                            queries: a.generated_queries,
                            result_rows: a.raw_results.iter().map(|t| t.rows.len()).collect(),
                            requests: usage.requests,
                            input_chars: usage.input_chars,
                            output_chars: usage.output_chars,
                        }
                    });
                *slots[k].lock().unwrap() = Some(record);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every cell answered"))
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("serializable"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::json(format!("{} line {}", path.display(), i + 1), e))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradeLabel {
    Incorrect,
    Correct,
    CorrectPlus,
}

impl GradeLabel {
    pub const ALL: [GradeLabel; 3] = [GradeLabel::Incorrect, GradeLabel::Correct, GradeLabel::CorrectPlus];

    pub fn symbol(self) -> &'static str {
        match self {
            GradeLabel::Incorrect => "-",
            GradeLabel::Correct => "+",
            GradeLabel::CorrectPlus => "++",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GradeLabel::Incorrect => "incorrect",
            GradeLabel::Correct => "correct",
            GradeLabel::CorrectPlus => "correct_plus",
        }
    }
}

impl fmt::Display for GradeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GradeLabel {
    type Err = Error;

    /// Accepts the names and the `-`, `+`, `++` symbols.
    fn from_str(s: &str) -> Result<Self> {
        GradeLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s || l.symbol() == s)
            .ok_or_else(|| {
                Error::Input(format!(
                    "unknown grade {s:?}; use incorrect, correct, correct_plus or -, +, ++"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeRecord {
    pub answer_id: String,
    pub label: GradeLabel,
}

/// Appends a grade. Unknown answers and second grades are rejected.
pub fn grade_answer(answers: &Path, grades: &Path, answer_id: &str, label: GradeLabel) -> Result<GradeRecord> {
    if !answers.exists() {
        return Err(Error::Input("no answers recorded in this run".into()));
    }
    let known: Vec<AnswerRecord> = read_jsonl(answers)?;
    if !known.iter().any(|a| a.id == answer_id) {
        return Err(Error::Input(format!("unknown answer id {answer_id:?}")));
    }
    let existing: Vec<GradeRecord> = if grades.exists() { read_jsonl(grades)? } else { Vec::new() };
    if existing.iter().any(|g| g.answer_id == answer_id) {
        return Err(Error::Input(format!("answer {answer_id:?} is already graded")));
    }
    let record = GradeRecord {
        answer_id: answer_id.to_string(),
        label,
    };
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(grades)
        .map_err(|e| Error::io(grades, e))?;
    writeln!(f, "{}", serde_json::to_string(&record).expect("serializable")).map_err(|e| Error::io(grades, e))?;
    Ok(record)
}

/// Per-strategy grade counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeTable {
    pub rows: BTreeMap<RetrievalStrategy, GradeCounts>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeCounts {
    pub incorrect: usize,
    pub correct: usize,
    pub correct_plus: usize,
    pub ungraded: usize,
}

impl GradeTable {
    pub fn build(answers: &[AnswerRecord], grades: &[GradeRecord]) -> Self {
        let by_id: BTreeMap<&str, GradeLabel> =
            grades.iter().map(|g| (g.answer_id.as_str(), g.label)).collect();
        let mut t = GradeTable::default();
        for a in answers {
            let c = t.rows.entry(a.strategy).or_default();
            match by_id.get(a.id.as_str()) {
                Some(GradeLabel::Incorrect) => c.incorrect += 1,
                Some(GradeLabel::Correct) => c.correct += 1,
                Some(GradeLabel::CorrectPlus) => c.correct_plus += 1,
                None => c.ungraded += 1,
            }
        }
        t
    }
}

impl fmt::Display for GradeTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>5} {:>5} {:>5} {:>9}", "Strategy", "-", "+", "++", "ungraded")?;
        for (s, c) in &self.rows {
            writeln!(
                f,
                "{:<10} {:>5} {:>5} {:>5} {:>9}",
                s.as_str(),
                c.incorrect,
                c.correct,
                c.correct_plus,
                c.ungraded
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prices {
    pub input_per_char: f64,
    pub output_per_char: f64,
}

impl Prices {
    pub fn cost(&self, totals: &UsageTotals) -> f64 {
        totals.input_chars as f64 * self.input_per_char + totals.output_chars as f64 * self.output_per_char
    }
}

/// Time and money spent on one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub dataset: String,
    pub system: String,
    pub total_time_min: f64,
    pub total_cost_usd: f64,
    pub request_count: usize,
    pub input_chars: usize,
    pub output_chars: usize,
    pub coverage: Option<f64>,
}

impl CostReport {
    pub fn from_ledger(
        dataset: &str,
        system: &str,
        records: &[UsageRecord],
        prices: &Prices,
        wall_time_ms: u64,
        coverage: Option<f64>,
    ) -> Self {
        let t = UsageTotals::of(records);
        CostReport {
            dataset: dataset.to_string(),
            system: system.to_string(),
            total_time_min: wall_time_ms as f64 / 60_000.0,
            total_cost_usd: prices.cost(&t),
            request_count: t.requests,
            input_chars: t.input_chars,
            output_chars: t.output_chars,
            coverage,
        }
    }
}

/// Renders reports as a `Dataset | System | Time (min) | Cost (USD)` table.
pub fn render_cost_table(reports: &[CostReport]) -> String {
    let header = ["Dataset", "System", "Time (min)", "Cost (USD)", "Requests", "Coverage"];
    let rows: Vec<[String; 6]> = reports
        .iter()
        .map(|r| {
            [
                r.dataset.clone(),
                r.system.clone(),
                format!("{:.1}", r.total_time_min),
                format!("{:.2}", r.total_cost_usd),
                r.request_count.to_string(),
                r.coverage.map_or("-".into(), |c| format!("{:.0}%", c * 100.0)),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap())
        .collect();
    let line = |cells: &[&str]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = line(&header);
    let dashes: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&line(&dashes.iter().map(String::as_str).collect::<Vec<_>>()));
    for r in &rows {
        out.push_str(&line(&r.iter().map(String::as_str).collect::<Vec<_>>()));
    }
    out
}
