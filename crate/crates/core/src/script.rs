//! Script learning: obtain parser scripts from the LLM and accept them only
//! after they run cleanly on the sample that produced them.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::ingest::Chunk;
use crate::llm::{strip_code_fence, Gateway, PromptRequest, RetryPolicy, Stage};
use crate::prompts;
use crate::schema::{with_sample_index, Step1Schema};

/// Reserved section for lines the splitter leaves out.
pub const UNASSIGNED: &str = "_unassigned";

const STDERR_FEEDBACK_CHARS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandboxConfig {
    pub interpreter_command: Vec<String>,
    pub script_extension: String,
    pub time_limit_ms: u64,
    pub max_output_bytes: usize,
    pub isolate_workdir: bool,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        SandboxConfig {
            interpreter_command: vec!["python3".into()],
            script_extension: "py".into(),
            time_limit_ms: 10_000,
            max_output_bytes: 10 * 1024 * 1024,
            isolate_workdir: true,
        }
    }
}

impl SandboxConfig {
    /// Fails when the interpreter cannot be found, so learning loops do not
    /// burn LLM calls on a broken environment.
    pub fn check_interpreter(&self) -> Result<PathBuf> {
        let Some(program) = self.interpreter_command.first() else {
            return Err(Error::Config("interpreter_command is empty".into()));
        };
        let candidate = PathBuf::from(program);
        if candidate.components().count() > 1 {
            return if candidate.is_file() {
                Ok(candidate)
            } else {
                Err(Error::Config(format!("interpreter {program} not found")))
            };
        }
        std::env::var_os("PATH")
            .into_iter()
            .flat_map(|p| std::env::split_paths(&p).collect::<Vec<_>>())
            .map(|dir| dir.join(program))
            .find(|p| p.is_file())
            .ok_or_else(|| Error::Config(format!("interpreter {program} not found on PATH")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "section", rename_all = "snake_case")]
pub enum ScriptStage {
    SectionSplitter,
    SectionParser(String),
}

impl ScriptStage {
    /// File name (without extension) under `scripts/`.
    pub fn file_stem(&self) -> String {
        match self {
            ScriptStage::SectionSplitter => "step1_splitter".into(),
            ScriptStage::SectionParser(s) => format!("step2_{}", sanitize(s)),
        }
    }
}

pub(crate) fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParserScript {
    pub source_code: String,
    pub stage: ScriptStage,
    pub verified_on: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub exit_status: i32,
    pub stdout: String,
    pub stderr: String,
    pub wall_ms: u64,
    pub timed_out: bool,
    pub output_limit_exceeded: bool,
}

impl ExecutionResult {
    pub fn succeeded(&self) -> bool {
        self.exit_status == 0 && !self.timed_out && !self.output_limit_exceeded
    }

    /// Short description of why a run failed, for repair prompts.
    pub fn failure_message(&self, limit_ms: u64) -> String {
        if self.timed_out {
            return format!("script timed out after {limit_ms} ms");
        }
        if self.output_limit_exceeded {
            return "script output exceeded the size limit".into();
        }
        format!(
            "script exited with status {}; stderr:\n{}",
            self.exit_status,
            truncate_chars(&self.stderr, STDERR_FEEDBACK_CHARS)
        )
    }
}

fn truncate_chars(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn drain<R: Read + Send + 'static>(
    mut reader: R,
    limit: usize,
    exceeded: Arc<AtomicBool>,
) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut buf = [0u8; 8192];
        loop {
            match reader.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = limit.saturating_sub(kept.len());
                    kept.extend_from_slice(&buf[..n.min(room)]);
                    if n > room {
                        exceeded.store(true, Ordering::SeqCst);
                    }
                }
            }
        }
        kept
    })
}

/// Runs a script with `input_text` on stdin in a scratch directory, enforcing
/// the time and output limits.
pub fn execute_script(
    script: &ParserScript,
    input_text: &str,
    sandbox: &SandboxConfig,
) -> Result<ExecutionResult> {
    execute_source(&script.source_code, input_text, sandbox)
}

pub fn execute_source(
    source_code: &str,
    input_text: &str,
    sandbox: &SandboxConfig,
) -> Result<ExecutionResult> {
    if sandbox.time_limit_ms == 0 {
        return Err(Error::Config("time_limit_ms must be positive".into()));
    }
    let interpreter = sandbox.check_interpreter()?;
    let workdir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let script_path = workdir
        .path()
        .join(format!("script.{}", sandbox.script_extension));
    std::fs::write(&script_path, source_code).map_err(|e| Error::io(&script_path, e))?;

    let mut cmd = Command::new(interpreter);
    cmd.args(&sandbox.interpreter_command[1..])
        .arg(&script_path)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    if sandbox.isolate_workdir {
        cmd.current_dir(workdir.path());
    }

    let started = Instant::now();
    let mut child = cmd
        .spawn()
        .map_err(|e| Error::Config(format!("cannot start interpreter: {e}")))?;

    let exceeded = Arc::new(AtomicBool::new(false));
    let out = drain(
        child.stdout.take().expect("piped"),
        sandbox.max_output_bytes,
        exceeded.clone(),
    );
    let err = drain(
        child.stderr.take().expect("piped"),
        sandbox.max_output_bytes,
        exceeded.clone(),
    );
    let mut stdin = child.stdin.take().expect("piped");
    let input = input_text.as_bytes().to_vec();
    let writer = thread::spawn(move || {
        // the script may exit without reading everything
        let _ = stdin.write_all(&input);
    });

    let limit = Duration::from_millis(sandbox.time_limit_ms);
    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait().map_err(|e| Error::io(&script_path, e))? {
            break Some(status);
        }
        if started.elapsed() >= limit {
            timed_out = true;
            break None;
        }
        if exceeded.load(Ordering::SeqCst) {
            break None;
        }
        thread::sleep(Duration::from_millis(2));
    };
    let status = match status {
        Some(s) => s,
        None => {
            let _ = child.kill();
            child.wait().map_err(|e| Error::io(&script_path, e))?
        }
    };
    let wall_ms = started.elapsed().as_millis() as u64;
    let _ = writer.join();
    let stdout = out.join().unwrap_or_default();
    let stderr = err.join().unwrap_or_default();

    let exit_status = match status.code() {
        Some(c) if !timed_out => c,
        Some(c) if c != 0 => c,
        _ => -1,
    };
    Ok(ExecutionResult {
        exit_status,
        stdout: String::from_utf8_lossy(&stdout).into_owned(),
        stderr: String::from_utf8_lossy(&stderr).into_owned(),
        wall_ms,
        timed_out,
        output_limit_exceeded: exceeded.load(Ordering::SeqCst),
    })
}

/// What a script's output is checked against.
#[derive(Debug, Clone, Copy)]
pub enum ParserTarget<'a> {
    /// Line-indexed section assignment over an input of `line_count` lines.
    Splitter {
        schema: &'a Step1Schema,
        line_count: usize,
    },
    /// Array of entity objects for one section.
    Section { schema: &'a Value },
}

impl ParserTarget<'_> {
    pub fn script_stage(&self, section: Option<&str>) -> ScriptStage {
        match self {
            ParserTarget::Splitter { .. } => ScriptStage::SectionSplitter,
            ParserTarget::Section { .. } => {
                ScriptStage::SectionParser(section.unwrap_or_default().to_string())
            }
        }
    }
}

pub fn validate_parser_output(stdout: &str, target: &ParserTarget<'_>) -> Result<(), String> {
    let value: Value = serde_json::from_str(stdout.trim())
        .map_err(|e| format!("output is not valid JSON: {e}"))?;
    match target {
        ParserTarget::Splitter { schema, line_count } => {
            validate_split(&value, schema, *line_count)
        }
        ParserTarget::Section { schema } => {
            let validator = jsonschema::draft202012::new(schema)
                .map_err(|e| format!("section schema does not compile: {e}"))?;
            if let Some(e) = validator.iter_errors(&value).next() {
                let at = e.instance_path().as_str();
                return Err(format!(
                    "output does not match the section schema at {}: {e}",
                    if at.is_empty() { "/" } else { at }
                ));
            }
            Ok(())
        }
    }
}

fn validate_split(value: &Value, schema: &Step1Schema, line_count: usize) -> Result<(), String> {
    let obj = value
        .as_object()
        .ok_or("splitter output must be a JSON object of section -> line numbers")?;
    let sections: BTreeSet<&str> = schema.section_names().collect();
    let mut seen = vec![false; line_count + 1];
    for (name, lines) in obj {
        if name != UNASSIGNED && !sections.contains(name.as_str()) {
            return Err(format!("unknown section {name:?}"));
        }
        let lines = lines
            .as_array()
            .ok_or_else(|| format!("section {name:?} must map to an array of line numbers"))?;
        for l in lines {
            let n = l
                .as_u64()
                .ok_or_else(|| format!("section {name:?} has a non-integer line number {l}"))?
                as usize;
            if n == 0 || n > line_count {
                return Err(format!(
                    "section {name:?} has line {n}, outside 1..={line_count}"
                ));
            }
            if seen[n] {
                return Err(format!("line {n} is assigned more than once"));
            }
            seen[n] = true;
        }
    }
    if let Some(n) = (1..=line_count).find(|&n| !seen[n]) {
        return Err(format!("line {n} is not assigned to any section"));
    }
    Ok(())
}

/// Runs the script on one input and checks its output; the error string is
/// what the repair prompt will see.
pub fn verify_on(
    source: &str,
    input: &str,
    target: &ParserTarget<'_>,
    sandbox: &SandboxConfig,
) -> Result<(), String> {
    let run = execute_source(source, input, sandbox).map_err(|e| e.to_string())?;
    if !run.succeeded() {
        return Err(run.failure_message(sandbox.time_limit_ms));
    }
    validate_parser_output(&run.stdout, target)
}

/// Learns a script for `target`: an initial prompt on the first sample, then a
/// refinement per remaining sample, each answer verified by running it on the
/// sample it was generated from.
pub fn learn_parser(
    samples: &[Chunk],
    target: ParserTarget<'_>,
    section: Option<&str>,
    gateway: &Gateway,
    policy: &RetryPolicy,
    sandbox: &SandboxConfig,
    scope: Option<String>,
) -> Result<ParserScript> {
    if samples.is_empty() {
        return Err(Error::Input("script learning needs at least one sample".into()));
    }
    sandbox.check_interpreter()?;

    let schema_text = match &target {
        ParserTarget::Splitter { schema, .. } => schema.to_json(),
        ParserTarget::Section { schema } => (*schema).clone(),
    };
    let schema_text = serde_json::to_string_pretty(&schema_text).expect("serializable");
    let section_name = section.unwrap_or_default();

    let mut current: Option<String> = None;
    let mut verified_on = Vec::new();
    for (i, sample) in samples.iter().enumerate() {
        let text = sample.text();
        let sample_target = match target {
            ParserTarget::Splitter { schema, .. } => ParserTarget::Splitter {
                schema,
                line_count: sample.lines.len(),
            },
            t => t,
        };
        let (stage, template) = match (&current, &target) {
            (None, ParserTarget::Splitter { .. }) => (Stage::ScriptInit, prompts::SPLITTER_INIT),
            (None, ParserTarget::Section { .. }) => (Stage::ScriptInit, prompts::PARSER_INIT),
            (Some(_), ParserTarget::Splitter { .. }) => {
                (Stage::ScriptRefine, prompts::SPLITTER_REFINE)
            }
            (Some(_), ParserTarget::Section { .. }) => {
                (Stage::ScriptRefine, prompts::PARSER_REFINE)
            }
        };
        let user = prompts::render(
            template,
            &[
                ("schema", &schema_text),
                ("sample", &text),
                ("section", section_name),
                ("script", current.as_deref().unwrap_or_default()),
            ],
        );
        let request =
            PromptRequest::new(stage, prompts::SCRIPT_SYSTEM, user).with_scope(scope.clone());
        let mut accepted = None;
        gateway
            .complete_with_validation(
                &request,
                |resp| {
                    let source = strip_code_fence(&resp.text);
                    verify_on(source, &text, &sample_target, sandbox)?;
                    accepted = Some(format!("{source}\n"));
                    Ok(())
                },
                policy,
            )
            .map_err(|e| with_sample_index(e, i))?;
        current = accepted;
        verified_on.push(sample.chunk_id);
    }

    Ok(ParserScript {
        source_code: current.expect("at least one sample"),
        stage: target.script_stage(section),
        verified_on,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{chunk_corpus, Document, SourceCorpus};
    use crate::llm::ScriptedBackend;
    use crate::schema::EntityType;
    use serde_json::json;

    fn sb() -> SandboxConfig {
        SandboxConfig::default()
    }

    fn step1() -> Step1Schema {
        Step1Schema {
            sections: ["A", "B"]
                .map(|n| EntityType {
                    name: n.into(),
                    description: String::new(),
                })
                .to_vec(),
        }
    }

    fn chunk(text: &str) -> Chunk {
        let c = SourceCorpus::from_documents(vec![Document::from_text("d", text)]);
        chunk_corpus(&c, 10_000, 0).unwrap().remove(0)
    }

    const ECHO: &str = "import sys\nsys.stdout.write(sys.stdin.read())\n";
    const SPLIT_BY_PREFIX: &str = r#"import sys, json
lines = sys.stdin.read().split("\n")
out = {"A": [], "B": [], "_unassigned": []}
for i, l in enumerate(lines, 1):
    out["A" if l.startswith("a") else "B" if l.startswith("b") else "_unassigned"].append(i)
print(json.dumps(out))
"#;

    #[test]
    fn identity_script() {
        let r = execute_source(ECHO, "x", &sb()).unwrap();
        assert_eq!(r.stdout, "x");
        assert_eq!(r.exit_status, 0);
        assert!(r.succeeded());
    }

    #[test]
    fn infinite_loop_times_out() {
        let cfg = SandboxConfig {
            time_limit_ms: 100,
            ..sb()
        };
        let r = execute_source("while True:\n    pass\n", "", &cfg).unwrap();
        assert!(r.timed_out);
        assert_ne!(r.exit_status, 0);
        // the limit holds up to scheduling slack
        assert!(r.wall_ms < 100 + 1500, "{}", r.wall_ms);
    }

    #[test]
    fn output_limit_is_enforced() {
        let cfg = SandboxConfig {
            max_output_bytes: 1000,
            ..sb()
        };
        let r = execute_source("import sys\nwhile True:\n    sys.stdout.write('x' * 4096)\n", "", &cfg)
            .unwrap();
        assert!(r.output_limit_exceeded);
        assert!(!r.succeeded());
        assert!(r.stdout.len() <= 1000);
    }

    #[test]
    fn syntax_error_reports_stderr() {
        let r = execute_source("def broken(:\n", "", &sb()).unwrap();
        assert_ne!(r.exit_status, 0);
        assert!(r.stderr.contains("SyntaxError"));
        assert!(r.failure_message(1000).contains("SyntaxError"));
    }

    #[test]
    fn missing_interpreter_is_config_error() {
        let cfg = SandboxConfig {
            interpreter_command: vec!["definitely-not-an-interpreter-xyz".into()],
            ..sb()
        };
        assert!(matches!(
            execute_source(ECHO, "", &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn splitter_on_twenty_lines_assigns_every_line() {
        let text: Vec<String> = (0..20)
            .map(|i| format!("{}{i}", ["a", "b", "c"][i % 3]))
            .collect();
        let text = text.join("\n");
        let r = execute_source(SPLIT_BY_PREFIX, &text, &sb()).unwrap();
        let s1 = step1();
        validate_parser_output(
            &r.stdout,
            &ParserTarget::Splitter {
                schema: &s1,
                line_count: 20,
            },
        )
        .unwrap();
    }

    #[test]
    fn parser_output_checks() {
        let schema = json!({"type":"array","items":{"type":"object","properties":{"input_data":{"type":"string"}},"required":["input_data"]}});
        let t = ParserTarget::Section { schema: &schema };
        assert!(validate_parser_output(r#"[{"input_data":"x"}]"#, &t).is_ok());
        assert!(validate_parser_output("not json", &t)
            .unwrap_err()
            .contains("not valid JSON"));
        let err = validate_parser_output(r#"[{"input_data":3}]"#, &t).unwrap_err();
        assert!(err.contains("/0/input_data"), "{err}");
    }

    #[test]
    fn splitter_gap_names_the_line() {
        let s1 = step1();
        let mut lines: Vec<u32> = (1..=20).collect();
        lines.retain(|&n| n != 7);
        let out = json!({"A": lines}).to_string();
        let err = validate_parser_output(
            &out,
            &ParserTarget::Splitter {
                schema: &s1,
                line_count: 20,
            },
        )
        .unwrap_err();
        assert_eq!(err, "line 7 is not assigned to any section");

        let dup = json!({"A": [1, 2], "B": [2]}).to_string();
        let t = ParserTarget::Splitter {
            schema: &s1,
            line_count: 2,
        };
        assert!(validate_parser_output(&dup, &t).unwrap_err().contains("more than once"));
        let unknown = json!({"Z": [1, 2]}).to_string();
        assert!(validate_parser_output(&unknown, &t).unwrap_err().contains("unknown section"));
    }

    #[test]
    fn learn_immediate_pass() {
        let mut b = ScriptedBackend::in_memory();
        b.insert(None, Stage::ScriptInit, 1, SPLIT_BY_PREFIX);
        let g = Gateway::new(b);
        let s1 = step1();
        let script = learn_parser(
            &[chunk("a1\nb2\nzz")],
            ParserTarget::Splitter {
                schema: &s1,
                line_count: 0,
            },
            None,
            &g,
            &RetryPolicy::default(),
            &sb(),
            None,
        )
        .unwrap();
        assert_eq!(script.stage, ScriptStage::SectionSplitter);
        assert_eq!(script.verified_on, vec![0]);
        assert_eq!(g.ledger().len(), 1);
    }

    #[test]
    fn learn_repairs_syntax_error() {
        let mut b = ScriptedBackend::in_memory();
        b.insert(None, Stage::ScriptInit, 1, "def broken(:\n");
        b.insert(None, Stage::ScriptRepair, 1, format!("```python\n{SPLIT_BY_PREFIX}```"));
        let g = Gateway::new(b);
        let s1 = step1();
        let script = learn_parser(
            &[chunk("a1\nb2")],
            ParserTarget::Splitter {
                schema: &s1,
                line_count: 0,
            },
            None,
            &g,
            &RetryPolicy::default(),
            &sb(),
            None,
        )
        .unwrap();
        assert_eq!(g.ledger().len(), 2);
        // re-running the persisted script reproduces valid output
        let r = execute_script(&script, "a1\nb2", &sb()).unwrap();
        assert!(r.succeeded());
        assert!(verify_on(
            &script.source_code,
            "a1\nb2",
            &ParserTarget::Splitter {
                schema: &s1,
                line_count: 2
            },
            &sb()
        )
        .is_ok());
    }

    #[test]
    fn repair_prompt_carries_truncated_stderr() {
        let long_err = "import sys\nsys.stderr.write('E' * 5000)\nsys.exit(3)\n".to_string();
        let r = execute_source(&long_err, "", &sb()).unwrap();
        let msg = r.failure_message(1000);
        assert!(msg.contains("status 3"));
        assert_eq!(msg.matches('E').count(), STDERR_FEEDBACK_CHARS);
    }
}
