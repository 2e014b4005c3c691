//! `fastrag` command-line front end.

use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use fastrag_core::config::parse_override_value;
use fastrag_core::eval::{
    grade_answer, load_qa, read_jsonl, render_cost_table, write_jsonl, AnswerRecord, GradeLabel,
    GradeRecord, GradeTable, Prices,
};
use fastrag_core::retrieval::{RetrievalStrategy, Retriever};
use fastrag_core::run::{
    build_cost_report, make_backend, Pipeline, RunDir, StageRun, ANSWERS, GRADES,
};
use fastrag_core::{Config, Error, Result};

const REPL_ANSWERS: &str = "repl.jsonl";

#[derive(Debug, Parser)]
#[command(name = "fastrag", version, about = "Schema and script learning over semi-structured text, with graph and text retrieval")]
struct Cli {
    /// JSON config file (flat or nested, dotted keys allowed)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run directory holding every artifact
    #[arg(long, global = true, default_value = "fastrag-run")]
    run_dir: PathBuf,

    /// Re-run stages that are already complete
    #[arg(long, global = true)]
    force: bool,

    /// Override a config key, e.g. `--set sampling.random_seed=7`
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load and chunk the corpus
    Ingest,
    /// Pick sample chunks and print the selection as JSON
    Sample,
    /// Run Step 1 at sample sizes 1..=sweep.max_samples and write sweep.csv
    Sweep,
    /// Learn the schema and scripts, then extract entities
    Extract,
    /// Build the knowledge graph from the extracted entities
    BuildKg,
    /// Answer one question
    Query {
        #[arg(long, default_value = "hybrid")]
        strategy: RetrievalStrategy,
        question: String,
    },
    /// Interactive questions with a grading prompt after each answer
    Repl {
        #[arg(long, default_value = "hybrid")]
        strategy: RetrievalStrategy,
    },
    /// Answer a QA file with the given strategies
    Eval {
        #[arg(long)]
        qa: PathBuf,
        /// `all` or a comma-separated list
        #[arg(long, default_value = "all")]
        strategies: String,
    },
    /// Print the time and cost table of one or more run directories
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "FastRAG")]
        system: String,
        /// Also write the reports as a JSON array
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Record a grade for an answer: incorrect, correct, correct_plus (or -, +, ++)
    Grade { answer_id: String, label: GradeLabel },
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut config = match &cli.config {
        Some(p) => Config::from_file(p)?,
        None => Config::default(),
    };
    for raw in &cli.overrides {
        let (key, value) = raw
            .split_once('=')
            .ok_or_else(|| Error::Input(format!("--set expects KEY=VALUE, got {raw:?}")))?;
        config.apply(key.trim(), parse_override_value(value))?;
    }
    Ok(config)
}

fn open(cli: &Cli) -> Result<Pipeline> {
    let config = load_config(cli)?;
    let backend = make_backend(&config)?;
    Pipeline::open(RunDir::new(&cli.run_dir), config, backend, cli.force)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn note(stage: &str, ran: StageRun) {
    if ran == StageRun::Skipped {
        eprintln!("{stage}: already complete (use --force to re-run)");
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest => {
            let mut p = open(cli)?;
            let (corpus, ran) = p.ingest()?;
            note("ingest", ran);
            print_json(&json!({
                "documents": corpus.documents.len(),
                "lines": corpus.line_count(),
                "non_blank_lines": corpus.non_blank_line_count(),
            }));
        }
        Command::Sample => {
            let mut p = open(cli)?;
            let (outcome, ran) = p.sample()?;
            note("sample", ran);
            print_json(&json!({
                "selected_chunk_ids": outcome.selected_chunk_ids,
                "coverage": outcome.achieved_coverage,
                "per_step_gains": outcome.per_step_gains,
                "n_clusters": outcome.n_clusters,
                "n_terms_per_cluster": outcome.n_terms_per_cluster,
                "keywords": outcome.keywords.len(),
                "n_chunks": outcome.n_chunks,
            }));
        }
        Command::Sweep => {
            let mut p = open(cli)?;
            let rows = p.sweep()?;
            print!("{}", fastrag_core::extraction::sweep_to_csv(&rows));
        }
        Command::Extract => {
            let mut p = open(cli)?;
            let (report, ran) = p.extract()?;
            note("extract", ran);
            print_json(&serde_json::to_value(&report).expect("serializable"));
        }
        Command::BuildKg => {
            let mut p = open(cli)?;
            let (graph, ran) = p.build_kg()?;
            note("build-kg", ran);
            print!("{}", graph.export_schema());
        }
        Command::Query { strategy, question } => {
            let p = open(cli)?;
            let graph = p.load_graph()?;
            let retriever = Retriever::new(
                &graph,
                p.gateway(),
                p.config.retry_policy(),
                p.config.retrieval.table_budget_bytes,
                p.config.retrieval.text_limit,
            );
            let answer = retriever.answer(question, *strategy, "query");
            p.save_ledger()?;
            print_json(&answer?.summary_json());
        }
        Command::Repl { strategy } => {
            let p = open(cli)?;
            repl(&p, *strategy, io::stdin().lock(), &mut io::stdout())?;
        }
        Command::Eval { qa, strategies } => {
            let strategies = RetrievalStrategy::parse_list(strategies)?;
            let items = load_qa(qa)?;
            let mut p = open(cli)?;
            let (answers, ran) = p.eval(&items, &strategies)?;
            note("eval", ran);
            let grades = read_grades(&p.dir.path(GRADES))?;
            println!("{} answers in {}", answers.len(), p.dir.path(ANSWERS).display());
            print!("{}", GradeTable::build(&answers, &grades));
        }
        Command::Report { runs, system, out } => {
            let config = load_config(cli)?;
            let prices = Prices {
                input_per_char: config.cost.input_price_per_char,
                output_per_char: config.cost.output_price_per_char,
            };
            let reports = runs
                .iter()
                .map(|d| build_cost_report(d, &prices, system))
                .collect::<Result<Vec<_>>>()?;
            if let Some(path) = out {
                let text = serde_json::to_string_pretty(&reports).expect("serializable") + "\n";
                std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
            }
            print!("{}", render_cost_table(&reports));
        }
        Command::Grade { answer_id, label } => {
            let dir = RunDir::new(&cli.run_dir);
            let answers = if answer_id.starts_with('r') {
                dir.path(REPL_ANSWERS)
            } else {
                dir.path(ANSWERS)
            };
            let g = grade_answer(&answers, &dir.path(GRADES), answer_id, *label)?;
            println!("{} {}", g.answer_id, g.label);
        }
    }
    Ok(())
}

fn read_grades(path: &Path) -> Result<Vec<GradeRecord>> {
    if path.exists() {
        read_jsonl(path)
    } else {
        Ok(Vec::new())
    }
}

/// One question per line. After each answer a grade is read from the next
/// line; an empty line or `skip` leaves the answer ungraded.
fn repl(p: &Pipeline, strategy: RetrievalStrategy, input: impl BufRead, out: &mut impl Write) -> Result<()> {
    let graph = p.load_graph()?;
    let retriever = Retriever::new(
        &graph,
        p.gateway(),
        p.config.retry_policy(),
        p.config.retrieval.table_budget_bytes,
        p.config.retrieval.text_limit,
    );
    let answers_path = p.dir.path(REPL_ANSWERS);
    let mut records: Vec<AnswerRecord> = if answers_path.exists() {
        read_jsonl(&answers_path)?
    } else {
        Vec::new()
    };
    let io_err = |e| Error::io("stdout", e);
    let mut lines = input.lines();
    let mut n = 0usize;
    loop {
        write!(out, "question> ").map_err(io_err)?;
        out.flush().map_err(io_err)?;
        let Some(line) = lines.next() else { break };
        let question = line.map_err(|e| Error::io("stdin", e))?;
        let question = question.trim();
        if question.is_empty() {
            continue;
        }
        if matches!(question, "quit" | "exit") {
            break;
        }
        n += 1;
        let answer = retriever.answer(question, strategy, &format!("repl/{n}"))?;
        let usage = answer.usage();
        let id = format!("r{:03}-{strategy}", records.len() + 1);
        writeln!(out, "{}", answer.text).map_err(io_err)?;
        records.push(AnswerRecord {
            id: id.clone(),
            item: records.len() + 1,
            strategy,
            question: question.to_string(),
            reference_answer: String::new(),
            text: answer.text.clone(),
            queries: answer.generated_queries.clone(),
            result_rows: answer.raw_results.iter().map(|t| t.rows.len()).collect(),
            requests: usage.requests,
            input_chars: usage.input_chars,
            output_chars: usage.output_chars,
        });
        write_jsonl(&answers_path, &records)?;
        p.save_ledger()?;
        write!(out, "grade {id} [-/+/++, empty to skip]> ").map_err(io_err)?;
        out.flush().map_err(io_err)?;
        let Some(g) = lines.next() else { break };
        let g = g.map_err(|e| Error::io("stdin", e))?;
        let g = g.trim();
        if g.is_empty() || g == "skip" {
            continue;
        }
        match g.parse::<GradeLabel>() {
            Ok(label) => {
                grade_answer(&answers_path, &p.dir.path(GRADES), &id, label)?;
                writeln!(out, "graded {id} {label}").map_err(io_err)?;
            }
            Err(e) => writeln!(out, "{e}; left ungraded").map_err(io_err)?,
        }
    }
    writeln!(out).map_err(io_err)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
