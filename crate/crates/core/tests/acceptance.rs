//! Acceptance checks. Prints one `PASS`/`FAIL` line per criterion with its
//! tolerance and exits nonzero if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use fastrag_core::eval::{read_jsonl, AnswerRecord, CostReport, Prices};
use fastrag_core::extraction::EntityRecord;
use fastrag_core::kg::{KnowledgeGraph, Relation};
use fastrag_core::llm::{Stage, UsageRecord};
use fastrag_core::run::{build_cost_report, ANSWERS, ENTITIES, GRAPH, LEDGER, REPORT, SCHEMA, STEP1, STEP2};
use fastrag_core::sampling::{chunk_entropy, compute_tfidf, select_from_tokens};
use fastrag_core::Error;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn greedy_matches_exhaustive_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let started = Instant::now();
    for case in 0..200 {
        let n_chunks = rng.gen_range(1..=10);
        let n_kw = rng.gen_range(1..=12);
        let vocab: Vec<String> = (0..n_kw).map(|i| format!("k{i}")).collect();
        let chunks: Vec<Vec<String>> = (0..n_chunks)
            .map(|_| {
                let len = rng.gen_range(0..=8);
                (0..len).map(|_| vocab.choose(&mut rng).unwrap().clone()).collect()
            })
            .collect();
        let ids: Vec<usize> = (0..n_chunks).collect();
        let sel = select_from_tokens::<f64>(&ids, &chunks, 1.0);

        let sets: Vec<BTreeSet<&str>> = chunks
            .iter()
            .map(|c| c.iter().map(String::as_str).collect())
            .collect();
        let universe: BTreeSet<&str> = sets.iter().flatten().copied().collect();
        let mut best = 0usize;
        for mask in 0u32..(1 << n_chunks) {
            let covered: BTreeSet<&str> = (0..n_chunks)
                .filter(|i| mask & (1 << i) != 0)
                .flat_map(|i| sets[i].iter().copied())
                .collect();
            best = best.max(covered.len());
        }
        let oracle = if universe.is_empty() {
            1.0
        } else {
            best as f64 / universe.len() as f64
        };
        ensure(sel.achieved_coverage == oracle, || {
            format!("case {case}: greedy {} vs oracle {oracle}", sel.achieved_coverage)
        })?;
        let distinct: BTreeSet<_> = sel.selected_chunk_ids.iter().collect();
        ensure(distinct.len() == sel.selected_chunk_ids.len(), || {
            format!("case {case}: duplicate selection")
        })?;
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 5.0, || format!("took {secs:.2}s"))?;
    Ok(format!("200 instances, {secs:.3}s"))
}

fn entropy_and_tfidf_numerics() -> Result<String, String> {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    for k in 1..=8usize {
        let toks: Vec<String> = (0..k).map(|i| format!("t{i}")).collect();
        let h: f64 = chunk_entropy(&toks);
        ensure(close(h, (k as f64).log2()), || format!("uniform k={k}: {h}"))?;
    }
    let h: f64 = chunk_entropy(&["a", "a", "a"]);
    ensure(close(h, 0.0), || format!("single term: {h}"))?;
    let h: f64 = chunk_entropy::<f64, &str>(&[]);
    ensure(close(h, 0.0), || format!("empty: {h}"))?;
    let h: f64 = chunk_entropy(&["a", "a", "b"]);
    let want = -(2.0 / 3.0 * (2.0f64 / 3.0).log2() + 1.0 / 3.0 * (1.0f64 / 3.0).log2());
    ensure(close(h, want), || format!("[a,a,b]: {h} vs {want}"))?;

    let every: Vec<Vec<&str>> = vec![vec!["x"]; 4];
    let m = compute_tfidf::<f64, _>(&every);
    ensure(m.rows.iter().all(|r| close(r[0], 1.0)), || format!("df=N: {:?}", m.rows))?;

    let docs = vec![vec!["a", "a", "b"], vec!["b", "c"], vec!["c", "c", "c"]];
    let m = compute_tfidf::<f64, _>(&docs);
    let n = docs.len() as f64;
    for (i, doc) in docs.iter().enumerate() {
        for (j, term) in m.terms.iter().enumerate() {
            let tf = doc.iter().filter(|t| **t == term.as_str()).count() as f64;
            let df = docs.iter().filter(|d| d.contains(&term.as_str())).count() as f64;
            let want = tf * (((1.0 + n) / (1.0 + df)).ln() + 1.0);
            ensure(close(m.rows[i][j], want), || {
                format!("tfidf[{i}][{term}] = {} vs {want}", m.rows[i][j])
            })?;
        }
    }
    Ok("uniform, single-term, mixed and smoothed-idf cases".into())
}

fn determinism() -> Result<String, String> {
    let a = common::scratch();
    let b = common::scratch();
    common::full_run("configs", a.path());
    common::full_run("configs", b.path());
    let la = common::cached("logs");
    let lb = common::scratch();
    common::full_run("logs", lb.path());
    let files = [SCHEMA, ENTITIES, GRAPH, REPORT];
    for (x, y, name) in [(a.path(), b.path(), "configs"), (la.dir.path(), lb.path(), "logs")] {
        for f in files {
            let bx = fs::read(x.join(f)).map_err(|e| format!("{name}/{f}: {e}"))?;
            let by = fs::read(y.join(f)).map_err(|e| format!("{name}/{f}: {e}"))?;
            ensure(bx == by, || format!("{name}/{f} differs between runs"))?;
        }
    }
    Ok("schema.json, entities.jsonl, graph.json, report.json identical".into())
}

fn read_report(dir: &std::path::Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join(REPORT)).expect("report")).expect("json")
}

fn extraction_shape() -> Result<String, String> {
    let mut summary = Vec::new();
    for (dataset, types) in [("logs", 7u64), ("configs", 9u64)] {
        let run = common::cached(dataset);
        let report = read_report(run.dir.path());
        let oracle = common::oracle(&format!("{dataset}.json"));
        let got_types = report["extracted_types"].as_u64().unwrap();
        ensure(got_types == types, || format!("{dataset}: {got_types} types, want {types}"))?;
        ensure(report["identified_types"].as_u64() == Some(types), || {
            format!("{dataset}: identified {}", report["identified_types"])
        })?;
        let cov = report["coverage"].as_f64().unwrap();
        let want = oracle["coverage"].as_f64().unwrap();
        ensure((cov - want).abs() <= 0.02, || format!("{dataset}: coverage {cov} vs oracle {want}"))?;
        ensure(report["entity_counts"] == oracle["entity_counts"], || {
            format!("{dataset}: counts {} vs {}", report["entity_counts"], oracle["entity_counts"])
        })?;
        summary.push(format!("{dataset} {got_types} types cov {cov:.3}"));
    }
    let logs_cov = read_report(common::cached("logs").dir.path())["coverage"].as_f64().unwrap();
    let cfg_cov = read_report(common::cached("configs").dir.path())["coverage"].as_f64().unwrap();
    ensure(logs_cov >= 0.98, || format!("logs coverage {logs_cov} < 0.98"))?;
    ensure(cfg_cov == 1.0, || format!("configs coverage {cfg_cov} != 1.00"))?;
    Ok(summary.join(", "))
}

fn retry_bound() -> Result<String, String> {
    let dir = common::scratch();
    let mut config = common::config("logs");
    config.llm.fixtures_dir = Some(common::fixtures().join("prompts/exhaust"));
    let mut p = common::open(dir.path(), config, false);
    match p.extract() {
        Err(Error::StageExhausted { attempts, .. }) => {
            ensure(attempts == 4, || format!("attempts = {attempts}"))?;
        }
        Err(e) => return Err(format!("wrong error: {e}")),
        Ok(_) => return Err("extract succeeded".into()),
    }
    let records: Vec<UsageRecord> = read_jsonl(&dir.path().join(LEDGER)).map_err(|e| e.to_string())?;
    ensure(records.len() == 4, || format!("{} ledger records", records.len()))?;
    ensure(records.iter().all(|r| !r.success), || "a record succeeded".into())?;
    Ok("4 attempts, 4 ledger records, StageExhausted".into())
}

fn random_scalar(rng: &mut ChaCha8Rng) -> Value {
    match rng.gen_range(0..4) {
        0 => json!(rng.gen_range(-50..50)),
        1 => json!(rng.gen_bool(0.5)),
        2 => json!(format!("v{}", rng.gen_range(0..20))),
        _ => Value::Null,
    }
}

fn random_object(rng: &mut ChaCha8Rng, depth: usize) -> Map<String, Value> {
    let mut m = Map::new();
    for i in 0..rng.gen_range(0..5) {
        let key = format!("p{i}_{}", rng.gen_range(0..3));
        let v = match rng.gen_range(0..if depth < 2 { 5 } else { 2 }) {
            0 | 1 => random_scalar(rng),
            2 => Value::Object(random_object(rng, depth + 1)),
            3 => Value::Array(
                (0..rng.gen_range(0..4))
                    .map(|_| Value::Object(random_object(rng, depth + 1)))
                    .collect(),
            ),
            _ => Value::Array(
                (0..rng.gen_range(0..4))
                    .map(|_| {
                        if rng.gen_bool(0.5) {
                            random_scalar(rng)
                        } else {
                            Value::Object(random_object(rng, depth + 1))
                        }
                    })
                    .collect(),
            ),
        };
        m.insert(key, v);
    }
    m
}

/// Nodes contributed by the nested objects below `m` (not counting `m`).
fn child_nodes(m: &Map<String, Value>) -> usize {
    m.values()
        .map(|v| match v {
            Value::Object(o) => 1 + child_nodes(o),
            Value::Array(items) => items
                .iter()
                .filter_map(Value::as_object)
                .map(|o| 1 + child_nodes(o))
                .sum(),
            _ => 0,
        })
        .sum()
}

fn dedup(lines: &[String]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    lines.iter().filter(|l| seen.insert(l.as_str())).cloned().collect()
}

fn kg_invariants() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..100 {
        let entities: Vec<EntityRecord> = (0..rng.gen_range(0..12))
            .map(|_| EntityRecord {
                entity_type: format!("Type{}", rng.gen_range(0..4)),
                properties: random_object(&mut rng, 0),
                input_data: (0..rng.gen_range(0..6))
                    .map(|_| format!("line {}", rng.gen_range(0..8)))
                    .collect(),
            })
            .collect();
        let g = KnowledgeGraph::build(&entities);
        let want_nodes: usize = entities
            .iter()
            .map(|e| 1 + child_nodes(&e.properties) + dedup(&e.input_data).len())
            .sum();
        let want_edges = want_nodes - entities.len();
        ensure(g.nodes().len() == want_nodes, || {
            format!("case {case}: {} nodes, want {want_nodes}", g.nodes().len())
        })?;
        ensure(g.edges().len() == want_edges, || {
            format!("case {case}: {} edges, want {want_edges}", g.edges().len())
        })?;
        let has_parent: BTreeSet<usize> = g.edges().iter().map(|e| e.to).collect();
        let roots: Vec<usize> = (0..g.nodes().len()).filter(|i| !has_parent.contains(i)).collect();
        ensure(roots.len() == entities.len(), || format!("case {case}: {} roots", roots.len()))?;
        for (root, e) in roots.iter().zip(&entities) {
            ensure(g.node(*root).label == e.entity_type, || format!("case {case}: root label"))?;
            let lines: Vec<String> = g
                .outgoing(*root)
                .iter()
                .filter(|(r, _)| *r == Relation::HasLine)
                .map(|(_, to)| g.node(*to).properties["text"].as_str().unwrap().to_string())
                .collect();
            ensure(lines == dedup(&e.input_data), || {
                format!("case {case}: HAS_LINE {lines:?} vs {:?}", e.input_data)
            })?;
        }
    }
    Ok("100 random entity sets".into())
}

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn text_search_completeness() -> Result<String, String> {
    let g = &common::cached("logs").graph;
    let lines: Vec<(usize, Vec<String>)> = g
        .nodes()
        .iter()
        .filter(|n| n.label == "Line")
        .map(|n| (n.id, tokens(n.properties["text"].as_str().unwrap_or_default())))
        .collect();
    let vocab: BTreeSet<&String> = lines.iter().flat_map(|(_, t)| t).collect();
    let vocab: Vec<&String> = vocab.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut hits = 0;
    for i in 0..100 {
        let term = if i % 10 == 9 {
            format!("absentterm{i}")
        } else {
            vocab.choose(&mut rng).unwrap().to_string()
        };
        let got: BTreeSet<usize> = g
            .text_search(&format!("\"{term}\""), usize::MAX)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|h| h.line)
            .collect();
        let want: BTreeSet<usize> = lines
            .iter()
            .filter(|(_, t)| t.contains(&term))
            .map(|(id, _)| *id)
            .collect();
        ensure(got == want, || format!("{term:?}: {} hits vs {} expected", got.len(), want.len()))?;
        hits += want.len();
    }
    Ok(format!("100 queries, {hits} line hits"))
}

fn canonical(rows: &[Vec<Value>]) -> Vec<String> {
    let mut v: Vec<String> = rows.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    v.sort();
    v
}

fn golden_queries() -> Result<String, String> {
    let golden = common::oracle("golden_queries.json");
    let golden = golden.as_array().unwrap();
    ensure(golden.len() == 20, || format!("{} golden queries", golden.len()))?;
    for g in golden {
        let graph = &common::cached(g["graph"].as_str().unwrap()).graph;
        let query = g["query"].as_str().unwrap();
        let want: Vec<Vec<Value>> = serde_json::from_value(g["rows"].clone()).unwrap();
        let got = graph.run_query(query).map_err(|e| format!("{query}: {e}"))?.rows;
        let same = if g["ordered"].as_bool().unwrap_or(false) {
            got == want
        } else {
            canonical(&got) == canonical(&want)
        };
        ensure(same, || format!("{query}: got {got:?}, want {want:?}"))?;
    }
    Ok("20 golden row sets".into())
}

fn qa_matrix() -> Result<String, String> {
    let first = common::cached("logs");
    let dir = common::scratch();
    let (_, second) = common::full_run("logs", dir.path());
    let cells: BTreeSet<(usize, String)> = first
        .answers
        .iter()
        .map(|a| (a.item, a.strategy.to_string()))
        .collect();
    ensure(first.answers.len() == 64 && cells.len() == 64, || {
        format!("{} answers, {} distinct cells", first.answers.len(), cells.len())
    })?;
    let items: BTreeSet<usize> = cells.iter().map(|c| c.0).collect();
    ensure(items.len() == 16, || format!("{} questions", items.len()))?;
    ensure(first.answers == second, || "answers differ between runs".into())?;
    let a = fs::read(first.dir.path().join(ANSWERS)).map_err(|e| e.to_string())?;
    let b = fs::read(dir.path().join(ANSWERS)).map_err(|e| e.to_string())?;
    ensure(a == b, || "answers.jsonl differs between runs".into())?;
    let unanswerable = second.iter().filter(|a: &&AnswerRecord| a.text.is_empty()).count();
    ensure(unanswerable == 0, || format!("{unanswerable} empty answers"))?;
    Ok("16 x 4 = 64 cells, identical across runs".into())
}

fn cents(x: f64) -> i64 {
    (x * 100.0).round() as i64
}

fn accounting() -> Result<String, String> {
    let prices = Prices {
        input_per_char: 2.5e-6,
        output_per_char: 1.25e-5,
    };
    for dataset in ["logs", "configs"] {
        let dir = common::cached(dataset).dir.path();
        let report = build_cost_report(dir, &prices, "FastRAG").map_err(|e| e.to_string())?;
        let text = fs::read_to_string(dir.join(LEDGER)).map_err(|e| e.to_string())?;
        let (mut n, mut inc, mut outc) = (0usize, 0u64, 0u64);
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
            n += 1;
            inc += v["input_chars"].as_u64().unwrap();
            outc += v["output_chars"].as_u64().unwrap();
        }
        let want = inc as f64 * 2.5e-6 + outc as f64 * 1.25e-5;
        ensure(report.request_count == n, || format!("{dataset}: {} vs {n} requests", report.request_count))?;
        ensure(cents(report.total_cost_usd) == cents(want), || {
            format!("{dataset}: ${:.4} vs ${want:.4}", report.total_cost_usd)
        })?;
    }

    let one = UsageRecord {
        stage: Stage::Synthesize,
        scope: None,
        attempt: 1,
        input_chars: 1000,
        output_chars: 500,
        latency_ms: 0,
        success: true,
    };
    let example = CostReport::from_ledger(
        "d",
        "s",
        &[one],
        &Prices {
            input_per_char: 1e-6,
            output_per_char: 3e-6,
        },
        0,
        None,
    );
    ensure((example.total_cost_usd - 0.0025).abs() < 1e-12, || {
        format!("1000/500 chars: ${}", example.total_cost_usd)
    })?;

    let empty = common::scratch();
    fs::write(empty.path().join(LEDGER), "").map_err(|e| e.to_string())?;
    let zero = build_cost_report(empty.path(), &prices, "FastRAG").map_err(|e| e.to_string())?;
    ensure(zero.request_count == 0 && cents(zero.total_cost_usd) == 0, || {
        format!("empty run: {} requests, ${}", zero.request_count, zero.total_cost_usd)
    })?;
    Ok("ledger sums to the cent, $0.0025 example, $0.00 empty run".into())
}

fn read_json(path: &std::path::Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).expect("artifact")).expect("json")
}

fn request_count_bound() -> Result<String, String> {
    let mut summary = Vec::new();
    for dataset in ["logs", "configs"] {
        let dir = common::cached(dataset).dir.path();
        let config = common::config(dataset);
        let report = read_report(dir);
        let oracle = common::oracle(&format!("{dataset}.json"));
        let step1 = read_json(&dir.join(STEP1));
        let step2 = read_json(&dir.join(STEP2));

        let sections = step2["sections"].as_array().unwrap();
        let step2_requests = report["step2"]["requests"].as_u64().unwrap() as usize;
        let samples = config.step2.target_samples.or(config.sampling.target_samples).unwrap_or(1);
        let bound = sections.len() * samples * 4;
        ensure(step2_requests <= bound, || {
            format!("{dataset}: step 2 used {step2_requests} > {bound}")
        })?;

        let step1_samples = step1["sampling"]["selected_chunk_ids"].as_array().unwrap().len();
        let step2_samples: usize = sections
            .iter()
            .filter_map(|s| s["sampling"]["selected_chunk_ids"].as_array())
            .map(Vec::len)
            .sum();
        let repairs = &oracle["repairs"];
        let want = 2 * step1_samples
            + repairs["step1"].as_u64().unwrap() as usize
            + step2_samples
            + repairs["step2"].as_u64().unwrap() as usize;
        let total = report["total_requests"].as_u64().unwrap() as usize;
        ensure(total == want, || format!("{dataset}: {total} requests, trace says {want}"))?;
        summary.push(format!("{dataset} {total} (step 2 {step2_requests} <= {bound})"));
    }
    Ok(summary.join(", "))
}

fn main() -> ExitCode {
    let checks: [(&str, &str, Check); 11] = [
        ("greedy selection equals exhaustive oracle", "exact, < 5 s", greedy_matches_exhaustive_oracle),
        ("entropy and tf-idf numerics", "1e-9", entropy_and_tfidf_numerics),
        ("byte-identical artifacts across runs", "exact", determinism),
        ("entity types and coverage per corpus", "types exact, coverage +-0.02", extraction_shape),
        ("retry bound of 4 attempts", "exact", retry_bound),
        ("graph construction invariants", "exact", kg_invariants),
        ("text search completeness", "exact, unordered", text_search_completeness),
        ("golden graph queries", "exact row sets", golden_queries),
        ("question-answer matrix", "64 cells, reproducible", qa_matrix),
        ("cost accounting", "to the cent", accounting),
        ("request count bound and trace count", "exact", request_count_bound),
    ];
    panic::set_hook(Box::new(|_| {}));
    let (mut passed, mut failed) = (0, 0);
    for (name, tol, check) in checks {
        let outcome = match panic::catch_unwind(AssertUnwindSafe(check)) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        match outcome {
            Ok(detail) => {
                passed += 1;
                println!("PASS {name} ({tol}): {detail}");
            }
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({tol}): {why}");
            }
        }
    }
    println!("{passed} passed, {failed} failed");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
