//! Cypher-like mini query language over the embedded graph.
//!
//! ```text
//! query   := MATCH pattern (WHERE cond)? RETURN item ("," item)* (LIMIT int)?
//! pattern := node ("-[" REL "]->" node)*
//! node    := "(" var (":" Label)? ")"
//! cond    := term ((AND | OR) term)*          AND binds tighter than OR
//! term    := var "." prop op literal | TEXT "(" var "," string ")"
//! op      := "=" | "<>" | CONTAINS
//! item    := var | var "." prop | count "(" (var | "*") ")"
//! ```
//! Keywords are case-insensitive. Rows come out ordered by the bound node ids.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::text::{parse_text_query, TextQuery};
use super::{KnowledgeGraph, Relation, LINE_LABEL};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Str(String),
    Num(f64),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Colon,
    Comma,
    Dot,
    Dash,
    Gt,
    Eq,
    Neq,
    Star,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "'{s}'"),
            Tok::Str(s) => write!(f, "string \"{s}\""),
            Tok::Num(n) => write!(f, "number {n}"),
            Tok::LParen => f.write_str("'('"),
            Tok::RParen => f.write_str("')'"),
            Tok::LBracket => f.write_str("'['"),
            Tok::RBracket => f.write_str("']'"),
            Tok::Colon => f.write_str("':'"),
            Tok::Comma => f.write_str("','"),
            Tok::Dot => f.write_str("'.'"),
            Tok::Dash => f.write_str("'-'"),
            Tok::Gt => f.write_str("'>'"),
            Tok::Eq => f.write_str("'='"),
            Tok::Neq => f.write_str("'<>'"),
            Tok::Star => f.write_str("'*'"),
        }
    }
}

fn err(position: usize, message: impl Into<String>) -> Error {
    Error::QueryParse {
        position,
        message: message.into(),
    }
}

fn lex(src: &str) -> Result<Vec<(usize, Tok)>> {
    let chars: Vec<(usize, char)> = src.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        let single = match c {
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            '[' => Some(Tok::LBracket),
            ']' => Some(Tok::RBracket),
            ':' => Some(Tok::Colon),
            ',' => Some(Tok::Comma),
            '.' => Some(Tok::Dot),
            '-' => Some(Tok::Dash),
            '>' => Some(Tok::Gt),
            '=' => Some(Tok::Eq),
            '*' => Some(Tok::Star),
            _ => None,
        };
        if let Some(t) = single {
            out.push((pos, t));
            i += 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
        } else if c == '<' {
            if chars.get(i + 1).map(|x| x.1) != Some('>') {
                return Err(err(pos, "expected '<>'"));
            }
            out.push((pos, Tok::Neq));
            i += 2;
        } else if c == '"' || c == '\'' {
            let mut s = String::new();
            let mut j = i + 1;
            loop {
                let Some(&(_, d)) = chars.get(j) else {
                    return Err(err(pos, "unterminated string"));
                };
                if d == c {
                    break;
                }
                if d == '\\' {
                    if let Some(&(_, e)) = chars.get(j + 1) {
                        s.push(e);
                        j += 2;
                        continue;
                    }
                }
                s.push(d);
                j += 1;
            }
            out.push((pos, Tok::Str(s)));
            i = j + 1;
        } else if c.is_ascii_digit() {
            let mut j = i;
            while j < chars.len() && (chars[j].1.is_ascii_digit() || chars[j].1 == '.') {
                j += 1;
            }
            let end = chars.get(j).map_or(src.len(), |x| x.0);
            let n = src[pos..end]
                .parse()
                .map_err(|_| err(pos, format!("bad number '{}'", &src[pos..end])))?;
            out.push((pos, Tok::Num(n)));
            i = j;
        } else if c.is_alphabetic() || c == '_' {
            let mut j = i;
            while j < chars.len() && (chars[j].1.is_alphanumeric() || chars[j].1 == '_') {
                j += 1;
            }
            let end = chars.get(j).map_or(src.len(), |x| x.0);
            out.push((pos, Tok::Ident(src[pos..end].to_string())));
            i = j;
        } else if c == '`' {
            let close = (i + 1..chars.len())
                .find(|&j| chars[j].1 == '`')
                .ok_or_else(|| err(pos, "unterminated identifier"))?;
            let s: String = chars[i + 1..close].iter().map(|x| x.1).collect();
            out.push((pos, Tok::Ident(s)));
            i = close + 1;
        } else {
            return Err(err(pos, format!("unexpected character '{c}'")));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
struct NodePattern {
    var: String,
    label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Eq,
    Neq,
    Contains,
}

#[derive(Debug, Clone)]
enum Term {
    Compare {
        var: usize,
        prop: String,
        op: Op,
        literal: Value,
    },
    Text {
        var: usize,
        query: TextQuery,
    },
}

#[derive(Debug, Clone, PartialEq)]
enum Item {
    Node(usize),
    Prop(usize, String),
    Count(Option<usize>),
}

/// A parsed mini query.
#[derive(Debug, Clone)]
pub struct Query {
    vars: Vec<NodePattern>,
    /// `slots[k]` is the variable index bound at pattern position `k`.
    slots: Vec<usize>,
    rels: Vec<Relation>,
    cond: Vec<Vec<Term>>,
    items: Vec<Item>,
    columns: Vec<String>,
    limit: Option<usize>,
}

/// Named columns and rows of JSON values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl ResultTable {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Tab-separated rendering with a header line.
    pub fn to_text(&self) -> String {
        let mut s = self.columns.join("\t");
        s.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .map(|v| match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect();
            s.push_str(&cells.join("\t"));
            s.push('\n');
        }
        s
    }
}

struct Parser<'a> {
    src: &'a str,
    toks: Vec<(usize, Tok)>,
    at: usize,
}

impl Parser<'_> {
    fn pos(&self) -> usize {
        self.toks.get(self.at).map_or(self.src.len(), |t| t.0)
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.at).map(|t| &t.1)
    }

    fn found(&self) -> String {
        self.peek().map_or("end of query".into(), |t| t.to_string())
    }

    fn expect(&mut self, want: Tok) -> Result<()> {
        if self.peek() == Some(&want) {
            self.at += 1;
            Ok(())
        } else {
            Err(err(self.pos(), format!("expected {want}, found {}", self.found())))
        }
    }

    fn keyword(&mut self, kw: &str) -> bool {
        if let Some(Tok::Ident(s)) = self.peek() {
            if s.eq_ignore_ascii_case(kw) {
                self.at += 1;
                return true;
            }
        }
        false
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<()> {
        if self.keyword(kw) {
            Ok(())
        } else {
            Err(err(self.pos(), format!("expected {kw}, found {}", self.found())))
        }
    }

    fn ident(&mut self, what: &str) -> Result<(usize, String)> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                let p = self.pos();
                self.at += 1;
                Ok((p, s))
            }
            _ => Err(err(self.pos(), format!("expected {what}, found {}", self.found()))),
        }
    }
}

pub fn parse_query(src: &str) -> Result<Query> {
    let mut p = Parser {
        src,
        toks: lex(src)?,
        at: 0,
    };
    p.expect_keyword("MATCH")?;

    let mut vars: Vec<NodePattern> = Vec::new();
    let mut slots = Vec::new();
    let mut rels = Vec::new();
    loop {
        p.expect(Tok::LParen)?;
        let (vpos, var) = p.ident("variable")?;
        let label = if p.peek() == Some(&Tok::Colon) {
            p.at += 1;
            Some(p.ident("label")?.1)
        } else {
            None
        };
        p.expect(Tok::RParen)?;
        match vars.iter().position(|v| v.var == var) {
            Some(i) => {
                if label.is_some() && vars[i].label.is_some() && label != vars[i].label {
                    return Err(err(vpos, format!("variable '{var}' has two labels")));
                }
                if vars[i].label.is_none() {
                    vars[i].label = label;
                }
                slots.push(i);
            }
            None => {
                slots.push(vars.len());
                vars.push(NodePattern { var, label });
            }
        }
        if p.peek() != Some(&Tok::Dash) {
            break;
        }
        p.at += 1;
        p.expect(Tok::LBracket)?;
        if p.peek() == Some(&Tok::Colon) {
            p.at += 1;
        }
        let (rpos, rel) = p.ident("relation")?;
        let rel = Relation::parse(&rel.to_ascii_uppercase())
            .ok_or_else(|| err(rpos, format!("unknown relation '{rel}'")))?;
        rels.push(rel);
        p.expect(Tok::RBracket)?;
        p.expect(Tok::Dash)?;
        p.expect(Tok::Gt)?;
    }

    let lookup = |pos: usize, name: &str| {
        vars.iter()
            .position(|v| v.var == name)
            .ok_or_else(|| err(pos, format!("variable '{name}' is not bound in MATCH")))
    };

    let mut cond: Vec<Vec<Term>> = Vec::new();
    if p.keyword("WHERE") {
        cond.push(Vec::new());
        loop {
            let term = if p.keyword("TEXT") {
                p.expect(Tok::LParen)?;
                let (vpos, v) = p.ident("variable")?;
                let var = lookup(vpos, &v)?;
                p.expect(Tok::Comma)?;
                let spos = p.pos();
                let Some(Tok::Str(s)) = p.peek().cloned() else {
                    return Err(err(spos, format!("expected string, found {}", p.found())));
                };
                p.at += 1;
                let query = parse_text_query(&s).map_err(|e| match e {
                    Error::QueryParse { position, message } => {
                        err(spos + 1 + position, format!("in TEXT search: {message}"))
                    }
                    other => other,
                })?;
                p.expect(Tok::RParen)?;
                Term::Text { var, query }
            } else {
                let (vpos, v) = p.ident("variable")?;
                let var = lookup(vpos, &v)?;
                p.expect(Tok::Dot)?;
                let (_, prop) = p.ident("property")?;
                let op = match p.peek() {
                    Some(Tok::Eq) => Op::Eq,
                    Some(Tok::Neq) => Op::Neq,
                    Some(Tok::Ident(s)) if s.eq_ignore_ascii_case("CONTAINS") => Op::Contains,
                    _ => {
                        return Err(err(
                            p.pos(),
                            format!("expected '=', '<>' or CONTAINS, found {}", p.found()),
                        ))
                    }
                };
                p.at += 1;
                let literal = literal(&mut p)?;
                Term::Compare {
                    var,
                    prop,
                    op,
                    literal,
                }
            };
            cond.last_mut().unwrap().push(term);
            if p.keyword("AND") {
                continue;
            }
            if p.keyword("OR") {
                cond.push(Vec::new());
                continue;
            }
            break;
        }
    }

    p.expect_keyword("RETURN")?;
    let mut items = Vec::new();
    let mut columns = Vec::new();
    loop {
        let (ipos, name) = p.ident("return item")?;
        if name.eq_ignore_ascii_case("count") && p.peek() == Some(&Tok::LParen) {
            p.at += 1;
            let target = if p.peek() == Some(&Tok::Star) {
                p.at += 1;
                None
            } else {
                let (vpos, v) = p.ident("variable")?;
                Some(lookup(vpos, &v)?)
            };
            p.expect(Tok::RParen)?;
            columns.push(match target {
                Some(v) => format!("count({})", vars[v].var),
                None => "count(*)".into(),
            });
            items.push(Item::Count(target));
        } else {
            let var = lookup(ipos, &name)?;
            if p.peek() == Some(&Tok::Dot) {
                p.at += 1;
                let (_, prop) = p.ident("property")?;
                columns.push(format!("{name}.{prop}"));
                items.push(Item::Prop(var, prop));
            } else {
                columns.push(name);
                items.push(Item::Node(var));
            }
        }
        if p.peek() == Some(&Tok::Comma) {
            p.at += 1;
        } else {
            break;
        }
    }

    let limit = if p.keyword("LIMIT") {
        match p.peek() {
            Some(Tok::Num(n)) if n.fract() == 0.0 && *n >= 0.0 => {
                let n = *n as usize;
                p.at += 1;
                Some(n)
            }
            _ => return Err(err(p.pos(), format!("expected integer, found {}", p.found()))),
        }
    } else {
        None
    };
    if p.peek().is_some() {
        return Err(err(p.pos(), format!("unexpected {} after query", p.found())));
    }
    Ok(Query {
        vars,
        slots,
        rels,
        cond,
        items,
        columns,
        limit,
    })
}

fn literal(p: &mut Parser) -> Result<Value> {
    let pos = p.pos();
    let v = match p.peek().cloned() {
        Some(Tok::Str(s)) => Value::String(s),
        Some(Tok::Num(n)) => number(n),
        Some(Tok::Dash) => {
            p.at += 1;
            match p.peek().cloned() {
                Some(Tok::Num(n)) => number(-n),
                _ => return Err(err(pos, "expected number after '-'")),
            }
        }
        Some(Tok::Ident(s)) if s.eq_ignore_ascii_case("true") => Value::Bool(true),
        Some(Tok::Ident(s)) if s.eq_ignore_ascii_case("false") => Value::Bool(false),
        Some(Tok::Ident(s)) if s.eq_ignore_ascii_case("null") => Value::Null,
        _ => return Err(err(pos, format!("expected literal, found {}", p.found()))),
    };
    p.at += 1;
    Ok(v)
}

fn number(n: f64) -> Value {
    if n.fract() == 0.0 && n.abs() < 9e15 {
        json!(n as i64)
    } else {
        json!(n)
    }
}

fn as_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn values_equal(prop: &Value, lit: &Value) -> bool {
    match (prop, lit) {
        (Value::Array(items), _) => items.iter().any(|i| values_equal(i, lit)),
        (Value::Number(a), Value::Number(b)) => a.as_f64() == b.as_f64(),
        (Value::String(a), Value::Number(b)) => a.trim().parse::<f64>().ok() == b.as_f64(),
        (Value::Bool(a), Value::Bool(b)) => a == b,
        _ => as_text(prop) == as_text(lit),
    }
}

fn compare(prop: Option<&Value>, op: Op, lit: &Value) -> bool {
    let prop = match prop {
        None | Some(Value::Null) => return false,
        Some(v) => v,
    };
    if lit.is_null() {
        return false;
    }
    match op {
        Op::Eq => values_equal(prop, lit),
        Op::Neq => !values_equal(prop, lit),
        Op::Contains => match prop {
            Value::Array(items) => items.iter().any(|i| values_equal(i, lit)),
            other => as_text(other).contains(&as_text(lit)),
        },
    }
}

fn node_value(g: &KnowledgeGraph, id: usize) -> Value {
    let n = g.node(id);
    json!({"id": n.id, "label": n.label, "properties": n.properties})
}

impl Query {
    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    fn candidates<'g>(&self, g: &'g KnowledgeGraph, var: usize) -> Box<dyn Iterator<Item = usize> + 'g> {
        match &self.vars[var].label {
            Some(l) => Box::new(g.nodes_with_label(l).iter().copied()),
            None => Box::new(0..g.nodes().len()),
        }
    }

    fn label_ok(&self, g: &KnowledgeGraph, var: usize, id: usize) -> bool {
        self.vars[var]
            .label
            .as_ref()
            .is_none_or(|l| &g.node(id).label == l)
    }

    /// Warns and returns false when a label or property is absent from the graph.
    fn references_exist(&self, g: &KnowledgeGraph) -> bool {
        for v in &self.vars {
            if let Some(l) = &v.label {
                if !g.has_label(l) {
                    warn!("query references unknown label '{l}'");
                    return false;
                }
            }
        }
        let mut props: Vec<(usize, &str)> = Vec::new();
        for t in self.cond.iter().flatten() {
            if let Term::Compare { var, prop, .. } = t {
                props.push((*var, prop));
            }
        }
        for i in &self.items {
            if let Item::Prop(var, prop) = i {
                props.push((*var, prop));
            }
        }
        for (var, prop) in props {
            let exists = self
                .candidates(g, var)
                .any(|id| g.node(id).properties.contains_key(prop));
            if !exists {
                let label = self.vars[var].label.as_deref().unwrap_or("any label");
                warn!("query references unknown property '{prop}' on {label}");
                return false;
            }
        }
        true
    }

    fn bindings(&self, g: &KnowledgeGraph) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut bound: Vec<Option<usize>> = vec![None; self.vars.len()];
        let first = self.slots[0];
        for id in self.candidates(g, first) {
            bound[first] = Some(id);
            self.extend(g, 1, id, &mut bound, &mut out);
            bound[first] = None;
        }
        out
    }

    fn extend(
        &self,
        g: &KnowledgeGraph,
        k: usize,
        prev: usize,
        bound: &mut Vec<Option<usize>>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if k == self.slots.len() {
            out.push(bound.iter().map(|b| b.unwrap()).collect());
            return;
        }
        let var = self.slots[k];
        let rel = self.rels[k - 1];
        let mut next: Vec<usize> = g
            .outgoing(prev)
            .iter()
            .filter(|(r, _)| *r == rel)
            .map(|(_, to)| *to)
            .filter(|&to| self.label_ok(g, var, to))
            .collect();
        next.sort_unstable();
        for to in next {
            match bound[var] {
                Some(b) if b != to => continue,
                Some(_) => self.extend(g, k + 1, to, bound, out),
                None => {
                    bound[var] = Some(to);
                    self.extend(g, k + 1, to, bound, out);
                    bound[var] = None;
                }
            }
        }
    }

    fn holds(&self, g: &KnowledgeGraph, row: &[usize], text_hits: &[BTreeSet<usize>]) -> bool {
        if self.cond.is_empty() {
            return true;
        }
        let mut text_i = 0;
        let mut any = false;
        for conj in &self.cond {
            let mut all = true;
            for t in conj {
                let ok = match t {
                    Term::Compare {
                        var,
                        prop,
                        op,
                        literal,
                    } => compare(g.node(row[*var]).properties.get(prop), *op, literal),
                    Term::Text { var, .. } => {
                        let hits = &text_hits[text_i];
                        text_i += 1;
                        let id = row[*var];
                        if g.node(id).label == LINE_LABEL {
                            hits.contains(&id)
                        } else {
                            g.outgoing(id)
                                .iter()
                                .any(|(r, to)| *r == Relation::HasLine && hits.contains(to))
                        }
                    }
                };
                all &= ok;
            }
            any |= all;
        }
        any
    }

    fn project(&self, g: &KnowledgeGraph, row: &[usize], item: &Item) -> Value {
        match item {
            Item::Node(v) => node_value(g, row[*v]),
            Item::Prop(v, p) => g.node(row[*v]).properties.get(p).cloned().unwrap_or(Value::Null),
            Item::Count(_) => Value::Null,
        }
    }

    pub fn execute(&self, g: &KnowledgeGraph) -> ResultTable {
        let mut table = ResultTable {
            columns: self.columns.clone(),
            rows: Vec::new(),
        };
        if !self.references_exist(g) {
            return table;
        }
        let text_hits: Vec<BTreeSet<usize>> = self
            .cond
            .iter()
            .flatten()
            .filter_map(|t| match t {
                Term::Text { query, .. } => Some(g.text_index().matching_nodes(query)),
                _ => None,
            })
            .collect();
        let rows: Vec<Vec<usize>> = self
            .bindings(g)
            .into_iter()
            .filter(|r| self.holds(g, r, &text_hits))
            .collect();

        let grouped = self.items.iter().any(|i| matches!(i, Item::Count(_)));
        if grouped {
            let mut order: Vec<Vec<Value>> = Vec::new();
            let mut counts: HashMap<String, usize> = HashMap::new();
            for r in &rows {
                let key: Vec<Value> = self.items.iter().map(|i| self.project(g, r, i)).collect();
                let k = serde_json::to_string(&key).unwrap();
                let c = counts.entry(k).or_insert(0);
                if *c == 0 {
                    order.push(key);
                }
                *c += 1;
            }
            if order.is_empty() && self.items.iter().all(|i| matches!(i, Item::Count(_))) {
                order.push(vec![Value::Null; self.items.len()]);
            }
            for mut key in order {
                let n = counts
                    .get(&serde_json::to_string(&key).unwrap())
                    .copied()
                    .unwrap_or(0);
                for (cell, item) in key.iter_mut().zip(&self.items) {
                    if matches!(item, Item::Count(_)) {
                        *cell = json!(n);
                    }
                }
                table.rows.push(key);
            }
        } else {
            table.rows = rows
                .iter()
                .map(|r| self.items.iter().map(|i| self.project(g, r, i)).collect())
                .collect();
        }
        if let Some(l) = self.limit {
            table.rows.truncate(l);
        }
        table
    }
}
