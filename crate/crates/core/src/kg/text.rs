//! BM25 full-text index over `Line` nodes.
//!
//! Query syntax: space-separated terms must all match; `OR` (upper case)
//! separates alternatives and binds looser than the implicit AND. `"a b"` is a
//! phrase, a trailing `*` makes the last token a prefix and a trailing `~`
//! allows one edit on it. A bare term that tokenizes into several tokens
//! (`10.0.0.1`) is searched as a phrase.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::tokenize;

const K1: f64 = 1.2;
const B: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MatchKind {
    Exact,
    Prefix,
    Fuzzy,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct TokenMatch {
    kind: MatchKind,
    token: String,
}

impl TokenMatch {
    fn matches(&self, candidate: &str) -> bool {
        match self.kind {
            MatchKind::Exact => candidate == self.token,
            MatchKind::Prefix => candidate.starts_with(&self.token),
            MatchKind::Fuzzy => within_one_edit(&self.token, candidate),
        }
    }
}

/// A parsed text query: a disjunction of conjunctions of phrases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextQuery {
    clauses: Vec<Vec<Vec<TokenMatch>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextHit {
    pub line: usize,
    pub parent: Option<usize>,
    pub score: f64,
}

fn parse_error(position: usize, message: impl Into<String>) -> Error {
    Error::QueryParse {
        position,
        message: message.into(),
    }
}

enum Item {
    Or(usize),
    Atom(Vec<TokenMatch>),
}

fn atom(text: &str, pos: usize, kind: MatchKind) -> Result<Vec<TokenMatch>> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(parse_error(pos, format!("'{text}' has no searchable characters")));
    }
    let last = tokens.len() - 1;
    Ok(tokens
        .into_iter()
        .enumerate()
        .map(|(i, token)| TokenMatch {
            kind: if i == last { kind } else { MatchKind::Exact },
            token,
        })
        .collect())
}

pub fn parse_text_query(query: &str) -> Result<TextQuery> {
    let chars: Vec<(usize, char)> = query.char_indices().collect();
    let mut items = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '"' {
            let close = (i + 1..chars.len()).find(|&j| chars[j].1 == '"');
            let Some(close) = close else {
                return Err(parse_error(pos, "unterminated phrase"));
            };
            if close + 1 < chars.len() && !chars[close + 1].1.is_whitespace() {
                return Err(parse_error(chars[close + 1].0, "expected whitespace after phrase"));
            }
            let start = pos + 1;
            let end = chars[close].0;
            items.push(Item::Atom(atom(&query[start..end], pos, MatchKind::Exact)?));
            i = close + 1;
            continue;
        }
        let mut j = i;
        while j < chars.len() && !chars[j].1.is_whitespace() {
            if chars[j].1 == '"' {
                return Err(parse_error(chars[j].0, "quote inside a term"));
            }
            j += 1;
        }
        let end = if j < chars.len() { chars[j].0 } else { query.len() };
        let word = &query[pos..end];
        i = j;
        match word {
            "OR" => items.push(Item::Or(pos)),
            "AND" => {}
            _ => {
                let (body, kind) = if let Some(b) = word.strip_suffix('*') {
                    (b, MatchKind::Prefix)
                } else if let Some(b) = word.strip_suffix('~') {
                    (b, MatchKind::Fuzzy)
                } else {
                    (word, MatchKind::Exact)
                };
                items.push(Item::Atom(atom(body, pos, kind)?));
            }
        }
    }
    if items.is_empty() {
        return Err(parse_error(0, "empty query"));
    }
    let mut clauses = vec![Vec::new()];
    for item in items {
        match item {
            Item::Or(pos) => {
                if clauses.last().unwrap().is_empty() {
                    return Err(parse_error(pos, "OR needs a term on both sides"));
                }
                clauses.push(Vec::new());
            }
            Item::Atom(a) => clauses.last_mut().unwrap().push(a),
        }
    }
    if clauses.last().unwrap().is_empty() {
        let pos = query.trim_end().len().saturating_sub(2);
        return Err(parse_error(pos, "OR needs a term on both sides"));
    }
    Ok(TextQuery { clauses })
}

fn within_one_edit(a: &str, b: &str) -> bool {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let (short, long) = if a.len() <= b.len() { (&a, &b) } else { (&b, &a) };
    if long.len() - short.len() > 1 {
        return false;
    }
    let prefix = short.iter().zip(long.iter()).take_while(|(x, y)| x == y).count();
    if prefix == short.len() {
        true
    } else if short.len() == long.len() {
        short[prefix + 1..] == long[prefix + 1..]
    } else {
        short[prefix..] == long[prefix + 1..]
    }
}

#[derive(Debug, Clone, Default)]
pub struct TextIndex {
    node_ids: Vec<usize>,
    doc_tokens: Vec<Vec<String>>,
    postings: BTreeMap<String, BTreeMap<usize, u32>>,
    avg_len: f64,
}

impl TextIndex {
    pub fn build<'a>(docs: impl IntoIterator<Item = (usize, &'a str)>) -> Self {
        let mut idx = TextIndex::default();
        for (node, text) in docs {
            let d = idx.node_ids.len();
            let tokens = tokenize(text);
            for t in &tokens {
                *idx.postings.entry(t.clone()).or_default().entry(d).or_default() += 1;
            }
            idx.node_ids.push(node);
            idx.doc_tokens.push(tokens);
        }
        let total: usize = idx.doc_tokens.iter().map(Vec::len).sum();
        idx.avg_len = if idx.node_ids.is_empty() {
            0.0
        } else {
            total as f64 / idx.node_ids.len() as f64
        };
        idx
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    fn expand(&self, m: &TokenMatch) -> Vec<&str> {
        match m.kind {
            MatchKind::Exact => self
                .postings
                .get_key_value(&m.token)
                .map(|(k, _)| vec![k.as_str()])
                .unwrap_or_default(),
            MatchKind::Prefix => self
                .postings
                .range(m.token.clone()..)
                .take_while(|(k, _)| k.starts_with(&m.token))
                .map(|(k, _)| k.as_str())
                .collect(),
            MatchKind::Fuzzy => self
                .postings
                .keys()
                .filter(|k| m.matches(k))
                .map(String::as_str)
                .collect(),
        }
    }

    fn docs_for(&self, terms: &[&str]) -> BTreeSet<usize> {
        terms
            .iter()
            .flat_map(|t| self.postings[*t].keys().copied())
            .collect()
    }

    fn phrase_docs(&self, phrase: &[TokenMatch]) -> BTreeSet<usize> {
        let mut candidates: Option<BTreeSet<usize>> = None;
        for m in phrase {
            let docs = self.docs_for(&self.expand(m));
            candidates = Some(match candidates {
                None => docs,
                Some(c) => c.intersection(&docs).copied().collect(),
            });
        }
        let candidates = candidates.unwrap_or_default();
        if phrase.len() == 1 {
            return candidates;
        }
        candidates
            .into_iter()
            .filter(|&d| {
                self.doc_tokens[d]
                    .windows(phrase.len())
                    .any(|w| w.iter().zip(phrase).all(|(t, m)| m.matches(t)))
            })
            .collect()
    }

    /// Internal document indexes matching the query.
    fn matching(&self, q: &TextQuery) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for clause in &q.clauses {
            let mut acc: Option<BTreeSet<usize>> = None;
            for phrase in clause {
                let docs = self.phrase_docs(phrase);
                acc = Some(match acc {
                    None => docs,
                    Some(a) => a.intersection(&docs).copied().collect(),
                });
            }
            out.extend(acc.unwrap_or_default());
        }
        out
    }

    fn bm25(&self, term: &str, doc: usize) -> f64 {
        let Some(post) = self.postings.get(term) else {
            return 0.0;
        };
        let Some(&tf) = post.get(&doc) else {
            return 0.0;
        };
        let n = self.node_ids.len() as f64;
        let df = post.len() as f64;
        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
        let tf = tf as f64;
        let dl = self.doc_tokens[doc].len() as f64;
        let norm = if self.avg_len > 0.0 { dl / self.avg_len } else { 1.0 };
        idf * tf * (K1 + 1.0) / (tf + K1 * (1.0 - B + B * norm))
    }

    /// Node ids of every matching line (unranked, ascending).
    pub fn matching_nodes(&self, q: &TextQuery) -> BTreeSet<usize> {
        self.matching(q).into_iter().map(|d| self.node_ids[d]).collect()
    }

    /// Matching `(node id, score)` pairs, best first, ties by node id.
    pub fn search(&self, q: &TextQuery, limit: usize) -> Vec<(usize, f64)> {
        let terms: BTreeSet<&str> = q
            .clauses
            .iter()
            .flatten()
            .flatten()
            .flat_map(|m| self.expand(m))
            .collect();
        let mut hits: Vec<(usize, f64)> = self
            .matching(q)
            .into_iter()
            .map(|d| {
                let score = terms.iter().map(|t| self.bm25(t, d)).sum();
                (self.node_ids[d], score)
            })
            .collect();
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        hits.truncate(limit);
        hits
    }
}
