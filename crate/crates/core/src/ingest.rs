//! Corpus loading and line-aligned chunking.

use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Line {
    pub doc_id: String,
    /// 1-based position within the document.
    pub number: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub lines: Vec<Line>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCorpus {
    pub documents: Vec<Document>,
}

impl Document {
    pub fn from_text(doc_id: impl Into<String>, text: &str) -> Self {
        let doc_id = doc_id.into();
        let lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| Line {
                doc_id: doc_id.clone(),
                number: i + 1,
                text: l.to_string(),
            })
            .collect();
        Document { doc_id, lines }
    }

    pub fn text(&self) -> String {
        join_lines(&self.lines)
    }
}

impl SourceCorpus {
    pub fn from_documents(documents: Vec<Document>) -> Self {
        SourceCorpus { documents }
    }

    pub fn lines(&self) -> impl Iterator<Item = &Line> {
        self.documents.iter().flat_map(|d| d.lines.iter())
    }

    pub fn line_count(&self) -> usize {
        self.documents.iter().map(|d| d.lines.len()).sum()
    }

    pub fn non_blank_line_count(&self) -> usize {
        self.lines().filter(|l| !l.text.trim().is_empty()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.line_count() == 0
    }
}

/// A contiguous, line-aligned slice of one document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: usize,
    pub lines: Vec<Line>,
    pub token_count: usize,
}

impl Chunk {
    pub fn text(&self) -> String {
        join_lines(&self.lines)
    }
}

pub fn join_lines(lines: &[Line]) -> String {
    let mut out = String::new();
    for (i, l) in lines.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&l.text);
    }
    out
}

/// Loads each path as one document, in the given order.
pub fn load_corpus<P: AsRef<Path>>(paths: &[P]) -> Result<SourceCorpus> {
    let mut documents = Vec::with_capacity(paths.len());
    for path in paths {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => {
                warn!("{}: invalid UTF-8, replacing bad bytes", path.display());
                String::from_utf8_lossy(e.as_bytes()).into_owned()
            }
        };
        let doc = Document::from_text(path.display().to_string(), &text);
        if doc.lines.is_empty() {
            warn!("{}: empty file", path.display());
        }
        documents.push(doc);
    }
    Ok(SourceCorpus { documents })
}

/// Approximate token count: one token per four characters, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

/// Splits every document into chunks of at most `chunk_tokens` estimated
/// tokens. Consecutive chunks of a document repeat the predecessor's trailing
/// lines whose token sum fits in `overlap_tokens`.
pub fn chunk_corpus(
    corpus: &SourceCorpus,
    chunk_tokens: usize,
    overlap_tokens: usize,
) -> Result<Vec<Chunk>> {
    if chunk_tokens == 0 {
        return Err(Error::Input("chunk_tokens must be positive".into()));
    }
    if overlap_tokens >= chunk_tokens {
        return Err(Error::Input(format!(
            "overlap_tokens ({overlap_tokens}) must be smaller than chunk_tokens ({chunk_tokens})"
        )));
    }

    let mut chunks = Vec::new();
    for doc in &corpus.documents {
        chunk_lines(&doc.lines, chunk_tokens, overlap_tokens, &mut chunks);
    }
    Ok(chunks)
}

/// Chunks an arbitrary run of lines (used for sections, which may interleave
/// documents).
pub fn chunk_lines(
    lines: &[Line],
    chunk_tokens: usize,
    overlap_tokens: usize,
    out: &mut Vec<Chunk>,
) {
    let tokens: Vec<usize> = lines.iter().map(|l| estimate_tokens(&l.text)).collect();

    // current chunk as a half-open range [start, end) of line indices
    let mut start = 0usize;
    let mut end = 0usize;
    let mut sum = 0usize;
    let mut fresh = 0usize; // lines in the current chunk not shared with the predecessor

    let emit = |start: usize, end: usize, sum: usize, out: &mut Vec<Chunk>| {
        out.push(Chunk {
            chunk_id: out.len(),
            lines: lines[start..end].to_vec(),
            token_count: sum,
        });
    };

    while end < lines.len() {
        let t = tokens[end];
        if fresh > 0 && sum + t > chunk_tokens {
            emit(start, end, sum, out);
            // carry the trailing lines that fit in the overlap budget
            let mut carry = 0usize;
            let mut new_start = end;
            while new_start > start && carry + tokens[new_start - 1] <= overlap_tokens {
                new_start -= 1;
                carry += tokens[new_start];
            }
            // drop carried lines until the next line fits, so every chunk makes progress
            while new_start < end && carry + t > chunk_tokens {
                carry -= tokens[new_start];
                new_start += 1;
            }
            start = new_start;
            sum = carry;
            fresh = 0;
            continue;
        }
        if t > chunk_tokens {
            warn!(
                "line {} of {} has {t} tokens, above chunk size {chunk_tokens}; emitting it alone",
                lines[end].number, lines[end].doc_id
            );
        }
        sum += t;
        end += 1;
        fresh += 1;
    }
    if fresh > 0 {
        emit(start, end, sum, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(lines: &[&str]) -> SourceCorpus {
        SourceCorpus::from_documents(vec![Document::from_text("d", &lines.join("\n"))])
    }

    #[test]
    fn token_estimate() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens(&"a".repeat(4000)), 1000);
        assert_eq!(estimate_tokens(&"a".repeat(4001)), 1001);
        // characters, not bytes
        assert_eq!(estimate_tokens("éééé"), 1);
    }

    #[test]
    fn three_line_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.log");
        fs::write(&p, "one\ntwo\nthree\n").unwrap();
        let c = load_corpus(&[&p]).unwrap();
        assert_eq!(c.documents.len(), 1);
        let nums: Vec<usize> = c.lines().map(|l| l.number).collect();
        assert_eq!(nums, vec![1, 2, 3]);
    }

    #[test]
    fn crlf_is_stripped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("crlf.txt");
        let raw = b"alpha\r\nbeta\r\n\r\ngamma delta\r\nend\r\n";
        fs::write(&p, raw).unwrap();
        let c = load_corpus(&[&p]).unwrap();
        // byte-level oracle: split on LF and drop one trailing CR
        let expected: Vec<String> = raw
            .split(|b| *b == b'\n')
            .filter(|s| !s.is_empty())
            .map(|s| String::from_utf8(s.strip_suffix(b"\r").unwrap_or(s).to_vec()).unwrap())
            .collect();
        let got: Vec<String> = c.lines().map(|l| l.text.clone()).collect();
        assert_eq!(got, expected);
        assert_eq!(got.len(), 5);
        assert!(got.iter().all(|t| !t.contains('\r') && !t.contains('\n')));
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = load_corpus(&["/nonexistent/x.log"]).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.log"));
    }

    #[test]
    fn empty_file_gives_empty_document() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty");
        fs::write(&p, "").unwrap();
        let c = load_corpus(&[&p]).unwrap();
        assert_eq!(c.documents.len(), 1);
        assert!(c.documents[0].lines.is_empty());
    }

    #[test]
    fn invalid_utf8_is_replaced() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad");
        fs::write(&p, b"ok\n\xff\xfe bad\n").unwrap();
        let c = load_corpus(&[&p]).unwrap();
        assert_eq!(c.line_count(), 2);
        assert!(c.documents[0].lines[1].text.contains('\u{FFFD}'));
    }

    #[test]
    fn whole_document_fits_in_one_chunk() {
        let lines: Vec<String> = (0..10).map(|i| format!("line {i}")).collect();
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let chunks = chunk_corpus(&doc(&refs), 1000, 0).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].lines.len(), 10);
    }

    #[test]
    fn uniform_lines_share_five_lines_at_fifty_token_overlap() {
        // 40 chars -> 10 tokens per line
        let line = "x".repeat(40);
        let refs: Vec<&str> = (0..100).map(|_| line.as_str()).collect();
        let chunks = chunk_corpus(&doc(&refs), 200, 50).unwrap();
        assert!(chunks.len() > 2);
        for pair in chunks.windows(2) {
            let prev_last: Vec<usize> = pair[0].lines.iter().map(|l| l.number).collect();
            let next_first: Vec<usize> = pair[1].lines.iter().map(|l| l.number).collect();
            let shared = next_first.iter().filter(|n| prev_last.contains(n)).count();
            assert_eq!(shared, 5);
        }
        assert!(chunks.iter().all(|c| c.token_count == 200 || c.chunk_id == chunks.len() - 1));
    }

    #[test]
    fn oversized_line_becomes_singleton() {
        let big = "y".repeat(400); // 100 tokens
        let chunks = chunk_corpus(&doc(&["a", big.as_str(), "b"]), 10, 0).unwrap();
        let sizes: Vec<usize> = chunks.iter().map(|c| c.lines.len()).collect();
        assert_eq!(sizes, vec![1, 1, 1]);
        assert_eq!(chunks[1].token_count, 100);
    }

    #[test]
    fn overlap_must_be_below_chunk_size() {
        assert!(chunk_corpus(&doc(&["a"]), 10, 10).is_err());
    }

    #[test]
    fn chunks_do_not_span_documents() {
        let corpus = SourceCorpus::from_documents(vec![
            Document::from_text("a", "1\n2\n3"),
            Document::from_text("b", "4\n5"),
        ]);
        let chunks = chunk_corpus(&corpus, 1000, 0).unwrap();
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[0].chunk_id, 0);
        assert_eq!(chunks[1].chunk_id, 1);
        assert!(chunks[1].lines.iter().all(|l| l.doc_id == "b"));
    }

    proptest! {
        #[test]
        fn chunking_reconstructs_the_corpus(
            lens in proptest::collection::vec(0usize..120, 0..60),
            chunk_tokens in 1usize..60,
            overlap_frac in 0.0f64..1.0,
        ) {
            let overlap = ((chunk_tokens as f64) * overlap_frac) as usize;
            let overlap = overlap.min(chunk_tokens - 1);
            let text: Vec<String> = lens.iter().enumerate().map(|(i, n)| {
                let mut s = format!("{i}:");
                s.push_str(&"z".repeat(*n));
                s
            }).collect();
            let refs: Vec<&str> = text.iter().map(String::as_str).collect();
            let corpus = doc(&refs);
            let chunks = chunk_corpus(&corpus, chunk_tokens, overlap).unwrap();
            prop_assert_eq!(&chunks, &chunk_corpus(&corpus, chunk_tokens, overlap).unwrap());

            let mut rebuilt: Vec<Line> = Vec::new();
            for c in &chunks {
                prop_assert_eq!(c.token_count, c.lines.iter().map(|l| estimate_tokens(&l.text)).sum::<usize>());
                let max_line = c.lines.iter().map(|l| estimate_tokens(&l.text)).max().unwrap_or(0);
                prop_assert!(c.token_count <= chunk_tokens + max_line);
                for l in &c.lines {
                    if rebuilt.last().is_none_or(|r| l.number > r.number) {
                        rebuilt.push(l.clone());
                    }
                }
            }
            prop_assert_eq!(rebuilt, corpus.documents[0].lines.clone());
        }
    }
}
