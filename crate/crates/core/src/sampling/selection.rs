use std::collections::{BTreeMap, BTreeSet, HashMap};

use log::warn;
use serde::{Deserialize, Serialize};

use super::keywords::{keywords_from_clustering, kmeans_cluster, tokenize};
use super::{
    KeywordExtractionConfig, KeywordSet, SampleSelection, SampleSelectionConfig, TermLineMatrix,
    TfIdfMatrix,
};
use crate::error::Result;
use crate::ingest::Chunk;
use crate::Scalar;

/// Base-2 Shannon entropy of the token frequency distribution.
pub fn chunk_entropy<T: Scalar, S: AsRef<str>>(filtered_tokens: &[S]) -> T {
    if filtered_tokens.is_empty() {
        return T::zero();
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in filtered_tokens {
        *counts.entry(t.as_ref()).or_default() += 1;
    }
    let n = T::from_usize_lossy(filtered_tokens.len());
    let mut h = T::zero();
    // sum in a fixed order so the result does not depend on hash iteration
    let mut freqs: Vec<usize> = counts.into_values().collect();
    freqs.sort_unstable();
    for c in freqs {
        let p = T::from_usize_lossy(c) / n;
        h = h - p * p.log2();
    }
    if h < T::zero() {
        T::zero()
    } else {
        h
    }
}

/// Raw-count tf times smoothed idf `ln((1 + N) / (1 + df)) + 1`.
pub fn compute_tfidf<T: Scalar, S: AsRef<str>>(filtered_chunks: &[Vec<S>]) -> TfIdfMatrix<T> {
    let terms: Vec<String> = filtered_chunks
        .iter()
        .flatten()
        .map(|t| t.as_ref())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(str::to_string)
        .collect();
    let index: HashMap<&str, usize> = terms
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i))
        .collect();

    let mut tf = vec![vec![0usize; terms.len()]; filtered_chunks.len()];
    let mut df = vec![0usize; terms.len()];
    for (row, chunk) in tf.iter_mut().zip(filtered_chunks) {
        for t in chunk {
            row[index[t.as_ref()]] += 1;
        }
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                df[j] += 1;
            }
        }
    }

    let n = T::from_usize_lossy(filtered_chunks.len());
    let idf: Vec<T> = df
        .iter()
        .map(|&d| ((T::one() + n) / (T::one() + T::from_usize_lossy(d))).ln() + T::one())
        .collect();
    let rows = tf
        .into_iter()
        .map(|row| {
            row.into_iter()
                .zip(&idf)
                .map(|(c, &w)| T::from_usize_lossy(c) * w)
                .collect()
        })
        .collect();
    TfIdfMatrix { terms, rows }
}

/// Tokens of the chunk that are keywords, in reading order.
pub fn filter_chunk_tokens(chunk: &Chunk, keywords: &KeywordSet) -> Vec<String> {
    chunk
        .lines
        .iter()
        .flat_map(|l| tokenize(&l.text))
        .filter(|t| keywords.contains(t))
        .collect()
}

/// Greedy sample selection over chunks given as keyword-filtered token lists.
///
/// Each step picks the unselected chunk with the largest
/// `|new terms| * entropy`; ties go to more new terms, then the lower chunk id.
/// Stops once coverage reaches the threshold or no chunk adds a new term.
pub fn select_from_tokens<T: Scalar>(
    chunk_ids: &[usize],
    filtered: &[Vec<String>],
    threshold: f64,
) -> SampleSelection<T> {
    debug_assert_eq!(chunk_ids.len(), filtered.len());
    let tfidf = compute_tfidf::<T, _>(filtered);
    let n_terms = tfidf.terms.len();
    let entropies: Vec<T> = filtered.iter().map(|t| chunk_entropy(t)).collect();
    let term_sets: Vec<BTreeSet<&str>> = filtered
        .iter()
        .map(|t| t.iter().map(String::as_str).collect())
        .collect();
    let threshold = T::from_f64(threshold).unwrap();

    let mut selected: Vec<usize> = Vec::new();
    let mut is_selected = vec![false; filtered.len()];
    let mut covered: BTreeSet<String> = BTreeSet::new();
    let mut per_step_gains = Vec::new();

    let coverage = |covered: &BTreeSet<String>| {
        if n_terms == 0 {
            T::one()
        } else {
            T::from_usize_lossy(covered.len()) / T::from_usize_lossy(n_terms)
        }
    };

    while coverage(&covered) < threshold {
        // (gain, new terms, index)
        let mut best: Option<(T, usize, usize)> = None;
        for i in 0..filtered.len() {
            if is_selected[i] {
                continue;
            }
            let new_terms = term_sets[i]
                .iter()
                .filter(|t| !covered.contains(**t))
                .count();
            let gain = T::from_usize_lossy(new_terms) * entropies[i];
            let better = match best {
                None => true,
                Some((bg, bn, bi)) => {
                    gain > bg
                        || (gain == bg
                            && (new_terms > bn || (new_terms == bn && chunk_ids[i] < chunk_ids[bi])))
                }
            };
            if better {
                best = Some((gain, new_terms, i));
            }
        }
        match best {
            Some((gain, new_terms, i)) if new_terms > 0 => {
                is_selected[i] = true;
                selected.push(chunk_ids[i]);
                covered.extend(term_sets[i].iter().map(|t| t.to_string()));
                per_step_gains.push((chunk_ids[i], gain));
            }
            _ => break,
        }
    }

    SampleSelection {
        achieved_coverage: coverage(&covered),
        selected_chunk_ids: selected,
        covered_terms: covered,
        per_step_gains,
        n_terms,
    }
}

pub fn select_samples<T: Scalar>(
    chunks: &[Chunk],
    keywords: &KeywordSet,
    config: &SampleSelectionConfig,
) -> SampleSelection<T> {
    if keywords.is_empty() {
        warn!("no keywords; sample selection is empty");
        return SampleSelection {
            selected_chunk_ids: Vec::new(),
            covered_terms: BTreeSet::new(),
            achieved_coverage: T::one(),
            per_step_gains: Vec::new(),
            n_terms: 0,
        };
    }
    let filtered: Vec<Vec<String>> = chunks
        .iter()
        .map(|c| filter_chunk_tokens(c, keywords))
        .collect();
    let ids: Vec<usize> = chunks.iter().map(|c| c.chunk_id).collect();
    select_from_tokens(&ids, &filtered, config.coverage_threshold)
}

/// Outcome of searching `(n_clusters, n_terms_per_cluster)` for a target
/// sample count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSearch<T> {
    pub n_clusters: usize,
    pub n_terms_per_cluster: usize,
    pub keywords: KeywordSet,
    pub selection: SampleSelection<T>,
    /// True when no grid point produced exactly the target and the selection
    /// was cut down to it.
    pub truncated: bool,
}

/// Walks the grid in order and returns the first point whose selection has
/// exactly `target` chunks. Failing that, the smallest selection above the
/// target is truncated to it; if every selection is smaller, the largest wins.
pub fn search_sample_parameters<T: Scalar>(
    line_matrix: &TermLineMatrix,
    chunks: &[Chunk],
    target: usize,
    grid: &[(usize, usize)],
    random_seed: u64,
    selection: &SampleSelectionConfig,
) -> Result<ParameterSearch<T>> {
    let mut clusterings = BTreeMap::new();
    let mut above: Option<ParameterSearch<T>> = None;
    let mut below: Option<ParameterSearch<T>> = None;

    for &(n_c, n_t) in grid {
        if let std::collections::btree_map::Entry::Vacant(e) = clusterings.entry(n_c) {
            let cfg = KeywordExtractionConfig {
                n_clusters: n_c,
                n_terms_per_cluster: n_t,
                random_seed,
            };
            e.insert(kmeans_cluster::<T>(line_matrix, &cfg)?);
        }
        let keywords = keywords_from_clustering(line_matrix, &clusterings[&n_c], n_t);
        let sel = select_samples::<T>(chunks, &keywords, selection);
        let size = sel.selected_chunk_ids.len();
        let point = ParameterSearch {
            n_clusters: n_c,
            n_terms_per_cluster: n_t,
            keywords,
            selection: sel,
            truncated: false,
        };
        if size == target {
            return Ok(point);
        }
        if size > target {
            if above
                .as_ref()
                .is_none_or(|a| size < a.selection.selected_chunk_ids.len())
            {
                above = Some(point);
            }
        } else if below
            .as_ref()
            .is_none_or(|b| size > b.selection.selected_chunk_ids.len())
        {
            below = Some(point);
        }
    }

    if let Some(mut p) = above {
        p.selection.selected_chunk_ids.truncate(target);
        p.selection.per_step_gains.truncate(target);
        p.truncated = true;
        return Ok(p);
    }
    below.ok_or_else(|| crate::Error::Input("empty sample-size search grid".into()))
}
