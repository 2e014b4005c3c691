//! Representative chunk sampling.
//!
//! Keywords come from clustering corpus lines by their term-frequency rows and
//! keeping the heaviest centroid terms of each cluster. Sample chunks are then
//! picked greedily: each step takes the chunk whose count of not-yet-covered
//! keywords, weighted by the chunk's keyword entropy, is largest.

mod keywords;
mod selection;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use keywords::{
    build_frequency_matrix, extract_keywords, keywords_from_clustering, kmeans_cluster,
    preprocess_lines, tokenize,
};
pub use selection::{
    chunk_entropy, compute_tfidf, filter_chunk_tokens, search_sample_parameters, select_from_tokens,
    select_samples, ParameterSearch,
};

pub type KeywordSet = BTreeSet<String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordExtractionConfig {
    pub n_clusters: usize,
    pub n_terms_per_cluster: usize,
    pub random_seed: u64,
}

impl Default for KeywordExtractionConfig {
    fn default() -> Self {
        KeywordExtractionConfig {
            n_clusters: 4,
            n_terms_per_cluster: 4,
            random_seed: 42,
        }
    }
}

/// Line-by-term count matrix, stored sparsely.
///
/// `terms` is sorted; each row holds `(term index, count)` pairs in increasing
/// term order with nonzero counts only.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TermLineMatrix {
    pub terms: Vec<String>,
    pub rows: Vec<Vec<(usize, u32)>>,
}

impl TermLineMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn get(&self, row: usize, term: usize) -> u32 {
        self.rows[row]
            .binary_search_by_key(&term, |(j, _)| *j)
            .map(|k| self.rows[row][k].1)
            .unwrap_or(0)
    }

    pub fn row_dense(&self, row: usize) -> Vec<u32> {
        let mut out = vec![0; self.terms.len()];
        for &(j, c) in &self.rows[row] {
            out[j] = c;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering<T> {
    /// Cluster index per matrix row.
    pub assignments: Vec<usize>,
    /// Dense centroids, one coordinate per term.
    pub centroids: Vec<Vec<T>>,
    pub iterations: usize,
}

impl<T> Clustering<T> {
    pub fn n_clusters(&self) -> usize {
        self.centroids.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfIdfMatrix<T> {
    pub terms: Vec<String>,
    pub rows: Vec<Vec<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSelectionConfig {
    pub coverage_threshold: f64,
}

impl Default for SampleSelectionConfig {
    fn default() -> Self {
        SampleSelectionConfig {
            coverage_threshold: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSelection<T> {
    /// Chunk ids in the order they were picked.
    pub selected_chunk_ids: Vec<usize>,
    pub covered_terms: BTreeSet<String>,
    pub achieved_coverage: T,
    /// Winning `(chunk_id, gain)` of each greedy step.
    pub per_step_gains: Vec<(usize, T)>,
    pub n_terms: usize,
}
