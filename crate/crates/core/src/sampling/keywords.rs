use std::collections::{BTreeMap, HashSet};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Clustering, KeywordExtractionConfig, KeywordSet, TermLineMatrix};
use crate::error::{Error, Result};
use crate::ingest::Line;
use crate::Scalar;

const MAX_ITERATIONS: usize = 100;

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn preprocess_lines<'a>(lines: impl IntoIterator<Item = &'a Line>) -> Vec<Vec<String>> {
    lines.into_iter().map(|l| tokenize(&l.text)).collect()
}

pub fn build_frequency_matrix(token_lines: &[Vec<String>]) -> TermLineMatrix {
    let vocab: BTreeMap<&str, usize> = token_lines
        .iter()
        .flatten()
        .map(String::as_str)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, t)| (t, i))
        .collect();

    let rows = token_lines
        .iter()
        .map(|tokens| {
            let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
            for t in tokens {
                *counts.entry(vocab[t.as_str()]).or_default() += 1;
            }
            counts.into_iter().collect()
        })
        .collect();

    TermLineMatrix {
        terms: vocab.keys().map(|t| t.to_string()).collect(),
        rows,
    }
}

fn sq_distance<T: Scalar>(row: &[(usize, u32)], row_norm: T, centroid: &[T], c_norm: T) -> T {
    let mut dot = T::zero();
    for &(j, c) in row {
        dot = dot + T::from_u32(c).unwrap() * centroid[j];
    }
    let d = row_norm - (dot + dot) + c_norm;
    if d < T::zero() {
        T::zero()
    } else {
        d
    }
}

fn nearest<T: Scalar>(
    row: &[(usize, u32)],
    row_norm: T,
    centroids: &[Vec<T>],
    c_norms: &[T],
) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_distance(row, row_norm, c, c_norms[k]);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn dense<T: Scalar>(row: &[(usize, u32)], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); width];
    for &(j, c) in row {
        out[j] = T::from_u32(c).unwrap();
    }
    out
}

fn norms<T: Scalar>(centroids: &[Vec<T>]) -> Vec<T> {
    centroids
        .iter()
        .map(|c| c.iter().fold(T::zero(), |acc, &x| acc + x * x))
        .collect()
}

/// Lloyd's k-means with k-means++ seeding over the sparse line rows.
///
/// When more clusters are requested than there are distinct rows, the count is
/// reduced to the number of distinct rows.
pub fn kmeans_cluster<T: Scalar>(
    matrix: &TermLineMatrix,
    config: &KeywordExtractionConfig,
) -> Result<Clustering<T>> {
    if matrix.rows.is_empty() {
        return Err(Error::Input("cannot cluster an empty matrix".into()));
    }
    if config.n_clusters == 0 {
        return Err(Error::Input("n_clusters must be at least 1".into()));
    }
    let distinct = matrix.rows.iter().collect::<HashSet<_>>().len();
    let k = if config.n_clusters > distinct {
        warn!(
            "n_clusters {} exceeds {distinct} distinct rows; using {distinct}",
            config.n_clusters
        );
        distinct
    } else {
        config.n_clusters
    };

    let width = matrix.terms.len();
    let row_norms: Vec<T> = matrix
            .rows
            .iter()
            .map(|r| {
                r.iter().fold(T::zero(), |acc, &(_, c)| {
                    let c = T::from_u32(c).unwrap();
                    acc + c * c
                })
            })
            .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.random_seed);
    let mut centroids: Vec<Vec<T>> = Vec::with_capacity(k);
    let first = rng.gen_range(0..matrix.rows.len());
    centroids.push(dense(&matrix.rows[first], width));
    let mut min_d: Vec<T> = {
        let cn = norms(&centroids);
        matrix
            .rows
            .iter()
            .zip(&row_norms)
            .map(|(r, &n)| sq_distance(r, n, &centroids[0], cn[0]))
            .collect()
    };
    while centroids.len() < k {
        let total = min_d.iter().fold(T::zero(), |a, &d| a + d);
        let target = T::from_f64(rng.gen::<f64>()).unwrap() * total;
        let mut acc = T::zero();
        let mut pick = None;
        for (i, &d) in min_d.iter().enumerate() {
            acc = acc + d;
            if d > T::zero() && acc > target {
                pick = Some(i);
                break;
            }
        }
        // rounding can leave target just above the running sum
        let pick = pick.unwrap_or_else(|| {
            min_d
                .iter()
                .rposition(|&d| d > T::zero())
                .expect("fewer distinct rows than clusters")
        });
        let c = dense::<T>(&matrix.rows[pick], width);
        let cn = norms(std::slice::from_ref(&c))[0];
        for (i, r) in matrix.rows.iter().enumerate() {
            let d = sq_distance(r, row_norms[i], &c, cn);
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
        centroids.push(c);
    }

    let assign = |centroids: &[Vec<T>]| -> Vec<usize> {
        let cn = norms(centroids);
        matrix
            .rows
            .iter()
            .zip(&row_norms)
            .map(|(r, &n)| nearest(r, n, centroids, &cn).0)
            .collect()
    };

    let mut assignments = assign(&centroids);
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut sums = vec![vec![T::zero(); width]; k];
        let mut counts = vec![0usize; k];
        for (r, &a) in matrix.rows.iter().zip(&assignments) {
            counts[a] += 1;
            for &(j, c) in r {
                sums[a][j] = sums[a][j] + T::from_u32(c).unwrap();
            }
        }
        for (ci, (sum, &n)) in sums.into_iter().zip(&counts).enumerate() {
            if n > 0 {
                let n = T::from_usize_lossy(n);
                centroids[ci] = sum.into_iter().map(|s| s / n).collect();
            }
        }
        let next = assign(&centroids);
        if next == assignments {
            break;
        }
        assignments = next;
    }

    Ok(Clustering {
        assignments,
        centroids,
        iterations,
    })
}

/// Per cluster, the `n_t` terms with the largest positive centroid
/// coordinates; ties go to the lexicographically smaller term.
pub fn keywords_from_clustering<T: Scalar>(
    matrix: &TermLineMatrix,
    clustering: &Clustering<T>,
    n_terms_per_cluster: usize,
) -> KeywordSet {
    let mut out = KeywordSet::new();
    for centroid in &clustering.centroids {
        let mut coords: Vec<(usize, T)> = centroid
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, v)| *v > T::zero())
            .collect();
        coords.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        out.extend(
            coords
                .into_iter()
                .take(n_terms_per_cluster)
                .map(|(j, _)| matrix.terms[j].clone()),
        );
    }
    out
}

pub fn extract_keywords<T: Scalar>(
    matrix: &TermLineMatrix,
    config: &KeywordExtractionConfig,
) -> Result<KeywordSet> {
    let clustering = kmeans_cluster::<T>(matrix, config)?;
    Ok(keywords_from_clustering(
        matrix,
        &clustering,
        config.n_terms_per_cluster,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn toks(lines: &[&str]) -> Vec<Vec<String>> {
        lines.iter().map(|l| tokenize(l)).collect()
    }

    fn cfg(n_clusters: usize, n_t: usize) -> KeywordExtractionConfig {
        KeywordExtractionConfig {
            n_clusters,
            n_terms_per_cluster: n_t,
            random_seed: 42,
        }
    }

    #[test]
    fn tokenizer_rule() {
        assert_eq!(tokenize("Hello, World!"), vec!["hello", "world"]);
        assert_eq!(
            tokenize("GET /v2/54fadb41 HTTP/1.1 status: 200"),
            vec!["get", "v2", "54fadb41", "http", "1", "1", "status", "200"]
        );
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("meta_data.json"), vec!["meta", "data", "json"]);
    }

    #[test]
    fn direct_count() {
        let m = build_frequency_matrix(&[vec!["a".into(), "b".into(), "a".into()]]);
        assert_eq!(m.terms, vec!["a", "b"]);
        assert_eq!(m.row_dense(0), vec![2, 1]);
    }

    #[test]
    fn identical_lines_identical_rows() {
        let m = build_frequency_matrix(&toks(&["x y z", "x y z"]));
        assert_eq!(m.rows[0], m.rows[1]);
    }

    #[test]
    fn matrix_matches_hashmap_oracle() {
        let lines = [
            "GET /a HTTP/1.1 status 200",
            "POST /b HTTP/1.1 status 500",
            "interface Gi0/0",
            " ip address 10.0.0.1 255.255.255.0",
            "status status status",
        ];
        let t = toks(&lines);
        let m = build_frequency_matrix(&t);
        let mut sorted: Vec<String> = t.iter().flatten().cloned().collect();
        sorted.sort();
        sorted.dedup();
        assert_eq!(m.terms, sorted);
        for (i, line) in t.iter().enumerate() {
            let mut oracle: HashMap<&str, u32> = HashMap::new();
            for w in line {
                *oracle.entry(w).or_default() += 1;
            }
            for (j, term) in m.terms.iter().enumerate() {
                assert_eq!(m.get(i, j), oracle.get(term.as_str()).copied().unwrap_or(0));
            }
        }
    }

    #[test]
    fn identical_rows_single_cluster() {
        let m = build_frequency_matrix(&toks(&["a b b", "a b b", "a b b"]));
        let c = kmeans_cluster::<f64>(&m, &cfg(1, 1)).unwrap();
        assert_eq!(c.assignments, vec![0, 0, 0]);
        assert_eq!(c.centroids, vec![vec![1.0, 2.0]]);
    }

    #[test]
    fn too_many_clusters_are_reduced() {
        let m = build_frequency_matrix(&toks(&["a", "a", "b"]));
        let c = kmeans_cluster::<f64>(&m, &cfg(5, 1)).unwrap();
        assert_eq!(c.n_clusters(), 2);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        let m = build_frequency_matrix(&[]);
        assert!(kmeans_cluster::<f64>(&m, &cfg(1, 1)).is_err());
    }

    fn sse(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
        let mut total = 0.0;
        for k in 0..2 {
            let members: Vec<&Vec<f64>> = rows
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == k)
                .map(|(r, _)| r)
                .collect();
            if members.is_empty() {
                continue;
            }
            let w = members[0].len();
            let mean: Vec<f64> = (0..w)
                .map(|j| members.iter().map(|r| r[j]).sum::<f64>() / members.len() as f64)
                .collect();
            for r in members {
                total += r.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            }
        }
        total
    }

    #[test]
    fn two_groups_match_brute_force_partition() {
        let lines = [
            "error disk full error",
            "error disk full",
            "error disk error disk",
            "login user ok",
            "login user user ok",
            "login ok ok",
        ];
        let m = build_frequency_matrix(&toks(&lines));
        let rows: Vec<Vec<f64>> = (0..m.n_rows())
            .map(|i| m.row_dense(i).into_iter().map(f64::from).collect())
            .collect();
        // enumerate every 2-partition (row 0 fixed in part 0)
        let mut best = (f64::INFINITY, vec![]);
        for mask in 0u32..(1 << 5) {
            let labels: Vec<usize> = std::iter::once(0)
                .chain((0..5).map(|b| ((mask >> b) & 1) as usize))
                .collect();
            if !labels.contains(&1) {
                continue;
            }
            let s = sse(&rows, &labels);
            if s < best.0 - 1e-12 {
                best = (s, labels);
            }
        }
        assert_eq!(best.1, vec![0, 0, 0, 1, 1, 1]);

        let c = kmeans_cluster::<f64>(&m, &cfg(2, 2)).unwrap();
        let a = &c.assignments;
        let normalized: Vec<usize> = a.iter().map(|&x| usize::from(x != a[0])).collect();
        assert_eq!(normalized, best.1);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let lines: Vec<String> = (0..40)
            .map(|i| format!("t{} shared x{} y{}", i % 7, i % 3, i % 5))
            .collect();
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let m = build_frequency_matrix(&toks(&refs));
        let first = kmeans_cluster::<f64>(&m, &cfg(4, 2)).unwrap();
        for _ in 0..10 {
            assert_eq!(kmeans_cluster::<f64>(&m, &cfg(4, 2)).unwrap(), first);
        }
    }

    #[test]
    fn dominant_coordinate_keyword() {
        let m = build_frequency_matrix(&[vec![
            "a".into(),
            "a".into(),
            "a".into(),
            "a".into(),
            "a".into(),
            "b".into(),
        ]]);
        let k = extract_keywords::<f64>(&m, &cfg(1, 1)).unwrap();
        assert_eq!(k, KeywordSet::from(["a".to_string()]));
    }

    #[test]
    fn keywords_follow_centroids() {
        let lines = [
            "error disk full error",
            "error disk full",
            "error disk error disk",
            "login user ok",
            "login user user ok",
            "login ok ok",
        ];
        let m = build_frequency_matrix(&toks(&lines));
        let c = kmeans_cluster::<f64>(&m, &cfg(2, 2)).unwrap();
        let got = keywords_from_clustering(&m, &c, 2);

        // oracle: recompute centroids from the assignments, then argmax twice
        let mut expected = KeywordSet::new();
        for k in 0..c.n_clusters() {
            let members: Vec<usize> = (0..m.n_rows()).filter(|&i| c.assignments[i] == k).collect();
            let mut coords: Vec<(String, f64)> = m
                .terms
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    let s: u32 = members.iter().map(|&i| m.get(i, j)).sum();
                    (t.clone(), s as f64 / members.len() as f64)
                })
                .filter(|(_, v)| *v > 0.0)
                .collect();
            for _ in 0..2 {
                let Some(best) = coords
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1 .1.partial_cmp(&b.1 .1).unwrap().then(b.1 .0.cmp(&a.1 .0)))
                    .map(|(i, _)| i)
                else {
                    break;
                };
                expected.insert(coords.remove(best).0);
            }
        }
        assert_eq!(got, expected);
        assert_eq!(
            got,
            KeywordSet::from(["disk", "error", "login", "ok"].map(String::from))
        );
    }

    #[test]
    fn sparse_cluster_yields_all_nonzero_terms() {
        let m = build_frequency_matrix(&toks(&["a b"]));
        let k = extract_keywords::<f64>(&m, &cfg(1, 10)).unwrap();
        assert_eq!(k.len(), 2);
    }

    #[test]
    fn f32_clustering_agrees_with_f64() {
        let lines = ["a a b", "a b b", "c d", "c c d"];
        let m = build_frequency_matrix(&toks(&lines));
        let a = kmeans_cluster::<f64>(&m, &cfg(2, 1)).unwrap();
        let b = kmeans_cluster::<f32>(&m, &cfg(2, 1)).unwrap();
        assert_eq!(a.assignments, b.assignments);
    }
}
