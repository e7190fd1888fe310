//! Exact nearest-neighbor graphs, graph overlap between models, and k-NN
//! classification on frozen embeddings.
//!
//! Searches are brute force: query rows are processed in blocks, each block
//! scored against the whole reference matrix with one matrix product.
//! Candidates with equal score are ordered by sample id (lexicographic), so
//! results do not depend on row order.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::Write;

use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::report::PairwiseReport;

/// Default neighbor count for k-NN classification.
pub const DEFAULT_KNN_K: usize = 200;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;
/// Candidate ks for fine-grained sweeps. The leading 0 is skipped.
pub const FGVC_SWEEP: [i64; 11] = [0, 5, 10, 15, 20, 25, 30, 35, 40, 45, 50];

const QUERY_BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMetric {
    #[default]
    Cosine,
    Euclidean,
}

impl std::str::FromStr for SimilarityMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cosine" => Ok(SimilarityMetric::Cosine),
            "euclidean" => Ok(SimilarityMetric::Euclidean),
            other => Err(Error::InvalidParameter(format!("unknown metric {other:?}"))),
        }
    }
}

/// Directed top-k neighbor lists, one per sample, self excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    model_tag: String,
    k: usize,
    metric: SimilarityMetric,
    node_ids: Vec<String>,
    /// `neighbors[v]` holds indices into `node_ids`, best first.
    neighbors: Vec<Vec<usize>>,
    /// Cosine similarity, or negated squared distance for euclidean graphs.
    scores: Vec<Vec<f64>>,
}

impl NeighborGraph {
    pub fn model_tag(&self) -> &str {
        &self.model_tag
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn metric(&self) -> SimilarityMetric {
        self.metric
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    /// Neighbor row indices of node `v`, best first.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn scores(&self, v: usize) -> &[f64] {
        &self.scores[v]
    }

    pub fn neighbor_ids(&self, v: usize) -> impl Iterator<Item = &str> {
        self.neighbors[v].iter().map(|&j| self.node_ids[j].as_str())
    }

    /// `node_id,rank,neighbor_id,similarity` rows, rank starting at 1.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let to_err = |e: csv::Error| Error::io("<graph csv>", std::io::Error::other(e.to_string()));
        wtr.write_record(["node_id", "rank", "neighbor_id", "similarity"])
            .map_err(to_err)?;
        for v in 0..self.len() {
            for (rank, (&j, &score)) in self.neighbors[v].iter().zip(&self.scores[v]).enumerate() {
                wtr.write_record([
                    self.node_ids[v].as_str(),
                    &(rank + 1).to_string(),
                    &self.node_ids[j],
                    &crate::report::format_g17(score),
                ])
                .map_err(to_err)?;
            }
        }
        wtr.flush().map_err(|e| Error::io("<graph csv>", e))?;
        Ok(())
    }
}

/// Rank of each id in lexicographic order.
fn id_ranks(ids: &[String]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    let mut ranks = vec![0; ids.len()];
    for (r, i) in order.into_iter().enumerate() {
        ranks[i] = r;
    }
    ranks
}

fn unit_rows(x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut out = x.to_owned();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNormRow(i));
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

/// Prepared reference matrix for repeated top-k queries.
struct Index {
    data: Array2<f64>,
    sq_norms: Vec<f64>,
    tie_rank: Vec<usize>,
    metric: SimilarityMetric,
}

impl Index {
    fn new(data: ArrayView2<'_, f64>, ids: &[String], metric: SimilarityMetric) -> Result<Self> {
        let data = match metric {
            SimilarityMetric::Cosine => unit_rows(data)?,
            SimilarityMetric::Euclidean => data.to_owned(),
        };
        let sq_norms = data.rows().into_iter().map(|r| r.dot(&r)).collect();
        Ok(Self {
            data,
            sq_norms,
            tie_rank: id_ranks(ids),
            metric,
        })
    }

    fn prepare_queries(&self, queries: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        match self.metric {
            SimilarityMetric::Cosine => unit_rows(queries),
            SimilarityMetric::Euclidean => Ok(queries.to_owned()),
        }
    }

    /// Top-k `(index, score)` lists for each query row, best first.
    /// `exclude_self` drops reference row `i` from the candidates of query `i`.
    fn search(
        &self,
        queries: ArrayView2<'_, f64>,
        k: usize,
        exclude_self: bool,
    ) -> Result<Vec<Vec<(usize, f64)>>> {
        let queries = self.prepare_queries(queries)?;
        let n_ref = self.data.nrows();
        let starts: Vec<usize> = (0..queries.nrows()).step_by(QUERY_BLOCK).collect();
        let blocks: Vec<Vec<Vec<(usize, f64)>>> = starts
            .par_iter()
            .map(|&start| {
                let end = (start + QUERY_BLOCK).min(queries.nrows());
                let block = queries.slice(s![start..end, ..]);
                let dots = block.dot(&self.data.t());
                (start..end)
                    .map(|q| {
                        let row = dots.row(q - start);
                        let q_norm = match self.metric {
                            SimilarityMetric::Cosine => 0.0,
                            SimilarityMetric::Euclidean => {
                                let r = queries.row(q);
                                r.dot(&r)
                            }
                        };
                        let mut cands: Vec<(usize, f64)> = (0..n_ref)
                            .filter(|&j| !(exclude_self && j == q))
                            .map(|j| {
                                let score = match self.metric {
                                    SimilarityMetric::Cosine => row[j],
                                    SimilarityMetric::Euclidean => {
                                        -(q_norm + self.sq_norms[j] - 2.0 * row[j]).max(0.0)
                                    }
                                };
                                (j, score)
                            })
                            .collect();
                        let cmp = |a: &(usize, f64), b: &(usize, f64)| -> Ordering {
                            b.1.total_cmp(&a.1)
                                .then_with(|| self.tie_rank[a.0].cmp(&self.tie_rank[b.0]))
                        };
                        if k < cands.len() {
                            cands.select_nth_unstable_by(k, cmp);
                            cands.truncate(k);
                        }
                        cands.sort_unstable_by(cmp);
                        cands
                    })
                    .collect()
            })
            .collect();
        Ok(blocks.into_iter().flatten().collect())
    }
}

/// Exact top-k neighbor graph of a set (self excluded).
pub fn build_graph(
    set: &EmbeddingSet,
    k: usize,
    metric: SimilarityMetric,
) -> Result<NeighborGraph> {
    if k == 0 {
        return Err(Error::ZeroK);
    }
    if k > set.len() - 1 {
        return Err(Error::KTooLarge {
            k,
            available: set.len() - 1,
        });
    }
    let index = Index::new(set.matrix(), set.sample_ids(), metric)?;
    let lists = index.search(set.matrix(), k, true)?;
    let (neighbors, scores) = lists.into_iter().map(|l| l.into_iter().unzip()).unzip();
    Ok(NeighborGraph {
        model_tag: set.model_tag().to_string(),
        k,
        metric,
        node_ids: set.sample_ids().to_vec(),
        neighbors,
        scores,
    })
}

/// Mean over nodes of the fraction of top-k neighbors the two graphs share.
/// Neighbor order is ignored; nodes are matched by id.
pub fn graph_overlap(g1: &NeighborGraph, g2: &NeighborGraph) -> Result<f64> {
    if g1.k != g2.k {
        return Err(Error::MismatchedK(g1.k, g2.k));
    }
    if g1.len() != g2.len() {
        return Err(Error::MismatchedNodes);
    }
    // translation from g2 row indices to g1 row indices
    let to_g1: Vec<usize> = if g1.node_ids == g2.node_ids {
        (0..g1.len()).collect()
    } else {
        let pos: HashMap<&str, usize> = g1
            .node_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        g2.node_ids
            .iter()
            .map(|id| pos.get(id.as_str()).copied().ok_or(Error::MismatchedNodes))
            .collect::<Result<_>>()?
    };
    let mut g2_at = vec![0; g1.len()];
    for (i2, &i1) in to_g1.iter().enumerate() {
        g2_at[i1] = i2;
    }
    let shared: usize = (0..g1.len())
        .into_par_iter()
        .map(|v| {
            let mut a = g1.neighbors[v].clone();
            let mut b: Vec<usize> = g2.neighbors[g2_at[v]].iter().map(|&j| to_g1[j]).collect();
            a.sort_unstable();
            b.sort_unstable();
            count_common(&a, &b)
        })
        .sum();
    Ok(shared as f64 / (g1.len() * g1.k) as f64)
}

fn count_common(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Graph overlap for every pair of graphs.
pub fn overlap_pairwise(graphs: &[NeighborGraph]) -> Result<PairwiseReport> {
    if graphs.len() < 2 {
        return Err(Error::TooFewInputs {
            required: 2,
            found: graphs.len(),
        });
    }
    let m = graphs.len();
    let pairs: Vec<(usize, usize)> = (0..m)
        .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
        .collect();
    let values = pairs
        .iter()
        .map(|&(i, j)| graph_overlap(&graphs[i], &graphs[j]))
        .collect::<Result<Vec<_>>>()?;
    let mut matrix = Array2::eye(m);
    for (&(i, j), v) in pairs.iter().zip(values) {
        matrix[[i, j]] = v;
        matrix[[j, i]] = v;
    }
    let mut report = PairwiseReport::new(
        "nn_graph_overlap",
        graphs.iter().map(|g| g.model_tag.clone()).collect(),
        matrix,
    );
    report.set_param("k", graphs[0].k);
    report.set_param("n", graphs[0].len());
    report.set_param("metric", serde_json::to_value(graphs[0].metric)?);
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Voting {
    Uniform,
    #[default]
    TemperatureWeighted,
}

impl std::str::FromStr for Voting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(Voting::Uniform),
            "weighted" | "temperature" | "temperature_weighted" => Ok(Voting::TemperatureWeighted),
            other => Err(Error::InvalidParameter(format!("unknown voting {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnnOptions {
    pub k: usize,
    pub voting: Voting,
    pub temperature: f64,
}

impl Default for KnnOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_KNN_K,
            voting: Voting::TemperatureWeighted,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnEvalResult {
    pub k: usize,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub voting: Voting,
    pub temperature: f64,
    /// Accuracy per class; `None` for classes absent from the test set.
    pub per_class_accuracy: Vec<Option<f64>>,
    #[serde(skip)]
    pub predictions: Vec<usize>,
}

/// Cosine k-NN classification of `test` against labelled `train` rows.
///
/// A train row identical to a test row is a legitimate neighbor: nothing is
/// excluded.
pub fn knn_classify(
    train: &EmbeddingSet,
    test: &EmbeddingSet,
    options: &KnnOptions,
) -> Result<KnnEvalResult> {
    let mut table = knn_table(train, test, &[options.k], options)?;
    Ok(table.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnSweep {
    pub results: Vec<KnnEvalResult>,
    /// Index into `results` of the best k (smallest k among equal accuracy).
    pub best: usize,
}

impl KnnSweep {
    pub fn best_result(&self) -> &KnnEvalResult {
        &self.results[self.best]
    }
}

/// Evaluates every positive k in `ks` and picks the most accurate.
/// Non-positive ks are skipped with a warning.
pub fn knn_sweep(
    train: &EmbeddingSet,
    test: &EmbeddingSet,
    ks: &[i64],
    options: &KnnOptions,
) -> Result<KnnSweep> {
    let mut valid = Vec::new();
    for &k in ks {
        if k <= 0 {
            log::warn!("skipping non-positive k = {k} in k-NN sweep");
        } else {
            valid.push(k as usize);
        }
    }
    if valid.is_empty() {
        return Err(Error::InvalidParameter(
            "k-NN sweep has no positive k".into(),
        ));
    }
    let results = knn_table(train, test, &valid, options)?;
    let best = (0..results.len())
        .min_by(|&a, &b| {
            results[b]
                .accuracy
                .total_cmp(&results[a].accuracy)
                .then(results[a].k.cmp(&results[b].k))
        })
        .expect("non-empty");
    Ok(KnnSweep { results, best })
}

/// One neighbor search at the largest k, then voting at each requested k.
fn knn_table(
    train: &EmbeddingSet,
    test: &EmbeddingSet,
    ks: &[usize],
    options: &KnnOptions,
) -> Result<Vec<KnnEvalResult>> {
    let train_labels = train.require_labels()?;
    let test_labels = test.require_labels()?;
    if train.dim() != test.dim() {
        return Err(Error::DimMismatch {
            expected: train.dim(),
            found: test.dim(),
        });
    }
    if options.voting == Voting::TemperatureWeighted
        && options.temperature.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)
    {
        return Err(Error::InvalidParameter(
            "temperature must be positive".into(),
        ));
    }
    let k_max = *ks.iter().max().expect("non-empty ks");
    if ks.contains(&0) {
        return Err(Error::ZeroK);
    }
    if k_max > train.len() {
        return Err(Error::KTooLarge {
            k: k_max,
            available: train.len(),
        });
    }
    let num_classes = train_labels
        .iter()
        .chain(test_labels)
        .max()
        .map_or(1, |&m| m + 1);

    let index = Index::new(train.matrix(), train.sample_ids(), SimilarityMetric::Cosine)?;
    let lists = index.search(test.matrix(), k_max, false)?;

    Ok(ks
        .iter()
        .map(|&k| {
            let predictions: Vec<usize> = lists
                .par_iter()
                .map(|l| vote(&l[..k], train_labels, num_classes, options))
                .collect();
            summarize(k, predictions, test_labels, num_classes, options)
        })
        .collect())
}

/// Highest class score wins. Ties go to the tied class whose member appears
/// first in the neighbor list, which for a non-empty list always exists.
fn vote(
    neighbors: &[(usize, f64)],
    labels: &[usize],
    num_classes: usize,
    options: &KnnOptions,
) -> usize {
    let mut scores = vec![0.0f64; num_classes];
    for &(j, sim) in neighbors {
        scores[labels[j]] += match options.voting {
            Voting::Uniform => 1.0,
            Voting::TemperatureWeighted => (sim / options.temperature).exp(),
        };
    }
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    neighbors
        .iter()
        .map(|&(j, _)| labels[j])
        .find(|&c| scores[c] == best)
        .or_else(|| scores.iter().position(|&s| s == best))
        .unwrap_or(0)
}

fn summarize(
    k: usize,
    predictions: Vec<usize>,
    truth: &[usize],
    num_classes: usize,
    options: &KnnOptions,
) -> KnnEvalResult {
    let mut hits = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for (&p, &t) in predictions.iter().zip(truth) {
        totals[t] += 1;
        if p == t {
            hits[t] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    KnnEvalResult {
        k,
        accuracy: correct as f64 / truth.len() as f64,
        correct,
        total: truth.len(),
        voting: options.voting,
        temperature: options.temperature,
        per_class_accuracy: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
        predictions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn set(ids: &[&str], m: Array2<f64>) -> EmbeddingSet {
        EmbeddingSet::new("m", ids.iter().map(|s| s.to_string()).collect(), m).unwrap()
    }

    #[test]
    fn collinear_middle_point() {
        let g = build_graph(
            &set(&["a", "b", "c"], array![[0.0], [1.0], [3.0]]),
            1,
            SimilarityMetric::Euclidean,
        )
        .unwrap();
        assert_eq!(g.neighbor_ids(1).collect::<Vec<_>>(), vec!["a"]);
        assert_eq!(g.neighbor_ids(2).collect::<Vec<_>>(), vec!["b"]);
    }

    #[test]
    fn full_k_lists_everyone_else() {
        let m = array![[1.0, 0.2], [0.3, 1.0], [-1.0, 0.1], [0.0, -1.0]];
        let g = build_graph(&set(&["a", "b", "c", "d"], m), 3, SimilarityMetric::Cosine).unwrap();
        for v in 0..4 {
            let mut n = g.neighbors(v).to_vec();
            n.sort_unstable();
            let expected: Vec<usize> = (0..4).filter(|&j| j != v).collect();
            assert_eq!(n, expected);
        }
    }

    #[test]
    fn ties_follow_id_order() {
        // b is equidistant from a and c; "a" < "c"
        let g = build_graph(
            &set(&["c", "b", "a"], array![[2.0], [1.0], [0.0]]),
            1,
            SimilarityMetric::Euclidean,
        )
        .unwrap();
        assert_eq!(g.neighbor_ids(1).collect::<Vec<_>>(), vec!["a"]);
    }

    #[test]
    fn k_limits() {
        let s = set(&["a", "b"], array![[1.0], [2.0]]);
        assert!(matches!(
            build_graph(&s, 2, SimilarityMetric::Euclidean),
            Err(Error::KTooLarge { k: 2, available: 1 })
        ));
        assert!(matches!(
            build_graph(&s, 0, SimilarityMetric::Euclidean),
            Err(Error::ZeroK)
        ));
    }

    #[test]
    fn overlap_errors() {
        let s = set(&["a", "b", "c"], array![[0.0], [1.0], [3.0]]);
        let g1 = build_graph(&s, 1, SimilarityMetric::Euclidean).unwrap();
        let g2 = build_graph(&s, 2, SimilarityMetric::Euclidean).unwrap();
        assert!(matches!(
            graph_overlap(&g1, &g2),
            Err(Error::MismatchedK(1, 2))
        ));
        let other = set(&["a", "b", "z"], array![[0.0], [1.0], [3.0]]);
        let g3 = build_graph(&other, 1, SimilarityMetric::Euclidean).unwrap();
        assert!(matches!(
            graph_overlap(&g1, &g3),
            Err(Error::MismatchedNodes)
        ));
    }

    #[test]
    fn overlap_matches_nodes_by_id() {
        let a = set(&["a", "b", "c", "d"], array![[0.0], [1.0], [3.0], [7.0]]);
        let perm = a.select(&[3, 1, 0, 2]);
        let g1 = build_graph(&a, 2, SimilarityMetric::Euclidean).unwrap();
        let g2 = build_graph(&perm, 2, SimilarityMetric::Euclidean).unwrap();
        assert_eq!(graph_overlap(&g1, &g2).unwrap(), 1.0);
    }

    #[test]
    fn uniform_tie_goes_to_nearest() {
        let train = set(&["a", "b"], array![[1.0, 0.0], [0.8, 0.6]])
            .with_labels(vec![1, 0])
            .unwrap();
        let test = set(&["q"], array![[1.0, 0.1]])
            .with_labels(vec![1])
            .unwrap();
        let opts = KnnOptions {
            k: 2,
            voting: Voting::Uniform,
            ..Default::default()
        };
        let r = knn_classify(&train, &test, &opts).unwrap();
        assert_eq!(r.predictions, vec![1]);
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn exact_match_k1() {
        let train = set(
            &["a", "b", "c"],
            array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]],
        )
        .with_labels(vec![0, 1, 2])
        .unwrap();
        let test = set(&["x"], array![[0.0, 1.0]])
            .with_labels(vec![1])
            .unwrap();
        let r = knn_classify(
            &train,
            &test,
            &KnnOptions {
                k: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.predictions, vec![1]);
    }

    #[test]
    fn knn_needs_labels_and_valid_k() {
        let train = set(&["a"], array![[1.0]]);
        let test = set(&["b"], array![[1.0]]).with_labels(vec![0]).unwrap();
        assert!(matches!(
            knn_classify(&train, &test, &KnnOptions::default()),
            Err(Error::MissingLabels(_))
        ));
        let train = train.with_labels(vec![0]).unwrap();
        assert!(matches!(
            knn_classify(
                &train,
                &test,
                &KnnOptions {
                    k: 2,
                    ..Default::default()
                }
            ),
            Err(Error::KTooLarge { .. })
        ));
    }

    #[test]
    fn sweep_skips_zero() {
        let train = set(&["a", "b"], array![[1.0, 0.0], [0.0, 1.0]])
            .with_labels(vec![0, 1])
            .unwrap();
        let test = set(&["x"], array![[1.0, 0.1]])
            .with_labels(vec![0])
            .unwrap();
        let sweep = knn_sweep(&train, &test, &[0, 1, 2], &KnnOptions::default()).unwrap();
        assert_eq!(sweep.results.len(), 2);
        assert_eq!(sweep.best_result().k, 1);
    }

    #[test]
    fn graph_csv_layout() {
        let g = build_graph(
            &set(&["a", "b", "c"], array![[0.0], [1.0], [3.0]]),
            1,
            SimilarityMetric::Euclidean,
        )
        .unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "node_id,rank,neighbor_id,similarity");
        assert_eq!(lines[1], "a,1,b,-1");
        assert_eq!(lines.len(), 4);
    }
}
