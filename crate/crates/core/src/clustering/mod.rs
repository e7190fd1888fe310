//! k-means clustering (k-means++ seeding, Lloyd or mini-batch updates) and
//! cluster-to-class accuracy.

pub mod assignment;

use std::io::Write;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingSet, LabelSet};
use crate::error::{Error, Result};
use crate::rng::{self, Prng};

pub const DEFAULT_N_INIT: usize = 10;
pub const DEFAULT_BATCH: usize = 16_384;
pub const DEFAULT_MAX_ITER: usize = 300;
/// `Auto` switches to mini-batch above this many samples.
pub const MINIBATCH_THRESHOLD: usize = 100_000;

const ROW_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KMeansMode {
    #[default]
    Auto,
    Lloyd,
    Minibatch,
}

impl std::str::FromStr for KMeansMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(KMeansMode::Auto),
            "lloyd" | "full" => Ok(KMeansMode::Lloyd),
            "minibatch" | "mini-batch" => Ok(KMeansMode::Minibatch),
            other => Err(Error::InvalidParameter(format!(
                "unknown k-means mode {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansOptions {
    pub k: usize,
    pub n_init: usize,
    pub mode: KMeansMode,
    pub batch: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl KMeansOptions {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            n_init: DEFAULT_N_INIT,
            mode: KMeansMode::Auto,
            batch: DEFAULT_BATCH,
            max_iter: DEFAULT_MAX_ITER,
            seed: 0,
        }
    }
}

/// One seeded k-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansRun {
    pub assignments: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    /// Inertia after each assignment step. Mini-batch runs only record the
    /// final full-data inertia.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub k: usize,
    pub sample_ids: Vec<String>,
    pub assignments: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    pub n_init_runs: usize,
    pub best_run_index: usize,
    pub seed: u64,
    pub mode: KMeansMode,
    /// Final inertia of every run, in run order.
    pub run_inertias: Vec<f64>,
    pub iterations: usize,
}

impl ClusterResult {
    /// `id,cluster` rows.
    pub fn write_assignments_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io_err = |e| Error::io("<assignments csv>", e);
        writeln!(w, "id,cluster").map_err(io_err)?;
        for (id, c) in self.sample_ids.iter().zip(&self.assignments) {
            writeln!(w, "{id},{c}").map_err(io_err)?;
        }
        Ok(())
    }
}

/// Runs `n_init` seeded k-means runs (run `r` uses `seed + r`) and keeps the
/// one with the lowest full-data inertia; ties keep the earlier run.
pub fn kmeans(set: &EmbeddingSet, options: &KMeansOptions) -> Result<ClusterResult> {
    let n = set.len();
    let k = options.k;
    if k == 0 {
        return Err(Error::ZeroK);
    }
    if k > n {
        return Err(Error::KTooLarge { k, available: n });
    }
    if options.n_init == 0 {
        return Err(Error::InvalidParameter("n_init must be positive".into()));
    }
    let mode = match options.mode {
        KMeansMode::Auto if n > MINIBATCH_THRESHOLD => KMeansMode::Minibatch,
        KMeansMode::Auto => KMeansMode::Lloyd,
        m => m,
    };
    if mode == KMeansMode::Minibatch && options.batch < k {
        return Err(Error::BatchTooSmall {
            batch: options.batch,
            k,
        });
    }
    let data = set.matrix();
    let runs: Vec<KMeansRun> = (0..options.n_init)
        .into_par_iter()
        .map(|r| {
            let seed = options.seed.wrapping_add(r as u64);
            match mode {
                KMeansMode::Minibatch => minibatch(data, k, options.batch, seed),
                _ => lloyd(data, k, options.max_iter, seed),
            }
        })
        .collect();
    let best = (0..runs.len())
        .min_by(|&a, &b| runs[a].inertia.total_cmp(&runs[b].inertia).then(a.cmp(&b)))
        .expect("n_init >= 1");
    let run_inertias = runs.iter().map(|r| r.inertia).collect();
    let run = runs.into_iter().nth(best).expect("index in range");
    Ok(ClusterResult {
        k,
        sample_ids: set.sample_ids().to_vec(),
        assignments: run.assignments,
        centroids: run.centroids,
        inertia: run.inertia,
        n_init_runs: options.n_init,
        best_run_index: best,
        seed: options.seed,
        mode,
        run_inertias,
        iterations: run.iterations,
    })
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: first centre uniform, each further centre drawn with
/// probability proportional to its squared distance to the nearest chosen
/// centre. If every remaining distance is zero a not-yet-chosen point is
/// taken uniformly.
pub fn kmeans_plus_plus(data: ArrayView2<'_, f64>, k: usize, rng: &mut Prng) -> Array2<f64> {
    let n = data.nrows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng::index(rng, n));
    let first = data.row(chosen[0]);
    let mut d2: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| sq_dist(data.row(i), first))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total has a positive weight")
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng::index(rng, free.len())]
        };
        chosen.push(pick);
        let c = data.row(pick);
        d2.par_iter_mut()
            .enumerate()
            .for_each(|(i, d)| *d = d.min(sq_dist(data.row(i), c)));
    }
    data.select(Axis(0), &chosen)
}

/// Nearest centroid and exact squared distance for every row.
/// Candidates are ranked through `|x|^2 - 2 x.c + |c|^2` with one matrix
/// product per chunk; the distance to the winner is then recomputed directly.
fn assign(data: ArrayView2<'_, f64>, centroids: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    let c_norms: Array1<f64> = centroids.rows().into_iter().map(|c| c.dot(&c)).collect();
    let starts: Vec<usize> = (0..data.nrows()).step_by(ROW_CHUNK).collect();
    let parts: Vec<(Vec<usize>, Vec<f64>)> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + ROW_CHUNK).min(data.nrows());
            let block = data.slice(s![start..end, ..]);
            let dots = block.dot(&centroids.t());
            let mut labels = Vec::with_capacity(end - start);
            let mut dists = Vec::with_capacity(end - start);
            for (r, row) in dots.rows().into_iter().enumerate() {
                let mut best = 0;
                let mut best_score = f64::INFINITY;
                for (c, &dot) in row.iter().enumerate() {
                    let score = c_norms[c] - 2.0 * dot;
                    if score < best_score {
                        best_score = score;
                        best = c;
                    }
                }
                labels.push(best);
                dists.push(sq_dist(block.row(r), centroids.row(best)));
            }
            (labels, dists)
        })
        .collect();
    let mut labels = Vec::with_capacity(data.nrows());
    let mut dists = Vec::with_capacity(data.nrows());
    for (l, d) in parts {
        labels.extend(l);
        dists.extend(d);
    }
    (labels, dists)
}

/// Sum in fixed-size chunks, combined left to right.
fn stable_sum(values: &[f64]) -> f64 {
    values
        .chunks(ROW_CHUNK)
        .map(|c| c.iter().sum::<f64>())
        .fold(0.0, |a, b| a + b)
}

/// Moves each empty cluster's centroid onto the point currently farthest from
/// its own centroid (lowest index among ties; each point used once).
fn reseed_empty(
    data: ArrayView2<'_, f64>,
    centroids: &mut Array2<f64>,
    counts: &[usize],
    dists: &mut [f64],
) -> bool {
    let mut moved = false;
    for (c, &count) in counts.iter().enumerate() {
        if count > 0 {
            continue;
        }
        let far = (0..dists.len())
            .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
            .expect("non-empty data");
        centroids.row_mut(c).assign(&data.row(far));
        dists[far] = 0.0;
        moved = true;
    }
    moved
}

fn cluster_means(
    data: ArrayView2<'_, f64>,
    labels: &[usize],
    centroids: &mut Array2<f64>,
) -> Vec<usize> {
    let k = centroids.nrows();
    let mut sums = Array2::<f64>::zeros((k, data.ncols()));
    let mut counts = vec![0usize; k];
    for (x, &c) in data.axis_iter(Axis(0)).zip(labels) {
        let mut row = sums.row_mut(c);
        row += &x;
        counts[c] += 1;
    }
    for (c, &count) in counts.iter().enumerate() {
        if count > 0 {
            let mean = &sums.row(c) / count as f64;
            centroids.row_mut(c).assign(&mean);
        }
    }
    counts
}

/// Full-batch Lloyd iterations from a k-means++ start. Stops when the
/// assignment no longer changes or after `max_iter` assignment steps.
pub fn lloyd(data: ArrayView2<'_, f64>, k: usize, max_iter: usize, seed: u64) -> KMeansRun {
    let mut rng = rng::seeded(seed);
    let mut centroids = kmeans_plus_plus(data, k, &mut rng);
    let mut previous: Option<Vec<usize>> = None;
    let mut trace = Vec::new();
    let max_iter = max_iter.max(1);
    loop {
        let (labels, mut dists) = assign(data, &centroids);
        let inertia = stable_sum(&dists);
        trace.push(inertia);
        let converged = previous.as_ref() == Some(&labels);
        if converged || trace.len() >= max_iter {
            return KMeansRun {
                assignments: labels,
                centroids,
                inertia,
                iterations: trace.len(),
                trace,
                converged,
            };
        }
        let counts = cluster_means(data, &labels, &mut centroids);
        if reseed_empty(data, &mut centroids, &counts, &mut dists) {
            // a relocated centroid invalidates the convergence test
            previous = None;
        } else {
            previous = Some(labels);
        }
    }
}

/// Mini-batch k-means: `ceil(10 N / batch)` steps, each drawing `batch`
/// distinct rows and moving every winning centroid towards its point with
/// step `1 / (points seen by that centroid)`. Ends with a full-data
/// assignment (empty clusters re-seeded) whose inertia is exact.
pub fn minibatch(data: ArrayView2<'_, f64>, k: usize, batch: usize, seed: u64) -> KMeansRun {
    let n = data.nrows();
    let mut rng = rng::seeded(seed);
    let mut centroids = kmeans_plus_plus(data, k, &mut rng);
    let batch = batch.min(n);
    let steps = (10 * n).div_ceil(batch);
    let mut counts = vec![0u64; k];
    let mut pool: Vec<usize> = (0..n).collect();
    for _ in 0..steps {
        for i in 0..batch {
            let j = i + rng::index(&mut rng, n - i);
            pool.swap(i, j);
        }
        let idx = &pool[..batch];
        let rows = data.select(Axis(0), idx);
        let (labels, _) = assign(rows.view(), &centroids);
        for (x, &c) in rows.axis_iter(Axis(0)).zip(&labels) {
            counts[c] += 1;
            let eta = 1.0 / counts[c] as f64;
            let mut cent = centroids.row_mut(c);
            cent.zip_mut_with(&x, |m, &v| *m += eta * (v - *m));
        }
    }
    let (mut labels, mut dists) = assign(data, &centroids);
    let mut sizes = vec![0usize; k];
    for &c in &labels {
        sizes[c] += 1;
    }
    if reseed_empty(data, &mut centroids, &sizes, &mut dists) {
        (labels, dists) = assign(data, &centroids);
    }
    let inertia = stable_sum(&dists);
    KMeansRun {
        assignments: labels,
        centroids,
        inertia,
        trace: vec![inertia],
        iterations: steps,
        converged: true,
    }
}

/// `sum_i ||x_i - c_{a(i)}||^2`, computed directly.
pub fn inertia(data: ArrayView2<'_, f64>, centroids: &Array2<f64>, assignments: &[usize]) -> f64 {
    data.axis_iter(Axis(0))
        .zip(assignments)
        .map(|(x, &c)| sq_dist(x, centroids.row(c)))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    Hungarian,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAccuracy {
    pub mode: MatchMode,
    /// Class assigned to each cluster.
    pub mapping: Vec<usize>,
    pub accuracy: f64,
    pub correct: u64,
    pub total: u64,
    /// `contingency[cluster][class]` sample counts.
    pub contingency: Vec<Vec<u64>>,
}

impl ClusterAccuracy {
    /// Contingency table as CSV with a `cluster` column and one column per class.
    pub fn contingency_csv(&self) -> String {
        let classes = self.contingency.first().map_or(0, Vec::len);
        let mut out = String::from("cluster");
        for c in 0..classes {
            out.push_str(&format!(",class_{c}"));
        }
        out.push('\n');
        for (k, row) in self.contingency.iter().enumerate() {
            out.push_str(&k.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn contingency(
    assignments: &[usize],
    k: usize,
    labels: &[usize],
    num_classes: usize,
) -> Vec<Vec<u64>> {
    let mut table = vec![vec![0u64; num_classes]; k];
    for (&c, &l) in assignments.iter().zip(labels) {
        table[c][l] += 1;
    }
    table
}

fn accuracy_from(mode: MatchMode, table: &[Vec<u64>], mapping: Vec<usize>) -> ClusterAccuracy {
    let correct: u64 = mapping.iter().enumerate().map(|(k, &c)| table[k][c]).sum();
    let total: u64 = table.iter().flatten().sum();
    ClusterAccuracy {
        mode,
        mapping,
        accuracy: if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        },
        correct,
        total,
        contingency: table.to_vec(),
    }
}

/// One-to-one cluster→class matching that maximizes matched samples.
pub fn hungarian_from_contingency(table: &[Vec<u64>]) -> Result<ClusterAccuracy> {
    let k = table.len();
    let classes = table.first().map_or(0, Vec::len);
    if k != classes {
        return Err(Error::KClassMismatch {
            clusters: k,
            classes,
        });
    }
    let weights: Vec<Vec<f64>> = table
        .iter()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect();
    let mapping = assignment::max_weight_assignment(&weights);
    Ok(accuracy_from(MatchMode::Hungarian, table, mapping))
}

/// Each cluster goes to its majority class (lowest class index on ties).
pub fn greedy_from_contingency(table: &[Vec<u64>]) -> ClusterAccuracy {
    let mapping = table
        .iter()
        .map(|row| {
            let best = row.iter().copied().max().unwrap_or(0);
            row.iter().position(|&v| v == best).unwrap_or(0)
        })
        .collect();
    accuracy_from(MatchMode::Greedy, table, mapping)
}

fn table_for(result: &ClusterResult, labels: &LabelSet) -> Result<Vec<Vec<u64>>> {
    labels.check_matches(&result.sample_ids)?;
    Ok(contingency(
        &result.assignments,
        result.k,
        labels.labels(),
        labels.num_classes(),
    ))
}

pub fn hungarian_accuracy(result: &ClusterResult, labels: &LabelSet) -> Result<ClusterAccuracy> {
    if result.k != labels.num_classes() {
        return Err(Error::KClassMismatch {
            clusters: result.k,
            classes: labels.num_classes(),
        });
    }
    hungarian_from_contingency(&table_for(result, labels)?)
}

pub fn greedy_accuracy(result: &ClusterResult, labels: &LabelSet) -> Result<ClusterAccuracy> {
    if result.k < labels.num_classes() {
        log::warn!(
            "greedy matching with fewer clusters ({}) than classes ({})",
            result.k,
            labels.num_classes()
        );
    }
    Ok(greedy_from_contingency(&table_for(result, labels)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn set(m: Array2<f64>) -> EmbeddingSet {
        EmbeddingSet::from_matrix("m", m).unwrap()
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let s = set(array![[0.0, 1.0], [2.0, 3.0], [5.0, -1.0], [0.5, 0.5]]);
        let r = kmeans(&s, &KMeansOptions::new(4)).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut a = r.assignments.clone();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2, 3]);
    }

    #[test]
    fn k_one_is_the_mean() {
        let s = set(array![[0.0, 0.0], [2.0, 0.0], [4.0, 3.0]]);
        let r = kmeans(&s, &KMeansOptions::new(1)).unwrap();
        assert!((r.centroids[[0, 0]] - 2.0).abs() < 1e-12);
        assert!((r.centroids[[0, 1]] - 1.0).abs() < 1e-12);
        // 4+1 + 0+1 + 4+4
        assert!((r.inertia - 14.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let s = set(array![[0.0], [1.0]]);
        assert!(matches!(
            kmeans(&s, &KMeansOptions::new(3)),
            Err(Error::KTooLarge { .. })
        ));
        let opts = KMeansOptions {
            mode: KMeansMode::Minibatch,
            batch: 1,
            ..KMeansOptions::new(2)
        };
        assert!(matches!(
            kmeans(&s, &opts),
            Err(Error::BatchTooSmall { .. })
        ));
    }

    #[test]
    fn duplicate_points_still_give_k_centroids() {
        let s = set(array![[1.0], [1.0], [1.0], [1.0]]);
        let r = kmeans(&s, &KMeansOptions::new(3)).unwrap();
        assert_eq!(r.centroids.nrows(), 3);
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn minibatch_on_blobs() {
        let m = Array2::from_shape_fn((40, 2), |(i, j)| {
            let base = if i < 20 { -5.0 } else { 5.0 };
            base + 0.01 * ((i * 7 + j * 3) % 5) as f64
        });
        let opts = KMeansOptions {
            mode: KMeansMode::Minibatch,
            batch: 8,
            n_init: 3,
            ..KMeansOptions::new(2)
        };
        let r = kmeans(&set(m.clone()), &opts).unwrap();
        assert_eq!(r.mode, KMeansMode::Minibatch);
        let direct = inertia(m.view(), &r.centroids, &r.assignments);
        assert!((direct - r.inertia).abs() <= 1e-9 * direct.max(1.0));
        assert!(r.assignments[..20].iter().all(|&a| a == r.assignments[0]));
        assert!(r.assignments[20..].iter().all(|&a| a != r.assignments[0]));
    }

    #[test]
    fn greedy_example() {
        let acc = greedy_from_contingency(&[vec![3, 1], vec![2, 2]]);
        assert_eq!(acc.mapping, vec![0, 0]);
        assert_eq!(acc.accuracy, 0.625);
    }

    #[test]
    fn hungarian_finds_swap() {
        let acc = hungarian_from_contingency(&[vec![0, 5], vec![5, 0]]).unwrap();
        assert_eq!(acc.mapping, vec![1, 0]);
        assert_eq!(acc.accuracy, 1.0);
        assert!(matches!(
            hungarian_from_contingency(&[vec![1, 2, 3], vec![1, 2, 3]]),
            Err(Error::KClassMismatch { .. })
        ));
    }

    #[test]
    fn greedy_overclustering_pure() {
        let acc = greedy_from_contingency(&[vec![4, 0], vec![0, 3], vec![2, 0], vec![0, 1]]);
        assert_eq!(acc.accuracy, 1.0);
        assert_eq!(acc.mapping, vec![0, 1, 0, 1]);
    }

    #[test]
    fn contingency_csv_layout() {
        let acc = greedy_from_contingency(&[vec![3, 1], vec![2, 2]]);
        assert_eq!(
            acc.contingency_csv(),
            "cluster,class_0,class_1\n0,3,1\n1,2,2\n"
        );
    }
}
