//! Uniformity and tolerance of embeddings on the unit hypersphere.
//!
//! Uniformity is `log E[exp(-t ||x - y||^2)]` over pairs of distinct samples;
//! tolerance is the mean cosine similarity over pairs of distinct samples that
//! share a class. Both require L2-normalized inputs.

use ndarray::ArrayView1;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingSet, LabelSet};
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_T: f64 = 2.0;
pub const DEFAULT_EXACT_THRESHOLD: usize = 5_000;
pub const DEFAULT_PAIR_BUDGET: u64 = 10_000_000;

/// Rows per task in the exact pair loop.
const ROW_BLOCK: usize = 64;
/// Sampled pairs per independent random stream in the Monte-Carlo path.
const PAIRS_PER_STREAM: u64 = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryScore {
    pub uniformity: Option<f64>,
    pub tolerance: Option<f64>,
    pub t: f64,
    /// Pairs that entered the uniformity estimate.
    pub n_pairs_evaluated: u64,
    /// `true` when every pair was enumerated, `false` for a Monte-Carlo estimate.
    pub exact: bool,
    /// Standard error of a Monte-Carlo uniformity estimate (delta method).
    pub std_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniformityOptions {
    pub t: f64,
    pub pair_budget: u64,
    /// Largest N for which all pairs are enumerated.
    pub exact_threshold: usize,
    /// Enumerate all pairs regardless of N.
    pub force_exact: bool,
    /// Count `x == y` pairs, as in the iid-expectation reading.
    pub include_self_pairs: bool,
    pub seed: u64,
}

impl Default for UniformityOptions {
    fn default() -> Self {
        Self {
            t: DEFAULT_T,
            pair_budget: DEFAULT_PAIR_BUDGET,
            exact_threshold: DEFAULT_EXACT_THRESHOLD,
            force_exact: false,
            include_self_pairs: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ToleranceOptions {
    /// Average `<x_i, x_j> * [l_i == l_j]` over all pairs instead of only
    /// over same-class pairs.
    pub unconditional: bool,
    pub include_self_pairs: bool,
}

/// Running `log(sum exp(a_i))` kept as a shifted sum so that the common case
/// of equal exponents stays exact.
#[derive(Debug, Clone, Copy)]
struct LogSum {
    max: f64,
    scaled: f64,
    // second moment of exp(a - max), for the Monte-Carlo standard error
    scaled_sq: f64,
}

impl LogSum {
    const EMPTY: LogSum = LogSum {
        max: f64::NEG_INFINITY,
        scaled: 0.0,
        scaled_sq: 0.0,
    };

    fn push(&mut self, a: f64) {
        if a > self.max {
            let r = (self.max - a).exp();
            self.scaled *= r;
            self.scaled_sq *= r * r;
            self.max = a;
        }
        let e = (a - self.max).exp();
        self.scaled += e;
        self.scaled_sq += e * e;
    }

    fn merge(self, other: LogSum) -> LogSum {
        if other.max == f64::NEG_INFINITY {
            return self;
        }
        if self.max == f64::NEG_INFINITY {
            return other;
        }
        let max = self.max.max(other.max);
        let (ra, rb) = ((self.max - max).exp(), (other.max - max).exp());
        LogSum {
            max,
            scaled: self.scaled * ra + other.scaled * rb,
            scaled_sq: self.scaled_sq * ra * ra + other.scaled_sq * rb * rb,
        }
    }

    /// `log(mean)` over `count` terms.
    fn log_mean(&self, count: f64) -> f64 {
        let mean = self.scaled / count;
        if mean == 1.0 {
            self.max
        } else {
            self.max + mean.ln()
        }
    }
}

fn squared_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn require_normalized(set: &EmbeddingSet) -> Result<()> {
    if set.is_normalized() {
        Ok(())
    } else {
        Err(Error::NotNormalized(set.model_tag().to_string()))
    }
}

pub fn uniformity(set: &EmbeddingSet, options: &UniformityOptions) -> Result<GeometryScore> {
    require_normalized(set)?;
    let n = set.len();
    if n < 2 {
        return Err(Error::TooFewSamples {
            required: 2,
            found: n,
        });
    }
    if !(options.t > 0.0 && options.t.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "t must be positive, got {}",
            options.t
        )));
    }
    if options.force_exact || n <= options.exact_threshold {
        Ok(uniformity_exact(set, options))
    } else {
        uniformity_monte_carlo(set, options)
    }
}

/// Enumerates every ordered pair. Ordered pairs `(i, j)` and `(j, i)` carry
/// the same term, so the mean over ordered pairs equals the mean over
/// unordered ones and only `i < j` is visited.
fn uniformity_exact(set: &EmbeddingSet, options: &UniformityOptions) -> GeometryScore {
    let n = set.len();
    let t = options.t;
    let blocks: Vec<LogSum> = (0..n)
        .step_by(ROW_BLOCK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let mut acc = LogSum::EMPTY;
            for i in start..(start + ROW_BLOCK).min(n) {
                let xi = set.row(i);
                for j in (i + 1)..n {
                    acc.push(-t * squared_distance(xi, set.row(j)));
                }
            }
            acc
        })
        .collect();
    let mut total = blocks.into_iter().fold(LogSum::EMPTY, LogSum::merge);
    // each unordered pair stands for two ordered ones
    total.scaled *= 2.0;
    total.scaled_sq *= 2.0;
    let n = n as u64;
    let mut pairs = n * (n - 1);
    if options.include_self_pairs {
        for _ in 0..n {
            total.push(0.0);
        }
        pairs = n * n;
    }
    GeometryScore {
        uniformity: Some(total.log_mean(pairs as f64)),
        tolerance: None,
        t,
        n_pairs_evaluated: pairs,
        exact: true,
        std_error: None,
    }
}

/// Uniform ordered pairs drawn from independent ChaCha streams, one stream per
/// fixed-size chunk of the budget, so the estimate does not depend on the
/// thread count.
fn uniformity_monte_carlo(
    set: &EmbeddingSet,
    options: &UniformityOptions,
) -> Result<GeometryScore> {
    let budget = options.pair_budget;
    if budget == 0 {
        return Err(Error::InvalidParameter(
            "pair_budget must be positive".into(),
        ));
    }
    let n = set.len();
    let t = options.t;
    let streams = budget.div_ceil(PAIRS_PER_STREAM);
    let parts: Vec<LogSum> = (0..streams)
        .into_par_iter()
        .map(|s| {
            let mut rng = rng::substream(options.seed, s);
            let count = PAIRS_PER_STREAM.min(budget - s * PAIRS_PER_STREAM);
            let mut acc = LogSum::EMPTY;
            for _ in 0..count {
                let i = rng::index(&mut rng, n);
                let j = if options.include_self_pairs {
                    rng::index(&mut rng, n)
                } else {
                    let j = rng.random_range(0..(n as u64 - 1)) as usize;
                    if j >= i {
                        j + 1
                    } else {
                        j
                    }
                };
                acc.push(-t * squared_distance(set.row(i), set.row(j)));
            }
            acc
        })
        .collect();
    let total = parts.into_iter().fold(LogSum::EMPTY, LogSum::merge);
    let m = budget as f64;
    let mean = total.scaled / m;
    let var = (total.scaled_sq / m - mean * mean).max(0.0) * m / (m - 1.0).max(1.0);
    // se of log(mean) ~ se(mean) / mean; the shift by `max` cancels in the ratio
    let std_error = (var / m).sqrt() / mean;
    Ok(GeometryScore {
        uniformity: Some(total.log_mean(m)),
        tolerance: None,
        t,
        n_pairs_evaluated: budget,
        exact: false,
        std_error: Some(std_error),
    })
}

/// Mean cosine similarity over pairs of distinct samples sharing a class.
///
/// Uses `sum_{i != j in c} <x_i, x_j> = ||sum_{i in c} x_i||^2 - sum_{i in c} ||x_i||^2`,
/// which is linear in N.
pub fn tolerance(set: &EmbeddingSet, labels: &LabelSet, options: ToleranceOptions) -> Result<f64> {
    require_normalized(set)?;
    labels.check_matches(set.sample_ids())?;
    let n = set.len();
    let d = set.dim();
    let classes = labels.num_classes();
    let mut sums = vec![vec![0.0f64; d]; classes];
    let mut sq_norms = vec![0.0f64; classes];
    let mut counts = vec![0u64; classes];
    for (i, &c) in labels.labels().iter().enumerate() {
        let row = set.row(i);
        for (s, v) in sums[c].iter_mut().zip(row.iter()) {
            *s += v;
        }
        sq_norms[c] += row.dot(&row);
        counts[c] += 1;
    }
    let mut dot_sum = 0.0;
    let mut pairs = 0u64;
    for c in 0..classes {
        let sum_sq: f64 = sums[c].iter().map(|v| v * v).sum();
        if options.include_self_pairs {
            dot_sum += sum_sq;
            pairs += counts[c] * counts[c];
        } else {
            dot_sum += sum_sq - sq_norms[c];
            pairs += counts[c] * counts[c].saturating_sub(1);
        }
    }
    if pairs == 0 {
        return Err(Error::NoPositivePairs);
    }
    let n = n as u64;
    let denom = match (options.unconditional, options.include_self_pairs) {
        (false, _) => pairs,
        (true, false) => n * (n - 1),
        (true, true) => n * n,
    };
    Ok(dot_sum / denom as f64)
}

/// Uniformity, plus tolerance when labels are given.
pub fn geometry(
    set: &EmbeddingSet,
    labels: Option<&LabelSet>,
    uniformity_options: &UniformityOptions,
    tolerance_options: ToleranceOptions,
) -> Result<GeometryScore> {
    let mut score = uniformity(set, uniformity_options)?;
    if let Some(labels) = labels {
        score.tolerance = Some(tolerance(set, labels, tolerance_options)?);
    }
    Ok(score)
}
