//! Linear centered kernel alignment.
//!
//! With linear kernels `K = X X^T` and `L = Y Y^T`, and `H` the centering
//! matrix, `tr(KHLH) = ||Y_c^T X_c||_F^2` where `X_c`, `Y_c` are the
//! column-centered feature matrices. CKA is therefore computable either from
//! `D x D` feature cross-products or from `N x N` centered Gram matrices; the
//! cheaper route is chosen from the shapes. The `1/(n-1)^2` HSIC factor
//! appears in numerator and denominator and is dropped.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{align, check_aligned, EmbeddingSet};
use crate::error::{Error, Result};
use crate::report::PairwiseReport;
use crate::rng;

/// Subsample size applied to larger inputs by [`cka_pairwise`].
pub const DEFAULT_SUBSAMPLE: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CkaScore {
    pub value: f64,
    pub n: usize,
    pub d_x: usize,
    pub d_y: usize,
    pub subsample_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CkaStrategy {
    /// Gram route when `max(d_x, d_y) >= n`, feature route otherwise.
    #[default]
    Auto,
    Feature,
    Gram,
}

fn centered(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("n >= 1");
    &x - &mean
}

fn frobenius_sq(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Total order on matrices used to fix the argument order, so that
/// `cka(a, b)` and `cka(b, a)` run the identical computation.
fn matrix_order(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Ordering {
    a.dim().cmp(&b.dim()).then_with(|| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Linear CKA between two matrices with the same number of rows.
pub fn linear_cka_matrices(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    strategy: CkaStrategy,
) -> Result<f64> {
    let n = x.nrows();
    if y.nrows() != n {
        return Err(Error::NotAligned(format!(
            "{} rows vs {} rows",
            n,
            y.nrows()
        )));
    }
    if n < 3 {
        return Err(Error::TooFewSamples {
            required: 3,
            found: n,
        });
    }
    let (x, y) = match matrix_order(x, y) {
        Ordering::Greater => (y, x),
        _ => (x, y),
    };
    let xc = centered(x);
    let yc = centered(y);
    for (name, raw, c) in [("first", &x, &xc), ("second", &y, &yc)] {
        let scale = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let spread = frobenius_sq(c).sqrt();
        if spread == 0.0 || spread <= 1e-12 * scale {
            return Err(Error::DegenerateInput(format!(
                "{name} matrix is constant across samples"
            )));
        }
    }
    let use_gram = match strategy {
        CkaStrategy::Auto => x.ncols().max(y.ncols()) >= n,
        CkaStrategy::Feature => false,
        CkaStrategy::Gram => true,
    };
    let (hsic_xy, hsic_xx, hsic_yy) = if use_gram {
        let k = xc.dot(&xc.t());
        let l = yc.dot(&yc.t());
        let xy: f64 = k.iter().zip(l.iter()).map(|(a, b)| a * b).sum();
        (xy, frobenius_sq(&k), frobenius_sq(&l))
    } else {
        let cross = xc.t().dot(&yc);
        let xx = xc.t().dot(&xc);
        let yy = yc.t().dot(&yc);
        (frobenius_sq(&cross), frobenius_sq(&xx), frobenius_sq(&yy))
    };
    Ok(hsic_xy / (hsic_xx.sqrt() * hsic_yy.sqrt()))
}

/// Linear CKA between two aligned sets on their raw (un-normalized) rows.
pub fn linear_cka(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<CkaScore> {
    linear_cka_with(a, b, CkaStrategy::Auto)
}

pub fn linear_cka_with(
    a: &EmbeddingSet,
    b: &EmbeddingSet,
    strategy: CkaStrategy,
) -> Result<CkaScore> {
    check_aligned(a, b)?;
    let value = linear_cka_matrices(a.matrix(), b.matrix(), strategy)?;
    Ok(CkaScore {
        value,
        n: a.len(),
        d_x: a.dim(),
        d_y: b.dim(),
        subsample_seed: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CkaOptions {
    /// Inputs with more aligned rows than this are subsampled to this size.
    /// One sample is drawn and shared by every set.
    pub subsample: Option<usize>,
    pub seed: u64,
    /// L2-normalize rows before computing CKA.
    pub normalize_rows: bool,
    pub strategy: CkaStrategy,
}

impl Default for CkaOptions {
    fn default() -> Self {
        Self {
            subsample: Some(DEFAULT_SUBSAMPLE),
            seed: 0,
            normalize_rows: false,
            strategy: CkaStrategy::Auto,
        }
    }
}

/// Aligns, optionally normalizes, and applies the shared subsample. Returns
/// the prepared sets and the seed if a subsample was drawn.
fn prepare(
    sets: &[EmbeddingSet],
    options: &CkaOptions,
) -> Result<(Vec<EmbeddingSet>, Option<u64>)> {
    let mut sets = align(sets, None)?.sets;
    let n = sets[0].len();
    let mut seed_used = None;
    if let Some(limit) = options.subsample.filter(|&m| m < n) {
        let idx = rng::sample_indices(n, limit, options.seed);
        sets = sets.iter().map(|s| s.select(&idx)).collect();
        seed_used = Some(options.seed);
    }
    if options.normalize_rows {
        sets = sets
            .iter()
            .map(EmbeddingSet::l2_normalize)
            .collect::<Result<_>>()?;
    }
    Ok((sets, seed_used))
}

/// CKA for every pair of sets, over the sample ids they share.
pub fn cka_pairwise(sets: &[EmbeddingSet], options: &CkaOptions) -> Result<PairwiseReport> {
    if sets.len() < 2 {
        return Err(Error::TooFewInputs {
            required: 2,
            found: sets.len(),
        });
    }
    let (sets, seed_used) = prepare(sets, options)?;
    let m = sets.len();
    let pairs: Vec<(usize, usize)> = (0..m)
        .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
        .collect();
    let values = pairs
        .par_iter()
        .map(|&(i, j)| linear_cka_matrices(sets[i].matrix(), sets[j].matrix(), options.strategy))
        .collect::<Result<Vec<_>>>()?;
    let mut matrix = Array2::eye(m);
    for (&(i, j), v) in pairs.iter().zip(values) {
        matrix[[i, j]] = v;
        matrix[[j, i]] = v;
    }
    let mut report = PairwiseReport::new(
        "linear_cka",
        sets.iter().map(|s| s.model_tag().to_string()).collect(),
        matrix,
    );
    report.set_param("n", sets[0].len());
    report.set_param("normalize_rows", options.normalize_rows);
    if let Some(seed) = seed_used {
        report.set_param("subsample_seed", seed);
        report.set_param("subsample_n", sets[0].len());
    }
    Ok(report)
}

/// CKA between embeddings of the same images before and after an
/// augmentation. 1.0 means the augmentation left the representation
/// unchanged up to rotation and scale.
pub fn augmentation_invariance(clean: &EmbeddingSet, augmented: &EmbeddingSet) -> Result<CkaScore> {
    if clean.model_tag() != augmented.model_tag() {
        log::warn!(
            "invariance between different models {:?} and {:?}",
            clean.model_tag(),
            augmented.model_tag()
        );
    }
    linear_cka(clean, augmented)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn set(tag: &str, m: Array2<f64>) -> EmbeddingSet {
        EmbeddingSet::from_matrix(tag, m).unwrap()
    }

    #[test]
    fn self_similarity_is_one() {
        let x = set("x", array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.5], [2.0, 2.0]]);
        let v = linear_cka(&x, &x).unwrap().value;
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scaled_copy_is_one() {
        let x = set("x", array![[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]]);
        let y = set("y", array![[2.0, 0.0], [0.0, 2.0], [-2.0, -2.0]]);
        assert!((linear_cka(&x, &y).unwrap().value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn needs_three_rows_and_alignment() {
        let x = set("x", array![[1.0], [2.0]]);
        assert!(matches!(
            linear_cka(&x, &x),
            Err(Error::TooFewSamples { .. })
        ));
        let a = set("a", array![[1.0], [2.0], [3.0]]);
        let b = set("b", array![[1.0], [2.0], [3.0], [4.0]]);
        assert!(matches!(linear_cka(&a, &b), Err(Error::NotAligned(_))));
    }

    #[test]
    fn constant_input_is_degenerate() {
        let a = set("a", array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]);
        let b = set("b", array![[1.0], [2.0], [3.0]]);
        assert!(matches!(linear_cka(&a, &b), Err(Error::DegenerateInput(_))));
        assert!(matches!(linear_cka(&b, &a), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn pairwise_on_identical_sets() {
        let x = set("x", array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]]);
        let r = cka_pairwise(&[x.clone(), x.with_model_tag("y")], &CkaOptions::default()).unwrap();
        for v in r.matrix().iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert_eq!(r.model_tags(), &["x".to_string(), "y".to_string()]);
    }

    #[test]
    fn pairwise_needs_two_sets() {
        let x = set("x", array![[1.0], [2.0], [3.0]]);
        assert!(cka_pairwise(&[x], &CkaOptions::default()).is_err());
    }
}
