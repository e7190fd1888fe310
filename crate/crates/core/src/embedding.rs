//! Embedding matrices, label vectors and the operations that prepare them
//! for analysis: normalisation, alignment by sample id, and subsampling.
//!
//! All values are held as `f64` regardless of the width they were stored
//! with on disk. Sets are immutable once built; every operation returns a
//! new set.

use std::collections::{BTreeSet, HashMap, HashSet};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Row norms must lie within this distance of 1 for a set to count as
/// normalized.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

/// Floating-point width the matrix was stored with. Writers use it so that a
/// load/save cycle reproduces the original bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    model_tag: String,
    sample_ids: Vec<String>,
    matrix: Array2<f64>,
    labels: Option<Vec<usize>>,
    normalized: bool,
    precision: Precision,
}

impl EmbeddingSet {
    /// Builds a set, validating shape, finiteness and id uniqueness.
    pub fn new(
        model_tag: impl Into<String>,
        sample_ids: Vec<String>,
        matrix: Array2<f64>,
    ) -> Result<Self> {
        let (n, d) = matrix.dim();
        if n == 0 {
            return Err(Error::NoRows);
        }
        if d == 0 {
            return Err(Error::ZeroDimension);
        }
        if sample_ids.len() != n {
            return Err(Error::LengthMismatch {
                what: "sample ids",
                expected: n,
                found: sample_ids.len(),
            });
        }
        check_finite(matrix.view())?;
        check_unique(&sample_ids)?;
        Ok(Self {
            model_tag: model_tag.into(),
            sample_ids,
            matrix,
            labels: None,
            normalized: false,
            precision: Precision::F64,
        })
    }

    /// Builds a set whose ids are the row indices `"0".."N-1"`.
    pub fn from_matrix(model_tag: impl Into<String>, matrix: Array2<f64>) -> Result<Self> {
        let ids = default_ids(matrix.nrows());
        Self::new(model_tag, ids, matrix)
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::LengthMismatch {
                what: "labels",
                expected: self.len(),
                found: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Attaches labels looked up by sample id.
    pub fn with_label_set(self, labels: &LabelSet) -> Result<Self> {
        let lookup: HashMap<&str, usize> = labels
            .sample_ids()
            .iter()
            .map(String::as_str)
            .zip(labels.labels().iter().copied())
            .collect();
        let mut out = Vec::with_capacity(self.len());
        for id in &self.sample_ids {
            match lookup.get(id.as_str()) {
                Some(&l) => out.push(l),
                None => return Err(Error::LabelMismatch(format!("no label for sample {id:?}"))),
            }
        }
        self.with_labels(out)
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn with_model_tag(mut self, tag: impl Into<String>) -> Self {
        self.model_tag = tag.into();
        self
    }

    pub fn model_tag(&self) -> &str {
        &self.model_tag
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.matrix.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.matrix.row(i)
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Labels, or `MissingLabels` if the set has none.
    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels()
            .ok_or_else(|| Error::MissingLabels(self.model_tag.clone()))
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    /// Rows scaled to unit L2 norm. Idempotent on already-normalized sets.
    pub fn l2_normalize(&self) -> Result<Self> {
        if self.normalized {
            return Ok(self.clone());
        }
        let mut matrix = self.matrix.clone();
        for (i, mut row) in matrix.axis_iter_mut(Axis(0)).enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNormRow(i));
            }
            row.mapv_inplace(|v| v / norm);
        }
        Ok(Self {
            matrix,
            normalized: true,
            ..self.clone()
        })
    }

    /// Marks the set as normalized after checking every row norm.
    pub fn assume_normalized(mut self) -> Result<Self> {
        for (i, row) in self.matrix.axis_iter(Axis(0)).enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNormRow(i));
            }
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::NotNormalized(self.model_tag.clone()));
            }
        }
        self.normalized = true;
        Ok(self)
    }

    /// Rows at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let matrix = self.matrix.select(Axis(0), indices);
        let sample_ids = indices
            .iter()
            .map(|&i| self.sample_ids[i].clone())
            .collect();
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Self {
            model_tag: self.model_tag.clone(),
            sample_ids,
            matrix,
            labels,
            normalized: self.normalized,
            precision: self.precision,
        }
    }

    /// Seeded random subset of `n` rows without replacement. Row order of the
    /// survivors is preserved.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter(
                "subsample size must be positive".into(),
            ));
        }
        if n > self.len() {
            return Err(Error::SampleTooLarge {
                requested: n,
                available: self.len(),
            });
        }
        Ok(self.select(&rng::sample_indices(self.len(), n, seed)))
    }
}

pub fn default_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

fn check_finite(matrix: ArrayView2<'_, f64>) -> Result<()> {
    for ((row, col), v) in matrix.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFiniteValue { row, col });
        }
    }
    Ok(())
}

fn check_unique(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateIds(id.clone()));
        }
    }
    Ok(())
}

/// Ground-truth class labels keyed by sample id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    sample_ids: Vec<String>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabelSet {
    /// `num_classes` defaults to `max(label) + 1`.
    pub fn new(sample_ids: Vec<String>, labels: Vec<usize>) -> Result<Self> {
        let num_classes = labels.iter().max().map_or(1, |&m| m + 1);
        Self::with_num_classes(sample_ids, labels, num_classes)
    }

    pub fn with_num_classes(
        sample_ids: Vec<String>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if sample_ids.len() != labels.len() {
            return Err(Error::LengthMismatch {
                what: "labels",
                expected: sample_ids.len(),
                found: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(Error::NoRows);
        }
        if num_classes == 0 {
            return Err(Error::InvalidParameter(
                "num_classes must be positive".into(),
            ));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                index,
                label,
                num_classes,
            });
        }
        check_unique(&sample_ids)?;
        Ok(Self {
            sample_ids,
            labels,
            num_classes,
        })
    }

    /// Labels with ids `"0".."N-1"`.
    pub fn from_labels(labels: Vec<usize>) -> Result<Self> {
        Self::new(default_ids(labels.len()), labels)
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn select(&self, indices: &[usize]) -> Self {
        Self {
            sample_ids: indices
                .iter()
                .map(|&i| self.sample_ids[i].clone())
                .collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Errors unless this label set lists exactly `ids`, in that order.
    pub fn check_matches(&self, ids: &[String]) -> Result<()> {
        if self.sample_ids.len() != ids.len() {
            return Err(Error::LabelMismatch(format!(
                "{} labels for {} samples",
                self.sample_ids.len(),
                ids.len()
            )));
        }
        if let Some(i) = (0..ids.len()).find(|&i| self.sample_ids[i] != ids[i]) {
            return Err(Error::LabelMismatch(format!(
                "position {i}: label id {:?} vs sample id {:?}",
                self.sample_ids[i], ids[i]
            )));
        }
        Ok(())
    }
}

/// Output of [`align`].
#[derive(Debug, Clone)]
pub struct Aligned {
    pub sets: Vec<EmbeddingSet>,
    pub labels: Option<LabelSet>,
}

/// Restricts every set (and the labels, if given) to the sample ids they all
/// share, with rows in lexicographic id order. When labels are given they are
/// also attached to each output set.
///
/// A single set is accepted; it is then only reordered (and intersected with
/// the label ids).
pub fn align(sets: &[EmbeddingSet], labels: Option<&LabelSet>) -> Result<Aligned> {
    if sets.is_empty() {
        return Err(Error::TooFewInputs {
            required: 1,
            found: 0,
        });
    }
    let mut common: BTreeSet<&str> = sets[0].sample_ids.iter().map(String::as_str).collect();
    let others = sets[1..]
        .iter()
        .map(|s| s.sample_ids.as_slice())
        .chain(labels.map(|l| l.sample_ids.as_slice()));
    for ids in others {
        let here: HashSet<&str> = ids.iter().map(String::as_str).collect();
        common.retain(|id| here.contains(id));
    }
    if common.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    let order: Vec<&str> = common.into_iter().collect();

    let positions = |ids: &[String]| -> Vec<usize> {
        let index: HashMap<&str, usize> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        order.iter().map(|id| index[id]).collect()
    };

    let labels = labels.map(|l| l.select(&positions(&l.sample_ids)));
    let sets = sets
        .iter()
        .map(|s| {
            let out = s.select(&positions(&s.sample_ids));
            match &labels {
                Some(l) => out.with_labels(l.labels.clone()),
                None => Ok(out),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Aligned { sets, labels })
}

/// Errors unless `a` and `b` list the same sample ids in the same order.
pub fn check_aligned(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::NotAligned(format!(
            "{:?} has {} rows, {:?} has {}",
            a.model_tag,
            a.len(),
            b.model_tag,
            b.len()
        )));
    }
    if let Some(i) = (0..a.len()).find(|&i| a.sample_ids[i] != b.sample_ids[i]) {
        return Err(Error::NotAligned(format!(
            "row {i}: {:?} vs {:?}",
            a.sample_ids[i], b.sample_ids[i]
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalizes_three_four_five() {
        let set = EmbeddingSet::from_matrix("m", array![[3.0, 4.0]]).unwrap();
        let n = set.l2_normalize().unwrap();
        assert!(n.is_normalized());
        assert!((n.matrix()[[0, 0]] - 0.6).abs() < 1e-15);
        assert!((n.matrix()[[0, 1]] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_is_idempotent() {
        let set = EmbeddingSet::from_matrix("m", array![[1.0, 2.0], [-3.0, 0.5]]).unwrap();
        let once = set.l2_normalize().unwrap();
        let raw = EmbeddingSet::from_matrix("m", once.matrix().to_owned()).unwrap();
        let twice = raw.l2_normalize().unwrap();
        for (a, b) in once.matrix().iter().zip(twice.matrix().iter()) {
            assert!((a - b).abs() <= 1e-7);
        }
    }

    #[test]
    fn zero_row_is_rejected() {
        let set = EmbeddingSet::from_matrix("m", array![[0.0, 0.0], [1.0, 0.0]]).unwrap();
        assert!(matches!(set.l2_normalize(), Err(Error::ZeroNormRow(0))));
    }

    #[test]
    fn rejects_non_finite_and_duplicates() {
        let e = EmbeddingSet::from_matrix("m", array![[1.0, f64::NAN]]).unwrap_err();
        assert!(matches!(e, Error::NonFiniteValue { row: 0, col: 1 }));
        let e = EmbeddingSet::new("m", ids(&["a", "a"]), array![[1.0], [2.0]]).unwrap_err();
        assert!(matches!(e, Error::DuplicateIds(id) if id == "a"));
        let e = EmbeddingSet::from_matrix("m", Array2::zeros((2, 0))).unwrap_err();
        assert!(matches!(e, Error::ZeroDimension));
    }

    #[test]
    fn align_intersects_and_sorts() {
        let a = EmbeddingSet::new("a", ids(&["c", "a", "b"]), array![[3.0], [1.0], [2.0]]).unwrap();
        let b = EmbeddingSet::new("b", ids(&["d", "b", "c"]), array![[40.], [20.], [30.]]).unwrap();
        let out = align(&[a, b], None).unwrap();
        assert_eq!(out.sets[0].sample_ids(), &ids(&["b", "c"])[..]);
        assert_eq!(out.sets[1].sample_ids(), &ids(&["b", "c"])[..]);
        assert_eq!(out.sets[0].matrix().column(0).to_vec(), vec![2.0, 3.0]);
        assert_eq!(out.sets[1].matrix().column(0).to_vec(), vec![20.0, 30.0]);
    }

    #[test]
    fn align_identical_ids_is_identity_up_to_order() {
        let a = EmbeddingSet::new("a", ids(&["0", "1", "2"]), array![[1.], [2.], [3.]]).unwrap();
        let out = align(&[a.clone(), a.clone()], None).unwrap();
        assert_eq!(out.sets[0], a);
    }

    #[test]
    fn align_disjoint_is_error() {
        let a = EmbeddingSet::new("a", ids(&["a"]), array![[1.]]).unwrap();
        let b = EmbeddingSet::new("b", ids(&["b"]), array![[1.]]).unwrap();
        assert!(matches!(
            align(&[a, b], None),
            Err(Error::EmptyIntersection)
        ));
    }

    #[test]
    fn align_attaches_labels() {
        let a = EmbeddingSet::new("a", ids(&["y", "x"]), array![[1.], [2.]]).unwrap();
        let labels = LabelSet::new(ids(&["x", "y", "z"]), vec![0, 1, 2]).unwrap();
        let out = align(&[a], Some(&labels)).unwrap();
        assert_eq!(out.sets[0].labels(), Some(&[0, 1][..]));
        let l = out.labels.unwrap();
        assert_eq!(l.labels(), &[0, 1]);
        assert_eq!(l.num_classes(), 3);
    }

    #[test]
    fn subsample_behaviour() {
        let m = Array2::from_shape_fn((10, 2), |(i, j)| (i * 2 + j) as f64);
        let set = EmbeddingSet::from_matrix("m", m)
            .unwrap()
            .with_labels((0..10).collect())
            .unwrap();
        assert_eq!(set.subsample(10, 3).unwrap(), set);
        let a = set.subsample(4, 9).unwrap();
        assert_eq!(a, set.subsample(4, 9).unwrap());
        for (i, id) in a.sample_ids().iter().enumerate() {
            let orig: usize = id.parse().unwrap();
            assert_eq!(a.labels().unwrap()[i], orig);
            assert_eq!(a.matrix()[[i, 0]], (orig * 2) as f64);
        }
        assert!(matches!(
            set.subsample(11, 0),
            Err(Error::SampleTooLarge {
                requested: 11,
                available: 10
            })
        ));
    }

    #[test]
    fn label_set_validation() {
        assert!(LabelSet::with_num_classes(ids(&["a"]), vec![3], 3).is_err());
        let l = LabelSet::new(ids(&["a", "b"]), vec![0, 4]).unwrap();
        assert_eq!(l.num_classes(), 5);
    }
}
