//! Agreement and correctness overlap between the predictions of several
//! probes on the same images.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::embedding::LabelSet;
use crate::error::{Error, Result};
use crate::probe::PredictionSet;
use crate::report::PairwiseReport;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Share {
    pub count: usize,
    pub fraction: f64,
}

impl Share {
    fn of(count: usize, n: usize) -> Self {
        Self {
            count,
            fraction: count as f64 / n as f64,
        }
    }
}

/// Reference model against the rest, e.g. a supervised backbone against a
/// group of self-supervised ones. The four cells partition the samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSplit {
    pub reference: String,
    /// Reference correct and at least one other model correct.
    pub both: Share,
    /// Reference correct, every other model wrong.
    pub reference_only: Share,
    /// Reference wrong, at least one other model correct.
    pub others_only: Share,
    pub neither: Share,
}

impl ReferenceSplit {
    pub fn fractions_sum(&self) -> f64 {
        self.both.fraction
            + self.reference_only.fraction
            + self.others_only.fraction
            + self.neither.fraction
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniqueShare {
    pub model_tag: String,
    pub share: Share,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapPartition {
    pub n: usize,
    /// Models compared within the group: every model except the reference.
    pub group: Vec<String>,
    pub reference_split: Option<ReferenceSplit>,
    pub all_correct: Share,
    /// Samples that exactly one group model gets right, per model. Empty for
    /// a group of one, where that case coincides with `all_correct`.
    pub unique_correct: Vec<UniqueShare>,
    /// More than one but not all group models correct.
    pub some_correct: Share,
    pub none_correct: Share,
    /// Fraction of samples on which every supplied model (reference included)
    /// predicts the same class, regardless of the label.
    pub agreement: f64,
}

impl OverlapPartition {
    /// Sum over the exhaustive within-group partition.
    pub fn fractions_sum(&self) -> f64 {
        self.all_correct.fraction
            + self
                .unique_correct
                .iter()
                .map(|u| u.share.fraction)
                .sum::<f64>()
            + self.some_correct.fraction
            + self.none_correct.fraction
    }
}

fn check_sets(predsets: &[PredictionSet]) -> Result<()> {
    if predsets.len() < 2 {
        return Err(Error::TooFewInputs {
            required: 2,
            found: predsets.len(),
        });
    }
    let first = &predsets[0];
    for p in &predsets[1..] {
        if p.sample_ids != first.sample_ids {
            return Err(Error::MisalignedPredictions(format!(
                "{:?} and {:?} cover different samples",
                first.model_tag, p.model_tag
            )));
        }
    }
    Ok(())
}

pub fn overlap_partition(
    predsets: &[PredictionSet],
    labels: &LabelSet,
    reference: Option<&str>,
) -> Result<OverlapPartition> {
    check_sets(predsets)?;
    if labels.sample_ids() != predsets[0].sample_ids.as_slice() {
        return Err(Error::MisalignedPredictions(
            "labels cover different samples".into(),
        ));
    }
    let reference_index = match reference {
        Some(tag) => Some(
            predsets
                .iter()
                .position(|p| p.model_tag == tag)
                .ok_or_else(|| {
                    Error::InvalidParameter(format!("unknown reference model {tag:?}"))
                })?,
        ),
        None => None,
    };
    let truth = labels.labels();
    let n = truth.len();
    let correct: Vec<Vec<bool>> = predsets
        .iter()
        .map(|p| {
            p.predictions
                .iter()
                .zip(truth)
                .map(|(a, b)| a == b)
                .collect()
        })
        .collect();
    let group: Vec<usize> = (0..predsets.len())
        .filter(|&i| Some(i) != reference_index)
        .collect();

    let mut all = 0;
    let mut some = 0;
    let mut none = 0;
    let mut unique = vec![0usize; group.len()];
    let mut split = [0usize; 4];
    let mut agree = 0;
    #[allow(clippy::needless_range_loop)]
    for s in 0..n {
        let hits: Vec<usize> = (0..group.len()).filter(|&g| correct[group[g]][s]).collect();
        match hits.len() {
            0 => none += 1,
            h if h == group.len() => all += 1,
            1 => unique[hits[0]] += 1,
            _ => some += 1,
        }
        if let Some(r) = reference_index {
            let cell = match (correct[r][s], !hits.is_empty()) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            split[cell] += 1;
        }
        let first = predsets[0].predictions[s];
        if predsets.iter().all(|p| p.predictions[s] == first) {
            agree += 1;
        }
    }

    Ok(OverlapPartition {
        n,
        group: group
            .iter()
            .map(|&i| predsets[i].model_tag.clone())
            .collect(),
        reference_split: reference_index.map(|r| ReferenceSplit {
            reference: predsets[r].model_tag.clone(),
            both: Share::of(split[0], n),
            reference_only: Share::of(split[1], n),
            others_only: Share::of(split[2], n),
            neither: Share::of(split[3], n),
        }),
        all_correct: Share::of(all, n),
        unique_correct: if group.len() > 1 {
            group
                .iter()
                .zip(&unique)
                .map(|(&i, &c)| UniqueShare {
                    model_tag: predsets[i].model_tag.clone(),
                    share: Share::of(c, n),
                })
                .collect()
        } else {
            Vec::new()
        },
        some_correct: Share::of(some, n),
        none_correct: Share::of(none, n),
        agreement: agree as f64 / n as f64,
    })
}

/// Fraction of identical predictions for every pair of probes.
pub fn agreement_pairwise(predsets: &[PredictionSet]) -> Result<PairwiseReport> {
    check_sets(predsets)?;
    let m = predsets.len();
    let n = predsets[0].predictions.len();
    let mut matrix = Array2::eye(m);
    for i in 0..m {
        for j in i + 1..m {
            let same = predsets[i]
                .predictions
                .iter()
                .zip(&predsets[j].predictions)
                .filter(|(a, b)| a == b)
                .count();
            let v = same as f64 / n as f64;
            matrix[[i, j]] = v;
            matrix[[j, i]] = v;
        }
    }
    let mut report = PairwiseReport::new(
        "linear_agreement",
        predsets.iter().map(|p| p.model_tag.clone()).collect(),
        matrix,
    );
    report.set_param("n", n);
    Ok(report)
}
