//! Linear probes on frozen embeddings.
//!
//! A probe is a multinomial logistic-regression layer, optionally preceded by
//! a per-dimension standardization frozen at train-set statistics (the
//! inference-time form of a batch-norm layer). Training is mini-batch SGD
//! with momentum, a cosine-decayed learning rate and weight decay on the
//! weights only.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::rng;

/// Added to the variance before standardizing, as in batch norm.
pub const STANDARDIZE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate at batch size 256; scaled linearly with `batch_size`.
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub standardize: bool,
    pub seed: u64,
    /// Fail when a class in `0..num_classes` has no training sample.
    pub strict: bool,
    /// Defaults to `max(label) + 1`.
    pub num_classes: Option<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 256,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: LrSchedule::Cosine,
            standardize: true,
            seed: 0,
            strict: false,
            num_classes: None,
        }
    }
}

impl ProbeConfig {
    pub fn initial_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        let lr = self.initial_lr();
        match self.schedule {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => {
                let progress = step as f64 / total.max(1) as f64;
                0.5 * lr * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    /// Variance plus [`STANDARDIZE_EPS`]; always positive.
    pub var: Vec<f64>,
}

impl Standardization {
    pub fn fit(x: ArrayView2<'_, f64>) -> Self {
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let var = x.var_axis(Axis(0), 0.0);
        Self {
            mean: mean.to_vec(),
            var: var.iter().map(|v| v + STANDARDIZE_EPS).collect(),
        }
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mean = Array1::from(self.mean.clone());
        let scale = Array1::from_iter(self.var.iter().map(|v| 1.0 / v.sqrt()));
        (&x - &mean) * &scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    /// `C x D`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub feature_norm: Option<Standardization>,
    pub config: ProbeConfig,
    pub model_tag: String,
}

impl ProbeModel {
    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    fn features(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        match &self.feature_norm {
            Some(s) => s.apply(x),
            None => x.to_owned(),
        }
    }

    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                found: x.ncols(),
            });
        }
        Ok(self.features(x).dot(&self.weights.t()) + &self.bias)
    }

    /// Argmax of the logits; ties go to the lowest class index.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        Ok(self
            .logits(x)?
            .rows()
            .into_iter()
            .map(|r| argmax(r.iter()))
            .collect())
    }
}

fn argmax<'a>(values: impl Iterator<Item = &'a f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in values.enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Gradients of [`softmax_loss`] with respect to weights and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Mean cross-entropy of `softmax(x W^T + b)` against `y`, plus
/// `weight_decay / 2 * ||W||^2`, and its gradient.
pub fn softmax_loss(
    weights: &Array2<f64>,
    bias: &Array1<f64>,
    x: ArrayView2<'_, f64>,
    y: &[usize],
    weight_decay: f64,
) -> LossGrad {
    let b = x.nrows() as f64;
    let mut probs = x.dot(&weights.t()) + bias;
    let mut loss = 0.0;
    for (mut row, &label) in probs.axis_iter_mut(Axis(0)).zip(y) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shifted_label = row[label] - max;
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        loss += sum.ln() - shifted_label;
        row.mapv_inplace(|p| p / sum);
        row[label] -= 1.0;
    }
    // probs now holds (softmax - onehot)
    probs /= b;
    let grad_w = probs.t().dot(&x) + &(weights * weight_decay);
    let grad_b = probs.sum_axis(Axis(0));
    let penalty = 0.5 * weight_decay * weights.iter().map(|w| w * w).sum::<f64>();
    LossGrad {
        loss: loss / b + penalty,
        weights: grad_w,
        bias: grad_b,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFit {
    pub model: ProbeModel,
    /// Full-training-set objective after each epoch.
    pub loss_trace: Vec<f64>,
}

/// Trains a probe on a labelled set. Deterministic for a fixed `config.seed`.
pub fn train_probe(train: &EmbeddingSet, config: &ProbeConfig) -> Result<ProbeFit> {
    let labels = train.require_labels()?;
    let n = train.len();
    let observed = labels.iter().max().map_or(1, |&m| m + 1);
    let num_classes = config.num_classes.unwrap_or(observed);
    if num_classes < observed {
        return Err(Error::LabelOutOfRange {
            index: labels.iter().position(|&l| l >= num_classes).unwrap_or(0),
            label: observed - 1,
            num_classes,
        });
    }
    if n < num_classes {
        return Err(Error::TooFewSamples {
            required: num_classes,
            found: n,
        });
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::InvalidParameter(
            "epochs and batch_size must be positive".into(),
        ));
    }
    let mut present = vec![false; num_classes];
    for &l in labels {
        present[l] = true;
    }
    if let Some(missing) = present.iter().position(|p| !p) {
        if config.strict {
            return Err(Error::DegenerateLabels(missing));
        }
        log::warn!("class {missing} has no training samples");
    }

    let feature_norm = config
        .standardize
        .then(|| Standardization::fit(train.matrix()));
    let x = match &feature_norm {
        Some(s) => s.apply(train.matrix()),
        None => train.matrix().to_owned(),
    };
    let d = x.ncols();
    let mut weights = Array2::<f64>::zeros((num_classes, d));
    let mut bias = Array1::<f64>::zeros(num_classes);
    let mut vel_w = Array2::<f64>::zeros((num_classes, d));
    let mut vel_b = Array1::<f64>::zeros(num_classes);

    let batch = config.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let total_steps = steps_per_epoch * config.epochs;
    let mut rng = rng::seeded(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for _ in 0..config.epochs {
        rng::shuffle(&mut rng, &mut order);
        for chunk in order.chunks(batch) {
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let g = softmax_loss(&weights, &bias, xb.view(), &yb, config.weight_decay);
            let lr = config.lr_at(step, total_steps);
            vel_w = &vel_w * config.momentum + &g.weights;
            vel_b = &vel_b * config.momentum + &g.bias;
            weights.scaled_add(-lr, &vel_w);
            bias.scaled_add(-lr, &vel_b);
            step += 1;
        }
        loss_trace.push(softmax_loss(&weights, &bias, x.view(), labels, config.weight_decay).loss);
    }
    Ok(ProbeFit {
        model: ProbeModel {
            weights,
            bias,
            feature_norm,
            config: config.clone(),
            model_tag: train.model_tag().to_string(),
        },
        loss_trace,
    })
}

/// Per-sample predictions of one probe.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub model_tag: String,
    pub sample_ids: Vec<String>,
    pub predictions: Vec<usize>,
    pub correct: Option<Vec<bool>>,
}

impl PredictionSet {
    pub fn new(
        model_tag: impl Into<String>,
        sample_ids: Vec<String>,
        predictions: Vec<usize>,
    ) -> Result<Self> {
        if sample_ids.len() != predictions.len() {
            return Err(Error::LengthMismatch {
                what: "predictions",
                expected: sample_ids.len(),
                found: predictions.len(),
            });
        }
        Ok(Self {
            model_tag: model_tag.into(),
            sample_ids,
            predictions,
            correct: None,
        })
    }

    pub fn accuracy(&self) -> Option<f64> {
        self.correct
            .as_ref()
            .map(|c| c.iter().filter(|&&b| b).count() as f64 / c.len() as f64)
    }

    /// `id,prediction` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,prediction\n");
        for (id, p) in self.sample_ids.iter().zip(&self.predictions) {
            out.push_str(&format!("{id},{p}\n"));
        }
        out
    }

    pub fn from_csv(model_tag: &str, text: &str) -> Result<Self> {
        let labels = crate::io::parse_labels(text)?;
        Self::new(
            model_tag,
            labels.sample_ids().to_vec(),
            labels.labels().to_vec(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeEvaluation {
    pub predictions: PredictionSet,
    /// Present when the test set carries labels.
    pub accuracy: Option<f64>,
}

pub fn evaluate_probe(model: &ProbeModel, test: &EmbeddingSet) -> Result<ProbeEvaluation> {
    let predictions = model.predict(test.matrix())?;
    let mut set = PredictionSet::new(test.model_tag(), test.sample_ids().to_vec(), predictions)?;
    if let Some(labels) = test.labels() {
        set.correct = Some(
            set.predictions
                .iter()
                .zip(labels)
                .map(|(p, l)| p == l)
                .collect(),
        );
    }
    let accuracy = set.accuracy();
    Ok(ProbeEvaluation {
        predictions: set,
        accuracy,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ProbeHeader {
    model_tag: String,
    num_classes: usize,
    dim: usize,
    config: ProbeConfig,
    feature_norm: Option<Standardization>,
    /// File next to the header: `C x D` weights then `C` biases, little-endian f32.
    weights_file: String,
}

fn blob_path(header_path: &Path) -> (PathBuf, String) {
    let name = header_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "probe".into());
    let file = format!("{name}.weights.f32");
    (header_path.with_file_name(&file), file)
}

/// Writes a JSON header at `path` and the parameter blob beside it.
pub fn save_probe(model: &ProbeModel, path: &Path) -> Result<()> {
    let (blob, weights_file) = blob_path(path);
    let header = ProbeHeader {
        model_tag: model.model_tag.clone(),
        num_classes: model.num_classes(),
        dim: model.dim(),
        config: model.config.clone(),
        feature_norm: model.feature_norm.clone(),
        weights_file,
    };
    crate::report::write_json(path, &header)?;
    let bytes: Vec<u8> = model
        .weights
        .iter()
        .chain(model.bias.iter())
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))
}

pub fn load_probe(path: &Path) -> Result<ProbeModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: ProbeHeader = serde_json::from_str(&text)?;
    let blob = path.with_file_name(&header.weights_file);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let (c, d) = (header.num_classes, header.dim);
    let expected = (c * d + c) * 4;
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: bytes.len(),
        });
    }
    let floats: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let weights = Array2::from_shape_vec((c, d), floats[..c * d].to_vec()).expect("sized above");
    let bias = Array1::from(floats[c * d..].to_vec());
    Ok(ProbeModel {
        weights,
        bias,
        feature_norm: header.feature_norm,
        config: header.config,
        model_tag: header.model_tag,
    })
}
