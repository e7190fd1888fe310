//! JSON run configuration for the batch pipeline.
//!
//! ```json
//! {
//!   "seed": 7,
//!   "out_dir": "out",
//!   "labels": { "test": "test_labels.csv", "train": "train_labels.csv" },
//!   "models": [
//!     { "tag": "a",
//!       "test": { "path": "a_test.npy" },
//!       "train": { "path": "a_train.csv", "header": true, "ids": "a_train.ids" },
//!       "augmented": { "jitter": { "path": "a_jitter.npy" } } }
//!   ],
//!   "analyses": [ { "kind": "cka" }, { "kind": "graph", "k": 10 } ]
//! }
//! ```
//!
//! Relative paths resolve against the directory holding the config file.
//! The global `seed` drives every seeded step of every analysis.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::{KMeansMode, DEFAULT_BATCH, DEFAULT_MAX_ITER, DEFAULT_N_INIT};
use crate::error::{Error, Result};
use crate::geometry::{DEFAULT_EXACT_THRESHOLD, DEFAULT_PAIR_BUDGET, DEFAULT_T};
use crate::io::{rawf32_sidecar, Format, LoadOptions};
use crate::neighbors::{SimilarityMetric, Voting, DEFAULT_KNN_K, DEFAULT_TEMPERATURE};
use crate::probe::ProbeConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub models: Vec<ModelInputs>,
    #[serde(default)]
    pub labels: LabelFiles,
    pub analyses: Vec<Analysis>,
    #[serde(skip)]
    base_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("repmetric-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputFile {
    pub path: PathBuf,
    /// Guessed from the extension when absent.
    #[serde(default)]
    pub format: Option<Format>,
    /// Newline-delimited sample ids, one per row.
    #[serde(default)]
    pub ids: Option<PathBuf>,
    /// CSV only: skip the first line.
    #[serde(default)]
    pub header: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelInputs {
    pub tag: String,
    pub test: InputFile,
    #[serde(default)]
    pub train: Option<InputFile>,
    /// Augmentation name to embeddings of the augmented test images.
    #[serde(default)]
    pub augmented: BTreeMap<String, InputFile>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelFiles {
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub train: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Analysis {
    Geometry(GeometryParams),
    Cka(CkaParams),
    Invariance(InvarianceParams),
    Graph(GraphParams),
    Knn(KnnParams),
    Kmeans(KmeansParams),
    Probe(ProbeConfig),
    Overlap(OverlapParams),
}

impl Analysis {
    pub fn kind(&self) -> &'static str {
        match self {
            Analysis::Geometry(_) => "geometry",
            Analysis::Cka(_) => "cka",
            Analysis::Invariance(_) => "invariance",
            Analysis::Graph(_) => "graph",
            Analysis::Knn(_) => "knn",
            Analysis::Kmeans(_) => "kmeans",
            Analysis::Probe(_) => "probe",
            Analysis::Overlap(_) => "overlap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometryParams {
    pub t: f64,
    pub pair_budget: u64,
    pub exact_threshold: usize,
    pub force_exact: bool,
    pub include_self_pairs: bool,
    pub unconditional: bool,
}

impl Default for GeometryParams {
    fn default() -> Self {
        Self {
            t: DEFAULT_T,
            pair_budget: DEFAULT_PAIR_BUDGET,
            exact_threshold: DEFAULT_EXACT_THRESHOLD,
            force_exact: false,
            include_self_pairs: false,
            unconditional: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CkaParams {
    /// `null` disables subsampling.
    pub subsample: Option<usize>,
    pub normalize_rows: bool,
}

impl Default for CkaParams {
    fn default() -> Self {
        Self {
            subsample: Some(crate::cka::DEFAULT_SUBSAMPLE),
            normalize_rows: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InvarianceParams {
    pub normalize_rows: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphParams {
    /// Required: there is no default neighborhood size.
    pub k: usize,
    #[serde(default)]
    pub metric: SimilarityMetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnParams {
    pub k: usize,
    /// Evaluate every k listed here instead of `k` and report the best.
    pub sweep: Option<Vec<i64>>,
    pub voting: Voting,
    pub temperature: f64,
}

impl Default for KnnParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_KNN_K,
            sweep: None,
            voting: Voting::TemperatureWeighted,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KmeansParams {
    /// Defaults to the number of test classes.
    pub k: Option<usize>,
    pub n_init: usize,
    pub mode: KMeansMode,
    pub batch: usize,
    pub max_iter: usize,
}

impl Default for KmeansParams {
    fn default() -> Self {
        Self {
            k: None,
            n_init: DEFAULT_N_INIT,
            mode: KMeansMode::Auto,
            batch: DEFAULT_BATCH,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverlapParams {
    /// Model compared against the rest of the group.
    pub reference: Option<String>,
    /// Probe recipe used when no `probe` analysis is configured; otherwise
    /// that analysis's predictions are reused.
    pub probe: ProbeConfig,
}

impl InputFile {
    pub fn resolved_format(&self) -> Option<Format> {
        self.format.or_else(|| Format::from_path(&self.path))
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            csv_header: self.header,
            ids_path: self.ids.clone(),
        }
    }

    fn resolve(&mut self, base: &Path) {
        self.path = base.join(&self.path);
        if let Some(ids) = &mut self.ids {
            *ids = base.join(&*ids);
        }
    }
}

impl RunConfig {
    /// Parses a config document; relative paths resolve against `base_dir`.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        config.base_dir = base_dir.to_path_buf();
        config.out_dir = base_dir.join(&config.out_dir);
        for m in &mut config.models {
            m.test.resolve(base_dir);
            if let Some(t) = &mut m.train {
                t.resolve(base_dir);
            }
            for a in m.augmented.values_mut() {
                a.resolve(base_dir);
            }
        }
        for l in [&mut config.labels.test, &mut config.labels.train]
            .into_iter()
            .flatten()
        {
            *l = base_dir.join(&*l);
        }
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::ConfigInvalid(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base)
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn tags(&self) -> Vec<&str> {
        self.models.iter().map(|m| m.tag.as_str()).collect()
    }

    /// Checks every referenced file and every analysis prerequisite, and
    /// reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.models.is_empty() {
            problems.push("no models configured".to_string());
        }
        if self.analyses.is_empty() {
            problems.push("no analyses configured".to_string());
        }
        let mut seen = BTreeSet::new();
        for m in &self.models {
            if m.tag.is_empty() {
                problems.push("empty model tag".into());
            }
            if !seen.insert(m.tag.as_str()) {
                problems.push(format!("duplicate model tag {:?}", m.tag));
            }
            check_input(&m.tag, "test", &m.test, &mut problems);
            if let Some(t) = &m.train {
                check_input(&m.tag, "train", t, &mut problems);
            }
            for (name, a) in &m.augmented {
                check_input(&m.tag, name, a, &mut problems);
            }
        }
        for path in [&self.labels.test, &self.labels.train]
            .into_iter()
            .flatten()
        {
            if !path.is_file() {
                problems.push(format!("label file {} not found", path.display()));
            }
        }

        let all_train = self.models.iter().all(|m| m.train.is_some());
        let supervised = all_train && self.labels.train.is_some() && self.labels.test.is_some();
        for analysis in &self.analyses {
            let kind = analysis.kind();
            match analysis {
                Analysis::Cka(_) | Analysis::Graph(_) if self.models.len() < 2 => {
                    problems.push(format!("{kind} needs at least two models"));
                }
                Analysis::Invariance(_) if self.models.iter().all(|m| m.augmented.is_empty()) => {
                    problems.push("invariance needs augmented inputs".into());
                }
                Analysis::Knn(_) | Analysis::Probe(_) if !supervised => {
                    problems.push(format!(
                        "{kind} needs train inputs for every model and both label files"
                    ));
                }
                Analysis::Kmeans(p) if p.k.is_none() && self.labels.test.is_none() => {
                    problems.push("kmeans needs k or test labels".into());
                }
                Analysis::Overlap(p) => {
                    if !supervised {
                        problems.push(
                            "overlap needs train inputs for every model and both label files"
                                .into(),
                        );
                    }
                    if self.models.len() < 2 {
                        problems.push("overlap needs at least two models".into());
                    }
                    if let Some(r) = &p.reference {
                        if !seen.contains(r.as_str()) {
                            problems.push(format!("overlap reference {r:?} is not a model tag"));
                        }
                    }
                }
                _ => {}
            }
        }

        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(problems.join("; ")))
        }
    }
}

fn check_input(tag: &str, role: &str, input: &InputFile, problems: &mut Vec<String>) {
    let path = &input.path;
    if !path.is_file() {
        problems.push(format!("{tag}/{role}: {} not found", path.display()));
    }
    match input.resolved_format() {
        None => problems.push(format!(
            "{tag}/{role}: cannot infer format of {}",
            path.display()
        )),
        Some(Format::Rawf32) => {
            let sidecar = rawf32_sidecar(path);
            if !sidecar.is_file() {
                problems.push(format!(
                    "{tag}/{role}: shape sidecar {} not found",
                    sidecar.display()
                ));
            }
        }
        Some(_) => {}
    }
    if let Some(ids) = &input.ids {
        if !ids.is_file() {
            problems.push(format!("{tag}/{role}: id file {} not found", ids.display()));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_tagged_analyses() {
        let text = r#"{
            "models": [{"tag": "a", "test": {"path": "a.npy"}}],
            "analyses": [{"kind": "graph", "k": 5}, {"kind": "probe", "epochs": 3}]
        }"#;
        let c = RunConfig::from_json(text, Path::new("/base")).unwrap();
        assert_eq!(c.models[0].test.path, Path::new("/base/a.npy"));
        assert_eq!(c.out_dir, Path::new("/base/repmetric-out"));
        match &c.analyses[1] {
            Analysis::Probe(p) => assert_eq!(p.epochs, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn graph_requires_k() {
        let text = r#"{"models": [], "analyses": [{"kind": "graph"}]}"#;
        assert!(matches!(
            RunConfig::from_json(text, Path::new(".")),
            Err(Error::ConfigInvalid(_))
        ));
    }

    #[test]
    fn unknown_field_rejected() {
        let text = r#"{"models": [], "analyses": [], "sed": 1}"#;
        assert!(RunConfig::from_json(text, Path::new(".")).is_err());
    }

    #[test]
    fn missing_files_reported() {
        let text = r#"{
            "models": [{"tag": "a", "test": {"path": "nope.npy"}},
                       {"tag": "a", "test": {"path": "x.raw"}}],
            "analyses": [{"kind": "knn"}]
        }"#;
        let c = RunConfig::from_json(text, Path::new("/definitely/missing")).unwrap();
        let Err(Error::ConfigInvalid(msg)) = c.validate() else {
            panic!("expected ConfigInvalid")
        };
        assert!(msg.contains("nope.npy"));
        assert!(msg.contains("duplicate"));
        assert!(msg.contains("sidecar"));
        assert!(msg.contains("knn"));
    }
}
