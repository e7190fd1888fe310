//! Config-driven batch pipeline: validate, ingest, align, then run every
//! configured analysis and write its reports into the output directory.
//!
//! Each analysis writes `<name>.json` (plus CSV side files) where `name` is
//! the analysis kind, suffixed with its position when a kind repeats.
//! `summary.json` lists every analysis with its status and files. An
//! analysis that fails does not stop the others.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::cka::{self, CkaOptions, CkaScore};
use crate::clustering::{self, ClusterAccuracy, KMeansMode, KMeansOptions};
use crate::config::{
    Analysis, CkaParams, GeometryParams, GraphParams, InputFile, InvarianceParams, KmeansParams,
    KnnParams, OverlapParams, RunConfig,
};
use crate::embedding::{align, EmbeddingSet, LabelSet};
use crate::error::{Error, Result};
use crate::geometry::{self, GeometryScore, ToleranceOptions, UniformityOptions};
use crate::io;
use crate::neighbors::{self, KnnEvalResult, KnnOptions};
use crate::overlap::{self, OverlapPartition};
use crate::probe::{self, PredictionSet, ProbeConfig};
use crate::report::{self, PairwiseReport};

/// Aligned inputs shared by every analysis.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub test: Vec<EmbeddingSet>,
    pub test_labels: Option<LabelSet>,
    /// Empty unless every model has train embeddings.
    pub train: Vec<EmbeddingSet>,
    pub train_labels: Option<LabelSet>,
    /// `(model index, augmentation name, clean, augmented)`, each pair
    /// aligned on its own shared ids.
    pub augmented: Vec<(usize, String, EmbeddingSet, EmbeddingSet)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisStatus {
    pub name: String,
    pub kind: String,
    pub ok: bool,
    pub error: Option<String>,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub models: Vec<String>,
    pub n_test: usize,
    pub n_train: Option<usize>,
    pub analyses: Vec<AnalysisStatus>,
    pub created_at: String,
}

impl RunSummary {
    pub fn all_ok(&self) -> bool {
        self.analyses.iter().all(|a| a.ok)
    }

    /// 0 when every analysis succeeded, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.all_ok() {
            0
        } else {
            2
        }
    }
}

struct Output {
    file: String,
    contents: String,
}

#[derive(Serialize)]
struct Envelope<'a, P: Serialize, R: Serialize> {
    analysis: &'a str,
    seed: u64,
    params: &'a P,
    results: R,
    created_at: String,
}

fn envelope<P: Serialize, R: Serialize>(
    kind: &str,
    seed: u64,
    params: &P,
    results: R,
) -> Result<String> {
    report::to_json_string(&Envelope {
        analysis: kind,
        seed,
        params,
        results,
        created_at: report::timestamp(),
    })
}

fn load(tag: &str, input: &InputFile) -> Result<EmbeddingSet> {
    let format = input.resolved_format().ok_or_else(|| {
        Error::ConfigInvalid(format!("cannot infer format of {}", input.path.display()))
    })?;
    io::load_embeddings_with(&input.path, format, tag, &input.load_options())
}

/// Loads and aligns every input named by the config.
pub fn ingest(config: &RunConfig) -> Result<Inputs> {
    let test: Vec<EmbeddingSet> = config
        .models
        .par_iter()
        .map(|m| load(&m.tag, &m.test))
        .collect::<Result<_>>()?;
    let test_labels = config
        .labels
        .test
        .as_deref()
        .map(io::load_labels)
        .transpose()?;
    let aligned = align(&test, test_labels.as_ref())?;

    let (train, train_labels) = if config.models.iter().all(|m| m.train.is_some()) {
        let raw: Vec<EmbeddingSet> = config
            .models
            .par_iter()
            .map(|m| load(&m.tag, m.train.as_ref().expect("checked above")))
            .collect::<Result<_>>()?;
        let labels = config
            .labels
            .train
            .as_deref()
            .map(io::load_labels)
            .transpose()?;
        let a = align(&raw, labels.as_ref())?;
        (a.sets, a.labels)
    } else {
        (Vec::new(), None)
    };

    let jobs: Vec<(usize, &String, &InputFile)> = config
        .models
        .iter()
        .enumerate()
        .flat_map(|(i, m)| {
            m.augmented
                .iter()
                .map(move |(name, input)| (i, name, input))
        })
        .collect();
    let augmented = jobs
        .par_iter()
        .map(|&(i, name, input)| {
            let aug = load(&config.models[i].tag, input)?;
            let pair = align(&[aligned.sets[i].clone(), aug], None)?.sets;
            let mut it = pair.into_iter();
            let clean = it.next().expect("two sets");
            let aug = it.next().expect("two sets");
            Ok((i, name.clone(), clean, aug))
        })
        .collect::<Result<_>>()?;

    Ok(Inputs {
        test: aligned.sets,
        test_labels: aligned.labels,
        train,
        train_labels,
        augmented,
    })
}

fn output_names(analyses: &[Analysis]) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in analyses {
        *counts.entry(a.kind()).or_default() += 1;
    }
    analyses
        .iter()
        .enumerate()
        .map(|(i, a)| {
            if counts[a.kind()] > 1 {
                format!("{}_{i}", a.kind())
            } else {
                a.kind().to_string()
            }
        })
        .collect()
}

type Produced = (Vec<Output>, Option<Vec<PredictionSet>>);

/// Validates, ingests, runs and writes everything. Returns `Err` only for
/// configuration, ingest and write failures; analysis failures are recorded
/// in the summary.
pub fn run(config: &RunConfig) -> Result<RunSummary> {
    config.validate()?;
    let inputs = ingest(config)?;
    let seed = config.seed;
    let names = output_names(&config.analyses);

    // probes first so that overlap can reuse their predictions
    let results: Vec<Result<Produced>> = config
        .analyses
        .par_iter()
        .zip(&names)
        .map(|(analysis, name)| match analysis {
            Analysis::Overlap(_) => Ok((Vec::new(), None)),
            Analysis::Probe(p) => {
                probe_analysis(&inputs, p, seed, name).map(|(o, preds)| (o, Some(preds)))
            }
            other => run_simple(other, &inputs, seed, name).map(|o| (o, None)),
        })
        .collect();
    let probe_preds: Option<Vec<PredictionSet>> =
        config
            .analyses
            .iter()
            .zip(&results)
            .find_map(|(a, r)| match (a, r) {
                (Analysis::Probe(_), Ok((_, preds))) => preds.clone(),
                _ => None,
            });
    let probe_failed = config
        .analyses
        .iter()
        .zip(&results)
        .any(|(a, r)| matches!(a, Analysis::Probe(_)) && r.is_err());

    let mut results: Vec<Result<Vec<Output>>> =
        results.into_iter().map(|r| r.map(|(o, _)| o)).collect();
    for (i, analysis) in config.analyses.iter().enumerate() {
        if let Analysis::Overlap(p) = analysis {
            results[i] = if probe_failed && probe_preds.is_none() {
                Err(Error::InvalidParameter(
                    "probe analysis failed; no predictions to compare".into(),
                ))
            } else {
                overlap_analysis(&inputs, p, probe_preds.as_deref(), seed, &names[i])
            };
        }
    }

    fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let mut statuses = Vec::with_capacity(results.len());
    for ((analysis, name), result) in config.analyses.iter().zip(&names).zip(results) {
        let status = match result {
            Ok(outputs) => {
                let mut files = Vec::with_capacity(outputs.len());
                for out in outputs {
                    write_file(&config.out_dir.join(&out.file), &out.contents)?;
                    files.push(out.file);
                }
                AnalysisStatus {
                    name: name.clone(),
                    kind: analysis.kind().into(),
                    ok: true,
                    error: None,
                    files,
                }
            }
            Err(e) => {
                log::error!("analysis {name} failed: {e}");
                AnalysisStatus {
                    name: name.clone(),
                    kind: analysis.kind().into(),
                    ok: false,
                    error: Some(e.to_string()),
                    files: Vec::new(),
                }
            }
        };
        statuses.push(status);
    }

    let summary = RunSummary {
        seed,
        models: config.tags().iter().map(|t| t.to_string()).collect(),
        n_test: inputs.test[0].len(),
        n_train: inputs.train.first().map(EmbeddingSet::len),
        analyses: statuses,
        created_at: report::timestamp(),
    };
    report::write_json(&config.out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn run_simple(analysis: &Analysis, inputs: &Inputs, seed: u64, name: &str) -> Result<Vec<Output>> {
    match analysis {
        Analysis::Geometry(p) => geometry_analysis(inputs, p, seed, name),
        Analysis::Cka(p) => cka_analysis(inputs, p, seed, name),
        Analysis::Invariance(p) => invariance_analysis(inputs, p, seed, name),
        Analysis::Graph(p) => graph_analysis(inputs, p, seed, name),
        Analysis::Knn(p) => knn_analysis(inputs, p, seed, name),
        Analysis::Kmeans(p) => kmeans_analysis(inputs, p, seed, name),
        Analysis::Probe(_) | Analysis::Overlap(_) => unreachable!("handled by run"),
    }
}

fn pairwise_outputs(name: &str, report: &PairwiseReport) -> Result<Vec<Output>> {
    Ok(vec![
        Output {
            file: format!("{name}.json"),
            contents: report.to_json()?,
        },
        Output {
            file: format!("{name}.csv"),
            contents: report.to_csv()?,
        },
    ])
}

#[derive(Serialize)]
struct ModelGeometry<'a> {
    model_tag: &'a str,
    #[serde(flatten)]
    score: GeometryScore,
}

fn geometry_analysis(
    inputs: &Inputs,
    p: &GeometryParams,
    seed: u64,
    name: &str,
) -> Result<Vec<Output>> {
    let uopts = UniformityOptions {
        t: p.t,
        pair_budget: p.pair_budget,
        exact_threshold: p.exact_threshold,
        force_exact: p.force_exact,
        include_self_pairs: p.include_self_pairs,
        seed,
    };
    let topts = ToleranceOptions {
        unconditional: p.unconditional,
        include_self_pairs: p.include_self_pairs,
    };
    let scores = inputs
        .test
        .iter()
        .map(|set| {
            let unit = set.l2_normalize()?;
            let score = geometry::geometry(&unit, inputs.test_labels.as_ref(), &uopts, topts)?;
            Ok(ModelGeometry {
                model_tag: set.model_tag(),
                score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(vec![Output {
        file: format!("{name}.json"),
        contents: envelope("geometry", seed, p, scores)?,
    }])
}

fn cka_analysis(inputs: &Inputs, p: &CkaParams, seed: u64, name: &str) -> Result<Vec<Output>> {
    let opts = CkaOptions {
        subsample: p.subsample,
        seed,
        normalize_rows: p.normalize_rows,
        ..CkaOptions::default()
    };
    pairwise_outputs(name, &cka::cka_pairwise(&inputs.test, &opts)?)
}

#[derive(Serialize)]
struct InvarianceResult<'a> {
    model_tag: String,
    augmentation: &'a str,
    #[serde(flatten)]
    score: CkaScore,
}

fn invariance_analysis(
    inputs: &Inputs,
    p: &InvarianceParams,
    seed: u64,
    name: &str,
) -> Result<Vec<Output>> {
    let results = inputs
        .augmented
        .iter()
        .map(|(_, aug_name, clean, aug)| {
            let (clean, aug) = if p.normalize_rows {
                (clean.l2_normalize()?, aug.l2_normalize()?)
            } else {
                (clean.clone(), aug.clone())
            };
            Ok(InvarianceResult {
                model_tag: clean.model_tag().to_string(),
                augmentation: aug_name,
                score: cka::augmentation_invariance(&clean, &aug)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(vec![Output {
        file: format!("{name}.json"),
        contents: envelope("invariance", seed, p, results)?,
    }])
}

fn graph_analysis(inputs: &Inputs, p: &GraphParams, _seed: u64, name: &str) -> Result<Vec<Output>> {
    let graphs = inputs
        .test
        .par_iter()
        .map(|s| neighbors::build_graph(s, p.k, p.metric))
        .collect::<Result<Vec<_>>>()?;
    let mut outputs = pairwise_outputs(name, &neighbors::overlap_pairwise(&graphs)?)?;
    for g in &graphs {
        let mut buf = Vec::new();
        g.write_csv(&mut buf)?;
        outputs.push(Output {
            file: format!("{name}_{}_neighbors.csv", g.model_tag()),
            contents: String::from_utf8(buf).expect("csv is utf-8"),
        });
    }
    Ok(outputs)
}

#[derive(Serialize)]
struct KnnModelResult<'a> {
    model_tag: &'a str,
    best: &'a KnnEvalResult,
    sweep: Option<&'a [KnnEvalResult]>,
}

fn knn_analysis(inputs: &Inputs, p: &KnnParams, seed: u64, name: &str) -> Result<Vec<Output>> {
    let opts = KnnOptions {
        k: p.k,
        voting: p.voting,
        temperature: p.temperature,
    };
    let ks: Vec<i64> = match &p.sweep {
        Some(ks) => ks.clone(),
        None => vec![p.k as i64],
    };
    let sweeps = inputs
        .train
        .par_iter()
        .zip(&inputs.test)
        .map(|(train, test)| neighbors::knn_sweep(train, test, &ks, &opts))
        .collect::<Result<Vec<_>>>()?;
    let results: Vec<KnnModelResult> = inputs
        .test
        .iter()
        .zip(&sweeps)
        .map(|(test, sweep)| KnnModelResult {
            model_tag: test.model_tag(),
            best: sweep.best_result(),
            sweep: p.sweep.as_ref().map(|_| sweep.results.as_slice()),
        })
        .collect();
    Ok(vec![Output {
        file: format!("{name}.json"),
        contents: envelope("knn", seed, p, results)?,
    }])
}

#[derive(Serialize)]
struct KmeansModelResult<'a> {
    model_tag: &'a str,
    k: usize,
    mode: KMeansMode,
    inertia: f64,
    best_run_index: usize,
    run_inertias: Vec<f64>,
    iterations: usize,
    hungarian: Option<ClusterAccuracy>,
    greedy: Option<ClusterAccuracy>,
}

fn kmeans_analysis(
    inputs: &Inputs,
    p: &KmeansParams,
    seed: u64,
    name: &str,
) -> Result<Vec<Output>> {
    let labels = inputs.test_labels.as_ref();
    let k = match (p.k, labels) {
        (Some(k), _) => k,
        (None, Some(l)) => l.num_classes(),
        (None, None) => {
            return Err(Error::InvalidParameter(
                "kmeans needs k or test labels".into(),
            ))
        }
    };
    let opts = KMeansOptions {
        k,
        n_init: p.n_init,
        mode: p.mode,
        batch: p.batch,
        max_iter: p.max_iter,
        seed,
    };
    let clusters = inputs
        .test
        .iter()
        .map(|s| clustering::kmeans(s, &opts))
        .collect::<Result<Vec<_>>>()?;
    let mut outputs = Vec::new();
    let mut results = Vec::new();
    for (set, c) in inputs.test.iter().zip(&clusters) {
        let (hungarian, greedy) = match labels {
            Some(l) => (
                (k == l.num_classes())
                    .then(|| clustering::hungarian_accuracy(c, l))
                    .transpose()?,
                Some(clustering::greedy_accuracy(c, l)?),
            ),
            None => (None, None),
        };
        let mut buf = Vec::new();
        c.write_assignments_csv(&mut buf)?;
        outputs.push(Output {
            file: format!("{name}_{}_assignments.csv", set.model_tag()),
            contents: String::from_utf8(buf).expect("csv is utf-8"),
        });
        results.push(KmeansModelResult {
            model_tag: set.model_tag(),
            k: c.k,
            mode: c.mode,
            inertia: c.inertia,
            best_run_index: c.best_run_index,
            run_inertias: c.run_inertias.clone(),
            iterations: c.iterations,
            hungarian,
            greedy,
        });
    }
    outputs.insert(
        0,
        Output {
            file: format!("{name}.json"),
            contents: envelope("kmeans", seed, p, results)?,
        },
    );
    Ok(outputs)
}

#[derive(Serialize)]
struct ProbeModelResult<'a> {
    model_tag: &'a str,
    num_classes: usize,
    train_accuracy: Option<f64>,
    test_accuracy: Option<f64>,
    loss_trace: Vec<f64>,
}

fn probe_config(inputs: &Inputs, p: &ProbeConfig, seed: u64) -> ProbeConfig {
    let classes = [inputs.train_labels.as_ref(), inputs.test_labels.as_ref()]
        .into_iter()
        .flatten()
        .map(LabelSet::num_classes)
        .max();
    ProbeConfig {
        seed,
        num_classes: p.num_classes.or(classes),
        ..p.clone()
    }
}

/// Trains one probe per model and predicts the test set.
fn train_and_predict<'a>(
    inputs: &'a Inputs,
    config: &ProbeConfig,
) -> Result<Vec<(ProbeModelResult<'a>, PredictionSet)>> {
    inputs
        .train
        .par_iter()
        .zip(&inputs.test)
        .map(|(train, test)| {
            let fit = probe::train_probe(train, config)?;
            let on_train = probe::evaluate_probe(&fit.model, train)?;
            let on_test = probe::evaluate_probe(&fit.model, test)?;
            Ok((
                ProbeModelResult {
                    model_tag: test.model_tag(),
                    num_classes: fit.model.num_classes(),
                    train_accuracy: on_train.accuracy,
                    test_accuracy: on_test.accuracy,
                    loss_trace: fit.loss_trace,
                },
                on_test.predictions,
            ))
        })
        .collect()
}

fn probe_analysis(
    inputs: &Inputs,
    p: &ProbeConfig,
    seed: u64,
    name: &str,
) -> Result<(Vec<Output>, Vec<PredictionSet>)> {
    let config = probe_config(inputs, p, seed);
    let (results, preds): (Vec<_>, Vec<_>) =
        train_and_predict(inputs, &config)?.into_iter().unzip();
    let mut outputs = vec![Output {
        file: format!("{name}.json"),
        contents: envelope("probe", seed, &config, results)?,
    }];
    for pred in &preds {
        outputs.push(Output {
            file: format!("{name}_{}_predictions.csv", pred.model_tag),
            contents: pred.to_csv(),
        });
    }
    Ok((outputs, preds))
}

#[derive(Serialize)]
struct OverlapResults {
    partition: OverlapPartition,
    agreement: PairwiseReport,
}

fn overlap_analysis(
    inputs: &Inputs,
    p: &OverlapParams,
    reuse: Option<&[PredictionSet]>,
    seed: u64,
    name: &str,
) -> Result<Vec<Output>> {
    let trained;
    let preds = match reuse {
        Some(preds) => preds,
        None => {
            let config = probe_config(inputs, &p.probe, seed);
            trained = train_and_predict(inputs, &config)?
                .into_iter()
                .map(|(_, pred)| pred)
                .collect::<Vec<_>>();
            &trained
        }
    };
    let labels = inputs
        .test_labels
        .as_ref()
        .ok_or_else(|| Error::MissingLabels("overlap needs test labels".into()))?;
    let partition = overlap::overlap_partition(preds, labels, p.reference.as_deref())?;
    let agreement = overlap::agreement_pairwise(preds)?;
    let agreement_csv = agreement.to_csv()?;
    Ok(vec![
        Output {
            file: format!("{name}.json"),
            contents: envelope(
                "overlap",
                seed,
                p,
                OverlapResults {
                    partition,
                    agreement,
                },
            )?,
        },
        Output {
            file: format!("{name}_agreement.csv"),
            contents: agreement_csv,
        },
    ])
}

/// Loads a config from `path` and runs it.
pub fn run_path(path: &Path) -> Result<RunSummary> {
    run(&RunConfig::from_path(path)?)
}

/// Files written by a run, relative to the output directory, including
/// `summary.json`.
pub fn written_files(summary: &RunSummary) -> Vec<PathBuf> {
    summary
        .analyses
        .iter()
        .flat_map(|a| a.files.iter().map(PathBuf::from))
        .chain(std::iter::once(PathBuf::from("summary.json")))
        .collect()
}
