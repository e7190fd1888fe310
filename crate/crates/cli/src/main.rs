use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use repmetric::cka::{self, CkaOptions};
use repmetric::clustering::{self, KMeansMode, KMeansOptions, DEFAULT_BATCH, DEFAULT_N_INIT};
use repmetric::geometry::{
    self, ToleranceOptions, UniformityOptions, DEFAULT_PAIR_BUDGET, DEFAULT_T,
};
use repmetric::io::{self, Format, LoadOptions};
use repmetric::neighbors::{
    self, KnnOptions, SimilarityMetric, Voting, DEFAULT_KNN_K, DEFAULT_TEMPERATURE,
};
use repmetric::overlap;
use repmetric::probe::{self, PredictionSet, ProbeConfig};
use repmetric::report::{self, ReportFormat};
use repmetric::{align, EmbeddingSet, Error, LabelSet, PairwiseReport, Result, RunConfig};

/// Compare learned representations from precomputed embedding matrices.
///
/// Embedding arguments take the form `[TAG=]PATH`. The format follows the
/// file extension (.npy, .csv, .f32) unless `--input-format` is given, and a
/// file `PATH.ids` next to the input supplies sample ids when present.
#[derive(Parser, Debug)]
#[command(name = "repmetric", version, about, long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Seed for every sampled or randomly initialized step.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for report files; reports go to stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Report format for pairwise matrices.
    #[arg(long, global = true, default_value = "json")]
    format: ReportFormat,

    /// Override the input format instead of guessing from the extension.
    #[arg(long, global = true)]
    input_format: Option<Format>,

    /// CSV inputs start with a header line.
    #[arg(long, global = true)]
    header: bool,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load and validate embeddings, optionally converting them.
    Ingest(IngestArgs),
    /// Uniformity and tolerance on the unit hypersphere.
    Geometry(GeometryArgs),
    /// Pairwise linear CKA.
    Cka(CkaArgs),
    /// CKA between clean and augmented embeddings of the same images.
    Invariance(InvarianceArgs),
    /// Exact k-NN graphs and their pairwise overlap.
    Graph(GraphArgs),
    /// k-NN classification of test embeddings against train embeddings.
    Knn(KnnArgs),
    /// k-means with Hungarian and greedy cluster accuracy.
    Kmeans(KmeansArgs),
    /// Train and evaluate a linear probe.
    Probe(ProbeArgs),
    /// Correctness overlap between probe prediction files.
    Overlap(OverlapArgs),
    /// Run every analysis listed in a JSON config.
    Run(RunArgs),
    /// Write the synthetic fixture set and its config.
    Fixtures,
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// `[TAG=]PATH` of the embeddings.
    input: String,
    /// Label file (newline integers or `id,label` CSV).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// L2-normalize the rows.
    #[arg(long)]
    normalize: bool,
    /// Convert to this format; written to `--out` as `<tag>.<ext>`.
    #[arg(long)]
    to: Option<Format>,
}

#[derive(Args, Debug)]
struct GeometryArgs {
    /// `[TAG=]PATH` of each model's embeddings.
    #[arg(required = true)]
    inputs: Vec<String>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Uniformity scale.
    #[arg(long, default_value_t = DEFAULT_T)]
    t: f64,
    /// Sampled pairs for the Monte-Carlo estimate.
    #[arg(long, default_value_t = DEFAULT_PAIR_BUDGET)]
    pair_budget: u64,
    /// Enumerate every pair regardless of size.
    #[arg(long)]
    exact: bool,
    /// Average over all pairs rather than same-class pairs.
    #[arg(long)]
    unconditional: bool,
    /// Count self-pairs in both averages.
    #[arg(long)]
    include_self_pairs: bool,
}

#[derive(Args, Debug)]
struct CkaArgs {
    #[arg(required = true, num_args = 2..)]
    inputs: Vec<String>,
    /// Subsample size shared by every input; 0 disables subsampling.
    #[arg(long, default_value_t = cka::DEFAULT_SUBSAMPLE)]
    subsample: usize,
    /// L2-normalize rows first.
    #[arg(long)]
    normalize: bool,
}

#[derive(Args, Debug)]
struct InvarianceArgs {
    #[arg(long)]
    clean: String,
    #[arg(long)]
    augmented: String,
}

#[derive(Args, Debug)]
struct GraphArgs {
    #[arg(required = true)]
    inputs: Vec<String>,
    /// Neighbors per node.
    #[arg(long)]
    k: usize,
    #[arg(long, default_value = "cosine")]
    metric: SimilarityMetric,
}

#[derive(Args, Debug)]
struct KnnArgs {
    #[arg(long)]
    train: String,
    #[arg(long)]
    train_labels: PathBuf,
    #[arg(long)]
    test: String,
    #[arg(long)]
    test_labels: PathBuf,
    #[arg(long, default_value_t = DEFAULT_KNN_K)]
    k: usize,
    /// Comma-separated ks to evaluate; the best is reported.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    sweep: Option<Vec<i64>>,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
    /// Unweighted majority vote.
    #[arg(long)]
    uniform: bool,
}

#[derive(Args, Debug)]
struct KmeansArgs {
    input: String,
    /// Defaults to the number of classes in `--labels`.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_N_INIT)]
    n_init: usize,
    #[arg(long, default_value_t = DEFAULT_BATCH)]
    batch: usize,
    #[arg(long, default_value = "auto")]
    mode: KMeansMode,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    train: String,
    #[arg(long)]
    train_labels: PathBuf,
    #[arg(long)]
    test: String,
    #[arg(long)]
    test_labels: Option<PathBuf>,
    /// JSON file with probe settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Save the trained probe header here (weights go beside it).
    #[arg(long)]
    save: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OverlapArgs {
    /// `[TAG=]PATH` of `id,prediction` CSV files.
    #[arg(required = true, num_args = 2..)]
    predictions: Vec<String>,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    reference: Option<String>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("REPMETRIC_THREADS") else {
        return Ok(());
    };
    let threads: usize = value.trim().parse().map_err(|_| {
        Error::ConfigInvalid(format!("REPMETRIC_THREADS={value:?} is not a thread count"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::ConfigInvalid(e.to_string()))
}

struct Ctx<'a> {
    cli: &'a Cli,
}

impl Ctx<'_> {
    fn seed(&self) -> u64 {
        self.cli.seed.unwrap_or(0)
    }

    fn load(&self, arg: &str) -> Result<EmbeddingSet> {
        let (tag, path) = split_tagged(arg);
        let format = match self.cli.input_format {
            Some(f) => f,
            None => Format::from_path(&path).ok_or_else(|| {
                Error::InvalidParameter(format!("cannot infer format of {}", path.display()))
            })?,
        };
        let ids = PathBuf::from(format!("{}.ids", path.display()));
        let options = LoadOptions {
            csv_header: self.cli.header,
            ids_path: ids.is_file().then_some(ids),
        };
        io::load_embeddings_with(&path, format, &tag, &options)
    }

    fn load_many(&self, specs: &[String]) -> Result<Vec<EmbeddingSet>> {
        specs.iter().map(|s| self.load(s)).collect()
    }

    /// Writes `contents` to `<out>/<file>` or prints it.
    fn emit_text(&self, file: &str, contents: &str) -> Result<()> {
        match &self.cli.out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
                let path = dir.join(file);
                fs::write(&path, contents).map_err(|e| io_error(&path, e))?;
                log::info!("wrote {}", path.display());
                Ok(())
            }
            None => {
                print!("{contents}");
                if !contents.ends_with('\n') {
                    println!();
                }
                Ok(())
            }
        }
    }

    fn emit_json<T: serde::Serialize>(&self, stem: &str, value: &T) -> Result<()> {
        if self.cli.format == ReportFormat::Csv {
            return Err(Error::InvalidParameter(format!(
                "{stem} reports are JSON only"
            )));
        }
        self.emit_text(&format!("{stem}.json"), &report::to_json_string(value)?)
    }

    fn emit_pairwise(&self, stem: &str, report: &PairwiseReport) -> Result<()> {
        match self.cli.format {
            ReportFormat::Json => self.emit_text(&format!("{stem}.json"), &report.to_json()?),
            ReportFormat::Csv => self.emit_text(&format!("{stem}.csv"), &report.to_csv()?),
        }
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `TAG=PATH` or `PATH`, whose file stem then becomes the tag.
fn split_tagged(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((tag, path)) if !tag.is_empty() && !tag.contains(['/', '\\']) => {
            (tag.to_string(), PathBuf::from(path))
        }
        _ => {
            let path = PathBuf::from(arg);
            let tag = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| arg.to_string());
            (tag, path)
        }
    }
}

fn labelled(set: EmbeddingSet, labels: &Path) -> Result<EmbeddingSet> {
    let labels = io::load_labels(labels)?;
    let mut aligned = align(&[set], Some(&labels))?;
    Ok(aligned.sets.remove(0))
}

fn dispatch(cli: &Cli) -> Result<u8> {
    let ctx = Ctx { cli };
    match &cli.command {
        Command::Ingest(a) => ingest(&ctx, a),
        Command::Geometry(a) => geometry_cmd(&ctx, a),
        Command::Cka(a) => {
            let sets = ctx.load_many(&a.inputs)?;
            let options = CkaOptions {
                subsample: (a.subsample > 0).then_some(a.subsample),
                seed: ctx.seed(),
                normalize_rows: a.normalize,
                ..CkaOptions::default()
            };
            ctx.emit_pairwise("cka", &cka::cka_pairwise(&sets, &options)?)?;
            Ok(0)
        }
        Command::Invariance(a) => {
            let clean = ctx.load(&a.clean)?;
            let augmented = ctx.load(&a.augmented)?.with_model_tag(clean.model_tag());
            let pair = align(&[clean, augmented], None)?.sets;
            let score = cka::augmentation_invariance(&pair[0], &pair[1])?;
            ctx.emit_json("invariance", &score)?;
            Ok(0)
        }
        Command::Graph(a) => graph_cmd(&ctx, a),
        Command::Knn(a) => knn_cmd(&ctx, a),
        Command::Kmeans(a) => kmeans_cmd(&ctx, a),
        Command::Probe(a) => probe_cmd(&ctx, a),
        Command::Overlap(a) => overlap_cmd(&ctx, a),
        Command::Run(a) => {
            let mut config = RunConfig::from_path(&a.config)?;
            if let Some(seed) = cli.seed {
                config.seed = seed;
            }
            if let Some(out) = &cli.out {
                config.out_dir = out.clone();
            }
            let summary = repmetric::run::run(&config)?;
            for s in &summary.analyses {
                match &s.error {
                    None => eprintln!("{:<12} ok", s.name),
                    Some(e) => eprintln!("{:<12} FAILED: {e}", s.name),
                }
            }
            Ok(summary.exit_code() as u8)
        }
        Command::Fixtures => {
            let dir = cli
                .out
                .clone()
                .ok_or_else(|| Error::InvalidParameter("fixtures needs --out".into()))?;
            let config = repmetric::fixtures::write_fixtures(&dir, ctx.seed())?;
            println!("{}", config.display());
            Ok(0)
        }
    }
}

fn ingest(ctx: &Ctx, a: &IngestArgs) -> Result<u8> {
    let mut set = ctx.load(&a.input)?;
    let mut num_classes = None;
    if let Some(path) = &a.labels {
        set = labelled(set, path)?;
        num_classes = set.labels().map(|l| l.iter().max().map_or(0, |m| m + 1));
    }
    if a.normalize {
        set = set.l2_normalize()?;
    }
    if let Some(format) = a.to {
        let dir = ctx
            .cli
            .out
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("--to needs --out".into()))?;
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        let ext = match format {
            Format::Npy => "npy",
            Format::Csv => "csv",
            Format::Rawf32 => "f32",
        };
        let path = dir.join(format!("{}.{ext}", set.model_tag()));
        io::save_embeddings(&set, &path, format)?;
        io::write_ids(
            &PathBuf::from(format!("{}.ids", path.display())),
            set.sample_ids(),
        )?;
    }
    let summary = json!({
        "model_tag": set.model_tag(),
        "n": set.len(),
        "d": set.dim(),
        "precision": format!("{:?}", set.precision()).to_lowercase(),
        "normalized": set.is_normalized(),
        "num_classes": num_classes,
    });
    println!("{}", report::to_json_string(&summary)?);
    Ok(0)
}

fn geometry_cmd(ctx: &Ctx, a: &GeometryArgs) -> Result<u8> {
    let labels = a.labels.as_deref().map(io::load_labels).transpose()?;
    let uopts = UniformityOptions {
        t: a.t,
        pair_budget: a.pair_budget,
        force_exact: a.exact,
        include_self_pairs: a.include_self_pairs,
        seed: ctx.seed(),
        ..UniformityOptions::default()
    };
    let topts = ToleranceOptions {
        unconditional: a.unconditional,
        include_self_pairs: a.include_self_pairs,
    };
    let mut results = Vec::new();
    for arg in &a.inputs {
        let set = ctx.load(arg)?;
        let aligned = align(&[set], labels.as_ref())?;
        let unit = aligned.sets[0].l2_normalize()?;
        let score = geometry::geometry(&unit, aligned.labels.as_ref(), &uopts, topts)?;
        let mut value = serde_json::to_value(&score)?;
        value["model_tag"] = json!(unit.model_tag());
        results.push(value);
    }
    ctx.emit_json("geometry", &results)?;
    Ok(0)
}

fn graph_cmd(ctx: &Ctx, a: &GraphArgs) -> Result<u8> {
    let sets = ctx.load_many(&a.inputs)?;
    let sets = align(&sets, None)?.sets;
    let graphs = sets
        .iter()
        .map(|s| neighbors::build_graph(s, a.k, a.metric))
        .collect::<Result<Vec<_>>>()?;
    if ctx.cli.out.is_some() {
        for g in &graphs {
            let mut buf = Vec::new();
            g.write_csv(&mut buf)?;
            ctx.emit_text(
                &format!("graph_{}_neighbors.csv", g.model_tag()),
                &String::from_utf8_lossy(&buf),
            )?;
        }
    }
    if graphs.len() >= 2 {
        ctx.emit_pairwise("graph", &neighbors::overlap_pairwise(&graphs)?)?;
    } else if ctx.cli.out.is_none() {
        let mut buf = Vec::new();
        graphs[0].write_csv(&mut buf)?;
        ctx.emit_text("", &String::from_utf8_lossy(&buf))?;
    }
    Ok(0)
}

fn knn_cmd(ctx: &Ctx, a: &KnnArgs) -> Result<u8> {
    let train = labelled(ctx.load(&a.train)?, &a.train_labels)?;
    let test = labelled(ctx.load(&a.test)?, &a.test_labels)?;
    let options = KnnOptions {
        k: a.k,
        voting: if a.uniform {
            Voting::Uniform
        } else {
            Voting::TemperatureWeighted
        },
        temperature: a.temperature,
    };
    match &a.sweep {
        Some(ks) => ctx.emit_json("knn", &neighbors::knn_sweep(&train, &test, ks, &options)?)?,
        None => ctx.emit_json("knn", &neighbors::knn_classify(&train, &test, &options)?)?,
    }
    Ok(0)
}

fn kmeans_cmd(ctx: &Ctx, a: &KmeansArgs) -> Result<u8> {
    let mut set = ctx.load(&a.input)?;
    let labels = match &a.labels {
        Some(path) => {
            let labels = io::load_labels(path)?;
            let aligned = align(&[set], Some(&labels))?;
            set = aligned.sets.into_iter().next().expect("one set");
            aligned.labels
        }
        None => None,
    };
    let k = match (a.k, &labels) {
        (Some(k), _) => k,
        (None, Some(l)) => l.num_classes(),
        (None, None) => {
            return Err(Error::InvalidParameter(
                "kmeans needs --k or --labels".into(),
            ))
        }
    };
    let options = KMeansOptions {
        n_init: a.n_init,
        batch: a.batch,
        mode: a.mode,
        seed: ctx.seed(),
        ..KMeansOptions::new(k)
    };
    let result = clustering::kmeans(&set, &options)?;
    let (hungarian, greedy) = match &labels {
        Some(l) => (
            (k == l.num_classes())
                .then(|| clustering::hungarian_accuracy(&result, l))
                .transpose()?,
            Some(clustering::greedy_accuracy(&result, l)?),
        ),
        None => (None, None),
    };
    let summary = json!({
        "model_tag": set.model_tag(),
        "k": result.k,
        "mode": result.mode,
        "inertia": result.inertia,
        "best_run_index": result.best_run_index,
        "run_inertias": result.run_inertias,
        "iterations": result.iterations,
        "seed": result.seed,
        "hungarian": hungarian,
        "greedy": greedy,
    });
    if ctx.cli.out.is_some() {
        let mut buf = Vec::new();
        result.write_assignments_csv(&mut buf)?;
        ctx.emit_text("kmeans_assignments.csv", &String::from_utf8_lossy(&buf))?;
    }
    ctx.emit_json("kmeans", &summary)?;
    Ok(0)
}

fn probe_cmd(ctx: &Ctx, a: &ProbeArgs) -> Result<u8> {
    let mut config = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            serde_json::from_str::<ProbeConfig>(&text)
                .map_err(|e| Error::ConfigInvalid(e.to_string()))?
        }
        None => ProbeConfig::default(),
    };
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(b) = a.batch {
        config.batch_size = b;
    }
    if let Some(lr) = a.lr {
        config.base_lr = lr;
    }
    if let Some(seed) = ctx.cli.seed {
        config.seed = seed;
    }
    let train_labels = io::load_labels(&a.train_labels)?;
    let train = align(&[ctx.load(&a.train)?], Some(&train_labels))?
        .sets
        .remove(0);
    let mut test = ctx.load(&a.test)?;
    if let Some(path) = &a.test_labels {
        test = labelled(test, path)?;
    }
    if config.num_classes.is_none() {
        config.num_classes = Some(
            train_labels.num_classes().max(
                test.labels()
                    .map_or(0, |l| l.iter().max().map_or(0, |m| m + 1)),
            ),
        );
    }
    let fit = probe::train_probe(&train, &config)?;
    let on_train = probe::evaluate_probe(&fit.model, &train)?;
    let on_test = probe::evaluate_probe(&fit.model, &test)?;
    if let Some(path) = &a.save {
        probe::save_probe(&fit.model, path)?;
    }
    if ctx.cli.out.is_some() {
        ctx.emit_text(
            &format!("probe_{}_predictions.csv", test.model_tag()),
            &on_test.predictions.to_csv(),
        )?;
    }
    let summary = json!({
        "model_tag": train.model_tag(),
        "config": config,
        "train_accuracy": on_train.accuracy,
        "test_accuracy": on_test.accuracy,
        "loss_trace": fit.loss_trace,
    });
    ctx.emit_json("probe", &summary)?;
    Ok(0)
}

fn overlap_cmd(ctx: &Ctx, a: &OverlapArgs) -> Result<u8> {
    let labels = io::load_labels(&a.labels)?;
    let mut sets = Vec::new();
    for arg in &a.predictions {
        let (tag, path) = split_tagged(arg);
        let text = fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
        sets.push(PredictionSet::from_csv(&tag, &text)?);
    }
    let (sets, labels) = align_predictions(sets, &labels)?;
    let partition = overlap::overlap_partition(&sets, &labels, a.reference.as_deref())?;
    let agreement = overlap::agreement_pairwise(&sets)?;
    if ctx.cli.out.is_some() {
        ctx.emit_text("overlap_agreement.csv", &agreement.to_csv()?)?;
    }
    ctx.emit_json(
        "overlap",
        &json!({ "partition": partition, "agreement": agreement }),
    )?;
    Ok(0)
}

/// Restricts prediction files and labels to their shared ids in sorted order.
fn align_predictions(
    sets: Vec<PredictionSet>,
    labels: &LabelSet,
) -> Result<(Vec<PredictionSet>, LabelSet)> {
    use std::collections::{BTreeMap, BTreeSet};
    let mut common: BTreeSet<&String> = labels.sample_ids().iter().collect();
    for s in &sets {
        let ids: BTreeSet<&String> = s.sample_ids.iter().collect();
        common = common.intersection(&ids).copied().collect();
    }
    if common.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    let pick = |ids: &[String], values: &[usize]| -> Vec<usize> {
        let map: BTreeMap<&String, usize> = ids.iter().zip(values.iter().copied()).collect();
        common.iter().map(|id| map[id]).collect()
    };
    let ids: Vec<String> = common.iter().map(|s| s.to_string()).collect();
    let aligned = sets
        .iter()
        .map(|s| {
            PredictionSet::new(
                s.model_tag.clone(),
                ids.clone(),
                pick(&s.sample_ids, &s.predictions),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = LabelSet::with_num_classes(
        ids.clone(),
        pick(labels.sample_ids(), labels.labels()),
        labels.num_classes(),
    )?;
    Ok((aligned, labels))
}
