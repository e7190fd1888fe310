//! Synthetic fixture set exercising every input format and analysis.
//!
//! Three models see the same labelled images. `alpha` is a set of class
//! blobs (NPY, f32), `beta` is a rotated and shifted copy of `alpha` with a
//! little noise and shuffled rows (CSV with header and id file), `gamma` is a
//! nonlinear projection to fewer dimensions that misses a few test images
//! (rawf32). `alpha` also has a jittered augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde_json::json;

use crate::embedding::{EmbeddingSet, LabelSet, Precision};
use crate::error::{Error, Result};
use crate::io::{self, Format};
use crate::rng::{self, Prng};
use crate::synthetic;

pub const CLASSES: usize = 4;
pub const DIM: usize = 32;
pub const GAMMA_DIM: usize = 24;
pub const TEST_PER_CLASS: usize = 60;
pub const TRAIN_PER_CLASS: usize = 120;
/// Test images missing from `gamma`.
pub const GAMMA_DROPPED: usize = 8;

struct Split {
    ids: Vec<String>,
    labels: Vec<usize>,
    alpha: Array2<f64>,
    beta: Array2<f64>,
    gamma: Array2<f64>,
}

fn split(
    prefix: &str,
    per_class: usize,
    centers: &Array2<f64>,
    maps: &Maps,
    rng: &mut Prng,
) -> Split {
    let (alpha, labels) = synthetic::blobs(centers, per_class, 1.0, rng);
    let beta = alpha.dot(&maps.rotation)
        + &maps.shift
        + synthetic::gaussian(alpha.nrows(), DIM, rng) * 0.1;
    let gamma = alpha.dot(&maps.projection).mapv(f64::tanh)
        + synthetic::gaussian(alpha.nrows(), GAMMA_DIM, rng) * 0.05;
    let ids = (0..alpha.nrows())
        .map(|i| format!("{prefix}_{i:04}"))
        .collect();
    Split {
        ids,
        labels,
        alpha,
        beta,
        gamma,
    }
}

struct Maps {
    rotation: Array2<f64>,
    shift: ndarray::Array1<f64>,
    projection: Array2<f64>,
}

fn write_set(
    dir: &Path,
    file: &str,
    tag: &str,
    ids: &[String],
    m: Array2<f64>,
    format: Format,
) -> Result<()> {
    let set = EmbeddingSet::new(tag, ids.to_vec(), m)?.with_precision(Precision::F32);
    io::save_embeddings(&set, &dir.join(file), format)
}

fn write_text(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Writes the fixture files and `config.json` into `dir` and returns the
/// config path.
pub fn write_fixtures(dir: &Path, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = rng::seeded(seed);
    let centers = synthetic::random_centers(CLASSES, DIM, 4.0, &mut rng);
    let maps = Maps {
        rotation: synthetic::random_orthogonal(DIM, &mut rng),
        shift: synthetic::random_offset(DIM, 2.0, seed.wrapping_add(1)),
        projection: synthetic::gaussian(DIM, GAMMA_DIM, &mut rng) / (DIM as f64).sqrt(),
    };
    let test = split("test", TEST_PER_CLASS, &centers, &maps, &mut rng);
    let train = split("train", TRAIN_PER_CLASS, &centers, &maps, &mut rng);
    let jitter = &test.alpha + &(synthetic::gaussian(test.alpha.nrows(), DIM, &mut rng) * 0.5);

    for (name, s) in [("test", &test), ("train", &train)] {
        write_set(
            dir,
            &format!("alpha_{name}.npy"),
            "alpha",
            &s.ids,
            s.alpha.clone(),
            Format::Npy,
        )?;
        io::write_ids(&dir.join(format!("alpha_{name}.ids")), &s.ids)?;

        let mut order: Vec<usize> = (0..s.ids.len()).collect();
        rng::shuffle(&mut rng, &mut order);
        let beta = s.beta.select(Axis(0), &order);
        let beta_ids: Vec<String> = order.iter().map(|&i| s.ids[i].clone()).collect();
        let mut csv = (0..DIM)
            .map(|j| format!("f{j}"))
            .collect::<Vec<_>>()
            .join(",");
        csv.push('\n');
        csv.push_str(std::str::from_utf8(&io::encode_csv(beta.view())).expect("ascii"));
        write_text(dir.join(format!("beta_{name}.csv")), &csv)?;
        io::write_ids(&dir.join(format!("beta_{name}.ids")), &beta_ids)?;

        let keep = if name == "test" {
            s.ids.len() - GAMMA_DROPPED
        } else {
            s.ids.len()
        };
        let gamma = s.gamma.slice(ndarray::s![..keep, ..]).to_owned();
        write_set(
            dir,
            &format!("gamma_{name}.f32"),
            "gamma",
            &s.ids[..keep],
            gamma,
            Format::Rawf32,
        )?;
        io::write_ids(&dir.join(format!("gamma_{name}.ids")), &s.ids[..keep])?;

        let labels = LabelSet::with_num_classes(s.ids.clone(), s.labels.clone(), CLASSES)?;
        io::write_labels(&dir.join(format!("{name}_labels.csv")), &labels)?;
    }
    write_set(
        dir,
        "alpha_test_jitter.npy",
        "alpha",
        &test.ids,
        jitter,
        Format::Npy,
    )?;

    let config = json!({
        "seed": seed,
        "out_dir": "out",
        "labels": { "test": "test_labels.csv", "train": "train_labels.csv" },
        "models": [
            {
                "tag": "alpha",
                "test": { "path": "alpha_test.npy", "ids": "alpha_test.ids" },
                "train": { "path": "alpha_train.npy", "ids": "alpha_train.ids" },
                "augmented": { "jitter": { "path": "alpha_test_jitter.npy", "ids": "alpha_test.ids" } }
            },
            {
                "tag": "beta",
                "test": { "path": "beta_test.csv", "header": true, "ids": "beta_test.ids" },
                "train": { "path": "beta_train.csv", "header": true, "ids": "beta_train.ids" }
            },
            {
                "tag": "gamma",
                "test": { "path": "gamma_test.f32", "format": "rawf32", "ids": "gamma_test.ids" },
                "train": { "path": "gamma_train.f32", "format": "rawf32", "ids": "gamma_train.ids" }
            }
        ],
        "analyses": [
            { "kind": "geometry" },
            { "kind": "cka" },
            { "kind": "invariance" },
            { "kind": "graph", "k": 10 },
            { "kind": "knn", "k": 20, "sweep": [0, 5, 10, 20, 40] },
            { "kind": "kmeans", "n_init": 5 },
            { "kind": "probe", "epochs": 20, "batch_size": 64 },
            { "kind": "overlap", "reference": "alpha" }
        ]
    });
    let path = dir.join("config.json");
    let mut text = serde_json::to_string_pretty(&config)?;
    text.push('\n');
    write_text(path.clone(), &text)?;
    Ok(path)
}
