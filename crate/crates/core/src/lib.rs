//! Metrics for comparing learned representations given as precomputed
//! embedding matrices.
//!
//! - [`geometry`]: uniformity and tolerance on the unit hypersphere.
//! - [`cka`]: linear centered kernel alignment and augmentation invariance.
//! - [`neighbors`]: exact k-NN graphs, graph overlap, k-NN classification.
//! - [`clustering`]: k-means(++), Hungarian and greedy cluster accuracy.
//! - [`probe`]: linear probes on frozen features and prediction overlap.
//! - [`run`]: config-driven batch pipeline writing JSON/CSV reports.

pub mod cka;
pub mod clustering;
pub mod config;
pub mod embedding;
pub mod error;
pub mod fixtures;
pub mod geometry;
pub mod io;
pub mod neighbors;
pub mod overlap;
pub mod probe;
pub mod report;
pub mod rng;
pub mod run;
pub mod synthetic;

pub use config::RunConfig;
pub use embedding::{align, EmbeddingSet, LabelSet, Precision};
pub use error::{Error, Result};
pub use report::PairwiseReport;
