//! Seeded synthetic embeddings: Gaussian matrices, random rotations and
//! labelled blobs. Used by the bundled fixtures and by tests.

use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::rng::{self, Prng};

pub fn gaussian(rows: usize, cols: usize, rng: &mut Prng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Haar-ish random orthogonal matrix by Gram–Schmidt on a Gaussian matrix.
pub fn random_orthogonal(d: usize, rng: &mut Prng) -> Array2<f64> {
    loop {
        let mut q = gaussian(d, d, rng);
        let mut ok = true;
        for j in 0..d {
            let mut col = q.column(j).to_owned();
            // two passes keep the columns orthogonal to machine precision
            for _ in 0..2 {
                for i in 0..j {
                    let prev = q.column(i);
                    let proj = col.dot(&prev);
                    col.scaled_add(-proj, &prev);
                }
            }
            let norm = col.dot(&col).sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            q.column_mut(j).assign(&(col / norm));
        }
        if ok {
            return q;
        }
    }
}

/// Points drawn around `centers` (one row per class) with isotropic noise.
/// Returns rows grouped by class and the matching labels.
pub fn blobs(
    centers: &Array2<f64>,
    per_class: usize,
    sigma: f64,
    rng: &mut Prng,
) -> (Array2<f64>, Vec<usize>) {
    let (c, d) = centers.dim();
    let mut data = gaussian(c * per_class, d, rng) * sigma;
    let mut labels = Vec::with_capacity(c * per_class);
    for (i, mut row) in data.axis_iter_mut(Axis(0)).enumerate() {
        let class = i / per_class;
        row += &centers.row(class);
        labels.push(class);
    }
    (data, labels)
}

/// `count` random directions of length `radius`.
pub fn random_centers(count: usize, d: usize, radius: f64, rng: &mut Prng) -> Array2<f64> {
    let mut m = gaussian(count, d, rng);
    for mut row in m.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v * radius / norm);
    }
    m
}

/// Uniform offsets in `[-scale, scale)` per column.
pub fn random_offset(d: usize, scale: f64, seed: u64) -> Array1<f64> {
    use rand::Rng;
    let mut rng = rng::seeded(seed);
    Array1::from_shape_simple_fn(d, || rng.random_range(-scale..scale))
}
