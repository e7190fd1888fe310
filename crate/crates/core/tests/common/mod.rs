//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use repmetric::neighbors::SimilarityMetric;

/// Plain double loop over ordered pairs i != j.
pub fn uniformity_oracle(x: &Array2<f64>, t: f64) -> f64 {
    let n = x.nrows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d2: f64 = x
                    .row(i)
                    .iter()
                    .zip(x.row(j))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                sum += (-t * d2).exp();
            }
        }
    }
    (sum / (n * (n - 1)) as f64).ln()
}

/// tr(KHLH) / sqrt(tr(KHKH) tr(LHLH)) with an explicit centering matrix.
pub fn hsic_oracle(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let n = x.nrows();
    let h = Array2::<f64>::eye(n) - Array2::<f64>::from_elem((n, n), 1.0 / n as f64);
    let k = x.dot(&x.t());
    let l = y.dot(&y.t());
    let hsic = |a: &Array2<f64>, b: &Array2<f64>| a.dot(&h).dot(b).dot(&h).diag().sum();
    hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
}

/// Best total over every permutation, by Heap's algorithm.
pub fn brute_force_max(w: &[Vec<f64>]) -> f64 {
    let n = w.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let score = |p: &[usize]| p.iter().enumerate().map(|(r, &c)| w[r][c]).sum::<f64>();
    let mut best = score(&perm);
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.max(score(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Full scan: score every other row, sort by score then id.
pub fn scan(
    x: &Array2<f64>,
    ids: &[String],
    k: usize,
    metric: SimilarityMetric,
) -> Vec<Vec<usize>> {
    let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
    (0..rows.len())
        .map(|i| {
            let mut cands: Vec<(usize, f64)> = (0..rows.len())
                .filter(|&j| j != i)
                .map(|j| {
                    let s = match metric {
                        SimilarityMetric::Cosine => {
                            dot(&rows[i], &rows[j])
                                / (dot(&rows[i], &rows[i]) * dot(&rows[j], &rows[j])).sqrt()
                        }
                        SimilarityMetric::Euclidean => -rows[i]
                            .iter()
                            .zip(&rows[j])
                            .map(|(a, b)| (a - b).powi(2))
                            .sum::<f64>(),
                    };
                    (j, s)
                })
                .collect();
            cands.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(ids[a.0].cmp(&ids[b.0])));
            cands.into_iter().take(k).map(|(j, _)| j).collect()
        })
        .collect()
}
