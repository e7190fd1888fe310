mod common;

use common::hsic_oracle;
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;
use repmetric::cka::{self, CkaOptions, CkaStrategy};
use repmetric::synthetic;
use repmetric::{rng, EmbeddingSet, Error};

fn set(tag: &str, m: Array2<f64>) -> EmbeddingSet {
    EmbeddingSet::from_matrix(tag, m).unwrap()
}

fn value(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    cka::linear_cka(&set("x", x.clone()), &set("y", y.clone()))
        .unwrap()
        .value
}

#[test]
fn small_examples() {
    let x = array![[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]];
    let y = array![[2.0, 0.0], [0.0, 2.0], [-2.0, -2.0]];
    assert!((value(&x, &y) - 1.0).abs() < 1e-12);
    let z = array![[1.0, 0.0], [-1.0, 0.0], [0.0, 0.0]];
    let v = value(&x, &z);
    assert!((v - hsic_oracle(&x, &z)).abs() < 1e-12);
    // both already centered: |Z'X|^2 = 2, |X'X| = sqrt(10), |Z'Z| = 2
    assert!((v - 1.0 / 10f64.sqrt()).abs() < 1e-12, "{v}");
}

#[test]
fn degenerate_and_misaligned() {
    let x = array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]];
    let y = array![[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]];
    assert!(matches!(
        cka::linear_cka(&set("x", x), &set("y", y.clone())),
        Err(Error::DegenerateInput(_))
    ));
    let short = array![[1.0, 0.0], [0.0, 1.0]];
    assert!(matches!(
        cka::linear_cka(&set("x", short.clone()), &set("y", short)),
        Err(Error::TooFewSamples { .. })
    ));
    let other_ids =
        EmbeddingSet::new("z", vec!["a".into(), "b".into(), "c".into()], y.clone()).unwrap();
    assert!(matches!(
        cka::linear_cka(&set("y", y), &other_ids),
        Err(Error::NotAligned(_))
    ));
}

#[test]
fn pairwise_matches_scalar_calls() {
    let mut r = rng::seeded(4);
    let a = synthetic::gaussian(50, 6, &mut r);
    let b = synthetic::gaussian(50, 4, &mut r) + a.slice(ndarray::s![.., ..4]);
    let c = synthetic::gaussian(50, 9, &mut r);
    let sets = [set("a", a), set("b", b), set("c", c)];
    let report = cka::cka_pairwise(
        &sets,
        &CkaOptions {
            subsample: None,
            ..CkaOptions::default()
        },
    )
    .unwrap();
    assert_eq!(report.metric_name(), "linear_cka");
    for i in 0..3 {
        assert_eq!(report.get(i, i), 1.0);
        for j in 0..3 {
            if i != j {
                let scalar = cka::linear_cka(&sets[i], &sets[j]).unwrap().value;
                assert!((report.get(i, j) - scalar).abs() < 1e-12);
            }
        }
    }
    assert!(report.is_symmetric(0.0));
}

#[test]
fn pairwise_identical_and_rotated() {
    let mut r = rng::seeded(8);
    let x = synthetic::gaussian(40, 5, &mut r);
    let q = synthetic::random_orthogonal(5, &mut r);
    let noise = synthetic::gaussian(40, 5, &mut r);
    let report = cka::cka_pairwise(
        &[set("x", x.clone()), set("xq", x.dot(&q)), set("n", noise)],
        &CkaOptions::default(),
    )
    .unwrap();
    assert!((report.get(0, 1) - 1.0).abs() < 1e-9);
    assert!(report.get(0, 2) < 1.0);
    assert!(report.get(1, 2) < 1.0);
}

#[test]
fn pairwise_subsample_is_shared_and_recorded() {
    let mut r = rng::seeded(2);
    let x = synthetic::gaussian(300, 4, &mut r);
    let y = synthetic::gaussian(300, 4, &mut r) + &x;
    let opts = CkaOptions {
        subsample: Some(100),
        seed: 77,
        ..CkaOptions::default()
    };
    // zero-padded ids keep the canonical order equal to the row order
    let ids: Vec<String> = (0..300).map(|i| format!("{i:03}")).collect();
    let sx = EmbeddingSet::new("x", ids.clone(), x.clone()).unwrap();
    let sy = EmbeddingSet::new("y", ids, y.clone()).unwrap();
    let report = cka::cka_pairwise(&[sx, sy], &opts).unwrap();
    assert_eq!(report.params()["subsample_n"], 100);
    assert_eq!(report.params()["subsample_seed"], 77);
    let idx = rng::sample_indices(300, 100, 77);
    let direct = value(
        &x.select(ndarray::Axis(0), &idx),
        &y.select(ndarray::Axis(0), &idx),
    );
    assert!((report.get(0, 1) - direct).abs() < 1e-12);
}

#[test]
fn invariance_examples() {
    let mut r = rng::seeded(21);
    let clean = synthetic::gaussian(1000, 64, &mut r);
    let q = synthetic::random_orthogonal(64, &mut r);
    let noise = synthetic::gaussian(1000, 64, &mut r);
    let c = set("m", clean.clone());
    assert!((cka::augmentation_invariance(&c, &c).unwrap().value - 1.0).abs() < 1e-12);
    let rotated = cka::augmentation_invariance(&c, &set("m", clean.dot(&q))).unwrap();
    assert!((rotated.value - 1.0).abs() < 1e-9);
    assert!(
        cka::augmentation_invariance(&c, &set("m", noise))
            .unwrap()
            .value
            < 0.1
    );
}

fn random_pair(seed: u64, n: usize, dx: usize, dy: usize) -> (Array2<f64>, Array2<f64>) {
    let mut r = rng::seeded(seed);
    (
        synthetic::gaussian(n, dx, &mut r),
        synthetic::gaussian(n, dy, &mut r),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn value_in_unit_interval_and_symmetric(seed in any::<u64>(), n in 3usize..40, dx in 1usize..12, dy in 1usize..12) {
        let (x, y) = random_pair(seed, n, dx, dy);
        let ab = value(&x, &y);
        let ba = value(&y, &x);
        prop_assert!((0.0..=1.0 + 1e-9).contains(&ab));
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feature_and_gram_paths_agree(seed in any::<u64>(), n in 3usize..200, dx in 1usize..50, dy in 1usize..50) {
        let (x, y) = random_pair(seed, n, dx, dy);
        let f = cka::linear_cka_matrices(x.view(), y.view(), CkaStrategy::Feature).unwrap();
        let g = cka::linear_cka_matrices(x.view(), y.view(), CkaStrategy::Gram).unwrap();
        prop_assert!((f - g).abs() < 1e-9, "{} vs {}", f, g);
    }

    #[test]
    fn row_offset_is_absorbed(seed in any::<u64>(), n in 3usize..60, dx in 1usize..10, dy in 1usize..10) {
        let (x, y) = random_pair(seed, n, dx, dy);
        let offset = Array1::from_shape_fn(dx, |j| 10.0 * (j as f64 + 1.0));
        let base = value(&x, &y);
        let shifted = value(&(&x + &offset), &y);
        prop_assert!((base - shifted).abs() < 1e-9);
    }

    #[test]
    fn matches_hsic_oracle(seed in any::<u64>(), n in 3usize..30, dx in 1usize..8, dy in 1usize..8) {
        let (x, y) = random_pair(seed, n, dx, dy);
        prop_assert!((value(&x, &y) - hsic_oracle(&x, &y)).abs() < 1e-9);
    }
}
