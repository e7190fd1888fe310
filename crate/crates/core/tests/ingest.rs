use std::fs;
use std::path::PathBuf;

use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use repmetric::io::{self, Format, LoadOptions};
use repmetric::{align, EmbeddingSet, Error, LabelSet, Precision};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
}

#[test]
fn reads_numpy_f32_and_rewrites_identical_bytes() {
    let bytes = fs::read(data("f32_4x3.npy")).unwrap();
    let (m, precision) = io::parse_npy(&bytes).unwrap();
    assert_eq!(precision, Precision::F32);
    assert_eq!(m.dim(), (4, 3));
    for (i, v) in m.iter().enumerate() {
        assert_eq!(*v, i as f64 / 4.0 - 1.0);
    }
    assert_eq!(io::encode_npy(m.view(), Precision::F32), bytes);
}

#[test]
fn reads_numpy_f64_and_rewrites_identical_bytes() {
    let bytes = fs::read(data("f64_3x2.npy")).unwrap();
    let (m, precision) = io::parse_npy(&bytes).unwrap();
    assert_eq!(precision, Precision::F64);
    assert_eq!(
        m,
        array![[0.1, -2.5], [1e-300, 3.0], [std::f64::consts::PI, -0.0]]
    );
    assert_eq!(io::encode_npy(m.view(), Precision::F64), bytes);
}

#[test]
fn reads_numpy_v2_header() {
    let (m, _) = io::parse_npy(&fs::read(data("v2_f64_2x2.npy")).unwrap()).unwrap();
    assert_eq!(m, array![[1.0, 2.0], [3.0, 4.0]]);
}

#[test]
fn rejects_unsupported_numpy_layouts() {
    for name in ["fortran.npy", "i32.npy", "one_d.npy"] {
        let err = io::parse_npy(&fs::read(data(name)).unwrap()).unwrap_err();
        assert!(
            matches!(err, Error::MalformedHeader { .. }),
            "{name}: {err}"
        );
    }
    assert!(matches!(
        io::parse_npy(b"\x93NUMPZ\x01\x00"),
        Err(Error::MalformedHeader { offset: 0, .. })
    ));
}

#[test]
fn csv_example_and_rejections() {
    let m = io::parse_csv("1,0\n0,1\n1,1".as_bytes(), false).unwrap();
    assert_eq!(m, array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
    assert!(matches!(
        io::parse_csv("1,NaN".as_bytes(), false),
        Err(Error::NonFiniteValue { row: 0, .. })
    ));
    assert!(matches!(
        io::parse_csv("1,2\n3".as_bytes(), false),
        Err(Error::RaggedRow { row: 1, .. })
    ));
    assert!(matches!(
        io::parse_csv("1,x".as_bytes(), false),
        Err(Error::ParseValue { row: 0, col: 1, .. })
    ));
}

#[test]
fn default_ids_and_sidecar_ids() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    fs::write(&path, "1,2\n3,4\n").unwrap();
    let set = io::load_embeddings(&path, Format::Csv, "m").unwrap();
    assert_eq!(set.sample_ids(), ["0", "1"]);
    assert!(!set.is_normalized());

    let ids = dir.path().join("m.ids");
    fs::write(&ids, "b\na\n").unwrap();
    let options = LoadOptions {
        csv_header: false,
        ids_path: Some(ids),
    };
    let set = io::load_embeddings_with(&path, Format::Csv, "m", &options).unwrap();
    assert_eq!(set.sample_ids(), ["b", "a"]);
}

#[test]
fn labels_in_both_formats() {
    let plain = io::parse_labels("0\n2\n1\n").unwrap();
    assert_eq!(plain.labels(), [0, 2, 1]);
    assert_eq!(plain.num_classes(), 3);
    let two = io::parse_labels("id,label\nx,1\ny,0\n").unwrap();
    assert_eq!(two.sample_ids(), ["x", "y"]);
    assert_eq!(two.labels(), [1, 0]);
}

#[test]
fn normalize_examples() {
    let set = EmbeddingSet::from_matrix("m", array![[3.0, 4.0]]).unwrap();
    let unit = set.l2_normalize().unwrap();
    assert_eq!(unit.matrix(), array![[0.6, 0.8]]);
    let again = unit.l2_normalize().unwrap();
    assert!((&again.matrix() - &unit.matrix())
        .iter()
        .all(|d| d.abs() < 1e-7));
    let zero = EmbeddingSet::from_matrix("m", array![[0.0, 0.0]]).unwrap();
    assert!(matches!(zero.l2_normalize(), Err(Error::ZeroNormRow(0))));
}

#[test]
fn align_examples() {
    let a = EmbeddingSet::new(
        "a",
        vec!["a".into(), "b".into(), "c".into()],
        array![[1.0], [2.0], [3.0]],
    )
    .unwrap();
    let b = EmbeddingSet::new(
        "b",
        vec!["d".into(), "c".into(), "b".into()],
        array![[4.0], [3.0], [2.0]],
    )
    .unwrap();
    let out = align(&[a.clone(), b], None).unwrap();
    for s in &out.sets {
        assert_eq!(s.sample_ids(), ["b", "c"]);
        assert_eq!(s.matrix(), array![[2.0], [3.0]]);
    }
    let c = EmbeddingSet::new("c", vec!["z".into()], array![[0.0]]).unwrap();
    assert!(matches!(
        align(&[a, c], None),
        Err(Error::EmptyIntersection)
    ));
}

#[test]
fn subsample_examples() {
    let set = EmbeddingSet::from_matrix(
        "m",
        Array2::from_shape_fn((20, 2), |(i, j)| (i * 2 + j) as f64),
    )
    .unwrap();
    let full = set.subsample(20, 3).unwrap();
    assert_eq!(full.sample_ids(), set.sample_ids());
    let a = set.subsample(5, 9).unwrap();
    let b = set.subsample(5, 9).unwrap();
    assert_eq!(a.sample_ids(), b.sample_ids());
    assert!(matches!(
        set.subsample(21, 0),
        Err(Error::SampleTooLarge { .. })
    ));
}

fn matrix_strategy() -> impl Strategy<Value = Array2<f64>> {
    (1usize..12, 1usize..6).prop_flat_map(|(n, d)| {
        prop::collection::vec(-1e6f64..1e6, n * d)
            .prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap())
    })
}

proptest! {
    #[test]
    fn npy_f64_round_trip_is_bit_exact(m in matrix_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.npy");
        let set = EmbeddingSet::from_matrix("x", m.clone()).unwrap();
        io::save_embeddings(&set, &path, Format::Npy).unwrap();
        let back = io::load_embeddings(&path, Format::Npy, "x").unwrap();
        prop_assert_eq!(back.matrix(), m.view());
    }

    #[test]
    fn rawf32_round_trip_is_bit_exact(m in matrix_strategy()) {
        let m32 = m.mapv(|v| v as f32 as f64);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.f32");
        let set = EmbeddingSet::from_matrix("x", m32.clone()).unwrap();
        io::save_embeddings(&set, &path, Format::Rawf32).unwrap();
        let back = io::load_embeddings(&path, Format::Rawf32, "x").unwrap();
        prop_assert_eq!(back.matrix(), m32.view());
        prop_assert_eq!(back.precision(), Precision::F32);
    }

    #[test]
    fn csv_round_trip_within_tolerance(m in matrix_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        let set = EmbeddingSet::from_matrix("x", m.clone()).unwrap();
        io::save_embeddings(&set, &path, Format::Csv).unwrap();
        let back = io::load_embeddings(&path, Format::Csv, "x").unwrap();
        for (a, b) in back.matrix().iter().zip(m.iter()) {
            prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn align_ignores_row_order(
        n in 2usize..30,
        seed in any::<u64>(),
    ) {
        let ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
        let m = Array2::from_shape_fn((n, 3), |(i, j)| (i * 3 + j) as f64);
        let labels = LabelSet::new(ids.clone(), (0..n).map(|i| i % 3).collect()).unwrap();
        let set = EmbeddingSet::new("a", ids.clone(), m.clone()).unwrap();

        let mut shuffled: Vec<usize> = (0..n).collect();
        shuffled.shuffle(&mut repmetric::rng::seeded(seed));
        let ids2: Vec<String> = shuffled.iter().map(|&i| ids[i].clone()).collect();
        let set2 = EmbeddingSet::new("a", ids2, m.select(ndarray::Axis(0), &shuffled)).unwrap();

        let x = align(&[set.clone(), set.clone()], Some(&labels)).unwrap();
        let y = align(&[set2, set], Some(&labels)).unwrap();
        prop_assert_eq!(x.sets[0].matrix(), y.sets[0].matrix());
        prop_assert_eq!(x.sets[0].sample_ids(), y.sets[0].sample_ids());
        prop_assert_eq!(x.sets[0].labels(), y.sets[0].labels());
    }
}
