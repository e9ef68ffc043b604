mod common;

use std::collections::{BTreeSet, HashMap};

use common::*;
use msnet_core::data::Dataset;
use msnet_core::encoder::{Encoder, EncoderConfig};
use msnet_core::image::GrayImage;
use msnet_core::manifest::{Manifest, Record};
use msnet_core::probe::*;
use msnet_core::rng::stream_rng;
use msnet_core::tensor::ParamStore;
use msnet_core::Error;
use proptest::prelude::*;
use rand::Rng;

fn manifest(counts: &[(&str, usize)]) -> Manifest {
    let records = counts
        .iter()
        .flat_map(|&(label, n)| (0..n).map(move |i| Record { path: format!("{label}/{i}.pgm"), label: label.into(), size: None }))
        .collect();
    Manifest::new("/data", records).unwrap()
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn paths(m: &Manifest) -> BTreeSet<String> {
    m.records.iter().map(|r| r.path.clone()).collect()
}

#[test]
fn split_keeps_floor_of_each_class_with_at_least_one() {
    let m = manifest(&[("a", 484), ("b", 5), ("c", 30)]);
    let labels = names(&["a", "b", "c"]);
    let s = split_labeled(&m, &labels, 0.1, 0).unwrap();
    let count = |l: &str| s.records.iter().filter(|r| r.label == l).count();
    assert_eq!((count("a"), count("b"), count("c")), (48, 1, 3));
    assert_eq!(split_labeled(&m, &labels, 1.0, 0).unwrap(), m);
}

#[test]
fn split_preserves_manifest_order() {
    let m = manifest(&[("a", 50), ("b", 50)]);
    let s = split_labeled(&m, &names(&["a", "b"]), 0.5, 4).unwrap();
    let pos: HashMap<&str, usize> = m.records.iter().enumerate().map(|(i, r)| (r.path.as_str(), i)).collect();
    let order: Vec<usize> = s.records.iter().map(|r| pos[r.path.as_str()]).collect();
    assert!(order.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn split_errors() {
    let m = manifest(&[("a", 10)]);
    for f in [0.0, -0.1, 1.5, f64::NAN] {
        assert!(matches!(split_labeled(&m, &names(&["a"]), f, 0), Err(Error::Argument(_))), "{f}");
    }
    assert!(matches!(split_labeled(&m, &names(&["a", "b"]), 0.5, 0), Err(Error::Argument(m)) if m.contains("no samples")));
    assert!(matches!(split_labeled(&m, &names(&["b"]), 0.5, 0), Err(Error::Data(_))));
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn splits_are_nested_and_deterministic(sizes in prop::collection::vec(1usize..120, 1..5), seed in 0u64..1000) {
        let labels: Vec<String> = (0..sizes.len()).map(|i| format!("c{i}")).collect();
        let counts: Vec<(&str, usize)> = labels.iter().map(String::as_str).zip(sizes.iter().copied()).collect();
        let m = manifest(&counts);
        let sets: Vec<BTreeSet<String>> = FRACTIONS.iter().map(|&f| paths(&split_labeled(&m, &labels, f, seed).unwrap())).collect();
        for w in sets.windows(2) {
            prop_assert!(w[0].is_subset(&w[1]));
        }
        prop_assert_eq!(&sets[0], &paths(&split_labeled(&m, &labels, FRACTIONS[0], seed).unwrap()));
        for (i, &n) in sizes.iter().enumerate() {
            let want = ((0.2 * n as f64).floor() as usize).max(1);
            let got = split_labeled(&m, &labels, 0.2, seed).unwrap().records.iter().filter(|r| r.label == labels[i]).count();
            prop_assert_eq!(got, want);
        }
    }
}

#[test]
fn different_seeds_draw_different_subsets() {
    let m = manifest(&[("a", 200)]);
    let labels = names(&["a"]);
    assert_ne!(paths(&split_labeled(&m, &labels, 0.1, 0).unwrap()), paths(&split_labeled(&m, &labels, 0.1, 1).unwrap()));
}

/// Three well separated Gaussian clusters in four dimensions.
fn clusters(seed: u64, per_class: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let centers = [[3.0, 0.0, 0.0, 1.0], [0.0, 3.0, 0.0, -1.0], [0.0, 0.0, 3.0, 0.0]];
    let mut rng = stream_rng(seed, 0);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            x.push(center.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect());
            y.push(c);
        }
    }
    (x, y)
}

#[test]
fn separable_clusters_are_learned_exactly() {
    let classes = names(&["x", "y", "z"]);
    let (x, y) = clusters(1, 40);
    let probe = linear_probe(&x, &y, &classes, &ProbeConfig::default()).unwrap();
    assert_eq!(probe.train_accuracy, 1.0);
    assert!(probe.best_epoch >= 1);
    let (tx, ty) = clusters(2, 20);
    let eval = evaluate_embeddings(&probe, &tx, &ty).unwrap();
    assert_eq!(eval.accuracy, 1.0);
    assert_eq!(eval.confusion.trace(), 60);
}

#[test]
fn zero_epochs_keep_the_initial_head() {
    let classes = names(&["x", "y", "z"]);
    let (x, y) = clusters(3, 40);
    let config = ProbeConfig { epochs: 0, ..ProbeConfig::default() };
    let probe = linear_probe(&x, &y, &classes, &config).unwrap();
    let fresh = LinearProbe::new(4, classes.clone(), config.seed).unwrap();
    assert_eq!(probe.best_epoch, 0);
    assert_eq!(probe.store.fingerprint(), fresh.store.fingerprint());
    assert_eq!(probe.predict(&x).unwrap(), fresh.predict(&x).unwrap());
}

#[test]
fn probe_training_is_deterministic() {
    let classes = names(&["x", "y", "z"]);
    let (x, y) = clusters(4, 30);
    let config = ProbeConfig { epochs: 5, ..ProbeConfig::default() };
    let a = linear_probe(&x, &y, &classes, &config).unwrap();
    let b = linear_probe(&x, &y, &classes, &config).unwrap();
    assert_eq!(a.store.fingerprint(), b.store.fingerprint());
    assert_eq!(a.best_epoch, b.best_epoch);
}

#[test]
fn probe_rejects_bad_inputs() {
    let classes = names(&["x", "y"]);
    let x = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
    assert!(matches!(linear_probe(&x, &[0], &classes, &ProbeConfig::default()), Err(Error::Argument(_))));
    assert!(matches!(linear_probe(&x, &[0, 2], &classes, &ProbeConfig::default()), Err(Error::Data(_))));
    assert!(matches!(linear_probe(&[], &[], &classes, &ProbeConfig::default()), Err(Error::Argument(_))));
    let bad = ProbeConfig { batch_size: 0, ..ProbeConfig::default() };
    assert!(matches!(linear_probe(&x, &[0, 1], &classes, &bad), Err(Error::Config(_))));
    let ragged = vec![vec![0.0, 1.0], vec![1.0]];
    assert!(matches!(linear_probe(&ragged, &[0, 1], &classes, &ProbeConfig { epochs: 1, ..ProbeConfig::default() }), Err(Error::Dimension { .. })));
}

#[test]
fn confusion_of_perfect_and_constant_predictions() {
    let classes = names(&["a", "b", "c"]);
    let truth = [0, 1, 2, 2, 1, 0, 0];
    let perfect = ConfusionMatrix::from_predictions(&truth, &truth, &classes).unwrap();
    assert_eq!(perfect.counts, vec![vec![3, 0, 0], vec![0, 2, 0], vec![0, 0, 2]]);
    assert_eq!(perfect.accuracy(), 1.0);
    let constant = ConfusionMatrix::from_predictions(&truth, &[1; 7], &classes).unwrap();
    assert_eq!(constant.counts, vec![vec![0, 3, 0], vec![0, 2, 0], vec![0, 2, 0]]);
    assert_eq!(constant.accuracy(), 2.0 / 7.0);
    assert_eq!(constant.to_csv(), "true\\predicted,a,b,c\na,0,3,0\nb,0,2,0\nc,0,2,0\n");
    assert_eq!(ConfusionMatrix::from_predictions(&[], &[], &classes).unwrap().accuracy(), 0.0);
}

#[test]
fn confusion_rejects_mismatch_and_out_of_range() {
    let classes = names(&["a", "b"]);
    assert!(matches!(ConfusionMatrix::from_predictions(&[0], &[0, 1], &classes), Err(Error::Argument(_))));
    assert!(matches!(ConfusionMatrix::from_predictions(&[0, 2], &[0, 1], &classes), Err(Error::Data(_))));
}

proptest! {
    #![proptest_config(cases(128))]

    #[test]
    fn confusion_matches_pair_counting(pairs in prop::collection::vec((0usize..3, 0usize..3), 0..200)) {
        let classes = names(&["a", "b", "c"]);
        let truth: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let m = ConfusionMatrix::from_predictions(&truth, &pred, &classes).unwrap();
        let mut oracle: HashMap<(usize, usize), u64> = HashMap::new();
        pairs.iter().for_each(|&p| *oracle.entry(p).or_default() += 1);
        for t in 0..3 {
            for p in 0..3 {
                prop_assert_eq!(m.counts[t][p], oracle.get(&(t, p)).copied().unwrap_or(0));
            }
        }
        prop_assert_eq!(m.total(), pairs.len() as u64);
        let hits = pairs.iter().filter(|p| p.0 == p.1).count();
        prop_assert_eq!(m.trace(), hits as u64);
        if !pairs.is_empty() {
            prop_assert_eq!(m.accuracy(), hits as f64 / pairs.len() as f64);
        }
    }
}

fn small_encoder(seed: u64) -> (Encoder, ParamStore) {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, "encoder", EncoderConfig { input_size: 16, ..EncoderConfig::default() }, &mut stream_rng(seed, 0)).unwrap();
    (enc, store)
}

fn small_dataset(seed: u64, n: usize) -> Dataset {
    let mut rng = stream_rng(seed, 1);
    let class_names = names(&["p", "q"]);
    let mut data = Dataset { paths: vec![], images: vec![], sizes: vec![], labels: vec![], class_names };
    for i in 0..n {
        data.paths.push(format!("img_{i}.pgm"));
        data.images.push(GrayImage::new(16, 16, (0..256).map(|_| rng.random_range(0.0..1.0)).collect(), 1.0).unwrap());
        data.sizes.push((i % 2 == 0).then_some((20.0 + i as f64, 18.0 + i as f64)));
        data.labels.push(i % 2);
    }
    data
}

#[test]
fn embeddings_are_batch_independent() {
    let (enc, store) = small_encoder(0);
    let data = small_dataset(0, 40);
    let all = embed_dataset(&enc, &store, &data).unwrap();
    assert_eq!(all.len(), 40);
    let one = enc.encode(&store, &[&data.images[35]], &[data.sizes[35]]).unwrap();
    assert!(max_abs_diff(&all[35], &one[0]) < 1e-12);
}

#[test]
fn embedding_export_is_a_tsv_of_encoder_outputs() {
    let (enc, store) = small_encoder(1);
    let data = small_dataset(1, 5);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.tsv"), dir.path().join("b.tsv"));
    export_embeddings(&enc, &store, &data, &a).unwrap();
    export_embeddings(&enc, &store, &data, &b).unwrap();
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());

    let d = enc.embedding_dim();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6);
    let header: Vec<&str> = lines[0].split('\t').collect();
    assert_eq!(header.len(), d + 2);
    assert_eq!((header[0], header[1], header[2], header[d + 1]), ("path", "label", "e0", format!("e{}", d - 1).as_str()));
    let want = embed_dataset(&enc, &store, &data).unwrap();
    for (i, line) in lines[1..].iter().enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols[0], data.paths[i]);
        assert_eq!(cols[1], data.class_names[data.labels[i]]);
        let row: Vec<f64> = cols[2..].iter().map(|c| c.parse().unwrap()).collect();
        assert_eq!(row, want[i]);
    }
}

#[test]
fn evaluation_requires_matching_classes() {
    let (enc, store) = small_encoder(2);
    let mut data = small_dataset(2, 4);
    let emb = embed_dataset(&enc, &store, &data).unwrap();
    let probe = linear_probe(&emb, &data.labels, &data.class_names, &ProbeConfig { epochs: 2, ..ProbeConfig::default() }).unwrap();
    let eval = evaluate(&enc, &store, &probe, &data).unwrap();
    assert_eq!(eval.confusion.total(), 4);
    data.class_names = names(&["q", "p"]);
    assert!(matches!(evaluate(&enc, &store, &probe, &data), Err(Error::Data(_))));
}

#[test]
fn activation_map_spans_the_unit_range_at_input_size() {
    let (enc, store) = small_encoder(3);
    let data = small_dataset(3, 1);
    let map = activation_map(&enc, &store, &data.images[0]).unwrap();
    assert_eq!((map.height(), map.width()), (16, 16));
    let lo = map.pixels().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.pixels().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!((lo, hi), (0.0, 1.0));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.pgm");
    export_activation_map(&enc, &store, &data.images[0], &path).unwrap();
    let bytes = GrayImage::load(&path).unwrap().to_u8();
    assert_eq!((bytes.iter().min(), bytes.iter().max()), (Some(&0), Some(&255)));
}

#[test]
fn constant_activation_map_is_all_zero() {
    let (enc, mut store) = small_encoder(4);
    for p in store.iter_mut() {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let data = small_dataset(4, 1);
    let map = activation_map(&enc, &store, &data.images[0]).unwrap();
    assert!(map.pixels().iter().all(|&v| v == 0.0));
}
