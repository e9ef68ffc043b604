mod common;

use std::collections::VecDeque;

use common::*;
use msnet_core::cssl::*;
use msnet_core::data::Dataset;
use msnet_core::encoder::EncoderConfig;
use msnet_core::image::GrayImage;
use msnet_core::rng::stream_rng;
use msnet_core::synth::{default_class_specs, gen_slice, SliceOptions};
use msnet_core::tensor::{ParamStore, Tape, Tensor, Var};
use msnet_core::Error;
use proptest::prelude::*;
use rand::Rng;

fn rows(t: &Tape, data: &[Vec<f64>]) -> Var {
    t.constant(Tensor::new(vec![data.len(), data[0].len()], data.concat()).unwrap())
}

fn at_angle(a: f64) -> Vec<f64> {
    vec![a.cos(), a.sin()]
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// InfoNCE for one query straight from the definition.
fn nce_oracle(q: &[f64], k: &[f64], queue: &[Vec<f64>], tau: f64) -> f64 {
    let logits: Vec<f64> = std::iter::once(dot(q, k)).chain(queue.iter().map(|n| dot(q, n))).map(|s| s / tau).collect();
    neg_log_first(&logits)
}

fn nce(q: &[f64], k: &[f64], queue: &[Vec<f64>], tau: f64) -> msnet_core::Result<f64> {
    let t = Tape::new();
    let v = info_nce(&t, rows(&t, &[q.to_vec()]), rows(&t, &[k.to_vec()]), rows(&t, queue), tau)?;
    t.scalar(v)
}

fn random_simplex(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

#[test]
fn uniform_similarities_give_log_k_plus_one() {
    let q = vec![1.0, 0.0];
    let k = at_angle(0.7);
    for n in [1usize, 255, 1023] {
        let queue = vec![k.clone(); n];
        let loss = nce(&q, &k, &queue, 0.07).unwrap();
        assert!((loss - ((n + 1) as f64).ln()).abs() < 1e-9, "K={n}: {loss}");
    }
    assert!((nce(&q, &k, &vec![k.clone(); 255], 0.07).unwrap() - 5.5452).abs() < 5e-5);
}

#[test]
fn orthogonal_negative_example() {
    let loss = nce(&[1.0, 0.0], &[1.0, 0.0], &[vec![0.0, 1.0]], 1.0).unwrap();
    let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    assert!((loss - want).abs() < 1e-15);
    assert!((loss - 0.3133).abs() < 5e-5);
}

#[test]
fn large_temperature_flattens_the_softmax() {
    let mut rng = stream_rng(11, 0);
    let q = random_unit(&mut rng, 6);
    let k = random_unit(&mut rng, 6);
    let queue: Vec<Vec<f64>> = (0..16).map(|_| random_unit(&mut rng, 6)).collect();
    let loss = nce(&q, &k, &queue, 1e6).unwrap();
    assert!((loss - 17f64.ln()).abs() < 1e-3);
}

#[test]
fn info_nce_matches_the_definition_on_a_batch() {
    let mut rng = stream_rng(12, 0);
    let qs: Vec<Vec<f64>> = (0..3).map(|_| random_unit(&mut rng, 5)).collect();
    let ks: Vec<Vec<f64>> = (0..3).map(|_| random_unit(&mut rng, 5)).collect();
    let queue: Vec<Vec<f64>> = (0..8).map(|_| random_unit(&mut rng, 5)).collect();
    let t = Tape::new();
    let got = t.scalar(info_nce(&t, rows(&t, &qs), rows(&t, &ks), rows(&t, &queue), 0.2).unwrap()).unwrap();
    let want = (0..3).map(|i| nce_oracle(&qs[i], &ks[i], &queue, 0.2)).sum::<f64>() / 3.0;
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn info_nce_rejects_bad_inputs() {
    let q = vec![1.0, 0.0];
    assert!(matches!(nce(&[1.1, 0.0], &q, std::slice::from_ref(&q), 0.1), Err(Error::Argument(_))));
    assert!(matches!(nce(&q, &[0.5, 0.5], std::slice::from_ref(&q), 0.1), Err(Error::Argument(_))));
    assert!(matches!(nce(&q, &q, &[vec![2.0, 0.0]], 0.1), Err(Error::Argument(_))));
    assert!(matches!(nce(&q, &q, std::slice::from_ref(&q), 0.0), Err(Error::Argument(_))));
    // Within the 1e-6 norm tolerance is accepted.
    assert!(nce(&[1.0 + 5e-7, 0.0], &q, std::slice::from_ref(&q), 0.1).is_ok());
}

#[test]
fn gradient_reaches_the_query_only() {
    let t = Tape::new();
    let q = t.input(Tensor::new([1, 2], at_angle(0.3)).unwrap());
    let k = rows(&t, &[at_angle(0.1)]);
    let queue = rows(&t, &[at_angle(2.0), at_angle(-1.0)]);
    let loss = info_nce(&t, q, k, queue, 0.5).unwrap();
    let g = t.backward(loss).unwrap();
    assert!(g.get(q).unwrap().iter().any(|v| v.abs() > 1e-6));
    assert!(g.get(k).is_none() && g.get(queue).is_none());
}

#[test]
fn d_ec_pair_examples() {
    assert_eq!(d_ec_pair_values(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
    assert_eq!(d_ec_pair_values(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]).unwrap(), 0.0);
    assert!(matches!(d_ec_pair_values(&[0.6, 0.6], &[0.5, 0.5]), Err(Error::Argument(_))));
    assert!(matches!(d_ec_pair_values(&[1.5, -0.5], &[0.5, 0.5]), Err(Error::Argument(_))));
    let mut rng = stream_rng(13, 0);
    let (a, b) = (random_simplex(&mut rng, 7), random_simplex(&mut rng, 7));
    let mut want = 0.0;
    for i in 0..7 {
        want += (a[i] - b[i]).powi(2);
    }
    assert!((d_ec_pair_values(&a, &b).unwrap() - want).abs() < 1e-12);
    let t = Tape::new();
    let batch = d_ec_pair(&t, rows(&t, &[a.clone(), b.clone()]), rows(&t, &[b.clone(), a.clone()])).unwrap();
    assert_eq!(t.shape(batch), vec![2]);
    assert!(t.values(batch).iter().all(|v| (v - want).abs() < 1e-12));
}

fn sets(si: &[Vec<f64>], sj: &[Vec<f64>]) -> msnet_core::Result<f64> {
    let t = Tape::new();
    let d = d_ec_sets(&t, rows(&t, si), rows(&t, sj))?;
    t.scalar(d)
}

fn sets_oracle(si: &[Vec<f64>], sj: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for u in si {
        for v in sj {
            total += sq_dist(u, v);
        }
    }
    total / (si.len() * sj.len()) as f64
}

#[test]
fn d_ec_sets_examples() {
    let mut rng = stream_rng(14, 0);
    let (p, q) = (random_simplex(&mut rng, 4), random_simplex(&mut rng, 4));
    assert!((sets(std::slice::from_ref(&p), std::slice::from_ref(&q)).unwrap() - d_ec_pair_values(&p, &q).unwrap()).abs() < 1e-15);
    let triple = vec![p.clone(); 3];
    assert!(sets(&triple, &triple).unwrap().abs() < 1e-15);
    let si: Vec<Vec<f64>> = (0..2).map(|_| random_simplex(&mut rng, 4)).collect();
    let sj: Vec<Vec<f64>> = (0..3).map(|_| random_simplex(&mut rng, 4)).collect();
    assert!((sets(&si, &sj).unwrap() - sets_oracle(&si, &sj)).abs() < 1e-12);

    // An empty set has no tensor representation at all.
    assert!(Tensor::new(vec![0, 4], vec![]).is_err());
    assert!(matches!(sets(&[vec![0.9, 0.9]], &[vec![0.5, 0.5]]), Err(Error::Argument(_))));
}

fn logits_batch(rng: &mut impl Rng, b: usize, d: usize) -> Vec<Vec<f64>> {
    (0..b).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

fn unit_queue(rng: &mut impl Rng, k: usize, d: usize) -> Vec<Vec<f64>> {
    (0..k).map(|_| unit((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())).collect()
}

fn sp(q: &[Vec<f64>], k: &[Vec<f64>], queue: &[Vec<f64>], mode: DecMode, labels: Option<&[usize]>) -> msnet_core::Result<(f64, f64, Option<f64>)> {
    let t = Tape::new();
    let cfg = SpLossConfig { tau: 0.07, dec_mode: mode };
    let l = sp_loss(&t, rows(&t, q), rows(&t, k), rows(&t, queue), &cfg, labels)?;
    Ok((t.scalar(l.total)?, t.scalar(l.info_nce)?, l.d_ec.map(|d| t.scalar(d)).transpose()?))
}

#[test]
fn identical_branches_reduce_to_info_nce() {
    let mut rng = stream_rng(15, 0);
    let q = logits_batch(&mut rng, 3, 5);
    let queue = unit_queue(&mut rng, 8, 5);
    let (total, nce, d) = sp(&q, &q, &queue, DecMode::Pairwise, None).unwrap();
    assert_eq!(d, Some(0.0));
    assert_eq!(total.to_bits(), nce.to_bits());
    let (off, _, none) = sp(&q, &q, &queue, DecMode::Off, None).unwrap();
    assert_eq!(none, None);
    assert_eq!(off.to_bits(), total.to_bits());
}

#[test]
fn sp_loss_terms_match_independent_sum() {
    let mut rng = stream_rng(16, 0);
    let q = logits_batch(&mut rng, 2, 5);
    let k = logits_batch(&mut rng, 2, 5);
    let queue = unit_queue(&mut rng, 8, 5);
    let nce_want = (0..2).map(|i| nce_oracle(&unit(q[i].clone()), &unit(k[i].clone()), &queue, 0.07)).sum::<f64>() / 2.0;
    let dec_want = (0..2).map(|i| sq_dist(&softmax(&q[i]), &softmax(&k[i]))).sum::<f64>() / 2.0;
    let (total, nce, d) = sp(&q, &k, &queue, DecMode::Pairwise, None).unwrap();
    assert!((nce - nce_want).abs() < 1e-12);
    assert!((d.unwrap() - dec_want).abs() < 1e-12);
    assert!((total - (nce_want + dec_want)).abs() < 1e-12);
}

#[test]
fn class_sets_mode_averages_over_classes() {
    let mut rng = stream_rng(17, 0);
    let q = logits_batch(&mut rng, 5, 4);
    let k = logits_batch(&mut rng, 5, 4);
    let queue = unit_queue(&mut rng, 8, 4);
    let labels = [2usize, 0, 2, 2, 0];
    let (_, _, d) = sp(&q, &k, &queue, DecMode::ClassSets, Some(&labels)).unwrap();
    let pick = |x: &[Vec<f64>], c: usize| -> Vec<Vec<f64>> { (0..5).filter(|&i| labels[i] == c).map(|i| softmax(&x[i])).collect() };
    let want = (sets_oracle(&pick(&q, 0), &pick(&k, 0)) + sets_oracle(&pick(&q, 2), &pick(&k, 2))) / 2.0;
    assert!((d.unwrap() - want).abs() < 1e-12);
    assert!(matches!(sp(&q, &k, &queue, DecMode::ClassSets, None), Err(Error::Argument(_))));
    assert!(matches!(sp(&q, &k, &queue, DecMode::ClassSets, Some(&labels[..3])), Err(Error::Dimension { .. })));
}

fn random_store(seed: u64, names: &[&str], scale: f64) -> ParamStore {
    let mut rng = stream_rng(seed, 0);
    let mut s = ParamStore::new();
    for (i, n) in names.iter().enumerate() {
        let len = 3 + i;
        s.add(*n, Tensor::new(vec![len], (0..len).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()).unwrap();
    }
    s
}

const NAMES: [&str; 3] = ["a.weight", "a.bias", "b.weight"];

#[test]
fn momentum_update_follows_the_ema_rule() {
    let q = random_store(1, &NAMES, 2.0);
    let before = random_store(2, &NAMES, 2.0);
    for m in [0.0, 0.5, 0.9, 0.999] {
        let mut k = before.clone();
        momentum_update(&mut k, &q, m).unwrap();
        for ((pk, pb), pq) in k.iter().zip(before.iter()).zip(q.iter()) {
            for ((&a, &b), &c) in pk.tensor.data().iter().zip(pb.tensor.data()).zip(pq.tensor.data()) {
                assert_eq!(a.to_bits(), (m * b + (1.0 - m) * c).to_bits());
            }
        }
    }
    let mut k = before.clone();
    momentum_update(&mut k, &q, 0.0).unwrap();
    assert_eq!(k.fingerprint(), q.fingerprint());
}

#[test]
fn momentum_substitution_and_geometric_series() {
    let ones = |v: f64| {
        let mut s = ParamStore::new();
        s.add("w", Tensor::full(vec![4], v)).unwrap();
        s
    };
    let mut k = ones(0.0);
    momentum_update(&mut k, &ones(1.0), 0.999).unwrap();
    assert!(k.iter().next().unwrap().tensor.data().iter().all(|v| (v - 0.001).abs() < 1e-15));

    let c = 2.5;
    for m in [0.9, 0.99, 0.999] {
        let mut k = ones(0.0);
        let q = ones(c);
        for _ in 0..10 {
            momentum_update(&mut k, &q, m).unwrap();
        }
        let want = c * (1.0 - f64::powi(m, 10));
        assert!(k.iter().next().unwrap().tensor.data().iter().all(|v| (v - want).abs() < 1e-12), "m={m}");
    }
}

#[test]
fn momentum_update_rejects_misaligned_stores_and_bad_coefficients() {
    let q = random_store(1, &NAMES, 1.0);
    let mut k = random_store(1, &["a.weight", "a.bias", "c.weight"], 1.0);
    match momentum_update(&mut k, &q, 0.9) {
        Err(Error::State(msg)) => assert!(msg.contains("c.weight") || msg.contains("b.weight"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let mut k = q.clone();
    assert!(matches!(momentum_update(&mut k, &q, 1.0), Err(Error::Argument(_))));
    assert!(matches!(momentum_update(&mut k, &q, -0.1), Err(Error::Argument(_))));
}

#[test]
fn queue_fifo_example_and_errors() {
    let e = |i: usize| {
        let mut v = vec![0.0; 5];
        v[i] = 1.0;
        v
    };
    let mut q = NegativeQueue::new(4, 5).unwrap();
    assert!(matches!(q.to_tensor(), Err(Error::State(_))));
    q.enqueue(&[e(0), e(1), e(2), e(3)]).unwrap();
    q.enqueue(&[e(4)]).unwrap();
    let got: Vec<Vec<f64>> = q.iter().map(<[f64]>::to_vec).collect();
    assert_eq!(got, vec![e(1), e(2), e(3), e(4)]);
    assert_eq!(q.to_tensor().unwrap().shape(), &[4, 5]);
    assert!(matches!(q.enqueue(&vec![e(0); 5]), Err(Error::Argument(_))));
    assert!(matches!(q.enqueue(&[vec![0.5; 5]]), Err(Error::Argument(_))));
    assert!(matches!(q.enqueue(&[vec![1.0, 0.0]]), Err(Error::Dimension { .. })));
    // Failed enqueues leave the queue untouched.
    assert_eq!(q.iter().map(<[f64]>::to_vec).collect::<Vec<_>>(), vec![e(1), e(2), e(3), e(4)]);
    assert!(matches!(NegativeQueue::new(0, 5), Err(Error::Config(_))));
}

#[test]
fn queue_matches_a_reference_fifo_over_random_operations() {
    let mut rng = stream_rng(18, 0);
    let (cap, dim) = (37, 3);
    let mut q = NegativeQueue::new(cap, dim).unwrap();
    let mut model: VecDeque<Vec<f64>> = VecDeque::new();
    for _ in 0..10_000 {
        let b = rng.random_range(1..=cap);
        let keys: Vec<Vec<f64>> = (0..b).map(|_| random_unit(&mut rng, dim)).collect();
        q.enqueue(&keys).unwrap();
        for k in keys {
            model.push_back(k);
            if model.len() > cap {
                model.pop_front();
            }
        }
        assert!(q.len() <= cap);
        assert_eq!(q.len(), model.len());
        assert!(q.iter().zip(&model).all(|(a, b)| a == b.as_slice()));
        assert!(q.iter().all(|v| (v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() <= UNIT_TOL));
    }
    assert!(q.is_full());
}

fn test_image(seed: u64) -> GrayImage {
    let spec = &default_class_specs()[1];
    gen_slice(spec, &SliceOptions::default(), &mut stream_rng(seed, 0)).unwrap().image
}

#[test]
fn identity_policy_only_resizes() {
    let img = test_image(1);
    let out = augment(&img, &AugmentPolicy::identity(32), &mut stream_rng(0, 0)).unwrap();
    assert_eq!(out, img.resize(32, 32).unwrap());
    let same = augment(&img, &AugmentPolicy::identity(64), &mut stream_rng(0, 0)).unwrap();
    assert_eq!(same.pixels(), img.pixels());
}

#[test]
fn blur_keeps_a_constant_image() {
    let img = GrayImage::filled(40, 40, 0.37).unwrap();
    let policy = AugmentPolicy { blur_prob: 1.0, blur_sigma: (0.5, 2.0), ..AugmentPolicy::identity(40) };
    for s in 0..5 {
        let out = augment(&img, &policy, &mut stream_rng(s, 0)).unwrap();
        assert!(out.pixels().iter().all(|v| (v - 0.37).abs() < 1e-12));
    }
}

#[test]
fn augmentation_is_seeded_and_stays_in_range() {
    let img = test_image(2);
    let policy = AugmentPolicy::default();
    let a = augment(&img, &policy, &mut stream_rng(9, 3)).unwrap();
    let b = augment(&img, &policy, &mut stream_rng(9, 3)).unwrap();
    let c = augment(&img, &policy, &mut stream_rng(9, 4)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!((a.height(), a.width()), (64, 64));
    assert!(a.pixels().iter().chain(c.pixels()).all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn invalid_policies_are_config_errors() {
    let bad = [
        AugmentPolicy { crop_scale: (0.0, 1.0), ..AugmentPolicy::default() },
        AugmentPolicy { crop_scale: (0.8, 0.6), ..AugmentPolicy::default() },
        AugmentPolicy { flip_prob: 1.5, ..AugmentPolicy::default() },
        AugmentPolicy { blur_sigma: (2.0, 1.0), ..AugmentPolicy::default() },
        AugmentPolicy { rotation_deg: -1.0, ..AugmentPolicy::default() },
        AugmentPolicy { output_size: 8, ..AugmentPolicy::default() },
    ];
    for p in bad {
        assert!(matches!(p.validate(), Err(Error::Config(_))), "{p:?}");
    }
}

fn tiny_setup() -> (NetworkConfig, PretrainConfig, Dataset) {
    let net = NetworkConfig { encoder: EncoderConfig { input_size: 16, ..EncoderConfig::default() }, head_hidden: 16, head_out: 8 };
    let cfg = PretrainConfig {
        epochs: 1,
        batch_size: 4,
        queue_size: 8,
        augment: AugmentPolicy { output_size: 16, ..AugmentPolicy::default() },
        seed: 5,
        ..PretrainConfig::default()
    };
    let specs = default_class_specs();
    let mut data = Dataset { paths: vec![], images: vec![], sizes: vec![], labels: vec![], class_names: specs.iter().map(|s| s.name.clone()).collect() };
    for i in 0..8 {
        let spec = &specs[i % 4];
        let slice = gen_slice(spec, &SliceOptions::default(), &mut stream_rng(5, i as u64)).unwrap();
        data.paths.push(format!("{i}.pgm"));
        data.images.push(slice.image.resize(16, 16).unwrap());
        data.sizes.push(Some((spec.length_m, spec.wingspan_m)));
        data.labels.push(i % 4);
    }
    (net, cfg, data)
}

#[test]
fn one_epoch_is_bitwise_reproducible() {
    let (net_cfg, cfg, data) = tiny_setup();
    let run = |dir: &std::path::Path| {
        let (net, mut store) = Network::build(&net_cfg, 5).unwrap();
        let out = pretrain(&net, &mut store, &data, &cfg, Some(dir)).unwrap();
        (out.metrics, store.fingerprint(), out.key_store.fingerprint(), std::fs::read(dir.join("metrics.csv")).unwrap())
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (a, b) = (run(d1.path()), run(d2.path()));
    assert_eq!(a.0.len(), 1);
    assert!(a.0[0].mean_loss.is_finite() && a.0[0].mean_loss > 0.0);
    assert_eq!(a.0, b.0);
    assert_eq!((a.1, a.2), (b.1, b.2));
    assert_eq!(a.3, b.3);
    assert!(String::from_utf8(a.3).unwrap().starts_with(METRICS_HEADER));
    assert!(d1.path().join("checkpoint.msnc").exists());
}

#[test]
fn key_network_moves_only_by_averaging() {
    let (net_cfg, mut cfg, data) = tiny_setup();
    let (net, init) = Network::build(&net_cfg, 5).unwrap();

    // With m = 0 the key network is a copy of the query network after every step.
    cfg.momentum = 0.0;
    let mut store = init.clone();
    let out = pretrain(&net, &mut store, &data, &cfg, None).unwrap();
    assert_eq!(out.key_store.fingerprint(), store.fingerprint());

    // With m close to 1 it barely leaves the initialization: two steps of at most
    // (1 − m)·‖θ_q − θ_k‖∞ each.
    cfg.momentum = 0.999;
    let mut store = init.clone();
    let out = pretrain(&net, &mut store, &data, &cfg, None).unwrap();
    let mut drift: f64 = 0.0;
    let mut spread: f64 = 0.0;
    for ((k, i), q) in out.key_store.iter().zip(init.iter()).zip(store.iter()) {
        drift = drift.max(max_abs_diff(k.tensor.data(), i.tensor.data()));
        spread = spread.max(max_abs_diff(q.tensor.data(), i.tensor.data()));
    }
    assert!(drift > 0.0);
    assert!(drift <= 2.0 * 0.001 * spread + 1e-15, "{drift} vs {spread}");
}

#[test]
fn pretrain_rejects_empty_data_and_bad_configs() {
    let (net_cfg, cfg, data) = tiny_setup();
    let (net, mut store) = Network::build(&net_cfg, 5).unwrap();
    let empty = data.subset(&[]);
    assert!(matches!(pretrain(&net, &mut store, &empty, &cfg, None), Err(Error::Argument(_))));
    let bad = PretrainConfig { batch_size: 16, ..cfg.clone() };
    assert!(matches!(pretrain(&net, &mut store, &data, &bad, None), Err(Error::Config(_))));
    let bad = PretrainConfig { loss: SpLossConfig { tau: 0.0, ..cfg.loss }, ..cfg.clone() };
    assert!(matches!(pretrain(&net, &mut store, &data, &bad, None), Err(Error::Config(_))));
    let bad = PretrainConfig { augment: AugmentPolicy::default(), ..cfg.clone() };
    assert!(matches!(pretrain(&net, &mut store, &data, &bad, None), Err(Error::Config(_))));
}

#[test]
fn consistency_is_zero_between_a_network_and_itself_on_identity_views() {
    let (net_cfg, _, data) = tiny_setup();
    let (net, store) = Network::build(&net_cfg, 5).unwrap();
    let c = branch_consistency(&net, &store, &store, &data, &AugmentPolicy::identity(16), 1).unwrap();
    assert_eq!(c, 0.0);
    let c = branch_consistency(&net, &store, &store, &data, &AugmentPolicy { output_size: 16, ..AugmentPolicy::default() }, 1).unwrap();
    assert!(c > 0.0);
}

proptest! {
    #![proptest_config(cases(128))]

    #[test]
    fn lowering_a_negative_similarity_lowers_the_loss(angles in prop::collection::vec(0.0..3.0f64, 1..12), pick in any::<prop::sample::Index>(), step in 0.01..0.14f64) {
        let q = vec![1.0, 0.0];
        let k = at_angle(0.2);
        let queue: Vec<Vec<f64>> = angles.iter().map(|&a| at_angle(a)).collect();
        let i = pick.index(angles.len());
        let mut moved = queue.clone();
        moved[i] = at_angle(angles[i] + step);
        prop_assert!(nce(&q, &k, &moved, 0.5).unwrap() < nce(&q, &k, &queue, 0.5).unwrap());
    }

    #[test]
    fn d_ec_pair_is_a_squared_metric(seed in any::<u64>(), n in 2usize..10) {
        let mut rng = stream_rng(seed, 0);
        let (a, b) = (random_simplex(&mut rng, n), random_simplex(&mut rng, n));
        let ab = d_ec_pair_values(&a, &b).unwrap();
        prop_assert_eq!(ab, d_ec_pair_values(&b, &a).unwrap());
        prop_assert!(ab > 0.0);
        prop_assert_eq!(d_ec_pair_values(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn d_ec_sets_is_symmetric(seed in any::<u64>(), mi in 1usize..5, mj in 1usize..5) {
        let mut rng = stream_rng(seed, 1);
        let si: Vec<Vec<f64>> = (0..mi).map(|_| random_simplex(&mut rng, 4)).collect();
        let sj: Vec<Vec<f64>> = (0..mj).map(|_| random_simplex(&mut rng, 4)).collect();
        let (a, b) = (sets(&si, &sj).unwrap(), sets(&sj, &si).unwrap());
        prop_assert!((a - b).abs() < 1e-15);
        prop_assert!((a - sets_oracle(&si, &sj)).abs() < 1e-12);
    }

    #[test]
    fn sp_loss_is_non_negative(seed in any::<u64>(), pairwise in any::<bool>()) {
        let mut rng = stream_rng(seed, 2);
        let q = logits_batch(&mut rng, 4, 6);
        let k = logits_batch(&mut rng, 4, 6);
        let queue = unit_queue(&mut rng, 16, 6);
        let mode = if pairwise { DecMode::Pairwise } else { DecMode::ClassSets };
        let (total, nce, d) = sp(&q, &k, &queue, mode, Some(&[0, 1, 0, 1])).unwrap();
        prop_assert!(total >= 0.0 && nce >= 0.0 && d.unwrap() >= 0.0);
    }

    #[test]
    fn momentum_drift_is_bounded(seed in any::<u64>(), m in 0.0..0.9999f64) {
        let q = random_store(seed, &NAMES, 3.0);
        let before = random_store(seed ^ 1, &NAMES, 3.0);
        let mut k = before.clone();
        momentum_update(&mut k, &q, m).unwrap();
        let mut gap: f64 = 0.0;
        let mut step: f64 = 0.0;
        for ((pk, pb), pq) in k.iter().zip(before.iter()).zip(q.iter()) {
            gap = gap.max(max_abs_diff(pq.tensor.data(), pb.tensor.data()));
            step = step.max(max_abs_diff(pk.tensor.data(), pb.tensor.data()));
        }
        prop_assert!(step <= (1.0 - m) * gap * (1.0 + 1e-12) + 1e-15);
    }
}
