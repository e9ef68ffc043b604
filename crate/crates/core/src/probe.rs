//! Frozen-backbone linear evaluation and embedding exports.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::image::{resize_plane, GrayImage};
use crate::io::write_atomic;
use crate::manifest::Manifest;
use crate::nn::Linear;
use crate::rng::tagged_rng;
use crate::tensor::{sgd_step, ParamStore, Tape, Tensor};

const TAG_SPLIT: u64 = 11;
const TAG_PROBE: u64 = 12;

/// Label fractions of the downstream protocol.
pub const FRACTIONS: [f64; 4] = [0.1, 0.2, 0.5, 1.0];

/// Per-class subsample keeping `max(1, ⌊fraction · n_c⌋)` records of each class.
///
/// Each class is shuffled once per seed and the prefix taken, so smaller fractions
/// select subsets of larger ones. Records keep their manifest order.
pub fn split_labeled(manifest: &Manifest, labels: &[String], fraction: f64, seed: u64) -> Result<Manifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::arg(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let classes = manifest.class_indices(labels)?;
    let mut keep = vec![false; manifest.len()];
    for (c, name) in labels.iter().enumerate() {
        let mut members: Vec<usize> = (0..manifest.len()).filter(|&i| classes[i] == c).collect();
        if members.is_empty() {
            return Err(Error::arg(format!("class {name:?} has no samples")));
        }
        let take = ((fraction * members.len() as f64).floor() as usize).max(1);
        members.shuffle(&mut tagged_rng(seed, TAG_SPLIT, c as u64));
        members[..take].iter().for_each(|&i| keep[i] = true);
    }
    let records = manifest.records.iter().zip(&keep).filter(|(_, &k)| k).map(|(r, _)| r.clone()).collect();
    Manifest::new(manifest.root.clone(), records)
}

/// Embeddings of every sample, computed in batches without gradient recording.
pub fn embed_dataset(encoder: &Encoder, store: &ParamStore, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(32) {
        let imgs: Vec<&GrayImage> = chunk.iter().map(|&i| &data.images[i]).collect();
        let sizes: Vec<_> = chunk.iter().map(|&i| data.sizes[i]).collect();
        out.extend(encoder.encode(store, &imgs, &sizes)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 50, lr: 0.1, momentum: 0.9, batch_size: 32, seed: 0 }
    }
}

/// Linear classification head on frozen embeddings.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub store: ParamStore,
    pub layer: Linear,
    pub class_names: Vec<String>,
    /// Training accuracy of the kept parameters.
    pub train_accuracy: f64,
    /// Epoch whose parameters were kept (0: initialization).
    pub best_epoch: usize,
}

impl LinearProbe {
    pub fn new(dim: usize, class_names: Vec<String>, seed: u64) -> Result<Self> {
        if class_names.is_empty() || dim == 0 {
            return Err(Error::Config("probe needs at least one class and a positive dimension".into()));
        }
        let mut store = ParamStore::new();
        let layer = Linear::new(&mut store, "probe.fc", dim, class_names.len(), true, &mut tagged_rng(seed, TAG_PROBE, 0))?;
        Ok(LinearProbe { store, layer, class_names, train_accuracy: 0.0, best_epoch: 0 })
    }

    pub fn logits(&self, embeddings: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let t = Tape::no_grad();
        let x = t.constant(stack(embeddings, self.layer.d_in)?);
        let y = self.layer.forward(&t, &self.store, x)?;
        let rows = t.values(y).chunks(self.layer.d_out).map(<[f64]>::to_vec).collect();
        Ok(rows)
    }

    /// Arg-max class per embedding (lowest index on ties).
    pub fn predict(&self, embeddings: &[Vec<f64>]) -> Result<Vec<usize>> {
        Ok(self.logits(embeddings)?.iter().map(|r| argmax(r)).collect())
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn stack(rows: &[Vec<f64>], dim: usize) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::arg("no embeddings"));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::dim("probe", format!("embedding of length {} where {dim} was expected", r.len())));
    }
    Tensor::new(vec![rows.len(), dim], rows.concat())
}

/// Trains a linear head with softmax cross-entropy by mini-batch SGD and keeps the
/// parameters of the epoch with the best training accuracy.
pub fn linear_probe(embeddings: &[Vec<f64>], labels: &[usize], class_names: &[String], config: &ProbeConfig) -> Result<LinearProbe> {
    if embeddings.len() != labels.len() {
        return Err(Error::arg(format!("{} embeddings but {} labels", embeddings.len(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
        return Err(Error::Data(format!("label index {bad} outside {} classes", class_names.len())));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("probe batch_size must be positive".into()));
    }
    let dim = embeddings.first().map(Vec::len).ok_or_else(|| Error::arg("no embeddings"))?;
    let mut probe = LinearProbe::new(dim, class_names.to_vec(), config.seed)?;
    let accuracy = |p: &LinearProbe| -> Result<f64> {
        let pred = p.predict(embeddings)?;
        Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
    };
    let mut best = (accuracy(&probe)?, 0usize, probe.store.clone());
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut tagged_rng(config.seed, TAG_PROBE, epoch as u64));
        for chunk in order.chunks(config.batch_size) {
            let rows: Vec<Vec<f64>> = chunk.iter().map(|&i| embeddings[i].clone()).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let t = Tape::new();
            let x = t.constant(stack(&rows, dim)?);
            let loss = t.cross_entropy(probe.layer.forward(&t, &probe.store, x)?, &targets)?;
            let grads = t.backward(loss)?;
            probe.store.zero_grad();
            probe.store.accumulate(&grads);
            sgd_step(&mut probe.store, config.lr, config.momentum)?;
        }
        let acc = accuracy(&probe)?;
        if acc > best.0 {
            best = (acc, epoch, probe.store.clone());
        }
    }
    probe.store = best.2;
    probe.train_accuracy = best.0;
    probe.best_epoch = best.1;
    Ok(probe)
}

/// Rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], class_names: &[String]) -> Result<Self> {
        let c = class_names.len();
        if truth.len() != predicted.len() {
            return Err(Error::arg(format!("{} labels but {} predictions", truth.len(), predicted.len())));
        }
        let mut counts = vec![vec![0u64; c]; c];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= c || p >= c {
                return Err(Error::Data(format!("class index outside {c} classes")));
            }
            counts[t][p] += 1;
        }
        Ok(ConfusionMatrix { class_names: class_names.to_vec(), counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }

    /// Header row and first column hold class names.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\predicted");
        for n in &self.class_names {
            write!(s, ",{n}").expect("string write");
        }
        s.push('\n');
        for (n, row) in self.class_names.iter().zip(&self.counts) {
            s.push_str(n);
            for v in row {
                write!(s, ",{v}").expect("string write");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Classifies every sample of `data` with the frozen encoder and `probe`.
pub fn evaluate(encoder: &Encoder, store: &ParamStore, probe: &LinearProbe, data: &Dataset) -> Result<Evaluation> {
    if data.class_names != probe.class_names {
        return Err(Error::Data(format!("test classes {:?} differ from probe classes {:?}", data.class_names, probe.class_names)));
    }
    let emb = embed_dataset(encoder, store, data)?;
    evaluate_embeddings(probe, &emb, &data.labels)
}

pub fn evaluate_embeddings(probe: &LinearProbe, embeddings: &[Vec<f64>], labels: &[usize]) -> Result<Evaluation> {
    let predicted = probe.predict(embeddings)?;
    let confusion = ConfusionMatrix::from_predictions(labels, &predicted, &probe.class_names)?;
    Ok(Evaluation { accuracy: confusion.accuracy(), confusion })
}

pub const PROBE_METRICS_HEADER: &str = "split_fraction,accuracy";

pub fn probe_metrics_csv(rows: &[(f64, f64)]) -> String {
    let mut s = format!("{PROBE_METRICS_HEADER}\n");
    for (f, a) in rows {
        writeln!(s, "{f},{a}").expect("string write");
    }
    s
}

/// Tab-separated embeddings with columns `path`, `label`, `e0` … `e{d-1}`.
pub fn export_embeddings(encoder: &Encoder, store: &ParamStore, data: &Dataset, path: &Path) -> Result<()> {
    let emb = embed_dataset(encoder, store, data)?;
    let d = encoder.embedding_dim();
    let mut s = String::from("path\tlabel");
    for i in 0..d {
        write!(s, "\te{i}").expect("string write");
    }
    s.push('\n');
    for ((p, &l), row) in data.paths.iter().zip(&data.labels).zip(&emb) {
        write!(s, "{p}\t{}", data.class_names[l]).expect("string write");
        for v in row {
            write!(s, "\t{v}").expect("string write");
        }
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

/// Channel mean of the last feature map, bilinearly upsampled to the input size and
/// min-max normalized. A constant map comes out all zero.
pub fn activation_map(encoder: &Encoder, store: &ParamStore, image: &GrayImage) -> Result<GrayImage> {
    let t = Tape::no_grad();
    let x = t.constant(encoder.batch(&[image])?);
    let (fmap, _) = encoder.forward_features(&t, store, x)?;
    let [_, c, h, w] = t.shape(fmap)[..] else { unreachable!("feature maps are rank 4") };
    let mut mean = vec![0.0; h * w];
    for ch in t.values(fmap).chunks(h * w) {
        mean.iter_mut().zip(ch).for_each(|(m, v)| *m += v / c as f64);
    }
    let s = encoder.config.input_size;
    let mut up = resize_plane(&mean, h, w, s, s);
    let lo = up.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = up.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    up.iter_mut().for_each(|v| *v = if span > 0.0 { (*v - lo) / span } else { 0.0 });
    GrayImage::from_clamped(s, s, up, image.resolution())
}

pub fn export_activation_map(encoder: &Encoder, store: &ParamStore, image: &GrayImage, path: &Path) -> Result<()> {
    activation_map(encoder, store, image)?.save(path)
}
