//! Momentum-contrast self-supervised pretraining with the size-consistency loss.
//!
//! A query network (encoder plus projection head) is trained by SGD; a key network of
//! identical structure follows it by exponential moving average and fills a FIFO queue
//! of negatives. The loss is InfoNCE plus a squared Euclidean distance between the
//! softmax distributions of the two branches.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::Dataset;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::io::{create_dir_all, write_atomic};
use crate::nn::Linear;
use crate::rng::tagged_rng;
use crate::tensor::{sgd_step, LrSchedule, ParamStore, Tape, Tensor, Var};

/// Allowed deviation of a unit vector's norm, and of a distribution's mass, from 1.
pub const UNIT_TOL: f64 = 1e-6;

const TAG_SHUFFLE: u64 = 1;
const TAG_VIEW: u64 = 2;
const TAG_WARMUP: u64 = 3;
const TAG_HELDOUT: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub output_size: usize,
    pub crop: bool,
    /// Fraction of the shorter side's square area kept by the random crop.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    pub rotate: bool,
    pub rotation_deg: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            output_size: 64,
            crop: true,
            crop_scale: (0.6, 1.0),
            flip_prob: 0.5,
            rotate: true,
            rotation_deg: 15.0,
            blur_prob: 0.5,
            blur_sigma: (0.1, 2.0),
        }
    }
}

impl AugmentPolicy {
    /// No augmentation at all: output is the input resized to `output_size`.
    pub fn identity(output_size: usize) -> Self {
        AugmentPolicy { output_size, crop: false, flip_prob: 0.0, rotate: false, blur_prob: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64, what: &str| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} must be in [0, 1], got {p}")))
            }
        };
        prob(self.flip_prob, "flip_prob")?;
        prob(self.blur_prob, "blur_prob")?;
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop_scale {:?} must satisfy 0 < lo <= hi <= 1", self.crop_scale)));
        }
        let (s0, s1) = self.blur_sigma;
        if !(s0 >= 0.0 && s0 <= s1) {
            return Err(Error::Config(format!("blur_sigma {:?} is not a range", self.blur_sigma)));
        }
        if !(self.rotation_deg >= 0.0 && self.rotation_deg.is_finite()) {
            return Err(Error::Config(format!("rotation_deg must be non-negative, got {}", self.rotation_deg)));
        }
        if self.output_size < 16 {
            return Err(Error::Config(format!("output_size must be at least 16, got {}", self.output_size)));
        }
        Ok(())
    }
}

/// Random crop → resize → flip → rotation → Gaussian blur, in that order.
pub fn augment(image: &GrayImage, policy: &AugmentPolicy, rng: &mut impl Rng) -> Result<GrayImage> {
    let mut img = image.clone();
    if policy.crop {
        let short = img.height().min(img.width());
        let scale = rng.random_range(policy.crop_scale.0..=policy.crop_scale.1);
        let side = ((scale.sqrt() * short as f64).round() as usize).clamp(16.min(short), short);
        let y0 = rng.random_range(0..=img.height() - side);
        let x0 = rng.random_range(0..=img.width() - side);
        img = img.crop(y0, x0, side, side)?;
    }
    let s = policy.output_size;
    img = img.resize(s, s)?;
    if policy.flip_prob > 0.0 && rng.random_bool(policy.flip_prob) {
        img = img.flip_horizontal();
    }
    if policy.rotate && policy.rotation_deg > 0.0 {
        let a = rng.random_range(-policy.rotation_deg..=policy.rotation_deg);
        img = img.rotate(a.to_radians());
    }
    if policy.blur_prob > 0.0 && rng.random_bool(policy.blur_prob) {
        img = img.blur(rng.random_range(policy.blur_sigma.0..=policy.blur_sigma.1));
    }
    Ok(img)
}

/// Fixed-capacity FIFO of unit-norm key vectors.
#[derive(Clone, Debug)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<f64>>,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config(format!("queue needs positive capacity and dimension, got {capacity} x {dim}")));
        }
        Ok(NegativeQueue { capacity, dim, entries: VecDeque::with_capacity(capacity) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(Vec::as_slice)
    }

    /// Appends `keys` in order, evicting the oldest entries beyond capacity.
    pub fn enqueue(&mut self, keys: &[Vec<f64>]) -> Result<()> {
        if keys.len() > self.capacity {
            return Err(Error::arg(format!("batch of {} exceeds queue capacity {}", keys.len(), self.capacity)));
        }
        for k in keys {
            if k.len() != self.dim {
                return Err(Error::dim("enqueue", format!("key of length {} in a queue of dimension {}", k.len(), self.dim)));
            }
            check_unit(k)?;
        }
        for k in keys {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(k.clone());
        }
        Ok(())
    }

    /// Entries stacked as `[len, dim]`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.entries.is_empty() {
            return Err(Error::State("negative queue is empty".into()));
        }
        Tensor::new(vec![self.entries.len(), self.dim], self.entries.iter().flatten().copied().collect())
    }
}

fn check_unit(v: &[f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::arg(format!("vector norm {n} is not 1")));
    }
    Ok(())
}

fn check_unit_rows(t: &Tape, x: Var) -> Result<()> {
    let d = *t.shape(x).last().expect("rank checked by caller");
    t.values(x).chunks(d).try_for_each(check_unit)
}

fn check_simplex_rows(values: &[f64], n: usize) -> Result<()> {
    for row in values.chunks(n) {
        let mass: f64 = row.iter().sum();
        if row.iter().any(|&p| p < 0.0) || (mass - 1.0).abs() > UNIT_TOL {
            return Err(Error::arg(format!("{row:?} is not a probability distribution")));
        }
    }
    Ok(())
}

fn rank2(t: &Tape, x: Var, op: &'static str) -> Result<[usize; 2]> {
    match t.shape(x)[..] {
        [a, b] if a > 0 && b > 0 => Ok([a, b]),
        ref s => Err(Error::dim(op, format!("expected a non-empty [rows, dim] matrix, got {s:?}"))),
    }
}

/// Batch mean of `−log softmax_0([q·k₊, q·k₁, …, q·k_K] / τ)`.
///
/// `q`, `k_plus` are `[B, d]` and `queue` is `[K, d]`, all with unit rows. Gradients
/// reach `q` only when `k_plus` and `queue` are constants.
pub fn info_nce(t: &Tape, q: Var, k_plus: Var, queue: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::arg(format!("temperature must be positive, got {tau}")));
    }
    let [b, d] = rank2(t, q, "info_nce")?;
    if t.shape(k_plus) != [b, d] {
        return Err(Error::dim("info_nce", format!("q is [{b}, {d}] but k+ is {:?}", t.shape(k_plus))));
    }
    let [_, dq] = rank2(t, queue, "info_nce")?;
    if dq != d {
        return Err(Error::dim("info_nce", format!("queue dimension {dq} differs from {d}")));
    }
    for x in [q, k_plus, queue] {
        check_unit_rows(t, x)?;
    }
    let pos = t.reshape(t.sum_last(t.mul(q, k_plus)?)?, &[b, 1])?;
    let neg = t.matmul(q, t.transpose(queue)?)?;
    let logits = t.mul_scalar(t.concat(&[pos, neg], 1)?, 1.0 / tau)?;
    t.cross_entropy(logits, &vec![0; b])
}

/// Row-wise `‖p1 − p2‖²` for `[B, N]` distributions, giving `[B]`.
pub fn d_ec_pair(t: &Tape, p1: Var, p2: Var) -> Result<Var> {
    let [b, n] = rank2(t, p1, "d_ec_pair")?;
    if t.shape(p2) != [b, n] {
        return Err(Error::dim("d_ec_pair", format!("{:?} vs {:?}", t.shape(p1), t.shape(p2))));
    }
    check_simplex_rows(&t.values(p1), n)?;
    check_simplex_rows(&t.values(p2), n)?;
    let diff = t.sub(p1, p2)?;
    t.sum_last(t.mul(diff, diff)?)
}

/// Mean of `‖p_u − p_v‖²` over all cross pairs of the rows of `si` `[m_i, N]` and
/// `sj` `[m_j, N]`, expanded as `(m_j Σ‖p_u‖² + m_i Σ‖p_v‖² − 2 (Σp_u)·(Σp_v)) / (m_i m_j)`.
pub fn d_ec_sets(t: &Tape, si: Var, sj: Var) -> Result<Var> {
    let [mi, n] = rank2(t, si, "d_ec_sets")?;
    let [mj, nj] = rank2(t, sj, "d_ec_sets")?;
    if n != nj {
        return Err(Error::dim("d_ec_sets", format!("distributions over {n} vs {nj} outcomes")));
    }
    check_simplex_rows(&t.values(si), n)?;
    check_simplex_rows(&t.values(sj), n)?;
    let sq_i = t.sum(t.mul(si, si)?)?;
    let sq_j = t.sum(t.mul(sj, sj)?)?;
    let col_i = t.matmul(t.constant(Tensor::full(vec![1, mi], 1.0)), si)?;
    let col_j = t.matmul(t.constant(Tensor::full(vec![1, mj], 1.0)), sj)?;
    let cross = t.dot(col_i, col_j)?;
    let total = t.add(t.mul_scalar(sq_i, mj as f64)?, t.mul_scalar(sq_j, mi as f64)?)?;
    let total = t.sub(total, t.mul_scalar(cross, 2.0)?)?;
    t.mul_scalar(total, 1.0 / (mi * mj) as f64)
}

/// Plain-value form of [`d_ec_pair`] for one pair.
pub fn d_ec_pair_values(p1: &[f64], p2: &[f64]) -> Result<f64> {
    if p1.len() != p2.len() || p1.is_empty() {
        return Err(Error::dim("d_ec_pair", format!("lengths {} and {}", p1.len(), p2.len())));
    }
    check_simplex_rows(p1, p1.len())?;
    check_simplex_rows(p2, p2.len())?;
    Ok(p1.iter().zip(p2).map(|(a, b)| (a - b) * (a - b)).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecMode {
    /// Between the two branches' distributions of each sample.
    Pairwise,
    /// Between label-grouped sets of the two branches, averaged over classes.
    ClassSets,
    /// InfoNCE only.
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpLossConfig {
    pub tau: f64,
    pub dec_mode: DecMode,
}

impl Default for SpLossConfig {
    fn default() -> Self {
        SpLossConfig { tau: 0.07, dec_mode: DecMode::Pairwise }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SpLoss {
    pub total: Var,
    pub info_nce: Var,
    pub d_ec: Option<Var>,
}

/// InfoNCE on the normalized head outputs plus the Euclidean consistency term on their
/// softmax distributions.
pub fn sp_loss(t: &Tape, q_logits: Var, k_logits: Var, queue: Var, config: &SpLossConfig, labels: Option<&[usize]>) -> Result<SpLoss> {
    let [b, _] = rank2(t, q_logits, "sp_loss")?;
    let nce = info_nce(t, t.l2_normalize(q_logits)?, t.l2_normalize(k_logits)?, queue, config.tau)?;
    let d_ec = match config.dec_mode {
        DecMode::Off => None,
        DecMode::Pairwise => {
            let per = d_ec_pair(t, t.softmax(q_logits)?, t.softmax(k_logits)?)?;
            Some(t.mean(per)?)
        }
        DecMode::ClassSets => {
            let labels = labels.ok_or_else(|| Error::arg("class_sets mode needs labels"))?;
            if labels.len() != b {
                return Err(Error::dim("sp_loss", format!("{} labels for a batch of {b}", labels.len())));
            }
            let (pq, pk) = (t.softmax(q_logits)?, t.softmax(k_logits)?);
            let mut classes: Vec<usize> = labels.to_vec();
            classes.sort_unstable();
            classes.dedup();
            let mut acc: Option<Var> = None;
            for &c in &classes {
                let rows: Vec<usize> = (0..b).filter(|&i| labels[i] == c).collect();
                let d = d_ec_sets(t, t.index_rows(pq, &rows)?, t.index_rows(pk, &rows)?)?;
                acc = Some(match acc {
                    Some(a) => t.add(a, d)?,
                    None => d,
                });
            }
            Some(t.mul_scalar(acc.expect("batch is non-empty"), 1.0 / classes.len() as f64)?)
        }
    };
    let total = match d_ec {
        Some(d) => t.add(nce, d)?,
        None => nce,
    };
    Ok(SpLoss { total, info_nce: nce, d_ec })
}

/// `θ_k ← m·θ_k + (1 − m)·θ_q` for every parameter.
pub fn momentum_update(key: &mut ParamStore, query: &ParamStore, m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::arg(format!("momentum coefficient must be in [0, 1), got {m}")));
    }
    key.check_aligned(query)?;
    for (k, q) in key.iter_mut().zip(query.iter()) {
        for (a, &b) in k.tensor.data_mut().iter_mut().zip(q.tensor.data()) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    Ok(())
}

/// Two-layer MLP mapping the embedding to the contrastive space.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ProjectionHead {
    pub fn new(store: &mut ParamStore, d_in: usize, hidden: usize, d_out: usize, rng: &mut impl Rng) -> Result<Self> {
        if hidden == 0 || d_out == 0 {
            return Err(Error::Config("projection head widths must be positive".into()));
        }
        Ok(ProjectionHead {
            fc1: Linear::new(store, "head.fc1", d_in, hidden, true, rng)?,
            fc2: Linear::new(store, "head.fc2", hidden, d_out, true, rng)?,
        })
    }

    pub fn forward(&self, t: &Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let h = t.relu(self.fc1.forward(t, store, z)?)?;
        self.fc2.forward(t, store, h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub encoder: EncoderConfig,
    pub head_hidden: usize,
    pub head_out: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { encoder: EncoderConfig::default(), head_hidden: 64, head_out: 32 }
    }
}

/// Encoder plus projection head. The same structure serves as query and key network;
/// only the parameter store differs.
#[derive(Clone, Debug)]
pub struct Network {
    pub encoder: Encoder,
    pub head: ProjectionHead,
}

impl Network {
    pub fn new(store: &mut ParamStore, config: &NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        let encoder = Encoder::new(store, "encoder", config.encoder.clone(), rng)?;
        let head = ProjectionHead::new(store, encoder.embedding_dim(), config.head_hidden, config.head_out, rng)?;
        Ok(Network { encoder, head })
    }

    /// Builds a fresh store seeded deterministically.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = tagged_rng(seed, 0, 0);
        let net = Network::new(&mut store, config, &mut rng)?;
        Ok((net, store))
    }

    /// Head outputs for a batch of images.
    pub fn logits(&self, t: &Tape, store: &ParamStore, images: &[&GrayImage], sizes: &[Option<(f64, f64)>]) -> Result<Var> {
        let x = t.constant(self.encoder.batch(images)?);
        let z = self.encoder.forward(t, store, x, sizes)?;
        self.head.forward(t, store, z)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub sgd_momentum: f64,
    pub warmup_epochs: usize,
    /// Key-network momentum coefficient.
    pub momentum: f64,
    pub queue_size: usize,
    pub loss: SpLossConfig,
    pub augment: AugmentPolicy,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            batch_size: 32,
            base_lr: 0.01,
            sgd_momentum: 0.9,
            warmup_epochs: 5,
            momentum: 0.999,
            queue_size: 1024,
            loss: SpLossConfig::default(),
            augment: AugmentPolicy::default(),
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.batch_size > self.queue_size {
            return Err(Error::Config(format!("batch_size {} exceeds queue_size {}", self.batch_size, self.queue_size)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(Error::Config("momentum values must be in [0, 1)".into()));
        }
        if !(self.loss.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.loss.tau)));
        }
        self.augment.validate()?;
        self.schedule().validate()
    }

    /// Warm-up is shortened when the run is too short to hold it.
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { base_lr: self.base_lr, warmup_epochs: self.warmup_epochs.min(self.epochs.saturating_sub(1)), total_epochs: self.epochs }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub info_nce: f64,
    pub d_ec: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,mean_loss,info_nce,d_ec,lr";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.epoch, r.mean_loss, r.info_nce, r.d_ec, r.lr).expect("string write");
    }
    s
}

pub struct PretrainOutcome {
    pub key_store: ParamStore,
    pub metrics: Vec<EpochMetrics>,
}

fn views(data: &Dataset, idx: &[usize], policy: &AugmentPolicy, seed: u64, tag: u64, base: u64) -> Result<Vec<GrayImage>> {
    idx.iter().map(|&i| augment(&data.images[i], policy, &mut tagged_rng(seed, tag, base + i as u64))).collect()
}

fn key_embeddings(net: &Network, key: &ParamStore, images: &[GrayImage], sizes: &[Option<(f64, f64)>]) -> Result<(Tensor, Vec<Vec<f64>>)> {
    let t = Tape::no_grad();
    let refs: Vec<&GrayImage> = images.iter().collect();
    let logits = net.logits(&t, key, &refs, sizes)?;
    let normed = t.l2_normalize(logits)?;
    let d = t.shape(normed)[1];
    let keys = t.values(normed).chunks(d).map(<[f64]>::to_vec).collect();
    Ok((t.value(logits), keys))
}

/// Runs contrastive pretraining on `store` (the query network) in place.
///
/// Metrics and checkpoints go to `out` when given: `metrics.csv` is rewritten after
/// every epoch and `checkpoint.msnc` at the configured interval and at the end.
pub fn pretrain(net: &Network, store: &mut ParamStore, data: &Dataset, config: &PretrainConfig, out: Option<&Path>) -> Result<PretrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::arg("cannot pretrain on an empty manifest"));
    }
    if config.augment.output_size != net.encoder.config.input_size {
        return Err(Error::Config(format!(
            "augmentation output {} differs from encoder input {}",
            config.augment.output_size, net.encoder.config.input_size
        )));
    }
    if let Some(dir) = out {
        create_dir_all(dir)?;
    }
    let n = data.len();
    let seed = config.seed;
    let refs: Vec<&GrayImage> = data.images.iter().collect();
    let sizes: Vec<Option<(f64, f64)>> = net.encoder.resolve_sizes(&refs, &data.sizes).into_iter().map(|(s, _)| s).collect();
    let mut key_store = store.clone();
    let mut queue = NegativeQueue::new(config.queue_size, net.head.fc2.d_out)?;

    // Fill the queue with keys of augmented views before the first update.
    let mut pass = 0u64;
    while !queue.is_full() {
        let order: Vec<usize> = (0..n).collect();
        for chunk in order.chunks(config.batch_size) {
            let need = queue.capacity() - queue.len();
            if need == 0 {
                break;
            }
            let chunk = &chunk[..chunk.len().min(need)];
            let imgs = views(data, chunk, &config.augment, seed, TAG_WARMUP, pass * n as u64)?;
            let sz: Vec<_> = chunk.iter().map(|&i| sizes[i]).collect();
            let (_, keys) = key_embeddings(net, &key_store, &imgs, &sz)?;
            queue.enqueue(&keys)?;
        }
        pass += 1;
    }

    let schedule = config.schedule();
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = schedule.lr_at(epoch)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut tagged_rng(seed, TAG_SHUFFLE, epoch as u64));
        let (mut sum_loss, mut sum_nce, mut sum_dec) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let base = 2 * (epoch * n) as u64;
            let v1 = views(data, chunk, &config.augment, seed, TAG_VIEW, base)?;
            let v2 = views(data, chunk, &config.augment, seed, TAG_VIEW, base + n as u64)?;
            let sz: Vec<_> = chunk.iter().map(|&i| sizes[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();

            let (k_logits, keys) = key_embeddings(net, &key_store, &v2, &sz)?;
            let t = Tape::new();
            let refs: Vec<&GrayImage> = v1.iter().collect();
            let q_logits = net.logits(&t, store, &refs, &sz)?;
            let k_var = t.constant(k_logits);
            let queue_var = t.constant(queue.to_tensor()?);
            let loss = sp_loss(&t, q_logits, k_var, queue_var, &config.loss, Some(&labels))?;
            let value = t.scalar(loss.total)?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss became {value} in epoch {}", epoch + 1)));
            }
            let grads = t.backward(loss.total)?;
            store.zero_grad();
            store.accumulate(&grads);
            sgd_step(store, lr, config.sgd_momentum)?;
            momentum_update(&mut key_store, store, config.momentum)?;
            queue.enqueue(&keys)?;

            let w = chunk.len() as f64;
            sum_loss += w * value;
            sum_nce += w * t.scalar(loss.info_nce)?;
            if let Some(d) = loss.d_ec {
                sum_dec += w * t.scalar(d)?;
            }
        }
        let row = EpochMetrics {
            epoch: epoch + 1,
            mean_loss: sum_loss / n as f64,
            info_nce: sum_nce / n as f64,
            d_ec: sum_dec / n as f64,
            lr,
        };
        log::info!("epoch {}: loss {:.4} (infonce {:.4}, d_ec {:.5}) lr {:.5}", row.epoch, row.mean_loss, row.info_nce, row.d_ec, lr);
        metrics.push(row);
        if let Some(dir) = out {
            write_atomic(&dir.join("metrics.csv"), metrics_csv(&metrics).as_bytes())?;
            let last = epoch + 1 == config.epochs;
            if last || (config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0) {
                save_checkpoint(store, &checkpoint_path(dir))?;
            }
        }
    }
    Ok(PretrainOutcome { key_store, metrics })
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("checkpoint.msnc")
}

/// Mean `d_ec_pair` between the query branch on one augmented view and the key branch
/// on another, over every sample of `data`.
pub fn branch_consistency(net: &Network, query: &ParamStore, key: &ParamStore, data: &Dataset, policy: &AugmentPolicy, seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::arg("no samples"));
    }
    let refs: Vec<&GrayImage> = data.images.iter().collect();
    let sizes: Vec<_> = net.encoder.resolve_sizes(&refs, &data.sizes).into_iter().map(|(s, _)| s).collect();
    let n = data.len();
    let mut total = 0.0;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(32) {
        let v1 = views(data, chunk, policy, seed, TAG_HELDOUT, 0)?;
        let v2 = views(data, chunk, policy, seed, TAG_HELDOUT, n as u64)?;
        let sz: Vec<_> = chunk.iter().map(|&i| sizes[i]).collect();
        let probs = |store: &ParamStore, views: &[GrayImage]| -> Result<Tensor> {
            let t = Tape::no_grad();
            let p = t.softmax(net.logits(&t, store, &views.iter().collect::<Vec<_>>(), &sz)?)?;
            Ok(t.value(p))
        };
        let (pq, pk) = (probs(query, &v1)?, probs(key, &v2)?);
        let t = Tape::no_grad();
        let d = d_ec_pair(&t, t.constant(pq), t.constant(pk))?;
        total += t.values(d).iter().sum::<f64>();
    }
    Ok(total / n as f64)
}
