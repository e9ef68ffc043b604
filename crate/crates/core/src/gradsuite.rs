//! Finite-difference checks of every differentiable component, on small random cases.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::cssl::{d_ec_pair, d_ec_sets, info_nce, sp_loss, DecMode, ProjectionHead, SpLossConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::Result;
use crate::rng::tagged_rng;
use crate::saem::{Bottleneck, BottleneckSpec};
use crate::sieb::{Sieb, SiebConfig};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, ParamStore, Tape, Tensor, Var};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

/// `Σ y ⊙ w` for a fixed random `w`, so that no output direction is privileged.
fn project(t: &Tape, y: Var, w: &Tensor) -> Result<Var> {
    let flat = t.reshape(y, &[w.len()])?;
    t.dot(flat, t.constant(w.clone().reshape(vec![w.len()])?))
}

fn sieb_case(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = tagged_rng(seed, 101, 0);
    let mut store = ParamStore::new();
    let cfg = SiebConfig { d_e: 8, d_i: 6, n: 2, size_range: (0.0, 100.0) };
    let sieb = Sieb::new(&mut store, "sieb", cfg, &mut rng)?;
    let inputs = [random(&mut rng, &[2, 6], -1.0, 1.0), random(&mut rng, &[2, 2], -0.9, 0.9)];
    let w = random(&mut rng, &[12], -1.0, 1.0);
    grad_check(&mut store, &inputs, opts, |t, s, v| project(t, sieb.forward(t, s, v[0], v[1])?, &w))
}

fn saem_case(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = tagged_rng(seed, 102, 0);
    let mut store = ParamStore::new();
    let spec = BottleneckSpec { c_in: 4, c_out: 8, stride: 1, use_saem: true, heads: 2, kernel: 3, groups: 2 };
    let block = Bottleneck::new(&mut store, "block", spec, &mut rng)?;
    for name in ["block.saem.alpha", "block.saem.beta"] {
        let id = store.id(name).expect("registered");
        store.get_mut(id).tensor.data_mut()[0] = rng.random_range(0.5..1.5);
    }
    let inputs = [random(&mut rng, &[2, 4, 5, 5], -1.0, 1.0)];
    let w = random(&mut rng, &[2 * 8 * 25], -1.0, 1.0);
    grad_check(&mut store, &inputs, opts, |t, s, v| project(t, block.forward(t, s, v[0])?, &w))
}

fn info_nce_case(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = tagged_rng(seed, 103, 0);
    let inputs = [random(&mut rng, &[3, 5], -1.0, 1.0), random(&mut rng, &[3, 5], -1.0, 1.0), random(&mut rng, &[8, 5], -1.0, 1.0)];
    grad_check(&mut ParamStore::new(), &inputs, opts, |t, _, v| {
        info_nce(t, t.l2_normalize(v[0])?, t.l2_normalize(v[1])?, t.l2_normalize(v[2])?, 0.07)
    })
}

fn d_ec_pair_case(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = tagged_rng(seed, 104, 0);
    let inputs = [random(&mut rng, &[3, 4], -2.0, 2.0), random(&mut rng, &[3, 4], -2.0, 2.0)];
    grad_check(&mut ParamStore::new(), &inputs, opts, |t, _, v| t.mean(d_ec_pair(t, t.softmax(v[0])?, t.softmax(v[1])?)?))
}

fn d_ec_sets_case(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = tagged_rng(seed, 105, 0);
    let inputs = [random(&mut rng, &[2, 4], -2.0, 2.0), random(&mut rng, &[3, 4], -2.0, 2.0)];
    grad_check(&mut ParamStore::new(), &inputs, opts, |t, _, v| d_ec_sets(t, t.softmax(v[0])?, t.softmax(v[1])?))
}

fn sp_loss_case(seed: u64, opts: &GradCheckOptions, mode: DecMode) -> Result<GradCheckReport> {
    let mut rng = tagged_rng(seed, 106, mode as u64);
    let mut store = ParamStore::new();
    let head = ProjectionHead::new(&mut store, 6, 8, 5, &mut rng)?;
    let z = random(&mut rng, &[2, 6], -1.0, 1.0);
    let k = random(&mut rng, &[2, 5], -1.0, 1.0);
    let mut queue = random(&mut rng, &[8, 5], -1.0, 1.0);
    for row in queue.data_mut().chunks_mut(5) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    let cfg = SpLossConfig { tau: 0.07, dec_mode: mode };
    let labels = [0usize, 0];
    grad_check(&mut store, &[z], opts, |t, s, v| {
        let q = head.forward(t, s, v[0])?;
        Ok(sp_loss(t, q, t.constant(k.clone()), t.constant(queue.clone()), &cfg, Some(&labels))?.total)
    })
}

/// Desk encoder at 16×16 input, with SAEM and the size branch active.
fn encoder_case(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = tagged_rng(seed, 107, 0);
    let mut store = ParamStore::new();
    let cfg = EncoderConfig { input_size: 16, ..EncoderConfig::default() };
    let enc = Encoder::new(&mut store, "encoder", cfg, &mut rng)?;
    let inputs = [random(&mut rng, &[2, 1, 16, 16], 0.0, 1.0)];
    let w = random(&mut rng, &[2 * enc.embedding_dim()], -1.0, 1.0);
    let sizes = [Some((38.0, 34.0)), Some((58.0, 56.0))];
    grad_check(&mut store, &inputs, opts, |t, s, v| project(t, enc.forward(t, s, v[0], &sizes)?, &w))
}

/// Runs every case with step `1e-5`, returning `(name, report)` pairs.
pub fn run_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let opts = GradCheckOptions { seed, ..GradCheckOptions::default() };
    Ok(vec![
        ("sieb".to_string(), sieb_case(seed, &opts)?),
        ("saem_block".to_string(), saem_case(seed, &opts)?),
        ("info_nce".to_string(), info_nce_case(seed, &opts)?),
        ("d_ec_pair".to_string(), d_ec_pair_case(seed, &opts)?),
        ("d_ec_sets".to_string(), d_ec_sets_case(seed, &opts)?),
        ("sp_loss_pairwise".to_string(), sp_loss_case(seed, &opts, DecMode::Pairwise)?),
        ("sp_loss_class_sets".to_string(), sp_loss_case(seed, &opts, DecMode::ClassSets)?),
        ("encoder".to_string(), encoder_case(seed, &opts)?),
    ])
}
