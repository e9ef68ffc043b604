//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use msnet_core::rng::stream_rng;
use msnet_core::saem::Saem;
use msnet_core::tensor::{ParamStore, Tape, Tensor};
use proptest::test_runner::Config as ProptestConfig;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Grouped k×k convolution with zero padding: input `[B, G, d, H, W]` groups, kernel
/// `[L, G, k, k]`; every channel `c < d` of output group `l` is
/// `Σ_g Σ_{m,n} K[l,g,m,n]·x[g, c, i+m−r, j+n−r]`.
pub fn grouped_conv(x: &[f64], b: usize, groups: usize, d: usize, h: usize, w: usize, kernel: &[f64], out_groups: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut out = vec![0.0; b * out_groups * d * h * w];
    for bi in 0..b {
        for l in 0..out_groups {
            for c in 0..d {
                for i in 0..h {
                    for j in 0..w {
                        let mut s = 0.0;
                        for g in 0..groups {
                            for m in 0..k {
                                for n in 0..k {
                                    let (y, xx) = (i as isize + m as isize - r, j as isize + n as isize - r);
                                    if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                        continue;
                                    }
                                    let kv = kernel[((l * groups + g) * k + m) * k + n];
                                    s += kv * x[((((bi * groups + g) * d + c) * h) + y as usize) * w + xx as usize];
                                }
                            }
                        }
                        out[((((bi * out_groups + l) * d + c) * h) + i) * w + j] = s;
                    }
                }
            }
        }
    }
    out
}

/// Per-pixel windowed multi-head attention over `[B, C, H, W]` maps; out-of-image
/// neighbors are excluded. Returns the output and, per `(b, head, pixel)`, the weights.
pub fn brute_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, window: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let s = q.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let d = c / heads;
    let r = (window / 2) as isize;
    let mut out = vec![0.0; b * c * h * w];
    let mut all_weights = Vec::new();
    for bi in 0..b {
        for l in 0..heads {
            for i in 0..h {
                for j in 0..w {
                    let mut nbrs = Vec::new();
                    for di in -r..=r {
                        for dj in -r..=r {
                            let (y, x) = (i as isize + di, j as isize + dj);
                            if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
                                nbrs.push((y as usize, x as usize));
                            }
                        }
                    }
                    let logits: Vec<f64> = nbrs
                        .iter()
                        .map(|&(y, x)| (0..d).map(|t| q.at(&[bi, l * d + t, i, j]) * k.at(&[bi, l * d + t, y, x])).sum::<f64>() / (d as f64).sqrt())
                        .collect();
                    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|z| (z - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    let wts: Vec<f64> = e.iter().map(|v| v / z).collect();
                    for t in 0..d {
                        out[((bi * c + l * d + t) * h + i) * w + j] = nbrs.iter().zip(&wts).map(|(&(y, x), a)| a * v.at(&[bi, l * d + t, y, x])).sum();
                    }
                    all_weights.push(wts);
                }
            }
        }
    }
    (out, all_weights)
}

/// Least squares through the centered normal equations.
pub fn least_squares(points: &[(f64, f64)]) -> (f64, f64, (f64, f64)) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let b = sxy / sxx;
    (b, my - b * mx, (mx, my))
}

/// Layer norm of one row with eps inside the square root, then affine.
pub fn layer_norm_row(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().enumerate().map(|(i, v)| (v - mean) / (var + eps).sqrt() * gamma[i] + beta[i]).collect()
}

pub fn relu(x: Vec<f64>) -> Vec<f64> {
    x.into_iter().map(|v| v.max(0.0)).collect()
}

/// `−log softmax(logits)[0]` in the log-sum-exp form.
pub fn neg_log_first(logits: &[f64]) -> f64 {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
    lse - logits[0]
}

pub fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.iter_mut().for_each(|a| *a /= n);
    v
}

pub fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    unit((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Proptest settings for integration tests; these have no `lib.rs` to anchor a
/// regression file next to, so persistence is off.
pub fn cases(n: u32) -> ProptestConfig {
    ProptestConfig { cases: n, failure_persistence: None, ..ProptestConfig::default() }
}

pub fn set(store: &mut ParamStore, name: &str, values: &[f64]) {
    let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.get_mut(id).tensor.data_mut().copy_from_slice(values);
}

/// Embeds a grouped `[M, 3M, k, k]` kernel into `fc_expand` and compares the
/// shift-and-sum path against direct convolution of the concatenated q/k/v groups.
pub fn conv_identity_error(seed: u64, heads: usize, k: usize) -> f64 {
    let mut rng = stream_rng(seed, 0);
    let d = rng.random_range(1..3);
    let c = heads * d;
    let (b, h, w) = (rng.random_range(1..3), rng.random_range(1..6), rng.random_range(1..6));
    let mut store = ParamStore::new();
    let saem = Saem::new(&mut store, "s", c, heads, k, &mut rng).unwrap();
    let kernel: Vec<f64> = (0..heads * 3 * heads * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let kk = k * k;
    let mut fc = vec![0.0; heads * kk * 3 * heads];
    for l in 0..heads {
        for g in 0..3 * heads {
            for s in 0..kk {
                fc[(l * kk + s) * 3 * heads + g] = kernel[(l * 3 * heads + g) * kk + s];
            }
        }
    }
    set(&mut store, "s.fc_expand", &fc);
    let maps: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, &[b, c, h, w], -1.0, 1.0)).collect();
    let plane = c * h * w;
    let mut cat = Vec::with_capacity(3 * b * plane);
    for bi in 0..b {
        for m in &maps {
            cat.extend_from_slice(&m.data()[bi * plane..(bi + 1) * plane]);
        }
    }
    let expected = grouped_conv(&cat, b, 3 * heads, d, h, w, &kernel, heads, k);
    let t = Tape::new();
    let [q, kv, v] = [0, 1, 2].map(|i| t.constant(maps[i].clone()));
    let got = t.value(saem.conv_path(&t, &store, q, kv, v).unwrap());
    assert_eq!(got.shape(), &[b, c, h, w]);
    max_abs_diff(got.data(), &expected)
}

/// Attention path against [`brute_attention`] on a random case: the largest output
/// difference and the largest deviation of a weight sum from 1, where the engine's own
/// weight sums are read off by attending over `V ≡ 1`.
pub fn attention_errors(seed: u64, heads: usize, k: usize) -> (f64, f64) {
    let mut rng = stream_rng(seed, 1);
    let c = heads * rng.random_range(1..3);
    let (b, h, w) = (rng.random_range(1..3), rng.random_range(1..6), rng.random_range(1..6));
    let mut store = ParamStore::new();
    let saem = Saem::new(&mut store, "s", c, heads, k, &mut rng).unwrap();
    let [q, kk, v] = [0, 1, 2].map(|_| rand_tensor(&mut rng, &[b, c, h, w], -2.0, 2.0));
    let (expected, weights) = brute_attention(&q, &kk, &v, heads, k);
    let t = Tape::new();
    let got = t.value(saem.attn_path(&t, t.constant(q.clone()), t.constant(kk.clone()), t.constant(v)).unwrap());
    let ones = t.constant(Tensor::full(vec![b, c, h, w], 1.0));
    let sums = t.value(saem.attn_path(&t, t.constant(q), t.constant(kk), ones).unwrap());
    let mass = sums.data().iter().map(|s| (s - 1.0).abs()).chain(weights.iter().map(|w| (w.iter().sum::<f64>() - 1.0).abs())).fold(0.0, f64::max);
    (max_abs_diff(got.data(), &expected), mass)
}
