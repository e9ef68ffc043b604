//! Differentiable primitives. Each forward method validates shapes, computes the
//! output and records an [`Op`]; [`backward_node`] holds the matching adjoints.

use super::kernels::{self, ConvGeometry};
use super::tape::{accumulate, Node, Op, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Epsilon added to the variance inside every normalization.
pub const NORM_EPS: f64 = 1e-5;

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, format!("shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

impl Tape {
    fn binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let nodes = self.nodes();
        let (na, nb) = (&nodes[a.0], &nodes[b.0]);
        same_shape(op, &na.shape, &nb.shape)?;
        let v = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        Ok((na.shape.clone(), v))
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64) -> (Vec<usize>, Vec<f64>) {
        let nodes = self.nodes();
        let n = &nodes[x.0];
        (n.shape.clone(), n.value.iter().map(|&v| f(v)).collect())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary("add", a, b, |x, y| x + y)?;
        self.push(s, v, Op::Add(a.0, b.0))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push(s, v, Op::Sub(a.0, b.0))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(s, v, Op::Mul(a.0, b.0))
    }

    /// Multiplies by a constant.
    pub fn mul_scalar(&self, x: Var, c: f64) -> Result<Var> {
        let (s, v) = self.unary(x, |v| v * c);
        self.push(s, v, Op::Scale(x.0, c))
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn scale_by(&self, x: Var, s: Var) -> Result<Var> {
        let sv = {
            let nodes = self.nodes();
            if nodes[s.0].value.len() != 1 {
                return Err(Error::dim("scale_by", format!("scale must hold one value, got {:?}", nodes[s.0].shape)));
            }
            nodes[s.0].value[0]
        };
        let (shape, v) = self.unary(x, |v| v * sv);
        self.push(shape, v, Op::ScaleBy { x: x.0, s: s.0 })
    }

    /// Adds a rank-1 `bias` broadcast along `axis` of `x`.
    pub fn add_bias(&self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let (shape, v) = {
            let nodes = self.nodes();
            let (nx, nb) = (&nodes[x.0], &nodes[bias.0]);
            if axis >= nx.shape.len() || nb.shape != [nx.shape[axis]] {
                return Err(Error::dim(
                    "add_bias",
                    format!("bias {:?} does not match axis {axis} of {:?}", nb.shape, nx.shape),
                ));
            }
            let inner: usize = nx.shape[axis + 1..].iter().product();
            let c = nx.shape[axis];
            let v = nx
                .value
                .iter()
                .enumerate()
                .map(|(i, &xv)| xv + nb.value[(i / inner) % c])
                .collect();
            (nx.shape.clone(), v)
        };
        self.push(shape, v, Op::AddBias { x: x.0, bias: bias.0, axis })
    }

    /// `[m,k]·[k,n]`, or a batched product `[B,m,k]·[B,k,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, v, batch, m, k, n) = {
            let nodes = self.nodes();
            let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
            let (batch, m, k, k2, n) = match (sa.as_slice(), sb.as_slice()) {
                ([m, k], [k2, n]) => (1, *m, *k, *k2, *n),
                ([b1, m, k], [b2, k2, n]) if b1 == b2 => (*b1, *m, *k, *k2, *n),
                _ => return Err(Error::dim("matmul", format!("incompatible shapes {sa:?} and {sb:?}"))),
            };
            if k != k2 {
                return Err(Error::dim("matmul", format!("inner extents differ: {sa:?} · {sb:?}")));
            }
            let mut out = vec![0.0; batch * m * n];
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            for bi in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &va[bi * m * k..(bi + 1) * m * k],
                    &vb[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
            let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
            (shape, out, batch, m, k, n)
        };
        self.push(shape, v, Op::MatMul { a: a.0, b: b.0, batch, m, k, n })
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let (rows, cols, v) = {
            let nodes = self.nodes();
            let n = &nodes[x.0];
            let [rows, cols] = n.shape[..] else {
                return Err(Error::dim("transpose", format!("needs rank 2, got {:?}", n.shape)));
            };
            let mut v = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    v[c * rows + r] = n.value[r * cols + c];
                }
            }
            (rows, cols, v)
        };
        self.push(vec![cols, rows], v, Op::Transpose { x: x.0, rows, cols })
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        let (s, v) = self.unary(x, |v| v.max(0.0));
        self.push(s, v, Op::Relu(x.0))
    }

    pub fn sin(&self, x: Var) -> Result<Var> {
        let (s, v) = self.unary(x, f64::sin);
        self.push(s, v, Op::Sin(x.0))
    }

    pub fn cos(&self, x: Var) -> Result<Var> {
        let (s, v) = self.unary(x, f64::cos);
        self.push(s, v, Op::Cos(x.0))
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let total: f64 = self.values(x).iter().sum();
        self.push(vec![1], vec![total], Op::Sum(x.0))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let m = {
            let v = self.values(x);
            v.iter().sum::<f64>() / v.len() as f64
        };
        self.push(vec![1], vec![m], Op::Mean(x.0))
    }

    /// Sums over the last axis.
    pub fn sum_last(&self, x: Var) -> Result<Var> {
        let (shape, v, inner) = {
            let nodes = self.nodes();
            let n = &nodes[x.0];
            let inner = *n.shape.last().unwrap();
            let v: Vec<f64> = n.value.chunks(inner).map(|c| c.iter().sum()).collect();
            let mut shape = n.shape[..n.shape.len() - 1].to_vec();
            if shape.is_empty() {
                shape.push(1);
            }
            (shape, v, inner)
        };
        self.push(shape, v, Op::SumLast { x: x.0, inner })
    }

    /// Full contraction `Σ a⊙b` of two equally shaped tensors.
    pub fn dot(&self, a: Var, b: Var) -> Result<Var> {
        let (_, prod) = self.binary("dot", a, b, |x, y| x * y)?;
        self.push(vec![1], vec![prod.iter().sum()], Op::Dot(a.0, b.0))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        super::check_shape(shape)?;
        let v = {
            let nodes = self.nodes();
            let n = &nodes[x.0];
            if shape.iter().product::<usize>() != n.value.len() {
                return Err(Error::dim("reshape", format!("cannot view {:?} as {shape:?}", n.shape)));
            }
            n.value.clone()
        };
        self.push(shape.to_vec(), v, Op::Reshape(x.0))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let (shape, v) = {
            let nodes = self.nodes();
            let Some(first) = parts.first() else {
                return Err(Error::arg("concat needs at least one input"));
            };
            let base = &nodes[first.0].shape;
            if axis >= base.len() {
                return Err(Error::dim("concat", format!("axis {axis} out of range for {base:?}")));
            }
            let mut total = 0;
            for p in parts {
                let s = &nodes[p.0].shape;
                let ok = s.len() == base.len()
                    && s.iter().zip(base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !ok {
                    return Err(Error::dim("concat", format!("{s:?} incompatible with {base:?} on axis {axis}")));
                }
                total += s[axis];
            }
            let outer: usize = base[..axis].iter().product();
            let inner: usize = base[axis + 1..].iter().product();
            let mut v = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in parts {
                    let n = &nodes[p.0];
                    let chunk = n.shape[axis] * inner;
                    v.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = base.clone();
            shape[axis] = total;
            (shape, v)
        };
        self.push(shape, v, Op::Concat { parts: parts.iter().map(|p| p.0).collect(), axis })
    }

    /// Gathers slices along axis 0.
    pub fn index_rows(&self, x: Var, rows: &[usize]) -> Result<Var> {
        let (shape, v) = {
            let nodes = self.nodes();
            let n = &nodes[x.0];
            if rows.is_empty() {
                return Err(Error::arg("index_rows needs at least one row"));
            }
            let row_len = n.value.len() / n.shape[0];
            let mut v = Vec::with_capacity(rows.len() * row_len);
            for &r in rows {
                if r >= n.shape[0] {
                    return Err(Error::dim("index_rows", format!("row {r} out of range for {:?}", n.shape)));
                }
                v.extend_from_slice(&n.value[r * row_len..(r + 1) * row_len]);
            }
            let mut shape = n.shape.clone();
            shape[0] = rows.len();
            (shape, v)
        };
        self.push(shape, v, Op::IndexRows { x: x.0, rows: rows.to_vec() })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let (shape, v) = {
            let nodes = self.nodes();
            let n = &nodes[x.0];
            let d = *n.shape.last().unwrap();
            let mut v = n.value.clone();
            for row in v.chunks_mut(d) {
                softmax_in_place(row);
            }
            (n.shape.clone(), v)
        };
        self.push(shape, v, Op::Softmax(x.0))
    }

    /// Mean softmax cross-entropy of `[B,N]` logits against class indices.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = {
            let nodes = self.nodes();
            let n = &nodes[logits.0];
            let [b, c] = n.shape[..] else {
                return Err(Error::dim("cross_entropy", format!("logits must be [B,N], got {:?}", n.shape)));
            };
            if targets.len() != b {
                return Err(Error::dim("cross_entropy", format!("{} targets for batch {b}", targets.len())));
            }
            let mut probs = n.value.clone();
            let mut loss = 0.0;
            for (i, row) in probs.chunks_mut(c).enumerate() {
                let t = targets[i];
                if t >= c {
                    return Err(Error::arg(format!("target {t} out of range for {c} classes")));
                }
                let lse = log_sum_exp(row);
                loss += lse - row[t];
                softmax_in_place(row);
            }
            (loss / b as f64, probs)
        };
        self.push(vec![1], vec![loss], Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), probs })
    }

    /// Scales each row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&self, x: Var) -> Result<Var> {
        let (shape, v, norms) = {
            let nodes = self.nodes();
            let n = &nodes[x.0];
            let d = *n.shape.last().unwrap();
            let mut v = n.value.clone();
            let mut norms = Vec::with_capacity(v.len() / d);
            for row in v.chunks_mut(d) {
                let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::arg("l2_normalize of a zero vector"));
                }
                row.iter_mut().for_each(|a| *a /= norm);
                norms.push(norm);
            }
            (n.shape.clone(), v, norms)
        };
        self.push(shape, v, Op::L2Normalize { x: x.0, norms })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (shape, v, xhat, rstd) = {
            let nodes = self.nodes();
            let n = &nodes[x.0];
            let d = *n.shape.last().unwrap();
            if d == 0 {
                return Err(Error::arg("layer_norm over a zero-length axis"));
            }
            let (g, b) = (&nodes[gamma.0], &nodes[beta.0]);
            if g.shape != [d] || b.shape != [d] {
                return Err(Error::dim("layer_norm", format!("affine {:?}/{:?} for feature size {d}", g.shape, b.shape)));
            }
            let (xhat, rstd) = normalize_chunks(&n.value, d);
            let v = xhat.iter().enumerate().map(|(i, &h)| h * g.value[i % d] + b.value[i % d]).collect();
            (n.shape.clone(), v, xhat, rstd)
        };
        self.push(shape, v, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, rstd })
    }

    /// Group normalization of `[B,C,H,W]` with per-channel affine.
    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (shape, v, xhat, rstd) = {
            let nodes = self.nodes();
            let n = &nodes[x.0];
            let [_, c, h, w] = n.shape[..] else {
                return Err(Error::dim("group_norm", format!("needs [B,C,H,W], got {:?}", n.shape)));
            };
            if groups == 0 || c % groups != 0 {
                return Err(Error::dim("group_norm", format!("{groups} groups do not divide {c} channels")));
            }
            let (g, b) = (&nodes[gamma.0], &nodes[beta.0]);
            if g.shape != [c] || b.shape != [c] {
                return Err(Error::dim("group_norm", format!("affine {:?}/{:?} for {c} channels", g.shape, b.shape)));
            }
            let plane = h * w;
            let (xhat, rstd) = normalize_chunks(&n.value, c / groups * plane);
            let v = xhat
                .iter()
                .enumerate()
                .map(|(i, &hv)| {
                    let ch = (i / plane) % c;
                    hv * g.value[ch] + b.value[ch]
                })
                .collect();
            (n.shape.clone(), v, xhat, rstd)
        };
        self.push(shape, v, Op::GroupNorm { x: x.0, gamma: gamma.0, beta: beta.0, groups, xhat, rstd })
    }

    /// `[B,C,H,W] -> [B,C]` spatial mean.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let (shape, v) = {
            let nodes = self.nodes();
            let n = &nodes[x.0];
            let [b, c, h, w] = n.shape[..] else {
                return Err(Error::dim("global_avg_pool", format!("needs [B,C,H,W], got {:?}", n.shape)));
            };
            let plane = h * w;
            let v = n.value.chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
            (vec![b, c], v)
        };
        self.push(shape, v, Op::GlobalAvgPool(x.0))
    }

    /// Cross-correlation of `[B,Ci,H,W]` with `[Co,Ci,kh,kw]`, zero padded.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (g, out) = {
            let nodes = self.nodes();
            let g = conv_geometry(&nodes[x.0].shape, &nodes[w.0].shape, stride, pad)?;
            let mut out = vec![0.0; g.batch * g.c_out * g.h_out * g.w_out];
            kernels::conv2d_forward(&g, &nodes[x.0].value, &nodes[w.0].value, &mut out);
            (g, out)
        };
        self.push(vec![g.batch, g.c_out, g.h_out, g.w_out], out, Op::Conv2d { x: x.0, w: w.0, stride, pad })
    }

    /// Spatial shift of the last two axes: `out(i,j) = x(i+dx, j+dy)`, zero outside.
    pub fn shift(&self, x: Var, dx: isize, dy: isize) -> Result<Var> {
        let (shape, v) = {
            let nodes = self.nodes();
            let n = &nodes[x.0];
            if n.shape.len() < 2 {
                return Err(Error::dim("shift", format!("needs at least 2 axes, got {:?}", n.shape)));
            }
            let (h, w) = (n.shape[n.shape.len() - 2], n.shape[n.shape.len() - 1]);
            let mut v = vec![0.0; n.value.len()];
            for (src, dst) in n.value.chunks(h * w).zip(v.chunks_mut(h * w)) {
                for_each_shifted(h, w, dx, dy, |o, s, n| dst[o..o + n].copy_from_slice(&src[s..s + n]));
            }
            (n.shape.clone(), v)
        };
        self.push(shape, v, Op::Shift { x: x.0, dx, dy })
    }

    /// Shift-and-aggregate: `g` is `[B, heads·k², d, h·w]`, one map per kernel offset
    /// `(m,n)`; each is shifted by `(m-⌊k/2⌋, n-⌊k/2⌋)` and the k² maps of a head are
    /// summed, giving `[B, heads·d, h, w]`.
    pub fn shift_sum(&self, g: Var, heads: usize, window: usize, h: usize, w: usize) -> Result<Var> {
        let (shape, v) = {
            let nodes = self.nodes();
            let n = &nodes[g.0];
            let kk = window * window;
            let [b, hk, d, hw] = n.shape[..] else {
                return Err(Error::dim("shift_sum", format!("needs [B, heads*k*k, d, h*w], got {:?}", n.shape)));
            };
            if window.is_multiple_of(2) || hk != heads * kk || hw != h * w {
                return Err(Error::dim(
                    "shift_sum",
                    format!("{:?} inconsistent with heads={heads}, k={window}, {h}x{w}", n.shape),
                ));
            }
            let r = (window / 2) as isize;
            let mut v = vec![0.0; b * heads * d * hw];
            for bi in 0..b {
                for l in 0..heads {
                    for s in 0..kk {
                        let (dx, dy) = ((s / window) as isize - r, (s % window) as isize - r);
                        for c in 0..d {
                            let src = &n.value[((bi * hk + l * kk + s) * d + c) * hw..][..hw];
                            let dst = &mut v[((bi * heads + l) * d + c) * hw..][..hw];
                            for_each_shifted(h, w, dx, dy, |o, si, n| add_into(&mut dst[o..o + n], src[si..si + n].iter().copied()));
                        }
                    }
                }
            }
            (vec![b, heads * d, h, w], v)
        };
        self.push(shape, v, Op::ShiftSum { g: g.0, heads, window, h, w })
    }

    /// Windowed multi-head self-attention over `[B,C,H,W]` maps.
    ///
    /// Channels split into `heads` groups of `C/heads`. Each pixel attends to the
    /// in-bounds pixels of the `window×window` neighborhood centered on it (out-of-image
    /// neighbors are masked), with logits `qᵀk/√(C/heads)`.
    pub fn local_attention(&self, q: Var, k: Var, v: Var, heads: usize, window: usize) -> Result<Var> {
        let (shape, out, weights) = {
            let nodes = self.nodes();
            let (nq, nk, nv) = (&nodes[q.0], &nodes[k.0], &nodes[v.0]);
            same_shape("local_attention", &nq.shape, &nk.shape)?;
            same_shape("local_attention", &nq.shape, &nv.shape)?;
            let [b, c, h, w] = nq.shape[..] else {
                return Err(Error::dim("local_attention", format!("needs [B,C,H,W], got {:?}", nq.shape)));
            };
            if heads == 0 || c % heads != 0 {
                return Err(Error::Config(format!("{heads} heads do not divide {c} channels")));
            }
            if window.is_multiple_of(2) {
                return Err(Error::arg(format!("attention window must be odd, got {window}")));
            }
            let geo = AttnGeometry { b, c, h, w, heads, window };
            let (out, weights) = attention_forward(&geo, &nq.value, &nk.value, &nv.value);
            (nq.shape.clone(), out, weights)
        };
        self.push(shape, out, Op::LocalAttention { q: q.0, k: k.0, v: v.0, heads, window, weights })
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalizes consecutive chunks of `len` values to zero mean, unit variance.
fn normalize_chunks(x: &[f64], len: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(x.len() / len);
    for chunk in x.chunks(len) {
        let mean = chunk.iter().sum::<f64>() / len as f64;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
        let r = 1.0 / (var + NORM_EPS).sqrt();
        xhat.extend(chunk.iter().map(|v| (v - mean) * r));
        rstd.push(r);
    }
    (xhat, rstd)
}

/// Adjoint of [`normalize_chunks`]: `dx = rstd·(dxhat - mean(dxhat) - xhat·mean(dxhat·xhat))`.
fn normalize_chunks_backward(xhat: &[f64], rstd: &[f64], dxhat: &[f64], len: usize, dx: &mut [f64]) {
    for (ci, ((xh, dh), out)) in xhat.chunks(len).zip(dxhat.chunks(len)).zip(dx.chunks_mut(len)).enumerate() {
        let mean_d = dh.iter().sum::<f64>() / len as f64;
        let mean_dx = dh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / len as f64;
        for i in 0..len {
            out[i] += rstd[ci] * (dh[i] - mean_d - xh[i] * mean_dx);
        }
    }
}

/// Calls `f(dst, src, len)` for each row run where `out(i, j) = x(i + dx, j + dy)` is in bounds.
fn for_each_shifted(h: usize, w: usize, dx: isize, dy: isize, mut f: impl FnMut(usize, usize, usize)) {
    let j_lo = (-dy).max(0) as usize;
    let j_hi = (w as isize - dy.max(0)).max(0) as usize;
    if j_lo >= j_hi {
        return;
    }
    for i in 0..h {
        let si = i as isize + dx;
        if si < 0 || si >= h as isize {
            continue;
        }
        f(i * w + j_lo, si as usize * w + (j_lo as isize + dy) as usize, j_hi - j_lo);
    }
}

fn conv_geometry(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<ConvGeometry> {
    let ([batch, c_in, h, w], [c_out, c_in_w, kh, kw]) = (xs, ws) else {
        return Err(Error::dim("conv2d", format!("needs [B,C,H,W] input and [Co,Ci,kh,kw] kernel, got {xs:?} and {ws:?}")));
    };
    if c_in != c_in_w {
        return Err(Error::dim("conv2d", format!("input has {c_in} channels, kernel expects {c_in_w}")));
    }
    if stride == 0 || h + 2 * pad < *kh || w + 2 * pad < *kw {
        return Err(Error::dim("conv2d", format!("kernel {kh}x{kw} (pad {pad}, stride {stride}) does not fit {h}x{w}")));
    }
    Ok(ConvGeometry {
        batch: *batch,
        c_in: *c_in,
        c_out: *c_out,
        h: *h,
        w: *w,
        kh: *kh,
        kw: *kw,
        stride,
        pad,
        h_out: (h + 2 * pad - kh) / stride + 1,
        w_out: (w + 2 * pad - kw) / stride + 1,
    })
}

struct AttnGeometry {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    heads: usize,
    window: usize,
}

impl AttnGeometry {
    fn head_dim(&self) -> usize {
        self.c / self.heads
    }

    /// Flat neighbor index for window offset `s` around `(i,j)`, if inside the image.
    fn neighbor(&self, i: usize, j: usize, s: usize) -> Option<usize> {
        let r = (self.window / 2) as isize;
        let a = i as isize + (s / self.window) as isize - r;
        let bb = j as isize + (s % self.window) as isize - r;
        (a >= 0 && bb >= 0 && a < self.h as isize && bb < self.w as isize).then(|| a as usize * self.w + bb as usize)
    }
}

/// Returns the attended output and the softmax weights laid out `[B, heads, H·W, k²]`
/// (zero for masked neighbors).
fn attention_forward(g: &AttnGeometry, q: &[f64], k: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (hw, d, kk) = (g.h * g.w, g.head_dim(), g.window * g.window);
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; q.len()];
    let mut weights = vec![0.0; g.b * g.heads * hw * kk];
    let mut logits = vec![0.0; kk];
    for b in 0..g.b {
        for l in 0..g.heads {
            let base = (b * g.c + l * d) * hw;
            for i in 0..g.h {
                for j in 0..g.w {
                    let p = i * g.w + j;
                    let mut max = f64::NEG_INFINITY;
                    for s in 0..kk {
                        logits[s] = match g.neighbor(i, j, s) {
                            Some(nb) => {
                                let dot: f64 = (0..d).map(|c| q[base + c * hw + p] * k[base + c * hw + nb]).sum();
                                max = max.max(dot * scale);
                                dot * scale
                            }
                            None => f64::NEG_INFINITY,
                        };
                    }
                    let wrow = &mut weights[((b * g.heads + l) * hw + p) * kk..][..kk];
                    let mut total = 0.0;
                    for s in 0..kk {
                        wrow[s] = if logits[s].is_finite() { (logits[s] - max).exp() } else { 0.0 };
                        total += wrow[s];
                    }
                    for s in 0..kk {
                        wrow[s] /= total;
                        if let Some(nb) = g.neighbor(i, j, s) {
                            for c in 0..d {
                                out[base + c * hw + p] += wrow[s] * v[base + c * hw + nb];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, weights)
}

struct AttnGrads {
    dq: Vec<f64>,
    dk: Vec<f64>,
    dv: Vec<f64>,
}

fn attention_backward(g: &AttnGeometry, q: &[f64], k: &[f64], v: &[f64], weights: &[f64], dout: &[f64]) -> AttnGrads {
    let (hw, d, kk) = (g.h * g.w, g.head_dim(), g.window * g.window);
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dw = vec![0.0; kk];
    for b in 0..g.b {
        for l in 0..g.heads {
            let base = (b * g.c + l * d) * hw;
            for i in 0..g.h {
                for j in 0..g.w {
                    let p = i * g.w + j;
                    let wrow = &weights[((b * g.heads + l) * hw + p) * kk..][..kk];
                    let mut weighted = 0.0;
                    for s in 0..kk {
                        dw[s] = 0.0;
                        if let Some(nb) = g.neighbor(i, j, s) {
                            for c in 0..d {
                                let go = dout[base + c * hw + p];
                                dw[s] += go * v[base + c * hw + nb];
                                dv[base + c * hw + nb] += wrow[s] * go;
                            }
                        }
                        weighted += wrow[s] * dw[s];
                    }
                    for s in 0..kk {
                        let Some(nb) = g.neighbor(i, j, s) else { continue };
                        let dlogit = wrow[s] * (dw[s] - weighted) * scale;
                        for c in 0..d {
                            dq[base + c * hw + p] += dlogit * k[base + c * hw + nb];
                            dk[base + c * hw + nb] += dlogit * q[base + c * hw + p];
                        }
                    }
                }
            }
        }
    }
    AttnGrads { dq, dk, dv }
}

fn add_into(dst: &mut [f64], src: impl IntoIterator<Item = f64>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Propagates the gradient `g` of node `idx` to its parents.
pub(super) fn backward_node(nodes: &[Node], idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[idx];
    let val = |i: usize| nodes[i].value.as_slice();
    match &node.op {
        Op::Constant | Op::Input | Op::Param => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g.iter().copied()));
            accumulate(nodes, grads, *b, |d| add_into(d, g.iter().copied()));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g.iter().copied()));
            accumulate(nodes, grads, *b, |d| add_into(d, g.iter().map(|v| -v)));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |d| add_into(d, g.iter().zip(vb).map(|(x, y)| x * y)));
            accumulate(nodes, grads, *b, |d| add_into(d, g.iter().zip(va).map(|(x, y)| x * y)));
        }
        Op::Scale(x, c) => accumulate(nodes, grads, *x, |d| add_into(d, g.iter().map(|v| v * c))),
        Op::ScaleBy { x, s } => {
            let sv = val(*s)[0];
            accumulate(nodes, grads, *x, |d| add_into(d, g.iter().map(|v| v * sv)));
            let ds: f64 = g.iter().zip(val(*x)).map(|(a, b)| a * b).sum();
            accumulate(nodes, grads, *s, |d| d[0] += ds);
        }
        Op::AddBias { x, bias, axis } => {
            accumulate(nodes, grads, *x, |d| add_into(d, g.iter().copied()));
            let shape = &nodes[*x].shape;
            let inner: usize = shape[axis + 1..].iter().product();
            let c = shape[*axis];
            accumulate(nodes, grads, *bias, |d| {
                for (i, gv) in g.iter().enumerate() {
                    d[(i / inner) % c] += gv;
                }
            });
        }
        Op::MatMul { a, b, batch, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (va, vb) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |d| {
                for bi in 0..*batch {
                    kernels::gemm_nt(m, n, k, &g[bi * m * n..][..m * n], &vb[bi * k * n..][..k * n], &mut d[bi * m * k..][..m * k]);
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for bi in 0..*batch {
                    kernels::gemm_tn(k, m, n, &va[bi * m * k..][..m * k], &g[bi * m * n..][..m * n], &mut d[bi * k * n..][..k * n]);
                }
            });
        }
        Op::Transpose { x, rows, cols } => accumulate(nodes, grads, *x, |d| {
            for r in 0..*rows {
                for c in 0..*cols {
                    d[r * cols + c] += g[c * rows + r];
                }
            }
        }),
        Op::Relu(x) => accumulate(nodes, grads, *x, |d| {
            add_into(d, g.iter().zip(val(*x)).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }))
        }),
        Op::Sin(x) => accumulate(nodes, grads, *x, |d| add_into(d, g.iter().zip(val(*x)).map(|(gv, xv)| gv * xv.cos()))),
        Op::Cos(x) => accumulate(nodes, grads, *x, |d| add_into(d, g.iter().zip(val(*x)).map(|(gv, xv)| -gv * xv.sin()))),
        Op::Sum(x) => accumulate(nodes, grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0])),
        Op::Mean(x) => {
            let n = nodes[*x].value.len() as f64;
            accumulate(nodes, grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0] / n))
        }
        Op::SumLast { x, inner } => accumulate(nodes, grads, *x, |d| {
            for (i, v) in d.iter_mut().enumerate() {
                *v += g[i / inner];
            }
        }),
        Op::Dot(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |d| add_into(d, vb.iter().map(|v| v * g[0])));
            accumulate(nodes, grads, *b, |d| add_into(d, va.iter().map(|v| v * g[0])));
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, |d| add_into(d, g.iter().copied())),
        Op::Concat { parts, axis } => {
            let shape = &node.shape;
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let chunk = nodes[p].shape[*axis] * inner;
                accumulate(nodes, grads, p, |d| {
                    for o in 0..outer {
                        add_into(&mut d[o * chunk..(o + 1) * chunk], g[o * total + offset..][..chunk].iter().copied());
                    }
                });
                offset += chunk;
            }
        }
        Op::IndexRows { x, rows } => {
            let row_len = nodes[*x].value.len() / nodes[*x].shape[0];
            accumulate(nodes, grads, *x, |d| {
                for (i, &r) in rows.iter().enumerate() {
                    add_into(&mut d[r * row_len..(r + 1) * row_len], g[i * row_len..(i + 1) * row_len].iter().copied());
                }
            });
        }
        Op::Softmax(x) => {
            let dlen = *node.shape.last().unwrap();
            accumulate(nodes, grads, *x, |d| {
                for ((y, gy), dx) in node.value.chunks(dlen).zip(g.chunks(dlen)).zip(d.chunks_mut(dlen)) {
                    let dotp: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for i in 0..dlen {
                        dx[i] += y[i] * (gy[i] - dotp);
                    }
                }
            });
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let c = nodes[*logits].shape[1];
            let scale = g[0] / targets.len() as f64;
            accumulate(nodes, grads, *logits, |d| {
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        d[i * c + j] += scale * (probs[i * c + j] - onehot);
                    }
                }
            });
        }
        Op::L2Normalize { x, norms } => {
            let dlen = *node.shape.last().unwrap();
            accumulate(nodes, grads, *x, |d| {
                for (r, ((y, gy), dx)) in node.value.chunks(dlen).zip(g.chunks(dlen)).zip(d.chunks_mut(dlen)).enumerate() {
                    let dotp: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for i in 0..dlen {
                        dx[i] += (gy[i] - y[i] * dotp) / norms[r];
                    }
                }
            });
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let dlen = *node.shape.last().unwrap();
            let gv = val(*gamma);
            accumulate(nodes, grads, *gamma, |d| {
                for (i, (gy, xh)) in g.iter().zip(xhat).enumerate() {
                    d[i % dlen] += gy * xh;
                }
            });
            accumulate(nodes, grads, *beta, |d| {
                for (i, gy) in g.iter().enumerate() {
                    d[i % dlen] += gy;
                }
            });
            accumulate(nodes, grads, *x, |d| {
                let dxhat: Vec<f64> = g.iter().enumerate().map(|(i, gy)| gy * gv[i % dlen]).collect();
                normalize_chunks_backward(xhat, rstd, &dxhat, dlen, d);
            });
        }
        Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
            let (c, plane) = (node.shape[1], node.shape[2] * node.shape[3]);
            let gv = val(*gamma);
            accumulate(nodes, grads, *gamma, |d| {
                for (i, (gy, xh)) in g.iter().zip(xhat).enumerate() {
                    d[(i / plane) % c] += gy * xh;
                }
            });
            accumulate(nodes, grads, *beta, |d| {
                for (i, gy) in g.iter().enumerate() {
                    d[(i / plane) % c] += gy;
                }
            });
            accumulate(nodes, grads, *x, |d| {
                let dxhat: Vec<f64> = g.iter().enumerate().map(|(i, gy)| gy * gv[(i / plane) % c]).collect();
                normalize_chunks_backward(xhat, rstd, &dxhat, c / groups * plane, d);
            });
        }
        Op::GlobalAvgPool(x) => {
            let plane = nodes[*x].shape[2] * nodes[*x].shape[3];
            accumulate(nodes, grads, *x, |d| {
                for (i, v) in d.iter_mut().enumerate() {
                    *v += g[i / plane] / plane as f64;
                }
            });
        }
        Op::Conv2d { x, w, stride, pad } => {
            let geo = conv_geometry(&nodes[*x].shape, &nodes[*w].shape, *stride, *pad).expect("validated in forward");
            let (vx, vw) = (val(*x), val(*w));
            accumulate(nodes, grads, *x, |d| kernels::conv2d_backward(&geo, vx, vw, g, Some(d), None));
            accumulate(nodes, grads, *w, |d| kernels::conv2d_backward(&geo, vx, vw, g, None, Some(d)));
        }
        Op::Shift { x, dx, dy } => {
            let s = &node.shape;
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            accumulate(nodes, grads, *x, |d| {
                for (gp, dp) in g.chunks(h * w).zip(d.chunks_mut(h * w)) {
                    for_each_shifted(h, w, *dx, *dy, |o, si, n| add_into(&mut dp[si..si + n], gp[o..o + n].iter().copied()));
                }
            });
        }
        Op::ShiftSum { g: src, heads, window, h, w } => {
            let (heads, window) = (*heads, *window);
            let kk = window * window;
            let [b, hk, d_head, hw] = nodes[*src].shape[..] else { unreachable!() };
            let r = (window / 2) as isize;
            accumulate(nodes, grads, *src, |d| {
                for bi in 0..b {
                    for l in 0..heads {
                        for s in 0..kk {
                            let (dx, dy) = ((s / window) as isize - r, (s % window) as isize - r);
                            for c in 0..d_head {
                                let gout = &g[((bi * heads + l) * d_head + c) * hw..][..hw];
                                let gin = &mut d[((bi * hk + l * kk + s) * d_head + c) * hw..][..hw];
                                for_each_shifted(*h, *w, dx, dy, |o, si, n| add_into(&mut gin[si..si + n], gout[o..o + n].iter().copied()));
                            }
                        }
                    }
                }
            });
        }
        Op::LocalAttention { q, k, v, heads, window, weights } => {
            let [b, c, h, w] = node.shape[..] else { unreachable!() };
            let geo = AttnGeometry { b, c, h, w, heads: *heads, window: *window };
            let ag = attention_backward(&geo, val(*q), val(*k), val(*v), weights, g);
            accumulate(nodes, grads, *q, |d| add_into(d, ag.dq.iter().copied()));
            accumulate(nodes, grads, *k, |d| add_into(d, ag.dk.iter().copied()));
            accumulate(nodes, grads, *v, |d| add_into(d, ag.dv.iter().copied()));
        }
    }
}

/// Plain (non-recording) helpers used by oracles and non-differentiable paths.
impl Tensor {
    pub fn softmax_rows(&self) -> Tensor {
        let d = *self.shape.last().unwrap();
        let mut data = self.data.clone();
        data.chunks_mut(d).for_each(softmax_in_place);
        Tensor { shape: self.shape.clone(), data }
    }
}
