//! Self-attention enhancement module: a convolution/attention hybrid.
//!
//! Three bias-free 1×1 projections produce `q`, `k`, `v`. The attention path runs
//! windowed multi-head attention on them. The convolution path regroups the same maps
//! into `3M` head groups, mixes them with a shared fully connected layer into `M·k²`
//! maps (one per head and kernel offset), shifts each map by its offset and sums.
//! The two results are fused as `α·F_att + β·F_conv`.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::nn::{Affine, Conv};
use crate::tensor::{Init, ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct Saem {
    pub channels: usize,
    pub heads: usize,
    pub kernel: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    /// `[M·k², 3M, 1, 1]`.
    pub fc_expand: ParamId,
    pub alpha: ParamId,
    pub beta: ParamId,
}

impl Saem {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, heads: usize, kernel: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide {channels} channels")));
        }
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("SAEM kernel must be odd, got {kernel}")));
        }
        let proj = |store: &mut ParamStore, name: &str, rng: &mut _| {
            store.init(format!("{prefix}.{name}"), &[channels, channels, 1, 1], Init::KaimingUniform { fan_in: channels }, rng)
        };
        let wq = proj(store, "proj_q", rng)?;
        let wk = proj(store, "proj_k", rng)?;
        let wv = proj(store, "proj_v", rng)?;
        let kk = kernel * kernel;
        let fc_expand = store.init(
            format!("{prefix}.fc_expand"),
            &[heads * kk, 3 * heads, 1, 1],
            Init::KaimingUniform { fan_in: 3 * heads },
            rng,
        )?;
        let alpha = store.init(format!("{prefix}.alpha"), &[1], Init::Ones, rng)?;
        let beta = store.init(format!("{prefix}.beta"), &[1], Init::Ones, rng)?;
        Ok(Saem { channels, heads, kernel, wq, wk, wv, fc_expand, alpha, beta })
    }

    fn check_input(&self, t: &Tape, x: Var) -> Result<[usize; 4]> {
        match t.shape(x)[..] {
            [b, c, h, w] if c == self.channels => Ok([b, c, h, w]),
            ref s => Err(Error::dim("saem", format!("expected [B, {}, H, W], got {s:?}", self.channels))),
        }
    }

    /// Per-pixel linear maps `q = W_q f`, `k = W_k f`, `v = W_v f`.
    pub fn project_qkv(&self, t: &Tape, store: &ParamStore, x: Var) -> Result<(Var, Var, Var)> {
        self.check_input(t, x)?;
        let p = |id| t.conv2d(x, t.param(store, id), 1, 0);
        Ok((p(self.wq)?, p(self.wk)?, p(self.wv)?))
    }

    /// Shift-and-sum convolution path on the projected maps.
    pub fn conv_path(&self, t: &Tape, store: &ParamStore, q: Var, k: Var, v: Var) -> Result<Var> {
        let [b, c, h, w] = self.check_input(t, q)?;
        let (m, d) = (self.heads, c / self.heads);
        let grouped = |x: Var| t.reshape(x, &[b, m, d, h * w]);
        let cat = t.concat(&[grouped(q)?, grouped(k)?, grouped(v)?], 1)?;
        let g = t.conv2d(cat, t.param(store, self.fc_expand), 1, 0)?;
        t.shift_sum(g, m, self.kernel, h, w)
    }

    /// Windowed multi-head attention path.
    pub fn attn_path(&self, t: &Tape, q: Var, k: Var, v: Var) -> Result<Var> {
        t.local_attention(q, k, v, self.heads, self.kernel)
    }

    pub fn fuse(&self, t: &Tape, store: &ParamStore, att: Var, conv: Var) -> Result<Var> {
        let (sa, sc) = (t.shape(att), t.shape(conv));
        if sa != sc {
            return Err(Error::dim("fuse", format!("{sa:?} vs {sc:?}")));
        }
        let a = t.scale_by(att, t.param(store, self.alpha))?;
        let c = t.scale_by(conv, t.param(store, self.beta))?;
        t.add(a, c)
    }

    pub fn forward(&self, t: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (q, k, v) = self.project_qkv(t, store, x)?;
        let att = self.attn_path(t, q, k, v)?;
        let conv = self.conv_path(t, store, q, k, v)?;
        self.fuse(t, store, att, conv)
    }
}

/// Middle stage of a bottleneck block.
#[derive(Clone, Debug)]
pub enum Middle {
    Saem(Saem),
    Conv(Conv),
}

/// Residual bottleneck: 1×1 reduce → SAEM or 3×3 conv → 1×1 expand, plus shortcut.
/// Every convolution is followed by group normalization.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub name: String,
    pub reduce: Conv,
    pub reduce_norm: Affine,
    pub middle: Middle,
    pub middle_norm: Affine,
    pub expand: Conv,
    pub expand_norm: Affine,
    pub shortcut: Option<(Conv, Affine)>,
    pub groups: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BottleneckSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub use_saem: bool,
    pub heads: usize,
    pub kernel: usize,
    pub groups: usize,
}

impl Bottleneck {
    pub fn new(store: &mut ParamStore, name: &str, spec: BottleneckSpec, rng: &mut impl Rng) -> Result<Self> {
        let mid = spec.c_out / 2;
        for c in [mid, spec.c_out] {
            if c == 0 || c % spec.groups != 0 {
                return Err(Error::Config(format!("{name}: {} norm groups do not divide {c} channels", spec.groups)));
            }
        }
        let reduce = Conv::new(store, &format!("{name}.reduce"), spec.c_in, mid, 1, spec.stride, rng)?;
        let reduce_norm = Affine::new(store, &format!("{name}.reduce_norm"), mid, rng)?;
        let middle = if spec.use_saem {
            Middle::Saem(Saem::new(store, &format!("{name}.saem"), mid, spec.heads, spec.kernel, rng)?)
        } else {
            Middle::Conv(Conv::new(store, &format!("{name}.conv3"), mid, mid, 3, 1, rng)?)
        };
        let middle_norm = Affine::new(store, &format!("{name}.middle_norm"), mid, rng)?;
        let expand = Conv::new(store, &format!("{name}.expand"), mid, spec.c_out, 1, 1, rng)?;
        let expand_norm = Affine::new(store, &format!("{name}.expand_norm"), spec.c_out, rng)?;
        let shortcut = if spec.c_in != spec.c_out || spec.stride != 1 {
            Some((
                Conv::new(store, &format!("{name}.shortcut"), spec.c_in, spec.c_out, 1, spec.stride, rng)?,
                Affine::new(store, &format!("{name}.shortcut_norm"), spec.c_out, rng)?,
            ))
        } else {
            None
        };
        Ok(Bottleneck {
            name: name.to_string(),
            reduce,
            reduce_norm,
            middle,
            middle_norm,
            expand,
            expand_norm,
            shortcut,
            groups: spec.groups,
        })
    }

    pub fn saem(&self) -> Option<&Saem> {
        match &self.middle {
            Middle::Saem(s) => Some(s),
            Middle::Conv(_) => None,
        }
    }

    pub fn forward(&self, t: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = self.groups;
        let h = self.reduce.forward(t, store, x)?;
        let h = t.relu(self.reduce_norm.group_norm(t, store, h, g)?)?;
        let h = match &self.middle {
            Middle::Saem(s) => s.forward(t, store, h)?,
            Middle::Conv(c) => c.forward(t, store, h)?,
        };
        let h = t.relu(self.middle_norm.group_norm(t, store, h, g)?)?;
        let h = self.expand_norm.group_norm(t, store, self.expand.forward(t, store, h)?, g)?;
        let skip = match &self.shortcut {
            Some((conv, norm)) => norm.group_norm(t, store, conv.forward(t, store, x)?, g)?,
            None => x,
        };
        t.relu(t.add(h, skip)?)
    }
}

/// One row per SAEM block: `(layer, |α|, |β|, ln|α/β|)`; the ratio is `+∞` when β = 0.
pub fn fusion_ratios<'a>(blocks: impl IntoIterator<Item = &'a Bottleneck>, store: &ParamStore) -> Vec<(String, f64, f64, f64)> {
    blocks
        .into_iter()
        .filter_map(|b| {
            let s = b.saem()?;
            let a = store.get(s.alpha).tensor.data()[0].abs();
            let be = store.get(s.beta).tensor.data()[0].abs();
            let ratio = if be == 0.0 { f64::INFINITY } else { (a / be).ln() };
            Some((b.name.clone(), a, be, ratio))
        })
        .collect()
}

/// Writes fusion ratios as CSV with header `layer,abs_alpha,abs_beta,log_ratio`.
pub fn write_fusion_ratios(rows: &[(String, f64, f64, f64)], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "layer,abs_alpha,abs_beta,log_ratio").expect("in-memory write");
    for (name, a, b, r) in rows {
        let r = if r.is_infinite() { "inf".to_string() } else { format!("{r}") };
        writeln!(out, "{name},{a},{b},{r}").expect("in-memory write");
    }
    write_atomic(path, &out)
}
