//! Size-information branch.
//!
//! A normalized `(length, wingspan)` pair is encoded periodically, lifted to a domain
//! feature `z_e`, and turned into a per-sample `d_i × d_i` projection `W`. The image
//! feature is then updated `N` times by `z ← ReLU(LN(W·z))`, with `W` held fixed.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Affine, Linear};
use crate::tensor::{ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiebConfig {
    /// Width of the size feature `z_e`.
    pub d_e: usize,
    /// Width of the image feature; must match the encoder embedding.
    pub d_i: usize,
    /// Number of projection updates.
    pub n: usize,
    /// Physical range mapped onto `[−1, 1]`, in meters.
    pub size_range: (f64, f64),
}

impl Default for SiebConfig {
    fn default() -> Self {
        SiebConfig { d_e: 32, d_i: 64, n: 2, size_range: (0.0, 100.0) }
    }
}

/// Periodic encoding `[sin πx̂₁, sin πx̂₂, cos πx̂₁, cos πx̂₂]`.
pub fn encode_size(x_hat: [f64; 2]) -> Result<[f64; 4]> {
    if let Some(v) = x_hat.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
        return Err(Error::arg(format!("normalized size {v} outside [-1, 1]")));
    }
    let [a, b] = x_hat.map(|v| PI * v);
    Ok([a.sin(), b.sin(), a.cos(), b.cos()])
}

#[derive(Clone, Debug)]
pub struct Sieb {
    pub config: SiebConfig,
    pub mlp: Linear,
    pub ln_e: Affine,
    pub proj_gen: Linear,
    pub ln_i: Affine,
}

impl Sieb {
    pub fn new(store: &mut ParamStore, prefix: &str, config: SiebConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.d_e == 0 || config.d_i == 0 {
            return Err(Error::Config("SIEB widths must be positive".into()));
        }
        if !(config.size_range.0 < config.size_range.1) {
            return Err(Error::Config(format!("size range {:?} is empty", config.size_range)));
        }
        Ok(Sieb {
            mlp: Linear::new(store, &format!("{prefix}.mlp"), 4, config.d_e, true, rng)?,
            ln_e: Affine::new(store, &format!("{prefix}.ln_e"), config.d_e, rng)?,
            proj_gen: Linear::new(store, &format!("{prefix}.proj_gen"), config.d_e, config.d_i * config.d_i, true, rng)?,
            ln_i: Affine::new(store, &format!("{prefix}.ln_i"), config.d_i, rng)?,
            config,
        })
    }

    /// `x_hat` `[B, 2]` → `x_e` `[B, 4]` on the tape.
    pub fn encode(&self, t: &Tape, x_hat: Var) -> Result<Var> {
        let scaled = t.mul_scalar(x_hat, PI)?;
        t.concat(&[t.sin(scaled)?, t.cos(scaled)?], 1)
    }

    /// `z_e = ReLU(LN(fc(x_e)))`, `[B, d_e]`.
    pub fn domain_feature(&self, t: &Tape, store: &ParamStore, x_e: Var) -> Result<Var> {
        let h = self.mlp.forward(t, store, x_e)?;
        t.relu(self.ln_e.layer_norm(t, store, h)?)
    }

    /// Row-major reshape of `fc(z_e)` into `[B, d_i, d_i]`.
    pub fn gen_projection(&self, t: &Tape, store: &ParamStore, z_e: Var) -> Result<Var> {
        let b = t.shape(z_e)[0];
        let d = self.config.d_i;
        t.reshape(self.proj_gen.forward(t, store, z_e)?, &[b, d, d])
    }

    /// Applies `z ← ReLU(LN(W·z))` `n` times to `z0` `[B, d_i]`.
    pub fn adaptive_project(&self, t: &Tape, store: &ParamStore, z0: Var, w: Var, n: usize) -> Result<Var> {
        let shape = t.shape(z0);
        let (b, d) = (shape[0], self.config.d_i);
        if shape != [b, d] {
            return Err(Error::dim("adaptive_project", format!("expected [B, {d}], got {shape:?}")));
        }
        let mut z = z0;
        for _ in 0..n {
            let col = t.reshape(z, &[b, d, 1])?;
            let wz = t.reshape(t.matmul(w, col)?, &[b, d])?;
            z = t.relu(self.ln_i.layer_norm(t, store, wz)?)?;
        }
        Ok(z)
    }

    /// Full branch: image feature `z0` `[B, d_i]` and normalized sizes `x_hat` `[B, 2]`.
    pub fn forward(&self, t: &Tape, store: &ParamStore, z0: Var, x_hat: Var) -> Result<Var> {
        let x_e = self.encode(t, x_hat)?;
        let z_e = self.domain_feature(t, store, x_e)?;
        let w = self.gen_projection(t, store, z_e)?;
        self.adaptive_project(t, store, z0, w, self.config.n)
    }
}
