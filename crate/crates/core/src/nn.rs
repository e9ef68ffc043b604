//! Small parameterized layers shared by the encoder, heads and probe.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Init, ParamId, ParamStore, Tape, Var};

/// Fully connected layer `y = x·W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Result<Self> {
        let weight = store.init(format!("{name}.weight"), &[d_in, d_out], Init::KaimingUniform { fan_in: d_in }, rng)?;
        let bias = if bias { Some(store.init(format!("{name}.bias"), &[d_out], Init::Zeros, rng)?) } else { None };
        Ok(Linear { weight, bias, d_in, d_out })
    }

    /// `x` is `[B, d_in]`.
    pub fn forward(&self, t: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let y = t.matmul(x, t.param(store, self.weight))?;
        match self.bias {
            Some(b) => t.add_bias(y, t.param(store, b), 1),
            None => Ok(y),
        }
    }
}

/// Bias-free 2-D convolution with weights `[c_out, c_in, k, k]`, padding `⌊k/2⌋`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub stride: usize,
    pub kernel: usize,
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Result<Self> {
        let weight = store.init(
            format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            Init::KaimingUniform { fan_in: c_in * kernel * kernel },
            rng,
        )?;
        Ok(Conv { weight, stride, kernel })
    }

    pub fn forward(&self, t: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        t.conv2d(x, t.param(store, self.weight), self.stride, self.kernel / 2)
    }
}

/// Affine parameters of a normalization layer (`gamma` = 1, `beta` = 0 at init).
#[derive(Clone, Debug)]
pub struct Affine {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Affine {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Affine {
            gamma: store.init(format!("{name}.gamma"), &[dim], Init::Ones, rng)?,
            beta: store.init(format!("{name}.beta"), &[dim], Init::Zeros, rng)?,
        })
    }

    pub fn layer_norm(&self, t: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        t.layer_norm(x, t.param(store, self.gamma), t.param(store, self.beta))
    }

    pub fn group_norm(&self, t: &Tape, store: &ParamStore, x: Var, groups: usize) -> Result<Var> {
        t.group_norm(x, t.param(store, self.gamma), t.param(store, self.beta), groups)
    }
}
