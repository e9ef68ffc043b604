use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::{Grads, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    /// Accumulated gradient; `None` until [`ParamStore::zero_grad`] or an accumulation.
    pub grad: Option<Vec<f64>>,
    /// SGD momentum buffer.
    pub velocity: Vec<f64>,
}

impl Parameter {
    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }
}

/// Initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `±sqrt(6/fan_in)`.
    KaimingUniform { fan_in: usize },
    Zeros,
    Ones,
    Constant(f64),
}

static NEXT_UID: AtomicU64 = AtomicU64::new(0);

fn next_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

/// Named, ordered collection of trainable tensors.
///
/// Every store, clones included, carries a distinct identity so that a tape can tell
/// two stores with the same layout apart.
#[derive(Debug)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
    uid: u64,
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new(), uid: next_uid() }
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore { params: self.params.clone(), by_name: self.by_name.clone(), uid: next_uid() }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    /// Registers a tensor under a unique name.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            velocity: vec![0.0; tensor.len()],
            tensor,
            grad: None,
        });
        Ok(id)
    }

    /// Creates and registers a parameter initialized with `init`.
    pub fn init(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut impl Rng) -> Result<ParamId> {
        super::check_shape(shape)?;
        let n: usize = shape.iter().product();
        let data = match init {
            Init::KaimingUniform { fan_in } => {
                if fan_in == 0 {
                    return Err(Error::arg("fan_in must be positive"));
                }
                let bound = (6.0 / fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant(c) => vec![c; n],
        };
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            match &mut p.grad {
                Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
                None => p.grad = Some(vec![0.0; p.tensor.len()]),
            }
        }
    }

    /// Adds the gradients of one backward pass into the parameter buffers.
    pub fn accumulate(&mut self, grads: &Grads) {
        for id in grads.param_ids() {
            let Some(g) = grads.param(id) else { continue };
            let p = &mut self.params[id.0];
            let buf = p.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            buf.iter_mut().zip(g).for_each(|(b, v)| *b += v);
        }
    }

    /// Hash of every name, shape and value bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in &self.params {
            p.name.hash(&mut h);
            p.tensor.shape().hash(&mut h);
            for v in p.tensor.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        self.check_aligned(other)?;
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }

    /// Fails with a state error naming the first parameter whose name or shape differs.
    pub fn check_aligned(&self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::State(format!(
                "parameter sets differ in size: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(Error::State(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    a.name,
                    a.tensor.shape(),
                    b.name,
                    b.tensor.shape()
                )));
            }
        }
        Ok(())
    }
}
