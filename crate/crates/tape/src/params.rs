use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::Mat;

/// Parameter handle: the owning store's identity plus the slot within it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId {
    store: u32,
    index: u32,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

static NEXT_STORE: AtomicU32 = AtomicU32::new(1);

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("duplicate parameter name `{0}`")]
    Duplicate(String),
    #[error("unknown parameter `{0}`")]
    Unknown(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
}

/// Named, ordered collection of trainable matrices.
///
/// Clones share the identity of the original, so handles created for one
/// remain valid for the other.
#[derive(Clone, Debug)]
pub struct ParamStore {
    uid: u32,
    names: Vec<String>,
    values: Vec<Mat>,
    lookup: BTreeMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            lookup: BTreeMap::new(),
        }
    }
}

/// Equality of names and values; store identity is ignored.
impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values == other.values
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn handle(&self, index: usize) -> ParamId {
        ParamId { store: self.uid, index: index as u32 }
    }

    pub fn owns(&self, id: ParamId) -> bool {
        id.store == self.uid && id.index() < self.values.len()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> Result<ParamId, ParamError> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        let id = self.values.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value.mapv(|x| x as f32 as f64));
        Ok(self.handle(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| self.handle(i))
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        debug_assert!(self.owns(id), "parameter handle from another store");
        &self.values[id.index()]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        debug_assert!(self.owns(id), "parameter handle from another store");
        &mut self.values[id.index()]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.index()]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(|i| self.handle(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Overwrites a parameter by name, checking the shape.
    pub fn set(&mut self, name: &str, value: Mat) -> Result<(), ParamError> {
        let id = self.id(name).ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        let expected = self.values[id.index()].dim();
        if value.dim() != expected {
            return Err(ParamError::Shape {
                name: name.to_string(),
                expected,
                found: value.dim(),
            });
        }
        self.values[id.index()] = value;
        Ok(())
    }

    /// Uniform fan-in initialisation `U(-k, k)` with `k = gain / sqrt(fan_in)`.
    pub fn init_uniform(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        fan_in: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId, ParamError> {
        let k = gain / (fan_in.max(1) as f64).sqrt();
        let value = if k > 0.0 {
            let dist = Uniform::new_inclusive(-k, k).expect("finite bound");
            Mat::from_shape_simple_fn(shape, || dist.sample(rng))
        } else {
            Mat::zeros(shape)
        };
        self.insert(name, value)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: (usize, usize)) -> Result<ParamId, ParamError> {
        self.insert(name, Mat::zeros(shape))
    }
}

/// First-order adaptive-moment optimiser.
///
/// Parameters are kept at single precision after every update so stored
/// checkpoints can be written as float32 without loss.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: Option<f64>,
    step: u64,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_grad_clip(mut self, max_norm: f64) -> Self {
        self.grad_clip = Some(max_norm);
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from `grads`; entries belonging to other stores are ignored.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Mat)]) {
        let grads: Vec<&(ParamId, Mat)> = grads.iter().filter(|(id, _)| store.owns(*id)).collect();
        self.step += 1;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let scale = match self.grad_clip {
            Some(max) => {
                let norm = grads.iter().map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Mat::zeros(g.dim()));
            let v = self.v[i].get_or_insert_with(|| Mat::zeros(g.dim()));
            let p = &mut store.values[i];
            for ((pv, mv), (vv, &gv)) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut().zip(g.iter())) {
                let gv = gv * scale;
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let update = self.lr * (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
                *pv = (*pv - update) as f32 as f64;
            }
        }
    }
}
