use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{contract, Result};

/// Handle into a [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// uniform(−1/√fan_in, 1/√fan_in) with `fan_in` taken from the leading extent.
    Uniform,
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    pub(crate) m: Vec<f32>,
    pub(crate) v: Vec<f32>,
}

/// Named parameters plus Adam moment buffers. Insertion order is stable and
/// is the order used by the serialized manifest.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    step: u64,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, init: Init, rng: &mut ChaCha8Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform => {
                let bound = 1.0 / (shape[0] as f32).sqrt();
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
        };
        self.insert(name, Tensor::new(shape, data).expect("shape matches data"))
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let n = value.numel();
        let id = self.params.len();
        self.index.insert(name.to_string(), id);
        self.params.push(Param {
            name: name.to_string(),
            value,
            trainable: true,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn data(&self, id: ParamId) -> &[f32] {
        self.params[id.0].value.data()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.clear_grad();
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// FNV-1a over names, shapes and value bits. Used to assert that a
    /// model was not modified.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for &s in p.value.shape() {
                eat(&(s as u64).to_le_bytes());
            }
            for v in p.value.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub(crate) fn bump_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    pub(crate) fn check_same_layout(&self, other: &ParameterSet) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(contract("parameter sets differ in length"));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(contract(format!("parameter {} does not match {}", a.name, b.name)));
            }
        }
        Ok(())
    }
}

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}
