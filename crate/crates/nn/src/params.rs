//! Named parameters with their RMSprop accumulators and step counter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(gain / fan_in)`.
    FanInUniform {
        fan_in: usize,
        gain: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    accum: Vec<Tensor>,
    pub step: u64,
}

impl ParamStore {
    /// Draws all parameters in spec order from one seeded stream.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self { names: Vec::new(), values: Vec::new(), accum: Vec::new(), step: 0 };
        for s in specs {
            let n: usize = s.shape.iter().product();
            let data = match s.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::FanInUniform { fan_in, gain } => {
                    let bound = (gain / fan_in.max(1) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
                }
            };
            store.names.push(s.name.clone());
            store.values.push(Tensor::new(s.shape.clone(), data).expect("spec shape"));
            store.accum.push(Tensor::zeros(s.shape.clone()));
        }
        store
    }

    /// Rebuilds a store from saved parts, checking shapes pairwise.
    pub fn from_parts(names: Vec<String>, values: Vec<Tensor>, accum: Vec<Tensor>, step: u64) -> Result<Self> {
        if names.len() != values.len() || names.len() != accum.len() {
            return Err(NnError::Checkpoint("parameter / accumulator count mismatch".into()));
        }
        for (n, (v, a)) in names.iter().zip(values.iter().zip(&accum)) {
            if v.shape() != a.shape() {
                return Err(NnError::Checkpoint(format!("accumulator shape differs for {n}")));
            }
        }
        Ok(Self { names, values, accum, step })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    pub fn names(&self) -> &[String] {
        &self.names
    }
    pub fn value(&self, i: usize) -> &Tensor {
        &self.values[i]
    }
    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }
    pub fn values(&self) -> &[Tensor] {
        &self.values
    }
    pub fn accumulator(&self, i: usize) -> &Tensor {
        &self.accum[i]
    }
    pub fn accumulators(&self) -> &[Tensor] {
        &self.accum
    }
    pub(crate) fn value_and_accum_mut(&mut self, i: usize) -> (&mut Tensor, &mut Tensor) {
        (&mut self.values[i], &mut self.accum[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Sets every parameter to zero (accumulators untouched).
    pub fn zero_all(&mut self) {
        for v in &mut self.values {
            v.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Zero gradients, one per parameter.
    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.values.iter().map(|v| Tensor::zeros(v.shape().to_vec())).collect()
    }
}
