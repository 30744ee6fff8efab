//! Parameter declarations and seeded initialization.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::synth::gaussian;
use crate::tensor::Tensor;

/// Learnable tensors by dotted path, e.g. `backbone.g1.c1.k`.
pub type ParamStore = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Zero-mean normal with variance `2 / fan_in`.
    He { fan_in: usize },
    Zeros,
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    /// Conv kernel `[out, in, k, k]` with He init plus a zero bias.
    pub fn conv(prefix: &str, out: usize, inp: usize, k: usize) -> [Self; 2] {
        [
            Self::new(alloc::format!("{prefix}.k"), &[out, inp, k, k], Init::He { fan_in: inp * k * k }),
            Self::new(alloc::format!("{prefix}.b"), &[out], Init::Zeros),
        ]
    }

    /// Dense weights `[out, in]` with He init plus a zero bias.
    pub fn dense(prefix: &str, out: usize, inp: usize) -> [Self; 2] {
        [
            Self::new(alloc::format!("{prefix}.w"), &[out, inp], Init::He { fan_in: inp }),
            Self::new(alloc::format!("{prefix}.b"), &[out], Init::Zeros),
        ]
    }
}

pub fn initialize(specs: &[ParamSpec], rng: &mut impl Rng) -> ParamStore {
    specs
        .iter()
        .map(|s| {
            let mut t = Tensor::zeros(&s.shape);
            match s.init {
                Init::He { fan_in } => {
                    let std = libm::sqrt(2.0 / fan_in.max(1) as f64);
                    t.data_mut().iter_mut().for_each(|v| *v = std * gaussian(rng));
                }
                Init::Zeros => {}
                Init::Const(c) => t.data_mut().iter_mut().for_each(|v| *v = c),
            }
            (s.name.clone(), t)
        })
        .collect()
}
