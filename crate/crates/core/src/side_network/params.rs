use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseTensor;
use crate::rng::stream;

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// N(0, 1 / fan_in), fan_in taken from the first dimension.
    FanIn,
    Normal(f64),
}

/// Draw a parameter from its own named stream, so its value depends only on
/// `(seed, name)` and not on what else was built.
pub fn init_param(seed: u64, name: &str, shape: &[usize], init: Init) -> DenseTensor {
    let n: usize = shape.iter().product();
    let std = match init {
        Init::Zeros => return DenseTensor::zeros(shape),
        Init::Ones => return DenseTensor::filled(shape, 1.0),
        Init::FanIn => 1.0 / (shape[0] as f64).sqrt(),
        Init::Normal(s) => s,
    };
    let mut rng = stream(seed, name);
    let dist = Normal::new(0.0, std).expect("finite std");
    DenseTensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(&mut rng)).collect())
        .expect("length matches shape")
}

/// Ordered named tensors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<(String, DenseTensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseTensor) {
        let name = name.into();
        debug_assert!(self.index(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, value));
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Result<&DenseTensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut DenseTensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseTensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DenseTensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}
