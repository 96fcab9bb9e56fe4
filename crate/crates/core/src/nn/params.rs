use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Mat, NnError};

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    /// Weight matrix drawn from `N(0, std²)`.
    pub fn normal(&mut self, name: &str, shape: (usize, usize), std: f64, rng: &mut impl Rng) -> usize {
        let dist = Normal::new(0.0, std).expect("finite std");
        let value = Mat::from_shape_simple_fn(shape, || dist.sample(rng));
        self.insert(name, value)
    }

    pub fn zeros(&mut self, name: &str, shape: (usize, usize)) -> usize {
        self.insert(name, Mat::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: (usize, usize)) -> usize {
        self.insert(name, Mat::ones(shape))
    }

    pub fn id(&self, name: &str) -> Result<usize, NnError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn value(&self, id: usize) -> &Mat {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Mat {
        &mut self.values[id]
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.index.get(name).map(|&id| &self.values[id])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Overwrites every parameter whose name starts with `prefix` with the
    /// same-named tensor from `other`. Returns how many were copied.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize, NnError> {
        let mut copied = 0;
        for (id, name) in self.names.iter().enumerate() {
            if !name.starts_with(prefix) {
                continue;
            }
            let src = other
                .get(name)
                .ok_or_else(|| NnError::MissingParam(name.clone()))?;
            if src.dim() != self.values[id].dim() {
                return Err(NnError::Shape(format!(
                    "{name}: {:?} vs {:?}",
                    src.dim(),
                    self.values[id].dim()
                )));
            }
            self.values[id].assign(src);
            copied += 1;
        }
        Ok(copied)
    }
}
