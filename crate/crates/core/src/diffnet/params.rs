use ndarray::Array2;
use rand::Rng;

use crate::error::{MadlError, Result};

/// Dense row-major float64 matrix. Vectors are `1×n` or `n×1`, scalars `1×1`.
pub type Tensor = Array2<f64>;

/// Index of a [`Parameter`] inside its [`ParamStore`].
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
    pub value: Tensor,
    pub grad: Tensor,
}

/// Owns every trainable tensor of a model. Names are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(MadlError::Contract(format!("duplicate parameter '{name}'")));
        }
        let grad = Tensor::zeros(value.raw_dim());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Glorot-uniform weights in `±sqrt(6 / (rows + cols))`.
    pub fn add_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        self.add_uniform(name, rows, cols, limit, rng)
    }

    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        limit: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let value = Tensor::from_shape_fn((rows, cols), |_| rng.random_range(-limit..=limit));
        self.add(name, value)
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

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copies values (not gradients) from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(MadlError::Contract(format!(
                "parameter count mismatch: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.dim() != src.value.dim() {
                return Err(MadlError::Contract(format!(
                    "parameter layout mismatch at '{}' ({:?}) vs '{}' ({:?})",
                    dst.name,
                    dst.value.dim(),
                    src.name,
                    src.value.dim()
                )));
            }
            dst.value.assign(&src.value);
        }
        Ok(())
    }
}
