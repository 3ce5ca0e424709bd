//! Serialized trained models.
//!
//! A checkpoint stores every parameter as `(name, shape, values)` together
//! with what is needed to rebuild the networks and preprocess inputs. Values
//! go through JSON with shortest round-trip formatting, so a save/load cycle
//! is bit-exact.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Split, Standardizer};
use crate::diffnet::Tensor;
use crate::error::{MadlError, Result};
use crate::training::{Madl, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub input_dim: usize,
    pub classes: usize,
    pub annotator_dim: usize,
    pub config: TrainConfig,
    pub weights: bool,
    pub standardizer: Standardizer,
    /// Instance split the model was trained with, when known.
    pub split: Option<Split>,
    /// Annotators that provided training annotations (inductive sets).
    pub train_annotators: Option<Vec<usize>>,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Madl, config: &TrainConfig, standardizer: Standardizer) -> Self {
        let params = model
            .store
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: [p.value.nrows(), p.value.ncols()],
                values: p.value.iter().copied().collect(),
            })
            .collect();
        Self {
            format: FORMAT_VERSION,
            input_dim: model.gt.input_dim,
            classes: model.classes(),
            annotator_dim: model.ap.annotator_dim,
            config: config.clone(),
            weights: model.weights,
            standardizer,
            split: None,
            train_annotators: None,
            params,
        }
    }

    /// Rebuilds the networks and loads every stored parameter by name.
    pub fn to_model(&self) -> Result<Madl> {
        if self.format != FORMAT_VERSION {
            return Err(MadlError::Contract(format!(
                "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
                self.format
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Madl::new(self.input_dim, self.classes, self.annotator_dim, &self.config, &mut rng)?;
        model.weights = self.weights;
        if model.store.len() != self.params.len() {
            return Err(MadlError::Contract(format!(
                "checkpoint has {} parameters, the architecture needs {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for p in &self.params {
            let id = model
                .store
                .find(&p.name)
                .ok_or_else(|| MadlError::Contract(format!("unknown parameter '{}'", p.name)))?;
            let value = Tensor::from_shape_vec((p.shape[0], p.shape[1]), p.values.clone())
                .map_err(|e| MadlError::Contract(format!("parameter '{}': {e}", p.name)))?;
            let slot = model.store.value_mut(id);
            if slot.dim() != value.dim() {
                return Err(MadlError::Contract(format!(
                    "parameter '{}' has shape {:?}, the architecture needs {:?}",
                    p.name,
                    value.dim(),
                    slot.dim()
                )));
            }
            *slot = value;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_is_bit_exact() {
        let cfg = TrainConfig {
            weights: false,
            ..TrainConfig::default()
        };
        let mut model = Madl::new(3, 4, 5, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for p in model.store.iter_mut() {
            p.value.mapv_inplace(|v| v / 3.0 + 1e-300);
        }
        let mut ck = Checkpoint::from_model(&model, &cfg, Standardizer::identity(3));
        ck.split = Some(Split { train: vec![0, 2], val: vec![1], test: vec![3] });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let rebuilt = back.to_model().unwrap();
        assert!(!rebuilt.weights);
        for (a, b) in model.store.iter().zip(rebuilt.store.iter()) {
            assert_eq!(a.name, b.name);
            assert!(a.value.iter().zip(b.value.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let cfg = TrainConfig::default();
        let model = Madl::new(3, 2, 2, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut ck = Checkpoint::from_model(&model, &cfg, Standardizer::identity(3));
        ck.input_dim = 4;
        assert!(ck.to_model().is_err());
    }
}
