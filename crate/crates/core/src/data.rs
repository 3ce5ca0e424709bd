//! Datasets, partially observed annotation matrices, splits and feature
//! standardization.
//!
//! Classes are 0-based inside the crate; the CSV layer converts to and from
//! the 1-based external convention.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::Tensor;
use crate::error::{MadlError, Result};

/// `N × M` matrix of class labels with missing entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Annotations(Array2<Option<usize>>);

impl Annotations {
    pub fn missing(instances: usize, annotators: usize) -> Self {
        Self(Array2::from_elem((instances, annotators), None))
    }

    pub fn from_matrix(m: Array2<Option<usize>>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Array2<Option<usize>> {
        &self.0
    }

    pub fn instances(&self) -> usize {
        self.0.nrows()
    }

    pub fn annotators(&self) -> usize {
        self.0.ncols()
    }

    pub fn get(&self, n: usize, m: usize) -> Option<usize> {
        self.0[[n, m]]
    }

    pub fn set(&mut self, n: usize, m: usize, label: Option<usize>) {
        self.0[[n, m]] = label;
    }

    /// `(annotator, label)` for every observed annotation of instance `n`, in
    /// ascending annotator order.
    pub fn observed(&self, n: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0.row(n).into_iter().enumerate().filter_map(|(m, z)| z.map(|z| (m, z)))
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|z| z.is_some()).count()
    }

    pub fn count_for_annotator(&self, m: usize) -> usize {
        self.0.column(m).iter().filter(|z| z.is_some()).count()
    }

    pub fn has_any(&self, n: usize) -> bool {
        self.0.row(n).iter().any(|z| z.is_some())
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self(self.0.select(Axis(0), rows))
    }

    pub fn select_annotators(&self, cols: &[usize]) -> Self {
        Self(self.0.select(Axis(1), cols))
    }

    /// Largest label + 1, or 0 when nothing is observed.
    pub fn label_bound(&self) -> usize {
        self.0.iter().flatten().map(|&z| z + 1).max().unwrap_or(0)
    }
}

/// Instances, optional ground truth and crowd annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Option<Vec<usize>>,
    pub z: Annotations,
    pub classes: usize,
}

impl Dataset {
    pub fn new(x: Tensor, y: Option<Vec<usize>>, z: Annotations, classes: usize) -> Result<Self> {
        let n = x.nrows();
        if z.instances() != n {
            return Err(MadlError::Contract(format!(
                "{} instance rows but {} annotation rows",
                n,
                z.instances()
            )));
        }
        if classes < 2 {
            return Err(MadlError::Contract(format!("need at least 2 classes, got {classes}")));
        }
        if let Some(y) = &y {
            if y.len() != n {
                return Err(MadlError::Contract(format!("{} instance rows but {} labels", n, y.len())));
            }
            if let Some(bad) = y.iter().find(|&&c| c >= classes) {
                return Err(MadlError::Contract(format!("label {bad} outside 0..{classes}")));
            }
        }
        if z.label_bound() > classes {
            return Err(MadlError::Contract(format!(
                "annotation label {} outside 0..{classes}",
                z.label_bound() - 1
            )));
        }
        Ok(Self { x, y, z, classes })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn features(&self) -> usize {
        self.x.ncols()
    }

    pub fn annotators(&self) -> usize {
        self.z.annotators()
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(0), rows),
            y: self.y.as_ref().map(|y| rows.iter().map(|&r| y[r]).collect()),
            z: self.z.select_rows(rows),
            classes: self.classes,
        }
    }
}

/// Instance indices of the training, validation and test parts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub const DEFAULT_FRACTIONS: [f64; 3] = [0.75, 0.05, 0.20];

    /// Random partition; part sizes are `round(fraction · n)` with the test
    /// part taking the remainder.
    pub fn random(n: usize, fractions: [f64; 3], seed: u64) -> Result<Self> {
        if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f))
            || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(MadlError::Config(format!(
                "split fractions must be in [0, 1] and sum to 1, got {fractions:?}"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
        let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
        let test = idx.split_off(n_train + n_val);
        let val = idx.split_off(n_train);
        Ok(Self { train: idx, val, test })
    }
}

/// Per-feature affine map to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Constant features keep scale 1.
    pub fn fit(x: &Tensor) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean: Array1<f64> = x.sum_axis(Axis(0)) / n;
        let scale = x
            .columns()
            .into_iter()
            .zip(&mean)
            .map(|(col, mu)| {
                let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self {
            mean: mean.to_vec(),
            scale,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        if x.ncols() != self.mean.len() {
            return Err(MadlError::Contract(format!(
                "standardizer fitted on {} features, got {}",
                self.mean.len(),
                x.ncols()
            )));
        }
        Ok(Array2::from_shape_fn(x.raw_dim(), |(r, c)| {
            (x[[r, c]] - self.mean[c]) / self.scale[c]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn split_sizes_and_disjointness() {
        let s = Split::random(500, Split::DEFAULT_FRACTIONS, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (375, 25, 100));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..500).collect::<Vec<_>>());
        assert_eq!(s, Split::random(500, Split::DEFAULT_FRACTIONS, 1).unwrap());
        assert!(Split::random(10, [0.5, 0.5, 0.5], 1).is_err());
    }

    #[test]
    fn standardizer_moments() {
        let x = array![[1.0, 5.0], [3.0, 5.0], [5.0, 5.0]];
        let s = Standardizer::fit(&x);
        let t = s.transform(&x).unwrap();
        assert!(t.column(0).sum().abs() < 1e-12);
        assert!((t.column(0).mapv(|v| v * v).sum() / 3.0 - 1.0).abs() < 1e-12);
        assert_eq!(t.column(1).to_vec(), vec![0.0; 3]);
        assert!(s.transform(&array![[1.0]]).is_err());
    }

    #[test]
    fn annotation_queries() {
        let mut z = Annotations::missing(2, 3);
        z.set(0, 2, Some(1));
        z.set(1, 0, Some(0));
        z.set(1, 1, Some(2));
        assert_eq!(z.observed(1).collect::<Vec<_>>(), vec![(0, 0), (1, 2)]);
        assert_eq!(z.count(), 3);
        assert!(z.has_any(0));
        assert_eq!(z.label_bound(), 3);
        let x = Tensor::zeros((2, 1));
        assert!(Dataset::new(x.clone(), None, z.clone(), 2).is_err());
        assert!(Dataset::new(x, Some(vec![0, 2]), z, 3).unwrap().subset(&[1]).y == Some(vec![2]));
    }
}
