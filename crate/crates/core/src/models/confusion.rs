use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffnet::{Graph, NodeId, ParamStore, Tensor};
use crate::error::{MadlError, Result};

/// How many degrees of freedom a confusion matrix gets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClassDependency {
    /// One scalar accuracy shared by all classes.
    Independent,
    /// One accuracy per true class (the diagonal).
    Partial,
    /// Every entry.
    Full,
}

impl ClassDependency {
    /// Head output width for `classes` classes.
    pub fn raw_width(self, classes: usize) -> usize {
        match self {
            ClassDependency::Independent => 1,
            ClassDependency::Partial => classes,
            ClassDependency::Full => classes * classes,
        }
    }

    pub fn letter(self) -> char {
        match self {
            ClassDependency::Independent => 'i',
            ClassDependency::Partial => 'p',
            ClassDependency::Full => 'f',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c.to_ascii_lowercase() {
            'i' => Some(ClassDependency::Independent),
            'p' => Some(ClassDependency::Partial),
            'f' => Some(ClassDependency::Full),
            _ => None,
        }
    }
}

/// Row-stochastic `C×C` matrix; entry `(c, k)` is the probability of
/// annotation `k` given true class `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix(Array2<f64>);

impl ConfusionMatrix {
    pub const ROW_TOLERANCE: f64 = 1e-6;

    pub fn new(m: Array2<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() < 2 {
            return Err(MadlError::Contract(format!(
                "confusion matrix must be square with C >= 2, got {:?}",
                m.dim()
            )));
        }
        for (c, row) in m.rows().into_iter().enumerate() {
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(MadlError::Contract(format!("row {c} has entries outside [0, 1]")));
            }
            if (row.sum() - 1.0).abs() > Self::ROW_TOLERANCE {
                return Err(MadlError::Contract(format!(
                    "row {c} sums to {}, not 1",
                    row.sum()
                )));
            }
        }
        Ok(Self(m))
    }

    /// From a flattened row-major `C²` slice.
    pub fn from_flat(flat: &[f64], classes: usize) -> Result<Self> {
        let m = Array2::from_shape_vec((classes, classes), flat.to_vec()).map_err(|_| {
            MadlError::Contract(format!("{} values cannot form a {classes}x{classes} matrix", flat.len()))
        })?;
        Self::new(m)
    }

    pub fn classes(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn get(&self, true_class: usize, annotated: usize) -> f64 {
        self.0[[true_class, annotated]]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.0.diag().to_vec()
    }

    /// `η·I + (1−η)/(C−1)·(1−I)`.
    pub fn uniform_noise(eta: f64, classes: usize) -> Self {
        let off = (1.0 - eta) / (classes - 1) as f64;
        Self(Array2::from_shape_fn((classes, classes), |(r, c)| {
            if r == c {
                eta
            } else {
                off
            }
        }))
    }
}

/// Graph op turning head outputs (`P × raw_width`) into flattened confusion
/// matrices (`P × C²`).
pub fn expand_confusion_node(
    g: &mut Graph<'_>,
    variant: ClassDependency,
    raw: NodeId,
    classes: usize,
) -> Result<NodeId> {
    let [rows, width] = g.shape(raw);
    let expected = variant.raw_width(classes);
    if width != expected {
        return Err(MadlError::Contract(format!(
            "{variant:?} head needs {expected} outputs for {classes} classes, got {width}"
        )));
    }
    match variant {
        ClassDependency::Full => {
            let per_row = g.reshape(raw, rows * classes, classes)?;
            let soft = g.softmax_rows(per_row);
            g.reshape(soft, rows, classes * classes)
        }
        ClassDependency::Partial => {
            let s = g.sigmoid(raw);
            g.expand_diag(s)
        }
        ClassDependency::Independent => {
            let s = g.sigmoid(raw);
            let s = g.tile_cols(s, classes);
            g.expand_diag(s)
        }
    }
}

/// Non-differentiable convenience wrapper around [`expand_confusion_node`]
/// for a single set of raw outputs.
pub fn expand_confusion(variant: ClassDependency, raw: &[f64], classes: usize) -> Result<ConfusionMatrix> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let node = g.constant(Tensor::from_shape_vec((1, raw.len()), raw.to_vec()).expect("1-row"));
    let out = expand_confusion_node(&mut g, variant, node, classes)?;
    let flat: Vec<f64> = g.value(out).iter().copied().collect();
    ConfusionMatrix::from_flat(&flat, classes)
}

/// Output-layer bias so that near-zero head weights reproduce
/// `η·I + (1−η)/(C−1)·(1−I)`. Returned as a `1 × raw_width` row.
pub fn init_output_bias(variant: ClassDependency, eta: f64, classes: usize) -> Result<Tensor> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(MadlError::Config(format!("AP prior eta must lie in (0, 1), got {eta}")));
    }
    if classes < 2 {
        return Err(MadlError::Config(format!("need at least 2 classes, got {classes}")));
    }
    let logit = (eta / (1.0 - eta)).ln();
    Ok(match variant {
        ClassDependency::Full => {
            let diag = (eta * (classes - 1) as f64 / (1.0 - eta)).ln();
            Tensor::from_shape_fn((1, classes * classes), |(_, j)| {
                if j / classes == j % classes {
                    diag
                } else {
                    0.0
                }
            })
        }
        ClassDependency::Partial => Tensor::from_elem((1, classes), logit),
        ClassDependency::Independent => Tensor::from_elem((1, 1), logit),
    })
}

/// `Σ_c p̂(c) · P̂(c, c)`: probability that the annotator labels correctly.
pub fn ap_correctness(class_probs: &[f64], confusion: &ConfusionMatrix) -> f64 {
    correctness_flat(class_probs, confusion.matrix().as_slice().expect("standard layout"))
}

pub(crate) fn correctness_flat(class_probs: &[f64], confusion_flat: &[f64]) -> f64 {
    let c = class_probs.len();
    let v: f64 = (0..c).map(|k| class_probs[k] * confusion_flat[k * c + k]).sum();
    v.clamp(0.0, 1.0)
}

/// `true` when the annotation is predicted to be false (correctness < 0.5).
pub fn ap_predict(correctness: f64) -> bool {
    correctness < 0.5
}
