use rand::Rng;

use super::Dense;
use crate::diffnet::{Graph, NodeId, ParamStore, Tensor};
use crate::error::{shape_err, Result};

/// Width of the single hidden layer of the tabular classifier.
pub const GT_HIDDEN: usize = 128;

/// MLP classifier: `D → 128 (ReLU) → C (softmax)`.
#[derive(Clone, Debug)]
pub struct GtModel {
    pub input_dim: usize,
    pub classes: usize,
    pub hidden: Dense,
    pub output: Dense,
}

#[derive(Clone, Copy, Debug)]
pub struct GtOutput {
    /// ReLU activations of the hidden layer (`B × 128`).
    pub hidden: NodeId,
    pub logits: NodeId,
    /// Row-wise class-membership probabilities (`B × C`).
    pub probs: NodeId,
}

impl GtModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        input_dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            input_dim,
            classes,
            hidden: Dense::new(store, "gt.hidden", input_dim, GT_HIDDEN, rng)?,
            output: Dense::new(store, "gt.output", GT_HIDDEN, classes, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<GtOutput> {
        let [_, d] = g.shape(x);
        if d != self.input_dim {
            return Err(shape_err("gt_forward", &g.shape(x), &[self.input_dim, GT_HIDDEN]));
        }
        let h = self.hidden.forward(g, x)?;
        let hidden = g.relu(h);
        let logits = self.output.forward(g, hidden)?;
        let probs = g.softmax_rows(logits);
        Ok(GtOutput {
            hidden,
            logits,
            probs,
        })
    }

    /// Class-membership probabilities for every row of `x`.
    pub fn predict_proba(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let xn = g.constant(x.clone());
        let out = self.forward(&mut g, xn)?;
        Ok(g.value(out.probs).clone())
    }

    pub fn predict(&self, store: &ParamStore, x: &Tensor) -> Result<Vec<usize>> {
        let p = self.predict_proba(store, x)?;
        Ok(p.rows().into_iter().map(|r| gt_predict(r.as_slice().unwrap())).collect())
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Predicted class (0-based) from class-membership probabilities.
pub fn gt_predict(probs: &[f64]) -> usize {
    argmax(probs)
}
