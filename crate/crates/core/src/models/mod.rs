//! Ground-truth classifier and annotator-performance networks.

mod ap;
mod confusion;
mod gt;

pub use ap::{ApConfig, ApModel, ApOutput, InstanceSource};
pub use confusion::{
    ap_correctness, ap_predict, expand_confusion, expand_confusion_node, init_output_bias,
    ClassDependency, ConfusionMatrix,
};
pub(crate) use confusion::correctness_flat;
pub use gt::{argmax, gt_predict, GtModel, GtOutput, GT_HIDDEN};

use rand::Rng;

use crate::diffnet::{dense, Graph, NodeId, ParamId, ParamStore};
use crate::error::Result;

/// Fully connected layer backed by two parameters in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_glorot(format!("{name}.weight"), inputs, outputs, rng)?;
        let bias = store.add(format!("{name}.bias"), ndarray::Array2::zeros((1, outputs)))?;
        Ok(Self {
            weight,
            bias,
            inputs,
            outputs,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, input: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        dense(g, input, w, b)
    }
}
