use rand::Rng;
use serde::{Deserialize, Serialize};

use super::confusion::{expand_confusion_node, init_output_bias, ClassDependency};
use super::gt::GT_HIDDEN;
use super::Dense;
use crate::diffnet::{Graph, NodeId, ParamStore};
use crate::error::{shape_err, MadlError, Result};

/// What the instance-embedding network consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstanceSource {
    /// The raw feature vector `x`.
    Raw,
    /// The classifier's hidden activations.
    GtHidden,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApConfig {
    pub class_dependency: ClassDependency,
    pub instance_dependent: bool,
    pub annotator_embedding: usize,
    pub instance_embedding: usize,
    pub outer_dim: usize,
    pub residual_hidden: usize,
    /// Prior probability of a correct annotation, in `(0, 1)`.
    pub eta: f64,
    pub outer_product: bool,
    pub residual: bool,
    pub instance_source: InstanceSource,
}

impl Default for ApConfig {
    fn default() -> Self {
        Self {
            class_dependency: ClassDependency::Full,
            instance_dependent: true,
            annotator_embedding: 16,
            instance_embedding: 16,
            outer_dim: 16,
            residual_hidden: 64,
            eta: 0.8,
            outer_product: true,
            residual: true,
            instance_source: InstanceSource::GtHidden,
        }
    }
}

impl ApConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(MadlError::Config(format!(
                "AP prior eta must lie in (0, 1), got {}",
                self.eta
            )));
        }
        let sizes = [
            self.annotator_embedding,
            self.instance_embedding,
            self.outer_dim,
            self.residual_hidden,
        ];
        if sizes.contains(&0) {
            return Err(MadlError::Config("embedding and hidden sizes must be positive".into()));
        }
        Ok(())
    }

    /// Short tag such as `xf` (instance-dependent, full) or `nxi`.
    pub fn variant_tag(&self) -> String {
        let inst = if self.instance_dependent { "x" } else { "nx" };
        format!("{inst}{}", self.class_dependency.letter())
    }
}

/// Annotator-performance model: annotator embedding, optional instance
/// embedding, outer-product interaction, residual block and confusion head.
#[derive(Clone, Debug)]
pub struct ApModel {
    pub config: ApConfig,
    pub classes: usize,
    pub annotator_dim: usize,
    pub instance_input_dim: usize,
    pub annotator_net: Dense,
    pub instance_net: Option<Dense>,
    pub outer_net: Option<Dense>,
    pub residual_in: Dense,
    pub residual_out: Dense,
    pub head: Dense,
}

#[derive(Clone, Copy, Debug)]
pub struct ApOutput {
    /// Embeddings of every annotator (`M × R`).
    pub annotator_embeddings: NodeId,
    /// Head outputs per pair before expansion.
    pub raw: NodeId,
    /// Flattened confusion matrices per pair (`P × C²`).
    pub confusion: NodeId,
}

impl ApModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: ApConfig,
        annotator_dim: usize,
        raw_instance_dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let r = config.annotator_embedding;
        let q = config.instance_embedding;
        let instance_input_dim = match config.instance_source {
            InstanceSource::Raw => raw_instance_dim,
            InstanceSource::GtHidden => GT_HIDDEN,
        };
        let annotator_net = Dense::new(store, "ap.annotator", annotator_dim, r, rng)?;
        let (instance_net, outer_net, block_in) = if config.instance_dependent {
            let inst = Dense::new(store, "ap.instance", instance_input_dim, q, rng)?;
            let outer = if config.outer_product {
                Some(Dense::new(store, "ap.outer", r * q, config.outer_dim, rng)?)
            } else {
                None
            };
            let width = r + q + if config.outer_product { config.outer_dim } else { 0 };
            (Some(inst), outer, width)
        } else {
            (None, None, r)
        };
        let residual_in = Dense::new(store, "ap.residual.in", block_in, config.residual_hidden, rng)?;
        let residual_out = Dense::new(store, "ap.residual.out", config.residual_hidden, r, rng)?;

        let width = config.class_dependency.raw_width(classes);
        let weight = store.add_uniform("ap.head.weight", r, width, 1e-3, rng)?;
        let bias = store.add(
            "ap.head.bias",
            init_output_bias(config.class_dependency, config.eta, classes)?,
        )?;
        let head = Dense {
            weight,
            bias,
            inputs: r,
            outputs: width,
        };
        Ok(Self {
            config,
            classes,
            annotator_dim,
            instance_input_dim,
            annotator_net,
            instance_net,
            outer_net,
            residual_in,
            residual_out,
            head,
        })
    }

    pub fn annotator_embed(&self, g: &mut Graph<'_>, annotators: NodeId) -> Result<NodeId> {
        let [_, o] = g.shape(annotators);
        if o != self.annotator_dim {
            return Err(shape_err(
                "annotator_embed",
                &g.shape(annotators),
                &[self.annotator_dim, self.config.annotator_embedding],
            ));
        }
        let h = self.annotator_net.forward(g, annotators)?;
        Ok(g.relu(h))
    }

    pub fn instance_embed(&self, g: &mut Graph<'_>, inputs: NodeId) -> Result<NodeId> {
        let net = self.instance_net.as_ref().ok_or_else(|| {
            MadlError::Contract("instance embedding requested from an instance-independent AP model".into())
        })?;
        let [_, d] = g.shape(inputs);
        if d != self.instance_input_dim {
            return Err(shape_err(
                "instance_embed",
                &g.shape(inputs),
                &[self.instance_input_dim, self.config.instance_embedding],
            ));
        }
        let h = net.forward(g, inputs)?;
        Ok(g.relu(h))
    }

    /// Raw head outputs from row-aligned annotator (and instance) embeddings.
    pub fn combine(
        &self,
        g: &mut Graph<'_>,
        annotator_emb: NodeId,
        instance_emb: Option<NodeId>,
    ) -> Result<NodeId> {
        let block_input = match (self.config.instance_dependent, instance_emb) {
            (true, Some(xe)) => {
                let mut parts = vec![annotator_emb, xe];
                if let Some(outer) = &self.outer_net {
                    let r = self.config.annotator_embedding;
                    let q = self.config.instance_embedding;
                    let ae_rep = g.repeat_cols(annotator_emb, q);
                    let xe_tile = g.tile_cols(xe, r);
                    let prod = g.mul(ae_rep, xe_tile)?;
                    parts.push(outer.forward(g, prod)?);
                }
                g.concat_cols(&parts)?
            }
            (false, None) => annotator_emb,
            (true, None) => {
                return Err(MadlError::Contract(
                    "instance-dependent AP model needs instance embeddings".into(),
                ))
            }
            (false, Some(_)) => {
                return Err(MadlError::Contract(
                    "instance-independent AP model got instance embeddings".into(),
                ))
            }
        };
        let h = self.residual_in.forward(g, block_input)?;
        let h = g.relu(h);
        let h = self.residual_out.forward(g, h)?;
        let v = if self.config.residual {
            g.add(annotator_emb, h)?
        } else {
            h
        };
        self.head.forward(g, v)
    }

    /// Confusion matrices for `(batch_row, annotator)` pairs.
    ///
    /// `instances` holds one row per batch instance in the configured input
    /// space; it is ignored (and may be `None`) for instance-independent
    /// models.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        annotators: NodeId,
        instances: Option<NodeId>,
        pairs: &[(usize, usize)],
    ) -> Result<ApOutput> {
        let emb = self.annotator_embed(g, annotators)?;
        let ann_idx: Vec<usize> = pairs.iter().map(|&(_, m)| m).collect();
        if self.config.instance_dependent {
            let inputs = instances.ok_or_else(|| {
                MadlError::Contract("instance-dependent AP model needs instance inputs".into())
            })?;
            let xe = self.instance_embed(g, inputs)?;
            let inst_idx: Vec<usize> = pairs.iter().map(|&(n, _)| n).collect();
            let ae_p = g.gather_rows(emb, ann_idx)?;
            let xe_p = g.gather_rows(xe, inst_idx)?;
            let raw = self.combine(g, ae_p, Some(xe_p))?;
            let confusion = expand_confusion_node(g, self.config.class_dependency, raw, self.classes)?;
            Ok(ApOutput {
                annotator_embeddings: emb,
                raw,
                confusion,
            })
        } else {
            let raw_all = self.combine(g, emb, None)?;
            let conf_all =
                expand_confusion_node(g, self.config.class_dependency, raw_all, self.classes)?;
            let raw = g.gather_rows(raw_all, ann_idx.clone())?;
            let confusion = g.gather_rows(conf_all, ann_idx)?;
            Ok(ApOutput {
                annotator_embeddings: emb,
                raw,
                confusion,
            })
        }
    }
}
