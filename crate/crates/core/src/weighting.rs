//! Annotator weights from a Gaussian-kernel density over annotator
//! embeddings, and the gamma prior on the kernel scale.
//!
//! Annotators whose embeddings sit in a dense region of the embedding space
//! are assumed to be correlated and receive small weights. Weights are
//! normalized so they always sum to the number of annotators `M`.
//!
//! The kernel and density are used without normalizing constants: any
//! constant factor cancels in the weight normalization.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::diffnet::{Graph, NodeId};
use crate::error::{MadlError, Result};

/// Learnable kernel scale `γ` with its gamma prior `Gam(α, β)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelScale {
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl KernelScale {
    pub const DEFAULT_ALPHA: f64 = 1.25;
    pub const DEFAULT_BETA: f64 = 0.25;

    /// Starts `γ` at the prior mode `(α − 1) / β`.
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 1.0) || !(beta > 0.0) {
            return Err(MadlError::Config(format!(
                "gamma prior needs alpha > 1 and beta > 0, got alpha={alpha}, beta={beta}"
            )));
        }
        Ok(Self {
            gamma: (alpha - 1.0) / beta,
            alpha,
            beta,
        })
    }

    pub fn prior_mode(&self) -> f64 {
        (self.alpha - 1.0) / self.beta
    }
}

impl Default for KernelScale {
    fn default() -> Self {
        Self::new(Self::DEFAULT_ALPHA, Self::DEFAULT_BETA).expect("valid defaults")
    }
}

/// Per-annotator weights; non-negative and summing to `M`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorWeights(pub Vec<f64>);

impl AnnotatorWeights {
    pub fn uniform(m: usize) -> Self {
        Self(vec![1.0; m])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `exp(−γ ‖a − b‖²)`.
pub fn gaussian_kernel(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, gamma: f64) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d).exp()
}

/// Unnormalized kernel density at annotator `m`, self term included.
pub fn density(m: usize, embeddings: &Array2<f64>, gamma: f64) -> f64 {
    let target = embeddings.row(m);
    embeddings
        .rows()
        .into_iter()
        .map(|row| gaussian_kernel(row, target, gamma))
        .sum()
}

/// `w_m = density_m⁻¹ / Z` with `Z = M⁻¹ Σ_l density_l⁻¹`.
pub fn weights_from_densities(densities: &[f64]) -> Result<AnnotatorWeights> {
    if let Some(bad) = densities.iter().find(|&&d| !(d > 0.0)) {
        return Err(MadlError::Contract(format!(
            "annotator densities must be strictly positive, got {bad}"
        )));
    }
    let m = densities.len() as f64;
    let inv: Vec<f64> = densities.iter().map(|d| d.recip()).collect();
    let z: f64 = inv.iter().sum::<f64>() / m;
    Ok(AnnotatorWeights(inv.into_iter().map(|v| v / z).collect()))
}

pub fn annotator_weights(embeddings: &Array2<f64>, gamma: f64) -> AnnotatorWeights {
    let densities: Vec<f64> = (0..embeddings.nrows())
        .map(|m| density(m, embeddings, gamma))
        .collect();
    weights_from_densities(&densities).expect("self term keeps densities >= 1")
}

/// `ln Gam(γ | α, β) = α ln β − ln Γ(α) + (α − 1) ln γ − βγ`.
pub fn gamma_log_prior(gamma: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(MadlError::Contract(format!("kernel scale must be positive, got {gamma}")));
    }
    Ok(alpha * beta.ln() - ln_gamma(alpha) + (alpha - 1.0) * gamma.ln() - beta * gamma)
}

/// Differentiable annotator weights (`M × 1`).
///
/// Embeddings pass through a gradient stop; only `log_gamma` (a `1×1` node
/// holding `ln γ`) receives gradient from this path.
pub fn weights_node(g: &mut Graph<'_>, embeddings: NodeId, log_gamma: NodeId) -> Result<NodeId> {
    let m = g.shape(embeddings)[0] as f64;
    let frozen = g.stop_gradient(embeddings);
    let dist = g.sq_distances(frozen);
    let gamma = g.exp(log_gamma);
    let scaled = g.mul_scalar(dist, gamma)?;
    let neg = g.affine(scaled, -1.0, 0.0);
    let kernel = g.exp(neg);
    let dens = g.sum_cols(kernel);
    let inv = g.recip(dens);
    let total = g.sum_all(inv);
    let z_inv = g.recip(total);
    let norm = g.affine(z_inv, m, 0.0);
    g.mul_scalar(inv, norm)
}

/// Gamma log-prior as a function of the `ln γ` node.
pub fn gamma_log_prior_node(g: &mut Graph<'_>, log_gamma: NodeId, alpha: f64, beta: f64) -> NodeId {
    let constant = alpha * beta.ln() - ln_gamma(alpha);
    let gamma = g.exp(log_gamma);
    let linear = g.affine(log_gamma, alpha - 1.0, constant);
    let decay = g.affine(gamma, -beta, 0.0);
    let out = g.add(linear, decay);
    out.expect("both 1x1")
}
