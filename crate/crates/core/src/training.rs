//! Weighted maximum-likelihood objective and the end-to-end training loop.
//!
//! The loss for a mini-batch with observed annotations `Z` is
//!
//! ```text
//! −(1/|Z|) Σ_n Σ_{m ∈ A_n} w_m ln(Σ_c p̂(c | x_n) P̂_m(c, z_nm)) − ln Gam(γ | α, β)
//! ```
//!
//! where `|Z|` counts the annotations of the mini-batch. Confusion matrices
//! are only evaluated for observed `(instance, annotator)` pairs; the others
//! do not enter the loss.

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Annotations;
use crate::diffnet::{adamw_step, cosine_lr, Graph, NodeId, OptimizerState, ParamId, ParamStore, Tensor};
use crate::error::{MadlError, Result};
use crate::models::{correctness_flat, gt_predict, ApConfig, ApModel, ConfusionMatrix, GtModel, GtOutput, InstanceSource};
use crate::weighting::{self, gamma_log_prior_node, weights_node, AnnotatorWeights, KernelScale};

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Largest number of `(instance, annotator)` pairs evaluated in one graph
/// during prediction.
const PREDICT_CHUNK_PAIRS: usize = 8192;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Shape of the gamma prior on the kernel scale.
    pub alpha: f64,
    /// Rate of the gamma prior on the kernel scale.
    pub beta: f64,
    pub seed: u64,
    pub ap: ApConfig,
    /// Kernel-density annotator weights; when off, `w ≡ 1` and the prior
    /// term is dropped.
    pub weights: bool,
    /// `(learning rate, weight decay)` cells searched by validation GT-ACC;
    /// empty means train once with `learning_rate` and `weight_decay`.
    pub grid: Vec<(f64, f64)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 0.01,
            weight_decay: 0.0,
            alpha: KernelScale::DEFAULT_ALPHA,
            beta: KernelScale::DEFAULT_BETA,
            seed: 0,
            ap: ApConfig::default(),
            weights: true,
            grid: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn standard_grid() -> Vec<(f64, f64)> {
        let mut grid = Vec::with_capacity(9);
        for lr in [0.01, 0.005, 0.001] {
            for wd in [0.0, 0.001, 0.0001] {
                grid.push((lr, wd));
            }
        }
        grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(MadlError::Config(format!(
                "epochs and batch size must be at least 1, got {} and {}",
                self.epochs, self.batch_size
            )));
        }
        for (lr, wd) in std::iter::once((self.learning_rate, self.weight_decay)).chain(self.grid.iter().copied()) {
            if !(lr >= 0.0 && lr.is_finite()) || !(wd >= 0.0 && wd.is_finite()) {
                return Err(MadlError::Config(format!(
                    "learning rate and weight decay must be finite and non-negative, got {lr} and {wd}"
                )));
            }
        }
        KernelScale::new(self.alpha, self.beta)?;
        self.ap.validate()
    }
}

/// Training instances of one step together with their observed annotations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Dataset row of each batch instance.
    pub rows: Vec<usize>,
    pub pairs: Vec<BatchPair>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPair {
    /// Position within [`Batch::rows`].
    pub row: usize,
    pub annotator: usize,
    pub label: usize,
}

impl Batch {
    pub fn new(z: &Annotations, rows: &[usize]) -> Self {
        let mut pairs = Vec::new();
        for (i, &n) in rows.iter().enumerate() {
            pairs.extend(z.observed(n).map(|(annotator, label)| BatchPair {
                row: i,
                annotator,
                label,
            }));
        }
        Self {
            rows: rows.to_vec(),
            pairs,
        }
    }

    /// `|Z|` of this batch.
    pub fn annotation_count(&self) -> usize {
        self.pairs.len()
    }

    fn pair_indices(&self) -> Vec<(usize, usize)> {
        self.pairs.iter().map(|p| (p.row, p.annotator)).collect()
    }
}

/// `Σ_c p̂(c) P̂(c, z)`.
pub fn annotation_probability(class_probs: &[f64], confusion: &ConfusionMatrix, z: usize) -> f64 {
    class_probs
        .iter()
        .enumerate()
        .map(|(c, p)| p * confusion.get(c, z))
        .sum()
}

/// One observed annotation entering the weighted loss.
#[derive(Clone, Copy, Debug)]
pub struct Observation<'a> {
    pub class_probs: &'a [f64],
    pub confusion: &'a ConfusionMatrix,
    pub label: usize,
    pub weight: f64,
}

/// Scalar evaluation of the weighted loss. `prior` is `(γ, α, β)`; pass
/// `None` to drop the prior term.
pub fn weighted_loss(observations: &[Observation<'_>], prior: Option<(f64, f64, f64)>) -> Result<f64> {
    if observations.is_empty() {
        return Err(MadlError::Contract("weighted loss needs at least one annotation".into()));
    }
    let data: f64 = observations
        .iter()
        .map(|o| o.weight * annotation_probability(o.class_probs, o.confusion, o.label).max(PROB_FLOOR).ln())
        .sum();
    let mut loss = -data / observations.len() as f64;
    if let Some((gamma, alpha, beta)) = prior {
        loss -= weighting::gamma_log_prior(gamma, alpha, beta)?;
    }
    Ok(loss)
}

/// `−(1/P) Σ_p w_p ln(Σ_c probs[p, c] · confusion[p, c·C + labels[p]])`.
///
/// `probs` is `P × C` (already aligned with the pairs), `confusion` is
/// `P × C²` and `weights`, when given, is `P × 1`.
pub fn data_term_node(
    g: &mut Graph<'_>,
    probs: NodeId,
    confusion: NodeId,
    labels: &[usize],
    weights: Option<NodeId>,
) -> Result<NodeId> {
    let [p, c] = g.shape(probs);
    if labels.len() != p || p == 0 {
        return Err(MadlError::Contract(format!(
            "{} label(s) for {} probability row(s)",
            labels.len(),
            p
        )));
    }
    let idx: Vec<usize> = labels
        .iter()
        .flat_map(|&z| (0..c).map(move |k| k * c + z))
        .collect();
    let column = g.gather_elems(confusion, idx, c)?;
    let joint = g.mul(column, probs)?;
    let q = g.sum_cols(joint);
    let mut ll = g.ln_clamped(q, PROB_FLOOR);
    if let Some(w) = weights {
        ll = g.mul(ll, w)?;
    }
    let total = g.sum_all(ll);
    Ok(g.affine(total, -1.0 / p as f64, 0.0))
}

/// Nodes of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub loss: NodeId,
    pub data: NodeId,
    pub prior: Option<NodeId>,
    /// `M × 1` annotator weights when weighting is on.
    pub weights: Option<NodeId>,
}

#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub gt: GtOutput,
    /// `M × R` annotator embeddings.
    pub embeddings: NodeId,
    /// `P × C²` confusion matrices, one row per requested pair.
    pub confusion: NodeId,
}

/// Ground-truth model, annotator-performance model and kernel scale sharing
/// one parameter store.
#[derive(Clone, Debug)]
pub struct Madl {
    pub store: ParamStore,
    pub gt: GtModel,
    pub ap: ApModel,
    /// `ln γ`, a `1 × 1` parameter.
    pub log_gamma: ParamId,
    pub alpha: f64,
    pub beta: f64,
    pub weights: bool,
}

impl Madl {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        classes: usize,
        annotator_dim: usize,
        config: &TrainConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let scale = KernelScale::new(config.alpha, config.beta)?;
        let mut store = ParamStore::new();
        let gt = GtModel::new(&mut store, input_dim, classes, rng)?;
        let ap = ApModel::new(&mut store, config.ap.clone(), annotator_dim, input_dim, classes, rng)?;
        let log_gamma = store.add("log_gamma", Tensor::from_elem((1, 1), scale.gamma.ln()))?;
        Ok(Self {
            store,
            gt,
            ap,
            log_gamma,
            alpha: config.alpha,
            beta: config.beta,
            weights: config.weights,
        })
    }

    pub fn classes(&self) -> usize {
        self.gt.classes
    }

    pub fn gamma(&self) -> f64 {
        self.store.value(self.log_gamma)[[0, 0]].exp()
    }

    /// Runs both networks on batch instances `x` for the given
    /// `(batch row, annotator)` pairs.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: NodeId,
        annotators: NodeId,
        pairs: &[(usize, usize)],
    ) -> Result<Forward> {
        let gt = self.gt.forward(g, x)?;
        let instances = match self.ap.config.instance_source {
            InstanceSource::Raw => x,
            InstanceSource::GtHidden => gt.hidden,
        };
        let ap = self.ap.forward(g, annotators, Some(instances), pairs)?;
        Ok(Forward {
            gt,
            embeddings: ap.annotator_embeddings,
            confusion: ap.confusion,
        })
    }

    /// Weighted loss of one batch; `x` holds the rows of `batch.rows`.
    pub fn loss(&self, g: &mut Graph<'_>, x: &Tensor, annotators: &Tensor, batch: &Batch) -> Result<LossTerms> {
        if batch.pairs.is_empty() {
            return Err(MadlError::Contract("training step needs at least one annotation".into()));
        }
        let m = annotators.nrows();
        if let Some(bad) = batch.pairs.iter().find(|p| p.annotator >= m || p.row >= batch.rows.len()) {
            return Err(MadlError::Contract(format!("batch pair {bad:?} out of range")));
        }
        let xn = g.constant(x.clone());
        let an = g.constant(annotators.clone());
        let fwd = self.forward(g, xn, an, &batch.pair_indices())?;
        let probs = g.gather_rows(fwd.gt.probs, batch.pairs.iter().map(|p| p.row).collect())?;
        let labels: Vec<usize> = batch.pairs.iter().map(|p| p.label).collect();
        if self.weights {
            let lg = g.param(self.log_gamma);
            let w = weights_node(g, fwd.embeddings, lg)?;
            let w_pairs = g.gather_rows(w, batch.pairs.iter().map(|p| p.annotator).collect())?;
            let data = data_term_node(g, probs, fwd.confusion, &labels, Some(w_pairs))?;
            let prior = gamma_log_prior_node(g, lg, self.alpha, self.beta);
            let loss = g.sub(data, prior)?;
            Ok(LossTerms {
                loss,
                data,
                prior: Some(prior),
                weights: Some(w),
            })
        } else {
            let data = data_term_node(g, probs, fwd.confusion, &labels, None)?;
            Ok(LossTerms {
                loss: data,
                data,
                prior: None,
                weights: None,
            })
        }
    }

    /// Cross-entropy of the classifier on `labels` plus the negative mean
    /// log-probability of each annotation given the same labels as the
    /// conditioning class. Used by the LB and UB baselines.
    pub fn supervised_loss(
        &self,
        g: &mut Graph<'_>,
        x: &Tensor,
        annotators: &Tensor,
        batch: &Batch,
        labels: &[usize],
    ) -> Result<NodeId> {
        let b = batch.rows.len();
        if labels.len() != b || b == 0 {
            return Err(MadlError::Contract(format!("{} label(s) for {} batch row(s)", labels.len(), b)));
        }
        let c = self.classes();
        let xn = g.constant(x.clone());
        let an = g.constant(annotators.clone());
        let fwd = self.forward(g, xn, an, &batch.pair_indices())?;
        let true_class = g.gather_elems(fwd.gt.probs, labels.to_vec(), 1)?;
        let ll = g.ln_clamped(true_class, PROB_FLOOR);
        let total = g.sum_all(ll);
        let ce = g.affine(total, -1.0 / b as f64, 0.0);
        if batch.pairs.is_empty() {
            return Ok(ce);
        }
        let cond = Tensor::from_shape_fn((batch.pairs.len(), c), |(p, k)| {
            if labels[batch.pairs[p].row] == k {
                1.0
            } else {
                0.0
            }
        });
        let cond = g.constant(cond);
        let ann: Vec<usize> = batch.pairs.iter().map(|p| p.label).collect();
        let ap = data_term_node(g, cond, fwd.confusion, &ann, None)?;
        g.add(ce, ap)
    }

    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        self.gt.predict_proba(&self.store, x)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.gt.predict(&self.store, x)
    }

    pub fn annotator_embeddings(&self, annotators: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let an = g.constant(annotators.clone());
        let e = self.ap.annotator_embed(&mut g, an)?;
        Ok(g.value(e).clone())
    }

    /// Current weights; uniform when weighting is off.
    pub fn annotator_weights(&self, annotators: &Tensor) -> Result<AnnotatorWeights> {
        if !self.weights {
            return Ok(AnnotatorWeights::uniform(annotators.nrows()));
        }
        let emb = self.annotator_embeddings(annotators)?;
        Ok(weighting::annotator_weights(&emb, self.gamma()))
    }

    /// Confusion matrices (`P × C²`) for `(row of x, annotator)` pairs.
    pub fn confusion(&self, x: &Tensor, annotators: &Tensor, pairs: &[(usize, usize)]) -> Result<Tensor> {
        let c = self.classes();
        let mut out = Tensor::zeros((pairs.len(), c * c));
        for (chunk_id, chunk) in pairs.chunks(PREDICT_CHUNK_PAIRS).enumerate() {
            let mut rows: Vec<usize> = chunk.iter().map(|&(n, _)| n).collect();
            rows.sort_unstable();
            rows.dedup();
            let local: Vec<(usize, usize)> = chunk
                .iter()
                .map(|&(n, m)| (rows.binary_search(&n).expect("row present"), m))
                .collect();
            let mut g = Graph::new(&self.store);
            let xn = g.constant(x.select(Axis(0), &rows));
            let an = g.constant(annotators.clone());
            let fwd = self.forward(&mut g, xn, an, &local)?;
            let start = chunk_id * PREDICT_CHUNK_PAIRS;
            out.slice_mut(ndarray::s![start..start + chunk.len(), ..])
                .assign(g.value(fwd.confusion));
        }
        Ok(out)
    }

    /// Predicted probability that annotator `m` labels instance `n`
    /// correctly, for all pairs (`N × M`).
    pub fn correctness(&self, x: &Tensor, annotators: &Tensor) -> Result<Tensor> {
        let (n, m) = (x.nrows(), annotators.nrows());
        let mut out = Tensor::zeros((n, m));
        let rows_per_chunk = (PREDICT_CHUNK_PAIRS / m.max(1)).max(1);
        let mut start = 0;
        while start < n {
            let end = (start + rows_per_chunk).min(n);
            let rows: Vec<usize> = (start..end).collect();
            let pairs: Vec<(usize, usize)> = (0..rows.len())
                .flat_map(|r| (0..m).map(move |a| (r, a)))
                .collect();
            let mut g = Graph::new(&self.store);
            let xn = g.constant(x.select(Axis(0), &rows));
            let an = g.constant(annotators.clone());
            let fwd = self.forward(&mut g, xn, an, &pairs)?;
            let probs = g.value(fwd.gt.probs);
            let conf = g.value(fwd.confusion);
            for (p, &(r, a)) in pairs.iter().enumerate() {
                let pr = probs.row(r);
                let cr = conf.row(p);
                out[[start + r, a]] = correctness_flat(pr.as_slice().unwrap(), cr.as_slice().unwrap());
            }
            start = end;
        }
        Ok(out)
    }
}

/// Everything the training loop reads.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub x: &'a Tensor,
    pub z: &'a Annotations,
    pub annotators: &'a Tensor,
    pub classes: usize,
    /// Validation instances and their true classes, used for model selection.
    pub validation: Option<(&'a Tensor, &'a [usize])>,
}

/// What the loss is fitted against.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    /// The weighted crowd-annotation likelihood.
    Annotations,
    /// Per-instance labels (majority vote or ground truth); instances with
    /// `None` are skipped.
    Labels(&'a [Option<usize>]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_gt_acc: Option<f64>,
    pub val_gt_nll: Option<f64>,
    pub gamma: f64,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the selected epoch.
    pub model: Madl,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch of the selected parameters.
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn best_val_acc(&self) -> Option<f64> {
        self.history[self.best_epoch - 1].val_gt_acc
    }
}

/// Orders validation scores: higher GT-ACC first, then lower GT-NLL. Equal
/// scores count as better so that ties go to the latest epoch.
fn at_least_as_good(acc: f64, nll: f64, best: (f64, f64)) -> bool {
    acc > best.0 || (acc == best.0 && nll <= best.1)
}

/// Index of the record with the highest validation GT-ACC. Ties are broken
/// by the lower validation GT-NLL, then by the later epoch. Records without
/// a score lose to any scored record. When none is scored, the last record
/// is chosen.
pub fn select_best(history: &[EpochRecord]) -> Option<usize> {
    if history.is_empty() {
        return None;
    }
    let mut best: Option<(usize, (f64, f64))> = None;
    for (i, r) in history.iter().enumerate() {
        if let Some(acc) = r.val_gt_acc {
            let nll = r.val_gt_nll.unwrap_or(f64::INFINITY);
            if best.is_none_or(|(_, b)| at_least_as_good(acc, nll, b)) {
                best = Some((i, (acc, nll)));
            }
        }
    }
    Some(best.map_or(history.len() - 1, |(i, _)| i))
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

pub fn train(data: &TrainData<'_>, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_target(data, config, Target::Annotations)
}

pub fn train_with_target(data: &TrainData<'_>, config: &TrainConfig, target: Target<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    let n = data.x.nrows();
    if data.z.instances() != n || data.z.annotators() != data.annotators.nrows() {
        return Err(MadlError::Contract(format!(
            "annotation matrix {}x{} does not match {} instances and {} annotators",
            data.z.instances(),
            data.z.annotators(),
            n,
            data.annotators.nrows()
        )));
    }
    let rows: Vec<usize> = match target {
        Target::Annotations => (0..n).filter(|&i| data.z.has_any(i)).collect(),
        Target::Labels(labels) => {
            if labels.len() != n {
                return Err(MadlError::Contract(format!("{} labels for {} instances", labels.len(), n)));
            }
            (0..n).filter(|&i| labels[i].is_some()).collect()
        }
    };
    if rows.is_empty() {
        return Err(MadlError::Config("training split has no usable annotations".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Madl::new(data.x.ncols(), data.classes, data.annotators.ncols(), config, &mut rng)?;
    if matches!(target, Target::Labels(_)) {
        model.weights = false;
    }
    let steps_per_epoch = rows.len().div_ceil(config.batch_size);
    let mut opt = OptimizerState::new(
        &model.store,
        config.learning_rate,
        config.weight_decay,
        (steps_per_epoch * config.epochs) as u64,
    );

    let mut order = rows;
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<((f64, f64), ParamStore)> = None;
    let mut best_epoch = config.epochs;

    for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch as u64, config.epochs as u64, config.learning_rate);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = Batch::new(data.z, chunk);
            let xb = data.x.select(Axis(0), chunk);
            let grads = {
                let mut g = Graph::new(&model.store);
                let loss = match target {
                    Target::Annotations => model.loss(&mut g, &xb, data.annotators, &batch)?.loss,
                    Target::Labels(labels) => {
                        let lb: Vec<usize> = chunk.iter().map(|&i| labels[i].expect("filtered")).collect();
                        model.supervised_loss(&mut g, &xb, data.annotators, &batch, &lb)?
                    }
                };
                loss_sum += g.value(loss)[[0, 0]];
                g.backward(loss)?
            };
            model.store.zero_grad();
            grads.accumulate_into(&mut model.store);
            adamw_step(&mut model.store, &mut opt, lr)?;
            steps += 1;
        }

        let (val_gt_acc, val_gt_nll) = match data.validation {
            Some((xv, yv)) if !yv.is_empty() => {
                let probs = model.predict_proba(xv)?;
                let pred: Vec<usize> = probs.rows().into_iter().map(|r| gt_predict(r.as_slice().expect("row"))).collect();
                (Some(accuracy(&pred, yv)), Some(crate::eval::gt_nll(yv, &probs)?))
            }
            _ => (None, None),
        };
        let weights = model.annotator_weights(data.annotators)?.0;
        history.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / steps as f64,
            val_gt_acc,
            val_gt_nll,
            gamma: model.gamma(),
            weights,
        });
        if let Some(acc) = val_gt_acc {
            let nll = val_gt_nll.unwrap_or(f64::INFINITY);
            if best.as_ref().is_none_or(|(b, _)| at_least_as_good(acc, nll, *b)) {
                best = Some(((acc, nll), model.store.clone()));
                best_epoch = epoch + 1;
            }
        }
    }

    if let Some((_, store)) = best {
        model.store = store;
    }
    debug_assert_eq!(select_best(&history).map(|i| i + 1), Some(best_epoch));
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub config: TrainConfig,
    pub outcome: TrainOutcome,
    /// `(learning rate, weight decay, best validation GT-ACC)` per cell.
    pub scores: Vec<(f64, f64, Option<f64>)>,
}

/// Trains one model per `(learning rate, weight decay)` cell and keeps the one
/// with the highest validation GT-ACC, breaking ties by the lower validation
/// GT-NLL and then by the earlier cell.
pub fn grid_search(
    data: &TrainData<'_>,
    config: &TrainConfig,
    grid: &[(f64, f64)],
    target: Target<'_>,
) -> Result<GridOutcome> {
    if grid.is_empty() {
        return Err(MadlError::Config("grid search needs at least one cell".into()));
    }
    if grid.len() > 1 && data.validation.is_none() {
        return Err(MadlError::Config("grid search needs a validation split".into()));
    }
    let mut scores = Vec::with_capacity(grid.len());
    let mut best: Option<((f64, f64), TrainConfig, TrainOutcome)> = None;
    for &(lr, wd) in grid {
        let cell = TrainConfig {
            learning_rate: lr,
            weight_decay: wd,
            grid: Vec::new(),
            ..config.clone()
        };
        let outcome = train_with_target(data, &cell, target)?;
        let score = outcome.best_val_acc();
        scores.push((lr, wd, score));
        let record = &outcome.history[outcome.best_epoch - 1];
        let s = (
            score.unwrap_or(f64::NEG_INFINITY),
            record.val_gt_nll.unwrap_or(f64::INFINITY),
        );
        if best.as_ref().is_none_or(|(b, _, _)| !at_least_as_good(b.0, b.1, s)) {
            best = Some((s, cell, outcome));
        }
    }
    let (_, config, outcome) = best.expect("non-empty grid");
    Ok(GridOutcome {
        config,
        outcome,
        scores,
    })
}

/// Trains with the configured grid, or once when it is empty.
pub fn fit(data: &TrainData<'_>, config: &TrainConfig, target: Target<'_>) -> Result<GridOutcome> {
    if config.grid.is_empty() {
        let grid = [(config.learning_rate, config.weight_decay)];
        grid_search(data, config, &grid, target)
    } else {
        grid_search(data, config, &config.grid.clone(), target)
    }
}

#[cfg(test)]
mod tests;
