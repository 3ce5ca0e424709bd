//! Evaluation scores, majority-vote aggregation, Bayes-optimal oracles and
//! the lower/upper baselines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Annotations;
use crate::diffnet::Tensor;
use crate::error::{MadlError, Result};
use crate::models::{ap_predict, argmax};
use crate::training::{fit, GridOutcome, Madl, TrainConfig, TrainData, Target, PROB_FLOOR};

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(MadlError::Contract(format!("{what}: {a} vs {b} rows")));
    }
    if a == 0 {
        return Err(MadlError::Contract(format!("{what}: nothing to score")));
    }
    Ok(())
}

/// Fraction of correctly classified instances.
pub fn gt_acc(y: &[usize], predictions: &[usize]) -> Result<f64> {
    check_len("gt_acc", y.len(), predictions.len())?;
    let hits = y.iter().zip(predictions).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / y.len() as f64)
}

/// `−(1/N) Σ_n ln p̂(y_n | x_n)`.
pub fn gt_nll(y: &[usize], probs: &Tensor) -> Result<f64> {
    check_len("gt_nll", y.len(), probs.nrows())?;
    let s: f64 = y
        .iter()
        .enumerate()
        .map(|(n, &c)| probs[[n, c]].max(PROB_FLOOR).ln())
        .sum();
    Ok(-s / y.len() as f64)
}

/// `(1/N) Σ_n ‖e_{y_n} − p̂(x_n)‖²`.
pub fn gt_bs(y: &[usize], probs: &Tensor) -> Result<f64> {
    check_len("gt_bs", y.len(), probs.nrows())?;
    let s: f64 = y
        .iter()
        .enumerate()
        .map(|(n, &c)| {
            probs
                .row(n)
                .iter()
                .enumerate()
                .map(|(k, &p)| {
                    let t = if k == c { 1.0 } else { 0.0 };
                    (t - p) * (t - p)
                })
                .sum::<f64>()
        })
        .sum();
    Ok(s / y.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApScores {
    pub acc: f64,
    pub nll: f64,
    pub bs: f64,
    pub bal_acc: f64,
    /// Number of annotations scored.
    pub count: usize,
}

/// `(annotator, annotation is correct, predicted correctness)` over the
/// observed annotations, in row-major order.
fn outcomes(y: &[usize], z: &Annotations, correctness: &Tensor) -> Result<Vec<(usize, bool, f64)>> {
    if z.instances() != y.len() || correctness.dim() != (z.instances(), z.annotators()) {
        return Err(MadlError::Contract(format!(
            "AP scoring needs aligned shapes: {} labels, annotations {}x{}, correctness {:?}",
            y.len(),
            z.instances(),
            z.annotators(),
            correctness.dim()
        )));
    }
    let mut out = Vec::with_capacity(z.count());
    for (n, &truth) in y.iter().enumerate() {
        for (m, label) in z.observed(n) {
            out.push((m, label == truth, correctness[[n, m]]));
        }
    }
    if out.is_empty() {
        return Err(MadlError::Contract("no observed annotations to score".into()));
    }
    Ok(out)
}

/// AP-ACC, AP-NLL, AP-BS and AP-BAL-ACC of predicted correctness
/// probabilities (`N × M`) over the observed annotations.
pub fn ap_metrics(y: &[usize], z: &Annotations, correctness: &Tensor) -> Result<ApScores> {
    let obs = outcomes(y, z, correctness)?;
    let count = obs.len() as f64;
    let mut acc = 0.0;
    let mut nll = 0.0;
    let mut bs = 0.0;
    for &(_, correct, c) in &obs {
        let t = if correct { 1.0 } else { 0.0 };
        acc += f64::from(u8::from(ap_predict(c) != correct));
        let p = if correct { c } else { 1.0 - c };
        nll -= p.max(PROB_FLOOR).ln();
        bs += (t - c) * (t - c);
    }
    Ok(ApScores {
        acc: acc / count,
        nll: nll / count,
        bs: bs / count,
        bal_acc: bal_acc(y, z, correctness)?,
        count: obs.len(),
    })
}

/// Accuracy of the false/correct prediction per annotator and per actual
/// outcome (correct or false annotation), averaged over the non-empty pairs.
pub fn bal_acc(y: &[usize], z: &Annotations, correctness: &Tensor) -> Result<f64> {
    let obs = outcomes(y, z, correctness)?;
    // [annotator][outcome] -> (hits, total)
    let mut cells = vec![[(0usize, 0usize); 2]; z.annotators()];
    for &(m, correct, c) in &obs {
        let cell = &mut cells[m][usize::from(correct)];
        cell.0 += usize::from(ap_predict(c) != correct);
        cell.1 += 1;
    }
    let scores: Vec<f64> = cells
        .iter()
        .flatten()
        .filter(|c| c.1 > 0)
        .map(|&(h, t)| h as f64 / t as f64)
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Majority-vote labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineLabels {
    /// `None` for instances without annotations.
    pub labels: Vec<Option<usize>>,
    pub ties: Vec<bool>,
    /// Instances without any annotation.
    pub excluded: Vec<usize>,
}

/// Most frequent annotation per instance; ties are broken uniformly at random
/// under `seed`.
pub fn majority_vote(z: &Annotations, classes: usize, seed: u64) -> BaselineLabels {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = z.instances();
    let mut labels = Vec::with_capacity(n);
    let mut ties = Vec::with_capacity(n);
    let mut excluded = Vec::new();
    let mut counts = vec![0usize; classes.max(z.label_bound())];
    for i in 0..n {
        counts.iter_mut().for_each(|c| *c = 0);
        for (_, label) in z.observed(i) {
            counts[label] += 1;
        }
        let top = counts.iter().copied().max().unwrap_or(0);
        if top == 0 {
            labels.push(None);
            ties.push(false);
            excluded.push(i);
            continue;
        }
        let best: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] == top).collect();
        let pick = if best.len() == 1 { best[0] } else { best[rng.random_range(0..best.len())] };
        labels.push(Some(pick));
        ties.push(best.len() > 1);
    }
    BaselineLabels { labels, ties, excluded }
}

/// Bayes-optimal class under zero-one loss: argmax of the true posterior,
/// ties to the lowest index.
pub fn bayes_gt(posterior: &[f64]) -> usize {
    argmax(posterior)
}

/// Bayes-optimal false/correct decision: `true` (false annotation expected)
/// iff `Σ_y Pr(y | x) P(y, y) < 0.5`.
pub fn bayes_ap(posterior: &[f64], confusion: &Tensor) -> bool {
    let correct: f64 = posterior.iter().enumerate().map(|(c, p)| p * confusion[[c, c]]).sum();
    correct < 0.5
}

/// Fraction of observed annotations that equal the true class.
pub fn annotation_accuracy(y: &[usize], z: &Annotations) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (n, &truth) in y.iter().enumerate() {
        for (_, label) in z.observed(n) {
            hits += usize::from(label == truth);
            total += 1;
        }
    }
    if total == 0 {
        return Err(MadlError::Contract("no observed annotations".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Accuracy of majority-vote labels over the instances with annotations.
pub fn majority_vote_accuracy(y: &[usize], votes: &BaselineLabels) -> Result<f64> {
    let scored: Vec<(usize, usize)> = votes
        .labels
        .iter()
        .zip(y)
        .filter_map(|(l, &t)| l.map(|l| (l, t)))
        .collect();
    if scored.is_empty() {
        return Err(MadlError::Contract("no instance has annotations".into()));
    }
    Ok(scored.iter().filter(|(l, t)| l == t).count() as f64 / scored.len() as f64)
}

/// Scores of one model on one split. AP fields are `None` when no
/// annotations (or no ground truth) are available for scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub gt_acc: f64,
    pub gt_nll: f64,
    pub gt_bs: f64,
    pub ap_acc: Option<f64>,
    pub ap_nll: Option<f64>,
    pub ap_bs: Option<f64>,
    pub ap_bal_acc: Option<f64>,
    pub instances: usize,
    pub annotations: usize,
}

pub fn gt_report(model: &Madl, x: &Tensor, y: &[usize]) -> Result<MetricsReport> {
    let probs = model.predict_proba(x)?;
    let pred: Vec<usize> = probs.rows().into_iter().map(|r| argmax(r.as_slice().unwrap())).collect();
    Ok(MetricsReport {
        gt_acc: gt_acc(y, &pred)?,
        gt_nll: gt_nll(y, &probs)?,
        gt_bs: gt_bs(y, &probs)?,
        ap_acc: None,
        ap_nll: None,
        ap_bs: None,
        ap_bal_acc: None,
        instances: y.len(),
        annotations: 0,
    })
}

/// GT scores on `(x, y)` and AP scores on the annotations `z` of the given
/// annotators.
pub fn evaluate(model: &Madl, x: &Tensor, y: &[usize], z: &Annotations, annotators: &Tensor) -> Result<MetricsReport> {
    let mut report = gt_report(model, x, y)?;
    if z.count() > 0 {
        let corr = model.correctness(x, annotators)?;
        let ap = ap_metrics(y, z, &corr)?;
        report.ap_acc = Some(ap.acc);
        report.ap_nll = Some(ap.nll);
        report.ap_bs = Some(ap.bs);
        report.ap_bal_acc = Some(ap.bal_acc);
        report.annotations = ap.count;
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    /// Trained on majority-vote labels.
    Lb,
    /// Trained on the true labels.
    Ub,
}

/// Lower or upper baseline with the same architectures as MaDL.
///
/// `y` is required for the upper baseline; `vote_seed` fixes majority-vote
/// tie breaking for the lower one.
pub fn train_baseline(
    kind: BaselineKind,
    data: &TrainData<'_>,
    y: Option<&[usize]>,
    config: &TrainConfig,
    vote_seed: u64,
) -> Result<GridOutcome> {
    let labels: Vec<Option<usize>> = match kind {
        BaselineKind::Lb => majority_vote(data.z, data.classes, vote_seed).labels,
        BaselineKind::Ub => y
            .ok_or_else(|| MadlError::Config("the upper baseline needs ground-truth labels".into()))?
            .iter()
            .map(|&c| Some(c))
            .collect(),
    };
    let config = TrainConfig {
        weights: false,
        ..config.clone()
    };
    fit(data, &config, Target::Labels(&labels))
}
