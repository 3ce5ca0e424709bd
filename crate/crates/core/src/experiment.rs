//! End-to-end experiment runs: data preparation, splitting, training,
//! baselines, scoring, repetitions and annotation-ratio sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Annotations, Dataset, Split, Standardizer};
use crate::diffnet::Tensor;
use crate::error::{MadlError, Result};
use crate::eval::{
    annotation_accuracy, evaluate, majority_vote, majority_vote_accuracy, train_baseline, BaselineKind,
    MetricsReport,
};
use crate::io;
use crate::models::{ClassDependency, InstanceSource};
use crate::simulate::{
    annotator_features, apply_ratio, gen_letter_like, gen_toy, kmeans, make_set, simulate_annotations,
    AnnotatorSetSpec, FeatureMode, SetName, LETTER_CLUSTERS, TOY_CLUSTERS,
};
use crate::training::{fit, EpochRecord, Madl, TrainConfig, TrainData, Target};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Toy,
    LetterLike,
    /// A directory in the CSV layout of [`crate::io`].
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    None,
    Lb,
    Ub,
}

impl Baseline {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "lb" => Ok(Self::Lb),
            "ub" => Ok(Self::Ub),
            _ => Err(MadlError::Config(format!("unknown baseline '{s}' (none, lb, ub)"))),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Lb => "lb",
            Self::Ub => "ub",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub data_dir: Option<PathBuf>,
    /// Instance count of generated datasets.
    pub instances: usize,
    pub annotator_set: SetName,
    /// Overrides the set's annotation ratio.
    pub ratio: Option<f64>,
    pub features: FeatureMode,
    /// k-means cluster count; defaults to 4 for toy data and 10 otherwise.
    pub clusters: Option<usize>,
    pub train: TrainConfig,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub repetitions: usize,
    pub seed: u64,
    pub baseline: Baseline,
    pub standardize: bool,
    pub sweep_ratios: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Toy,
            data_dir: None,
            instances: 500,
            annotator_set: SetName::Independent,
            ratio: None,
            features: FeatureMode::OneHot,
            clusters: None,
            train: TrainConfig::default(),
            split: Split::DEFAULT_FRACTIONS,
            repetitions: 1,
            seed: 0,
            baseline: Baseline::None,
            standardize: true,
            sweep_ratios: vec![0.2, 0.4, 0.6, 0.8],
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| MadlError::Config(format!("invalid value '{v}' for '{key}'")))
}

fn parse_switch(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(MadlError::Config(format!("invalid value '{v}' for '{key}' (on/off)"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|s| parse_value(key, s.trim())).collect()
}

/// `off`, `standard` or a list of `learning_rate:weight_decay` cells.
fn parse_grid(key: &str, v: &str) -> Result<Vec<(f64, f64)>> {
    match v {
        "off" => Ok(Vec::new()),
        "standard" | "on" => Ok(TrainConfig::standard_grid()),
        _ => v
            .split(',')
            .map(|cell| {
                let (lr, wd) = cell
                    .split_once(':')
                    .ok_or_else(|| MadlError::Config(format!("grid cell '{cell}' in '{key}' is not lr:wd")))?;
                Ok((parse_value(key, lr.trim())?, parse_value(key, wd.trim())?))
            })
            .collect(),
    }
}

/// Parses a `{i,p,f}x{inst,noinst}` variant such as `fxinst` or `i-noinst`.
pub fn parse_variant(s: &str) -> Result<(ClassDependency, bool)> {
    let bad = || MadlError::Config(format!("invalid variant '{s}' (e.g. fxinst, pxnoinst, i-inst)"));
    let mut chars = s.chars();
    let dep = chars.next().and_then(|c| ClassDependency::from_letter(c.to_ascii_uppercase())).ok_or_else(bad)?;
    let rest = chars.as_str().trim_start_matches(['x', '-', '_', ':', ',']);
    let inst = match rest {
        "inst" => true,
        "noinst" => false,
        _ => return Err(bad()),
    };
    Ok((dep, inst))
}

impl ExperimentConfig {
    /// Applies `key = value` pairs on top of `self`; unknown keys are errors.
    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            let k = k.as_str();
            let v = v.as_str();
            match k {
                "data.source" => {
                    self.source = match v {
                        "toy" => DataSource::Toy,
                        "letter-like" => DataSource::LetterLike,
                        "csv" => DataSource::Csv,
                        _ => return Err(MadlError::Config(format!("unknown data source '{v}'"))),
                    }
                }
                "data.dir" => self.data_dir = Some(PathBuf::from(v)),
                "data.instances" => self.instances = parse_value(k, v)?,
                "annotators.set" => self.annotator_set = SetName::parse(v)?,
                "annotators.ratio" => self.ratio = Some(parse_value(k, v)?),
                "annotators.features" => self.features = FeatureMode::parse(v)?,
                "annotators.clusters" => self.clusters = Some(parse_value(k, v)?),
                "model.variant" => {
                    let (dep, inst) = parse_variant(v)?;
                    self.train.ap.class_dependency = dep;
                    self.train.ap.instance_dependent = inst;
                }
                "model.class_dependency" => {
                    self.train.ap.class_dependency = v
                        .chars()
                        .next()
                        .filter(|_| v.len() == 1)
                        .and_then(|c| ClassDependency::from_letter(c.to_ascii_uppercase()))
                        .ok_or_else(|| MadlError::Config(format!("invalid value '{v}' for '{k}' (i, p, f)")))?
                }
                "model.instance_dependent" => self.train.ap.instance_dependent = parse_switch(k, v)?,
                "model.annotator_embedding" => self.train.ap.annotator_embedding = parse_value(k, v)?,
                "model.instance_embedding" => self.train.ap.instance_embedding = parse_value(k, v)?,
                "model.outer_dim" => self.train.ap.outer_dim = parse_value(k, v)?,
                "model.residual_hidden" => self.train.ap.residual_hidden = parse_value(k, v)?,
                "model.eta" => self.train.ap.eta = parse_value(k, v)?,
                "model.outer_product" => self.train.ap.outer_product = parse_switch(k, v)?,
                "model.residual" => self.train.ap.residual = parse_switch(k, v)?,
                "model.instance_source" => {
                    self.train.ap.instance_source = match v {
                        "hidden" => InstanceSource::GtHidden,
                        "raw" => InstanceSource::Raw,
                        _ => return Err(MadlError::Config(format!("invalid value '{v}' for '{k}' (hidden, raw)"))),
                    }
                }
                "train.epochs" => self.train.epochs = parse_value(k, v)?,
                "train.batch_size" => self.train.batch_size = parse_value(k, v)?,
                "train.learning_rate" => self.train.learning_rate = parse_value(k, v)?,
                "train.weight_decay" => self.train.weight_decay = parse_value(k, v)?,
                "train.alpha" => self.train.alpha = parse_value(k, v)?,
                "train.beta" => self.train.beta = parse_value(k, v)?,
                "train.weights" => self.train.weights = parse_switch(k, v)?,
                "train.grid" => self.train.grid = parse_grid(k, v)?,
                "split.train" => self.split[0] = parse_value(k, v)?,
                "split.val" => self.split[1] = parse_value(k, v)?,
                "split.test" => self.split[2] = parse_value(k, v)?,
                "run.repetitions" => self.repetitions = parse_value(k, v)?,
                "run.seed" => self.seed = parse_value(k, v)?,
                "run.baseline" => self.baseline = Baseline::parse(v)?,
                "run.standardize" => self.standardize = parse_switch(k, v)?,
                "sweep.ratios" => self.sweep_ratios = parse_list(k, v)?,
                _ => return Err(MadlError::Config(format!("unknown config key '{k}'"))),
            }
        }
        Ok(())
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(kv)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The configuration in the `key = value` file format.
    pub fn to_kv_string(&self) -> String {
        let on = |b: bool| if b { "on" } else { "off" };
        let ap = &self.train.ap;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put(
            "data.source",
            match self.source {
                DataSource::Toy => "toy",
                DataSource::LetterLike => "letter-like",
                DataSource::Csv => "csv",
            }
            .into(),
        );
        if let Some(d) = &self.data_dir {
            put("data.dir", d.display().to_string());
        }
        put("data.instances", self.instances.to_string());
        put("annotators.set", self.annotator_set.as_str().into());
        if let Some(r) = self.ratio {
            put("annotators.ratio", r.to_string());
        }
        put(
            "annotators.features",
            match self.features {
                FeatureMode::OneHot => "onehot",
                FeatureMode::PriorInfo => "prior",
            }
            .into(),
        );
        if let Some(k) = self.clusters {
            put("annotators.clusters", k.to_string());
        }
        put("model.class_dependency", ap.class_dependency.letter().to_ascii_lowercase().to_string());
        put("model.instance_dependent", on(ap.instance_dependent).into());
        put("model.annotator_embedding", ap.annotator_embedding.to_string());
        put("model.instance_embedding", ap.instance_embedding.to_string());
        put("model.outer_dim", ap.outer_dim.to_string());
        put("model.residual_hidden", ap.residual_hidden.to_string());
        put("model.eta", ap.eta.to_string());
        put("model.outer_product", on(ap.outer_product).into());
        put("model.residual", on(ap.residual).into());
        put(
            "model.instance_source",
            match ap.instance_source {
                InstanceSource::GtHidden => "hidden",
                InstanceSource::Raw => "raw",
            }
            .into(),
        );
        put("train.epochs", self.train.epochs.to_string());
        put("train.batch_size", self.train.batch_size.to_string());
        put("train.learning_rate", self.train.learning_rate.to_string());
        put("train.weight_decay", self.train.weight_decay.to_string());
        put("train.alpha", self.train.alpha.to_string());
        put("train.beta", self.train.beta.to_string());
        put("train.weights", on(self.train.weights).into());
        let grid: Vec<String> = self.train.grid.iter().map(|(lr, wd)| format!("{lr}:{wd}")).collect();
        put("train.grid", if grid.is_empty() { "off".into() } else { grid.join(",") });
        put("split.train", self.split[0].to_string());
        put("split.val", self.split[1].to_string());
        put("split.test", self.split[2].to_string());
        put("run.repetitions", self.repetitions.to_string());
        put("run.seed", self.seed.to_string());
        put("run.baseline", self.baseline.as_str().into());
        put("run.standardize", on(self.standardize).into());
        let ratios: Vec<String> = self.sweep_ratios.iter().map(f64::to_string).collect();
        put("sweep.ratios", ratios.join(","));
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(MadlError::Config("repetitions must be at least 1".into()));
        }
        if self.source == DataSource::Csv && self.data_dir.is_none() {
            return Err(MadlError::Config("data.source = csv needs data.dir".into()));
        }
        if let Some(r) = self.ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(MadlError::Config(format!("annotation ratio must lie in (0, 1], got {r}")));
            }
        }
        Split::random(0, self.split, 0)?;
        self.train.validate()
    }

    fn default_clusters(&self) -> usize {
        self.clusters.unwrap_or(match self.source {
            DataSource::Toy => TOY_CLUSTERS,
            _ => LETTER_CLUSTERS,
        })
    }
}

/// A dataset with its annotator side information.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    /// Raw features, true labels (when known) and ratio-masked annotations.
    pub dataset: Dataset,
    /// Annotations before masking, when simulated.
    pub full_z: Option<Annotations>,
    pub annotators: Tensor,
    pub set: Option<AnnotatorSetSpec>,
    pub clusters: Option<Vec<usize>>,
}

impl PreparedData {
    fn train_annotators(&self) -> Vec<usize> {
        self.set
            .as_ref()
            .and_then(|s| s.train_annotators.clone())
            .unwrap_or_else(|| (0..self.annotators.nrows()).collect())
    }

    /// Writes the CSV layout plus the annotator-set echo.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        io::write_instances(&dir.join(io::INSTANCES_FILE), &self.dataset.x)?;
        if let Some(y) = &self.dataset.y {
            io::write_labels(&dir.join(io::LABELS_FILE), y)?;
        }
        io::write_annotations(&dir.join(io::ANNOTATIONS_FILE), &self.dataset.z)?;
        if let Some(full) = &self.full_z {
            io::write_annotations(&dir.join(io::FULL_ANNOTATIONS_FILE), full)?;
        }
        io::write_annotators(&dir.join(io::ANNOTATORS_FILE), &self.annotators)?;
        if let Some(set) = &self.set {
            std::fs::write(dir.join(io::SPEC_FILE), serde_json::to_string_pretty(set)?)?;
        }
        Ok(())
    }
}

fn simulate_for(
    cfg: &ExperimentConfig,
    x: Tensor,
    y: Vec<usize>,
    classes: usize,
    seed: u64,
) -> Result<PreparedData> {
    let k = cfg.default_clusters();
    let clusters = kmeans(&x, k, seed)?.assign(&x);
    let mut set = make_set(cfg.annotator_set, classes, k, seed)?;
    if let Some(r) = cfg.ratio {
        set = set.with_ratio(r)?;
    }
    let full = simulate_annotations(&set.specs, &y, Some(&clusters), classes, seed)?;
    let z = apply_ratio(&full, set.ratio, seed)?;
    let annotators = annotator_features(&set.specs, cfg.features, &full, &y, &clusters, classes, k, seed)?;
    Ok(PreparedData {
        dataset: Dataset::new(x, Some(y), z, classes)?,
        full_z: Some(full),
        annotators,
        set: Some(set),
        clusters: Some(clusters),
    })
}

/// Loads a CSV directory. Annotations are simulated from the labels with the
/// configured annotator set when `annotations.csv` is absent.
pub fn load_dir(cfg: &ExperimentConfig, dir: &Path, seed: u64) -> Result<PreparedData> {
    let x = io::read_instances(&dir.join(io::INSTANCES_FILE))?;
    let labels_path = dir.join(io::LABELS_FILE);
    let y = if labels_path.exists() { Some(io::read_labels(&labels_path)?) } else { None };
    let ann_path = dir.join(io::ANNOTATIONS_FILE);
    if !ann_path.exists() {
        let y = y.ok_or_else(|| {
            MadlError::Config(format!("{} has neither annotations nor labels to simulate from", dir.display()))
        })?;
        let classes = y.iter().max().map_or(2, |&c| (c + 1).max(2));
        return simulate_for(cfg, x, y, classes, seed);
    }
    let z = io::read_annotations(&ann_path)?;
    let full_path = dir.join(io::FULL_ANNOTATIONS_FILE);
    let full_z = if full_path.exists() { Some(io::read_annotations(&full_path)?) } else { None };
    let label_bound = y.as_ref().and_then(|y| y.iter().max().map(|c| c + 1)).unwrap_or(0);
    let full_bound = full_z.as_ref().map_or(0, Annotations::label_bound);
    let classes = label_bound.max(z.label_bound()).max(full_bound).max(2);
    let ann_features = dir.join(io::ANNOTATORS_FILE);
    let annotators = if ann_features.exists() {
        io::read_annotators(&ann_features)?
    } else {
        Tensor::eye(z.annotators())
    };
    if annotators.nrows() != z.annotators() {
        return Err(MadlError::Contract(format!(
            "{} annotator feature rows for {} annotation columns",
            annotators.nrows(),
            z.annotators()
        )));
    }
    let spec_path = dir.join(io::SPEC_FILE);
    let set = if spec_path.exists() {
        Some(serde_json::from_str(&std::fs::read_to_string(spec_path)?)?)
    } else {
        None
    };
    Ok(PreparedData {
        dataset: Dataset::new(x, y, z, classes)?,
        full_z,
        annotators,
        set,
        clusters: None,
    })
}

/// Generates (or loads) the data of one repetition.
pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    match cfg.source {
        DataSource::Toy => {
            let (x, y) = gen_toy(cfg.instances, seed)?;
            simulate_for(cfg, x, y, 2, seed)
        }
        DataSource::LetterLike => {
            let (x, y) = gen_letter_like(cfg.instances, seed)?;
            simulate_for(cfg, x, y, 26, seed)
        }
        DataSource::Csv => {
            let dir = cfg.data_dir.as_ref().ok_or_else(|| MadlError::Config("missing data.dir".into()))?;
            load_dir(cfg, dir, seed)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionReport {
    pub repetition: usize,
    pub seed: u64,
    /// Test-split scores; AP scores use the training annotators.
    pub test: Option<MetricsReport>,
    /// AP scores of annotators held out from training (inductive sets).
    pub test_heldout: Option<MetricsReport>,
    pub notice: Option<String>,
    pub best_epoch: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grid_scores: Vec<(f64, f64, Option<f64>)>,
    pub gamma: f64,
    pub annotator_weights: Vec<f64>,
    /// Fraction of correct training annotations.
    pub annotation_accuracy: Option<f64>,
    /// Accuracy of majority-vote labels on the training split.
    pub majority_vote_accuracy: Option<f64>,
    pub history: Vec<EpochRecord>,
    pub seconds: f64,
}

/// One trained repetition with everything needed to save or re-evaluate it.
#[derive(Clone, Debug)]
pub struct RepetitionOutput {
    pub report: RepetitionReport,
    pub model: Madl,
    pub checkpoint: Checkpoint,
    pub data: PreparedData,
}

fn rows<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i].clone()).collect()
}

/// Scores `model` on the rows `split_rows`; AP scores on annotators
/// `train_ann` and, when non-empty, separately on `heldout_ann`.
pub fn score(
    model: &Madl,
    standardizer: &Standardizer,
    data: &PreparedData,
    split_rows: &[usize],
    train_ann: &[usize],
    heldout_ann: &[usize],
) -> Result<(Option<MetricsReport>, Option<MetricsReport>, Option<String>)> {
    let Some(y) = &data.dataset.y else {
        return Ok((None, None, Some("no ground-truth labels: GT and AP metrics omitted".into())));
    };
    if split_rows.is_empty() {
        return Ok((None, None, Some("empty evaluation split".into())));
    }
    let x = standardizer.transform(&data.dataset.x.select(Axis(0), split_rows))?;
    let y = rows(y, split_rows);
    let z_all = data.full_z.as_ref().unwrap_or(&data.dataset.z).select_rows(split_rows);
    let block = |ann: &[usize]| -> Result<MetricsReport> {
        let a = data.annotators.select(Axis(0), ann);
        evaluate(model, &x, &y, &z_all.select_annotators(ann), &a)
    };
    let main = block(train_ann)?;
    let heldout = if heldout_ann.is_empty() { None } else { Some(block(heldout_ann)?) };
    let notice = main.ap_acc.is_none().then(|| "no annotations on the evaluation split: AP metrics omitted".into());
    Ok((Some(main), heldout, notice))
}

pub fn run_repetition(cfg: &ExperimentConfig, repetition: usize) -> Result<RepetitionOutput> {
    let start = Instant::now();
    let seed = cfg.seed + repetition as u64;
    let data = prepare(cfg, seed)?;
    let ds = &data.dataset;
    let split = Split::random(ds.len(), cfg.split, seed)?;
    let standardizer = if cfg.standardize {
        Standardizer::fit(&ds.x.select(Axis(0), &split.train))
    } else {
        Standardizer::identity(ds.features())
    };
    let train_ann = data.train_annotators();
    let heldout_ann: Vec<usize> = (0..data.annotators.nrows()).filter(|m| !train_ann.contains(m)).collect();

    let x_train = standardizer.transform(&ds.x.select(Axis(0), &split.train))?;
    let z_train = ds.z.select_rows(&split.train).select_annotators(&train_ann);
    let a_train = data.annotators.select(Axis(0), &train_ann);
    let x_val = standardizer.transform(&ds.x.select(Axis(0), &split.val))?;
    let y_val: Option<Vec<usize>> = ds.y.as_ref().map(|y| rows(y, &split.val));
    let validation = match &y_val {
        Some(yv) if !yv.is_empty() => Some((&x_val, yv.as_slice())),
        _ => None,
    };
    let train_data = TrainData {
        x: &x_train,
        z: &z_train,
        annotators: &a_train,
        classes: ds.classes,
        validation,
    };
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let y_train: Option<Vec<usize>> = ds.y.as_ref().map(|y| rows(y, &split.train));
    let grid = match cfg.baseline {
        Baseline::None => fit(&train_data, &train_cfg, Target::Annotations)?,
        Baseline::Lb => train_baseline(BaselineKind::Lb, &train_data, None, &train_cfg, seed)?,
        Baseline::Ub => train_baseline(BaselineKind::Ub, &train_data, y_train.as_deref(), &train_cfg, seed)?,
    };
    let model = grid.outcome.model;
    let (test, test_heldout, notice) = score(&model, &standardizer, &data, &split.test, &train_ann, &heldout_ann)?;

    let (annot_acc, mr_acc) = match &y_train {
        Some(yt) if z_train.count() > 0 => {
            let votes = majority_vote(&z_train, ds.classes, seed);
            (Some(annotation_accuracy(yt, &z_train)?), Some(majority_vote_accuracy(yt, &votes)?))
        }
        _ => (None, None),
    };
    let mut checkpoint = Checkpoint::from_model(&model, &grid.config, standardizer);
    checkpoint.split = Some(split);
    checkpoint.train_annotators = data.set.as_ref().and_then(|s| s.train_annotators.clone());
    let report = RepetitionReport {
        repetition,
        seed,
        test,
        test_heldout,
        notice,
        best_epoch: grid.outcome.best_epoch,
        learning_rate: grid.config.learning_rate,
        weight_decay: grid.config.weight_decay,
        grid_scores: grid.scores,
        gamma: model.gamma(),
        annotator_weights: model.annotator_weights(&a_train)?.0,
        annotation_accuracy: annot_acc,
        majority_vote_accuracy: mr_acc,
        history: grid.outcome.history,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok(RepetitionOutput {
        report,
        model,
        checkpoint,
        data,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

const METRICS: [&str; 7] = ["gt_acc", "gt_nll", "gt_bs", "ap_acc", "ap_nll", "ap_bs", "ap_bal_acc"];

fn metric(r: &MetricsReport, name: &str) -> Option<f64> {
    match name {
        "gt_acc" => Some(r.gt_acc),
        "gt_nll" => Some(r.gt_nll),
        "gt_bs" => Some(r.gt_bs),
        "ap_acc" => r.ap_acc,
        "ap_nll" => r.ap_nll,
        "ap_bs" => r.ap_bs,
        "ap_bal_acc" => r.ap_bal_acc,
        _ => None,
    }
}

/// Mean and standard deviation of every metric present in all reports.
pub fn summarize(reports: &[&MetricsReport]) -> BTreeMap<String, MeanStd> {
    let mut out = BTreeMap::new();
    for name in METRICS {
        let vals: Option<Vec<f64>> = reports.iter().map(|r| metric(r, name)).collect();
        if let Some(ms) = vals.and_then(|v| MeanStd::of(&v)) {
            out.insert(name.to_owned(), ms);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    /// The configuration in the config-file format.
    pub config_text: String,
    pub repetitions: Vec<RepetitionReport>,
    pub summary: BTreeMap<String, MeanStd>,
    pub heldout_summary: BTreeMap<String, MeanStd>,
    pub annotation_accuracy: Option<MeanStd>,
    pub majority_vote_accuracy: Option<MeanStd>,
    pub seconds: f64,
}

/// Runs all repetitions, at most `threads` at a time, and returns them in
/// repetition order.
pub fn run_all(cfg: &ExperimentConfig, threads: usize) -> Result<Vec<RepetitionOutput>> {
    cfg.validate()?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RepetitionOutput>>>> =
        Mutex::new((0..cfg.repetitions).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, cfg.repetitions) {
            s.spawn(|| loop {
                let r = next.fetch_add(1, Ordering::SeqCst);
                if r >= cfg.repetitions {
                    break;
                }
                let out = run_repetition(cfg, r);
                results.lock().expect("no poisoned lock")[r] = Some(out);
            });
        }
    });
    results
        .into_inner()
        .expect("no poisoned lock")
        .into_iter()
        .map(|r| r.expect("every repetition ran"))
        .collect()
}

pub fn report(cfg: &ExperimentConfig, outputs: &[RepetitionOutput], seconds: f64) -> RunReport {
    let reps: Vec<RepetitionReport> = outputs.iter().map(|o| o.report.clone()).collect();
    let tests: Vec<&MetricsReport> = reps.iter().filter_map(|r| r.test.as_ref()).collect();
    let held: Vec<&MetricsReport> = reps.iter().filter_map(|r| r.test_heldout.as_ref()).collect();
    let annot: Vec<f64> = reps.iter().filter_map(|r| r.annotation_accuracy).collect();
    let mr: Vec<f64> = reps.iter().filter_map(|r| r.majority_vote_accuracy).collect();
    RunReport {
        config: cfg.clone(),
        config_text: cfg.to_kv_string(),
        summary: if tests.len() == reps.len() { summarize(&tests) } else { BTreeMap::new() },
        heldout_summary: if !held.is_empty() && held.len() == reps.len() { summarize(&held) } else { BTreeMap::new() },
        annotation_accuracy: MeanStd::of(&annot),
        majority_vote_accuracy: MeanStd::of(&mr),
        repetitions: reps,
        seconds,
    }
}

pub fn run(cfg: &ExperimentConfig, threads: usize) -> Result<RunReport> {
    let start = Instant::now();
    let outputs = run_all(cfg, threads)?;
    Ok(report(cfg, &outputs, start.elapsed().as_secs_f64()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub report: RunReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

/// One run per annotation ratio with the shared base seed.
pub fn sweep_ratio(cfg: &ExperimentConfig, ratios: &[f64], threads: usize) -> Result<SweepReport> {
    if ratios.is_empty() {
        return Err(MadlError::Config("ratio sweep needs at least one ratio".into()));
    }
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let c = ExperimentConfig {
            ratio: Some(ratio),
            ..cfg.clone()
        };
        rows.push(SweepRow {
            ratio,
            report: run(&c, threads)?,
        });
    }
    Ok(SweepReport { rows })
}

/// Scores of a checkpoint on one part of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub metrics: Option<MetricsReport>,
    /// AP scores of annotators that did not provide training annotations.
    pub heldout: Option<MetricsReport>,
    pub notice: Option<String>,
}

/// `split` is `train`, `val`, `test` (all need the checkpoint's split) or
/// `all`.
pub fn evaluate_checkpoint(ck: &Checkpoint, data: &PreparedData, split: &str) -> Result<EvalReport> {
    let ds = &data.dataset;
    if ds.features() != ck.input_dim || ds.classes > ck.classes {
        return Err(MadlError::Contract(format!(
            "checkpoint expects {} features and {} classes, data has {} and {}",
            ck.input_dim,
            ck.classes,
            ds.features(),
            ds.classes
        )));
    }
    if data.annotators.ncols() != ck.annotator_dim {
        return Err(MadlError::Contract(format!(
            "checkpoint expects {}-dimensional annotator features, data has {}",
            ck.annotator_dim,
            data.annotators.ncols()
        )));
    }
    let split_rows: Vec<usize> = match (split, &ck.split) {
        ("all", _) => (0..ds.len()).collect(),
        ("train", Some(s)) => s.train.clone(),
        ("val", Some(s)) => s.val.clone(),
        ("test", Some(s)) => s.test.clone(),
        (other, None) if ["train", "val", "test"].contains(&other) => {
            return Err(MadlError::Config(format!("checkpoint has no stored split; '{other}' is unavailable")))
        }
        (other, _) => return Err(MadlError::Config(format!("unknown split '{other}' (train, val, test, all)"))),
    };
    if let Some(&bad) = split_rows.iter().find(|&&r| r >= ds.len()) {
        return Err(MadlError::Contract(format!("split row {bad} outside the {} instances", ds.len())));
    }
    let m = data.annotators.nrows();
    let train_ann = ck.train_annotators.clone().unwrap_or_else(|| (0..m).collect());
    let heldout: Vec<usize> = (0..m).filter(|a| !train_ann.contains(a)).collect();
    let model = ck.to_model()?;
    let (metrics, heldout, notice) = score(&model, &ck.standardizer, data, &split_rows, &train_ann, &heldout)?;
    Ok(EvalReport {
        split: split.to_owned(),
        metrics,
        heldout,
        notice,
    })
}
