//! Synthetic datasets and simulated annotators.

use ndarray::Axis;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Annotations;
use crate::diffnet::Tensor;
use crate::error::{MadlError, Result};

/// Correctness probability of an expert class or cluster.
pub const EXPERT: f64 = 0.95;
/// Correctness probability of a weak class or cluster, and of adversarial
/// annotators everywhere.
pub const WEAK: f64 = 0.05;
/// Half-width of the uniform noise added to prior-information features.
pub const PRIOR_NOISE: f64 = 0.05;

/// Number of k-means clusters used for the toy data.
pub const TOY_CLUSTERS: usize = 4;
/// Number of k-means clusters used for letter-style data.
pub const LETTER_CLUSTERS: usize = 10;

/// Seed stream offsets so that different simulation stages never share a
/// random sequence.
mod stream {
    pub const SPECS: u64 = 1;
    pub const ANNOTATIONS: u64 = 2;
    pub const MASK: u64 = 3;
    pub const FEATURES: u64 = 4;
    pub const KMEANS: u64 = 5;
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const TOY_CENTERS: [([f64; 2], usize); 4] = [
    ([-2.5, 2.5], 0),
    ([-2.5, -2.5], 0),
    ([2.5, 2.5], 1),
    ([2.5, -2.5], 1),
];

/// Two-class, two-feature mixture with four unit-variance components: class 0
/// owns the two left quadrants, class 1 the two right ones.
pub fn gen_toy(n: usize, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    if n < 2 {
        return Err(MadlError::Config(format!("toy data needs at least 2 instances, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut comp: Vec<usize> = (0..n).map(|i| i % TOY_CENTERS.len()).collect();
    comp.shuffle(&mut rng);
    let mut x = Tensor::zeros((n, 2));
    let mut y = Vec::with_capacity(n);
    for (i, &c) in comp.iter().enumerate() {
        let (center, label) = TOY_CENTERS[c];
        for d in 0..2 {
            let e: f64 = StandardNormal.sample(&mut rng);
            x[[i, d]] = center[d] + e;
        }
        y.push(label);
    }
    Ok((x, y))
}

/// Exact class posterior of the toy mixture (equal component weights).
pub fn toy_posterior(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros((x.nrows(), 2));
    for (i, row) in x.rows().into_iter().enumerate() {
        for (center, label) in TOY_CENTERS {
            let d = (row[0] - center[0]).powi(2) + (row[1] - center[1]).powi(2);
            out[[i, label]] += (-0.5 * d).exp();
        }
        let s = out[[i, 0]] + out[[i, 1]];
        out.row_mut(i).mapv_inplace(|v| v / s);
    }
    out
}

/// Letter-style tabular data: 26 classes and 16 features drawn from a
/// Gaussian mixture with two components per class.
pub fn gen_letter_like(n: usize, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    const CLASSES: usize = 26;
    const FEATURES: usize = 16;
    const COMPONENTS: usize = 2;
    const SPREAD: f64 = 1.5;
    if n < CLASSES {
        return Err(MadlError::Config(format!("letter-style data needs at least {CLASSES} instances, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = Tensor::from_shape_simple_fn((CLASSES * COMPONENTS, FEATURES), || {
        let e: f64 = StandardNormal.sample(&mut rng);
        SPREAD * e
    });
    let mut comp: Vec<usize> = (0..n).map(|i| i % (CLASSES * COMPONENTS)).collect();
    comp.shuffle(&mut rng);
    let mut x = Tensor::zeros((n, FEATURES));
    let mut y = Vec::with_capacity(n);
    for (i, &c) in comp.iter().enumerate() {
        for d in 0..FEATURES {
            let e: f64 = StandardNormal.sample(&mut rng);
            x[[i, d]] = centers[[c, d]] + e;
        }
        y.push(c % CLASSES);
    }
    Ok((x, y))
}

/// k-means centroids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centroids: Tensor,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    /// Nearest centroid of every row; ties go to the lower index.
    pub fn assign(&self, x: &Tensor) -> Vec<usize> {
        x.rows()
            .into_iter()
            .map(|row| {
                let mut best = (0, f64::INFINITY);
                for (j, c) in self.centroids.rows().into_iter().enumerate() {
                    let d: f64 = row.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.1 {
                        best = (j, d);
                    }
                }
                best.0
            })
            .collect()
    }
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd iterations from k-means++ seeding, until the assignment stops
/// changing or 100 iterations have run.
pub fn kmeans(x: &Tensor, k: usize, seed: u64) -> Result<ClusterModel> {
    let n = x.nrows();
    let mut distinct: Vec<Vec<u64>> = x
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.to_bits()).collect())
        .collect();
    distinct.sort();
    distinct.dedup();
    if k == 0 || k > distinct.len() {
        return Err(MadlError::Config(format!(
            "k-means needs 1 <= k <= {} distinct rows, got k={k}",
            distinct.len()
        )));
    }
    let mut rng = rng_for(seed, stream::KMEANS);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    let mut model = ClusterModel {
        centroids: x.select(Axis(0), &chosen),
    };
    let mut assignment = model.assign(x);
    for _ in 0..100 {
        let mut sums = Tensor::zeros(model.centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            sums.row_mut(c).scaled_add(1.0, &x.row(i));
            counts[c] += 1;
        }
        for (j, &cnt) in counts.iter().enumerate() {
            // empty clusters keep their previous centroid
            if cnt > 0 {
                model.centroids.row_mut(j).assign(&(&sums.row(j) / cnt as f64));
            }
        }
        let next = model.assign(x);
        if next == assignment {
            break;
        }
        assignment = next;
    }
    Ok(model)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnnotatorType {
    Adversarial,
    Random,
    ClusterSpecialized,
    Common,
    ClassSpecialized,
}

impl AnnotatorType {
    pub const ALL: [AnnotatorType; 5] = [
        AnnotatorType::Adversarial,
        AnnotatorType::Random,
        AnnotatorType::ClusterSpecialized,
        AnnotatorType::Common,
        AnnotatorType::ClassSpecialized,
    ];

    fn index(self) -> usize {
        Self::ALL.iter().position(|&t| t == self).expect("listed")
    }
}

/// One simulated annotator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorSpec {
    pub kind: AnnotatorType,
    /// Members of one group receive identical annotation draws.
    pub copy_group: Option<usize>,
    /// Correctness per cluster (cluster-specialized and common annotators).
    pub cluster_correctness: Option<Vec<f64>>,
    /// Correctness per class (class-specialized annotators).
    pub class_correctness: Option<Vec<f64>>,
}

impl AnnotatorSpec {
    /// Probability of a correct label for an instance of class `y` in
    /// cluster `cluster`.
    /// True confusion matrix for instances in `cluster`: the diagonal holds
    /// the class-wise correctness, errors spread uniformly.
    pub fn confusion(&self, cluster: Option<usize>, classes: usize) -> Result<Tensor> {
        let mut m = Tensor::zeros((classes, classes));
        for y in 0..classes {
            let q = self.correctness(y, cluster, classes)?;
            for k in 0..classes {
                m[[y, k]] = if k == y { q } else { (1.0 - q) / (classes - 1) as f64 };
            }
        }
        Ok(m)
    }

    pub fn correctness(&self, y: usize, cluster: Option<usize>, classes: usize) -> Result<f64> {
        Ok(match self.kind {
            AnnotatorType::Adversarial => WEAK,
            AnnotatorType::Random => 1.0 / classes as f64,
            AnnotatorType::ClassSpecialized => {
                self.class_correctness.as_ref().ok_or_else(|| missing("class", self.kind))?[y]
            }
            AnnotatorType::ClusterSpecialized | AnnotatorType::Common => {
                let table = self
                    .cluster_correctness
                    .as_ref()
                    .ok_or_else(|| missing("cluster", self.kind))?;
                let c = cluster.ok_or_else(|| {
                    MadlError::Contract(format!("{:?} annotators need cluster assignments", self.kind))
                })?;
                table[c]
            }
        })
    }
}

fn missing(what: &str, kind: AnnotatorType) -> MadlError {
    MadlError::Contract(format!("{kind:?} annotator has no {what} correctness table"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SetName {
    Independent,
    Correlated,
    RandomCorrelated,
    Inductive,
}

impl SetName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(Self::Independent),
            "correlated" => Ok(Self::Correlated),
            "random-correlated" => Ok(Self::RandomCorrelated),
            "inductive" => Ok(Self::Inductive),
            _ => Err(MadlError::Config(format!("unknown annotator set '{s}'"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Independent => "independent",
            Self::Correlated => "correlated",
            Self::RandomCorrelated => "random-correlated",
            Self::Inductive => "inductive",
        }
    }
}

/// A full annotator population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorSetSpec {
    pub name: SetName,
    pub ratio: f64,
    pub specs: Vec<AnnotatorSpec>,
    /// Annotators that provide training annotations; the rest are held out
    /// (inductive set only).
    pub train_annotators: Option<Vec<usize>>,
}

impl AnnotatorSetSpec {
    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn with_ratio(mut self, ratio: f64) -> Result<Self> {
        check_ratio(ratio)?;
        self.ratio = ratio;
        Ok(self)
    }

    pub fn count(&self, kind: AnnotatorType) -> usize {
        self.specs.iter().filter(|s| s.kind == kind).count()
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(MadlError::Config(format!("annotation ratio must lie in (0, 1], got {ratio}")))
    }
}

/// `(type, independent count, copy-group size)`; a group of size `s` adds
/// `s` identical annotators.
type Composition = [(AnnotatorType, usize, usize); 5];

fn composition(name: SetName) -> (Composition, f64) {
    use AnnotatorType::*;
    match name {
        SetName::Independent => (
            [(Adversarial, 1, 0), (Common, 6, 0), (ClusterSpecialized, 2, 0), (ClassSpecialized, 1, 0), (Random, 0, 0)],
            0.2,
        ),
        SetName::Correlated => (
            [(Adversarial, 0, 11), (Common, 6, 0), (ClusterSpecialized, 1, 11), (ClassSpecialized, 0, 11), (Random, 0, 0)],
            0.2,
        ),
        SetName::RandomCorrelated => (
            [(Adversarial, 1, 0), (Common, 6, 0), (ClusterSpecialized, 2, 0), (ClassSpecialized, 1, 0), (Random, 0, 90)],
            0.2,
        ),
        SetName::Inductive => (
            [(Adversarial, 10, 0), (Common, 60, 0), (ClusterSpecialized, 20, 0), (ClassSpecialized, 10, 0), (Random, 0, 0)],
            0.02,
        ),
    }
}

fn draw_spec<R: Rng + ?Sized>(
    kind: AnnotatorType,
    copy_group: Option<usize>,
    classes: usize,
    clusters: usize,
    rng: &mut R,
) -> AnnotatorSpec {
    let split = |n: usize, weak: usize, rng: &mut R| {
        let weak_idx = sample(rng, n, weak).into_vec();
        (0..n)
            .map(|i| if weak_idx.contains(&i) { WEAK } else { EXPERT })
            .collect::<Vec<f64>>()
    };
    let (cluster_correctness, class_correctness) = match kind {
        AnnotatorType::Adversarial | AnnotatorType::Random => (None, None),
        AnnotatorType::ClusterSpecialized => (Some(split(clusters, clusters / 2, rng)), None),
        AnnotatorType::Common => {
            let lo = 1.0 / classes as f64;
            (Some((0..clusters).map(|_| rng.random_range(lo..=1.0)).collect()), None)
        }
        AnnotatorType::ClassSpecialized => (None, Some(split(classes, classes / 2, rng))),
    };
    AnnotatorSpec {
        kind,
        copy_group,
        cluster_correctness,
        class_correctness,
    }
}

/// The named annotator populations, in type order adversarial, common,
/// cluster-specialized, class-specialized, random. Within a type the
/// independent annotators come before the copies.
pub fn make_set(name: SetName, classes: usize, clusters: usize, seed: u64) -> Result<AnnotatorSetSpec> {
    if classes < 2 || clusters == 0 {
        return Err(MadlError::Config(format!(
            "annotator sets need at least 2 classes and 1 cluster, got {classes} and {clusters}"
        )));
    }
    let (comp, ratio) = composition(name);
    let mut rng = rng_for(seed, stream::SPECS);
    let mut specs = Vec::new();
    let mut groups = 0;
    for (kind, independent, copies) in comp {
        for _ in 0..independent {
            specs.push(draw_spec(kind, None, classes, clusters, &mut rng));
        }
        if copies > 0 {
            let spec = draw_spec(kind, Some(groups), classes, clusters, &mut rng);
            groups += 1;
            specs.extend(std::iter::repeat_n(spec, copies));
        }
    }
    let train_annotators = (name == SetName::Inductive).then(|| {
        let m = specs.len();
        let mut idx = sample(&mut rng, m, m * 3 / 4).into_vec();
        idx.sort_unstable();
        idx
    });
    Ok(AnnotatorSetSpec {
        name,
        ratio,
        specs,
        train_annotators,
    })
}

fn wrong_label<R: Rng + ?Sized>(truth: usize, classes: usize, rng: &mut R) -> usize {
    let k = rng.random_range(0..classes - 1);
    if k >= truth {
        k + 1
    } else {
        k
    }
}

/// Full annotation matrix before masking: annotator `m` labels instance `n`
/// correctly with its specified probability, else picks a uniformly random
/// wrong class. Copy-group members share one column of draws.
pub fn simulate_annotations(
    specs: &[AnnotatorSpec],
    y: &[usize],
    clusters: Option<&[usize]>,
    classes: usize,
    seed: u64,
) -> Result<Annotations> {
    if let Some(c) = clusters {
        if c.len() != y.len() {
            return Err(MadlError::Contract(format!("{} cluster ids for {} instances", c.len(), y.len())));
        }
    }
    let n = y.len();
    let mut z = Annotations::missing(n, specs.len());
    let mut group_source: Vec<(usize, usize)> = Vec::new();
    for (m, spec) in specs.iter().enumerate() {
        if let Some(g) = spec.copy_group {
            if let Some(&(_, src)) = group_source.iter().find(|(grp, _)| *grp == g) {
                for i in 0..n {
                    z.set(i, m, z.get(i, src));
                }
                continue;
            }
            group_source.push((g, m));
        }
        let mut rng = rng_for(seed, (stream::ANNOTATIONS << 32) | m as u64);
        for i in 0..n {
            let q = spec.correctness(y[i], clusters.map(|c| c[i]), classes)?;
            let label = if rng.random_bool(q) { y[i] } else { wrong_label(y[i], classes, &mut rng) };
            z.set(i, m, Some(label));
        }
    }
    Ok(z)
}

/// Keeps `round(ratio · N)` uniformly chosen annotations per annotator,
/// independently across annotators.
pub fn apply_ratio(z: &Annotations, ratio: f64, seed: u64) -> Result<Annotations> {
    check_ratio(ratio)?;
    let n = z.instances();
    let keep = ((ratio * n as f64).round() as usize).min(n);
    let mut out = Annotations::missing(n, z.annotators());
    for m in 0..z.annotators() {
        let mut rng = rng_for(seed, (stream::MASK << 32) | m as u64);
        for i in sample(&mut rng, n, keep) {
            out.set(i, m, z.get(i, m));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    OneHot,
    PriorInfo,
}

impl FeatureMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "onehot" | "one-hot" => Ok(Self::OneHot),
            "prior" | "prior-info" => Ok(Self::PriorInfo),
            _ => Err(MadlError::Config(format!("unknown feature mode '{s}'"))),
        }
    }
}

/// Annotator feature matrix.
///
/// Prior-information rows are the one-hot annotator type followed by the
/// per-class and per-cluster empirical correctness of the annotator on the
/// unmasked annotations `z_full`, each perturbed by uniform noise of
/// half-width [`PRIOR_NOISE`] and clamped to `[0, 1]`.
pub fn annotator_features(
    specs: &[AnnotatorSpec],
    mode: FeatureMode,
    z_full: &Annotations,
    y: &[usize],
    clusters: &[usize],
    classes: usize,
    k: usize,
    seed: u64,
) -> Result<Tensor> {
    let m = specs.len();
    if mode == FeatureMode::OneHot {
        return Ok(Tensor::from_shape_fn((m, m), |(i, j)| if i == j { 1.0 } else { 0.0 }));
    }
    if z_full.annotators() != m || z_full.instances() != y.len() || clusters.len() != y.len() {
        return Err(MadlError::Contract("prior-info features need aligned annotations, labels and clusters".into()));
    }
    let types = AnnotatorType::ALL.len();
    let mut rng = rng_for(seed, stream::FEATURES);
    let mut a = Tensor::zeros((m, types + classes + k));
    for (j, spec) in specs.iter().enumerate() {
        a[[j, spec.kind.index()]] = 1.0;
        let mut hits = vec![(0usize, 0usize); classes + k];
        for (i, &truth) in y.iter().enumerate() {
            if let Some(label) = z_full.get(i, j) {
                let ok = usize::from(label == truth);
                for slot in [truth, classes + clusters[i]] {
                    hits[slot].0 += ok;
                    hits[slot].1 += 1;
                }
            }
        }
        for (s, &(ok, total)) in hits.iter().enumerate() {
            let acc = if total > 0 { ok as f64 / total as f64 } else { 0.5 };
            let noise = rng.random_range(-PRIOR_NOISE..=PRIOR_NOISE);
            a[[j, types + s]] = (acc + noise).clamp(0.0, 1.0);
        }
    }
    Ok(a)
}
