use super::*;
use crate::models::ClassDependency;
use ndarray::array;

fn worked_example_matrices() -> (ConfusionMatrix, ConfusionMatrix) {
    (
        ConfusionMatrix::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap(),
        ConfusionMatrix::new(array![[0.5, 0.5], [0.5, 0.5]]).unwrap(),
    )
}

const WORKED_EXAMPLE: f64 = 2.151_292_546_497_023;

#[test]
fn worked_example_constant_matches_closed_form() {
    let v = -0.5 * 0.2f64.ln() - 0.5 * 0.5f64.ln() + 1.0;
    assert!((v - WORKED_EXAMPLE).abs() < 1e-15);
}

#[test]
fn annotation_probability_examples() {
    let (eye, half) = worked_example_matrices();
    let p = [0.8, 0.2];
    assert!((annotation_probability(&p, &eye, 1) - 0.2).abs() < 1e-15);
    assert!((annotation_probability(&p, &half, 1) - 0.5).abs() < 1e-15);
    let one_hot = ConfusionMatrix::new(array![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
    assert_eq!(annotation_probability(&[0.0, 1.0, 0.0], &one_hot, 0), 1.0);
}

#[test]
fn worked_example_scalar_loss() {
    let (eye, half) = worked_example_matrices();
    let p = [0.8, 0.2];
    let obs = [
        Observation { class_probs: &p, confusion: &eye, label: 1, weight: 1.0 },
        Observation { class_probs: &p, confusion: &half, label: 1, weight: 1.0 },
    ];
    let v = weighted_loss(&obs, Some((1.0, 2.0, 1.0))).unwrap();
    assert!((v - WORKED_EXAMPLE).abs() < 1e-12);
    assert!(weighted_loss(&[], None).is_err());
}

#[test]
fn worked_example_graph_loss() {
    let mut store = ParamStore::new();
    let lg = store.add("log_gamma", Tensor::zeros((1, 1))).unwrap();
    let mut g = Graph::new(&store);
    let probs = g.constant(array![[0.8, 0.2], [0.8, 0.2]]);
    let conf = g.constant(array![[1.0, 0.0, 0.0, 1.0], [0.5, 0.5, 0.5, 0.5]]);
    let emb = g.constant(array![[0.3, 0.1], [0.3, 0.1]]);
    let l = g.param(lg);
    let w = weights_node(&mut g, emb, l).unwrap();
    let data = data_term_node(&mut g, probs, conf, &[1, 1], Some(w)).unwrap();
    let prior = gamma_log_prior_node(&mut g, l, 2.0, 1.0);
    let loss = g.sub(data, prior).unwrap();
    assert_eq!(g.value(w).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0]);
    assert!((g.value(loss)[[0, 0]] - WORKED_EXAMPLE).abs() < 1e-12);
}

#[test]
fn perfect_fit_has_zero_data_term() {
    let eye = ConfusionMatrix::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
    let p0 = [1.0, 0.0];
    let p1 = [0.0, 1.0];
    let obs = [
        Observation { class_probs: &p0, confusion: &eye, label: 0, weight: 1.0 },
        Observation { class_probs: &p1, confusion: &eye, label: 1, weight: 1.0 },
    ];
    assert_eq!(weighted_loss(&obs, None).unwrap(), 0.0);
}

struct Tiny {
    x: Tensor,
    z: Annotations,
    a: Tensor,
    y: Vec<usize>,
}

fn tiny(seed: u64, n: usize, m: usize, c: usize) -> Tiny {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let x = Tensor::from_shape_fn((n, 3), |(r, k)| y[r] as f64 * (k as f64 - 1.0) + rng.random_range(-0.5..0.5));
    let mut z = Annotations::missing(n, m);
    for r in 0..n {
        for a in 0..m {
            if rng.random_bool(0.6) {
                let label = if rng.random_bool(0.75) { y[r] } else { rng.random_range(0..c) };
                z.set(r, a, Some(label));
            }
        }
    }
    let a = Tensor::from_shape_fn((m, m), |(i, j)| if i == j { 1.0 } else { 0.0 });
    Tiny { x, z, a, y }
}

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 8,
        ap: ApConfig {
            annotator_embedding: 4,
            instance_embedding: 4,
            outer_dim: 4,
            residual_hidden: 8,
            ..ApConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn model_loss(model: &Madl, t: &Tiny, rows: &[usize]) -> f64 {
    let batch = Batch::new(&t.z, rows);
    let mut g = Graph::new(&model.store);
    let terms = model.loss(&mut g, &t.x.select(Axis(0), rows), &t.a, &batch).unwrap();
    g.value(terms.loss)[[0, 0]]
}

/// Confusion matrices and class probabilities as plain values, for oracles.
fn pair_values(model: &Madl, t: &Tiny, batch: &Batch) -> (Tensor, Tensor) {
    let mut g = Graph::new(&model.store);
    let xn = g.constant(t.x.select(Axis(0), &batch.rows));
    let an = g.constant(t.a.clone());
    let fwd = model.forward(&mut g, xn, an, &batch.pair_indices()).unwrap();
    (g.value(fwd.gt.probs).clone(), g.value(fwd.confusion).clone())
}

#[test]
fn model_loss_matches_scalar_oracle() {
    let t = tiny(1, 12, 4, 3);
    let cfg = small_config();
    let model = Madl::new(3, 3, 4, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let rows: Vec<usize> = (0..12).collect();
    let batch = Batch::new(&t.z, &rows);
    let (probs, conf) = pair_values(&model, &t, &batch);
    let w = model.annotator_weights(&t.a).unwrap();
    let mats: Vec<ConfusionMatrix> = conf
        .rows()
        .into_iter()
        .map(|r| ConfusionMatrix::from_flat(r.as_slice().unwrap(), 3).unwrap())
        .collect();
    let prob_rows: Vec<Vec<f64>> = probs.rows().into_iter().map(|r| r.to_vec()).collect();
    let obs: Vec<Observation<'_>> = batch
        .pairs
        .iter()
        .zip(&mats)
        .map(|(p, cm)| Observation {
            class_probs: &prob_rows[p.row],
            confusion: cm,
            label: p.label,
            weight: w.0[p.annotator],
        })
        .collect();
    let want = weighted_loss(&obs, Some((model.gamma(), cfg.alpha, cfg.beta))).unwrap();
    assert!((model_loss(&model, &t, &rows) - want).abs() < 1e-12);
}

#[test]
fn uniform_weights_give_unweighted_likelihood_over_z() {
    let t = tiny(2, 10, 3, 2);
    let cfg = TrainConfig { weights: false, ..small_config() };
    let model = Madl::new(3, 2, 3, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let rows: Vec<usize> = (0..10).collect();
    let batch = Batch::new(&t.z, &rows);
    let (probs, conf) = pair_values(&model, &t, &batch);
    let mut ll = 0.0;
    for (k, p) in batch.pairs.iter().enumerate() {
        let q: f64 = (0..2).map(|c| probs[[p.row, c]] * conf[[k, c * 2 + p.label]]).sum();
        ll += q.ln();
    }
    let want = -ll / batch.annotation_count() as f64;
    assert!((model_loss(&model, &t, &rows) - want).abs() < 1e-12);
}

#[test]
fn duplicating_annotations_keeps_data_term() {
    let (eye, half) = worked_example_matrices();
    let p = [0.7, 0.3];
    let q = [0.1, 0.9];
    let base = [
        Observation { class_probs: &p, confusion: &eye, label: 0, weight: 0.6 },
        Observation { class_probs: &q, confusion: &half, label: 1, weight: 1.4 },
        Observation { class_probs: &q, confusion: &eye, label: 1, weight: 1.0 },
    ];
    let doubled: Vec<_> = base.iter().chain(base.iter()).copied().collect();
    let a = weighted_loss(&base, None).unwrap();
    let b = weighted_loss(&doubled, None).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn split_batches_reproduce_full_batch_data_term() {
    let t = tiny(3, 16, 4, 3);
    let cfg = TrainConfig { weights: false, ..small_config() };
    let model = Madl::new(3, 3, 4, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let all: Vec<usize> = (0..16).collect();
    let (a, b) = all.split_at(7);
    let za = Batch::new(&t.z, a).annotation_count() as f64;
    let zb = Batch::new(&t.z, b).annotation_count() as f64;
    let mixed = (model_loss(&model, &t, a) * za + model_loss(&model, &t, b) * zb) / (za + zb);
    assert!((mixed - model_loss(&model, &t, &all)).abs() < 1e-12);
}

#[test]
fn one_small_step_decreases_loss() {
    let t = tiny(4, 8, 2, 2);
    let cfg = small_config();
    let mut model = Madl::new(3, 2, 2, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let rows: Vec<usize> = (0..8).collect();
    let before = model_loss(&model, &t, &rows);
    let batch = Batch::new(&t.z, &rows);
    let grads = {
        let mut g = Graph::new(&model.store);
        let terms = model.loss(&mut g, &t.x, &t.a, &batch).unwrap();
        g.backward(terms.loss).unwrap()
    };
    model.store.zero_grad();
    grads.accumulate_into(&mut model.store);
    let mut opt = OptimizerState::new(&model.store, 1e-4, 0.0, 1);
    adamw_step(&mut model.store, &mut opt, 1e-4).unwrap();
    assert!(model_loss(&model, &t, &rows) < before);
}

#[test]
fn empty_batch_is_rejected() {
    let t = tiny(5, 4, 2, 2);
    let model = Madl::new(3, 2, 2, &small_config(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let batch = Batch::new(&Annotations::missing(4, 2), &[0, 1]);
    let mut g = Graph::new(&model.store);
    assert!(model.loss(&mut g, &t.x.select(Axis(0), &[0, 1]), &t.a, &batch).is_err());
}

fn train_data(t: &Tiny) -> TrainData<'_> {
    TrainData {
        x: &t.x,
        z: &t.z,
        annotators: &t.a,
        classes: 2,
        validation: Some((&t.x, &t.y)),
    }
}

#[test]
fn same_seed_gives_bit_identical_parameters() {
    let t = tiny(6, 30, 3, 2);
    let cfg = small_config();
    let a = train(&train_data(&t), &cfg).unwrap();
    let b = train(&train_data(&t), &cfg).unwrap();
    for (p, q) in a.model.store.iter().zip(b.model.store.iter()) {
        assert_eq!(p.value, q.value, "{}", p.name);
    }
    assert_eq!(a.history, b.history);
    assert_eq!(a.history.len(), 3);
    let c = train(&train_data(&t), &TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn training_without_annotations_is_a_config_error() {
    let t = tiny(7, 6, 2, 2);
    let empty = Annotations::missing(6, 2);
    let data = TrainData { z: &empty, ..train_data(&t) };
    assert!(matches!(train(&data, &small_config()), Err(MadlError::Config(_))));
}

/// Replays two weights-off epochs with a loss assembled from different
/// graph operations and compares the parameter trajectory.
#[test]
fn weights_off_matches_hand_rolled_unweighted_loss() {
    let t = tiny(8, 20, 3, 2);
    let cfg = TrainConfig { epochs: 2, weights: false, ..small_config() };
    let data = TrainData { validation: None, ..train_data(&t) };
    let trained = train(&data, &cfg).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Madl::new(3, 2, 3, &cfg, &mut rng).unwrap();
    let mut order: Vec<usize> = (0..20).filter(|&i| t.z.has_any(i)).collect();
    let steps = order.len().div_ceil(cfg.batch_size) * cfg.epochs;
    let mut opt = OptimizerState::new(&model.store, cfg.learning_rate, cfg.weight_decay, steps as u64);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch as u64, cfg.epochs as u64, cfg.learning_rate);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::new(&t.z, chunk);
            let grads = {
                let mut g = Graph::new(&model.store);
                let xn = g.constant(t.x.select(Axis(0), chunk));
                let an = g.constant(t.a.clone());
                let fwd = model.forward(&mut g, xn, an, &batch.pair_indices()).unwrap();
                let c = 2;
                let mask = Tensor::from_shape_fn((batch.pairs.len(), c * c), |(k, j)| {
                    if j % c == batch.pairs[k].label { 1.0 } else { 0.0 }
                });
                let mask = g.constant(mask);
                let probs = g.gather_rows(fwd.gt.probs, batch.pairs.iter().map(|p| p.row).collect()).unwrap();
                let rep = g.repeat_cols(probs, c);
                let sel = g.mul(fwd.confusion, mask).unwrap();
                let joint = g.mul(sel, rep).unwrap();
                let q = g.sum_cols(joint);
                let ll = g.ln_clamped(q, PROB_FLOOR);
                let s = g.sum_all(ll);
                let loss = g.affine(s, -1.0 / batch.pairs.len() as f64, 0.0);
                g.backward(loss).unwrap()
            };
            model.store.zero_grad();
            grads.accumulate_into(&mut model.store);
            adamw_step(&mut model.store, &mut opt, lr).unwrap();
        }
    }
    for (p, q) in trained.model.store.iter().zip(model.store.iter()) {
        let diff = (&p.value - &q.value).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-10, "{}: {diff}", p.name);
    }
}

fn record(epoch: usize, acc: Option<f64>) -> EpochRecord {
    EpochRecord { epoch, train_loss: 0.0, val_gt_acc: acc, val_gt_nll: acc.map(|_| 0.3), gamma: 1.0, weights: vec![] }
}

#[test]
fn select_best_rules() {
    let rising: Vec<_> = (1..=4).map(|e| record(e, Some(e as f64 / 10.0))).collect();
    assert_eq!(select_best(&rising), Some(3));
    assert_eq!(select_best(&[record(1, Some(0.5))]), Some(0));
    let plateau = [record(1, Some(0.5)), record(2, Some(0.8)), record(3, Some(0.8)), record(4, Some(0.7))];
    assert_eq!(select_best(&plateau), Some(2));
    let mut calibrated = plateau.clone();
    calibrated[1].val_gt_nll = Some(0.2);
    assert_eq!(select_best(&calibrated), Some(1));
    assert_eq!(select_best(&[]), None);
    assert_eq!(select_best(&[record(1, None), record(2, None)]), Some(1));
}

#[test]
fn best_epoch_parameters_are_returned() {
    let t = tiny(9, 30, 3, 2);
    let cfg = TrainConfig { epochs: 4, ..small_config() };
    let out = train(&train_data(&t), &cfg).unwrap();
    let best = select_best(&out.history).unwrap();
    assert_eq!(out.best_epoch, best + 1);
    let acc = accuracy(&out.model.predict(&t.x).unwrap(), &t.y);
    assert_eq!(Some(acc), out.history[best].val_gt_acc);
}

#[test]
fn singleton_grid_returns_its_cell() {
    let t = tiny(10, 20, 3, 2);
    let cfg = small_config();
    let out = grid_search(&train_data(&t), &cfg, &[(0.005, 0.001)], Target::Annotations).unwrap();
    assert_eq!((out.config.learning_rate, out.config.weight_decay), (0.005, 0.001));
    assert_eq!(out.scores.len(), 1);
    assert!(grid_search(&train_data(&t), &cfg, &[], Target::Annotations).is_err());
}

#[test]
fn grid_picks_argmax_of_scores() {
    let t = tiny(11, 24, 3, 2);
    let cfg = TrainConfig { epochs: 2, ..small_config() };
    let grid = [(0.0, 0.0), (0.01, 0.0), (0.005, 0.0)];
    let out = grid_search(&train_data(&t), &cfg, &grid, Target::Annotations).unwrap();
    let best = out
        .scores
        .iter()
        .map(|s| s.2.unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    let first = out.scores.iter().position(|s| s.2 == Some(best)).unwrap();
    assert_eq!(out.config.learning_rate, grid[first].0);
}

#[test]
fn supervised_target_trains_all_variants() {
    let t = tiny(12, 20, 3, 3);
    let labels: Vec<Option<usize>> = t.y.iter().map(|&c| Some(c)).collect();
    for dep in [ClassDependency::Independent, ClassDependency::Partial, ClassDependency::Full] {
        for inst in [true, false] {
            let mut cfg = TrainConfig { epochs: 1, ..small_config() };
            cfg.ap.class_dependency = dep;
            cfg.ap.instance_dependent = inst;
            let data = TrainData { classes: 3, ..train_data(&t) };
            let out = train_with_target(&data, &cfg, Target::Labels(&labels)).unwrap();
            assert!(out.history[0].train_loss.is_finite());
            assert!(!out.model.weights);
        }
    }
}

#[test]
fn correctness_matches_confusion_diagonal() {
    let t = tiny(13, 9, 3, 3);
    let model = Madl::new(3, 3, 3, &small_config(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let corr = model.correctness(&t.x, &t.a).unwrap();
    let probs = model.predict_proba(&t.x).unwrap();
    let pairs: Vec<(usize, usize)> = (0..9).flat_map(|n| (0..3).map(move |m| (n, m))).collect();
    let conf = model.confusion(&t.x, &t.a, &pairs).unwrap();
    for (k, &(n, m)) in pairs.iter().enumerate() {
        let want: f64 = (0..3).map(|c| probs[[n, c]] * conf[[k, c * 3 + c]]).sum();
        assert!((corr[[n, m]] - want).abs() < 1e-12);
    }
}
