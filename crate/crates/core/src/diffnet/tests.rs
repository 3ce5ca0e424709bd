use ndarray::array;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::MadlError;

/// Central differences of `f` w.r.t. every scalar in `store`.
fn finite_differences(
    store: &ParamStore,
    step: f64,
    f: impl Fn(&mut Graph<'_>) -> NodeId,
) -> Vec<Tensor> {
    let mut work = store.clone();
    let ids: Vec<_> = store.ids().collect();
    let mut out = Vec::new();
    for id in ids {
        let shape = store.value(id).raw_dim();
        let mut grad = Tensor::zeros(shape);
        for (idx, _) in store.value(id).indexed_iter() {
            let orig = work.value(id)[idx];
            work.value_mut(id)[idx] = orig + step;
            let plus = {
                let mut g = Graph::new(&work);
                let l = f(&mut g);
                g.value(l)[[0, 0]]
            };
            work.value_mut(id)[idx] = orig - step;
            let minus = {
                let mut g = Graph::new(&work);
                let l = f(&mut g);
                g.value(l)[[0, 0]]
            };
            work.value_mut(id)[idx] = orig;
            grad[idx] = (plus - minus) / (2.0 * step);
        }
        out.push(grad);
    }
    out
}

fn analytic(store: &ParamStore, f: impl Fn(&mut Graph<'_>) -> NodeId) -> Vec<Tensor> {
    let mut g = Graph::new(store);
    let loss = f(&mut g);
    let grads = g.backward(loss).unwrap();
    store
        .ids()
        .map(|id| {
            grads
                .param(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(store.value(id).raw_dim()))
        })
        .collect()
}

fn max_rel_error(a: &[Tensor], b: &[Tensor]) -> f64 {
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (&u, &v) in x.iter().zip(y.iter()) {
            let denom = u.abs().max(v.abs()).max(1e-3);
            worst = worst.max((u - v).abs() / denom);
        }
    }
    worst
}

#[test]
fn dense_forward_examples() {
    let mut store = ParamStore::new();
    let w = store.add("w", array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
    let b = store.add("b", array![[0.0, 0.0]]).unwrap();
    let w2 = store.add("w2", array![[2.0, 0.0], [0.0, 2.0]]).unwrap();
    let b2 = store.add("b2", array![[1.0, 1.0]]).unwrap();
    let b3 = store.add("b3", array![[3.0, -1.0]]).unwrap();
    let mut g = Graph::new(&store);

    let x = g.constant(array![[1.0, 2.0]]);
    let (wn, bn) = (g.param(w), g.param(b));
    let out = dense(&mut g, x, wn, bn).unwrap();
    assert_eq!(g.value(out), &array![[1.0, 2.0]]);

    let zero = g.constant(array![[0.0, 0.0]]);
    let (w2n, b3n) = (g.param(w2), g.param(b3));
    let out = dense(&mut g, zero, w2n, b3n).unwrap();
    assert_eq!(g.value(out), &array![[3.0, -1.0]]);

    let ones = g.constant(array![[1.0, 1.0]]);
    let b2n = g.param(b2);
    let out = dense(&mut g, ones, w2n, b2n).unwrap();
    assert_eq!(g.value(out), &array![[3.0, 3.0]]);
}

#[test]
fn dense_shape_mismatch_names_both_shapes() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::zeros((1, 3)));
    let w = g.constant(Tensor::zeros((2, 2)));
    let b = g.constant(Tensor::zeros((1, 2)));
    let err = dense(&mut g, x, w, b).unwrap_err();
    match err {
        MadlError::Shape { left, right, .. } => {
            assert_eq!(left, vec![1, 3]);
            assert_eq!(right, vec![2, 2]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn relu_examples() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.constant(array![[-1.0, 0.0, 2.0]]);
    let r = g.relu(x);
    assert_eq!(g.value(r), &array![[0.0, 0.0, 2.0]]);
    let neg = g.constant(array![[-3.0, -0.5]]);
    let r = g.relu(neg);
    assert!(g.value(r).iter().all(|&v| v == 0.0));
    let pos = g.constant(array![[0.5]]);
    let r = g.relu(pos);
    assert_eq!(g.value(r)[[0, 0]], 0.5);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut store = ParamStore::new();
    let p = store.add("p", array![[0.0, 1.0, -1.0]]).unwrap();
    let mut g = Graph::new(&store);
    let x = g.param(p);
    let r = g.relu(x);
    let l = g.sum_all(r);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.param(p).unwrap(), &array![[0.0, 1.0, 0.0]]);
}

#[test]
fn softmax_examples() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.constant(array![[0.0, 0.0], [1000.0, 0.0], [2f64.ln(), 0.0]]);
    let s = g.softmax_rows(x);
    let v = g.value(s);
    assert_eq!(v.row(0).to_vec(), vec![0.5, 0.5]);
    assert!((v[[1, 0]] - 1.0).abs() < 1e-12 && v[[1, 1]] >= 0.0 && v[[1, 1]] < 1e-300);
    assert!(v.iter().all(|x| x.is_finite()));
    assert!((v[[2, 0]] - 2.0 / 3.0).abs() < 1e-15);
    assert!((v[[2, 1]] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn stop_gradient_detached_product() {
    // loss = stop(x) * x at x = 3 has derivative 3, not 6.
    let mut store = ParamStore::new();
    let p = store.add("x", array![[3.0]]).unwrap();
    let mut g = Graph::new(&store);
    let x = g.param(p);
    let sx = g.stop_gradient(x);
    assert_eq!(g.value(sx), g.value(x));
    let l = g.mul(sx, x).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.param(p).unwrap()[[0, 0]], 3.0);
}

#[test]
fn stopped_inputs_only_give_no_gradient() {
    let mut store = ParamStore::new();
    let p = store.add("x", array![[1.5, -2.0]]).unwrap();
    let mut g = Graph::new(&store);
    let x = g.param(p);
    let sx = g.stop_gradient(x);
    let e = g.exp(sx);
    let l = g.sum_all(e);
    let grads = g.backward(l).unwrap();
    assert!(grads.param(p).is_none());
}

#[test]
fn backward_linear_loss() {
    // loss = sum(x · W) → dW[i, j] = x[i]
    let mut store = ParamStore::new();
    let w = store.add("w", array![[0.3, -0.2], [1.1, 0.4], [0.0, 2.0]]).unwrap();
    let unused = store.add("unused", array![[5.0]]).unwrap();
    let mut g = Graph::new(&store);
    let x = g.constant(array![[1.0, -2.0, 0.5]]);
    let wn = g.param(w);
    let _ = g.param(unused);
    let y = g.matmul(x, wn).unwrap();
    let l = g.sum_all(y);
    let grads = g.backward(l).unwrap();
    assert_eq!(
        grads.param(w).unwrap(),
        &array![[1.0, 1.0], [-2.0, -2.0], [0.5, 0.5]]
    );
    assert!(grads.param(unused).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::zeros((2, 1)));
    assert!(matches!(g.backward(x), Err(MadlError::Contract(_))));
}

#[test]
fn repeated_accumulation_adds_up() {
    let mut store = ParamStore::new();
    let p = store.add("x", array![[2.0]]).unwrap();
    for _ in 0..2 {
        let grads = {
            let mut g = Graph::new(&store);
            let x = g.param(p);
            let l = g.mul(x, x).unwrap();
            g.backward(l).unwrap()
        };
        grads.accumulate_into(&mut store);
    }
    assert_eq!(store.grad(p)[[0, 0]], 8.0);
    store.zero_grad();
    assert_eq!(store.grad(p)[[0, 0]], 0.0);
}

fn mlp_store(seed: u64) -> (ParamStore, [ParamId; 5]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let w1 = store.add_glorot("w1", 3, 5, &mut rng).unwrap();
    let b1 = store.add_uniform("b1", 1, 5, 0.3, &mut rng).unwrap();
    let w2 = store.add_glorot("w2", 5, 4, &mut rng).unwrap();
    let b2 = store.add_uniform("b2", 1, 4, 0.3, &mut rng).unwrap();
    let t = store.add_uniform("t", 1, 1, 0.5, &mut rng).unwrap();
    (store, [w1, b1, w2, b2, t])
}

/// Exercises every op in one composite network.
fn composite_loss(g: &mut Graph<'_>, ids: &[ParamId; 5]) -> NodeId {
    let [w1, b1, w2, b2, t] = *ids;
    let x = g.constant(array![[0.5, -1.0, 2.0], [1.5, 0.2, -0.3], [-0.7, 0.9, 0.1]]);
    let (w1, b1, w2, b2, t) = (g.param(w1), g.param(b1), g.param(w2), g.param(b2), g.param(t));
    let h = dense(g, x, w1, b1).unwrap();
    let h = g.relu(h);
    let logits = dense(g, h, w2, b2).unwrap();
    let p = g.softmax_rows(logits);
    // reshape 3×4 → 6×2 and softmax again
    let r = g.reshape(logits, 6, 2).unwrap();
    let q = g.softmax_rows(r);
    let diag = g.sigmoid(logits);
    let diag = g.gather_elems(diag, vec![0, 1, 2, 3, 1, 2], 2).unwrap();
    let ex = g.expand_diag(diag).unwrap();
    let rows = g.gather_rows(ex, vec![2, 0, 0]).unwrap();
    let picked = g.gather_elems(rows, vec![0, 3, 1, 2, 3, 0], 2).unwrap();
    let s = g.sum_cols(picked);
    let s = g.affine(s, 0.5, 0.1);
    let ln = g.ln_clamped(s, 1e-12);
    let tg = g.exp(t);
    let scaled = g.mul_scalar(ln, tg).unwrap();
    let rep = g.repeat_cols(h, 2);
    let til = g.tile_cols(h, 2);
    let outer = g.mul(rep, til).unwrap();
    let d = g.sq_distances(h);
    let kd = g.mul_scalar(d, tg).unwrap();
    let kd = g.affine(kd, -0.1, 0.0);
    let k = g.exp(kd);
    let dens = g.sum_cols(k);
    let inv = g.recip(dens);
    let cat = g.concat_cols(&[p, inv, s]).unwrap();
    let weighted = g.mul_column(cat, inv).unwrap();
    let a = g.sum_all(weighted);
    let b = g.sum_all(scaled);
    let c = g.sum_all(outer);
    let qq = g.sum_all(q);
    let qq = g.mul(qq, a).unwrap();
    let ab = g.sub(a, b).unwrap();
    let c = g.affine(c, 0.01, 0.0);
    let abc = g.add(ab, c).unwrap();
    g.add(abc, qq).unwrap()
}

#[test]
fn composite_network_matches_finite_differences() {
    for seed in 0..5 {
        let (store, ids) = mlp_store(seed);
        let a = analytic(&store, |g| composite_loss(g, &ids));
        let fd = finite_differences(&store, 1e-4, |g| composite_loss(g, &ids));
        let err = max_rel_error(&a, &fd);
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn adamw_examples() {
    let mut store = ParamStore::new();
    let p = store.add("p", array![[1.0]]).unwrap();
    let mut st = OptimizerState::new(&store, 0.1, 0.0, 10);
    adamw_step(&mut store, &mut st, 0.1).unwrap();
    assert_eq!(store.value(p)[[0, 0]], 1.0);

    store.get_mut(p).grad.fill(1.0);
    let mut st = OptimizerState::new(&store, 0.1, 0.0, 10);
    adamw_step(&mut store, &mut st, 0.1).unwrap();
    assert!((store.value(p)[[0, 0]] - 0.9).abs() < 1e-8);

    let mut store = ParamStore::new();
    let p = store.add("p", array![[2.0]]).unwrap();
    let mut st = OptimizerState::new(&store, 0.01, 0.1, 10);
    adamw_step(&mut store, &mut st, 0.01).unwrap();
    assert!((store.value(p)[[0, 0]] - 2.0 * (1.0 - 0.001)).abs() < 1e-15);
    assert_eq!(st.step, 1);
}

#[test]
fn cosine_schedule_examples() {
    assert_eq!(cosine_lr(0, 100, 0.01), 0.01);
    assert!(cosine_lr(100, 100, 0.01).abs() < 1e-18);
    assert!((cosine_lr(50, 100, 0.01) - 0.005).abs() < 1e-15);
}

proptest! {
    #[test]
    fn softmax_rows_are_probability_vectors(
        vals in proptest::collection::vec(-50.0f64..50.0, 2..12),
    ) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let c = vals.len();
        let x = g.constant(Tensor::from_shape_vec((1, c), vals).unwrap());
        let s = g.softmax_rows(x);
        let row = g.value(s);
        prop_assert!((row.sum() - 1.0).abs() < 1e-9);
        prop_assert!(row.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn stop_gradient_is_bitwise_identity(
        vals in proptest::collection::vec(-1e6f64..1e6, 1..20),
    ) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let n = vals.len();
        let x = g.constant(Tensor::from_shape_vec((1, n), vals).unwrap());
        let y = g.stop_gradient(x);
        for (a, b) in g.value(x).iter().zip(g.value(y).iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn adamw_zero_gradient_zero_decay_is_identity(
        vals in proptest::collection::vec(-10.0f64..10.0, 1..10),
        lr in 1e-5f64..1.0,
        steps in 1usize..5,
    ) {
        let mut store = ParamStore::new();
        let n = vals.len();
        let p = store.add("p", Tensor::from_shape_vec((1, n), vals).unwrap()).unwrap();
        let before = store.value(p).clone();
        let mut st = OptimizerState::new(&store, lr, 0.0, 10);
        for _ in 0..steps {
            adamw_step(&mut store, &mut st, lr).unwrap();
        }
        prop_assert_eq!(store.value(p), &before);
    }

    #[test]
    fn random_mlp_gradients_match(seed in 0u64..1000) {
        let (store, ids) = mlp_store(seed);
        // central differences straddling a ReLU kink are meaningless
        let x = array![[0.5, -1.0, 2.0], [1.5, 0.2, -0.3], [-0.7, 0.9, 0.1]];
        let pre = x.dot(store.value(ids[0])) + store.value(ids[1]);
        prop_assume!(pre.iter().all(|v| v.abs() > 1e-3));
        let a = analytic(&store, |g| composite_loss(g, &ids));
        let fd = finite_differences(&store, 1e-4, |g| composite_loss(g, &ids));
        prop_assert!(max_rel_error(&a, &fd) < 1e-4);
    }
}


