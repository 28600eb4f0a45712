use cogen::harness::encoder_gradcheck;
use cogen::tensor::checkpoint::Checkpoint;
use cogen::tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn plain_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

#[test]
fn sum_of_product_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut g = Graph::<f64>::new();
    let av = g.input(Tensor::new(vec![3, 3], a.clone()).unwrap());
    let bv = g.constant(Tensor::new(vec![3, 3], b.clone()).unwrap());
    let p = g.matmul(av, bv).unwrap();
    let loss = g.sum(p);
    let grads = g.backward(loss).unwrap();
    let analytic = grads.leaf(av).unwrap();

    let f = |a: &[f64]| plain_matmul(a, &b, 3, 3, 3).iter().sum::<f64>();
    let h = 1e-3;
    for e in 0..9 {
        let mut up = a.clone();
        up[e] += h;
        let mut down = a.clone();
        down[e] -= h;
        let numeric = (f(&up) - f(&down)) / (2.0 * h);
        let rel = (analytic[e] - numeric).abs() / numeric.abs().max(1.0);
        assert!(rel < 1e-4, "element {e}: {} vs {numeric}", analytic[e]);
    }
}

#[test]
fn softmax_matches_direct_oracle() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let s = g.softmax(x, 1).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, &got) in g.value(s).iter().enumerate() {
        let want = ((i + 1) as f64).exp() / z;
        assert!((got as f64 - want).abs() < 1e-6);
    }
    for (got, want) in g.value(s).iter().zip([0.09003, 0.24473, 0.66524]) {
        assert!((*got as f64 - want).abs() < 1e-5);
    }
}

#[test]
fn layer_norm_matches_mean_variance_oracle() {
    let x = [1.0f64, 2.0, 3.0];
    let mean = x.iter().sum::<f64>() / 3.0;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
    let want: Vec<f64> = x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();

    let mut g = Graph::<f64>::new();
    let xv = g.input(Tensor::new(vec![1, 3], x.to_vec()).unwrap());
    let gain = g.constant(Tensor::full(vec![3], 1.0));
    let bias = g.constant(Tensor::zeros(vec![3]));
    let y = g.layer_norm(xv, gain, bias, 1e-5).unwrap();
    for (a, b) in g.value(y).iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((want[2] - 1.2247).abs() < 1e-4);
}

#[test]
fn cross_entropy_matches_softmax_oracle() {
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    let want = -(3.0f64.exp() / z).ln();
    let mut g = Graph::<f64>::new();
    let l = g.input(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let ce = g.cross_entropy(l, &[2], u32::MAX).unwrap();
    assert!((g.scalar_value(ce) - want).abs() < 1e-12);
    assert!((want - 0.40761).abs() < 1e-5);
}

#[test]
fn ignored_targets_contribute_nothing() {
    let mut g = Graph::<f64>::new();
    let l = g.input(Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 5.0, 1.0, 0.0]).unwrap());
    let both = g.cross_entropy(l, &[1, 0], 0).unwrap();
    let first = {
        let mut h = Graph::<f64>::new();
        let l = h.input(Tensor::new(vec![1, 3], vec![0.3, -1.0, 2.0]).unwrap());
        let ce = h.cross_entropy(l, &[1], 0).unwrap();
        h.scalar_value(ce)
    };
    assert_eq!(g.scalar_value(both), first);
    let grads = g.backward(both).unwrap();
    assert!(grads.leaf(l).unwrap()[3..].iter().all(|&x| x == 0.0));
}

#[test]
fn encoder_parameter_gradients_match_finite_differences() {
    for seed in 0..5 {
        let r = encoder_gradcheck(seed).unwrap();
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
    }
}

#[test]
fn adam_descends_a_quadratic() {
    let mut store = ParamStore::<f64>::new();
    let w = store.register("w", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap()).unwrap();
    let mut adam = Adam::new(
        AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        },
        &store,
    );
    for _ in 0..400 {
        let grads = {
            let mut g = Graph::new();
            let x = g.param(&store, w);
            let sq = g.mul(x, x).unwrap();
            let l = g.sum(sq);
            g.backward(l).unwrap()
        };
        store.accumulate(&grads).unwrap();
        adam.step(&mut store).unwrap();
        store.zero_grads();
    }
    assert!(store.get(w).data().iter().all(|v| v.abs() < 0.05), "{:?}", store.get(w).data());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::randn(vec![rows, cols], 3.0, &mut rng));
        let s = g.softmax(x, 1).unwrap();
        for row in g.value(s).chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(rows in 1usize..4, cols in 2usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f64>::new();
        let raw = Tensor::<f64>::randn(vec![rows, cols], 2.0, &mut rng);
        let x = g.input(raw.clone());
        let gain = g.constant(Tensor::full(vec![cols], 1.0));
        let bias = g.constant(Tensor::zeros(vec![cols]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let stats = |row: &[f64]| {
            let mean = row.iter().sum::<f64>() / cols as f64;
            (mean, row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64)
        };
        for (row, src) in g.value(y).chunks(cols).zip(raw.data().chunks(cols)) {
            let (mean, var) = stats(row);
            let (_, raw_var) = stats(src);
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - raw_var / (raw_var + 1e-5)).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_of_linear_form_is_its_coefficients(n in 1usize..10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = Tensor::<f64>::randn(vec![n], 1.0, &mut rng);
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::randn(vec![n], 1.0, &mut rng));
        let cv = g.constant(c.clone());
        let p = g.mul(x, cv).unwrap();
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        prop_assert_eq!(grads.leaf(x).unwrap(), c.data());
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly(sizes in prop::collection::vec(1usize..20, 1..5), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f32>::new();
        for (i, n) in sizes.iter().enumerate() {
            store.register(format!("p{i}"), Tensor::randn(vec![*n], 1.0, &mut rng)).unwrap();
        }
        let ckpt = Checkpoint::from_store(&store, None, vec![("k".into(), "v=1\nx".into())]);
        let bytes = ckpt.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes.clone());
        let restored = back.to_store().unwrap();
        for ((_, _, a), (_, _, b)) in store.iter().zip(restored.iter()) {
            prop_assert_eq!(a.data(), b.data());
        }
        prop_assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
    }
}
