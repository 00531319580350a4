use ehct_autograd::gradcheck::check_gradients;
use ehct_autograd::{ParamStore, Sgd, Tape, Tensor, TensorError};
use proptest::prelude::*;

fn from(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn matmul_gradients(m in 1usize..4, k in 1usize..4, n in 1usize..4, vals in prop::collection::vec(-2.0f64..2.0, 32)) {
        let a = from(&[m, k], &vals[..m * k]);
        let b = from(&[k, n], &vals[16..16 + k * n]);
        let r = check_gradients::<_, TensorError>(&[a, b], 1e-5, |_, v| Ok(v[0].matmul(v[1])?.square().sum())).unwrap();
        // round-off dominates on near-zero entries, hence the absolute fallback
        prop_assert!(r.max_rel_error < 1e-6 || r.max_abs_error < 1e-8, "{:?}", r);
    }

    #[test]
    fn broadcast_add_sums_gradients(rows in 1usize..5, cols in 1usize..5) {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([rows, cols]));
        let bias = tape.leaf(Tensor::zeros([cols]));
        let g = tape.backward(x.add(bias).unwrap().sum());
        prop_assert!(g.get(bias).unwrap().data().iter().all(|&v| v == rows as f64));
        prop_assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0f64..30.0, 12)) {
        let tape = Tape::inference();
        let p = tape.constant(from(&[3, 4], &vals)).softmax().value();
        for r in 0..3 {
            let row = &p.data()[r * 4..r * 4 + 4];
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_round_trips(a in 1usize..4, b in 1usize..4, c in 1usize..4) {
        let t = Tensor::from_fn([a, b, c], |i| i as f64);
        let back = t.permute(&[2, 0, 1]).unwrap().permute(&[1, 2, 0]).unwrap();
        prop_assert_eq!(back, t);
    }
}

#[test]
fn sgd_matches_hand_computation() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new([2], vec![1.0, -2.0]).unwrap());
    let mut sgd = Sgd::new(0.9, 0.1);
    let g = Tensor::new([2], vec![0.5, 0.25]).unwrap();
    sgd.step(&mut store, &[Some(g.clone())], 0.1);
    // v = g + wd * p; p -= lr * v
    let v1 = [0.5 + 0.1 * 1.0, 0.25 + 0.1 * -2.0];
    let p1 = [1.0 - 0.1 * v1[0], -2.0 - 0.1 * v1[1]];
    assert_eq!(store.get(id).data(), &p1);
    sgd.step(&mut store, &[Some(g)], 0.1);
    let v2 = [0.9 * v1[0] + 0.5 + 0.1 * p1[0], 0.9 * v1[1] + 0.25 + 0.1 * p1[1]];
    let p2 = [p1[0] - 0.1 * v2[0], p1[1] - 0.1 * v2[1]];
    for (a, b) in store.get(id).data().iter().zip(p2) {
        assert!((a - b).abs() < 1e-15);
    }
}
