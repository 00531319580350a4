use ehct_autograd::{Binding, ParamStore, Tape, Tensor};
use ehct_core::data::{reassemble, tile_pair, ChangeMask, ImagePair};
use ehct_core::feature_extraction::HctConfig;
use ehct_core::head::{cross_entropy, predict_mask};
use ehct_core::metrics::{confusion, evaluate_dataset, f1, precision, recall};
use ehct_core::model::{Ablation, EhctNet, ModelConfig};
use ehct_core::spectral::gated_reconstruction;
use proptest::prelude::*;

fn tensor(shape: &[usize], values: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), values.to_vec()).unwrap()
}

fn small_model(size: usize) -> ModelConfig {
    ModelConfig {
        hct: HctConfig {
            stage_channels: vec![4, 8, 12, 16],
            attention_heads: 2,
            input_size: size,
            decoder_dim: 8,
            ..HctConfig::default()
        },
        token_heads: 2,
        head_hidden: 4,
        ..ModelConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tiling_round_trips(rows in 1usize..4, cols in 1usize..4, tile in prop::sample::select(vec![4usize, 8, 16]), seed in any::<u64>()) {
        let (h, w) = (rows * tile, cols * tile);
        let mut init = ehct_core::nn::Init::new(seed);
        let pair = ImagePair::new("img", init.uniform([3, h, w], 1.0), init.uniform([3, h, w], 1.0)).unwrap();
        let bits: Vec<u8> = init.uniform([h * w], 1.0).data().iter().map(|v| u8::from(*v > 0.0)).collect();
        let mask = ChangeMask::new("img", h, w, bits).unwrap();
        let tiles = tile_pair(&pair, &mask, tile).unwrap();
        prop_assert_eq!(tiles.len(), rows * cols);
        let (p2, m2) = reassemble(&tiles, rows, cols, "img").unwrap();
        prop_assert_eq!(p2, pair);
        prop_assert_eq!(m2, mask);
    }

    #[test]
    fn metrics_are_bounded(pairs in prop::collection::vec(prop::collection::vec((0u8..2, 0u8..2), 16), 1..6)) {
        let preds: Vec<Vec<u8>> = pairs.iter().map(|v| v.iter().map(|p| p.0).collect()).collect();
        let gts: Vec<Vec<u8>> = pairs.iter().map(|v| v.iter().map(|p| p.1).collect()).collect();
        let r = evaluate_dataset(&preds, &gts).unwrap();
        prop_assert_eq!(r.confusion.total(), 16 * pairs.len() as u64);
        for v in [r.precision, r.recall, r.f1, r.iou, r.miou, r.oa, r.two_class_miou].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if let (Some(p), Some(q), Some(f)) = (r.precision, r.recall, r.f1) {
            prop_assert!(f >= p.min(q) - 1e-15 && f <= p.max(q) + 1e-15);
        }
        if let (Some(i), Some(f)) = (r.iou, r.f1) {
            prop_assert!(i <= f + 1e-15);
        }
    }

    #[test]
    fn perfect_prediction_scores_one(gt in prop::collection::vec(0u8..2, 1..64)) {
        let cm = confusion(&gt, &gt).unwrap();
        prop_assert_eq!(cm.fp + cm.fn_, 0);
        if gt.contains(&1) {
            prop_assert_eq!(f1(precision(&cm), recall(&cm)), Some(1.0));
        }
    }

    #[test]
    fn spectral_block_is_linear(x1 in prop::collection::vec(-1.0f64..1.0, 2 * 4 * 6), x2 in prop::collection::vec(-1.0f64..1.0, 2 * 4 * 6),
                                g in prop::collection::vec(-2.0f64..2.0, 2 * 2 * 4 * 4), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let re = tensor(&[2, 4, 4], &g[..32]);
        let im = tensor(&[2, 4, 4], &g[32..]);
        let t1 = tensor(&[1, 2, 4, 6], &x1);
        let t2 = tensor(&[1, 2, 4, 6], &x2);
        let mix = t1.zip_map(&t2, |u, v| a * u + b * v).unwrap();
        let y = |t: &Tensor| gated_reconstruction(t, &re, &im).unwrap().0;
        let lhs = y(&mix);
        let rhs = y(&t1).zip_map(&y(&t2), |u, v| a * u + b * v).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn cross_entropy_ignores_logit_shift(l in prop::collection::vec(-5.0f64..5.0, 2 * 9), shift in -50.0f64..50.0, m in prop::collection::vec(0u8..2, 9)) {
        let base = tensor(&[1, 2, 3, 3], &l);
        let tape = Tape::inference();
        let ce = |t: Tensor| cross_entropy(tape.constant(t), &m, None).unwrap().value().item();
        prop_assert!((ce(base.clone()) - ce(base.map(|v| v + shift))).abs() < 1e-9);
        prop_assert_eq!(predict_mask(&base).unwrap(), predict_mask(&base.map(|v| v * 3.0 + shift)).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    /// Swapping the two dates leaves the absolute difference unchanged.
    #[test]
    fn difference_is_symmetric(seed in any::<u64>()) {
        let (store, net) = EhctNet::build(&small_model(32), Ablation::Full, seed).unwrap();
        let mut init = ehct_core::nn::Init::new(seed ^ 1);
        let a = init.uniform([1, 3, 32, 32], 1.0);
        let b = init.uniform([1, 3, 32, 32], 1.0);
        let run = |x: &Tensor, y: &Tensor, s: &ParamStore| {
            let tape = Tape::inference();
            let bind = Binding::new(&tape, s);
            let t = net.forward(&bind, bind.constant(x.clone()), bind.constant(y.clone())).unwrap();
            (t.diff.value().as_ref().clone(), t.logits.value().as_ref().clone())
        };
        let (d1, l1) = run(&a, &b, &store);
        let (d2, l2) = run(&b, &a, &store);
        prop_assert!(d1.max_abs_diff(&d2) < 1e-12);
        prop_assert!(l1.max_abs_diff(&l2) < 1e-10);
    }
}

#[test]
fn output_shape_for_every_size_and_ablation() {
    for size in [32, 64] {
        for ab in Ablation::ALL {
            let (store, net) = EhctNet::build(&small_model(size), ab, 0).unwrap();
            let tape = Tape::inference();
            let b = Binding::new(&tape, &store);
            let x = b.constant(Tensor::full([1, 3, size, size], 0.5));
            let y = b.constant(Tensor::full([1, 3, size, size], 0.25));
            let t = net.forward(&b, x, y).unwrap();
            assert_eq!(t.logits.shape(), vec![1, 2, size, size], "{ab} at {size}");
        }
    }
}
