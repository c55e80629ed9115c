use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scarwid_core::autograd::softmax_rows;
use scarwid_core::captioner::{CaptionerConfig, CaptionerModel};
use scarwid_core::corpus::Label;
use scarwid_core::evaluation::{confusion, mean_stdev, metrics};
use scarwid_core::explain::{rollout_matrix, AttentionStack, Heatmap};
use scarwid_core::fusion::cross_attention;
use scarwid_core::imaging::ImageTensor;
use scarwid_core::retrieval::vote;
use scarwid_core::tensor::Matrix;
use scarwid_core::text::{Tokenizer, BOS};

fn label() -> impl Strategy<Value = Label> {
    prop_oneof![Just(Label::Infected), Just(Label::Uninfected)]
}

fn stochastic(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for r in 0..n {
        let row: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0f64).powi(3)).collect();
        let z: f64 = row.iter().sum::<f64>().max(1e-12);
        for (c, v) in row.iter().enumerate() {
            m.set(r, c, v / z);
        }
    }
    m
}

proptest! {
    #[test]
    fn confusion_counts_partition_the_classes(pairs in prop::collection::vec((label(), label()), 1..60)) {
        let (preds, truth): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let cm = confusion(&preds, &truth).unwrap();
        let positives = truth.iter().filter(|&&l| l == Label::Infected).count();
        prop_assert_eq!(cm.tp + cm.fn_, positives);
        prop_assert_eq!(cm.tn + cm.fp, truth.len() - positives);
    }

    #[test]
    fn defined_metrics_lie_in_the_unit_interval(tp in 0usize..50, fp in 0usize..50, tn in 0usize..50, fn_ in 0usize..50) {
        prop_assume!(tp + fp + tn + fn_ > 0);
        let m = metrics(&scarwid_core::evaluation::Confusion { tp, fp, tn, fn_ }).unwrap();
        for v in m.values().into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if let (Some(p), Some(s), Some(f)) = (m.ppv, m.sen, m.f1) {
            prop_assert!((f - 2.0 * p * s / (p + s)).abs() < 1e-12);
        }
    }

    #[test]
    fn population_stdev_is_shift_invariant(xs in prop::collection::vec(-5.0f64..5.0, 1..20), shift in -10.0f64..10.0) {
        let (m1, s1) = mean_stdev(&xs).unwrap();
        let moved: Vec<f64> = xs.iter().map(|x| x + shift).collect();
        let (m2, s2) = mean_stdev(&moved).unwrap();
        prop_assert!((m2 - m1 - shift).abs() < 1e-9);
        prop_assert!((s1 - s2).abs() < 1e-9);
        prop_assert!(s1 >= 0.0);
    }

    #[test]
    fn vote_is_the_majority_with_nearest_tie_break(labels in prop::collection::vec(label(), 1..12)) {
        let (got, counts) = vote(&labels);
        let inf = labels.iter().filter(|&&l| l == Label::Infected).count();
        prop_assert_eq!(counts.infected, inf);
        let want = if 2 * inf > labels.len() {
            Label::Infected
        } else if 2 * inf < labels.len() {
            Label::Uninfected
        } else {
            labels[0]
        };
        prop_assert_eq!(got, want);
    }

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>(), m in 1usize..6, l in 1usize..6, heads in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = heads * 2;
        let mut rand = |r: usize, c: usize| Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-4.0..4.0)).collect());
        let (ei, et) = (rand(m, 3), rand(l, 5));
        let out = cross_attention(&ei, &et, &rand(3, d), &rand(5, d), &rand(5, d), heads).unwrap();
        prop_assert_eq!(out.output.shape(), (m, d));
        for w in &out.weights {
            for r in 0..w.rows() {
                let s: f64 = w.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(w.row(r).iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn attention_ignores_the_order_of_text_tokens(seed in any::<u64>(), m in 1usize..5, l in 2usize..7, heads in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = heads * 2;
        let mut rand = |r: usize, c: usize| Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let (ei, et, wq, wk, wv) = (rand(m, 3), rand(l, 4), rand(3, d), rand(4, d), rand(4, d));
        let perm: Vec<usize> = (0..l).rev().collect();
        let mut shuffled = Matrix::zeros(l, 4);
        for (to, &from) in perm.iter().enumerate() {
            for c in 0..4 {
                shuffled.set(to, c, et.get(from, c));
            }
        }
        let a = cross_attention(&ei, &et, &wq, &wk, &wv, heads).unwrap();
        let b = cross_attention(&ei, &shuffled, &wq, &wk, &wv, heads).unwrap();
        for (x, y) in a.output.data().iter().zip(b.output.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        for (wa, wb) in a.weights.iter().zip(&b.weights) {
            for r in 0..m {
                for (to, &from) in perm.iter().enumerate() {
                    prop_assert!((wa.get(r, from) - wb.get(r, to)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_is_finite_for_large_scores(scores in prop::collection::vec(-1e4f64..1e4, 1..12), shift in -1e4f64..1e4) {
        let n = scores.len();
        let p = softmax_rows(&Matrix::from_vec(1, n, scores.clone()));
        prop_assert!(p.data().iter().all(|v| v.is_finite() && *v >= 0.0));
        prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let moved = softmax_rows(&Matrix::from_vec(1, n, scores.iter().map(|s| s + shift).collect()));
        for (x, y) in p.data().iter().zip(moved.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn rollout_rows_stay_stochastic(seed in any::<u64>(), n in 1usize..8, layers in 1usize..5, heads in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack: Vec<Vec<Matrix>> = (0..layers).map(|_| (0..heads).map(|_| stochastic(&mut rng, n)).collect()).collect();
        let r = rollout_matrix(&AttentionStack::new(stack).unwrap()).unwrap();
        for i in 0..n {
            let s: f64 = r.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(r.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn heatmaps_peak_at_one_unless_constant(values in prop::collection::vec(-3.0f64..3.0, 9)) {
        let h = Heatmap::normalized(&Matrix::from_vec(3, 3, values.clone()));
        let max = h.grid().data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let constant = values.iter().all(|&v| v == values[0]);
        if constant {
            prop_assert!(h.is_zero());
        } else {
            prop_assert_eq!(max, 1.0);
            prop_assert!(h.grid().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

fn tiny_captioner(seed: u64) -> CaptionerModel {
    let cfg = CaptionerConfig {
        image_size: 8,
        patch_size: 4,
        width: 8,
        encoder_layers: 1,
        encoder_heads: 2,
        decoder_layers: 1,
        decoder_heads: 2,
        max_len: 8,
    };
    CaptionerModel::new(cfg, Tokenizer::build(["red wound with pus", "clean pink wound"]), seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn decoder_steps_are_distributions_and_match_scores_are_probabilities(
        seed in any::<u64>(),
        prefix in prop::collection::vec(3usize..9, 0..5),
    ) {
        let model = tiny_captioner(seed % 1000);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = ImageTensor::from_vec(8, 8, (0..192).map(|_| rng.gen_range(0.0..1.0)).collect());
        let tokens = model.image_tokens(&img).unwrap();
        let mut ids = vec![BOS];
        ids.extend(prefix.iter().map(|&i| i.min(model.vocab_size() - 1)));
        let p = model.next_token_distribution(&tokens, &ids).unwrap();
        prop_assert_eq!(p.len(), model.vocab_size());
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let s = model.itm_score(&img, "red wound").unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
    }
}
