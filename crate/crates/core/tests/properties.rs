mod common;

use proptest::prelude::*;
use qmatch::augment::{corrupt, CorruptionMode, Donor, Pool};
use qmatch::baselines::collision_probability;
use qmatch::data::{
    fit_preprocess, make_splits, Feature, FeatureKind, PreprocessOptions, SplitSpec, TabularDataset, TestSplit,
};
use qmatch::distill::{mean_entropy, qmatch_loss, EmbeddingQueue};
use qmatch::train::{rank_by_mean, select_best, Hyper, PointSummary};
use qmatch::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn queue_is_fifo_with_constant_capacity((cap, dim, pushes) in common::push_plan()) {
        prop_assert_eq!(common::check_fifo(cap, dim, &pushes), Ok(()));
    }

    #[test]
    fn random_queue_rows_are_unit_norm(cap in 1usize..64, dim in 1usize..32, seed in any::<u64>()) {
        let q = EmbeddingQueue::<f64>::random(cap, dim, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(q.is_full());
        for r in 0..cap {
            let n = q.storage().row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn loss_is_bounded_below_by_teacher_entropy(
        b in 1usize..6, m in 1usize..10, d in 1usize..6, seed in any::<u64>(),
        ts in 0.02f64..1.0, tt in 0.02f64..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zs = EmbeddingQueue::<f64>::random(b, d, &mut rng).unwrap().storage().clone();
        let zt = EmbeddingQueue::<f64>::random(b, d, &mut rng).unwrap().storage().clone();
        let queue = EmbeddingQueue::<f64>::random(m, d, &mut rng).unwrap().storage().clone();
        let mut g = Graph::new();
        let s = g.leaf(zs);
        let t = g.leaf(zt.clone());
        let loss = qmatch_loss(&mut g, s, t, &queue, ts, tt).unwrap();
        let h = mean_entropy(&zt, &queue, tt).unwrap();
        prop_assert!(g.value(loss).item() >= h - 1e-9);
    }

    #[test]
    fn corruption_mask_and_donors(
        rows in 1usize..8, cols in 1usize..6, p in 0.0f64..=1.0, seed in any::<u64>(), per_row in any::<bool>(),
    ) {
        let x = Tensor::new(vec![rows, cols], (0..rows * cols).map(|i| i as f64).collect()).unwrap();
        let pool_x = Tensor::new(vec![5, cols], (0..5 * cols).map(|i| 1000.0 + i as f64).collect()).unwrap();
        let idx = [0usize, 2, 4];
        let donor = if per_row { Donor::PerRow } else { Donor::PerCell };
        let out = corrupt(&x, Some(Pool::new(&pool_x, &idx)), p, CorruptionMode::Resample, donor, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for r in 0..rows {
            let mut donors = Vec::new();
            for c in 0..cols {
                let v = out.x.at(r, c);
                if out.mask.at(r, c) == 0.0 {
                    prop_assert_eq!(v, x.at(r, c));
                } else {
                    // value must come from the same column of an allowed pool row
                    let src = idx.iter().find(|&&i| pool_x.at(i, c) == v);
                    prop_assert!(src.is_some());
                    donors.push(*src.unwrap());
                }
            }
            if per_row {
                donors.dedup();
                prop_assert!(donors.len() <= 1);
            }
        }
        if p == 0.0 {
            prop_assert_eq!(out.mask.sum(), 0.0);
        }
        if p == 1.0 {
            prop_assert_eq!(out.mask.sum(), (rows * cols) as f64);
        }
    }

    #[test]
    fn splits_are_disjoint_and_deterministic(n in 60usize..200, seed in any::<u64>(), frac in 0.1f64..=1.0) {
        let x = Tensor::new(vec![n, 1], (0..n).map(|i| i as f64).collect()).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let data = TabularDataset::new(
            "toy",
            vec![Feature { name: "x".into(), kind: FeatureKind::Numeric }],
            x,
            Some(labels),
            vec!["0".into(), "1".into(), "2".into()],
        ).unwrap();
        let spec = SplitSpec {
            pretext: None,
            pretext_val_fraction: 0.1,
            down_train: 15,
            down_val: 10,
            test: TestSplit::Random(20),
            label_fraction: frac,
            seed,
        };
        let a = make_splits(&data, &spec).unwrap();
        prop_assert_eq!(&a, &make_splits(&data, &spec).unwrap());
        let mut seen = vec![false; n];
        for (_, part) in a.parts() {
            for &i in part {
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
        }
        prop_assert_eq!(a.test.len(), 20);
        prop_assert_eq!(a.down_val.len(), 10);
    }

    #[test]
    fn standardized_columns_have_zero_mean(values in prop::collection::vec(-50.0f64..50.0, 3..40)) {
        let n = values.len();
        let data = TabularDataset::new(
            "toy",
            vec![Feature { name: "x".into(), kind: FeatureKind::Numeric }],
            Tensor::new(vec![n, 1], values.clone()).unwrap(),
            None,
            vec![],
        ).unwrap();
        let prep = fit_preprocess(&data, None, &PreprocessOptions::default()).unwrap();
        let z: Tensor<f64> = prep.apply(&data.x).unwrap();
        let mean = z.data().iter().sum::<f64>() / n as f64;
        prop_assert!(mean.abs() < 1e-9);
    }

    #[test]
    fn ranks_follow_their_means(means in prop::collection::vec(0.0f64..100.0, 1..10)) {
        let ranks = rank_by_mean(&means);
        let n = means.len() as f64;
        prop_assert!((ranks.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
        for i in 0..means.len() {
            for j in 0..means.len() {
                if means[i] > means[j] {
                    prop_assert!(ranks[i] < ranks[j]);
                }
            }
        }
    }

    #[test]
    fn selection_ignores_input_order(vals in prop::collection::vec((0usize..4, 0u8..3), 1..12), rot in 0usize..12) {
        let points: Vec<PointSummary> = vals
            .iter()
            .enumerate()
            .map(|(i, &(lr, acc))| PointSummary {
                hyper: Hyper::from([("lr".to_string(), 10f64.powi(-(lr as i32) - 1)), ("queue_size".to_string(), i as f64)]),
                mean_val_accuracy: acc as f64,
                mean_test_accuracy: 0.0,
                failed: false,
            })
            .collect();
        let mut rotated = points.clone();
        let k = rot % points.len();
        rotated.rotate_left(k);
        prop_assert_eq!(select_best(&points), select_best(&rotated));
    }

    #[test]
    fn collision_probability_grows_with_batch(n in 2u64..5000, b in 1u64..4000) {
        let p = collision_probability(n, b);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!(collision_probability(n, b + 1) >= p);
        prop_assert!(collision_probability(n + 1, b) <= p + 1e-15);
    }
}
