//! Property tests for the metric, data and forecaster invariants.

use fedgame::data::{make_windows, Normalization, SeriesShard, SplitFractions};
use fedgame::forecaster::{pinball_loss, Arch, ForecasterConfig, ForecasterModel};
use fedgame::metrics::{icp, mil, quantile_score};
use fedgame::ClientId;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn series(values: Vec<f64>) -> SeriesShard {
    SeriesShard {
        client_id: ClientId(0),
        name: "s".into(),
        values,
        start: 1_000,
        interval_secs: 300,
        cluster: None,
    }
}

fn bounded_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, len)
}

proptest! {
    #[test]
    fn pinball_is_non_negative_and_zero_on_exact_prediction(
        target in prop::collection::vec(-50.0f64..50.0, 1..12),
        noise in prop::collection::vec(-5.0f64..5.0, 36),
        q in prop::collection::vec(0.01f64..0.99, 1..4),
    ) {
        let nq = q.len();
        let exact: Vec<f64> = target.iter().flat_map(|y| std::iter::repeat_n(*y, nq)).collect();
        prop_assert_eq!(pinball_loss(&exact, &target, &q).unwrap(), 0.0);
        let off: Vec<f64> = exact.iter().zip(noise.iter().cycle()).map(|(p, e)| p + e).collect();
        let loss = pinball_loss(&off, &target, &q).unwrap();
        prop_assert!(loss >= 0.0);
        if noise.iter().take(off.len()).any(|e| *e != 0.0) {
            prop_assert!(loss > 0.0);
        }
    }

    #[test]
    fn qs_is_mean_of_pinball_over_quantiles(
        target in prop::collection::vec(-50.0f64..50.0, 1..10),
        pred in bounded_vec(30),
    ) {
        let q = [0.1, 0.5, 0.9];
        let pred = &pred[..target.len() * 3];
        let per_q: Vec<f64> = (0..3)
            .map(|j| {
                let column: Vec<f64> = (0..target.len()).map(|t| pred[t * 3 + j]).collect();
                quantile_score(&target, &column, q[j]).unwrap()
            })
            .collect();
        let qs = per_q.iter().sum::<f64>() / 3.0;
        prop_assert_eq!(qs.to_bits(), pinball_loss(pred, &target, &q).unwrap().to_bits());
    }

    #[test]
    fn widening_bounds_never_lowers_icp(
        y in bounded_vec(40),
        lo in bounded_vec(40),
        width in prop::collection::vec(0.0f64..50.0, 40),
        grow in prop::collection::vec(0.0f64..20.0, 80),
    ) {
        let hi: Vec<f64> = lo.iter().zip(&width).map(|(l, w)| l + w).collect();
        let lo2: Vec<f64> = lo.iter().zip(&grow[..40]).map(|(l, g)| l - g).collect();
        let hi2: Vec<f64> = hi.iter().zip(&grow[40..]).map(|(h, g)| h + g).collect();
        prop_assert!(icp(&y, &lo2, &hi2).unwrap() >= icp(&y, &lo, &hi).unwrap());
    }

    #[test]
    fn mil_ignores_bound_order(lo in bounded_vec(25), hi in bounded_vec(25)) {
        prop_assert_eq!(mil(&lo, &hi).unwrap(), mil(&hi, &lo).unwrap());
    }

    #[test]
    fn normalization_round_trips(
        xs in prop::collection::vec(-1e3f64..1e3, 1..50),
        mean in -1e3f64..1e3,
        std in 1e-3f64..1e3,
    ) {
        let stats = Normalization { mean, std };
        for x in xs {
            prop_assert!((stats.denormalize(stats.normalize(x)) - x).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn windows_never_see_their_future_and_splits_are_chronological(
        values in prop::collection::vec(0.0f64..10.0, 40..160),
        history in 1usize..8,
        horizon in 1usize..5,
    ) {
        let shard = series(values.clone());
        let split = make_windows(&shard, history, horizon, SplitFractions::default()).unwrap();
        let mut last_end: Option<usize> = None;
        for part in [&split.train, &split.val, &split.test] {
            for (k, &origin) in part.origins().iter().enumerate() {
                let (input, target) = part.sample(k).unwrap();
                // inputs are series[origin..origin+h], targets the next `horizon` values
                for (i, z) in input.iter().enumerate() {
                    prop_assert!((split.stats.denormalize(*z) - values[origin + i]).abs() < 1e-9);
                }
                for (i, z) in target.iter().enumerate() {
                    prop_assert!((split.stats.denormalize(*z) - values[origin + history + i]).abs() < 1e-9);
                }
            }
            if let (Some(first), Some(end)) = (part.origins().first(), last_end) {
                // a part's first window starts after every value the previous part used
                prop_assert!(*first >= end);
                prop_assert!(shard.timestamp(*first) > shard.timestamp(end - 1));
            }
            if let Some(last) = part.origins().last() {
                last_end = Some(last + history + horizon);
            }
        }
    }

    #[test]
    fn forward_is_stateless(seed in any::<u64>(), lstm in any::<bool>(), a in bounded_vec(6), b in bounded_vec(6)) {
        let cfg = ForecasterConfig {
            history_len: 6,
            horizon: 2,
            hidden_sizes: vec![5],
            arch: if lstm { Arch::Lstm } else { Arch::Mlp },
            ..ForecasterConfig::default()
        };
        let model = ForecasterModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let first = model.forward(&a).unwrap();
        let _ = model.forward(&b).unwrap();
        prop_assert_eq!(first, model.forward(&a).unwrap());
    }
}
