mod common;

use proptest::prelude::*;
use rand::Rng;

use trainperf::dataset::{read_dataset, write_dataset, Attribute, ProfileRecord};
use trainperf::features::{extract_features, FeatureSchema};
use trainperf::forest::{Forest, ForestConfig};
use trainperf::network::{parse_network, prune_network, to_json, zoo, NetworkSpec, PruneConfig, PruneStrategy};
use trainperf::predictor::PredictorError;
use trainperf::search::{evolve, sample_feasible, Constraints, EsConfig};
use trainperf::synthetic::SyntheticDevice;
use trainperf::{AttributePredictor, Exact};

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, ..ProptestConfig::default() }
}

fn strategies(net: &NetworkSpec) -> [PruneStrategy; 2] {
    [PruneStrategy::UniformRandom, PruneStrategy::depth_weighted(net)]
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn features_linear_in_batch_size(seed in any::<u64>(), a in 1u32..64, d in 1u32..64) {
        let net = common::random_network(&mut common::rng(seed), 10);
        for schema in [FeatureSchema::TRAINING, FeatureSchema::INFERENCE] {
            let f = |bs| extract_features::<Exact>(&net, bs, schema).unwrap();
            let (lo, mid, hi) = (f(a), f(a + d), f(a + 2 * d));
            for i in 0..lo.len() {
                prop_assert_eq!(lo.values()[i].clone() + hi.values()[i].clone(), mid.values()[i].times(2));
            }
        }
    }

    #[test]
    fn float_features_finite_and_non_negative(seed in any::<u64>(), bs in 1u32..=512) {
        let net = common::random_network(&mut common::rng(seed), 12);
        for schema in [FeatureSchema::TRAINING, FeatureSchema::INFERENCE] {
            let f = extract_features::<f64>(&net, bs, schema).unwrap();
            prop_assert!(f.values().iter().all(|v| v.is_finite() && *v >= 0.0), "{:?}", f.values());
        }
    }

    #[test]
    fn network_json_round_trips(seed in any::<u64>()) {
        let net = common::random_network(&mut common::rng(seed), 14);
        prop_assert_eq!(parse_network(&to_json(&net)).unwrap(), net);
    }

    #[test]
    fn pruning_invariants(seed in any::<u64>(), a in 0.0f64..99.9, b in 0.0f64..99.9) {
        let net = common::random_network(&mut common::rng(seed), 12);
        let (lo, hi) = (a.min(b), a.max(b));
        for strategy in strategies(&net) {
            let prune = |level| prune_network(&net, &PruneConfig { level, strategy: strategy.clone(), seed }).unwrap();
            prop_assert_eq!(&prune(0.0), &net);
            let (light, heavy) = (prune(lo), prune(hi));
            prop_assert!(heavy.weight_count() <= light.weight_count());
            prop_assert!(light.weight_count() <= net.weight_count());
            for pruned in [&light, &heavy] {
                for (orig, conv) in net.conv_layers().zip(pruned.conv_layers()) {
                    prop_assert_eq!(&orig.id, &conv.id);
                    prop_assert!(1 <= conv.n && conv.n <= orig.n);
                    prop_assert!(conv.validate().is_ok());
                }
                // the pruned descriptor is itself a valid network
                prop_assert!(pruned.rebuild(pruned.layers().to_vec(), pruned.edges().to_vec()).is_ok());
            }
        }
    }
}

proptest! {
    #![proptest_config(config(16))]

    #[test]
    fn bundled_pruning_is_monotone(level in 0u32..99, name in prop::sample::select(vec!["resnet18", "mobilenetv2", "squeezenet", "mnasnet"])) {
        let net = zoo::bundled(name).unwrap();
        for strategy in strategies(&net) {
            let at = |l: u32| prune_network(&net, &PruneConfig { level: l as f64, strategy: strategy.clone(), seed: 0 }).unwrap();
            prop_assert!(at(level + 1).weight_count() <= at(level).weight_count());
        }
    }
}

fn record() -> impl Strategy<Value = ProfileRecord> {
    let value = 0.0f64..1e7;
    (
        "[a-z][a-z0-9_]{0,11}",
        0u32..100,
        prop::sample::select(vec!["random", "l1approx"]),
        any::<u64>(),
        1u32..1024,
        value.clone(),
        value.clone(),
        prop::option::of((value.clone(), value)),
    )
        .prop_map(|(network, pruning_level, strategy, seed, bs, gamma_mb, phi_ms, small)| ProfileRecord {
            network,
            pruning_level,
            strategy: strategy.into(),
            seed,
            bs,
            gamma_mb,
            phi_ms,
            small_gamma_mb: small.map(|s| s.0),
            small_phi_ms: small.map(|s| s.1),
        })
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn dataset_csv_round_trips(records in prop::collection::vec(record(), 0..20)) {
        let mut buf = Vec::new();
        write_dataset(&mut buf, &records).unwrap();
        prop_assert_eq!(read_dataset(buf.as_slice()).unwrap(), records);
    }
}

fn random_matrix(seed: u64, rows: usize, cols: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = common::rng(seed);
    let x = (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-100.0..100.0)).collect()).collect();
    let y = (0..rows).map(|_| rng.gen_range(0.0..1e3)).collect();
    (x, y)
}

fn names(cols: usize) -> Vec<String> {
    (0..cols).map(|i| format!("x{i}")).collect()
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn forest_training_predictions_ignore_column_order(seed in any::<u64>(), rows in 10usize..80, cols in 2usize..6) {
        let (x, y) = random_matrix(seed, rows, cols);
        let mut perm: Vec<usize> = (0..cols).collect();
        perm.rotate_left(seed as usize % cols);
        perm.swap(0, cols - 1);
        let permuted: Vec<Vec<f64>> = x.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
        // every tree sees every row, so equal-gain splits on different
        // columns still induce the same partition of each row
        let cfg = ForestConfig { n_trees: 4, bootstrap: false, seed, ..ForestConfig::default() };
        let a = Forest::fit(&x, &y, names(cols), "y", &cfg).unwrap();
        let b = Forest::fit(&permuted, &y, names(cols), "y", &cfg).unwrap();
        for (r, p) in x.iter().zip(&permuted) {
            prop_assert_eq!(a.predict(r).unwrap(), b.predict(p).unwrap());
        }
    }

    #[test]
    fn forest_predictions_stay_in_target_range(seed in any::<u64>(), log_target in any::<bool>()) {
        let (x, y) = random_matrix(seed, 60, 4);
        let cfg = ForestConfig { n_trees: 10, seed, log_target, ..ForestConfig::default() };
        let forest = Forest::fit(&x, &y, names(4), "y", &cfg).unwrap();
        let (lo, hi) = forest.target_range();
        let mut rng = common::rng(seed ^ 1);
        for _ in 0..200 {
            let probe: Vec<f64> = (0..4).map(|_| rng.gen_range(-1e6..1e6)).collect();
            let p = forest.predict(&probe).unwrap();
            prop_assert!(lo <= p && p <= hi);
        }
    }

    #[test]
    fn interpolating_forest_survives_superset_training(seed in any::<u64>(), rows in 2usize..60, extra in 0usize..40) {
        let (x, y) = random_matrix(seed, rows + extra, 3);
        let cfg = ForestConfig::interpolating();
        let sub = Forest::fit(&x[..rows], &y[..rows], names(3), "y", &cfg).unwrap();
        let sup = Forest::fit(&x, &y, names(3), "y", &cfg).unwrap();
        for (r, t) in x[..rows].iter().zip(&y[..rows]) {
            prop_assert_eq!(sub.predict(r).unwrap(), *t);
            prop_assert_eq!(sup.predict(r).unwrap(), *t);
        }
    }
}

fn exact_device() -> SyntheticDevice {
    SyntheticDevice { noise: [0.0; 4], ..SyntheticDevice::default() }
}

fn width_sum(encoding: &[usize], _: &NetworkSpec) -> f64 {
    encoding.iter().map(|&c| c as f64).sum()
}

proptest! {
    #![proptest_config(config(12))]

    #[test]
    fn search_log_monotone_and_deterministic(seed in any::<u64>(), bound in 1520.0f64..1560.0) {
        let space = common::chain_space(4);
        let constraints = Constraints { max_gamma_mb: Some(bound), ..Constraints::default() };
        let cfg = EsConfig { population: 12, iterations: 15, seed, ..EsConfig::default() };
        let device = exact_device();
        let run = || evolve(&space, &constraints, &device, &width_sum, &cfg);
        let (Ok(first), Ok(second)) = (run(), run()) else {
            // every candidate infeasible is a valid outcome at tight bounds
            prop_assert!(space.encodings().all(|e| !constraints.is_satisfied(&space.decode(&e).unwrap(), &device).unwrap()));
            return Ok(());
        };
        prop_assert_eq!(&first, &second);
        prop_assert_eq!(first.log.len(), 16);
        for pair in first.log.windows(2) {
            prop_assert!(pair[0].best_fitness <= pair[1].best_fitness);
            prop_assert!(pair[0].evaluated_total <= pair[1].evaluated_total);
        }
        prop_assert!(first.evaluated_total >= cfg.min_evaluations());
        prop_assert!(constraints.is_satisfied(&space.decode(&first.best.encoding).unwrap(), &device).unwrap());
    }

    #[test]
    fn tighter_constraints_never_raise_the_optimum(seed in any::<u64>(), a in 1500.0f64..1600.0, b in 1500.0f64..1600.0) {
        let space = common::chain_space(3);
        let device = exact_device();
        let optimum = |bound: f64| {
            let c = Constraints { max_gamma_mb: Some(bound), ..Constraints::default() };
            space
                .encodings()
                .filter(|e| c.is_satisfied(&space.decode(e).unwrap(), &device).unwrap())
                .map(|e| width_sum(&e, space.base()))
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let (tight, loose) = (a.min(b), a.max(b));
        prop_assert!(optimum(tight) <= optimum(loose));
        let c = Constraints { max_gamma_mb: Some(tight), ..Constraints::default() };
        let cfg = EsConfig { population: 10, iterations: 10, seed, ..EsConfig::default() };
        if let Ok(out) = evolve(&space, &c, &device, &width_sum, &cfg) {
            prop_assert!(out.best.fitness <= optimum(tight));
        }
    }
}

/// Feasible iff the first conv keeps at most half its filters: exactly half
/// of every chain space.
struct HalfFeasible;

impl AttributePredictor for HalfFeasible {
    fn attributes(&self) -> Vec<Attribute> {
        vec![Attribute::Gamma]
    }

    fn predict(&self, _: Attribute, net: &NetworkSpec, _: u32) -> Result<f64, PredictorError> {
        Ok(if net.conv_layers().next().unwrap().n <= 16 { 1.0 } else { 3.0 })
    }
}

proptest! {
    #![proptest_config(config(8))]

    #[test]
    fn rejection_sampling_acceptance_rate(seed in any::<u64>()) {
        let space = common::chain_space(3);
        let constraints = Constraints { max_gamma_mb: Some(2.0), ..Constraints::default() };
        let mut rng = common::rng(seed);
        let mut rejections = 0;
        for _ in 0..1000 {
            let s = sample_feasible(&space, &constraints, &HalfFeasible, &mut rng, 10_000).unwrap();
            prop_assert!(s.net.conv_layers().next().unwrap().n <= 16);
            rejections += s.rejections;
        }
        let rate = 1000.0 / (1000 + rejections) as f64;
        prop_assert!((rate - 0.5).abs() <= 0.05, "acceptance rate {}", rate);
    }
}
