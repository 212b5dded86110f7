use pfedpt_core::data::{partition, ClientShard, PartitionConfig, PartitionScheme};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn labels(n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| i % classes).collect()
}

fn assert_disjoint_cover(shards: &[ClientShard], n_train: usize, n_test: usize) {
    for (pick, n) in [(0, n_train), (1, n_test)] {
        let mut seen = vec![false; n];
        for s in shards {
            for &i in if pick == 0 { &s.train } else { &s.test } {
                assert!(!seen[i], "index {i} assigned twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&b| b), "some index unassigned");
    }
}

const SCHEMES: [PartitionScheme; 3] = [PartitionScheme::Iid, PartitionScheme::Dirichlet, PartitionScheme::Pathological];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_scheme_is_a_disjoint_cover(
        scheme in 0usize..3,
        clients in 2usize..12,
        seed in any::<u64>(),
        alpha in 0.1f64..5.0,
    ) {
        let train = labels(3000, 10);
        let test = labels(600, 10);
        let mut cfg = PartitionConfig::new(SCHEMES[scheme], clients, seed);
        cfg.alpha = alpha;
        cfg.min_samples = 1;
        let shards = partition(&train, &test, 10, &cfg).unwrap();
        prop_assert_eq!(shards.len(), clients);
        assert_disjoint_cover(&shards, train.len(), test.len());
        for s in &shards {
            let mut h = vec![0; 10];
            for &i in &s.train {
                h[train[i]] += 1;
            }
            prop_assert_eq!(&h, &s.label_histogram);
        }
        prop_assert_eq!(&shards, &partition(&train, &test, 10, &cfg).unwrap());
    }
}

#[test]
fn pathological_shards_hold_exactly_five_classes() {
    let train = labels(50_000, 10);
    let test = labels(10_000, 10);
    for clients in [10, 50] {
        for seed in 0..5 {
            let cfg = PartitionConfig::new(PartitionScheme::Pathological, clients, seed);
            let shards = partition(&train, &test, 10, &cfg).unwrap();
            for s in &shards {
                assert_eq!(s.label_histogram.iter().filter(|&&c| c > 0).count(), 5);
                // held classes split evenly between holders
                let held: Vec<usize> = s.label_histogram.iter().copied().filter(|&c| c > 0).collect();
                let expected = 5000 * 10 / (clients * 5);
                assert!(held.iter().all(|&c| c.abs_diff(expected) <= 1), "{held:?}");
            }
        }
    }
}

#[test]
fn iid_shards_have_equal_sizes() {
    let cfg = PartitionConfig::new(PartitionScheme::Iid, 50, 4);
    let shards = partition(&labels(50_000, 10), &labels(10_000, 10), 10, &cfg).unwrap();
    assert!(shards.iter().all(|s| s.train.len() == 1000));
    // test shards are apportioned class by class, so sizes are only near-equal
    assert!(shards.iter().all(|s| s.test.len().abs_diff(200) <= 10));
    assert_eq!(shards.iter().map(|s| s.test.len()).sum::<usize>(), 10_000);
}

#[test]
fn test_shards_follow_train_proportions() {
    let train = labels(50_000, 10);
    let test = labels(10_000, 10);
    let mut checked = 0;
    for scheme in SCHEMES {
        for seed in 0..3 {
            let cfg = PartitionConfig::new(scheme, 10, seed);
            for s in partition(&train, &test, 10, &cfg).unwrap() {
                if s.test.len() < 200 {
                    continue;
                }
                let th = s.test_histogram(&test);
                let n = s.test.len() as f64;
                let (mut stat, mut cells) = (0.0, 0usize);
                for (c, &tr) in s.label_histogram.iter().enumerate() {
                    let expected = tr as f64 / s.train.len() as f64 * n;
                    if expected > 0.0 {
                        stat += (th[c] as f64 - expected).powi(2) / expected;
                        cells += 1;
                    } else {
                        assert_eq!(th[c], 0, "test class absent from train");
                    }
                }
                if cells < 2 {
                    continue;
                }
                let p = 1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(stat);
                assert!(p > 0.01, "{scheme} seed {seed} client {}: p = {p}", s.client_id);
                checked += 1;
            }
        }
    }
    assert!(checked > 50);
}

fn max_deviation_from_uniform(shards: &[ClientShard]) -> f64 {
    shards
        .iter()
        .flat_map(|s| s.label_distribution())
        .map(|p| (p - 0.1).abs())
        .fold(0.0, f64::max)
}

#[test]
fn dirichlet_heterogeneity_shrinks_with_alpha() {
    let train = labels(20_000, 10);
    let test = labels(2_000, 10);
    let means: Vec<f64> = [0.1, 1.0, 10.0, 1000.0]
        .iter()
        .map(|&alpha| {
            let total: f64 = (0..20)
                .map(|seed| {
                    let mut cfg = PartitionConfig::new(PartitionScheme::Dirichlet, 10, seed);
                    cfg.alpha = alpha;
                    max_deviation_from_uniform(&partition(&train, &test, 10, &cfg).unwrap())
                })
                .sum();
            total / 20.0
        })
        .collect();
    assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
    assert!(means[3] < 0.05, "{means:?}");
}

#[test]
fn config_errors_surface() {
    let train = labels(100, 10);
    let mut cfg = PartitionConfig::new(PartitionScheme::Dirichlet, 5, 0);
    cfg.alpha = 0.0;
    let err = partition(&train, &train, 10, &cfg).unwrap_err().to_string();
    assert!(err.contains("alpha must be positive"), "{err}");
    let cfg = PartitionConfig::new(PartitionScheme::Iid, 20, 0);
    assert!(partition(&train, &train, 10, &cfg).is_err());
}
