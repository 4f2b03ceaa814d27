use std::collections::BTreeSet;

use factorized_fl::data::{
    build_partitions, contiguous_domains, holdout_split, permute_labels, split_dirichlet, split_iid, Dataset, Scenario,
    ScenarioSpec, Split,
};
use factorized_fl::Tensor;
use proptest::prelude::*;

fn toy(per_class: usize, classes: usize) -> Dataset {
    let n = per_class * classes;
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let x = Tensor::from_fn(&[n, 2, 2, 1], |i| i as f64);
    Dataset::new(x, labels, classes, "toy").unwrap()
}

fn covers_exactly(parts: &[Vec<usize>], n: usize) -> bool {
    let mut seen = vec![false; n];
    for p in parts {
        for &i in p {
            if seen[i] {
                return false;
            }
            seen[i] = true;
        }
    }
    seen.into_iter().all(|s| s)
}

proptest! {
    #[test]
    fn iid_split_is_a_balanced_partition(per_class in 1usize..30, classes in 1usize..8, k in 1usize..10, seed in any::<u64>()) {
        let d = toy(per_class, classes);
        prop_assume!(k <= d.len());
        let parts = split_iid(&d, k, seed).unwrap();
        let trains: Vec<Vec<usize>> = parts.iter().map(|p| p.train.clone()).collect();
        prop_assert!(covers_exactly(&trains, d.len()));
        let sizes: Vec<usize> = trains.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn dirichlet_split_covers_and_leaves_nobody_empty(
        per_class in 3usize..20,
        classes in 2usize..6,
        k in 1usize..6,
        alpha in 0.05f64..5.0,
        seed in any::<u64>(),
    ) {
        let d = toy(per_class, classes);
        let parts = split_dirichlet(&d, k, alpha, seed).unwrap();
        let trains: Vec<Vec<usize>> = parts.iter().map(|p| p.train.clone()).collect();
        prop_assert!(covers_exactly(&trains, d.len()));
        prop_assert!(trains.iter().all(|t| !t.is_empty()));
    }

    #[test]
    fn holdout_is_stratified_and_disjoint(per_class in 10usize..40, classes in 1usize..5, seed in any::<u64>()) {
        let d = toy(per_class, classes);
        let h = holdout_split(&d, 0.1, 0.1, seed).unwrap();
        prop_assert!(covers_exactly(&[h.train.clone(), h.val.clone(), h.test.clone()], d.len()));
        let nv = (per_class as f64 * 0.1).round() as usize;
        for c in 0..classes {
            prop_assert_eq!(h.val.iter().filter(|&&i| d.labels[i] == c).count(), nv);
        }
    }

    #[test]
    fn permutation_is_a_bijection(classes in 1usize..12, seed in any::<u64>(), id in 0usize..50) {
        let d = toy(2, classes);
        let p = split_iid(&d, 1, 0).unwrap().remove(0);
        let q = permute_labels(&p, seed, id).unwrap();
        let set: BTreeSet<usize> = q.permutation.iter().copied().collect();
        prop_assert_eq!(set.len(), classes);
        prop_assert!(q.permutation.iter().all(|&l| l < classes));
        let again = permute_labels(&p, seed, id).unwrap();
        prop_assert_eq!(q.permutation, again.permutation);
    }
}

fn spec(scenario: Scenario, clients: usize) -> ScenarioSpec {
    ScenarioSpec {
        scenario,
        clients,
        dirichlet_alpha: 0.5,
        domains: Vec::new(),
        val_fraction: 0.1,
        test_fraction: 0.1,
    }
}

#[test]
fn scenarios_never_leak_evaluation_examples_into_training() {
    let d = toy(50, 4);
    let mut specs = vec![
        spec(Scenario::StandardIid, 4),
        spec(Scenario::PermutedIid, 4),
        spec(Scenario::StandardNoniid, 4),
        spec(Scenario::PermutedNoniid, 4),
    ];
    let mut dom = spec(Scenario::DomainHetero, 0);
    dom.domains = contiguous_domains(4, 2, 2).unwrap();
    specs.push(dom);
    for s in specs {
        let parts = build_partitions(&d, &s, 9).unwrap();
        let train: BTreeSet<usize> = parts.iter().flat_map(|p| p.train.iter().copied()).collect();
        for p in &parts {
            for &i in p.val.iter().chain(&p.test) {
                assert!(!train.contains(&i), "{:?}: index {i} is both train and eval", s.scenario);
            }
            assert!(!p.train.is_empty());
            for split in [Split::Train, Split::Val, Split::Test] {
                let t = p.materialize(&d, split).unwrap();
                assert!(t.y.iter().all(|&y| y < p.class_count()));
            }
        }
        let permuted = parts.iter().any(|p| !p.has_identity_permutation());
        assert_eq!(permuted, s.scenario.is_permuted(), "{:?}", s.scenario);
    }
}

#[test]
fn domain_clients_only_see_their_classes() {
    let d = toy(30, 6);
    let mut s = spec(Scenario::DomainHetero, 0);
    s.domains = contiguous_domains(6, 3, 2).unwrap();
    let parts = build_partitions(&d, &s, 1).unwrap();
    assert_eq!(parts.len(), 6);
    for p in &parts {
        let g = p.domain.unwrap();
        assert_eq!(p.classes, s.domains[g].classes);
        for &i in p.train.iter().chain(&p.val).chain(&p.test) {
            assert!(p.classes.contains(&d.labels[i]));
        }
    }
}

#[test]
fn small_alpha_concentrates_classes() {
    let d = toy(200, 5);
    let spread = |alpha: f64| {
        let parts = split_dirichlet(&d, 5, alpha, 3).unwrap();
        let mut distinct = 0;
        for p in &parts {
            let set: BTreeSet<usize> = p.train.iter().map(|&i| d.labels[i]).collect();
            distinct += set.len();
        }
        distinct
    };
    assert!(spread(0.05) < spread(100.0));
}
