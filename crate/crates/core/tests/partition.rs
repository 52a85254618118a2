use proptest::prelude::*;
use std::collections::BTreeSet;
use tlrate_core::data::{
    gen_synthetic_domain, images_per_label, partition_domain, split_train_val, Example,
    LabeledDataset, SyntheticDomainSpec,
};
use tlrate_core::{Error, Tensor};

fn tagged(counts: &[usize]) -> LabeledDataset {
    let mut examples = Vec::new();
    let mut id = 0.0;
    for (label, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            examples.push(Example {
                features: Tensor::new(vec![1], vec![id]).unwrap(),
                label,
            });
            id += 1.0;
        }
    }
    let names = (0..counts.len()).map(|l| format!("l{l}")).collect();
    LabeledDataset::new("tagged", names, examples).unwrap()
}

fn ids(ds: &LabeledDataset) -> Vec<u64> {
    ds.examples
        .iter()
        .map(|e| e.features.data()[0] as u64)
        .collect()
}

proptest! {
    #[test]
    fn partition_is_a_stratified_cover(counts in prop::collection::vec(4usize..40, 2..6), seed: u64) {
        let ds = tagged(&counts);
        let p = partition_domain(&ds, seed).unwrap();
        let parts = [&p.source_train, &p.val_source, &p.val_target, &p.transfer_pool];
        let mut seen = BTreeSet::new();
        for part in parts {
            for id in ids(part) {
                prop_assert!(seen.insert(id), "duplicate {id}");
            }
        }
        prop_assert_eq!(seen.len(), ds.len());
        for label in 0..counts.len() {
            let sizes: Vec<usize> = parts.iter().map(|d| d.label_counts()[label]).collect();
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            prop_assert!(hi - lo <= 1, "label {label}: {sizes:?}");
            prop_assert!(p.target.label_counts()[label] >= 1);
        }
        let pool: BTreeSet<u64> = ids(&p.transfer_pool).into_iter().collect();
        prop_assert!(ids(&p.target).iter().all(|i| pool.contains(i)));
        prop_assert!(p.target.len() <= (p.transfer_pool.len() / 10).max(counts.len()));
    }

    #[test]
    fn split_keeps_labels_on_both_sides(counts in prop::collection::vec(2usize..30, 2..5), seed: u64) {
        let ds = tagged(&counts);
        let (tr, va) = split_train_val(&ds, 0.5, seed).unwrap();
        prop_assert_eq!(tr.len() + va.len(), ds.len());
        prop_assert!(tr.label_counts().iter().all(|&c| c > 0));
        prop_assert!(va.label_counts().iter().all(|&c| c > 0));
        let a: BTreeSet<u64> = ids(&tr).into_iter().collect();
        prop_assert!(ids(&va).iter().all(|i| !a.contains(i)));
    }
}

#[test]
fn partition_is_seeded() {
    let ds = tagged(&[20, 13, 9]);
    let a = partition_domain(&ds, 5).unwrap();
    let b = partition_domain(&ds, 5).unwrap();
    let c = partition_domain(&ds, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(ids(&a.source_train), ids(&c.source_train));
}

#[test]
fn tiny_domain_keeps_one_target_per_label() {
    let p = partition_domain(&tagged(&[4, 4]), 0).unwrap();
    assert_eq!(p.transfer_pool.len(), 2);
    assert_eq!(p.target.label_counts(), vec![1, 1]);
}

#[test]
fn missing_label_is_rejected() {
    let ex = vec![Example {
        features: Tensor::new(vec![1], vec![0.0]).unwrap(),
        label: 0,
    }];
    let err = LabeledDataset::new("d", vec!["a".into(), "b".into()], ex).unwrap_err();
    assert!(matches!(err, Error::TooFewExamples { .. }), "{err:?}");
}

#[test]
fn images_per_label_of_a_generated_domain() {
    let ds = gen_synthetic_domain(&SyntheticDomainSpec::new("t", 5, 12, 0.3, 1)).unwrap();
    assert_eq!(images_per_label(&ds).unwrap(), 12.0);
}

#[test]
fn generation_is_a_pure_function_of_spec() {
    let spec = SyntheticDomainSpec::new("t", 3, 6, 0.7, 42);
    assert_eq!(
        gen_synthetic_domain(&spec).unwrap(),
        gen_synthetic_domain(&spec).unwrap()
    );
    let other = SyntheticDomainSpec {
        seed: 43,
        ..spec.clone()
    };
    assert_ne!(
        gen_synthetic_domain(&spec).unwrap(),
        gen_synthetic_domain(&other).unwrap()
    );
}

fn centroids(ds: &LabeledDataset) -> Vec<Vec<f64>> {
    let dim = ds.examples[0].features.len();
    let mut sums = vec![vec![0.0; dim]; ds.num_labels()];
    for e in &ds.examples {
        for (s, v) in sums[e.label].iter_mut().zip(e.features.data()) {
            *s += v;
        }
    }
    for (s, n) in sums.iter_mut().zip(ds.label_counts()) {
        s.iter_mut().for_each(|v| *v /= n as f64);
    }
    sums
}

fn centroid_probe(probe: &[Vec<f64>], ds: &LabeledDataset) -> f64 {
    let hits = ds
        .examples
        .iter()
        .filter(|e| {
            let d = |c: &Vec<f64>| {
                c.iter()
                    .zip(e.features.data())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
            };
            let best = (0..probe.len())
                .min_by(|&a, &b| d(&probe[a]).total_cmp(&d(&probe[b])))
                .unwrap();
            best == e.label
        })
        .count();
    hits as f64 / ds.len() as f64
}

fn cross_domain_probe(rho: f64) -> f64 {
    let spec = |name: &str, seed| SyntheticDomainSpec {
        max_shift: 0,
        ..SyntheticDomainSpec::new(name, 8, 60, rho, seed)
    };
    let source = gen_synthetic_domain(&spec("src", 1)).unwrap();
    let target = gen_synthetic_domain(&spec("tgt", 2)).unwrap();
    centroid_probe(&centroids(&source), &target)
}

#[test]
fn related_domains_share_label_structure() {
    let chance = 1.0 / 8.0;
    let near = cross_domain_probe(0.9);
    let far = cross_domain_probe(0.0);
    assert!(near > 3.0 * chance, "related probe {near}");
    assert!(far < near - 0.2, "unrelated probe {far} vs {near}");
}
