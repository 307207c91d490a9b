use std::collections::{BTreeSet, HashMap};

use forgekey_core::datagen::{generate, sample_forget, Dataset, Split, SyntheticSpec};
use proptest::prelude::*;

fn desk_2000(seed: u64) -> Dataset {
    generate(&SyntheticSpec { samples_per_class: 800, train_permille: 625, val_permille: 125, seed, ..SyntheticSpec::default() })
        .unwrap()
}

fn per_class(data: &Dataset, ids: &[u64]) -> HashMap<usize, usize> {
    let mut m = HashMap::new();
    for &id in ids {
        *m.entry(data.label(id).unwrap()).or_default() += 1;
    }
    m
}

#[test]
fn ten_and_two_percent_of_two_thousand() {
    let data = desk_2000(0);
    assert_eq!(data.split_ids(Split::Train).len(), 2000);
    let f = sample_forget(&data, 0.1, true, 0).unwrap();
    assert_eq!(f.len(), 200);
    assert!(per_class(&data, &f).values().all(|&c| c == 50));
    assert_eq!(sample_forget(&data, 0.02, true, 0).unwrap().len(), 40);
    assert_eq!(sample_forget(&data, 0.02, false, 0).unwrap().len(), 40);
    assert_eq!(f, sample_forget(&data, 0.1, true, 0).unwrap());
    assert_ne!(f, sample_forget(&data, 0.1, true, 1).unwrap());
}

#[test]
fn splits_never_leak() {
    let data = desk_2000(3);
    let mut seen = BTreeSet::new();
    let mut total = 0;
    for s in [Split::Train, Split::Val, Split::Test] {
        let ids = data.split_ids(s);
        total += ids.len();
        for id in ids {
            assert!(seen.insert(id), "id {id} in two splits");
        }
    }
    assert_eq!(total, data.len());
    // Each split is stratified by class.
    for s in [Split::Train, Split::Val, Split::Test] {
        let counts = per_class(&data, &data.split_ids(s));
        let v: Vec<usize> = counts.values().copied().collect();
        assert!(v.iter().max().unwrap() - v.iter().min().unwrap() <= 1, "{s:?} {counts:?}");
    }
}

fn skewed(class_sizes: &[usize]) -> Dataset {
    let mut labels = Vec::new();
    for (c, &n) in class_sizes.iter().enumerate() {
        labels.extend(std::iter::repeat(c).take(n));
    }
    let n = labels.len();
    Dataset::new(class_sizes.len(), 1, 1, (0..n as u64).map(|i| i * 7 + 1).collect(), vec![0.0; n], labels, vec![Split::Train; n])
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forget_and_retain_partition_train(
        sizes in prop::collection::vec(1usize..60, 1..6),
        rate in 0.05f64..0.9,
        stratified in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let data = skewed(&sizes);
        let train = data.split_ids(Split::Train);
        let forget = match sample_forget(&data, rate, stratified, seed) {
            Ok(f) => f,
            Err(_) => {
                prop_assert_eq!((rate * train.len() as f64 + 1e-9).floor() as usize, 0);
                return Ok(());
            }
        };
        prop_assert_eq!(forget.len(), (rate * train.len() as f64 + 1e-9).floor() as usize);
        let fset: BTreeSet<u64> = forget.iter().copied().collect();
        prop_assert_eq!(fset.len(), forget.len());
        let retain: Vec<u64> = train.iter().copied().filter(|id| !fset.contains(id)).collect();
        prop_assert_eq!(retain.len() + forget.len(), train.len());
        prop_assert!(forget.iter().all(|id| train.contains(id)));

        if stratified {
            let counts = per_class(&data, &forget);
            for (c, &n) in sizes.iter().enumerate() {
                let exact = forget.len() as f64 * n as f64 / train.len() as f64;
                let got = *counts.get(&c).unwrap_or(&0) as f64;
                prop_assert!((got - exact).abs() <= 1.0, "class {} got {} want {}", c, got, exact);
            }
        }
    }
}

#[test]
fn import_rebuilds_the_same_dataset() {
    let data = generate(&SyntheticSpec { samples_per_class: 12, seed: 5, ..SyntheticSpec::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.export(dir.path()).unwrap();
    assert_eq!(Dataset::import(dir.path()).unwrap(), data);
}
