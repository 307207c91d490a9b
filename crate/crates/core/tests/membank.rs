use forgekey_core::membank::{self, ExemplarMemory};
use forgekey_core::nncore::Tensor;
use forgekey_core::Error;
use proptest::prelude::*;

fn unit(v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
    v.into_iter().map(|x| x / n).collect()
}

fn bank(keys: &[Vec<f32>], live: Vec<bool>) -> ExemplarMemory {
    let d = keys[0].len();
    let n = keys.len();
    let ids: Vec<u64> = (0..n as u64).map(|i| i * 3 + 7).collect();
    ExemplarMemory::from_parts(ids, keys.concat(), d, Tensor::matrix(n, 2, vec![0.0; n * 2]).unwrap(), live).unwrap()
}

/// Full scan, full sort: similarity descending, id ascending.
fn oracle(mem: &ExemplarMemory, q: &[f32], k: usize, exclude: Option<u64>) -> Vec<u64> {
    let mut all: Vec<(f64, u64)> = (0..mem.len())
        .filter(|&i| mem.live_flags()[i] && Some(mem.ids()[i]) != exclude)
        .map(|i| {
            let dot: f64 = q.iter().zip(mem.key(i)).map(|(a, b)| *a as f64 * *b as f64).sum();
            (dot.clamp(-1.0, 1.0), mem.ids()[i])
        })
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, id)| id).collect()
}

fn keys_strategy(max_n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    // Coarse coordinates produce exact similarity ties now and then.
    prop::collection::vec(prop::collection::vec((-2i8..=2).prop_map(f32::from), d), 1..max_n)
        .prop_map(|ks| ks.into_iter().map(|k| unit(k.into_iter().map(|x| if x == 0.0 { 0.5 } else { x }).collect())).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn retrieve_matches_exhaustive_scan(
        keys in keys_strategy(60, 4),
        q in prop::collection::vec(-1.0f32..1.0, 4),
        k in 1usize..12,
        dead in prop::collection::vec(any::<bool>(), 60),
    ) {
        let live: Vec<bool> = (0..keys.len()).map(|i| !dead[i] || i == 0).collect();
        let mem = bank(&keys, live);
        let q = unit(q);
        let got = mem.retrieve(&q, k, None).unwrap();
        prop_assert_eq!(got.ids(), oracle(&mem, &q, k, None));
        let excluded = mem.ids()[0];
        match mem.retrieve(&q, k, Some(excluded)) {
            Ok(got) => prop_assert_eq!(got.ids(), oracle(&mem, &q, k, Some(excluded))),
            Err(Error::EmptyMemory) => prop_assert_eq!(mem.live_count(), 1),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        }
    }

    #[test]
    fn deletion_is_local(
        keys in keys_strategy(40, 3),
        queries in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 3), 1..20),
        k in 1usize..5,
        pick in prop::collection::vec(any::<bool>(), 40),
    ) {
        let n = keys.len();
        let mut mem = bank(&keys, vec![true; n]);
        let before: Vec<Vec<u64>> = queries.iter().map(|q| mem.retrieve(&unit(q.clone()), k, None).unwrap().ids()).collect();
        let forget: Vec<u64> = (1..n).filter(|&i| pick[i]).map(|i| mem.ids()[i]).collect();
        let removed = mem.delete(&forget).unwrap();
        prop_assert_eq!(removed, forget.len());
        prop_assert_eq!(mem.live_count(), n - forget.len());
        for (q, b) in queries.iter().zip(&before) {
            let after = mem.retrieve(&unit(q.clone()), k, None).unwrap().ids();
            prop_assert!(after.iter().all(|id| !forget.contains(id)));
            if b.iter().all(|id| !forget.contains(id)) {
                prop_assert_eq!(&after, b);
            }
        }
    }

    #[test]
    fn softmax_weights_form_a_distribution(
        sims in prop::collection::vec(-1.0f64..1.0, 1..20),
        tau in 0.01f64..2.0,
    ) {
        let w = membank::softmax_weights(&sims, tau).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..sims.len() {
            for j in 0..sims.len() {
                if sims[i] > sims[j] {
                    prop_assert!(w[i] >= w[j]);
                }
            }
        }
    }

    #[test]
    fn aggregate_stays_in_hull(
        values in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 3), 1..8),
        raw in prop::collection::vec(0.01f64..1.0, 8),
    ) {
        let total: f64 = raw[..values.len()].iter().sum();
        let w: Vec<f64> = raw[..values.len()].iter().map(|x| x / total).collect();
        let refs: Vec<&[f32]> = values.iter().map(Vec::as_slice).collect();
        let agg = membank::aggregate(&refs, &w).unwrap();
        for c in 0..3 {
            let lo = values.iter().map(|v| v[c]).fold(f32::INFINITY, f32::min);
            let hi = values.iter().map(|v| v[c]).fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(agg[c] >= lo && agg[c] <= hi);
        }
    }
}

#[test]
fn rank_weights_values() {
    let w = membank::rank_weights(4).unwrap();
    assert_eq!(w, vec![0.4, 0.3, 0.2, 0.1]);
    for k in 1..40 {
        let w = membank::rank_weights(k).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.windows(2).all(|p| p[0] > p[1]));
    }
    assert!(matches!(membank::rank_weights(0), Err(Error::Config(_))));
}

#[test]
fn softmax_weight_hand_case() {
    // exp(0) and exp(-1) normalized.
    let w = membank::softmax_weights(&[0.5, 0.4], 0.1).unwrap();
    let e = (-1.0f64).exp();
    assert!((w[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
    assert!((w[1] - e / (1.0 + e)).abs() < 1e-15);
}

#[test]
fn dead_ids_never_returned_even_when_closest() {
    let keys = vec![unit(vec![1.0, 0.0]), unit(vec![0.9, 0.1]), unit(vec![0.0, 1.0])];
    let mut mem = bank(&keys, vec![true; 3]);
    let first = mem.ids()[0];
    mem.delete(&[first]).unwrap();
    let got = mem.retrieve(&keys[0], 3, None).unwrap();
    assert_eq!(got.ids(), vec![mem.ids()[1], mem.ids()[2]]);
}
