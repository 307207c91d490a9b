use forgekey_core::backbone::{BackboneConfig, BackboneParams, PathwayMask};
use forgekey_core::inference::{predict, predict_batch, FusionStrategy, StrategyKind};
use forgekey_core::membank::{ExemplarMemory, KeyEncoder};
use forgekey_core::nncore::Tensor;
use forgekey_core::rng::{self, Stream};
use forgekey_core::Error;

struct Fixture {
    params: BackboneParams<f32>,
    encoder: KeyEncoder,
    memory: ExemplarMemory,
    queries: Vec<Vec<f32>>,
}

fn config() -> BackboneConfig {
    BackboneConfig { layers: 2, ..BackboneConfig::desk() }
}

fn fixture(entries: usize, queries: usize, seed: u64) -> Fixture {
    let cfg = config();
    let mut r = rng::stream(seed, Stream::Data);
    let images: Vec<Vec<f32>> = (0..entries).map(|_| rng::gaussian_vec(&mut r, cfg.pixels(), 1.0)).collect();
    let encoder = KeyEncoder::fit(images.iter().map(Vec::as_slice), cfg.channels, cfg.key_dim, seed).unwrap();
    let mut memory = ExemplarMemory::build(
        images.iter().enumerate().map(|(i, im)| (i as u64 * 10, im.as_slice())),
        &encoder,
        cfg.token_dim,
        seed,
    )
    .unwrap();
    // Tokens large enough to move the logits.
    let big = rng::gaussian_vec(&mut r, entries * cfg.token_dim, 1.0);
    memory.values_mut().data_mut().copy_from_slice(&big);
    let queries = (0..queries).map(|_| rng::gaussian_vec(&mut r, cfg.pixels(), 1.0)).collect();
    Fixture { params: BackboneParams::init(&cfg, seed).unwrap(), encoder, memory, queries }
}

fn strategy(kind: StrategyKind, k: usize) -> FusionStrategy {
    FusionStrategy { kind, k, tau: 0.07 }
}

#[test]
fn strategies_coincide_at_k1() {
    let f = fixture(30, 20, 1);
    for q in &f.queries {
        let run = |kind| predict(q, &f.params, &f.encoder, &f.memory, &strategy(kind, 1)).unwrap();
        let e = run(StrategyKind::Ensemble);
        let s = run(StrategyKind::SoftmaxToken);
        let r = run(StrategyKind::RankToken);
        assert_eq!(e.logits, s.logits);
        assert_eq!(e.logits, r.logits);
        assert_eq!(e.weights, vec![1.0]);
    }
}

#[test]
fn duplicated_nearest_entry_collapses_ensemble() {
    let f = fixture(20, 1, 2);
    let q = &f.queries[0];
    let key = f.encoder.encode(q).unwrap();
    let m = f.memory.token_dim();
    let token: Vec<f32> = rng::gaussian_vec(&mut rng::stream(3, Stream::Data), m, 1.0);
    // Two entries holding the query's own key and the same token.
    let mut keys = f.memory.keys().to_vec();
    keys.extend_from_slice(&key);
    keys.extend_from_slice(&key);
    let mut values = f.memory.values().data().to_vec();
    values.extend_from_slice(&token);
    values.extend_from_slice(&token);
    let mut ids = f.memory.ids().to_vec();
    ids.extend([1_000_001, 1_000_002]);
    let n = ids.len();
    let mem = ExemplarMemory::from_parts(ids, keys, f.memory.key_dim(), Tensor::matrix(n, m, values).unwrap(), vec![true; n])
        .unwrap();

    let p = predict(q, &f.params, &f.encoder, &mem, &strategy(StrategyKind::Ensemble, 2)).unwrap();
    assert_eq!(p.neighbors, vec![1_000_001, 1_000_002]);
    let single = f.params.logits_with_tokens(q, &[&token], PathwayMask::BOTH).unwrap();
    assert_eq!(p.logits, single[0]);
}

/// Straight-line `sum_j w_j f(z_q, h(v_j))` with weights computed here.
#[test]
fn ensemble_matches_explicit_loop() {
    let f = fixture(50, 20, 4);
    let tau = 0.07;
    for q in &f.queries {
        let p = predict(q, &f.params, &f.encoder, &f.memory, &strategy(StrategyKind::Ensemble, 4)).unwrap();
        let key = f.encoder.encode(q).unwrap();
        let mut sims: Vec<(f64, u64, usize)> = (0..f.memory.len())
            .map(|i| {
                let s: f64 = key.iter().zip(f.memory.key(i)).map(|(a, b)| *a as f64 * *b as f64).sum();
                (s, f.memory.ids()[i], i)
            })
            .collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let top = &sims[..4];
        let z: f64 = top.iter().map(|t| ((t.0 - top[0].0) / tau).exp()).sum();
        let mut want = vec![0f64; f.params.config.classes];
        for t in top {
            let w = ((t.0 - top[0].0) / tau).exp() / z;
            let l = f.params.logits_with_tokens(q, &[f.memory.value(t.2)], PathwayMask::BOTH).unwrap();
            want.iter_mut().zip(&l[0]).for_each(|(a, x)| *a += w * *x as f64);
        }
        for (a, b) in p.logits.iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
        }
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn ensemble_lies_in_convex_hull() {
    let f = fixture(40, 25, 5);
    for q in &f.queries {
        let p = predict(q, &f.params, &f.encoder, &f.memory, &strategy(StrategyKind::Ensemble, 4)).unwrap();
        let tokens: Vec<&[f32]> =
            p.neighbors.iter().map(|&id| f.memory.value(f.memory.index_of(id).unwrap())).collect();
        let per = f.params.logits_with_tokens(q, &tokens, PathwayMask::BOTH).unwrap();
        for c in 0..p.logits.len() {
            let lo = per.iter().map(|l| l[c]).fold(f32::INFINITY, f32::min);
            let hi = per.iter().map(|l| l[c]).fold(f32::NEG_INFINITY, f32::max);
            assert!(lo <= p.logits[c] && p.logits[c] <= hi);
        }
    }
}

#[test]
fn tiny_temperature_selects_nearest_token() {
    let f = fixture(40, 10, 6);
    for q in &f.queries {
        let p = predict(q, &f.params, &f.encoder, &f.memory, &FusionStrategy { kind: StrategyKind::SoftmaxToken, k: 4, tau: 1e-6 })
            .unwrap();
        let nearest = f.memory.value(f.memory.index_of(p.neighbors[0]).unwrap());
        let want = f.params.logits_with_tokens(q, &[nearest], PathwayMask::BOTH).unwrap();
        for (a, b) in p.logits.iter().zip(&want[0]) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}

#[test]
fn class_is_lowest_index_argmax() {
    let f = fixture(20, 10, 7);
    for kind in [StrategyKind::Ensemble, StrategyKind::SoftmaxToken, StrategyKind::RankToken] {
        for q in &f.queries {
            let p = predict(q, &f.params, &f.encoder, &f.memory, &strategy(kind, 3)).unwrap();
            let max = p.logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            assert_eq!(p.class, p.logits.iter().position(|&v| v == max).unwrap());
            assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn batching_never_changes_results() {
    let f = fixture(30, 32, 8);
    let s = strategy(StrategyKind::Ensemble, 4);
    let refs: Vec<&[f32]> = f.queries.iter().map(Vec::as_slice).collect();
    let all = predict_batch(refs.iter().copied(), &f.params, &f.encoder, &f.memory, &s).unwrap();
    for (q, p) in refs.iter().zip(&all) {
        let one = predict_batch([*q], &f.params, &f.encoder, &f.memory, &s).unwrap();
        assert_eq!(one[0], *p);
    }
    let reversed = predict_batch(refs.iter().rev().copied(), &f.params, &f.encoder, &f.memory, &s).unwrap();
    for (a, b) in reversed.iter().rev().zip(&all) {
        assert!(a.logits.iter().zip(&b.logits).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn deletion_leaves_unaffected_queries_bit_identical() {
    let f = fixture(60, 40, 9);
    let s = strategy(StrategyKind::Ensemble, 4);
    let before: Vec<_> = f.queries.iter().map(|q| predict(q, &f.params, &f.encoder, &f.memory, &s).unwrap()).collect();
    let forget: Vec<u64> = f.memory.ids().iter().copied().step_by(3).collect();
    let mut mem = f.memory.clone();
    mem.delete(&forget).unwrap();
    let mut untouched = 0;
    for (q, b) in f.queries.iter().zip(&before) {
        let a = predict(q, &f.params, &f.encoder, &mem, &s).unwrap();
        assert!(a.neighbors.iter().all(|id| !forget.contains(id)));
        if b.neighbors.iter().all(|id| !forget.contains(id)) {
            untouched += 1;
            assert_eq!(&a, b);
        }
    }
    assert!(untouched > 0);
}

#[test]
fn empty_memory_propagates() {
    let f = fixture(5, 1, 10);
    let mut mem = f.memory.clone();
    let ids = mem.ids().to_vec();
    mem.delete(&ids).unwrap();
    let err = predict(&f.queries[0], &f.params, &f.encoder, &mem, &FusionStrategy::default()).unwrap_err();
    assert!(matches!(err, Error::EmptyMemory));
}
