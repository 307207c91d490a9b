use criterion::{criterion_group, criterion_main, Criterion};
use forgekey_core::inference::predict;
use forgekey_core::trainer::Trainer;
use forgekey_core::{FusionStrategy, Split, StrategyKind, SyntheticSpec, TrainConfig};

fn model(c: &mut Criterion) {
    let data = forgekey_core::datagen::generate(&SyntheticSpec { samples_per_class: 100, ..SyntheticSpec::default() }).unwrap();
    let config = TrainConfig::default();
    let mut trainer = Trainer::new(&config, &data).unwrap();
    let batch: Vec<u64> = data.split_ids(Split::Train).into_iter().take(config.batch_size).collect();
    let query = data.image(data.split_ids(Split::Test)[0]).unwrap().to_vec();

    let mut group = c.benchmark_group("model");
    group.sample_size(20);
    group.bench_function("train_step", |b| b.iter(|| trainer.step(&batch).unwrap()));
    let ckpt = trainer.into_checkpoint();
    for kind in [StrategyKind::Ensemble, StrategyKind::SoftmaxToken] {
        let strategy = FusionStrategy { kind, k: 4, tau: 0.07 };
        group.bench_function(format!("predict_{kind:?}"), |b| {
            b.iter(|| predict(&query, &ckpt.params, &ckpt.encoder, &ckpt.memory, &strategy).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, model);
criterion_main!(benches);
