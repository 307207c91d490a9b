use forgekey_core::backbone::BackboneConfig;
use forgekey_core::checkpoint::{Checkpoint, EpochRecord};
use forgekey_core::datagen::{generate, SyntheticSpec};
use forgekey_core::rng::{self, Stream};
use forgekey_core::trainer::{self, TrainConfig};
use forgekey_core::Error;
use rand::Rng;

fn untrained(seed: u64, per_class: usize) -> Checkpoint {
    let data = generate(&SyntheticSpec { samples_per_class: per_class, seed, ..SyntheticSpec::default() }).unwrap();
    let cfg = TrainConfig {
        epochs: 0,
        seed,
        backbone: BackboneConfig { hidden: 16, layers: 1, heads: 2, token_dim: 8, key_dim: 16, ..BackboneConfig::desk() },
        ..TrainConfig::default()
    };
    trainer::train(&cfg, &data).unwrap()
}

/// Random values, random tombstones and a random history.
fn scrambled(seed: u64) -> Checkpoint {
    let mut ck = untrained(seed, 5 + (seed % 7) as usize);
    let mut r = rng::stream(seed, Stream::Probe);
    let n = ck.memory.values().len();
    let v = rng::gaussian_vec(&mut r, n, 3.0);
    ck.memory.values_mut().data_mut().copy_from_slice(&v);
    let dead: Vec<u64> = ck.memory.ids().iter().copied().filter(|_| r.gen_bool(0.2)).collect();
    ck.memory.delete(&dead).unwrap();
    ck.history = (1..=r.gen_range(0..5))
        .map(|epoch| EpochRecord {
            epoch,
            train_loss: r.gen(),
            val_acc: r.gen_range(0.0..100.0),
            lr: r.gen(),
            p_s_probe: r.gen(),
        })
        .collect();
    ck
}

#[test]
fn save_load_is_byte_identity() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..50 {
        let ck = scrambled(seed);
        let path = dir.path().join(format!("{seed}.ckpt"));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
        let (a, b) = (ck.to_container().unwrap(), back.to_container().unwrap());
        assert_eq!(a.tensors, b.tensors);
        assert_eq!(back.memory, ck.memory);
        assert_eq!(back.history, ck.history);
        assert_eq!(std::fs::read(&path).unwrap(), ck.to_bytes().unwrap());
    }
}

#[test]
fn corrupt_magic_names_the_magic() {
    let mut bytes = untrained(1, 4).to_bytes().unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    match Checkpoint::from_bytes(&bytes) {
        Err(Error::Format(msg)) => assert!(msg.contains("MNKY"), "{msg}"),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn every_truncation_is_a_format_error() {
    let bytes = untrained(2, 2).to_bytes().unwrap();
    for cut in (0..bytes.len()).step_by(37).chain([bytes.len() - 1]) {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut at {cut}");
    }
}

#[test]
fn deletion_survives_a_save_load_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    untrained(3, 40).save(&path).unwrap();
    let mut ck = Checkpoint::load(&path).unwrap();
    let before = ck.memory.live_count();
    let forget: Vec<u64> = ck.memory.ids().iter().copied().step_by(10).collect();
    ck.memory.delete(&forget).unwrap();
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.memory.live_count(), before - forget.len());
    assert!(forget.iter().all(|&id| !back.memory.is_live(id).unwrap()));
}

#[test]
fn history_csv_has_one_row_per_epoch() {
    let ck = scrambled(11);
    let csv = ck.history_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], EpochRecord::CSV_HEADER);
    assert_eq!(lines.len(), ck.history.len() + 1);
}
