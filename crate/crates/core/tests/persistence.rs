use dau_core::checkpoint::{decode, encode, load_checkpoint, save_checkpoint, Checkpoint};
use dau_core::data::{load_cifar10_subset, write_synthetic_cifar10};
use dau_core::network::{build_network, NetworkSpec};
use dau_core::train::{train, OptimizerState, TrainConfig};
use dau_core::Error;

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_cifar10(dir.path(), 8, 10, 2).unwrap();
    let (data, test) = load_cifar10_subset(dir.path(), Some(40), Some(10)).unwrap();
    let spec = NetworkSpec::shallow_dau([6, 6, 8], [2, 2, 2], 0.5);
    let cfg = TrainConfig {
        batch_size: 16,
        epochs: 3,
        lr_steps: vec![(2, 0.001)],
        seed: 9,
        ..TrainConfig::default()
    };

    let mut full = build_network(&spec, 1).unwrap();
    let mut full_state = OptimizerState::new(&full);
    let full_rows = train(&mut full, &data, Some(&test), &cfg, &mut full_state, |_, _, _| Ok(())).unwrap();

    let mut first = build_network(&spec, 1).unwrap();
    let mut state = OptimizerState::new(&first);
    let short = TrainConfig { epochs: 1, ..cfg.clone() };
    let mut rows = train(&mut first, &data, Some(&test), &short, &mut state, |_, _, _| Ok(())).unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(
        &path,
        &Checkpoint {
            network: first,
            optimizer: state,
            seed: cfg.seed,
        },
    )
    .unwrap();

    let Checkpoint {
        network: mut resumed,
        optimizer: mut state,
        seed,
    } = load_checkpoint(&path).unwrap();
    assert_eq!((seed, state.epoch), (9, 1));
    rows.extend(train(&mut resumed, &data, Some(&test), &cfg, &mut state, |_, _, _| Ok(())).unwrap());
    assert_eq!(rows, full_rows);
    assert_eq!(resumed, full);
    assert_eq!(state, full_state);
}

#[test]
fn missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nope.ckpt");
    match load_checkpoint(&path) {
        Err(Error::MissingFile(p)) => assert_eq!(p, path),
        other => panic!("{other:?}"),
    }
}

#[test]
fn every_single_byte_flip_is_detected() {
    let net = build_network(&NetworkSpec::shallow_conv([2, 2, 2], [3, 3, 3]), 4).unwrap();
    let bytes = encode(&Checkpoint {
        optimizer: OptimizerState::new(&net),
        network: net,
        seed: 1,
    });
    for i in (0..bytes.len()).step_by(7) {
        let mut b = bytes.clone();
        b[i] ^= 0x01;
        assert!(decode(&b).is_err(), "flip at byte {i} went unnoticed");
    }
}
