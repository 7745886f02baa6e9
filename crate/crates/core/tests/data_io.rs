use std::fs;

use dau_core::data::{load_cifar10, load_cifar10_subset, synthetic_records, write_synthetic_cifar10, RECORD_BYTES};
use dau_core::Error;

#[test]
fn split_sizes_follow_the_files() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_cifar10(dir.path(), 7, 5, 1).unwrap();
    let (train, test) = load_cifar10(dir.path()).unwrap();
    assert_eq!((train.len(), test.len()), (35, 5));
    assert_eq!(train.images.dims(), [35, 3, 32, 32]);
}

#[test]
fn train_mean_is_removed() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_cifar10(dir.path(), 12, 5, 2).unwrap();
    let (train, test) = load_cifar10_subset(dir.path(), Some(50), None).unwrap();
    assert_eq!(train.len(), 50);
    assert_eq!(test.mean, train.mean);
    let plane = 32 * 32;
    for c in 0..3 {
        let mut sum = 0.0f64;
        for n in 0..train.len() {
            sum += train.images.plane(n, c).iter().map(|&v| v as f64).sum::<f64>();
        }
        let mean = sum / (train.len() * plane) as f64;
        assert!(mean.abs() < 1e-6, "channel {c} mean {mean}");
    }
}

#[test]
fn missing_test_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_cifar10(dir.path(), 2, 2, 3).unwrap();
    let test = dir.path().join("test_batch.bin");
    fs::remove_file(&test).unwrap();
    match load_cifar10(dir.path()) {
        Err(Error::MissingFile(p)) => assert_eq!(p, test),
        other => panic!("{other:?}"),
    }
}

#[test]
fn truncated_file_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_cifar10(dir.path(), 2, 2, 4).unwrap();
    let mut bytes = synthetic_records(2, 9);
    bytes.truncate(RECORD_BYTES + 3072);
    fs::write(dir.path().join("data_batch_3.bin"), bytes).unwrap();
    assert!(matches!(load_cifar10(dir.path()), Err(Error::Format { .. })));
}

#[test]
fn missing_directory() {
    assert!(matches!(
        load_cifar10(std::path::Path::new("/definitely/not/here")),
        Err(Error::MissingFile(_))
    ));
}
