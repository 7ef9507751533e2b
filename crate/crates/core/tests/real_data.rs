//! Checks against the real MNIST files. Skipped when `data/mnist` (or
//! `$QCNN_DATA_DIR/mnist`) is absent.

use std::path::PathBuf;

use qcnn_core::data::{idx_paths, load_or_prepare, PreparedDataset, RawDataset, Split};
use qcnn_core::training::{train, TrainConfig};
use qcnn_core::{QcnnConfig, QcnnModel};

fn mnist_dir() -> Option<PathBuf> {
    let root = std::env::var_os("QCNN_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"));
    let dir = root.join("mnist");
    let (images, labels) = idx_paths(&dir, Split::Train);
    if images.exists() && labels.exists() {
        Some(dir)
    } else {
        eprintln!("skipping: no MNIST files under {}", dir.display());
        None
    }
}

fn prepared(dir: &std::path::Path, split: Split) -> PreparedDataset {
    let (images, labels) = idx_paths(dir, split);
    load_or_prepare(&images, &labels, split, &dir.join(format!("prepared-{}.qcp", split.as_str()))).unwrap()
}

#[test]
fn mnist_sizes_and_label_marginals() {
    let Some(dir) = mnist_dir() else { return };
    let (images, labels) = idx_paths(&dir, Split::Train);
    let raw = RawDataset::load(&images, &labels, Split::Train).unwrap();
    assert_eq!((raw.len(), raw.images.rows, raw.images.cols), (60000, 28, 28));

    let train_set = prepared(&dir, Split::Train);
    assert_eq!(
        train_set.class_counts(),
        [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949]
    );
    let test_set = prepared(&dir, Split::Test);
    assert_eq!(test_set.class_counts(), [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009]);
}

#[test]
fn linear_model_loss_falls_within_100_steps() {
    let Some(dir) = mnist_dir() else { return };
    let train_set = prepared(&dir, Split::Train);
    let test_set = prepared(&dir, Split::Test).subset(&(0..500).collect::<Vec<_>>());
    let cfg = QcnnConfig::linear(1);
    let tcfg = TrainConfig {
        learning_rate: 1.0,
        max_iterations: 100,
        eval_every: 100,
        train_eval_size: 500,
        wall_clock: false,
        ..TrainConfig::default()
    };
    let (_, log) = train(QcnnModel::init(&cfg, 0).unwrap(), &cfg, &tcfg, &train_set, &test_set).unwrap();
    let l = &log.batch_losses;
    assert_eq!(l.len(), 100);
    let early = l[..10].iter().sum::<f64>() / 10.0;
    let late = l[90..].iter().sum::<f64>() / 10.0;
    assert!(late < early, "window-10 loss {early} at step 10, {late} at step 100");
}
