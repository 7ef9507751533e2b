//! Shared fixtures for the benchmarks.

use qcnn_core::encoding::Image8;
use qcnn_core::rng::stream;
use qcnn_core::{Mat, PreparedDataset, Split};
use rand::Rng;

/// A random 8x8 image with pixels in [0, 1].
pub fn random_image(seed: u64) -> Image8 {
    let mut rng = stream(seed, &[0xbe]);
    let mut px = [0.0; 64];
    for p in &mut px {
        *p = rng.random::<f64>();
    }
    Image8::new(px).expect("pixels in range")
}

/// `count` random images with labels cycling through the classes.
pub fn random_dataset(count: usize, seed: u64) -> PreparedDataset {
    let mut rng = stream(seed, &[0xda]);
    let features = (0..count * 64).map(|_| rng.random::<f64>()).collect();
    let labels = (0..count).map(|i| (i % 10) as u8).collect();
    PreparedDataset::from_parts(features, labels, Split::Train).expect("consistent parts")
}

/// A random `rows x cols` matrix with standard-uniform entries shifted to [-1, 1].
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
    let mut rng = stream(seed, &[0x3a]);
    Mat::from_fn(rows, cols, |_, _| rng.random::<f64>() * 2.0 - 1.0)
}
