//! Quantum convolutional neural networks built from orthogonal Qfilters.
//!
//! Images are amplitude-encoded into a real statevector, optionally as a
//! k-fold tensor power so the amplitudes become products of pixel values.
//! Each Qfilter is a free real matrix projected onto the orthogonal group
//! (`U·Vᵀ` from its SVD) and applied to a subset of qubits. Measurement
//! probabilities feed a classical fully connected head.
//!
//! The crate is organized bottom-up:
//!
//! - [`state`]: statevector and density-matrix primitives.
//! - [`encoding`]: image downsampling and amplitude / tensor-power encoding.
//! - [`qfilter`]: orthogonal projection, initialization and its derivative.
//! - [`model`]: network assembly, forward pass, loss and accuracy.
//! - [`training`]: backpropagation, SGD with momentum, training loop, sweeps.
//! - [`noise`]: depolarizing / phase-damping evaluation, exact and sampled.
//! - [`data`]: IDX ingestion, preprocessing and the binary feature cache.
//! - [`oracle`]: slow brute-force references and the verification suites.

// comparisons are written as `!(x <= tol)` on purpose so NaN fails them
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod encoding;
pub mod error;
pub mod linalg;
pub mod model;
pub mod noise;
pub mod oracle;
pub mod qfilter;
pub mod rng;
pub mod state;
pub mod training;

pub use error::{Error, Result};
pub use faer::Mat;

pub use data::{PreparedDataset, RawDataset, Split};
pub use encoding::Image8;
pub use model::{FeatureMap, LossKind, Mode, QcnnConfig, QcnnModel};
pub use noise::{Insertion, NoiseConfig, NoiseMethod};
pub use qfilter::{GradMode, QFilter};
pub use state::{DensityMatrix, StateVector};
pub use training::{MetricsLog, TrainConfig};

/// Number of output classes for MNIST and Fashion-MNIST.
pub const CLASS_COUNT: usize = 10;
