//! Network assembly: encoding, Qfilter layers, measurement and the classical head.

use faer::{Mat, MatRef};

use crate::data::PreparedDataset;
use crate::encoding::{self, Image8, PIXELS};
use crate::error::{Error, Result};
use crate::linalg;
use crate::qfilter::{self, QFilter};
use crate::rng;
use crate::state::{StateVector, SubsetLayout};
use crate::CLASS_COUNT;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// One amplitude-encoded copy on 6 qubits, 4-qubit filters.
    Linear,
    /// Two tensored copies on 12 qubits, 8-qubit filters.
    Nonlinear,
    /// Normalized pixels straight into the head.
    BaselineOrder1,
    /// Pairwise pixel products straight into the head.
    BaselineOrder2,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Linear => "linear",
            Mode::Nonlinear => "nonlinear",
            Mode::BaselineOrder1 => "baseline_order1",
            Mode::BaselineOrder2 => "baseline_order2",
        }
    }

    pub fn is_baseline(self) -> bool {
        matches!(self, Mode::BaselineOrder1 | Mode::BaselineOrder2)
    }

    /// Tensor copies of the encoded image.
    pub fn copies(self) -> usize {
        match self {
            Mode::Linear | Mode::BaselineOrder1 => 1,
            Mode::Nonlinear | Mode::BaselineOrder2 => 2,
        }
    }

    pub fn n_qubits(self) -> usize {
        6 * self.copies()
    }

    /// Filter arity required by the mode, if it has filters.
    pub fn arity(self) -> Option<usize> {
        match self {
            Mode::Linear => Some(4),
            Mode::Nonlinear => Some(8),
            _ => None,
        }
    }

    pub fn default_subsets(self, num_layers: usize) -> Vec<Vec<usize>> {
        match self {
            Mode::Linear => [vec![0, 1, 3, 4], vec![1, 2, 4, 5], vec![0, 2, 3, 5]]
                .into_iter()
                .cycle()
                .take(num_layers)
                .collect(),
            Mode::Nonlinear => vec![vec![0, 2, 4, 5, 7, 8, 10, 11]; num_layers],
            _ => Vec::new(),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Mode::Linear),
            "nonlinear" => Ok(Mode::Nonlinear),
            "baseline_order1" => Ok(Mode::BaselineOrder1),
            "baseline_order2" => Ok(Mode::BaselineOrder2),
            other => Err(Error::InvalidConfig(format!("unknown mode `{other}`"))),
        }
    }
}

/// What the head consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMap {
    /// Squared amplitudes (measurement probabilities).
    Probabilities,
    /// The amplitudes themselves.
    Amplitudes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    CrossEntropy,
    /// Mean over classes of `(logit − onehot)²`.
    MeanSquared,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::MeanSquared => "mean_squared",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" => Ok(LossKind::CrossEntropy),
            "mean_squared" => Ok(LossKind::MeanSquared),
            other => Err(Error::InvalidConfig(format!("unknown loss `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QcnnConfig {
    pub mode: Mode,
    /// One qubit list per layer; its length is the layer count.
    pub layer_subsets: Vec<Vec<usize>>,
    pub copies: usize,
    pub class_count: usize,
    pub loss: LossKind,
    pub use_bias: bool,
}

impl QcnnConfig {
    pub fn new(mode: Mode, num_layers: usize) -> Self {
        Self {
            mode,
            layer_subsets: mode.default_subsets(num_layers),
            copies: mode.copies(),
            class_count: CLASS_COUNT,
            loss: LossKind::CrossEntropy,
            use_bias: true,
        }
    }

    pub fn linear(num_layers: usize) -> Self {
        Self::new(Mode::Linear, num_layers)
    }

    pub fn nonlinear(num_layers: usize) -> Self {
        Self::new(Mode::Nonlinear, num_layers)
    }

    pub fn baseline(order: usize) -> Result<Self> {
        match order {
            1 => Ok(Self::new(Mode::BaselineOrder1, 0)),
            2 => Ok(Self::new(Mode::BaselineOrder2, 0)),
            other => Err(Error::InvalidConfig(format!("baseline order must be 1 or 2, got {other}"))),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layer_subsets.len()
    }

    pub fn n_qubits(&self) -> usize {
        6 * self.copies
    }

    /// Head input width `D`.
    pub fn feature_dim(&self) -> usize {
        1 << self.n_qubits()
    }

    pub fn feature_map(&self) -> FeatureMap {
        if self.mode.is_baseline() {
            FeatureMap::Amplitudes
        } else {
            FeatureMap::Probabilities
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.copies != self.mode.copies() {
            return bad(format!("{} mode uses {} copies, got {}", self.mode.as_str(), self.mode.copies(), self.copies));
        }
        if self.class_count != CLASS_COUNT {
            return bad(format!("class_count must be {CLASS_COUNT}, got {}", self.class_count));
        }
        match self.mode.arity() {
            None if !self.layer_subsets.is_empty() => {
                return bad("baseline modes have no quantum layers".into())
            }
            Some(_) if !(1..=3).contains(&self.num_layers()) => {
                return bad(format!("num_layers must be 1-3, got {}", self.num_layers()))
            }
            _ => {}
        }
        for (l, subset) in self.layer_subsets.iter().enumerate() {
            if Some(subset.len()) != self.mode.arity() {
                return bad(format!(
                    "layer {} acts on {} qubits, {} mode needs {}",
                    l + 1,
                    subset.len(),
                    self.mode.as_str(),
                    self.mode.arity().unwrap_or(0)
                ));
            }
            SubsetLayout::new(self.n_qubits(), subset)?;
        }
        Ok(())
    }

    /// Encodes an image as this configuration's input state.
    pub fn encode(&self, image: &Image8) -> Result<StateVector> {
        encoding::encode_power(image, self.copies, None)
    }
}

/// Filters plus the affine head `logits = W·features + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct QcnnModel {
    n_qubits: usize,
    pub filters: Vec<QFilter>,
    /// `class_count × 2^n`.
    pub weights: Mat<f64>,
    pub bias: Vec<f64>,
}

impl QcnnModel {
    pub fn new(n_qubits: usize, filters: Vec<QFilter>, weights: Mat<f64>, bias: Vec<f64>) -> Result<Self> {
        for f in &filters {
            SubsetLayout::new(n_qubits, f.qubits())?;
        }
        let dim = 1usize << n_qubits;
        if weights.ncols() != dim || weights.nrows() != bias.len() || bias.is_empty() {
            return Err(Error::shape(
                format!("head k x {dim} with k bias entries"),
                format!("{}x{} with {} bias entries", weights.nrows(), weights.ncols(), bias.len()),
            ));
        }
        if !linalg::is_finite(weights.as_ref()) || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidConfig("head parameters must be finite".into()));
        }
        Ok(Self {
            n_qubits,
            filters,
            weights,
            bias,
        })
    }

    /// Seeded initialization: layer `l` draws its filter from `(seed, l)`,
    /// the head from its own stream with `W ~ N(0, 1/D)` and `b = 0`.
    pub fn init(config: &QcnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let filters = config
            .layer_subsets
            .iter()
            .enumerate()
            .map(|(l, qubits)| QFilter::random(qubits.clone(), rng::derive_seed(seed, &[l as u64])))
            .collect::<Result<Vec<_>>>()?;
        let dim = config.feature_dim();
        let mut head_rng = rng::stream(seed, &[0x4ead]);
        let mut weights = qfilter::gaussian(config.class_count, dim, &mut head_rng);
        let scale = 1.0 / (dim as f64).sqrt();
        for j in 0..dim {
            for i in 0..config.class_count {
                weights[(i, j)] *= scale;
            }
        }
        Self::new(config.n_qubits(), filters, weights, vec![0.0; config.class_count])
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn class_count(&self) -> usize {
        self.bias.len()
    }

    /// Trainable parameter count under the orthogonal parameterization.
    pub fn param_count(&self) -> u64 {
        let filters: u64 = self.filters.iter().map(QFilter::param_count).sum();
        filters + (self.weights.nrows() * self.weights.ncols() + self.bias.len()) as u64
    }

    pub fn check_consistent(&self, config: &QcnnConfig) -> Result<()> {
        let mismatch = |what: &str, expected: String, found: String| {
            Err(Error::ShapeMismatch {
                expected: format!("{what} {expected}"),
                found,
            })
        };
        if self.n_qubits != config.n_qubits() {
            return mismatch("qubits", config.n_qubits().to_string(), self.n_qubits.to_string());
        }
        if self.filters.len() != config.num_layers() {
            return mismatch("layers", config.num_layers().to_string(), self.filters.len().to_string());
        }
        for (f, subset) in self.filters.iter().zip(&config.layer_subsets) {
            if f.qubits() != subset.as_slice() {
                return mismatch("subset", format!("{subset:?}"), format!("{:?}", f.qubits()));
            }
        }
        if self.class_count() != config.class_count {
            return mismatch("classes", config.class_count.to_string(), self.class_count().to_string());
        }
        Ok(())
    }

    /// Runs the layers and head on an already-encoded state.
    pub fn forward_state(&self, input: StateVector, features: FeatureMap) -> Result<ForwardCache> {
        if input.n_qubits() != self.n_qubits {
            return Err(Error::shape(
                format!("{}-qubit state", self.n_qubits),
                format!("{}-qubit state", input.n_qubits()),
            ));
        }
        let mut states = Vec::with_capacity(self.filters.len() + 1);
        states.push(input);
        for f in &self.filters {
            let next = states.last().unwrap().apply_on_subset(f.projected().as_ref(), f.qubits())?;
            states.push(next);
        }
        let last = states.last().unwrap();
        let features = match features {
            FeatureMap::Probabilities => last.probabilities(),
            FeatureMap::Amplitudes => last.amplitudes().to_vec(),
        };
        let logits = self.head(&features);
        Ok(ForwardCache {
            states,
            features,
            logits,
        })
    }

    /// `W·x + b` for one feature vector.
    pub fn head(&self, features: &[f64]) -> Vec<f64> {
        let mut logits = self.bias.clone();
        for (j, &x) in features.iter().enumerate() {
            if x != 0.0 {
                for (i, z) in logits.iter_mut().enumerate() {
                    *z += self.weights[(i, j)] * x;
                }
            }
        }
        logits
    }

    /// Runs the layers on a batch of encoded states (`2^n × B`).
    /// With `keep_states` false only the final state is retained.
    pub fn forward_states(&self, input: Mat<f64>, features: FeatureMap, keep_states: bool) -> Result<BatchCache> {
        if input.nrows() != 1 << self.n_qubits {
            return Err(Error::shape(format!("{} rows", 1usize << self.n_qubits), format!("{} rows", input.nrows())));
        }
        let mut states = vec![input];
        for f in &self.filters {
            let layout = SubsetLayout::new(self.n_qubits, f.qubits())?;
            let next = layout.apply_batch(f.projected().as_ref(), states.last().unwrap().as_ref());
            if !keep_states {
                states.clear();
            }
            states.push(next);
        }
        let last = states.last().unwrap();
        let features = match features {
            FeatureMap::Probabilities => Mat::from_fn(last.nrows(), last.ncols(), |i, j| last[(i, j)] * last[(i, j)]),
            FeatureMap::Amplitudes => last.clone(),
        };
        let mut logits = linalg::mul(self.weights.as_ref(), features.as_ref());
        for j in 0..logits.ncols() {
            for (i, b) in self.bias.iter().enumerate() {
                logits[(i, j)] += b;
            }
        }
        Ok(BatchCache {
            states,
            features,
            logits,
        })
    }
}

/// Intermediates of one forward pass, consumed by backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    /// The encoded input followed by the state after each layer.
    pub states: Vec<StateVector>,
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Batched counterpart of [`ForwardCache`]; one column per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchCache {
    pub states: Vec<Mat<f64>>,
    pub features: Mat<f64>,
    pub logits: Mat<f64>,
}

impl BatchCache {
    pub fn logits_of(&self, sample: usize) -> Vec<f64> {
        self.logits.col(sample).iter().copied().collect()
    }
}

pub fn forward(model: &QcnnModel, config: &QcnnConfig, image: &Image8) -> Result<(Vec<f64>, ForwardCache)> {
    model.check_consistent(config)?;
    let cache = model.forward_state(config.encode(image)?, config.feature_map())?;
    Ok((cache.logits.clone(), cache))
}

/// Encodes images as the columns of a `2^n × B` matrix.
pub fn encode_batch<'a>(config: &QcnnConfig, images: impl IntoIterator<Item = &'a Image8>) -> Result<Mat<f64>> {
    let encoded = images
        .into_iter()
        .map(|img| config.encode(img))
        .collect::<Result<Vec<_>>>()?;
    let dim = config.feature_dim();
    Ok(Mat::from_fn(dim, encoded.len(), |i, j| encoded[j].amplitudes()[i]))
}

pub fn forward_batch(model: &QcnnModel, config: &QcnnConfig, images: &[Image8]) -> Result<BatchCache> {
    model.check_consistent(config)?;
    model.forward_states(encode_batch(config, images)?, config.feature_map(), true)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Loss of one sample and its gradient with respect to the logits.
pub fn loss_and_grad(logits: &[f64], label: usize, kind: LossKind) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::BadLabel(label));
    }
    match kind {
        LossKind::CrossEntropy => {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            let mut grad = softmax(logits);
            grad[label] -= 1.0;
            Ok((lse - logits[label], grad))
        }
        LossKind::MeanSquared => {
            let c = logits.len() as f64;
            let mut loss = 0.0;
            let grad = logits
                .iter()
                .enumerate()
                .map(|(i, &z)| {
                    let r = z - if i == label { 1.0 } else { 0.0 };
                    loss += r * r;
                    2.0 * r / c
                })
                .collect();
            Ok((loss / c, grad))
        }
    }
}

pub fn loss(logits: &[f64], label: usize, kind: LossKind) -> Result<f64> {
    loss_and_grad(logits, label, kind).map(|(l, _)| l)
}

/// Index of the largest logit, ties to the smallest index.
pub fn argmax(logits: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, z) in logits.into_iter().enumerate() {
        if z > best.1 {
            best = (i, z);
        }
    }
    best.0
}

/// Direct pixel-to-head mapping: `W·x + b` with `x` the normalized pixels
/// (order 1) or their tensor square (order 2).
pub fn baseline_forward(image: &Image8, order: usize, weights: MatRef<'_, f64>, bias: &[f64]) -> Result<Vec<f64>> {
    if !(1..=2).contains(&order) {
        return Err(Error::InvalidConfig(format!("baseline order must be 1 or 2, got {order}")));
    }
    let dim = PIXELS.pow(order as u32);
    if weights.ncols() != dim || weights.nrows() != bias.len() {
        return Err(Error::shape(
            format!("k x {dim} weights with k bias entries"),
            format!("{}x{} with {} bias entries", weights.nrows(), weights.ncols(), bias.len()),
        ));
    }
    let feature = encoding::encode_power(image, order, None)?;
    let mut logits = bias.to_vec();
    for (j, &x) in feature.amplitudes().iter().enumerate() {
        for (i, z) in logits.iter_mut().enumerate() {
            *z += weights[(i, j)] * x;
        }
    }
    Ok(logits)
}

/// Correct count and summed loss over a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub correct: usize,
    pub total: usize,
    pub loss_sum: f64,
}

impl EvalSummary {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.total as f64
    }
}

/// Samples per batched forward pass during evaluation.
pub const EVAL_CHUNK: usize = 250;

fn evaluate_range(
    model: &QcnnModel,
    config: &QcnnConfig,
    dataset: &PreparedDataset,
    range: std::ops::Range<usize>,
) -> Result<(usize, Vec<f64>)> {
    let mut correct = 0;
    let mut chunk_losses = Vec::new();
    let mut start = range.start;
    while start < range.end {
        let end = (start + EVAL_CHUNK).min(range.end);
        let images = (start..end).map(|i| dataset.image(i)).collect::<Result<Vec<_>>>()?;
        let cache = model.forward_states(encode_batch(config, &images)?, config.feature_map(), false)?;
        let mut loss_sum = 0.0;
        for (s, i) in (start..end).enumerate() {
            let logits = cache.logits_of(s);
            let label = dataset.label(i);
            if argmax(logits.iter().copied()) == label {
                correct += 1;
            }
            loss_sum += loss(&logits, label, config.loss)?;
        }
        chunk_losses.push(loss_sum);
        start = end;
    }
    Ok((correct, chunk_losses))
}

/// Accuracy and mean loss, split across `workers` threads.
///
/// Work is cut into fixed chunks and losses are summed in chunk order, so the
/// result does not depend on the worker count.
pub fn evaluate_summary(
    model: &QcnnModel,
    config: &QcnnConfig,
    dataset: &PreparedDataset,
    workers: usize,
) -> Result<EvalSummary> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    model.check_consistent(config)?;
    let n = dataset.len();
    let chunks = n.div_ceil(EVAL_CHUNK);
    let workers = workers.clamp(1, chunks);
    let per_worker = chunks.div_ceil(workers);
    let ranges: Vec<_> = (0..workers)
        .map(|w| (w * per_worker * EVAL_CHUNK).min(n)..((w + 1) * per_worker * EVAL_CHUNK).min(n))
        .filter(|r| !r.is_empty())
        .collect();
    let results: Vec<Result<(usize, Vec<f64>)>> = if ranges.len() == 1 {
        vec![evaluate_range(model, config, dataset, ranges[0].clone())]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = ranges
                .iter()
                .map(|r| s.spawn(|| evaluate_range(model, config, dataset, r.clone())))
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        })
    };
    let mut summary = EvalSummary {
        correct: 0,
        total: n,
        loss_sum: 0.0,
    };
    for r in results {
        let (correct, losses) = r?;
        summary.correct += correct;
        for l in losses {
            summary.loss_sum += l;
        }
    }
    Ok(summary)
}

/// Fraction of samples whose largest logit is the label.
pub fn evaluate(model: &QcnnModel, config: &QcnnConfig, dataset: &PreparedDataset) -> Result<f64> {
    evaluate_summary(model, config, dataset, 1).map(|s| s.accuracy())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::state::tests::{random_orthogonal, random_state};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(seed: u64) -> Image8 {
        let mut r = rng::stream(seed, &[0x1a]);
        let mut px = [0.0; PIXELS];
        for p in px.iter_mut() {
            *p = r.random::<f64>();
        }
        Image8::new(px).unwrap()
    }

    fn identity_model(config: &QcnnConfig) -> QcnnModel {
        let filters = config
            .layer_subsets
            .iter()
            .map(|q| QFilter::new(Mat::identity(1 << q.len(), 1 << q.len()), q.clone()).unwrap())
            .collect();
        QcnnModel::new(
            config.n_qubits(),
            filters,
            Mat::zeros(CLASS_COUNT, config.feature_dim()),
            vec![0.0; CLASS_COUNT],
        )
        .unwrap()
    }

    #[test]
    fn default_configs_validate() {
        for layers in 1..=3 {
            QcnnConfig::linear(layers).validate().unwrap();
            QcnnConfig::nonlinear(layers).validate().unwrap();
        }
        QcnnConfig::baseline(1).unwrap().validate().unwrap();
        QcnnConfig::baseline(2).unwrap().validate().unwrap();
        assert!(QcnnConfig::baseline(3).is_err());
        assert!(QcnnConfig::linear(4).validate().is_err());
        let mut c = QcnnConfig::linear(1);
        c.layer_subsets[0] = vec![0, 1, 2];
        assert!(c.validate().is_err());
        let mut c = QcnnConfig::nonlinear(1);
        c.layer_subsets[0][0] = 12;
        assert!(c.validate().is_err());
        assert_eq!(QcnnConfig::nonlinear(2).layer_subsets[0], vec![0, 2, 4, 5, 7, 8, 10, 11]);
    }

    #[test]
    fn identity_filters_and_zero_head_give_zero_logits() {
        for config in [QcnnConfig::linear(3), QcnnConfig::nonlinear(1)] {
            let model = identity_model(&config);
            let (logits, _) = forward(&model, &config, &random_image(1)).unwrap();
            assert!(logits.iter().all(|&z| z == 0.0));
        }
    }

    #[test]
    fn selecting_head_reads_squared_normalized_pixels() {
        let config = QcnnConfig::linear(2);
        let mut model = identity_model(&config);
        for i in 0..CLASS_COUNT {
            model.weights[(i, i)] = 1.0;
        }
        let img = random_image(2);
        let (logits, _) = forward(&model, &config, &img).unwrap();
        let norm2: f64 = img.pixels().iter().map(|p| p * p).sum();
        for i in 0..CLASS_COUNT {
            assert!((logits[i] - img.pixels()[i].powi(2) / norm2).abs() < 1e-15);
        }
    }

    #[test]
    fn nonlinear_head_sees_4096_probabilities() {
        let config = QcnnConfig::nonlinear(1);
        let model = QcnnModel::init(&config, 3).unwrap();
        let (_, cache) = forward(&model, &config, &random_image(3)).unwrap();
        assert_eq!(cache.features.len(), 4096);
        assert_eq!(model.weights.ncols(), 4096);
        assert!((cache.features.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn forward_is_deterministic_and_batch_agrees() {
        let config = QcnnConfig::linear(3);
        let model = QcnnModel::init(&config, 4).unwrap();
        let images: Vec<_> = (0..5).map(random_image).collect();
        let batch = forward_batch(&model, &config, &images).unwrap();
        for (s, img) in images.iter().enumerate() {
            let (a, ca) = forward(&model, &config, img).unwrap();
            let (b, _) = forward(&model, &config, img).unwrap();
            assert_eq!(a, b);
            let batched = batch.logits_of(s);
            for (x, y) in a.iter().zip(&batched) {
                assert!((x - y).abs() < 1e-13);
            }
            assert!((ca.features.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_examples() {
        let equal = [0.7; 10];
        assert!((loss(&equal, 3, LossKind::CrossEntropy).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!((loss(&equal, 3, LossKind::CrossEntropy).unwrap() - std::f64::consts::LN_10).abs() < 1e-12);

        let mut peaked = [0.0; 10];
        peaked[4] = 30.0;
        assert!(loss(&peaked, 4, LossKind::CrossEntropy).unwrap() <= 1e-9);

        let mut first = [0.0; 10];
        first[0] = 1.0;
        let e = std::f64::consts::E;
        let direct = -(e / (e + 9.0)).ln();
        assert!((loss(&first, 0, LossKind::CrossEntropy).unwrap() - direct).abs() < 1e-12);

        assert!(matches!(loss(&first, 10, LossKind::CrossEntropy), Err(Error::BadLabel(10))));
        assert!((loss(&first, 0, LossKind::MeanSquared).unwrap()).abs() < 1e-15);
        assert!((loss(&first, 1, LossKind::MeanSquared).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let logits = [0.3, -1.0, 2.0, 0.5];
        for kind in [LossKind::CrossEntropy, LossKind::MeanSquared] {
            let (_, grad) = loss_and_grad(&logits, 2, kind).unwrap();
            let fd = crate::oracle::finite_diff_grad(|z| loss(z, 2, kind).unwrap(), &logits, 1e-6).unwrap();
            for (a, b) in grad.iter().zip(&fd) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax([1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax([0.0; 10]), 0);
    }

    #[test]
    fn hard_wired_head_scores_perfectly() {
        let config = QcnnConfig::linear(1);
        let mut model = identity_model(&config);
        // sample c lights only pixel c; the head maps probability c to class c
        let mut features = vec![0.0; 10 * PIXELS];
        let labels: Vec<u8> = (0..10).collect();
        for c in 0..10 {
            features[c * PIXELS + c] = 1.0;
            model.weights[(c, c)] = 1.0;
        }
        let data = PreparedDataset::from_parts(features, labels, Split::Test).unwrap();
        assert_eq!(evaluate(&model, &config, &data).unwrap(), 1.0);
    }

    #[test]
    fn random_model_is_near_chance() {
        let config = QcnnConfig::linear(1);
        let model = QcnnModel::init(&config, 5).unwrap();
        let mut r = rng::stream(5, &[0xda7a]);
        let features: Vec<f64> = (0..1000 * PIXELS).map(|_| r.random::<f64>()).collect();
        let labels: Vec<u8> = (0..1000).map(|_| r.random_range(0..10)).collect();
        let data = PreparedDataset::from_parts(features, labels, Split::Test).unwrap();
        let acc = evaluate(&model, &config, &data).unwrap();
        assert!((0.05..=0.15).contains(&acc), "accuracy {acc}");
        for workers in [2, 3, 8] {
            assert_eq!(evaluate_summary(&model, &config, &data, workers).unwrap(), evaluate_summary(&model, &config, &data, 1).unwrap());
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let config = QcnnConfig::linear(1);
        let model = QcnnModel::init(&config, 6).unwrap();
        let data = PreparedDataset::from_parts(Vec::new(), Vec::new(), Split::Test).unwrap();
        assert!(matches!(evaluate(&model, &config, &data), Err(Error::EmptyDataset)));
    }

    #[test]
    fn baseline_examples() {
        let img = random_image(7);
        let mut bias = vec![0.0; 10];
        bias[6] = 2.5;
        let logits = baseline_forward(&img, 1, Mat::zeros(10, 64).as_ref(), &bias).unwrap();
        assert_eq!(argmax(logits), 6);

        assert!(matches!(
            baseline_forward(&img, 2, Mat::zeros(10, 64).as_ref(), &bias),
            Err(Error::ShapeMismatch { .. })
        ));

        // order-2 features are pairwise products: read them through one-hot rows
        let x = encoding::l2_normalize(img.pixels()).unwrap();
        let picks = [(0, 0), (3, 17), (63, 5), (20, 41)];
        let mut w = Mat::zeros(10, 4096);
        for (r, &(i, j)) in picks.iter().enumerate() {
            w[(r, i * 64 + j)] = 1.0;
        }
        let logits = baseline_forward(&img, 2, w.as_ref(), &[0.0; 10]).unwrap();
        for (r, &(i, j)) in picks.iter().enumerate() {
            assert!((logits[r] - x[i] * x[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn baseline_model_matches_baseline_forward() {
        for order in [1, 2] {
            let config = QcnnConfig::baseline(order).unwrap();
            let mut model = QcnnModel::init(&config, 8).unwrap();
            model.bias[2] = 0.25;
            let img = random_image(8);
            let (logits, cache) = forward(&model, &config, &img).unwrap();
            assert_eq!(cache.features.len(), 64usize.pow(order as u32));
            let direct = baseline_forward(&img, order, model.weights.as_ref(), &model.bias).unwrap();
            for (a, b) in logits.iter().zip(&direct) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn permute_index(i: usize, perm: &[usize]) -> usize {
        perm.iter().enumerate().map(|(q, &p)| (i >> q & 1) << p).sum()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn relabeling_qubits_preserves_logits(seed in 0u64..10_000, perm_seed in 0u64..10_000) {
            let n = 6;
            let mut perm: Vec<usize> = (0..n).collect();
            let mut r = rng::stream(perm_seed, &[]);
            for i in (1..n).rev() {
                perm.swap(i, r.random_range(0..=i));
            }
            let subsets = [vec![0, 1, 3, 4], vec![5, 2, 1, 0]];
            let filters: Vec<QFilter> = subsets
                .iter()
                .enumerate()
                .map(|(l, q)| QFilter::new(random_orthogonal(16, seed + l as u64), q.clone()).unwrap())
                .collect();
            let mut head_rng = rng::stream(seed, &[1]);
            let w = qfilter::gaussian(10, 64, &mut head_rng);
            let b: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
            let model = QcnnModel::new(n, filters.clone(), w.clone(), b.clone()).unwrap();

            let relabeled_filters = filters
                .iter()
                .map(|f| QFilter::new(f.raw().clone(), f.qubits().iter().map(|&q| perm[q]).collect()).unwrap())
                .collect();
            let mut w2 = Mat::zeros(10, 64);
            for j in 0..64 {
                for i in 0..10 {
                    w2[(i, permute_index(j, &perm))] = w[(i, j)];
                }
            }
            let relabeled = QcnnModel::new(n, relabeled_filters, w2, b).unwrap();

            let psi = random_state(n, seed);
            let mut moved = vec![0.0; 64];
            for (i, &a) in psi.amplitudes().iter().enumerate() {
                moved[permute_index(i, &perm)] = a;
            }
            let a = model.forward_state(psi, FeatureMap::Probabilities).unwrap();
            let b = relabeled.forward_state(StateVector::new(moved).unwrap(), FeatureMap::Probabilities).unwrap();
            for (x, y) in a.logits.iter().zip(&b.logits) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
