//! Backpropagation, SGD with momentum, the training loop and learning-rate sweeps.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use faer::Mat;
use rand::seq::SliceRandom;

use crate::data::{PreparedDataset, Split};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{self, BatchCache, FeatureMap, ForwardCache, LossKind, QcnnConfig, QcnnModel};
use crate::qfilter::{self, GradMode};
use crate::rng;
use crate::state::SubsetLayout;

/// Largest `‖QᵀQ − I‖_max` tolerated at a logging point.
pub const TRAINING_ORTHOGONALITY: f64 = 1e-10;

/// What the gradient is taken of, independent of the architecture checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Objective {
    pub loss: LossKind,
    pub features: FeatureMap,
    pub use_bias: bool,
    pub grad_mode: GradMode,
}

impl Objective {
    pub fn new(config: &QcnnConfig, grad_mode: GradMode) -> Self {
        Self {
            loss: config.loss,
            features: config.feature_map(),
            use_bias: config.use_bias,
            grad_mode,
        }
    }
}

/// Gradients shaped like the parameters, plus the loss they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// `dL/dM` per filter, with `M` the raw matrix.
    pub filters: Vec<Mat<f64>>,
    pub weights: Mat<f64>,
    pub bias: Vec<f64>,
    pub loss: f64,
}

fn mismatch(what: impl Into<String>) -> Error {
    Error::CacheMismatch(what.into())
}

/// Gradients of one sample from its forward cache.
pub fn backward_sample(model: &QcnnModel, objective: &Objective, cache: &ForwardCache, label: usize) -> Result<Gradients> {
    let dim = 1usize << model.n_qubits();
    if cache.states.len() != model.filters.len() + 1 {
        return Err(mismatch(format!(
            "{} cached states for {} layers",
            cache.states.len(),
            model.filters.len()
        )));
    }
    if cache.states.iter().any(|s| s.dim() != dim) || cache.features.len() != dim {
        return Err(mismatch("cached state width differs from the model"));
    }
    if cache.logits.len() != model.class_count() {
        return Err(mismatch("cached logits differ from the head"));
    }
    let (loss, g) = model::loss_and_grad(&cache.logits, label, objective.loss)?;

    let weights = Mat::from_fn(g.len(), dim, |i, j| g[i] * cache.features[j]);
    let bias = if objective.use_bias { g.clone() } else { vec![0.0; g.len()] };

    let mut filters = Vec::with_capacity(model.filters.len());
    if !model.filters.is_empty() {
        let last = cache.states.last().unwrap().amplitudes();
        let mut upstream: Vec<f64> = (0..dim)
            .map(|j| {
                let gf: f64 = g.iter().enumerate().map(|(i, gi)| model.weights[(i, j)] * gi).sum();
                match objective.features {
                    FeatureMap::Probabilities => 2.0 * last[j] * gf,
                    FeatureMap::Amplitudes => gf,
                }
            })
            .collect();
        for (l, f) in model.filters.iter().enumerate().rev() {
            let layout = SubsetLayout::new(model.n_qubits(), f.qubits())?;
            let input = cache.states[l].amplitudes();
            let d = layout.block_dim();
            let mut dq = Mat::zeros(d, d);
            for &base in layout.bases() {
                for (r, &ro) in layout.offsets().iter().enumerate() {
                    let gr = upstream[base + ro];
                    for (c, &co) in layout.offsets().iter().enumerate() {
                        dq[(r, c)] += gr * input[base + co];
                    }
                }
            }
            if l > 0 {
                layout.apply_in_place(f.projected().transpose(), &mut upstream);
            }
            filters.push(qfilter::grad_through_projection(f.raw().as_ref(), dq.as_ref(), objective.grad_mode)?);
        }
        filters.reverse();
    }
    Ok(Gradients {
        filters,
        weights,
        bias,
        loss,
    })
}

/// Gradients of one sample for a model built from `config`.
pub fn backward(
    model: &QcnnModel,
    config: &QcnnConfig,
    cache: &ForwardCache,
    label: usize,
    grad_mode: GradMode,
) -> Result<Gradients> {
    model.check_consistent(config)?;
    backward_sample(model, &Objective::new(config, grad_mode), cache, label)
}

/// Mean gradient over a batch, from a cache with every layer's states kept.
pub fn backward_batch(model: &QcnnModel, objective: &Objective, cache: &BatchCache, labels: &[usize]) -> Result<Gradients> {
    let batch = labels.len();
    let dim = 1usize << model.n_qubits();
    if batch == 0 {
        return Err(Error::EmptyDataset);
    }
    if cache.states.len() != model.filters.len() + 1 {
        return Err(mismatch(format!(
            "{} cached state batches for {} layers",
            cache.states.len(),
            model.filters.len()
        )));
    }
    if cache.states.iter().any(|s| s.nrows() != dim || s.ncols() != batch)
        || cache.logits.ncols() != batch
        || cache.logits.nrows() != model.class_count()
    {
        return Err(mismatch("cached batch shape differs from the model or labels"));
    }

    let scale = 1.0 / batch as f64;
    let mut g_logits = Mat::zeros(model.class_count(), batch);
    let mut loss = 0.0;
    for (s, &label) in labels.iter().enumerate() {
        let (l, g) = model::loss_and_grad(&cache.logits_of(s), label, objective.loss)?;
        loss += l;
        for (i, gi) in g.into_iter().enumerate() {
            g_logits[(i, s)] = gi * scale;
        }
    }
    let weights = linalg::mul(g_logits.as_ref(), cache.features.transpose());
    let bias = (0..model.class_count())
        .map(|i| if objective.use_bias { (0..batch).map(|s| g_logits[(i, s)]).sum() } else { 0.0 })
        .collect();

    let mut filters = Vec::with_capacity(model.filters.len());
    if !model.filters.is_empty() {
        let mut upstream = linalg::mul(model.weights.transpose(), g_logits.as_ref());
        if objective.features == FeatureMap::Probabilities {
            linalg::zip_apply(&mut upstream, cache.states.last().unwrap().as_ref(), |g, a| *g *= 2.0 * a);
        }
        for (l, f) in model.filters.iter().enumerate().rev() {
            let layout = SubsetLayout::new(model.n_qubits(), f.qubits())?;
            let g_blocks = layout.gather(upstream.as_ref());
            let x_blocks = layout.gather(cache.states[l].as_ref());
            let dq = linalg::mul(g_blocks.as_ref(), x_blocks.transpose());
            if l > 0 {
                let back = linalg::mul(f.projected().transpose(), g_blocks.as_ref());
                upstream = layout.scatter(back.as_ref(), batch);
            }
            filters.push(qfilter::grad_through_projection(f.raw().as_ref(), dq.as_ref(), objective.grad_mode)?);
        }
        filters.reverse();
    }
    Ok(Gradients {
        filters,
        weights,
        bias,
        loss: loss * scale,
    })
}

/// `v ← momentum·v + g`, `p ← p − lr·v`, elementwise.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    learning_rate: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(
            format!("{} gradients and velocities", params.len()),
            format!("{} gradients, {} velocities", grads.len(), velocity.len()),
        ));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= learning_rate * *v;
    }
    Ok(())
}

fn step_mat(params: &mut Mat<f64>, grads: &Mat<f64>, velocity: &mut Mat<f64>, lr: f64, momentum: f64) -> Result<()> {
    if (grads.nrows(), grads.ncols()) != (params.nrows(), params.ncols()) {
        return Err(Error::shape(
            format!("{}x{}", params.nrows(), params.ncols()),
            format!("{}x{}", grads.nrows(), grads.ncols()),
        ));
    }
    for j in 0..params.ncols() {
        sgd_momentum_step(
            params.col_as_slice_mut(j),
            grads.col_as_slice(j),
            velocity.col_as_slice_mut(j),
            lr,
            momentum,
        )?;
    }
    Ok(())
}

/// Momentum buffers for every parameter of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Momentum {
    filters: Vec<Mat<f64>>,
    weights: Mat<f64>,
    bias: Vec<f64>,
}

impl Momentum {
    pub fn zeros_like(model: &QcnnModel) -> Self {
        Self {
            filters: model.filters.iter().map(|f| Mat::zeros(f.dim(), f.dim())).collect(),
            weights: Mat::zeros(model.weights.nrows(), model.weights.ncols()),
            bias: vec![0.0; model.bias.len()],
        }
    }

    /// Updates every parameter, then re-projects each filter.
    pub fn step(&mut self, model: &mut QcnnModel, grads: &Gradients, lr: f64, momentum: f64) -> Result<()> {
        if grads.filters.len() != model.filters.len() {
            return Err(Error::shape(
                format!("{} filter gradients", model.filters.len()),
                grads.filters.len().to_string(),
            ));
        }
        for ((f, g), v) in model.filters.iter_mut().zip(&grads.filters).zip(&mut self.filters) {
            step_mat(f.raw_mut(), g, v, lr, momentum)?;
            f.refresh()?;
        }
        step_mat(&mut model.weights, &grads.weights, &mut self.weights, lr, momentum)?;
        sgd_momentum_step(&mut model.bias, &grads.bias, &mut self.bias, lr, momentum)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Minibatch steps.
    pub max_iterations: usize,
    /// Steps between accuracy rows.
    pub eval_every: usize,
    pub seed: u64,
    pub grad_mode: GradMode,
    /// Size of the fixed random train subset used for train-accuracy rows.
    pub train_eval_size: usize,
    /// Evaluate on the whole train set instead of the subset.
    pub full_train_eval: bool,
    /// Record elapsed seconds; when false the column is written as 0 so
    /// reruns produce identical files.
    pub wall_clock: bool,
    /// Evaluation threads.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            batch_size: 100,
            max_iterations: 1000,
            eval_every: 10,
            seed: 0,
            grad_mode: GradMode::StraightThrough,
            train_eval_size: 5000,
            full_train_eval: false,
            wall_clock: true,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub split: Split,
    pub accuracy: f64,
    pub mean_loss: f64,
    pub learning_rate: f64,
    pub seed: u64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "iteration,split,accuracy,mean_loss,learning_rate,seed,wall_seconds";

/// Accuracy rows of one run. Serializes as CSV preceded by `# key: value` lines.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub metadata: Vec<(String, String)>,
    pub rows: Vec<MetricsRow>,
    /// Training loss of every minibatch, in step order. Not serialized.
    pub batch_losses: Vec<f64>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metadata {
            writeln!(out, "# {k}: {v}").unwrap();
        }
        writeln!(out, "{METRICS_HEADER}").unwrap();
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{:.3}",
                r.iteration,
                r.split.as_str(),
                r.accuracy,
                r.mean_loss,
                r.learning_rate,
                r.seed,
                r.wall_seconds
            )
            .unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::InvalidConfig(format!("metrics csv: {m}"));
        let mut log = MetricsLog::default();
        let mut seen_header = false;
        for line in text.lines() {
            if let Some(meta) = line.strip_prefix("# ") {
                let (k, v) = meta.split_once(": ").ok_or_else(|| bad(format!("bad metadata line `{line}`")))?;
                log.metadata.push((k.to_string(), v.to_string()));
            } else if !seen_header {
                if line != METRICS_HEADER {
                    return Err(bad(format!("unexpected header `{line}`")));
                }
                seen_header = true;
            } else if !line.is_empty() {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 7 {
                    return Err(bad(format!("row `{line}` has {} fields", f.len())));
                }
                let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number `{s}`")));
                log.rows.push(MetricsRow {
                    iteration: f[0].parse().map_err(|_| bad(format!("bad iteration `{}`", f[0])))?,
                    split: f[1].parse()?,
                    accuracy: num(f[2])?,
                    mean_loss: num(f[3])?,
                    learning_rate: num(f[4])?,
                    seed: f[5].parse().map_err(|_| bad(format!("bad seed `{}`", f[5])))?,
                    wall_seconds: num(f[6])?,
                });
            }
        }
        Ok(log)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// The last row for `split`.
    pub fn last(&self, split: Split) -> Option<&MetricsRow> {
        self.rows.iter().rev().find(|r| r.split == split)
    }
}

fn check_orthogonality(model: &QcnnModel) -> Result<()> {
    for f in &model.filters {
        let deviation = f.orthogonality_defect();
        if !(deviation <= TRAINING_ORTHOGONALITY) {
            return Err(Error::OrthogonalityLost { deviation });
        }
    }
    Ok(())
}

/// Trains with seeded per-epoch shuffles and logs train/test accuracy at
/// step 0, every `eval_every` steps, and after the final step.
pub fn train(
    mut model: QcnnModel,
    config: &QcnnConfig,
    train_config: &TrainConfig,
    train_set: &PreparedDataset,
    test_set: &PreparedDataset,
) -> Result<(QcnnModel, MetricsLog)> {
    config.validate()?;
    train_config.validate()?;
    model.check_consistent(config)?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let tc = train_config;
    let objective = Objective::new(config, tc.grad_mode);
    let started = Instant::now();

    let eval_train = if tc.full_train_eval || tc.train_eval_size >= train_set.len() {
        train_set.clone()
    } else {
        let mut idx: Vec<usize> = (0..train_set.len()).collect();
        idx.shuffle(&mut rng::stream(tc.seed, &[0xe7a1]));
        idx.truncate(tc.train_eval_size);
        train_set.subset(&idx)
    };

    let mut log = MetricsLog::default();
    let record = |model: &QcnnModel, iteration: usize, log: &mut MetricsLog| -> Result<()> {
        check_orthogonality(model)?;
        for (split, data) in [(Split::Train, &eval_train), (Split::Test, test_set)] {
            let s = model::evaluate_summary(model, config, data, tc.workers)?;
            log.rows.push(MetricsRow {
                iteration,
                split,
                accuracy: s.accuracy(),
                mean_loss: s.mean_loss(),
                learning_rate: tc.learning_rate,
                seed: tc.seed,
                wall_seconds: if tc.wall_clock { started.elapsed().as_secs_f64() } else { 0.0 },
            });
        }
        let n = log.rows.len();
        log::info!(
            "step {iteration}: train acc {:.4} loss {:.4}, test acc {:.4}",
            log.rows[n - 2].accuracy,
            log.rows[n - 2].mean_loss,
            log.rows[n - 1].accuracy
        );
        Ok(())
    };
    record(&model, 0, &mut log)?;

    let mut momentum = Momentum::zeros_like(&model);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    for step in 1..=tc.max_iterations {
        if cursor >= order.len() {
            order = (0..train_set.len()).collect();
            order.shuffle(&mut rng::stream(tc.seed, &[0x5f1e, epoch]));
            epoch += 1;
            cursor = 0;
        }
        let end = (cursor + tc.batch_size).min(order.len());
        let batch = &order[cursor..end];
        cursor = end;

        let images = batch.iter().map(|&i| train_set.image(i)).collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = batch.iter().map(|&i| train_set.label(i)).collect();
        let cache = model.forward_states(model::encode_batch(config, &images)?, objective.features, true)?;
        let grads = backward_batch(&model, &objective, &cache, &labels)?;
        log.batch_losses.push(grads.loss);
        momentum.step(&mut model, &grads, tc.learning_rate, tc.momentum)?;

        if step % tc.eval_every == 0 || step == tc.max_iterations {
            record(&model, step, &mut log)?;
        }
    }
    Ok((model, log))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub learning_rate: f64,
    pub final_train_accuracy: f64,
    pub final_test_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    /// Index into `rows` (and `runs`) of the selected learning rate.
    pub chosen: usize,
    pub runs: Vec<(QcnnModel, MetricsLog)>,
}

impl SweepOutcome {
    pub fn chosen_lr(&self) -> f64 {
        self.rows[self.chosen].learning_rate
    }
}

/// Highest train accuracy; ties go to the smaller learning rate.
pub fn choose_learning_rate(rows: &[SweepRow]) -> Result<usize> {
    if rows.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut best = 0;
    for (i, r) in rows.iter().enumerate().skip(1) {
        let b = &rows[best];
        if r.final_train_accuracy > b.final_train_accuracy
            || (r.final_train_accuracy == b.final_train_accuracy && r.learning_rate < b.learning_rate)
        {
            best = i;
        }
    }
    Ok(best)
}

/// One full training run per learning rate, each from `factory(seed)`.
pub fn lr_sweep(
    mut factory: impl FnMut(u64) -> Result<QcnnModel>,
    config: &QcnnConfig,
    train_config: &TrainConfig,
    grid: &[f64],
    train_set: &PreparedDataset,
    test_set: &PreparedDataset,
) -> Result<SweepOutcome> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut rows = Vec::with_capacity(grid.len());
    let mut runs = Vec::with_capacity(grid.len());
    for &lr in grid {
        log::info!("sweep: learning rate {lr}");
        let tc = TrainConfig {
            learning_rate: lr,
            ..train_config.clone()
        };
        let (model, log) = train(factory(tc.seed)?, config, &tc, train_set, test_set)?;
        let acc = |s| log.last(s).map(|r| r.accuracy).unwrap_or(f64::NAN);
        rows.push(SweepRow {
            learning_rate: lr,
            final_train_accuracy: acc(Split::Train),
            final_test_accuracy: acc(Split::Test),
        });
        runs.push((model, log));
    }
    let chosen = choose_learning_rate(&rows)?;
    Ok(SweepOutcome { rows, chosen, runs })
}
