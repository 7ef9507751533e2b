//! Depolarizing and phase-damping noise at inference time.
//!
//! Two evaluation routes: exact density-matrix evolution (small registers)
//! and Monte-Carlo Pauli trajectories. In the trajectory route phase damping
//! is rewritten as a phase-flip channel with `1 − 2·p_z = √(1−γ)`, and `Y` is
//! applied as the real matrix `[[0, −1], [1, 0]] = −i·Y`, which differs from
//! `Y` only by a global phase.

use faer::Mat;
use rand::Rng;

use crate::data::PreparedDataset;
use crate::error::{Error, Result};
use crate::model::{self, FeatureMap, QcnnConfig, QcnnModel};
use crate::rng::{self, StreamRng};
use crate::state::{DensityMatrix, StateVector, SubsetLayout};

/// Register size above which exact evaluation is refused.
pub const MAX_EXACT_QUBITS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Insertion {
    /// One noise round after every Qfilter layer.
    #[default]
    AfterEachLayer,
    /// One round after encoding and one after every layer.
    AfterEncodingAndLayers,
}

impl Insertion {
    pub fn as_str(self) -> &'static str {
        match self {
            Insertion::AfterEachLayer => "after_each_layer",
            Insertion::AfterEncodingAndLayers => "after_encoding_and_layers",
        }
    }

    pub fn point_count(self, layers: usize) -> usize {
        match self {
            Insertion::AfterEachLayer => layers,
            Insertion::AfterEncodingAndLayers => layers + 1,
        }
    }
}

impl std::str::FromStr for Insertion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "after_each_layer" => Ok(Insertion::AfterEachLayer),
            "after_encoding_and_layers" => Ok(Insertion::AfterEncodingAndLayers),
            other => Err(Error::InvalidConfig(format!("unknown insertion `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMethod {
    Exact,
    Trajectory,
}

impl NoiseMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseMethod::Exact => "exact",
            NoiseMethod::Trajectory => "trajectory",
        }
    }

    /// Exact for small registers, trajectories otherwise.
    pub fn default_for(n_qubits: usize) -> Self {
        if n_qubits <= 6 {
            NoiseMethod::Exact
        } else {
            NoiseMethod::Trajectory
        }
    }
}

impl std::str::FromStr for NoiseMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(NoiseMethod::Exact),
            "trajectory" => Ok(NoiseMethod::Trajectory),
            other => Err(Error::InvalidConfig(format!("unknown noise method `{other}`"))),
        }
    }
}

/// Every qubit gets depolarizing, then phase damping, at each insertion point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub p_depolarizing: f64,
    pub gamma_phase_damping: f64,
    pub insertion: Insertion,
    pub trajectories: usize,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            p_depolarizing: 0.05,
            gamma_phase_damping: 0.03,
            insertion: Insertion::AfterEachLayer,
            trajectories: 100,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        Self {
            p_depolarizing: 0.0,
            gamma_phase_damping: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.p_depolarizing) || !unit(self.gamma_phase_damping) {
            return Err(Error::InvalidConfig(format!(
                "noise parameters must lie in [0, 1], got p = {}, gamma = {}",
                self.p_depolarizing, self.gamma_phase_damping
            )));
        }
        if self.trajectories == 0 {
            return Err(Error::InvalidConfig("trajectories must be at least 1".into()));
        }
        Ok(())
    }

    pub fn is_noiseless(&self) -> bool {
        self.p_depolarizing == 0.0 && self.gamma_phase_damping == 0.0
    }

    /// Phase-flip probability equivalent to the phase-damping parameter.
    pub fn phase_flip_probability(&self) -> f64 {
        (1.0 - (1.0 - self.gamma_phase_damping).sqrt()) / 2.0
    }
}

fn check_qubit(rho: &DensityMatrix, qubit: usize) -> Result<()> {
    if qubit >= rho.n_qubits() {
        return Err(Error::QubitOutOfRange {
            qubit,
            n_qubits: rho.n_qubits(),
        });
    }
    Ok(())
}

fn depolarize_in_place(rho: &mut DensityMatrix, qubit: usize, p: f64) {
    let dim = rho.dim();
    let m = 1usize << qubit;
    let keep = 1.0 - 2.0 * p / 3.0;
    let swap = 2.0 * p / 3.0;
    let off = 1.0 - 4.0 * p / 3.0;
    let e = rho.entries_mut();
    for i in 0..dim {
        for j in 0..dim {
            if (i ^ j) & m != 0 {
                e[i * dim + j] *= off;
            } else if i & m == 0 {
                // mix each qubit-diagonal pair once
                let a = e[i * dim + j];
                let d = e[(i | m) * dim + (j | m)];
                e[i * dim + j] = a * keep + d * swap;
                e[(i | m) * dim + (j | m)] = d * keep + a * swap;
            }
        }
    }
}

fn dephase_in_place(rho: &mut DensityMatrix, qubit: usize, gamma: f64) {
    let dim = rho.dim();
    let m = 1usize << qubit;
    let factor = (1.0 - gamma).sqrt();
    let e = rho.entries_mut();
    for i in 0..dim {
        for j in 0..dim {
            if (i ^ j) & m != 0 {
                e[i * dim + j] *= factor;
            }
        }
    }
}

/// `ρ → (1−p)ρ + (p/3)(XρX + YρY + ZρZ)` on `qubit`.
pub fn depolarizing_apply(rho: &DensityMatrix, qubit: usize, p: f64) -> Result<DensityMatrix> {
    check_qubit(rho, qubit)?;
    let mut out = rho.clone();
    depolarize_in_place(&mut out, qubit, p);
    Ok(out)
}

/// Scales coherences between the two levels of `qubit` by `√(1−γ)`.
pub fn phase_damping_apply(rho: &DensityMatrix, qubit: usize, gamma: f64) -> Result<DensityMatrix> {
    check_qubit(rho, qubit)?;
    let mut out = rho.clone();
    dephase_in_place(&mut out, qubit, gamma);
    Ok(out)
}

/// One insertion point: every qubit, depolarizing first.
pub fn noise_round(rho: &mut DensityMatrix, noise: &NoiseConfig) {
    for q in 0..rho.n_qubits() {
        depolarize_in_place(rho, q, noise.p_depolarizing);
        dephase_in_place(rho, q, noise.gamma_phase_damping);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pauli {
    X,
    /// The real substitute `[[0, −1], [1, 0]]`.
    Y,
    Z,
}

/// Applies a Pauli to `qubit` of a real amplitude vector.
pub fn apply_pauli(amplitudes: &mut [f64], qubit: usize, pauli: Pauli) {
    let m = 1usize << qubit;
    for i in 0..amplitudes.len() {
        if i & m != 0 {
            continue;
        }
        let (a0, a1) = (amplitudes[i], amplitudes[i | m]);
        let (b0, b1) = match pauli {
            Pauli::X => (a1, a0),
            Pauli::Y => (-a1, a0),
            Pauli::Z => (a0, -a1),
        };
        amplitudes[i] = b0;
        amplitudes[i | m] = b1;
    }
}

/// One sampled insertion point. Each qubit always consumes two draws, so the
/// stream position depends only on the number of rounds.
pub fn sample_pauli_round(amplitudes: &mut [f64], n_qubits: usize, noise: &NoiseConfig, rng: &mut StreamRng) {
    let p = noise.p_depolarizing;
    let pz = noise.phase_flip_probability();
    for q in 0..n_qubits {
        let u: f64 = rng.random();
        let v: f64 = rng.random();
        if u < p {
            let pauli = if u < p / 3.0 {
                Pauli::X
            } else if u < 2.0 * p / 3.0 {
                Pauli::Y
            } else {
                Pauli::Z
            };
            apply_pauli(amplitudes, q, pauli);
        }
        if v < pz {
            apply_pauli(amplitudes, q, Pauli::Z);
        }
    }
}

/// Applies `insertion_points` consecutive sampled noise rounds.
pub fn sample_pauli_trajectory(
    state: &StateVector,
    noise: &NoiseConfig,
    insertion_points: usize,
    rng: &mut StreamRng,
) -> StateVector {
    let mut amps = state.amplitudes().to_vec();
    for _ in 0..insertion_points {
        sample_pauli_round(&mut amps, state.n_qubits(), noise, rng);
    }
    StateVector::from_normalized(amps)
}

/// Exact output distribution of the noisy circuit on `input`.
pub fn exact_noisy_probabilities(model: &QcnnModel, input: &StateVector, noise: &NoiseConfig) -> Result<Vec<f64>> {
    if model.n_qubits() > MAX_EXACT_QUBITS {
        return Err(Error::ExactModeTooLarge {
            n_qubits: model.n_qubits(),
        });
    }
    let mut rho = input.to_density();
    if noise.insertion == Insertion::AfterEncodingAndLayers {
        noise_round(&mut rho, noise);
    }
    for f in &model.filters {
        let layout = SubsetLayout::new(model.n_qubits(), f.qubits())?;
        rho.conjugate_in_place(f.projected().as_ref(), &layout);
        noise_round(&mut rho, noise);
    }
    Ok(rho.diagonal())
}

/// Mean probabilities over `noise.trajectories` sampled circuits. Trajectory
/// `r` of sample `sample` draws from the stream `(noise.seed, sample, r)`.
pub fn trajectory_probabilities(
    model: &QcnnModel,
    input: &StateVector,
    noise: &NoiseConfig,
    sample: u64,
) -> Result<Vec<f64>> {
    let n = model.n_qubits();
    let traj = noise.trajectories;
    let mut rngs: Vec<StreamRng> = (0..traj as u64).map(|r| rng::stream(noise.seed, &[sample, r])).collect();
    let mut states = Mat::from_fn(input.dim(), traj, |i, _| input.amplitudes()[i]);
    let round = |states: &mut Mat<f64>, rngs: &mut [StreamRng]| {
        for (r, stream) in rngs.iter_mut().enumerate() {
            sample_pauli_round(states.col_as_slice_mut(r), n, noise, stream);
        }
    };
    if noise.insertion == Insertion::AfterEncodingAndLayers {
        round(&mut states, &mut rngs);
    }
    for f in &model.filters {
        let layout = SubsetLayout::new(n, f.qubits())?;
        states = layout.apply_batch(f.projected().as_ref(), states.as_ref());
        round(&mut states, &mut rngs);
    }
    let mut mean = vec![0.0; input.dim()];
    for r in 0..traj {
        for (m, a) in mean.iter_mut().zip(states.col_as_slice(r)) {
            *m += a * a;
        }
    }
    for m in &mut mean {
        *m /= traj as f64;
    }
    Ok(mean)
}

/// Noisy output distribution by either route.
pub fn noisy_probabilities(
    model: &QcnnModel,
    input: &StateVector,
    noise: &NoiseConfig,
    method: NoiseMethod,
    sample: u64,
) -> Result<Vec<f64>> {
    match method {
        NoiseMethod::Exact => exact_noisy_probabilities(model, input, noise),
        NoiseMethod::Trajectory => trajectory_probabilities(model, input, noise, sample),
    }
}

/// Correct predictions out of a total, with a 95% interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisyEval {
    pub correct: usize,
    pub total: usize,
}

impl NoisyEval {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    /// Wilson score interval at 95%.
    pub fn interval95(&self) -> (f64, f64) {
        binomial_interval95(self.correct, self.total)
    }
}

pub fn binomial_interval95(correct: usize, total: usize) -> (f64, f64) {
    let z = 1.959_963_984_540_054;
    let n = total as f64;
    let phat = correct as f64 / n;
    let denom = 1.0 + z * z / n;
    let centre = (phat + z * z / (2.0 * n)) / denom;
    let half = z * (phat * (1.0 - phat) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Noisy accuracy over pre-encoded states; `indices` seed each sample's trajectories.
pub fn noisy_evaluate_states(
    model: &QcnnModel,
    states: &[StateVector],
    labels: &[usize],
    indices: &[u64],
    noise: &NoiseConfig,
    method: NoiseMethod,
) -> Result<NoisyEval> {
    noise.validate()?;
    if states.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if method == NoiseMethod::Exact && model.n_qubits() > MAX_EXACT_QUBITS {
        return Err(Error::ExactModeTooLarge {
            n_qubits: model.n_qubits(),
        });
    }
    let mut correct = 0;
    for ((psi, &label), &index) in states.iter().zip(labels).zip(indices) {
        let probs = if noise.is_noiseless() {
            model.forward_state(psi.clone(), FeatureMap::Probabilities)?.features
        } else {
            noisy_probabilities(model, psi, noise, method, index)?
        };
        if model::argmax(model.head(&probs)) == label {
            correct += 1;
        }
    }
    Ok(NoisyEval {
        correct,
        total: states.len(),
    })
}

/// Noisy test accuracy of a trained model on `dataset`, split across `workers`.
/// Noiseless settings take the clean evaluation path.
pub fn noisy_evaluate(
    model: &QcnnModel,
    config: &QcnnConfig,
    dataset: &PreparedDataset,
    noise: &NoiseConfig,
    method: NoiseMethod,
    workers: usize,
) -> Result<NoisyEval> {
    noise.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if method == NoiseMethod::Exact && config.n_qubits() > MAX_EXACT_QUBITS {
        return Err(Error::ExactModeTooLarge {
            n_qubits: config.n_qubits(),
        });
    }
    if config.feature_map() != FeatureMap::Probabilities {
        return Err(Error::InvalidConfig("noise applies only to quantum layers".into()));
    }
    model.check_consistent(config)?;
    if noise.is_noiseless() {
        let s = model::evaluate_summary(model, config, dataset, workers)?;
        return Ok(NoisyEval {
            correct: s.correct,
            total: s.total,
        });
    }
    let n = dataset.len();
    let workers = workers.clamp(1, n);
    let per = n.div_ceil(workers);
    let run = |range: std::ops::Range<usize>| -> Result<usize> {
        let mut correct = 0;
        for i in range {
            let psi = config.encode(&dataset.image(i)?)?;
            let probs = noisy_probabilities(model, &psi, noise, method, i as u64)?;
            if model::argmax(model.head(&probs)) == dataset.label(i) {
                correct += 1;
            }
        }
        Ok(correct)
    };
    let counts: Vec<Result<usize>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let range = (w * per).min(n)..((w + 1) * per).min(n);
                let run = &run;
                s.spawn(move || run(range))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("noise worker panicked")).collect()
    });
    let mut correct = 0;
    for c in counts {
        correct += c?;
    }
    Ok(NoisyEval { correct, total: n })
}
