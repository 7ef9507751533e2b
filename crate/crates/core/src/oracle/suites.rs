//! Oracle-agreement suites run by `verify`.
//!
//! Each suite draws its random instances from a fixed seed, compares a fast
//! routine against a slow reference, and reports the worst error it saw.

use std::time::Instant;

use faer::Mat;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{finite_diff_grad, kron_expand, polar_newton};
use crate::data::{PreparedDataset, Split};
use crate::encoding::PIXELS;
use crate::error::Result;
use crate::linalg;
use crate::model::{self, FeatureMap, LossKind, QcnnConfig, QcnnModel};
use crate::noise::{self, NoiseConfig, NoiseMethod, Pauli};
use crate::qfilter::{self, GradMode, QFilter};
use crate::rng::{self, StreamRng};
use crate::state::{DensityMatrix, StateVector};
use crate::training::{self, Objective, TrainConfig};

/// Outcome of one suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

/// A deliberate defect for checking that `verify` notices it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Filters carry a slightly non-orthogonal cached projection.
    Orthogonality,
}

impl std::str::FromStr for Fault {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orthogonality" => Ok(Fault::Orthogonality),
            other => Err(crate::Error::InvalidConfig(format!("unknown fault `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { seed: 2024, fault: None }
    }
}

pub const INSTANCES: usize = 50;

fn random_state(n: usize, r: &mut StreamRng) -> StateVector {
    let v: Vec<f64> = (0..1usize << n).map(|_| r.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    StateVector::new(v.into_iter().map(|x| x / norm).collect()).expect("normalized by construction")
}

fn gaussian(rows: usize, cols: usize, r: &mut StreamRng) -> Mat<f64> {
    qfilter::gaussian(rows, cols, r)
}

/// Filter whose cached projection honours `fault`.
fn filter(raw: Mat<f64>, qubits: Vec<usize>, fault: Option<Fault>, r: &mut StreamRng) -> Result<QFilter> {
    let mut f = QFilter::new(raw, qubits)?;
    if fault == Some(Fault::Orthogonality) {
        let d = f.dim();
        let bump = gaussian(d, d, r);
        let bad = Mat::from_fn(d, d, |i, j| f.projected()[(i, j)] + 1e-4 * bump[(i, j)]);
        f.overwrite_projection(bad);
    }
    Ok(f)
}

fn random_subset(n: usize, k: usize, r: &mut StreamRng) -> Vec<usize> {
    let mut q: Vec<usize> = (0..n).collect();
    q.shuffle(r);
    q.truncate(k);
    q
}

fn timed(name: &'static str, tolerance: f64, body: impl FnOnce() -> Result<(usize, f64)>) -> Result<SuiteReport> {
    let start = Instant::now();
    let (instances, max_error) = body()?;
    Ok(SuiteReport {
        name,
        instances,
        max_error,
        tolerance,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// `apply_on_subset` against the full Kronecker-expanded operator, n ≤ 6.
pub fn subset_apply_vs_kron(opts: &VerifyOptions) -> Result<SuiteReport> {
    timed("subset_apply_vs_kron_expand", 1e-12, || {
        let mut r = rng::stream(opts.seed, &[1]);
        let mut worst = 0.0f64;
        for _ in 0..INSTANCES {
            let n = r.random_range(1..=6);
            let k = r.random_range(1..=n.min(4));
            let qubits = random_subset(n, k, &mut r);
            let f = filter(gaussian(1 << k, 1 << k, &mut r), qubits.clone(), opts.fault, &mut r)?;
            let op = f.projected();
            let psi = random_state(n, &mut r);
            let full = kron_expand(op.as_ref(), &qubits, n)?;
            let mut expected = vec![0.0; psi.dim()];
            for (i, e) in expected.iter_mut().enumerate() {
                *e = (0..psi.dim()).map(|j| full[(i, j)] * psi.amplitudes()[j]).sum();
            }
            let got = match psi.apply_on_subset(op.as_ref(), &qubits) {
                Ok(s) => s.into_amplitudes(),
                Err(_) => return Ok((INSTANCES, f64::INFINITY)),
            };
            for (a, b) in got.iter().zip(&expected) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok((INSTANCES, worst))
    })
}

/// Orthogonality of every projection, d ≤ 32.
pub fn projection_orthogonality(opts: &VerifyOptions) -> Result<SuiteReport> {
    timed("projection_orthogonality", 1e-10, || {
        let mut r = rng::stream(opts.seed, &[2]);
        let mut worst = 0.0f64;
        for i in 0..INSTANCES {
            let k = 1 + i % 5;
            let f = filter(gaussian(1 << k, 1 << k, &mut r), (0..k).collect(), opts.fault, &mut r)?;
            worst = worst.max(f.orthogonality_defect());
        }
        Ok((INSTANCES, worst))
    })
}

/// SVD projection against the Newton polar iteration, d ≤ 32.
pub fn projection_vs_newton(opts: &VerifyOptions) -> Result<SuiteReport> {
    timed("projection_vs_polar_newton", 1e-9, || {
        let mut r = rng::stream(opts.seed, &[3]);
        let mut worst = 0.0f64;
        for i in 0..INSTANCES {
            let d = 1usize << (1 + i % 5);
            let g = gaussian(d, d, &mut r);
            let m = Mat::from_fn(d, d, |a, b| g[(a, b)] / (d as f64).sqrt() + if a == b { 1.0 } else { 0.0 });
            let svd = qfilter::project_orthogonal(m.as_ref())?;
            let newton = polar_newton(m.as_ref())?;
            worst = worst.max(linalg::max_abs_diff(svd.as_ref(), newton.as_ref()));
        }
        Ok((INSTANCES, worst))
    })
}

/// Exact projection derivative against finite differences of `tr(Aᵀ·Q(M))`, d ≤ 8.
pub fn projection_gradient_vs_fd(opts: &VerifyOptions) -> Result<SuiteReport> {
    timed("exact_svd_gradient_vs_finite_differences", 1e-4, || {
        let mut r = rng::stream(opts.seed, &[4]);
        let mut worst = 0.0f64;
        for i in 0..INSTANCES {
            let d = [2, 4, 8][i % 3];
            let a = gaussian(d, d, &mut r);
            let g = gaussian(d, d, &mut r);
            let m = Mat::from_fn(d, d, |x, y| 0.5 * g[(x, y)] + if x == y { 2.0 } else { 0.0 });
            let exact = qfilter::grad_through_projection(m.as_ref(), a.as_ref(), GradMode::ExactSvd)?;
            let fd = finite_diff_grad(
                |x| {
                    let q = qfilter::project_orthogonal(linalg::from_row_major(d, d, x).as_ref())
                        .expect("perturbed matrix stays well conditioned");
                    let mut s = 0.0;
                    for p in 0..d {
                        for t in 0..d {
                            s += a[(p, t)] * q[(p, t)];
                        }
                    }
                    s
                },
                &linalg::to_row_major(m.as_ref()),
                1e-5,
            )?;
            let exact = linalg::to_row_major(exact.as_ref());
            let num: f64 = exact.iter().zip(&fd).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let den: f64 = exact.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            worst = worst.max(num / den);
        }
        Ok((INSTANCES, worst))
    })
}

fn flatten_params(model: &QcnnModel) -> Vec<f64> {
    let mut out = Vec::new();
    for f in &model.filters {
        out.extend(linalg::to_row_major(f.raw().as_ref()));
    }
    out.extend(linalg::to_row_major(model.weights.as_ref()));
    out.extend(&model.bias);
    out
}

fn rebuild(template: &QcnnModel, x: &[f64]) -> Result<QcnnModel> {
    let mut at = 0;
    let mut take = |rows: usize, cols: usize| {
        let m = linalg::from_row_major(rows, cols, &x[at..at + rows * cols]);
        at += rows * cols;
        m
    };
    let mut filters = Vec::new();
    for f in &template.filters {
        filters.push(QFilter::new(take(f.dim(), f.dim()), f.qubits().to_vec())?);
    }
    let w = take(template.weights.nrows(), template.weights.ncols());
    let b = take(1, template.bias.len());
    QcnnModel::new(template.n_qubits(), filters, w, linalg::to_row_major(b.as_ref()))
}

/// Full-pipeline gradients of tiny models (n ≤ 3) against finite differences.
///
/// The error per parameter is relative to the larger of the two values and
/// ignored when the absolute difference is below 1e-8.
pub fn end_to_end_gradient_vs_fd(opts: &VerifyOptions) -> Result<SuiteReport> {
    timed("end_to_end_gradient_vs_finite_differences", 1e-4, || {
        let mut r = rng::stream(opts.seed, &[5]);
        let mut worst = 0.0f64;
        let count = 20;
        for case in 0..count {
            let n = r.random_range(1..=3);
            let layers = r.random_range(1..=2);
            let classes = r.random_range(2..=4);
            let mut filters = Vec::new();
            for _ in 0..layers {
                let k = r.random_range(1..=n);
                let q = random_subset(n, k, &mut r);
                let g = gaussian(1 << k, 1 << k, &mut r);
                let raw = Mat::from_fn(1 << k, 1 << k, |a, b| 0.5 * g[(a, b)] + if a == b { 1.5 } else { 0.0 });
                filters.push(QFilter::new(raw, q)?);
            }
            let w = gaussian(classes, 1 << n, &mut r);
            let b: Vec<f64> = (0..classes).map(|_| r.random::<f64>() - 0.5).collect();
            let model = QcnnModel::new(n, filters, w, b)?;
            let psi = random_state(n, &mut r);
            let label = r.random_range(0..classes);
            let objective = Objective {
                loss: if case % 4 == 3 { LossKind::MeanSquared } else { LossKind::CrossEntropy },
                features: FeatureMap::Probabilities,
                use_bias: true,
                grad_mode: GradMode::ExactSvd,
            };
            let cache = model.forward_state(psi.clone(), objective.features)?;
            let g = training::backward_sample(&model, &objective, &cache, label)?;
            let mut analytic = Vec::new();
            for f in &g.filters {
                analytic.extend(linalg::to_row_major(f.as_ref()));
            }
            analytic.extend(linalg::to_row_major(g.weights.as_ref()));
            analytic.extend(&g.bias);
            let fd = finite_diff_grad(
                |x| {
                    let m = rebuild(&model, x).expect("perturbed model stays valid");
                    let c = m.forward_state(psi.clone(), objective.features).expect("same shapes");
                    model::loss(&c.logits, label, objective.loss).expect("label in range")
                },
                &flatten_params(&model),
                1e-5,
            )?;
            for (a, f) in analytic.iter().zip(&fd) {
                worst = worst.max((a - f).abs() / a.abs().max(f.abs()).max(1e-3));
            }
        }
        Ok((count, worst))
    })
}

/// Trace and Hermiticity after every channel application.
pub fn channel_trace_preservation(opts: &VerifyOptions) -> Result<SuiteReport> {
    timed("channel_trace_preservation", 1e-12, || {
        let mut r = rng::stream(opts.seed, &[6]);
        let mut worst = 0.0f64;
        for _ in 0..INSTANCES {
            let n = r.random_range(1..=3);
            // a random mixture of two pure states
            let a = random_state(n, &mut r).to_density();
            let b = random_state(n, &mut r).to_density();
            let w: f64 = r.random();
            let entries: Vec<Complex64> = a.entries().iter().zip(b.entries()).map(|(x, y)| x * w + y * (1.0 - w)).collect();
            let mut rho = DensityMatrix::new(n, entries)?;
            for q in 0..n {
                rho = noise::depolarizing_apply(&rho, q, r.random())?;
                worst = worst.max((rho.trace() - 1.0).norm()).max(rho.hermiticity_defect());
                rho = noise::phase_damping_apply(&rho, q, r.random())?;
                worst = worst.max((rho.trace() - 1.0).norm()).max(rho.hermiticity_defect());
            }
        }
        Ok((INSTANCES, worst))
    })
}

/// Mean trajectory probabilities (10⁵ samples) against exact density evolution, n ≤ 3.
pub fn trajectory_vs_exact(opts: &VerifyOptions) -> Result<SuiteReport> {
    timed("trajectory_vs_exact_density", 0.01, || {
        let mut r = rng::stream(opts.seed, &[7]);
        let mut worst = 0.0f64;
        for case in 0..INSTANCES {
            let n = r.random_range(1..=3);
            let mut filters = Vec::new();
            for _ in 0..r.random_range(1..=2) {
                let k = r.random_range(1..=n);
                let q = random_subset(n, k, &mut r);
                filters.push(filter(gaussian(1 << k, 1 << k, &mut r), q, opts.fault, &mut r)?);
            }
            let model = QcnnModel::new(n, filters, Mat::zeros(2, 1 << n), vec![0.0; 2])?;
            let noise = NoiseConfig {
                p_depolarizing: 0.2 * r.random::<f64>(),
                gamma_phase_damping: 0.2 * r.random::<f64>(),
                insertion: if case % 2 == 0 {
                    noise::Insertion::AfterEachLayer
                } else {
                    noise::Insertion::AfterEncodingAndLayers
                },
                trajectories: 100_000,
                seed: opts.seed ^ case as u64,
            };
            let psi = random_state(n, &mut r);
            let exact = noise::exact_noisy_probabilities(&model, &psi, &noise)?;
            let traj = noise::trajectory_probabilities(&model, &psi, &noise, case as u64)?;
            for (a, b) in exact.iter().zip(&traj) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok((INSTANCES, worst))
    })
}

/// Real `Y` substitute against complex `Y`: probabilities must be equal bit for bit.
pub fn y_substitute_equality(opts: &VerifyOptions) -> Result<SuiteReport> {
    timed("real_y_substitute_equality", 0.0, || {
        let mut r = rng::stream(opts.seed, &[8]);
        let mut worst = 0.0f64;
        for _ in 0..INSTANCES {
            let n = r.random_range(1..=4);
            let psi = random_state(n, &mut r);
            let q = r.random_range(0..n);
            let mut real = psi.amplitudes().to_vec();
            noise::apply_pauli(&mut real, q, Pauli::Y);
            let m = 1usize << q;
            let i = Complex64::new(0.0, 1.0);
            for (idx, a) in real.iter().enumerate() {
                // (Yψ)_idx = −i·ψ_{idx|m} on bit 0, i·ψ_{idx&!m} on bit 1
                let z = if idx & m == 0 {
                    -i * psi.amplitudes()[idx | m]
                } else {
                    i * psi.amplitudes()[idx & !m]
                };
                worst = worst.max((a * a - z.norm_sqr()).abs());
            }
        }
        Ok((INSTANCES, worst))
    })
}

/// Two identical training runs and two noisy evaluations must match bit for bit.
pub fn deterministic_replay(opts: &VerifyOptions) -> Result<SuiteReport> {
    timed("deterministic_replay", 0.0, || {
        let mut r = rng::stream(opts.seed, &[9]);
        let make = |count: usize, r: &mut StreamRng| {
            let mut features = Vec::with_capacity(count * PIXELS);
            let mut labels = Vec::with_capacity(count);
            for _ in 0..count {
                let c: u8 = r.random_range(0..10);
                for p in 0..PIXELS {
                    features.push(r.random::<f64>() * 0.3 + if p % 10 == c as usize { 0.7 } else { 0.0 });
                }
                labels.push(c);
            }
            PreparedDataset::from_parts(features, labels, Split::Train)
        };
        let train_set = make(200, &mut r)?;
        let test_set = make(60, &mut r)?;
        let config = QcnnConfig::linear(2);
        let tc = TrainConfig {
            learning_rate: 0.5,
            batch_size: 20,
            max_iterations: 15,
            eval_every: 5,
            seed: opts.seed,
            train_eval_size: 100,
            wall_clock: false,
            ..TrainConfig::default()
        };
        let run = |workers: usize| -> Result<(QcnnModel, String, noise::NoisyEval)> {
            let tc = TrainConfig { workers, ..tc.clone() };
            let (m, log) = training::train(QcnnModel::init(&config, opts.seed)?, &config, &tc, &train_set, &test_set)?;
            let noise = NoiseConfig {
                trajectories: 20,
                seed: opts.seed,
                ..NoiseConfig::default()
            };
            let e = noise::noisy_evaluate(&m, &config, &test_set, &noise, NoiseMethod::Trajectory, workers)?;
            Ok((m, log.to_csv(), e))
        };
        let (m1, csv1, e1) = run(1)?;
        let mut mismatches = 0usize;
        for workers in [1, 3] {
            let (m2, csv2, e2) = run(workers)?;
            let same_params = flatten_params(&m1).iter().zip(flatten_params(&m2)).all(|(a, b)| a.to_bits() == b.to_bits());
            mismatches += usize::from(!same_params) + usize::from(csv1 != csv2) + usize::from(e1 != e2);
        }
        Ok((2, mismatches as f64))
    })
}

/// Every suite, in a fixed order.
pub fn run_all(opts: &VerifyOptions) -> Result<Vec<SuiteReport>> {
    let suites: [fn(&VerifyOptions) -> Result<SuiteReport>; 9] = [
        subset_apply_vs_kron,
        projection_orthogonality,
        projection_vs_newton,
        projection_gradient_vs_fd,
        end_to_end_gradient_vs_fd,
        channel_trace_preservation,
        trajectory_vs_exact,
        y_substitute_equality,
        deterministic_replay,
    ];
    suites.iter().map(|s| s(opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_suites_pass() {
        for report in run_all(&VerifyOptions::default()).unwrap() {
            assert!(report.passed(), "{report:?}");
            assert!(report.instances > 0);
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let opts = VerifyOptions {
            fault: Some(Fault::Orthogonality),
            ..VerifyOptions::default()
        };
        let report = projection_orthogonality(&opts).unwrap();
        assert!(!report.passed());
        assert!(!subset_apply_vs_kron(&opts).unwrap().passed());
    }
}
