//! Qfilters: free real matrices projected onto the orthogonal group.
//!
//! A filter keeps its unconstrained parameter matrix `M` and the cached
//! orthogonal polar factor `Q = U·Vᵀ` of `M = U·Σ·Vᵀ`; `Σ` is discarded.
//! The rows of `Q` are the filter's `2^m` kernels.

use faer::{Mat, MatRef};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;

/// Smallest singular value for which the polar factor is considered unique.
pub const MIN_SINGULAR_VALUE: f64 = 1e-10;
/// Smallest singular-value pair sum accepted by the exact derivative.
pub const MIN_PAIR_SUM: f64 = 1e-8;

/// How `dL/dQ` is carried back to the free matrix `M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradMode {
    /// `dL/dM = dL/dQ`: projected gradient descent on `M`.
    #[default]
    StraightThrough,
    /// The true derivative of `L(polar(M))`.
    ExactSvd,
}

impl std::str::FromStr for GradMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "straight_through" => Ok(Self::StraightThrough),
            "exact_svd" => Ok(Self::ExactSvd),
            other => Err(Error::InvalidConfig(format!("unknown grad mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for GradMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::StraightThrough => "straight_through",
            Self::ExactSvd => "exact_svd",
        })
    }
}

struct Polar {
    u: Mat<f64>,
    sigma: Vec<f64>,
    v: Mat<f64>,
}

fn polar_svd(m: MatRef<'_, f64>) -> Result<Polar> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::shape("square matrix", format!("{}x{}", m.nrows(), m.ncols())));
    }
    if !linalg::is_finite(m) {
        return Err(Error::SvdFailed);
    }
    let svd = m.svd().map_err(|_| Error::SvdFailed)?;
    let sigma: Vec<f64> = svd.S().column_vector().iter().copied().collect();
    let sigma_min = sigma.iter().copied().fold(f64::INFINITY, f64::min);
    if !(sigma_min > MIN_SINGULAR_VALUE) {
        return Err(Error::DegenerateProjection { sigma_min });
    }
    Ok(Polar {
        u: svd.U().to_owned(),
        sigma,
        v: svd.V().to_owned(),
    })
}

/// The Frobenius-nearest orthogonal matrix to `m`, `U·Vᵀ`.
pub fn project_orthogonal(m: MatRef<'_, f64>) -> Result<Mat<f64>> {
    let p = polar_svd(m)?;
    Ok(linalg::mul(p.u.as_ref(), p.v.transpose()))
}

/// Seeded Gaussian draw for a `2^m × 2^m` filter, std `2^(−m/2)`.
pub fn init_params(arity: usize, seed: u64) -> Mat<f64> {
    assert!(arity >= 1, "filter arity must be positive");
    let d = 1usize << arity;
    let normal = Normal::new(0.0, (d as f64).sqrt().recip()).expect("valid std");
    let mut stream = rng::stream(seed, &[0xf11, arity as u64]);
    let mut m = Mat::zeros(d, d);
    // fill row-major so the draw order does not depend on storage layout
    for i in 0..d {
        for j in 0..d {
            m[(i, j)] = normal.sample(&mut stream);
        }
    }
    m
}

/// Independent parameters of a real `2^m × 2^m` orthogonal matrix.
pub fn param_count(arity: usize) -> u64 {
    assert!(arity >= 1);
    let d = 1u64 << arity;
    d * (d - 1) / 2
}

/// Carries `dL/dQ` back to `dL/dM` where `Q = polar(M)`.
///
/// With `M = U·Σ·Vᵀ` and `H = Uᵀ·(dL/dQ)·V`, the exact derivative is
/// `U·K·Vᵀ` with `K_ij = (H_ij − H_ji) / (σ_i + σ_j)`.
pub fn grad_through_projection(
    m: MatRef<'_, f64>,
    dl_dq: MatRef<'_, f64>,
    mode: GradMode,
) -> Result<Mat<f64>> {
    if (dl_dq.nrows(), dl_dq.ncols()) != (m.nrows(), m.ncols()) {
        return Err(Error::shape(
            format!("{}x{}", m.nrows(), m.ncols()),
            format!("{}x{}", dl_dq.nrows(), dl_dq.ncols()),
        ));
    }
    match mode {
        GradMode::StraightThrough => Ok(dl_dq.to_owned()),
        GradMode::ExactSvd => {
            let p = polar_svd(m)?;
            let d = p.sigma.len();
            let h = linalg::mul(linalg::mul(p.u.transpose(), dl_dq).as_ref(), p.v.as_ref());
            let mut k = Mat::zeros(d, d);
            for i in 0..d {
                for j in 0..d {
                    let pair_sum = p.sigma[i] + p.sigma[j];
                    if !(pair_sum > MIN_PAIR_SUM) {
                        return Err(Error::IllConditionedJacobian { pair_sum });
                    }
                    k[(i, j)] = (h[(i, j)] - h[(j, i)]) / pair_sum;
                }
            }
            Ok(linalg::mul(linalg::mul(p.u.as_ref(), k.as_ref()).as_ref(), p.v.transpose()))
        }
    }
}

/// A quantum convolutional filter on a fixed qubit subset.
#[derive(Debug, Clone, PartialEq)]
pub struct QFilter {
    raw: Mat<f64>,
    projected: Mat<f64>,
    qubits: Vec<usize>,
}

impl QFilter {
    pub fn new(raw: Mat<f64>, qubits: Vec<usize>) -> Result<Self> {
        let arity = qubits.len();
        let d = 1usize << arity;
        if raw.nrows() != d || raw.ncols() != d {
            return Err(Error::shape(
                format!("{d}x{d} for {arity} qubits"),
                format!("{}x{}", raw.nrows(), raw.ncols()),
            ));
        }
        for (i, q) in qubits.iter().enumerate() {
            if qubits[..i].contains(q) {
                return Err(Error::DuplicateQubit(*q));
            }
        }
        let projected = project_orthogonal(raw.as_ref())?;
        Ok(Self {
            raw,
            projected,
            qubits,
        })
    }

    /// A seeded random filter on `qubits`.
    pub fn random(qubits: Vec<usize>, seed: u64) -> Result<Self> {
        Self::new(init_params(qubits.len(), seed), qubits)
    }

    pub fn arity(&self) -> usize {
        self.qubits.len()
    }

    pub fn dim(&self) -> usize {
        self.raw.nrows()
    }

    pub fn qubits(&self) -> &[usize] {
        &self.qubits
    }

    pub fn raw(&self) -> &Mat<f64> {
        &self.raw
    }

    pub fn projected(&self) -> &Mat<f64> {
        &self.projected
    }

    pub fn param_count(&self) -> u64 {
        param_count(self.arity())
    }

    /// Mutable access to the raw matrix; call [`refresh`](Self::refresh) after.
    pub(crate) fn raw_mut(&mut self) -> &mut Mat<f64> {
        &mut self.raw
    }

    /// Recomputes the projection from the raw matrix.
    pub fn refresh(&mut self) -> Result<()> {
        self.projected = project_orthogonal(self.raw.as_ref())?;
        Ok(())
    }

    pub fn set_raw(&mut self, raw: Mat<f64>) -> Result<()> {
        if (raw.nrows(), raw.ncols()) != (self.raw.nrows(), self.raw.ncols()) {
            return Err(Error::shape(
                format!("{}x{}", self.raw.nrows(), self.raw.ncols()),
                format!("{}x{}", raw.nrows(), raw.ncols()),
            ));
        }
        self.projected = project_orthogonal(raw.as_ref())?;
        self.raw = raw;
        Ok(())
    }

    /// Replaces the cached projection without recomputing it.
    /// Exists so verification can inject a corrupted filter.
    #[doc(hidden)]
    pub fn overwrite_projection(&mut self, projected: Mat<f64>) {
        self.projected = projected;
    }

    pub fn orthogonality_defect(&self) -> f64 {
        linalg::orthogonality_defect(self.projected.as_ref())
    }
}

/// Samples a matrix with iid standard normal entries.
pub(crate) fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat<f64> {
    Mat::from_fn(rows, cols, |_, _| rng.sample(rand_distr::StandardNormal))
}
