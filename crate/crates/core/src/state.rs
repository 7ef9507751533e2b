//! Real statevectors, complex density matrices, and the subset-gate kernel.
//!
//! Qubit `k` is bit `k` of a basis-state index. An operator acting on the
//! qubit list `[q_0, q_1, ..]` sees `q_j` as bit `j` of its own local index.

use faer::{Mat, MatRef};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance on `‖ψ‖₂ = 1` for a valid statevector.
pub const NORM_TOLERANCE: f64 = 1e-9;
/// Tolerance on `‖OᵀO − I‖_max` for operators passed to the checked kernels.
pub const ORTHOGONALITY_TOLERANCE: f64 = 1e-8;
/// Hermiticity and trace tolerance for density matrices.
pub const DENSITY_TOLERANCE: f64 = 1e-10;

/// Index bookkeeping for applying a `2^k × 2^k` operator to `k` of `n` qubits.
///
/// The full index of local basis state `s` within group `r` is
/// `bases[r] + offsets[s]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetLayout {
    n_qubits: usize,
    qubits: Vec<usize>,
    offsets: Vec<usize>,
    bases: Vec<usize>,
}

impl SubsetLayout {
    pub fn new(n_qubits: usize, qubits: &[usize]) -> Result<Self> {
        let mut seen = 0u64;
        for &q in qubits {
            if q >= n_qubits {
                return Err(Error::QubitOutOfRange { qubit: q, n_qubits });
            }
            if seen & (1 << q) != 0 {
                return Err(Error::DuplicateQubit(q));
            }
            seen |= 1 << q;
        }
        let k = qubits.len();
        let offsets = (0..1usize << k)
            .map(|s| {
                qubits
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| s >> j & 1 == 1)
                    .map(|(_, &q)| 1usize << q)
                    .sum()
            })
            .collect();
        let mask = seen as usize;
        let bases = (0..1usize << n_qubits).filter(|i| i & mask == 0).collect();
        Ok(Self {
            n_qubits,
            qubits: qubits.to_vec(),
            offsets,
            bases,
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn qubits(&self) -> &[usize] {
        &self.qubits
    }

    /// Dimension of the operator, `2^k`.
    pub fn block_dim(&self) -> usize {
        self.offsets.len()
    }

    /// Number of amplitude groups the operator acts on independently, `2^(n−k)`.
    pub fn group_count(&self) -> usize {
        self.bases.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn bases(&self) -> &[usize] {
        &self.bases
    }

    fn check_operator(&self, op: MatRef<'_, f64>) -> Result<()> {
        let d = self.block_dim();
        if op.nrows() != d || op.ncols() != d {
            return Err(Error::shape(
                format!("{d}x{d} operator"),
                format!("{}x{}", op.nrows(), op.ncols()),
            ));
        }
        let deviation = linalg::orthogonality_defect(op);
        if deviation.is_nan() || deviation > ORTHOGONALITY_TOLERANCE {
            return Err(Error::NonOrthogonalOperator { deviation });
        }
        Ok(())
    }

    /// Applies `op` in place to one amplitude vector of length `2^n`.
    /// No validation; `op` must be `block_dim` square.
    pub fn apply_in_place(&self, op: MatRef<'_, f64>, amplitudes: &mut [f64]) {
        let d = self.block_dim();
        let mut input = vec![0.0; d];
        for &base in &self.bases {
            for (x, &off) in input.iter_mut().zip(&self.offsets) {
                *x = amplitudes[base + off];
            }
            for (row, &off) in self.offsets.iter().enumerate() {
                let mut acc = 0.0;
                for (col, &x) in input.iter().enumerate() {
                    acc += op[(row, col)] * x;
                }
                amplitudes[base + off] = acc;
            }
        }
    }

    /// Rearranges a batch of states (`2^n × B`, one state per column) into a
    /// `2^k × (2^(n−k)·B)` matrix whose columns are the amplitude groups.
    pub fn gather(&self, states: MatRef<'_, f64>) -> Mat<f64> {
        let groups = self.group_count();
        let mut out = Mat::zeros(self.block_dim(), groups * states.ncols());
        for b in 0..states.ncols() {
            let column = states.col(b);
            for (r, &base) in self.bases.iter().enumerate() {
                let dst = out.col_mut(b * groups + r);
                for (x, &off) in dst.iter_mut().zip(&self.offsets) {
                    *x = column[base + off];
                }
            }
        }
        out
    }

    /// Inverse of [`gather`](Self::gather).
    pub fn scatter(&self, blocks: MatRef<'_, f64>, batch: usize) -> Mat<f64> {
        let groups = self.group_count();
        assert_eq!(blocks.ncols(), groups * batch);
        let mut out = Mat::zeros(1usize << self.n_qubits, batch);
        for b in 0..batch {
            let mut column = out.col_mut(b);
            for (r, &base) in self.bases.iter().enumerate() {
                let src = blocks.col(b * groups + r);
                for (&x, &off) in src.iter().zip(&self.offsets) {
                    column[base + off] = x;
                }
            }
        }
        out
    }

    /// Applies `op` to every state of a batch with one matrix product.
    pub fn apply_batch(&self, op: MatRef<'_, f64>, states: MatRef<'_, f64>) -> Mat<f64> {
        let blocks = self.gather(states);
        let mixed = linalg::mul(op, blocks.as_ref());
        self.scatter(mixed.as_ref(), states.ncols())
    }
}

/// A real, unit-norm amplitude vector over `2^n` basis states.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    n_qubits: usize,
    amplitudes: Vec<f64>,
}

impl StateVector {
    /// Wraps amplitudes, checking the length is a power of two and the norm is 1.
    pub fn new(amplitudes: Vec<f64>) -> Result<Self> {
        let len = amplitudes.len();
        if len == 0 || !len.is_power_of_two() {
            return Err(Error::shape("2^n amplitudes", len));
        }
        let norm = amplitudes.iter().map(|a| a * a).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
            return Err(Error::NotNormalized { norm });
        }
        Ok(Self {
            n_qubits: len.trailing_zeros() as usize,
            amplitudes,
        })
    }

    pub(crate) fn from_normalized(amplitudes: Vec<f64>) -> Self {
        debug_assert!(amplitudes.len().is_power_of_two());
        Self {
            n_qubits: amplitudes.len().trailing_zeros() as usize,
            amplitudes,
        }
    }

    pub fn basis(n_qubits: usize, index: usize) -> Self {
        assert!(index < 1 << n_qubits);
        let mut amplitudes = vec![0.0; 1 << n_qubits];
        amplitudes[index] = 1.0;
        Self {
            n_qubits,
            amplitudes,
        }
    }

    pub fn uniform(n_qubits: usize) -> Self {
        let dim = 1usize << n_qubits;
        Self {
            n_qubits,
            amplitudes: vec![1.0 / (dim as f64).sqrt(); dim],
        }
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    pub fn into_amplitudes(self) -> Vec<f64> {
        self.amplitudes
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    /// Applies the orthogonal `op` to `qubits`, leaving the rest untouched.
    pub fn apply_on_subset(&self, op: MatRef<'_, f64>, qubits: &[usize]) -> Result<Self> {
        let layout = SubsetLayout::new(self.n_qubits, qubits)?;
        layout.check_operator(op)?;
        let mut amplitudes = self.amplitudes.clone();
        layout.apply_in_place(op, &mut amplitudes);
        Ok(Self {
            n_qubits: self.n_qubits,
            amplitudes,
        })
    }

    /// `self ⊗ other`; `self` occupies the high bits of the result index.
    pub fn tensor_product(&self, other: &StateVector) -> StateVector {
        let mut amplitudes = Vec::with_capacity(self.dim() * other.dim());
        for &a in &self.amplitudes {
            amplitudes.extend(other.amplitudes.iter().map(|&b| a * b));
        }
        StateVector {
            n_qubits: self.n_qubits + other.n_qubits,
            amplitudes,
        }
    }

    /// Exact computational-basis measurement probabilities.
    pub fn probabilities(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a * a).collect()
    }

    pub fn to_density(&self) -> DensityMatrix {
        let dim = self.dim();
        let mut entries = Vec::with_capacity(dim * dim);
        for &a in &self.amplitudes {
            entries.extend(self.amplitudes.iter().map(|&b| Complex64::new(a * b, 0.0)));
        }
        DensityMatrix {
            n_qubits: self.n_qubits,
            entries,
        }
    }
}

/// A `2^n × 2^n` Hermitian, unit-trace matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    n_qubits: usize,
    entries: Vec<Complex64>,
}

impl DensityMatrix {
    pub fn new(n_qubits: usize, entries: Vec<Complex64>) -> Result<Self> {
        let dim = 1usize << n_qubits;
        if entries.len() != dim * dim {
            return Err(Error::shape(format!("{dim}x{dim} entries"), entries.len()));
        }
        let rho = Self { n_qubits, entries };
        let herm = rho.hermiticity_defect();
        if !(herm <= DENSITY_TOLERANCE) {
            return Err(Error::InvalidConfig(format!(
                "density matrix not Hermitian (defect {herm:.3e})"
            )));
        }
        let trace = rho.trace();
        if !((trace.re - 1.0).abs() <= DENSITY_TOLERANCE && trace.im.abs() <= DENSITY_TOLERANCE) {
            return Err(Error::InvalidConfig(format!(
                "density matrix trace {trace} is not 1"
            )));
        }
        Ok(rho)
    }

    /// The maximally mixed state `I / 2^n`.
    pub fn maximally_mixed(n_qubits: usize) -> Self {
        let dim = 1usize << n_qubits;
        let mut entries = vec![Complex64::new(0.0, 0.0); dim * dim];
        for i in 0..dim {
            entries[i * dim + i] = Complex64::new(1.0 / dim as f64, 0.0);
        }
        Self { n_qubits, entries }
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn dim(&self) -> usize {
        1 << self.n_qubits
    }

    pub fn entries(&self) -> &[Complex64] {
        &self.entries
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [Complex64] {
        &mut self.entries
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.entries[row * self.dim() + col]
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.dim()).map(|i| self.get(i, i)).sum()
    }

    /// Real parts of the diagonal: the measurement distribution.
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.get(i, i).re).collect()
    }

    /// max |ρ − ρ†|.
    pub fn hermiticity_defect(&self) -> f64 {
        let dim = self.dim();
        let mut worst = 0.0f64;
        for i in 0..dim {
            for j in i..dim {
                worst = worst.max((self.get(i, j) - self.get(j, i).conj()).norm());
            }
        }
        worst
    }

    /// `ρ → O ρ Oᵀ` with `O` acting on `qubits`.
    pub fn apply_on_subset(&self, op: MatRef<'_, f64>, qubits: &[usize]) -> Result<Self> {
        let layout = SubsetLayout::new(self.n_qubits, qubits)?;
        layout.check_operator(op)?;
        let mut out = self.clone();
        out.conjugate_in_place(op, &layout);
        Ok(out)
    }

    pub(crate) fn conjugate_in_place(&mut self, op: MatRef<'_, f64>, layout: &SubsetLayout) {
        let dim = self.dim();
        let d = layout.block_dim();
        let mut buf = vec![Complex64::new(0.0, 0.0); d];
        // rows: ρ ← O ρ, column by column
        for col in 0..dim {
            for &base in layout.bases() {
                for (x, &off) in buf.iter_mut().zip(layout.offsets()) {
                    *x = self.entries[(base + off) * dim + col];
                }
                for (r, &off) in layout.offsets().iter().enumerate() {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for (c, &x) in buf.iter().enumerate() {
                        acc += x * op[(r, c)];
                    }
                    self.entries[(base + off) * dim + col] = acc;
                }
            }
        }
        // columns: ρ ← ρ Oᵀ, row by row
        for row in 0..dim {
            let line = &mut self.entries[row * dim..(row + 1) * dim];
            for &base in layout.bases() {
                for (x, &off) in buf.iter_mut().zip(layout.offsets()) {
                    *x = line[base + off];
                }
                for (r, &off) in layout.offsets().iter().enumerate() {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for (c, &x) in buf.iter().enumerate() {
                        acc += x * op[(r, c)];
                    }
                    line[base + off] = acc;
                }
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::oracle::kron_expand;
    use crate::rng;
    use faer::Mat;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    pub(crate) fn random_state(n: usize, seed: u64) -> StateVector {
        let mut r = rng::stream(seed, &[0x5eed]);
        let v: Vec<f64> = (0..1 << n).map(|_| r.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        StateVector::new(v.into_iter().map(|x| x / norm).collect()).unwrap()
    }

    pub(crate) fn random_orthogonal(d: usize, seed: u64) -> Mat<f64> {
        let mut r = rng::stream(seed, &[0x0e7]);
        let m = Mat::from_fn(d, d, |_, _| r.sample(StandardNormal));
        crate::qfilter::project_orthogonal(m.as_ref()).unwrap()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn identity_leaves_state_unchanged() {
        let psi = random_state(6, 1);
        let out = psi
            .apply_on_subset(Mat::<f64>::identity(16, 16).as_ref(), &[0, 1, 3, 4])
            .unwrap();
        assert_eq!(out, psi);
    }

    #[test]
    fn bit_flip_on_least_significant_qubit() {
        let x = Mat::from_fn(2, 2, |i, j| if i != j { 1.0 } else { 0.0 });
        let out = StateVector::basis(2, 0).apply_on_subset(x.as_ref(), &[0]).unwrap();
        assert_eq!(out, StateVector::basis(2, 1));
    }

    #[test]
    fn random_op_matches_full_matrix_oracle() {
        let psi = random_state(3, 2);
        let op = random_orthogonal(4, 3);
        let full = kron_expand(op.as_ref(), &[0, 2], 3).unwrap();
        let expected: Vec<f64> = (0..8)
            .map(|i| (0..8).map(|j| full[(i, j)] * psi.amplitudes()[j]).sum())
            .collect();
        let out = psi.apply_on_subset(op.as_ref(), &[0, 2]).unwrap();
        assert!(max_diff(out.amplitudes(), &expected) <= 1e-12);
    }

    #[test]
    fn subset_errors() {
        let psi = StateVector::uniform(3);
        let id4 = Mat::<f64>::identity(4, 4);
        assert!(matches!(
            psi.apply_on_subset(id4.as_ref(), &[1, 1]),
            Err(Error::DuplicateQubit(1))
        ));
        assert!(matches!(
            psi.apply_on_subset(id4.as_ref(), &[0, 3]),
            Err(Error::QubitOutOfRange { qubit: 3, .. })
        ));
        let mut bad = id4.clone();
        bad[(0, 1)] = 0.5;
        assert!(matches!(
            psi.apply_on_subset(bad.as_ref(), &[0, 1]),
            Err(Error::NonOrthogonalOperator { .. })
        ));
        assert!(matches!(
            psi.apply_on_subset(id4.as_ref(), &[0]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn tensor_product_examples() {
        let zero = StateVector::basis(1, 0);
        let one = StateVector::basis(1, 1);
        assert_eq!(zero.tensor_product(&one), StateVector::basis(2, 1));

        let u = StateVector::uniform(2).tensor_product(&StateVector::uniform(2));
        assert_eq!(u.n_qubits(), 4);
        assert!(u.amplitudes().iter().all(|&a| (a - 0.25).abs() < 1e-15));

        let s = StateVector::new(vec![0.6, 0.8]).unwrap();
        let ss = s.tensor_product(&s);
        assert!(max_diff(ss.amplitudes(), &[0.36, 0.48, 0.48, 0.64]) < 1e-15);
    }

    #[test]
    fn probabilities_examples() {
        let p = StateVector::basis(6, 5).probabilities();
        assert_eq!(p.iter().position(|&x| x == 1.0), Some(5));
        assert_eq!(p.iter().sum::<f64>(), 1.0);
        let u = StateVector::uniform(6).probabilities();
        assert!(u.iter().all(|&x| (x - 1.0 / 64.0).abs() < 1e-15));
        let s = StateVector::new(vec![0.6, 0.8]).unwrap().probabilities();
        assert!(max_diff(&s, &[0.36, 0.64]) < 1e-15);
    }

    #[test]
    fn density_examples() {
        let rho = StateVector::basis(1, 0).to_density();
        assert_eq!(rho.diagonal(), vec![1.0, 0.0]);
        assert_eq!(rho.get(0, 1), Complex64::new(0.0, 0.0));

        let rho = StateVector::new(vec![0.6, 0.8]).unwrap().to_density();
        let expected = [[0.36, 0.48], [0.48, 0.64]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((rho.get(i, j).re - expected[i][j]).abs() < 1e-15);
                assert_eq!(rho.get(i, j).im, 0.0);
            }
        }
        for seed in 0..100 {
            let rho = random_state(3, 100 + seed).to_density();
            assert!((rho.trace().re - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn density_conjugation_matches_pure_state_route() {
        for seed in 0..20 {
            let psi = random_state(3, seed);
            let op = random_orthogonal(4, 50 + seed);
            let qubits = [[0, 1], [1, 2], [2, 0]][seed as usize % 3];
            let via_state = psi.apply_on_subset(op.as_ref(), &qubits).unwrap().to_density();
            let via_rho = psi.to_density().apply_on_subset(op.as_ref(), &qubits).unwrap();
            for (a, b) in via_state.entries().iter().zip(via_rho.entries()) {
                assert!((a - b).norm() <= 1e-12);
            }
        }
        let rho = random_state(3, 7).to_density();
        let same = rho
            .apply_on_subset(Mat::<f64>::identity(2, 2).as_ref(), &[1])
            .unwrap();
        assert_eq!(same, rho);
    }

    #[test]
    fn density_conjugation_preserves_trace_of_mixed_states() {
        let psi = random_state(3, 9).to_density();
        let mixed = DensityMatrix::new(
            3,
            psi.entries()
                .iter()
                .zip(DensityMatrix::maximally_mixed(3).entries())
                .map(|(a, b)| a * 0.3 + b * 0.7)
                .collect(),
        )
        .unwrap();
        let op = random_orthogonal(8, 4);
        let out = mixed.apply_on_subset(op.as_ref(), &[2, 0, 1]).unwrap();
        assert!((out.trace().re - 1.0).abs() <= 1e-10);
        assert!(out.hermiticity_defect() <= 1e-10);
    }

    #[test]
    fn batch_kernel_matches_single_state_kernel() {
        let op = random_orthogonal(16, 11);
        let layout = SubsetLayout::new(6, &[5, 0, 3, 2]).unwrap();
        let states: Vec<StateVector> = (0..5).map(|s| random_state(6, 200 + s)).collect();
        let batch = Mat::from_fn(64, 5, |i, b| states[b].amplitudes()[i]);
        let out = layout.apply_batch(op.as_ref(), batch.as_ref());
        for (b, psi) in states.iter().enumerate() {
            let single = psi.apply_on_subset(op.as_ref(), &[5, 0, 3, 2]).unwrap();
            let column: Vec<f64> = out.col(b).iter().copied().collect();
            assert!(max_diff(single.amplitudes(), &column) <= 1e-13);
        }
        let round_trip = layout.scatter(layout.gather(batch.as_ref()).as_ref(), 5);
        assert_eq!(round_trip, batch);
    }

    #[test]
    fn tensor_product_is_associative() {
        let a = random_state(1, 1);
        let b = random_state(2, 2);
        let c = random_state(1, 3);
        let left = a.tensor_product(&b).tensor_product(&c);
        let right = a.tensor_product(&b.tensor_product(&c));
        assert!(max_diff(left.amplitudes(), right.amplitudes()) <= 1e-16);
    }

    fn subset_strategy() -> impl Strategy<Value = (usize, Vec<usize>, u64)> {
        (1usize..=6)
            .prop_flat_map(|n| {
                let k = 1..=n.min(4);
                (Just(n), k)
            })
            .prop_flat_map(|(n, k)| {
                (
                    Just(n),
                    Just((0..n).collect::<Vec<_>>()).prop_shuffle().prop_map(move |v| v[..k].to_vec()),
                    any::<u64>(),
                )
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn subset_apply_agrees_with_kron_expand((n, qubits, seed) in subset_strategy()) {
            let psi = random_state(n, seed);
            let op = random_orthogonal(1 << qubits.len(), seed ^ 0xabc);
            let full = kron_expand(op.as_ref(), &qubits, n).unwrap();
            let dim = 1 << n;
            let expected: Vec<f64> = (0..dim)
                .map(|i| (0..dim).map(|j| full[(i, j)] * psi.amplitudes()[j]).sum())
                .collect();
            let out = psi.apply_on_subset(op.as_ref(), &qubits).unwrap();
            prop_assert!(max_diff(out.amplitudes(), &expected) <= 1e-12);
            prop_assert!((out.norm() - 1.0).abs() <= 1e-10);
        }

        #[test]
        fn composition_on_one_subset((n, qubits, seed) in subset_strategy()) {
            let psi = random_state(n, seed);
            let d = 1 << qubits.len();
            let op1 = random_orthogonal(d, seed ^ 1);
            let op2 = random_orthogonal(d, seed ^ 2);
            let twice = psi
                .apply_on_subset(op1.as_ref(), &qubits).unwrap()
                .apply_on_subset(op2.as_ref(), &qubits).unwrap();
            let product = crate::linalg::mul(op2.as_ref(), op1.as_ref());
            let once = psi.apply_on_subset(product.as_ref(), &qubits).unwrap();
            prop_assert!(max_diff(twice.amplitudes(), once.amplitudes()) <= 1e-12);
        }
    }
}
