//! Slow, simple reference implementations.
//!
//! Nothing here is used on a training or evaluation path. The functions back
//! the test suites and the `verify` command ([`suites`]).

use faer::linalg::solvers::DenseSolveCore;
use faer::{Mat, MatRef};

use crate::error::{Error, Result};
use crate::linalg;
use crate::state::SubsetLayout;

pub mod suites;

/// Two full-matrix constructions must agree to this before `kron_expand` returns.
pub const SELF_AGREEMENT: f64 = 1e-13;

/// The `2^n × 2^n` matrix of `op` acting on `qubits` (identity elsewhere).
///
/// Built twice: once as a bit permutation of `I ⊗ op`, once entry by entry.
pub fn kron_expand(op: MatRef<'_, f64>, qubits: &[usize], n_qubits: usize) -> Result<Mat<f64>> {
    SubsetLayout::new(n_qubits, qubits)?;
    let k = qubits.len();
    let d = 1usize << k;
    if op.nrows() != d || op.ncols() != d {
        return Err(Error::shape(format!("{d}x{d}"), format!("{}x{}", op.nrows(), op.ncols())));
    }
    let dim = 1usize << n_qubits;

    // Route 1: op on the low k bits, block diagonal; then relabel bits.
    let rest: Vec<usize> = (0..n_qubits).filter(|q| !qubits.contains(q)).collect();
    let relabel = |local: usize| -> usize {
        let mut full = 0;
        for (j, &q) in qubits.iter().enumerate() {
            full |= (local >> j & 1) << q;
        }
        for (j, &q) in rest.iter().enumerate() {
            full |= (local >> (k + j) & 1) << q;
        }
        full
    };
    let mut permuted = Mat::zeros(dim, dim);
    for block in 0..dim >> k {
        for s in 0..d {
            for t in 0..d {
                let a = relabel(block << k | s);
                let b = relabel(block << k | t);
                permuted[(a, b)] = op[(s, t)];
            }
        }
    }

    // Route 2: ⟨i|O|j⟩ = op[sub(i), sub(j)] when the untouched bits agree.
    let mask: usize = qubits.iter().map(|&q| 1usize << q).sum();
    let sub = |i: usize| -> usize {
        qubits
            .iter()
            .enumerate()
            .map(|(j, &q)| (i >> q & 1) << j)
            .sum()
    };
    let direct = Mat::from_fn(dim, dim, |i, j| {
        if i & !mask == j & !mask {
            op[(sub(i), sub(j))]
        } else {
            0.0
        }
    });

    let deviation = linalg::max_abs_diff(permuted.as_ref(), direct.as_ref());
    if !(deviation <= SELF_AGREEMENT) {
        return Err(Error::OracleSelfDisagreement { deviation });
    }
    Ok(direct)
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Result<Vec<f64>> {
    let mut point = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        point[i] = x[i] + eps;
        let up = f(&point);
        point[i] = x[i] - eps;
        let down = f(&point);
        point[i] = x[i];
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFiniteFunction);
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

pub const NEWTON_TOLERANCE: f64 = 1e-12;
pub const NEWTON_MAX_ITERATIONS: usize = 100;

/// Orthogonal polar factor by the iteration `X ← (X + X⁻ᵀ)/2`.
pub fn polar_newton(m: MatRef<'_, f64>) -> Result<Mat<f64>> {
    polar_newton_counted(m).map(|(q, _)| q)
}

/// [`polar_newton`] plus the number of iterations it took.
pub fn polar_newton_counted(m: MatRef<'_, f64>) -> Result<(Mat<f64>, usize)> {
    if m.nrows() != m.ncols() {
        return Err(Error::shape("square matrix", format!("{}x{}", m.nrows(), m.ncols())));
    }
    let mut x = m.to_owned();
    for iteration in 1..=NEWTON_MAX_ITERATIONS {
        let inverse = x.partial_piv_lu().inverse();
        if !linalg::is_finite(inverse.as_ref()) || inverse.norm_max() > 1e15 {
            return Err(Error::SingularInput);
        }
        x = Mat::from_fn(x.nrows(), x.ncols(), |i, j| 0.5 * (x[(i, j)] + inverse[(j, i)]));
        if linalg::orthogonality_defect(x.as_ref()) <= NEWTON_TOLERANCE {
            return Ok((x, iteration));
        }
    }
    Err(Error::NoConvergence(NEWTON_MAX_ITERATIONS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qfilter::project_orthogonal;
    use crate::rng;
    use rand::Rng;

    fn pauli_x() -> Mat<f64> {
        Mat::from_fn(2, 2, |i, j| if i != j { 1.0 } else { 0.0 })
    }

    #[test]
    fn bit_flip_on_qubit_zero_is_identity_kron_x() {
        let full = kron_expand(pauli_x().as_ref(), &[0], 2).unwrap();
        let expected = Mat::from_fn(4, 4, |i, j| if i / 2 == j / 2 && i != j { 1.0 } else { 0.0 });
        assert!(full == expected);
    }

    #[test]
    fn identity_expands_to_identity() {
        let full = kron_expand(Mat::<f64>::identity(4, 4).as_ref(), &[3, 1], 4).unwrap();
        assert!(full == Mat::<f64>::identity(16, 16));
    }

    #[test]
    fn random_op_constructions_agree() {
        let mut r = rng::stream(1, &[]);
        let m = Mat::from_fn(4, 4, |_, _| r.random::<f64>() - 0.5);
        let op = project_orthogonal(m.as_ref()).unwrap();
        // kron_expand itself fails if its two routes disagree beyond 1e-13
        let full = kron_expand(op.as_ref(), &[1, 2], 4).unwrap();
        assert!(linalg::orthogonality_defect(full.as_ref()) < 1e-13);
    }

    #[test]
    fn finite_differences_of_simple_functions() {
        let x = [0.3, -1.2, 2.5];
        let g = finite_diff_grad(|v| v.iter().map(|a| a * a).sum(), &x, 1e-5).unwrap();
        for (gi, xi) in g.iter().zip(&x) {
            assert!((gi - 2.0 * xi).abs() < 1e-8);
        }
        let g = finite_diff_grad(|_| 4.2, &x, 1e-5).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-9));
        assert!(matches!(
            finite_diff_grad(|v| if v[0] > 0.3 { f64::NAN } else { 0.0 }, &x, 1e-5),
            Err(Error::NonFiniteFunction)
        ));
    }

    #[test]
    fn finite_differences_match_exact_projection_gradient() {
        use crate::qfilter::{grad_through_projection, GradMode};
        let mut r = rng::stream(2, &[]);
        let a = Mat::from_fn(4, 4, |_, _| r.random::<f64>() - 0.5);
        let m = Mat::from_fn(4, 4, |i, j| r.random::<f64>() - 0.5 + if i == j { 3.0 } else { 0.0 });
        let exact = grad_through_projection(m.as_ref(), a.as_ref(), GradMode::ExactSvd).unwrap();
        let fd = finite_diff_grad(
            |x| {
                let q = project_orthogonal(linalg::from_row_major(4, 4, x).as_ref()).unwrap();
                (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).map(|(i, j)| a[(i, j)] * q[(i, j)]).sum()
            },
            &linalg::to_row_major(m.as_ref()),
            1e-5,
        )
        .unwrap();
        let exact = linalg::to_row_major(exact.as_ref());
        let err: f64 = exact.iter().zip(&fd).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = exact.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(err / scale <= 1e-5);
    }

    #[test]
    fn newton_fixed_points() {
        let mut r = rng::stream(3, &[]);
        let m = Mat::from_fn(6, 6, |_, _| r.random::<f64>() - 0.5);
        let q = project_orthogonal(m.as_ref()).unwrap();
        let (out, iterations) = polar_newton_counted(q.as_ref()).unwrap();
        assert_eq!(iterations, 1);
        assert!(linalg::max_abs_diff(out.as_ref(), q.as_ref()) < 1e-13);

        let two = Mat::<f64>::identity(5, 5) * faer::Scale(2.0);
        let out = polar_newton(two.as_ref()).unwrap();
        assert!(linalg::max_abs_diff(out.as_ref(), Mat::<f64>::identity(5, 5).as_ref()) < 1e-13);
    }

    #[test]
    fn newton_matches_svd_route() {
        let mut r = rng::stream(4, &[]);
        let m = Mat::from_fn(8, 8, |i, j| r.random::<f64>() - 0.5 + if i == j { 2.0 } else { 0.0 });
        let a = polar_newton(m.as_ref()).unwrap();
        let b = project_orthogonal(m.as_ref()).unwrap();
        assert!(linalg::max_abs_diff(a.as_ref(), b.as_ref()) <= 1e-9);
    }

    #[test]
    fn newton_rejects_singular_input() {
        let mut m = Mat::<f64>::identity(3, 3);
        m[(2, 2)] = 0.0;
        assert!(matches!(polar_newton(m.as_ref()), Err(Error::SingularInput)));
    }
}
