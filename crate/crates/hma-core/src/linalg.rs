//! Small dense linear algebra on flat row-major buffers.
//!
//! Every matrix in this crate is tiny (3x3 design moments, KxK endpoint
//! covariances with K capped at 12), so the routines here favour clarity
//! and strict error reporting over speed. Symmetric eigendecomposition is
//! done with cyclic Jacobi sweeps, which doubles as the rank-revealing
//! factorization: for the positive semidefinite systems we solve, the
//! eigenvalues are the singular values.

use crate::error::{Error, Result};

/// Relative rank tolerance: eigenvalues below `RANK_REL_TOL * lambda_max`
/// are treated as zero when solving or inverting.
pub const RANK_REL_TOL: f64 = 1e-10;

/// Lower Cholesky factor of a symmetric positive definite matrix.
///
/// `a` is n x n row-major; only the lower triangle is read. Fails with
/// `NotPositiveDefinite` when a pivot drops to zero or below.
pub fn cholesky(a: &[f64], n: usize, context: &str) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::NotPositiveDefinite(context.to_string()));
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Log-determinant from a lower Cholesky factor.
pub fn chol_logdet(l: &[f64], n: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..n {
        acc += l[i * n + i].ln();
    }
    2.0 * acc
}

/// Solve A x = b given the lower Cholesky factor of A.
pub fn chol_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(b.len(), n);
    let mut x = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            x[i] -= l[i * n + k] * x[k];
        }
        x[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            x[i] -= l[k * n + i] * x[k];
        }
        x[i] /= l[i * n + i];
    }
    x
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, q)` with `a = q * diag(eigenvalues) * q'` and the
/// eigenvectors stored as columns of the row-major matrix `q`. Eigenvalues
/// are sorted in decreasing order.
pub fn sym_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    for _sweep in 0..64 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frobenius(&m, n)) {
            break;
        }
        for p in 0..n {
            for r in (p + 1)..n {
                let apq = m[p * n + r];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[r * n + r];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + r];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + r] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[r * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[r * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let qkp = q[k * n + p];
                    let qkq = q[k * n + r];
                    q[k * n + p] = c * qkp - s * qkq;
                    q[k * n + r] = s * qkp + c * qkq;
                }
            }
        }
    }
    let mut evals: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| evals[j].partial_cmp(&evals[i]).unwrap());
    let sorted_vals: Vec<f64> = order.iter().map(|&i| evals[i]).collect();
    let mut sorted_q = vec![0.0; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        for row in 0..n {
            sorted_q[row * n + new_col] = q[row * n + old_col];
        }
    }
    evals = sorted_vals;
    (evals, sorted_q)
}

fn frobenius(a: &[f64], n: usize) -> f64 {
    a.iter().take(n * n).map(|x| x * x).sum::<f64>().sqrt()
}

/// Solve the symmetric positive semidefinite system A x = b through a
/// rank-revealing eigendecomposition.
///
/// Fails with `Singular` when any eigenvalue falls below
/// `RANK_REL_TOL * lambda_max`, i.e. the solution is not unique.
pub fn solve_sym_rank_revealing(a: &[f64], n: usize, b: &[f64], context: &str) -> Result<Vec<f64>> {
    let (evals, q) = sym_eigen(a, n);
    let lambda_max = evals.first().copied().unwrap_or(0.0).max(0.0);
    let floor = RANK_REL_TOL * lambda_max;
    if lambda_max <= 0.0 || evals.iter().any(|&l| l <= floor) {
        return Err(Error::Singular {
            context: context.to_string(),
            message: format!(
                "eigenvalue below relative tolerance {RANK_REL_TOL:e} (spectrum {evals:?})"
            ),
        });
    }
    // x = Q diag(1/lambda) Q' b
    let mut qtb = vec![0.0; n];
    for j in 0..n {
        for i in 0..n {
            qtb[j] += q[i * n + j] * b[i];
        }
    }
    for j in 0..n {
        qtb[j] /= evals[j];
    }
    let mut x = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            x[i] += q[i * n + j] * qtb[j];
        }
    }
    Ok(x)
}

/// Rank-revealing inverse of a symmetric positive definite matrix.
pub fn inv_sym_rank_revealing(a: &[f64], n: usize, context: &str) -> Result<Vec<f64>> {
    let (evals, q) = sym_eigen(a, n);
    let lambda_max = evals.first().copied().unwrap_or(0.0).max(0.0);
    let floor = RANK_REL_TOL * lambda_max;
    if lambda_max <= 0.0 || evals.iter().any(|&l| l <= floor) {
        return Err(Error::Singular {
            context: context.to_string(),
            message: format!(
                "eigenvalue below relative tolerance {RANK_REL_TOL:e} (spectrum {evals:?})"
            ),
        });
    }
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut acc = 0.0;
            for k in 0..n {
                acc += q[i * n + k] * q[j * n + k] / evals[k];
            }
            inv[i * n + j] = acc;
            inv[j * n + i] = acc;
        }
    }
    Ok(inv)
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix; eigenvalues with
/// magnitude below `RANK_REL_TOL * |lambda|_max` contribute nothing.
pub fn pinv_sym(a: &[f64], n: usize) -> Vec<f64> {
    let (evals, q) = sym_eigen(a, n);
    let lambda_max = evals.iter().fold(0.0f64, |m, &l| m.max(l.abs()));
    let floor = RANK_REL_TOL * lambda_max;
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut acc = 0.0;
            for k in 0..n {
                if evals[k].abs() > floor {
                    acc += q[i * n + k] * q[j * n + k] / evals[k];
                }
            }
            inv[i * n + j] = acc;
            inv[j * n + i] = acc;
        }
    }
    inv
}

/// Quadratic form x' A x for row-major A.
pub fn quad_form(a: &[f64], n: usize, x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += a[i * n + j] * x[j];
        }
        acc += x[i] * row;
    }
    acc
}

/// Sum with pairwise recursion so the result does not depend on how a
/// parallel producer chunked the inputs.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

/// Mean and sample standard deviation (divisor n - 1).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(xs) / n as f64;
    if n == 1 {
        return (mean, f64::NAN);
    }
    let devs: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&devs) / (n as f64 - 1.0);
    (mean, var.sqrt())
}
