//! Symmetric eigendecomposition via cyclic Jacobi rotations.
//!
//! Matrices here are small (feature dimension squared), so the quadratic
//! sweep cost is irrelevant and Jacobi's unconditional stability on
//! symmetric input is worth more than speed.

use crate::error::MetricsError;

fn frobenius(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn off_diag_norm(n: usize, a: &[f64]) -> f64 {
    let mut acc = 0.0;
    for p in 0..n {
        for q in (p + 1)..n {
            acc += a[p * n + q] * a[p * n + q];
        }
    }
    (2.0 * acc).sqrt()
}

/// Eigenvalues and eigenvectors of a symmetric matrix (row-major, n×n).
/// Returns `(values, vectors)` with eigenvectors stored as columns, so
/// `a = v · diag(values) · vᵀ`. Values are unordered.
pub fn sym_eigen(n: usize, a_in: &[f64]) -> Result<(Vec<f64>, Vec<f64>), MetricsError> {
    assert_eq!(a_in.len(), n * n, "matrix storage does not match dimension");
    let mut a = a_in.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = frobenius(&a).max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        if off_diag_norm(n, &a) <= 1e-13 * scale {
            let evals = (0..n).map(|i| a[i * n + i]).collect();
            return Ok((evals, v));
        }
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    // Asymptote of the stable root for giant theta.
                    1.0 / (2.0 * theta)
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[p * n + k] = a[k * n + p];
                    a[k * n + q] = s * akp + c * akq;
                    a[q * n + k] = a[k * n + q];
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(MetricsError::EigenNoConvergence)
}

/// Symmetric positive semi-definite square root. Negative eigenvalues
/// (rounding artifacts of nearly singular input) are clamped to zero.
pub fn sym_sqrt(n: usize, a: &[f64]) -> Result<Vec<f64>, MetricsError> {
    let (evals, vecs) = sym_eigen(n, a)?;
    let roots: Vec<f64> = evals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += vecs[i * n + k] * roots[k] * vecs[j * n + k];
            }
            out[i * n + j] = acc;
        }
    }
    Ok(out)
}

/// Row-major product of two n×n matrices.
pub fn mat_mul(n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}
