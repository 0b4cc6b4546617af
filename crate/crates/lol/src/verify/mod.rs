//! Reference oracles and user-facing property suites.
//!
//! The oracles here are deliberately independent of the main numerics
//! paths: a plain triple-loop product, a two-sided Jacobi eigensolver on
//! the Gram matrix, a brute-force O(2) sweep, and a straight-line MLP
//! evaluation. They back both the test suite and the `check` command.

mod suites;

pub use suites::{
    equivariance_suite, gradients_suite, invariance_suite, oalign_suite, oracles_suite,
    CheckReport, PropertyReport, SuiteConfig,
};

use crate::numerics::Matrix;

/// Triple-loop matrix product, row-major, left-to-right.
pub fn matmul_naive(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows(), "matmul_naive shape mismatch");
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += a[(i, k)] * b[(k, j)];
            }
            out[(i, j)] = acc;
        }
    }
    out
}

/// Singular values of `a` as square roots of the eigenvalues of `a^T a`,
/// computed by an independent two-sided Jacobi eigenvalue iteration.
/// Returned descending.
pub fn singular_values_via_gram_eigen(a: &Matrix) -> Vec<f64> {
    let at = a.transpose();
    let gram = matmul_naive(&at, a);
    let mut eig = symmetric_eigenvalues_jacobi(&gram);
    eig.sort_by(|x, y| y.partial_cmp(x).expect("finite eigenvalues"));
    eig.into_iter().map(|l| l.max(0.0).sqrt()).collect()
}

/// Eigenvalues of a symmetric matrix via classical two-sided Jacobi
/// rotations (unsorted).
pub fn symmetric_eigenvalues_jacobi(s: &Matrix) -> Vec<f64> {
    assert_eq!(s.rows(), s.cols(), "symmetric eigensolver needs square input");
    let n = s.rows();
    let mut a = s.clone();
    let off = |a: &Matrix| -> f64 {
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    sum += a[(i, j)] * a[(i, j)];
                }
            }
        }
        sum
    };
    let frob2: f64 = s.data().iter().map(|x| x * x).sum();
    let tol = 1e-28 * frob2.max(f64::MIN_POSITIVE);
    for _ in 0..200 {
        if off(&a) <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let srot = c * t;
                // A <- J^T A J on rows/columns p and q.
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - srot * akq;
                    a[(k, q)] = srot * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - srot * aqk;
                    a[(q, k)] = srot * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[(i, i)]).collect()
}

/// Best value of `trace(Q^T m)` over a dense sweep of O(2): rotations
/// and reflections with the given angular step.
pub fn procrustes_sweep_best_2x2(m: &Matrix, step: f64) -> f64 {
    assert_eq!((m.rows(), m.cols()), (2, 2));
    let mut best = f64::NEG_INFINITY;
    let mut theta = 0.0;
    while theta < 2.0 * std::f64::consts::PI {
        let (s, c) = theta.sin_cos();
        // Rotation [c -s; s c]: trace(Q^T M) = c*(m00+m11) + s*(m10-m01).
        let rot = c * (m[(0, 0)] + m[(1, 1)]) + s * (m[(1, 0)] - m[(0, 1)]);
        // Reflection [c s; s -c]: trace(Q^T M) = c*(m00-m11) + s*(m01+m10).
        let refl = c * (m[(0, 0)] - m[(1, 1)]) + s * (m[(0, 1)] + m[(1, 0)]);
        best = best.max(rot).max(refl);
        theta += step;
    }
    best
}

/// Straight-line reference evaluation of a rectifier MLP, independent of
/// the batched implementation.
pub fn mlp_forward_reference(
    weights: &[Matrix],
    biases: &[Vec<f64>],
    input: &[f64],
) -> Vec<f64> {
    assert_eq!(weights.len(), biases.len());
    let mut x = input.to_vec();
    for (li, (w, b)) in weights.iter().zip(biases).enumerate() {
        let mut y = vec![0.0; w.rows()];
        for i in 0..w.rows() {
            let mut acc = b[i];
            for j in 0..w.cols() {
                acc += w[(i, j)] * x[j];
            }
            y[i] = acc;
        }
        if li + 1 < weights.len() {
            for v in y.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        x = y;
    }
    x
}

/// Relative deviation between two vectors: max absolute difference over
/// `max(1, largest magnitude entry)`.
pub fn relative_deviation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_deviation length mismatch");
    let scale = a
        .iter()
        .chain(b.iter())
        .fold(1.0f64, |m, x| m.max(x.abs()));
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gram_eigen_on_diagonal() {
        let a = Matrix::new(3, 3, vec![2.0, 0.0, 0.0, 0.0, -5.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let s = singular_values_via_gram_eigen(&a);
        assert!((s[0] - 5.0).abs() <= 1e-10);
        assert!((s[1] - 2.0).abs() <= 1e-10);
        assert!((s[2] - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn sweep_identity_attains_trace() {
        let m = Matrix::identity(2);
        let best = procrustes_sweep_best_2x2(&m, 1e-3);
        assert!(best <= 2.0 + 1e-12);
        assert!(best >= 2.0 - 1e-5);
    }

    #[test]
    fn relative_deviation_scales() {
        assert_eq!(relative_deviation(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        let d = relative_deviation(&[100.0, 0.0], &[100.0, 1.0]);
        assert!((d - 0.01).abs() <= 1e-12);
    }
}
