//! Thin Householder QR.

use super::Matrix;
use crate::error::{Error, Result};

/// Thin QR of a tall matrix (rows >= cols): `q` has orthonormal columns,
/// `r` is upper-triangular with non-negative diagonal, and `q * r`
/// reconstructs the input. Rank-deficient inputs are allowed; exhausted
/// columns simply leave zero diagonal entries in `r`.
pub fn qr_thin(a: &Matrix) -> Result<(Matrix, Matrix)> {
    let n = a.rows();
    let c = a.cols();
    if n < c {
        return Err(Error::Shape {
            op: "qr_thin",
            detail: format!("{n}x{c} has fewer rows than columns"),
        });
    }
    let mut w = a.clone();
    // Householder vectors (length n-k each) and their 2/v'v factors.
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(c);
    let mut betas = vec![0.0; c];

    for k in 0..c {
        let mut norm2 = 0.0;
        for i in k..n {
            norm2 += w[(i, k)] * w[(i, k)];
        }
        let norm = norm2.sqrt();
        if norm == 0.0 {
            vs.push(Vec::new());
            continue;
        }
        let akk = w[(k, k)];
        let sign = if akk >= 0.0 { 1.0 } else { -1.0 };
        let mut v: Vec<f64> = (k..n).map(|i| w[(i, k)]).collect();
        v[0] += sign * norm;
        let vtv: f64 = v.iter().map(|x| x * x).sum();
        let beta = 2.0 / vtv;
        // Apply the reflector to the remaining columns.
        for j in k..c {
            let mut s = 0.0;
            for (idx, vi) in v.iter().enumerate() {
                s += vi * w[(k + idx, j)];
            }
            s *= beta;
            for (idx, vi) in v.iter().enumerate() {
                w[(k + idx, j)] -= s * vi;
            }
        }
        betas[k] = beta;
        vs.push(v);
    }

    // R is the upper triangle of the reduced working matrix.
    let mut r = Matrix::zeros(c, c);
    for i in 0..c {
        for j in i..c {
            r[(i, j)] = w[(i, j)];
        }
    }

    // Thin Q: apply reflectors in reverse to the first c identity columns.
    let mut q = Matrix::zeros(n, c);
    for j in 0..c {
        q[(j, j)] = 1.0;
    }
    for k in (0..c).rev() {
        let v = &vs[k];
        if v.is_empty() {
            continue;
        }
        let beta = betas[k];
        for j in 0..c {
            let mut s = 0.0;
            for (idx, vi) in v.iter().enumerate() {
                s += vi * q[(k + idx, j)];
            }
            s *= beta;
            for (idx, vi) in v.iter().enumerate() {
                q[(k + idx, j)] -= s * vi;
            }
        }
    }

    // Sign convention: non-negative diagonal of R.
    for k in 0..c {
        if r[(k, k)] < 0.0 {
            for j in k..c {
                r[(k, j)] = -r[(k, j)];
            }
            for i in 0..n {
                q[(i, k)] = -q[(i, k)];
            }
        }
    }

    Ok((q, r))
}
