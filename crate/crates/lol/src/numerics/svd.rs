//! One-sided Jacobi SVD for small matrices.
//!
//! Cyclic column sweeps rotate pairs of columns until every pair is
//! numerically orthogonal. The rotation test is relative,
//! `|a_p . a_q| > REL_TOL * sqrt(|a_p|^2 |a_q|^2)`, which keeps the
//! normalized left vectors orthogonal even when singular values span
//! many orders of magnitude; at convergence every off-diagonal Gram
//! entry is also below the absolute gate `1e-14 * frobenius^2`, since
//! `sqrt(alpha*beta) <= frobenius^2` and `REL_TOL < 1e-14`.

use super::Matrix;
use crate::error::{Error, Result};

/// Largest admissible `min(rows, cols)`; the cyclic sweep is tuned for
/// small factors, not general dense matrices.
pub const SVD_DIM_CAP: usize = 128;

const REL_TOL: f64 = 1e-15;
const MAX_SWEEPS: usize = 100;

/// `left * diag(singular) * right^T` reconstructs the input.
///
/// `left` is rows x k and `right` is cols x k with k = min(rows, cols);
/// both have orthonormal columns. Singular values are descending and
/// non-negative. Sign convention: in each left singular vector the
/// entry of largest magnitude is non-negative, so the decomposition is
/// deterministic and replayable.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub left: Matrix,
    pub singular: Vec<f64>,
    pub right: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let k = self.singular.len();
        let mut scaled = self.left.clone();
        for i in 0..scaled.rows() {
            for j in 0..k {
                scaled[(i, j)] *= self.singular[j];
            }
        }
        super::matmul_nt(&scaled, &self.right).expect("factor shapes are consistent")
    }
}

pub fn svd_small(a: &Matrix) -> Result<SvdResult> {
    let k = a.rows().min(a.cols());
    if k > SVD_DIM_CAP {
        return Err(Error::Capability {
            op: "svd_small",
            detail: format!("min dimension {k} exceeds cap {SVD_DIM_CAP}"),
        });
    }
    if a.rows() < a.cols() {
        let t = svd_small(&a.transpose())?;
        // Transposing swaps the roles of the singular vector sets, and the
        // sign convention was applied to the other side; re-apply it here.
        let mut out = SvdResult { left: t.right, singular: t.singular, right: t.left };
        apply_sign_convention(&mut out);
        return Ok(out);
    }

    let n = a.rows();
    let m = a.cols();
    let mut w = a.clone();
    let mut v = Matrix::identity(m);

    let mut sweeps = 0;
    loop {
        let mut rotated = false;
        for p in 0..m {
            for q in p + 1..m {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..n {
                    let wp = w[(i, p)];
                    let wq = w[(i, q)];
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                if gamma == 0.0 || gamma.abs() <= REL_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let wp = w[(i, p)];
                    let wq = w[(i, q)];
                    w[(i, p)] = c * wp - s * wq;
                    w[(i, q)] = s * wp + c * wq;
                }
                for i in 0..m {
                    let vp = v[(i, p)];
                    let vq = v[(i, q)];
                    v[(i, p)] = c * vp - s * vq;
                    v[(i, q)] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
        sweeps += 1;
        if sweeps > MAX_SWEEPS {
            return Err(Error::Numerical(format!(
                "svd_small: Jacobi did not converge in {MAX_SWEEPS} sweeps"
            )));
        }
    }

    // Column norms are the singular values; sort descending.
    let mut order: Vec<usize> = (0..m).collect();
    let norms: Vec<f64> = (0..m)
        .map(|j| (0..n).map(|i| w[(i, j)] * w[(i, j)]).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).expect("finite norms"));

    let mut left = Matrix::zeros(n, m);
    let mut right = Matrix::zeros(m, m);
    let mut singular = vec![0.0; m];
    let mut zero_cols = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        singular[dst] = norms[src];
        if norms[src] > 0.0 {
            for i in 0..n {
                left[(i, dst)] = w[(i, src)] / norms[src];
            }
        } else {
            zero_cols.push(dst);
        }
        for i in 0..m {
            right[(i, dst)] = v[(i, src)];
        }
    }

    complete_zero_columns(&mut left, &zero_cols);

    let mut out = SvdResult { left, singular, right };
    apply_sign_convention(&mut out);
    Ok(out)
}

/// Fill columns belonging to exactly-zero singular values with a
/// deterministic orthonormal completion (Gram-Schmidt over identity
/// candidates in index order).
fn complete_zero_columns(left: &mut Matrix, zero_cols: &[usize]) {
    let n = left.rows();
    let k = left.cols();
    for &col in zero_cols {
        let mut chosen = None;
        for cand in 0..n {
            let mut vec: Vec<f64> = (0..n).map(|i| if i == cand { 1.0 } else { 0.0 }).collect();
            for j in 0..k {
                if j == col || (zero_cols.contains(&j) && j > col) {
                    continue;
                }
                let dot: f64 = (0..n).map(|i| left[(i, j)] * vec[i]).sum();
                for (i, vi) in vec.iter_mut().enumerate() {
                    *vi -= dot * left[(i, j)];
                }
            }
            let norm = vec.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                for v in vec.iter_mut() {
                    *v /= norm;
                }
                chosen = Some(vec);
                break;
            }
        }
        let vec = chosen.expect("completion candidate always exists for col < rows");
        for i in 0..n {
            left[(i, col)] = vec[i];
        }
    }
}

fn apply_sign_convention(svd: &mut SvdResult) {
    let n = svd.left.rows();
    let m = svd.right.rows();
    for j in 0..svd.singular.len() {
        let mut best = 0;
        for i in 1..n {
            if svd.left[(i, j)].abs() > svd.left[(best, j)].abs() {
                best = i;
            }
        }
        if svd.left[(best, j)] < 0.0 {
            for i in 0..n {
                svd.left[(i, j)] = -svd.left[(i, j)];
            }
            for i in 0..m {
                svd.right[(i, j)] = -svd.right[(i, j)];
            }
        }
    }
}

/// Ratio of largest to smallest singular value (infinite if singular).
pub fn condition_number(a: &Matrix) -> Result<f64> {
    let svd = svd_small(a)?;
    let smax = svd.singular[0];
    let smin = *svd.singular.last().expect("non-empty");
    if smin == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(smax / smin)
    }
}
