//! Closed-form orthogonal Procrustes solution.

use super::{matmul_nt, svd_small, Matrix};
use crate::error::{Error, Result};

/// Orthogonal matrix `Q` maximizing `trace(Q^T m)` over O(r), i.e. the
/// solution of the orthogonal Procrustes problem: `Q = A B^T` where
/// `A S B^T` is an SVD of `m`.
///
/// Degenerate inputs (repeated or zero singular values) still return a
/// valid orthogonal matrix under the deterministic SVD sign convention;
/// the maximizer is only unique when the singular values are distinct.
/// The result is invariant under positive rescaling of `m`.
pub fn procrustes(m: &Matrix) -> Result<Matrix> {
    if m.rows() != m.cols() {
        return Err(Error::Shape {
            op: "procrustes",
            detail: format!("{}x{} is not square", m.rows(), m.cols()),
        });
    }
    let svd = svd_small(m)?;
    matmul_nt(&svd.left, &svd.right)
}
