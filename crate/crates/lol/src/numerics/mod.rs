//! Deterministic small-matrix linear algebra.
//!
//! Everything downstream (group actions, featurizers, the equivariant
//! network) is built on this module. All arithmetic is f64 with fixed
//! summation order, so results are bit-reproducible across runs and
//! thread counts: each output element is accumulated by a single task
//! whose inner loop always walks the contraction index in ascending
//! order.

mod procrustes;
mod qr;
mod random;
mod svd;

pub use procrustes::procrustes;
pub use qr::qr_thin;
pub use random::{derive_seed, gaussian_matrix, random_gl, random_orthogonal};
pub use svd::{condition_number, svd_small, SvdResult, SVD_DIM_CAP};

use crate::error::{Error, Result};
use rayon::prelude::*;

/// Dense row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "Matrix::new",
                detail: format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::Shape {
                op: "Matrix::add",
                detail: format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

// Flop threshold above which matmuls fan rows out to the rayon pool.
// Parallelism never changes results: one task owns each output row.
const PAR_FLOPS: usize = 1 << 18;

fn mm_shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::Shape {
        op,
        detail: format!("{}x{} vs {}x{}", a.rows, a.cols, b.rows, b.cols),
    }
}

/// `a * b`, inner index ascending per output element.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(mm_shape_err("matmul", a, b));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(n, m);
    let body = |i: usize, row: &mut [f64]| {
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    };
    run_rows(&mut out.data, m, n * k * m, body);
    Ok(out)
}

/// `a * b^T`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(mm_shape_err("matmul_nt", a, b));
    }
    let (n, k, m) = (a.rows, a.cols, b.rows);
    let mut out = Matrix::zeros(n, m);
    let body = |i: usize, row: &mut [f64]| {
        let arow = &a.data[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            *o = acc;
        }
    };
    run_rows(&mut out.data, m, n * k * m, body);
    Ok(out)
}

/// `a^T * b`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(mm_shape_err("matmul_tn", a, b));
    }
    let (n, k, m) = (a.cols, a.rows, b.cols);
    let mut out = Matrix::zeros(n, m);
    let body = |i: usize, row: &mut [f64]| {
        for p in 0..k {
            let api = a.data[p * n + i];
            if api == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    };
    run_rows(&mut out.data, m, n * k * m, body);
    Ok(out)
}

fn run_rows(out: &mut [f64], row_len: usize, flops: usize, body: impl Fn(usize, &mut [f64]) + Sync) {
    if flops >= PAR_FLOPS && row_len > 0 {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(row_len).enumerate() {
            body(i, row);
        }
    }
}

/// `a * x` for a column vector `x`.
pub fn matvec(a: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    if a.cols != x.len() {
        return Err(Error::Shape {
            op: "matvec",
            detail: format!("{}x{} vs vec {}", a.rows, a.cols, x.len()),
        });
    }
    let mut y = vec![0.0; a.rows];
    for i in 0..a.rows {
        let row = a.row(i);
        let mut acc = 0.0;
        for p in 0..a.cols {
            acc += row[p] * x[p];
        }
        y[i] = acc;
    }
    Ok(y)
}

/// `a^T * x`.
pub fn matvec_t(a: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    if a.rows != x.len() {
        return Err(Error::Shape {
            op: "matvec_t",
            detail: format!("{}x{} vs vec {}", a.rows, a.cols, x.len()),
        });
    }
    let mut y = vec![0.0; a.cols];
    for p in 0..a.rows {
        let xp = x[p];
        if xp == 0.0 {
            continue;
        }
        let row = a.row(p);
        for (o, &av) in y.iter_mut().zip(row) {
            *o += xp * av;
        }
    }
    Ok(y)
}

/// Inverse via Gauss-Jordan with partial pivoting.
pub fn invert(m: &Matrix) -> Result<Matrix> {
    if m.rows != m.cols {
        return Err(Error::Shape {
            op: "invert",
            detail: format!("{}x{} is not square", m.rows, m.cols),
        });
    }
    let n = m.rows;
    let mut a = m.clone();
    let mut inv = Matrix::identity(n);
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if a[(r, col)].abs() > a[(pivot, col)].abs() {
                pivot = r;
            }
        }
        if a[(pivot, col)] == 0.0 {
            return Err(Error::Numerical(format!("invert: singular at column {col}")));
        }
        if pivot != col {
            for j in 0..n {
                a.data.swap(col * n + j, pivot * n + j);
                inv.data.swap(col * n + j, pivot * n + j);
            }
        }
        let d = a[(col, col)];
        for j in 0..n {
            a[(col, j)] /= d;
            inv[(col, j)] /= d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[(r, col)];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                a[(r, j)] -= f * a[(col, j)];
                inv[(r, j)] -= f * inv[(col, j)];
            }
        }
    }
    Ok(inv)
}

/// Largest absolute entry-wise difference.
pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    debug_assert_eq!((a.rows, a.cols), (b.rows, b.cols));
    a.data
        .iter()
        .zip(&b.data)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_zero() {
        let a = Matrix::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let i3 = Matrix::identity(3);
        let prod = matmul(&i3, &a).unwrap();
        assert_eq!(prod, a);
        let z = Matrix::zeros(2, 4);
        let az = matmul(&a, &z).unwrap();
        assert!(az.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = gaussian_matrix(3, 2, &mut seeded(41));
        let b = gaussian_matrix(2, 4, &mut seeded(42));
        let got = matmul(&a, &b).unwrap();
        let want = crate::verify::matmul_naive(&a, &b);
        assert!(max_abs_diff(&got, &want) <= 1e-12);
    }

    #[test]
    fn nt_tn_agree_with_explicit_transpose() {
        let a = gaussian_matrix(4, 3, &mut seeded(1));
        let b = gaussian_matrix(5, 3, &mut seeded(2));
        let nt = matmul_nt(&a, &b).unwrap();
        let explicit = matmul(&a, &b.transpose()).unwrap();
        assert!(max_abs_diff(&nt, &explicit) <= 1e-14);

        let c = gaussian_matrix(4, 5, &mut seeded(3));
        let tn = matmul_tn(&a, &c).unwrap();
        let explicit = matmul(&a.transpose(), &c).unwrap();
        assert!(max_abs_diff(&tn, &explicit) <= 1e-14);
    }

    #[test]
    fn invert_roundtrip() {
        let m = random_gl(4, 1e3, 99).unwrap();
        let inv = invert(&m).unwrap();
        let prod = matmul(&m, &inv).unwrap();
        assert!(max_abs_diff(&prod, &Matrix::identity(4)) <= 1e-10);
    }

    fn seeded(s: u64) -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(s)
    }
}
