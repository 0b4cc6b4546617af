//! The LoRA-update data model: factor pairs, group actions, and the
//! functional-equality oracle.
//!
//! An update holds per-layer factors `U` (n x r) and `V` (m x r); the
//! adapted weight delta is `U V^T`. The gauge group acts per layer as
//! `(U, V) -> (U R, V R^{-T})` for invertible `R`, which leaves every
//! dense product unchanged.

use crate::error::{Error, Result};
use crate::numerics::{
    self, derive_seed, gaussian_matrix, invert, matmul, matmul_nt, max_abs_diff, svd_small, Matrix,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Default per-layer cap on dense-product entries (`n * m`) for
/// operations that materialize `U V^T`.
pub const DENSE_ENTRY_CAP: usize = 4_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub n: usize,
    pub m: usize,
    pub r: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub name: String,
    pub u: Matrix,
    pub v: Matrix,
}

impl LoraLayer {
    pub fn shape(&self) -> LayerShape {
        LayerShape { n: self.u.rows(), m: self.v.rows(), r: self.u.cols() }
    }
}

/// Ordered list of named factor pairs with a shared per-layer rank.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraUpdate {
    layers: Vec<LoraLayer>,
}

impl LoraUpdate {
    pub fn new(layers: Vec<LoraLayer>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for layer in &layers {
            if layer.u.cols() != layer.v.cols() {
                return Err(Error::Shape {
                    op: "LoraUpdate::new",
                    detail: format!(
                        "layer '{}': U has {} columns but V has {}",
                        layer.name,
                        layer.u.cols(),
                        layer.v.cols()
                    ),
                });
            }
            if !seen.insert(layer.name.clone()) {
                return Err(Error::InvalidArgument {
                    op: "LoraUpdate::new",
                    detail: format!("duplicate layer name '{}'", layer.name),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LoraLayer] {
        &self.layers
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        self.layers.iter().map(LoraLayer::shape).collect()
    }

    /// Gaussian update with standard-normal entries scaled by `scale`,
    /// layer names `layer_0`, `layer_1`, ...
    pub fn random(shapes: &[(usize, usize)], rank: usize, scale: f64, seed: u64) -> Self {
        let layers = shapes
            .iter()
            .enumerate()
            .map(|(i, &(n, m))| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
                let u = gaussian_matrix(n, rank, &mut rng).scaled(scale);
                let v = gaussian_matrix(m, rank, &mut rng).scaled(scale);
                LoraLayer { name: format!("layer_{i}"), u, v }
            })
            .collect();
        Self { layers }
    }

    /// Largest absolute factor entry across all layers.
    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .fold(0.0f64, |m, l| m.max(l.u.max_abs()).max(l.v.max_abs()))
    }

    /// Dense products `U_i V_i^T` for every layer. Respects the entry cap.
    pub fn dense_products(&self, cap: usize) -> Result<Vec<Matrix>> {
        self.layers
            .iter()
            .map(|l| {
                let entries = l.u.rows() * l.v.rows();
                if entries > cap {
                    return Err(Error::Capability {
                        op: "dense_products",
                        detail: format!(
                            "layer '{}' dense product has {entries} entries, cap is {cap}",
                            l.name
                        ),
                    });
                }
                matmul_nt(&l.u, &l.v)
            })
            .collect()
    }
}

/// One invertible factor of a group element, with `R^{-T}` cached so the
/// action is a pair of plain products.
#[derive(Debug, Clone)]
pub struct GlFactor {
    pub r: Matrix,
    pub r_inv_t: Matrix,
}

/// Per-layer invertible matrices acting as `(U R, V R^{-T})`.
#[derive(Debug, Clone)]
pub struct GroupElement {
    factors: Vec<GlFactor>,
}

impl GroupElement {
    /// Build from explicit invertible matrices; the cached inverse must
    /// reproduce the identity to 1e-10.
    pub fn new(mats: Vec<Matrix>) -> Result<Self> {
        let factors = mats
            .into_iter()
            .map(|r| {
                if r.rows() != r.cols() {
                    return Err(Error::Shape {
                        op: "GroupElement::new",
                        detail: format!("factor is {}x{}, not square", r.rows(), r.cols()),
                    });
                }
                let r_inv = invert(&r)?;
                let r_inv_t = r_inv.transpose();
                let residual = max_abs_diff(
                    &matmul_nt(&r, &r_inv_t)?,
                    &Matrix::identity(r.rows()),
                );
                if residual > 1e-10 {
                    return Err(Error::Numerical(format!(
                        "group factor too ill-conditioned: inverse residual {residual:.3e}"
                    )));
                }
                Ok(GlFactor { r, r_inv_t })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { factors })
    }

    pub fn identity(ranks: &[usize]) -> Self {
        let factors = ranks
            .iter()
            .map(|&r| GlFactor { r: Matrix::identity(r), r_inv_t: Matrix::identity(r) })
            .collect();
        Self { factors }
    }

    /// Condition-bounded random element, one factor per rank.
    pub fn random_gl(ranks: &[usize], cond_bound: f64, seed: u64) -> Result<Self> {
        let mats = ranks
            .iter()
            .enumerate()
            .map(|(i, &r)| numerics::random_gl(r, cond_bound, derive_seed(seed, i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(mats)
    }

    /// Haar-orthogonal element; for orthogonal `Q` the action simplifies
    /// to `(U Q, V Q)` since `Q^{-T} = Q`.
    pub fn random_orthogonal(ranks: &[usize], seed: u64) -> Result<Self> {
        let mats = ranks
            .iter()
            .enumerate()
            .map(|(i, &r)| numerics::random_orthogonal(r, derive_seed(seed, i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(mats)
    }

    pub fn factors(&self) -> &[GlFactor] {
        &self.factors
    }

    /// Factor-wise product `(g * h)_i = g_i * h_i`; satisfies
    /// `act(act(x, g), h) = act(x, g * h)`.
    pub fn compose(&self, other: &GroupElement) -> Result<GroupElement> {
        if self.factors.len() != other.factors.len() {
            return Err(Error::Shape {
                op: "GroupElement::compose",
                detail: format!("{} vs {} factors", self.factors.len(), other.factors.len()),
            });
        }
        let factors = self
            .factors
            .iter()
            .zip(&other.factors)
            .map(|(g, h)| {
                Ok(GlFactor {
                    r: matmul(&g.r, &h.r)?,
                    r_inv_t: matmul(&g.r_inv_t, &h.r_inv_t)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GroupElement { factors })
    }
}

/// Apply the gauge action: layer i becomes `(U_i R_i, V_i R_i^{-T})`.
pub fn act(x: &LoraUpdate, g: &GroupElement) -> Result<LoraUpdate> {
    if x.layers.len() != g.factors.len() {
        return Err(Error::Shape {
            op: "act",
            detail: format!("update has {} layers, element has {}", x.layers.len(), g.factors.len()),
        });
    }
    let layers = x
        .layers
        .iter()
        .zip(&g.factors)
        .map(|(l, f)| {
            if l.u.cols() != f.r.rows() {
                return Err(Error::Shape {
                    op: "act",
                    detail: format!(
                        "layer '{}' has rank {} but factor is {}x{}",
                        l.name,
                        l.u.cols(),
                        f.r.rows(),
                        f.r.cols()
                    ),
                });
            }
            Ok(LoraLayer {
                name: l.name.clone(),
                u: matmul(&l.u, &f.r)?,
                v: matmul(&l.v, &f.r_inv_t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoraUpdate { layers })
}

/// True iff all per-layer dense products agree within
/// `tol * max(1, input scale)`. Dense products are a complete orbit
/// invariant on full-rank inputs, so this is the ground-truth equality
/// oracle; it materializes `U V^T` and is not a hot path.
pub fn functionally_equal(x: &LoraUpdate, y: &LoraUpdate, tol: f64) -> Result<bool> {
    if x.shapes() != y.shapes() {
        return Err(Error::Shape {
            op: "functionally_equal",
            detail: "updates have different layer shapes".into(),
        });
    }
    let px = x.dense_products(DENSE_ENTRY_CAP)?;
    let py = y.dense_products(DENSE_ENTRY_CAP)?;
    let mut scale = 1.0f64;
    for (a, b) in px.iter().zip(&py) {
        scale = scale.max(a.max_abs()).max(b.max_abs());
    }
    for (a, b) in px.iter().zip(&py) {
        if max_abs_diff(a, b) > tol * scale {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Per-layer numerical rank of the factor pair: the smaller of the two
/// counts of singular values above `tol * largest`. A layer is full rank
/// iff this equals its rank `r`.
pub fn numerical_rank(x: &LoraUpdate, tol: f64) -> Vec<usize> {
    x.layers
        .iter()
        .map(|l| {
            let ru = rank_of(&l.u, tol);
            let rv = rank_of(&l.v, tol);
            ru.min(rv)
        })
        .collect()
}

fn rank_of(m: &Matrix, tol: f64) -> usize {
    let svd = svd_small(m).expect("factor rank is within the SVD cap");
    let largest = svd.singular.first().copied().unwrap_or(0.0);
    if largest == 0.0 {
        return 0;
    }
    svd.singular.iter().filter(|&&s| s > tol * largest).count()
}

/// Row-major 4-axis tensor; the last axis is the hidden channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::Shape {
                op: "Tensor4::new",
                detail: format!("dims {dims:?} need {len} values, got {}", data.len()),
            });
        }
        Ok(Self { dims, data })
    }
}

/// Flatten convolution factors: all axes except the trailing hidden
/// channel collapse row-major into matrix rows, so the result has `r`
/// columns and `d0*d1*d2` rows. Because the storage is row-major this is
/// a pure reinterpretation of the same buffer.
pub fn flatten_conv(u4: &Tensor4, v4: &Tensor4) -> Result<(Matrix, Matrix)> {
    if u4.dims[3] != v4.dims[3] {
        return Err(Error::Shape {
            op: "flatten_conv",
            detail: format!("hidden channels differ: {} vs {}", u4.dims[3], v4.dims[3]),
        });
    }
    let to_matrix = |t: &Tensor4| {
        let rows = t.dims[0] * t.dims[1] * t.dims[2];
        Matrix::new(rows, t.dims[3], t.data.clone())
    };
    Ok((to_matrix(u4)?, to_matrix(v4)?))
}

/// Prediction target family of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Multilabel,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TaskDescriptor {
    pub kind: TaskKind,
    pub label_dim: usize,
    pub name: String,
}

#[derive(Debug, Clone)]
pub struct TaskItem {
    pub update: LoraUpdate,
    pub label: Vec<f64>,
}

/// Labeled updates plus the task descriptor. Unless the task name
/// declares `rank-gen`, all items share layer count, shapes, and ranks.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub items: Vec<TaskItem>,
    pub task: TaskDescriptor,
}

impl TaskDataset {
    /// Check the structural invariants; call after assembling by hand.
    pub fn validate(&self) -> Result<()> {
        if let Some(first) = self.items.first() {
            let shapes = first.update.shapes();
            let rank_gen = self.task.name.contains("rank-gen");
            for (idx, item) in self.items.iter().enumerate() {
                if item.label.len() != self.task.label_dim {
                    return Err(Error::Shape {
                        op: "TaskDataset::validate",
                        detail: format!(
                            "item {idx} has label length {}, task declares {}",
                            item.label.len(),
                            self.task.label_dim
                        ),
                    });
                }
                if !rank_gen && item.update.shapes() != shapes {
                    return Err(Error::Shape {
                        op: "TaskDataset::validate",
                        detail: format!("item {idx} shape differs from item 0"),
                    });
                }
                if self.task.kind == TaskKind::Multilabel
                    && item.label.iter().any(|&b| b != 0.0 && b != 1.0)
                {
                    return Err(Error::InvalidArgument {
                        op: "TaskDataset::validate",
                        detail: format!("item {idx} multilabel entries must be 0 or 1"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gaussian_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_update(seed: u64) -> LoraUpdate {
        LoraUpdate::random(&[(6, 5), (4, 7)], 3, 1.0, seed)
    }

    #[test]
    fn identity_action_is_exact() {
        let x = toy_update(1);
        let g = GroupElement::identity(&[3, 3]);
        let y = act(&x, &g).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn diagonal_action_scales_columns() {
        let x = LoraUpdate::random(&[(4, 4)], 2, 1.0, 2);
        let mut d = Matrix::zeros(2, 2);
        d[(0, 0)] = 3.0;
        d[(1, 1)] = 0.5;
        let g = GroupElement::new(vec![d]).unwrap();
        let y = act(&x, &g).unwrap();
        let (xu, yu) = (&x.layers()[0].u, &y.layers()[0].u);
        let (xv, yv) = (&x.layers()[0].v, &y.layers()[0].v);
        for i in 0..4 {
            assert!((yu[(i, 0)] - 3.0 * xu[(i, 0)]).abs() <= 1e-12);
            assert!((yu[(i, 1)] - 0.5 * xu[(i, 1)]).abs() <= 1e-12);
            assert!((yv[(i, 0)] - xv[(i, 0)] / 3.0).abs() <= 1e-12);
            assert!((yv[(i, 1)] - 2.0 * xv[(i, 1)]).abs() <= 1e-12);
        }
    }

    #[test]
    fn action_preserves_dense_products() {
        let x = toy_update(3);
        let g = GroupElement::random_gl(&[3, 3], 1e3, 17).unwrap();
        let y = act(&x, &g).unwrap();
        assert!(functionally_equal(&x, &y, 1e-8).unwrap());
    }

    #[test]
    fn perturbation_breaks_equality() {
        let x = toy_update(4);
        let mut y = x.clone();
        let tol = 1e-8;
        let mut u = y.layers[0].u.clone();
        u[(0, 0)] += 10.0 * tol;
        y.layers[0].u = u;
        // Verified against the dense oracle: a full-rank factor
        // perturbation must propagate to the product.
        let px = x.dense_products(DENSE_ENTRY_CAP).unwrap();
        let py = y.dense_products(DENSE_ENTRY_CAP).unwrap();
        assert!(max_abs_diff(&px[0], &py[0]) > 0.0);
        assert!(!functionally_equal(&x, &y, tol).unwrap());
    }

    #[test]
    fn negation_of_both_factors_is_equal() {
        let x = LoraUpdate::random(&[(5, 5)], 2, 1.0, 5);
        let y = LoraUpdate::new(vec![LoraLayer {
            name: x.layers()[0].name.clone(),
            u: x.layers()[0].u.scaled(-1.0),
            v: x.layers()[0].v.scaled(-1.0),
        }])
        .unwrap();
        assert!(functionally_equal(&x, &y, 1e-12).unwrap());
    }

    #[test]
    fn group_action_law() {
        let x = toy_update(6);
        let g = GroupElement::random_gl(&[3, 3], 100.0, 7).unwrap();
        let h = GroupElement::random_gl(&[3, 3], 100.0, 8).unwrap();
        let lhs = act(&act(&x, &g).unwrap(), &h).unwrap();
        let rhs = act(&x, &g.compose(&h).unwrap()).unwrap();
        for (a, b) in lhs.layers().iter().zip(rhs.layers()) {
            assert!(max_abs_diff(&a.u, &b.u) <= 1e-10);
            assert!(max_abs_diff(&a.v, &b.v) <= 1e-10);
        }
    }

    #[test]
    fn orthogonal_action_preserves_frobenius() {
        let x = toy_update(9);
        let g = GroupElement::random_orthogonal(&[3, 3], 10).unwrap();
        let y = act(&x, &g).unwrap();
        for (a, b) in x.layers().iter().zip(y.layers()) {
            assert!((a.u.frobenius_norm() - b.u.frobenius_norm()).abs() <= 1e-10);
        }
    }

    #[test]
    fn numerical_rank_cases() {
        let mut u = Matrix::zeros(5, 1);
        u[(0, 0)] = 1.0;
        let v = gaussian_matrix(4, 1, &mut ChaCha8Rng::seed_from_u64(1));
        let x = LoraUpdate::new(vec![LoraLayer { name: "a".into(), u, v }]).unwrap();
        assert_eq!(numerical_rank(&x, 1e-10), vec![1]);

        // Duplicated columns collapse the rank.
        let col = gaussian_matrix(6, 1, &mut ChaCha8Rng::seed_from_u64(2));
        let mut dup = Matrix::zeros(6, 2);
        for i in 0..6 {
            dup[(i, 0)] = col[(i, 0)];
            dup[(i, 1)] = col[(i, 0)];
        }
        let v2 = gaussian_matrix(4, 2, &mut ChaCha8Rng::seed_from_u64(3));
        let x2 = LoraUpdate::new(vec![LoraLayer { name: "a".into(), u: dup, v: v2 }]).unwrap();
        assert_eq!(numerical_rank(&x2, 1e-10), vec![1]);

        // Gaussian factors are full rank with overwhelming probability;
        // cross-checked against the dense-SVD route inside rank_of.
        let x3 = LoraUpdate::random(&[(40, 30)], 4, 1.0, 4);
        assert_eq!(numerical_rank(&x3, 1e-10), vec![4]);
    }

    #[test]
    fn flatten_conv_orders_rows() {
        let r = 2;
        let data: Vec<f64> = (0..2 * 3 * 1 * r).map(|x| x as f64).collect();
        let u4 = Tensor4::new([2, 3, 1, r], data.clone()).unwrap();
        let v4 = Tensor4::new([1, 1, 4, r], (0..4 * r).map(|x| x as f64).collect()).unwrap();
        let (u, v) = flatten_conv(&u4, &v4).unwrap();
        assert_eq!(u.rows(), 6);
        assert_eq!(v.rows(), 4);
        // Row order is (0,0),(0,1),(0,2),(1,0),(1,1),(1,2): row-major means
        // the flattened matrix shares the tensor's buffer exactly.
        assert_eq!(u.data(), &data[..]);
    }

    #[test]
    fn flatten_conv_commutes_with_action() {
        let r = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let u4 = Tensor4::new(
            [2, 2, 3, r],
            (0..12 * r).map(|_| rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal)).collect(),
        )
        .unwrap();
        let v4 = Tensor4::new(
            [1, 5, 2, r],
            (0..10 * r).map(|_| rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal)).collect(),
        )
        .unwrap();
        let (u, v) = flatten_conv(&u4, &v4).unwrap();
        let x = LoraUpdate::new(vec![LoraLayer { name: "conv".into(), u, v }]).unwrap();
        let g = GroupElement::random_gl(&[r], 1e3, 13).unwrap();
        let acted = act(&x, &g).unwrap();

        // Acting on the tensors first (contracting the hidden axis with R)
        // and flattening afterwards must give the same matrices.
        let acted_u4 = {
            let mut data = vec![0.0; u4.data.len()];
            for row in 0..12 {
                for j in 0..r {
                    let mut acc = 0.0;
                    for k in 0..r {
                        acc += u4.data[row * r + k] * g.factors()[0].r[(k, j)];
                    }
                    data[row * r + j] = acc;
                }
            }
            Tensor4::new(u4.dims, data).unwrap()
        };
        let (u_then, _) = flatten_conv(&acted_u4, &v4).unwrap();
        assert!(max_abs_diff(&u_then, &acted.layers()[0].u) <= 1e-12);
    }

    #[test]
    fn dataset_validation() {
        let ds = TaskDataset {
            items: vec![TaskItem { update: toy_update(1), label: vec![0.5] }],
            task: TaskDescriptor { kind: TaskKind::Regression, label_dim: 1, name: "t".into() },
        };
        ds.validate().unwrap();

        let bad = TaskDataset {
            items: vec![TaskItem { update: toy_update(1), label: vec![0.5] }],
            task: TaskDescriptor { kind: TaskKind::Multilabel, label_dim: 1, name: "t".into() },
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let a = toy_update(1).layers()[0].clone();
        let mut b = a.clone();
        b.u = a.u.scaled(2.0);
        assert!(LoraUpdate::new(vec![a, b]).is_err());
    }
}
