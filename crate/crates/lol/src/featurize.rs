//! Featurizations that turn an update into a flat real vector.
//!
//! Four methods with different symmetry properties:
//!
//! - `flatten`: raw factor entries; fully expressive, not gauge-invariant.
//! - `o_align`: orthogonal Procrustes alignment to fixed templates before
//!   flattening; invariant to orthogonal gauges (almost everywhere), not
//!   to general invertible ones.
//! - `svd`: per-layer singular values of the dense product, computed
//!   without densifying; gauge-invariant but blind to sign information.
//! - `dense`: the flattened dense products themselves; gauge-invariant
//!   and complete, at O(n*m) cost per layer.

use crate::error::{Error, Result};
use crate::lora::{LayerShape, LoraUpdate, DENSE_ENTRY_CAP};
use crate::numerics::{
    derive_seed, gaussian_matrix, matmul, matmul_nt, matmul_tn, qr_thin, svd_small, Matrix,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMethod {
    Flatten,
    OAlign,
    Svd,
    Dense,
}

impl std::fmt::Display for FeatureMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FeatureMethod::Flatten => "flatten",
            FeatureMethod::OAlign => "oalign",
            FeatureMethod::Svd => "svd",
            FeatureMethod::Dense => "dense",
        };
        f.write_str(s)
    }
}

/// Where each layer's segment starts inside a feature vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub offsets: Vec<usize>,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub method: FeatureMethod,
    pub layout: FeatureLayout,
}

/// Fixed per-layer template factors for orthogonal alignment, generated
/// from a recorded seed so trained models can reproduce them exactly.
#[derive(Debug, Clone)]
pub struct AlignTemplates {
    layers: Vec<(Matrix, Matrix)>,
    seed: u64,
}

impl AlignTemplates {
    /// Seeded Gaussian templates matching the given shapes; redraws the
    /// rare rank-deficient sample so every template is full rank.
    pub fn from_seed(shapes: &[LayerShape], seed: u64) -> Self {
        let layers = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                for attempt in 0..100 {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(derive_seed(seed, (i as u64) << 8 | attempt));
                    let tu = gaussian_matrix(s.n, s.r, &mut rng);
                    let tv = gaussian_matrix(s.m, s.r, &mut rng);
                    if full_rank(&tu) && full_rank(&tv) {
                        return (tu, tv);
                    }
                }
                unreachable!("Gaussian templates are full rank almost surely")
            })
            .collect();
        Self { layers, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[(Matrix, Matrix)] {
        &self.layers
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        self.layers
            .iter()
            .map(|(u, v)| LayerShape { n: u.rows(), m: v.rows(), r: u.cols() })
            .collect()
    }
}

fn full_rank(m: &Matrix) -> bool {
    let svd = svd_small(m).expect("template rank within SVD cap");
    let largest = svd.singular[0];
    largest > 0.0 && svd.singular.iter().all(|&s| s > 1e-10 * largest)
}

/// Concatenation of row-major `U_1, V_1, ..., U_L, V_L`.
pub fn featurize_flatten(x: &LoraUpdate) -> FeatureVector {
    let mut values = Vec::new();
    let mut offsets = Vec::with_capacity(x.layers().len());
    for layer in x.layers() {
        offsets.push(values.len());
        values.extend_from_slice(layer.u.data());
        values.extend_from_slice(layer.v.data());
    }
    let total = values.len();
    FeatureVector {
        values,
        method: FeatureMethod::Flatten,
        layout: FeatureLayout { offsets, total },
    }
}

/// Flatten after aligning each layer to its template with the orthogonal
/// matrix maximizing `trace(Q^T (U^T Tu + V^T Tv))`.
pub fn featurize_o_align(x: &LoraUpdate, templates: &AlignTemplates) -> Result<FeatureVector> {
    if x.shapes() != templates.shapes() {
        return Err(Error::Shape {
            op: "featurize_o_align",
            detail: "update shapes do not match template shapes".into(),
        });
    }
    let mut values = Vec::new();
    let mut offsets = Vec::with_capacity(x.layers().len());
    for (layer, (tu, tv)) in x.layers().iter().zip(templates.layers()) {
        let q = crate::numerics::procrustes(&alignment_gram(&layer.u, &layer.v, tu, tv)?)?;
        let u = matmul(&layer.u, &q)?;
        let v = matmul(&layer.v, &q)?;
        offsets.push(values.len());
        values.extend_from_slice(u.data());
        values.extend_from_slice(v.data());
    }
    let total = values.len();
    Ok(FeatureVector {
        values,
        method: FeatureMethod::OAlign,
        layout: FeatureLayout { offsets, total },
    })
}

/// The r x r alignment Gram matrix `U^T Tu + V^T Tv` whose SVD defines
/// the canonicalizing rotation; exposed so verification can inspect its
/// singular-value gaps.
pub fn alignment_gram(u: &Matrix, v: &Matrix, tu: &Matrix, tv: &Matrix) -> Result<Matrix> {
    matmul_tn(u, tu)?.add(&matmul_tn(v, tv)?)
}

/// Per-layer singular values of `U V^T`, truncated or zero-padded to
/// `target_rank`, computed without materializing the dense product:
/// QR both factors, then the SVD of the small `R_u R_v^T`.
pub fn featurize_svd(x: &LoraUpdate, target_rank: usize) -> Result<FeatureVector> {
    if target_rank == 0 {
        return Err(Error::InvalidArgument {
            op: "featurize_svd",
            detail: "target_rank must be >= 1".into(),
        });
    }
    let mut values = Vec::new();
    let mut offsets = Vec::with_capacity(x.layers().len());
    for layer in x.layers() {
        offsets.push(values.len());
        let sigma = product_singular_values(&layer.u, &layer.v)?;
        for k in 0..target_rank {
            values.push(sigma.get(k).copied().unwrap_or(0.0));
        }
    }
    let total = values.len();
    Ok(FeatureVector {
        values,
        method: FeatureMethod::Svd,
        layout: FeatureLayout { offsets, total },
    })
}

/// Descending singular values of `U V^T` via the low-rank route.
pub fn product_singular_values(u: &Matrix, v: &Matrix) -> Result<Vec<f64>> {
    let (_, ru) = qr_thin(u)?;
    let (_, rv) = qr_thin(v)?;
    let small = matmul_nt(&ru, &rv)?;
    Ok(svd_small(&small)?.singular)
}

/// Concatenated flattened dense products, capped at `cap` entries per
/// layer.
pub fn featurize_dense(x: &LoraUpdate, cap: usize) -> Result<FeatureVector> {
    let products = x.dense_products(cap)?;
    let mut values = Vec::new();
    let mut offsets = Vec::with_capacity(products.len());
    for p in &products {
        offsets.push(values.len());
        values.extend_from_slice(p.data());
    }
    let total = values.len();
    Ok(FeatureVector {
        values,
        method: FeatureMethod::Dense,
        layout: FeatureLayout { offsets, total },
    })
}

/// Serializable featurizer configuration; together with the dataset
/// shapes this reconstructs the featurizer exactly (templates included,
/// via the recorded seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeaturizerConfig {
    pub method: FeatureMethod,
    /// Singular-value count per layer for `svd`; defaults to the layer
    /// rank of the dataset the featurizer was built for.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_rank: Option<usize>,
    pub templates_seed: u64,
    pub dense_cap: usize,
}

impl FeaturizerConfig {
    pub fn new(method: FeatureMethod) -> Self {
        Self { method, target_rank: None, templates_seed: 0, dense_cap: DENSE_ENTRY_CAP }
    }
}

/// A featurizer bound to concrete layer shapes.
#[derive(Debug, Clone)]
pub struct Featurizer {
    config: FeaturizerConfig,
    templates: Option<AlignTemplates>,
    shapes: Vec<LayerShape>,
}

impl Featurizer {
    pub fn new(mut config: FeaturizerConfig, shapes: &[LayerShape]) -> Result<Self> {
        if shapes.is_empty() {
            return Err(Error::InvalidArgument {
                op: "Featurizer::new",
                detail: "at least one layer shape required".into(),
            });
        }
        if config.method == FeatureMethod::Svd && config.target_rank.is_none() {
            config.target_rank = Some(shapes[0].r);
        }
        let templates = (config.method == FeatureMethod::OAlign)
            .then(|| AlignTemplates::from_seed(shapes, config.templates_seed));
        Ok(Self { config, templates, shapes: shapes.to_vec() })
    }

    pub fn config(&self) -> &FeaturizerConfig {
        &self.config
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    /// Feature dimension for the bound shapes.
    pub fn dim(&self) -> usize {
        match self.config.method {
            FeatureMethod::Flatten | FeatureMethod::OAlign => {
                self.shapes.iter().map(|s| (s.n + s.m) * s.r).sum()
            }
            FeatureMethod::Svd => {
                self.shapes.len() * self.config.target_rank.expect("set at construction")
            }
            FeatureMethod::Dense => self.shapes.iter().map(|s| s.n * s.m).sum(),
        }
    }

    pub fn featurize(&self, x: &LoraUpdate) -> Result<FeatureVector> {
        match self.config.method {
            FeatureMethod::Flatten => Ok(featurize_flatten(x)),
            FeatureMethod::OAlign => {
                featurize_o_align(x, self.templates.as_ref().expect("built with templates"))
            }
            FeatureMethod::Svd => {
                featurize_svd(x, self.config.target_rank.expect("set at construction"))
            }
            FeatureMethod::Dense => featurize_dense(x, self.config.dense_cap),
        }
    }

    /// Featurize many updates, in parallel, results ordered as inputs.
    pub fn featurize_batch(&self, xs: &[&LoraUpdate]) -> Result<Vec<FeatureVector>> {
        xs.par_iter().map(|x| self.featurize(x)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{act, GroupElement, LoraLayer};
    use crate::verify::relative_deviation;

    #[test]
    fn flatten_order_is_defined() {
        let u = Matrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        let v = Matrix::new(1, 2, vec![3.0, 4.0]).unwrap();
        let x = LoraUpdate::new(vec![LoraLayer { name: "l".into(), u, v }]).unwrap();
        let f = featurize_flatten(&x);
        assert_eq!(f.values, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(f.layout.offsets, vec![0]);

        let zero = LoraUpdate::new(vec![LoraLayer {
            name: "z".into(),
            u: Matrix::zeros(3, 2),
            v: Matrix::zeros(2, 2),
        }])
        .unwrap();
        assert!(featurize_flatten(&zero).values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn flatten_changes_under_column_swap() {
        // Non-invariance witness: U = e11, the orthogonal permutation that
        // swaps the first two factor columns moves the 1 elsewhere.
        let mut u = Matrix::zeros(3, 2);
        u[(0, 0)] = 1.0;
        let v = Matrix::zeros(4, 2);
        let x = LoraUpdate::new(vec![LoraLayer { name: "l".into(), u, v }]).unwrap();
        let mut p = Matrix::zeros(2, 2);
        p[(0, 1)] = 1.0;
        p[(1, 0)] = 1.0;
        let g = GroupElement::new(vec![p]).unwrap();
        let fx = featurize_flatten(&x);
        let fgx = featurize_flatten(&act(&x, &g).unwrap());
        let margin = fx
            .values
            .iter()
            .zip(&fgx.values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(margin > 1e-3, "witness margin too small: {margin}");
    }

    #[test]
    fn oalign_is_identity_on_templates() {
        let shapes =
            vec![LayerShape { n: 6, m: 5, r: 3 }, LayerShape { n: 4, m: 7, r: 3 }];
        let t = AlignTemplates::from_seed(&shapes, 42);
        let x = LoraUpdate::new(
            t.layers()
                .iter()
                .enumerate()
                .map(|(i, (u, v))| LoraLayer {
                    name: format!("layer_{i}"),
                    u: u.clone(),
                    v: v.clone(),
                })
                .collect(),
        )
        .unwrap();
        let f = featurize_o_align(&x, &t).unwrap();
        let plain = featurize_flatten(&x);
        assert!(relative_deviation(&f.values, &plain.values) <= 1e-10);
    }

    #[test]
    fn oalign_undoes_orthogonal_gauge() {
        let shapes = vec![LayerShape { n: 8, m: 6, r: 3 }];
        let t = AlignTemplates::from_seed(&shapes, 7);
        let x = LoraUpdate::random(&[(8, 6)], 3, 1.0, 11);
        let g = GroupElement::random_orthogonal(&[3], 5).unwrap();
        let fx = featurize_o_align(&x, &t).unwrap();
        let fgx = featurize_o_align(&act(&x, &g).unwrap(), &t).unwrap();
        assert!(relative_deviation(&fx.values, &fgx.values) <= 1e-8);
    }

    #[test]
    fn oalign_not_gl_invariant() {
        // Scaling witness: (3U, V/3) survives orthogonal alignment with a
        // different Frobenius norm, so the features must differ.
        let shapes = vec![LayerShape { n: 8, m: 6, r: 3 }];
        let t = AlignTemplates::from_seed(&shapes, 7);
        let x = LoraUpdate::random(&[(8, 6)], 3, 1.0, 13);
        let g = GroupElement::new(vec![Matrix::identity(3).scaled(3.0)]).unwrap();
        let fx = featurize_o_align(&x, &t).unwrap();
        let fgx = featurize_o_align(&act(&x, &g).unwrap(), &t).unwrap();
        let margin = fx
            .values
            .iter()
            .zip(&fgx.values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(margin > 1e-3);
    }

    #[test]
    fn svd_unit_product() {
        let mut u = Matrix::zeros(5, 1);
        u[(0, 0)] = 1.0;
        let mut v = Matrix::zeros(4, 1);
        v[(0, 0)] = 1.0;
        let x = LoraUpdate::new(vec![LoraLayer { name: "l".into(), u, v }]).unwrap();
        let f = featurize_svd(&x, 1).unwrap();
        assert!((f.values[0] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn svd_blind_to_negation() {
        let x = LoraUpdate::random(&[(10, 8)], 3, 1.0, 21);
        let neg = LoraUpdate::new(vec![LoraLayer {
            name: x.layers()[0].name.clone(),
            u: x.layers()[0].u.scaled(-1.0),
            v: x.layers()[0].v.clone(),
        }])
        .unwrap();
        let fx = featurize_svd(&x, 3).unwrap();
        let fneg = featurize_svd(&neg, 3).unwrap();
        assert!(relative_deviation(&fx.values, &fneg.values) <= 1e-10);
    }

    #[test]
    fn svd_matches_dense_oracle() {
        let x = LoraUpdate::random(&[(40, 30)], 4, 1.0, 31);
        let f = featurize_svd(&x, 4).unwrap();
        let layer = &x.layers()[0];
        let dense = matmul_nt(&layer.u, &layer.v).unwrap();
        let oracle = crate::verify::singular_values_via_gram_eigen(&dense);
        for k in 0..4 {
            assert!(
                (f.values[k] - oracle[k]).abs() <= 1e-9 * oracle[0],
                "sigma_{k}: {} vs {}",
                f.values[k],
                oracle[k]
            );
        }
    }

    #[test]
    fn svd_pad_and_truncate() {
        let x = LoraUpdate::random(&[(12, 9)], 2, 1.0, 41);
        let padded = featurize_svd(&x, 5).unwrap();
        assert_eq!(padded.values.len(), 5);
        assert_eq!(&padded.values[2..], &[0.0, 0.0, 0.0]);
        // Padding then truncating back is the identity for rank <= target.
        let back = &padded.values[..2];
        let direct = featurize_svd(&x, 2).unwrap();
        assert_eq!(back, &direct.values[..]);
        for w in padded.values.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn dense_defined_order_and_cap() {
        let u = Matrix::new(2, 1, vec![1.0, 0.0]).unwrap();
        let v = Matrix::new(2, 1, vec![2.0, 3.0]).unwrap();
        let x = LoraUpdate::new(vec![LoraLayer { name: "l".into(), u, v }]).unwrap();
        let f = featurize_dense(&x, DENSE_ENTRY_CAP).unwrap();
        assert_eq!(f.values, vec![2.0, 3.0, 0.0, 0.0]);

        let err = featurize_dense(&x, 3).unwrap_err();
        assert!(matches!(err, Error::Capability { .. }));
        assert!(err.to_string().contains('l'));
    }

    #[test]
    fn dense_matches_naive_oracle() {
        let x = LoraUpdate::random(&[(7, 6), (5, 4)], 3, 1.0, 51);
        let f = featurize_dense(&x, DENSE_ENTRY_CAP).unwrap();
        let mut expected = Vec::new();
        for layer in x.layers() {
            let p = crate::verify::matmul_naive(&layer.u, &layer.v.transpose());
            expected.extend_from_slice(p.data());
        }
        assert!(relative_deviation(&f.values, &expected) <= 1e-12);
    }

    #[test]
    fn gl_invariance_of_svd_and_dense() {
        let x = LoraUpdate::random(&[(16, 12), (10, 14)], 4, 1.0, 61);
        let g = GroupElement::random_gl(&[4, 4], 1e3, 62).unwrap();
        let gx = act(&x, &g).unwrap();
        let ds = relative_deviation(
            &featurize_svd(&x, 4).unwrap().values,
            &featurize_svd(&gx, 4).unwrap().values,
        );
        assert!(ds <= 1e-7, "svd deviation {ds}");
        let dd = relative_deviation(
            &featurize_dense(&x, DENSE_ENTRY_CAP).unwrap().values,
            &featurize_dense(&gx, DENSE_ENTRY_CAP).unwrap().values,
        );
        assert!(dd <= 1e-7, "dense deviation {dd}");
    }

    #[test]
    fn batch_preserves_order() {
        let a = LoraUpdate::random(&[(6, 5)], 2, 1.0, 1);
        let b = LoraUpdate::random(&[(6, 5)], 2, 1.0, 2);
        let fz = Featurizer::new(
            FeaturizerConfig::new(FeatureMethod::Dense),
            &a.shapes(),
        )
        .unwrap();
        let batch = fz.featurize_batch(&[&a, &b]).unwrap();
        assert_eq!(batch[0], fz.featurize(&a).unwrap());
        assert_eq!(batch[1], fz.featurize(&b).unwrap());
        assert_eq!(fz.dim(), 30);
    }

    #[test]
    fn template_shape_mismatch_is_error() {
        let t = AlignTemplates::from_seed(&[LayerShape { n: 4, m: 4, r: 2 }], 1);
        let x = LoraUpdate::random(&[(5, 4)], 2, 1.0, 3);
        assert!(matches!(
            featurize_o_align(&x, &t),
            Err(Error::Shape { .. })
        ));
    }
}
