//! Gauge-invariant network over factor pairs.
//!
//! Structure: a stack of equivariant linear layers `(U, V) -> (Phi U,
//! Psi V)` (the only linear maps that commute with the gauge action),
//! optionally interleaved with an equivariant nonlinearity that rescales
//! rows by a function of dense-product row/column sums, followed by an
//! invariant head that multiplies the downprojected factors out and
//! feeds the concatenation to an MLP. Invariance of the head plus
//! equivariance of every earlier stage gives end-to-end invariance.
//!
//! No stage carries bias terms: adding a bias to `Phi U` would break
//! equivariance, and the characterization of equivariant linear maps has
//! none.

use crate::error::{Error, Result};
use crate::featurize::featurize_dense;
use crate::learn::{MlpGrads, MlpParams};
use crate::lora::{LoraLayer, LoraUpdate, DENSE_ENTRY_CAP};
use crate::numerics::{derive_seed, matmul, matmul_nt, matmul_tn, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    None,
    /// sigma(x) = relu(sign(x)): zeroes out entire rows whose
    /// product-row-sum is non-positive. Piecewise constant, so the gate
    /// contributes no gradient; backprop sees only the gated path.
    ReluSign,
    /// sigma(x) = tanh(x): a smooth variant for experiments needing
    /// nonzero gate gradients.
    TanhRowsum,
}

impl std::fmt::Display for Nonlinearity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Nonlinearity::None => "none",
            Nonlinearity::ReluSign => "relu_sign",
            Nonlinearity::TanhRowsum => "tanh_rowsum",
        };
        f.write_str(s)
    }
}

/// One equivariant linear layer: per LoRA layer a pair of
/// down/up-projection matrices applied from the left.
#[derive(Debug, Clone)]
pub struct EquivariantLayer {
    pub phis: Vec<Matrix>,
    pub psis: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct GlNetParams {
    pub stacks: Vec<EquivariantLayer>,
    pub nonlinearity: Nonlinearity,
    pub head: MlpParams,
    pub product_cap: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlNetConfig {
    /// Row count of the hidden factors (shared by all layers and both
    /// factor sides).
    pub hidden_width: usize,
    pub equivariant_layers: usize,
    pub nonlinearity: Nonlinearity,
    pub head_hidden: Vec<usize>,
    pub product_cap: usize,
}

impl Default for GlNetConfig {
    fn default() -> Self {
        Self {
            hidden_width: 32,
            equivariant_layers: 1,
            nonlinearity: Nonlinearity::None,
            head_hidden: vec![256, 128],
            product_cap: DENSE_ENTRY_CAP,
        }
    }
}

impl GlNetParams {
    /// Gaussian init with variance 1/fan-in everywhere. `shapes` are the
    /// input (n_i, m_i) pairs; ranks do not enter the parameterization,
    /// which is what makes the network rank-agnostic.
    pub fn init(cfg: &GlNetConfig, shapes: &[(usize, usize)], output_dim: usize, seed: u64) -> Self {
        let w = cfg.hidden_width;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x61));
        let mut gaussian = |rows: usize, cols: usize| {
            let std = 1.0 / (cols as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| {
                let g: f64 = rand::Rng::sample(&mut rng, StandardNormal);
                g * std
            })
        };
        let stacks = (0..cfg.equivariant_layers)
            .map(|t| {
                let phis = shapes
                    .iter()
                    .map(|&(n, _)| gaussian(w, if t == 0 { n } else { w }))
                    .collect();
                let psis = shapes
                    .iter()
                    .map(|&(_, m)| gaussian(w, if t == 0 { m } else { w }))
                    .collect();
                EquivariantLayer { phis, psis }
            })
            .collect::<Vec<_>>();
        let head_in: usize = if cfg.equivariant_layers == 0 {
            shapes.iter().map(|&(n, m)| n * m).sum()
        } else {
            shapes.len() * w * w
        };
        let mut head_dims = vec![head_in];
        head_dims.extend_from_slice(&cfg.head_hidden);
        head_dims.push(output_dim);
        let head = MlpParams::init(&head_dims, derive_seed(seed, 0x62));
        Self { stacks, nonlinearity: cfg.nonlinearity, head, product_cap: cfg.product_cap }
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::new();
        for stack in &self.stacks {
            for phi in &stack.phis {
                sizes.push(phi.data().len());
            }
            for psi in &stack.psis {
                sizes.push(psi.data().len());
            }
        }
        sizes.extend(self.head.param_sizes());
        sizes
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut slices = Vec::new();
        for stack in &mut self.stacks {
            for phi in &mut stack.phis {
                slices.push(phi.data_mut());
            }
            for psi in &mut stack.psis {
                slices.push(psi.data_mut());
            }
        }
        slices.extend(self.head.param_slices_mut());
        slices
    }
}

#[derive(Debug, Clone)]
pub struct StackGrads {
    pub phis: Vec<Matrix>,
    pub psis: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct GlNetGrads {
    pub stacks: Vec<StackGrads>,
    pub head: MlpGrads,
}

impl GlNetGrads {
    pub fn zeros_like(p: &GlNetParams) -> Self {
        Self {
            stacks: p
                .stacks
                .iter()
                .map(|s| StackGrads {
                    phis: s.phis.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect(),
                    psis: s.psis.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect(),
                })
                .collect(),
            head: MlpGrads::zeros_like(&p.head),
        }
    }

    pub fn add_assign(&mut self, other: &GlNetGrads) {
        for (a, b) in self.stacks.iter_mut().zip(&other.stacks) {
            for (x, y) in a.phis.iter_mut().zip(&b.phis) {
                for (u, v) in x.data_mut().iter_mut().zip(y.data()) {
                    *u += v;
                }
            }
            for (x, y) in a.psis.iter_mut().zip(&b.psis) {
                for (u, v) in x.data_mut().iter_mut().zip(y.data()) {
                    *u += v;
                }
            }
        }
        self.head.add_assign(&other.head);
    }

    pub fn grad_slices(&self) -> Vec<&[f64]> {
        let mut slices = Vec::new();
        for stack in &self.stacks {
            for phi in &stack.phis {
                slices.push(phi.data());
            }
            for psi in &stack.psis {
                slices.push(psi.data());
            }
        }
        slices.extend(self.head.grad_slices());
        slices
    }
}

/// `(U_i, V_i) -> (Phi_i U_i, Psi_i V_i)`; ranks unchanged.
pub fn equivariant_linear(layer: &EquivariantLayer, x: &LoraUpdate) -> Result<LoraUpdate> {
    if layer.phis.len() != x.layers().len() {
        return Err(Error::Shape {
            op: "equivariant_linear",
            detail: format!(
                "params cover {} layers, update has {}",
                layer.phis.len(),
                x.layers().len()
            ),
        });
    }
    let layers = x
        .layers()
        .iter()
        .zip(layer.phis.iter().zip(&layer.psis))
        .map(|(l, (phi, psi))| {
            Ok(LoraLayer {
                name: l.name.clone(),
                u: matmul(phi, &l.u)?,
                v: matmul(psi, &l.v)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LoraUpdate::new(layers)
}

struct NlLayerCache {
    u_scale: Vec<f64>,
    v_scale: Vec<f64>,
    v_col_sums: Vec<f64>,
    u_col_sums: Vec<f64>,
}

fn sigma(kind: Nonlinearity, x: f64) -> f64 {
    match kind {
        Nonlinearity::None => 1.0,
        Nonlinearity::ReluSign => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Nonlinearity::TanhRowsum => x.tanh(),
    }
}

fn nonlinearity_cached(x: &LoraUpdate, kind: Nonlinearity) -> (LoraUpdate, Vec<NlLayerCache>) {
    let mut caches = Vec::with_capacity(x.layers().len());
    let layers = x
        .layers()
        .iter()
        .map(|l| {
            let (n, m, r) = (l.u.rows(), l.v.rows(), l.u.cols());
            // Row sums of U V^T without densifying: U (V^T 1); column
            // sums likewise from the other side.
            let mut v_col_sums = vec![0.0; r];
            for j in 0..m {
                for k in 0..r {
                    v_col_sums[k] += l.v[(j, k)];
                }
            }
            let mut u_col_sums = vec![0.0; r];
            for i in 0..n {
                for k in 0..r {
                    u_col_sums[k] += l.u[(i, k)];
                }
            }
            let row_sums: Vec<f64> = (0..n)
                .map(|i| (0..r).map(|k| l.u[(i, k)] * v_col_sums[k]).sum())
                .collect();
            let col_sums: Vec<f64> = (0..m)
                .map(|j| (0..r).map(|k| l.v[(j, k)] * u_col_sums[k]).sum())
                .collect();
            let u_scale: Vec<f64> = row_sums.iter().map(|&s| sigma(kind, s)).collect();
            let v_scale: Vec<f64> = col_sums.iter().map(|&s| sigma(kind, s)).collect();
            let mut u = l.u.clone();
            for i in 0..n {
                for k in 0..r {
                    u[(i, k)] *= u_scale[i];
                }
            }
            let mut v = l.v.clone();
            for j in 0..m {
                for k in 0..r {
                    v[(j, k)] *= v_scale[j];
                }
            }
            caches.push(NlLayerCache { u_scale, v_scale, v_col_sums, u_col_sums });
            LoraLayer { name: l.name.clone(), u, v }
        })
        .collect();
    (LoraUpdate::new(layers).expect("names preserved"), caches)
}

/// Row i of U scaled by sigma(row-sum i of U V^T), row j of V scaled by
/// sigma(column-sum j), both computed without materializing the product.
pub fn equivariant_nonlinearity(x: &LoraUpdate, kind: Nonlinearity) -> LoraUpdate {
    if kind == Nonlinearity::None {
        return x.clone();
    }
    nonlinearity_cached(x, kind).0
}

/// Multiply the factors out, concatenate row-major, apply the MLP.
pub fn invariant_head(x: &LoraUpdate, mlp: &MlpParams, cap: usize) -> Result<Vec<f64>> {
    let feat = featurize_dense(x, cap)?;
    mlp.forward(&feat.values)
}

pub struct GlNetCache {
    stack_inputs: Vec<LoraUpdate>,
    post_linear: Vec<LoraUpdate>,
    nl_caches: Vec<Option<Vec<NlLayerCache>>>,
    head_input: LoraUpdate,
    head_acts: Vec<Matrix>,
}

/// Forward pass keeping every intermediate needed by the backward pass.
pub fn glnet_forward_cached(p: &GlNetParams, x: &LoraUpdate) -> Result<(Vec<f64>, GlNetCache)> {
    let depth = p.stacks.len();
    let mut stack_inputs = Vec::with_capacity(depth);
    let mut post_linear = Vec::with_capacity(depth);
    let mut nl_caches = Vec::with_capacity(depth);
    let mut cur = x.clone();
    for (t, stack) in p.stacks.iter().enumerate() {
        stack_inputs.push(cur.clone());
        cur = equivariant_linear(stack, &cur)?;
        post_linear.push(cur.clone());
        // The nonlinearity sits between consecutive equivariant layers.
        if t + 1 < depth && p.nonlinearity != Nonlinearity::None {
            let (next, cache) = nonlinearity_cached(&cur, p.nonlinearity);
            cur = next;
            nl_caches.push(Some(cache));
        } else {
            nl_caches.push(None);
        }
    }
    let feat = featurize_dense(&cur, p.product_cap)?;
    let fm = Matrix::new(1, feat.values.len(), feat.values.clone())?;
    let (out, head_acts) = p.head.forward_batch(&fm)?;
    Ok((
        out.data().to_vec(),
        GlNetCache { stack_inputs, post_linear, nl_caches, head_input: cur, head_acts },
    ))
}

/// Stacks (with the nonlinearity between, if configured) then the
/// invariant head. With the default single equivariant layer this is
/// exactly `invariant_head(equivariant_linear(x))`.
pub fn glnet_forward(p: &GlNetParams, x: &LoraUpdate) -> Result<Vec<f64>> {
    let mut cur = x.clone();
    let depth = p.stacks.len();
    for (t, stack) in p.stacks.iter().enumerate() {
        cur = equivariant_linear(stack, &cur)?;
        if t + 1 < depth && p.nonlinearity != Nonlinearity::None {
            cur = equivariant_nonlinearity(&cur, p.nonlinearity);
        }
    }
    invariant_head(&cur, &p.head, p.product_cap)
}

/// Exact analytic gradients of `upstream . output` with respect to every
/// parameter.
pub fn glnet_backward(
    p: &GlNetParams,
    _x: &LoraUpdate,
    cache: &GlNetCache,
    upstream: &[f64],
) -> Result<GlNetGrads> {
    let up = Matrix::new(1, upstream.len(), upstream.to_vec())?;
    let (head_grads, dfeat) = p.head.backward_batch(&cache.head_acts, &up, true)?;
    let dfeat = dfeat.expect("requested input gradient");

    // Split the flat feature gradient back into per-layer dense-product
    // gradients and pull them through the products.
    let mut dus: Vec<Matrix> = Vec::new();
    let mut dvs: Vec<Matrix> = Vec::new();
    let mut offset = 0;
    for l in cache.head_input.layers() {
        let (n, m) = (l.u.rows(), l.v.rows());
        let seg = &dfeat.data()[offset..offset + n * m];
        offset += n * m;
        let dp = Matrix::new(n, m, seg.to_vec())?;
        dus.push(matmul(&dp, &l.v)?);
        dvs.push(matmul_tn(&dp, &l.u)?);
    }

    let mut stack_grads: Vec<Option<StackGrads>> = (0..p.stacks.len()).map(|_| None).collect();
    for t in (0..p.stacks.len()).rev() {
        if let Some(caches) = &cache.nl_caches[t] {
            backprop_nonlinearity(
                p.nonlinearity,
                &cache.post_linear[t],
                caches,
                &mut dus,
                &mut dvs,
            )?;
        }
        let input = &cache.stack_inputs[t];
        let stack = &p.stacks[t];
        let mut phis = Vec::with_capacity(dus.len());
        let mut psis = Vec::with_capacity(dvs.len());
        let mut next_dus = Vec::with_capacity(dus.len());
        let mut next_dvs = Vec::with_capacity(dvs.len());
        for (i, l) in input.layers().iter().enumerate() {
            phis.push(matmul_nt(&dus[i], &l.u)?);
            psis.push(matmul_nt(&dvs[i], &l.v)?);
            next_dus.push(matmul_tn(&stack.phis[i], &dus[i])?);
            next_dvs.push(matmul_tn(&stack.psis[i], &dvs[i])?);
        }
        stack_grads[t] = Some(StackGrads { phis, psis });
        dus = next_dus;
        dvs = next_dvs;
    }

    Ok(GlNetGrads {
        stacks: stack_grads.into_iter().map(|g| g.expect("all stacks visited")).collect(),
        head: head_grads,
    })
}

fn backprop_nonlinearity(
    kind: Nonlinearity,
    pre: &LoraUpdate,
    caches: &[NlLayerCache],
    dus: &mut [Matrix],
    dvs: &mut [Matrix],
) -> Result<()> {
    for (i, l) in pre.layers().iter().enumerate() {
        let c = &caches[i];
        let (n, m, r) = (l.u.rows(), l.v.rows(), l.u.cols());
        let du_out = dus[i].clone();
        let dv_out = dvs[i].clone();
        let mut du = Matrix::zeros(n, r);
        let mut dv = Matrix::zeros(m, r);
        // Gated path: each output row is its input row times a scale.
        for row in 0..n {
            for k in 0..r {
                du[(row, k)] = c.u_scale[row] * du_out[(row, k)];
            }
        }
        for row in 0..m {
            for k in 0..r {
                dv[(row, k)] = c.v_scale[row] * dv_out[(row, k)];
            }
        }
        if kind == Nonlinearity::TanhRowsum {
            // Gate path: scales depend on the factor entries through the
            // row/column sums of the product.
            let d_row: Vec<f64> = (0..n)
                .map(|row| {
                    let d_scale: f64 = (0..r).map(|k| du_out[(row, k)] * l.u[(row, k)]).sum();
                    d_scale * (1.0 - c.u_scale[row] * c.u_scale[row])
                })
                .collect();
            let d_col: Vec<f64> = (0..m)
                .map(|row| {
                    let d_scale: f64 = (0..r).map(|k| dv_out[(row, k)] * l.v[(row, k)]).sum();
                    d_scale * (1.0 - c.v_scale[row] * c.v_scale[row])
                })
                .collect();
            // row_sums = U * v_col_sums.
            for row in 0..n {
                for k in 0..r {
                    du[(row, k)] += d_row[row] * c.v_col_sums[k];
                }
            }
            let mut d_vcs = vec![0.0; r];
            for row in 0..n {
                for k in 0..r {
                    d_vcs[k] += l.u[(row, k)] * d_row[row];
                }
            }
            for row in 0..m {
                for k in 0..r {
                    dv[(row, k)] += d_vcs[k];
                }
            }
            // col_sums = V * u_col_sums.
            for row in 0..m {
                for k in 0..r {
                    dv[(row, k)] += d_col[row] * c.u_col_sums[k];
                }
            }
            let mut d_ucs = vec![0.0; r];
            for row in 0..m {
                for k in 0..r {
                    d_ucs[k] += l.v[(row, k)] * d_col[row];
                }
            }
            for row in 0..n {
                for k in 0..r {
                    du[(row, k)] += d_ucs[k];
                }
            }
        }
        dus[i] = du;
        dvs[i] = dv;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::featurize_flatten;
    use crate::lora::{act, GroupElement};
    use crate::verify::relative_deviation;

    fn dev(a: &LoraUpdate, b: &LoraUpdate) -> f64 {
        relative_deviation(&featurize_flatten(a).values, &featurize_flatten(b).values)
    }

    fn toy_params(shapes: &[(usize, usize)], layers: usize, nl: Nonlinearity, seed: u64) -> GlNetParams {
        let cfg = GlNetConfig {
            hidden_width: 5,
            equivariant_layers: layers,
            nonlinearity: nl,
            head_hidden: vec![9],
            product_cap: DENSE_ENTRY_CAP,
        };
        GlNetParams::init(&cfg, shapes, 2, seed)
    }

    #[test]
    fn identity_projections_are_identity() {
        let x = LoraUpdate::random(&[(4, 6)], 2, 1.0, 1);
        let layer = EquivariantLayer {
            phis: vec![Matrix::identity(4)],
            psis: vec![Matrix::identity(6)],
        };
        let y = equivariant_linear(&layer, &x).unwrap();
        assert!(dev(&x, &y) <= 1e-15);
    }

    #[test]
    fn linear_layer_is_equivariant() {
        let x = LoraUpdate::random(&[(7, 6), (5, 8)], 3, 1.0, 2);
        let p = toy_params(&[(7, 6), (5, 8)], 1, Nonlinearity::None, 3);
        let g = GroupElement::random_gl(&[3, 3], 1e3, 4).unwrap();
        let lhs = equivariant_linear(&p.stacks[0], &act(&x, &g).unwrap()).unwrap();
        let rhs = act(&equivariant_linear(&p.stacks[0], &x).unwrap(), &g).unwrap();
        assert!(dev(&lhs, &rhs) <= 1e-9);
    }

    #[test]
    fn linear_layer_matches_matmul_oracle() {
        let x = LoraUpdate::random(&[(6, 4)], 2, 1.0, 5);
        let p = toy_params(&[(6, 4)], 1, Nonlinearity::None, 6);
        let y = equivariant_linear(&p.stacks[0], &x).unwrap();
        let want_u = crate::verify::matmul_naive(&p.stacks[0].phis[0], &x.layers()[0].u);
        assert!(crate::numerics::max_abs_diff(&y.layers()[0].u, &want_u) <= 1e-12);
    }

    #[test]
    fn composition_closure() {
        // Two stacked equivariant linear layers equal one layer with the
        // composed projections.
        let x = LoraUpdate::random(&[(6, 5)], 2, 1.0, 7);
        let p = toy_params(&[(6, 5)], 2, Nonlinearity::None, 8);
        let two = equivariant_linear(
            &p.stacks[1],
            &equivariant_linear(&p.stacks[0], &x).unwrap(),
        )
        .unwrap();
        let composed = EquivariantLayer {
            phis: vec![matmul(&p.stacks[1].phis[0], &p.stacks[0].phis[0]).unwrap()],
            psis: vec![matmul(&p.stacks[1].psis[0], &p.stacks[0].psis[0]).unwrap()],
        };
        let one = equivariant_linear(&composed, &x).unwrap();
        assert!(dev(&two, &one) <= 1e-10);
    }

    #[test]
    fn relu_sign_zeroes_rows_exactly() {
        let x = LoraUpdate::random(&[(8, 7)], 3, 1.0, 9);
        let y = equivariant_nonlinearity(&x, Nonlinearity::ReluSign);
        let l = &x.layers()[0];
        // Gate oracle: row sums of the densified product.
        let dense = crate::verify::matmul_naive(&l.u, &l.v.transpose());
        for i in 0..8 {
            let row_sum: f64 = dense.row(i).iter().sum();
            let out_row = y.layers()[0].u.row(i);
            if row_sum > 0.0 {
                assert_eq!(out_row, l.u.row(i));
            } else {
                assert!(out_row.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn all_positive_factors_pass_through_relu_sign() {
        let base = LoraUpdate::random(&[(5, 6)], 2, 1.0, 10);
        let layers = base
            .layers()
            .iter()
            .map(|l| LoraLayer {
                name: l.name.clone(),
                u: Matrix::from_fn(l.u.rows(), l.u.cols(), |i, j| l.u[(i, j)].abs() + 0.1),
                v: Matrix::from_fn(l.v.rows(), l.v.cols(), |i, j| l.v[(i, j)].abs() + 0.1),
            })
            .collect();
        let x = LoraUpdate::new(layers).unwrap();
        let y = equivariant_nonlinearity(&x, Nonlinearity::ReluSign);
        assert!(dev(&x, &y) == 0.0);
    }

    #[test]
    fn nonlinearity_is_equivariant() {
        for (kind, tol) in [(Nonlinearity::ReluSign, 1e-9), (Nonlinearity::TanhRowsum, 1e-9)] {
            let x = LoraUpdate::random(&[(6, 7)], 3, 1.0, 11);
            let g = GroupElement::random_gl(&[3], 1e3, 12).unwrap();
            let lhs = equivariant_nonlinearity(&act(&x, &g).unwrap(), kind);
            let rhs = act(&equivariant_nonlinearity(&x, kind), &g).unwrap();
            assert!(dev(&lhs, &rhs) <= tol, "{kind} deviation {}", dev(&lhs, &rhs));
        }
    }

    #[test]
    fn head_composition_oracle() {
        let x = LoraUpdate::random(&[(5, 4), (3, 6)], 2, 1.0, 13);
        let mlp = MlpParams::init(&[5 * 4 + 3 * 6, 7, 2], 14);
        let got = invariant_head(&x, &mlp, DENSE_ENTRY_CAP).unwrap();
        let feat = featurize_dense(&x, DENSE_ENTRY_CAP).unwrap();
        let want = mlp.forward(&feat.values).unwrap();
        assert!(relative_deviation(&got, &want) == 0.0);
    }

    #[test]
    fn identity_mlp_single_product() {
        let u = Matrix::new(1, 1, vec![3.0]).unwrap();
        let v = Matrix::new(1, 1, vec![-2.0]).unwrap();
        let x = LoraUpdate::new(vec![LoraLayer { name: "l".into(), u, v }]).unwrap();
        let mlp = crate::learn::MlpParams::from_layers(vec![crate::learn::MlpLayer {
            weight: Matrix::identity(1),
            bias: vec![0.0],
        }])
        .unwrap();
        let out = invariant_head(&x, &mlp, DENSE_ENTRY_CAP).unwrap();
        assert_eq!(out, vec![-6.0]);
    }

    #[test]
    fn forward_is_invariant() {
        let shapes = [(10, 8), (6, 12)];
        let x = LoraUpdate::random(&shapes, 4, 1.0, 15);
        let p = toy_params(&shapes, 1, Nonlinearity::None, 16);
        let out = glnet_forward(&p, &x).unwrap();
        for trial in 0..20 {
            let g = GroupElement::random_gl(&[4, 4], 1e3, 1000 + trial).unwrap();
            let out_g = glnet_forward(&p, &act(&x, &g).unwrap()).unwrap();
            let d = relative_deviation(&out, &out_g);
            assert!(d <= 1e-6, "trial {trial}: deviation {d}");
        }
    }

    #[test]
    fn default_config_reproduces_head_of_linear() {
        let shapes = [(9, 7)];
        let x = LoraUpdate::random(&shapes, 3, 1.0, 17);
        let p = toy_params(&shapes, 1, Nonlinearity::None, 18);
        let full = glnet_forward(&p, &x).unwrap();
        let manual = invariant_head(
            &equivariant_linear(&p.stacks[0], &x).unwrap(),
            &p.head,
            p.product_cap,
        )
        .unwrap();
        assert_eq!(full, manual);
    }

    #[test]
    fn zero_params_give_constant_output() {
        let shapes = [(6, 6)];
        let mut p = toy_params(&shapes, 1, Nonlinearity::None, 19);
        for s in &mut p.stacks {
            for phi in &mut s.phis {
                *phi = Matrix::zeros(phi.rows(), phi.cols());
            }
            for psi in &mut s.psis {
                *psi = Matrix::zeros(psi.rows(), psi.cols());
            }
        }
        let a = glnet_forward(&p, &LoraUpdate::random(&shapes, 2, 1.0, 20)).unwrap();
        let b = glnet_forward(&p, &LoraUpdate::random(&shapes, 2, 1.0, 21)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let shapes = [(6, 5)];
        let x = LoraUpdate::random(&shapes, 2, 1.0, 22);
        let p = toy_params(&shapes, 2, Nonlinearity::TanhRowsum, 23);
        let (out, cache) = glnet_forward_cached(&p, &x).unwrap();
        let grads = glnet_backward(&p, &x, &cache, &vec![0.0; out.len()]).unwrap();
        for s in grads.grad_slices() {
            assert!(s.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn cached_forward_matches_plain() {
        let shapes = [(6, 5), (4, 4)];
        let x = LoraUpdate::random(&shapes, 2, 1.0, 24);
        for nl in [Nonlinearity::None, Nonlinearity::ReluSign, Nonlinearity::TanhRowsum] {
            let p = toy_params(&shapes, 3, nl, 25);
            let (cached, _) = glnet_forward_cached(&p, &x).unwrap();
            let plain = glnet_forward(&p, &x).unwrap();
            assert_eq!(cached, plain);
        }
    }
}
