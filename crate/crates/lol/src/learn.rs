//! Predictor training and evaluation: a small rectifier MLP with exact
//! backprop, losses, an adaptive-moment optimizer, feature
//! standardization, and regression/classification metrics.
//!
//! Training is deterministic given the config seed: shuffling comes from
//! a seeded ChaCha stream, batches run in a fixed order, and every
//! reduction (matmuls, batch sums, chunk folds) accumulates in a fixed
//! index order regardless of thread count.

use crate::error::{Error, Result};
use crate::featurize::{Featurizer, FeaturizerConfig};
use crate::glnet::{self, GlNetConfig, GlNetGrads, GlNetParams};
use crate::lora::{LayerShape, LoraUpdate, TaskDataset, TaskDescriptor, TaskKind};
use crate::numerics::{derive_seed, matmul, matmul_tn, Matrix};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

// ── MLP ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct MlpLayer {
    /// out x in.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Affine layers with a pointwise rectifier between them, none on the
/// output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<MlpLayer>,
}

impl MlpParams {
    /// Gaussian init with variance 1/fan-in, zero biases.
    pub fn init(dims: &[usize], seed: u64) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = 1.0 / (fan_in as f64).sqrt();
                let weight = Matrix::from_fn(fan_out, fan_in, |_, _| {
                    let g: f64 = rand::Rng::sample(&mut rng, StandardNormal);
                    g * std
                });
                MlpLayer { weight, bias: vec![0.0; fan_out] }
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<MlpLayer>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].weight.rows() != pair[1].weight.cols() {
                return Err(Error::Shape {
                    op: "MlpParams::from_layers",
                    detail: "consecutive layer dimensions do not chain".into(),
                });
            }
        }
        if layers.is_empty() {
            return Err(Error::InvalidArgument {
                op: "MlpParams::from_layers",
                detail: "at least one layer required".into(),
            });
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[MlpLayer] {
        &self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].weight.cols()];
        dims.extend(self.layers.iter().map(|l| l.weight.rows()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let xm = Matrix::new(1, x.len(), x.to_vec())?;
        let (out, _) = self.forward_batch(&xm)?;
        Ok(out.data().to_vec())
    }

    /// Batched forward; returns the output (rows = items) and the
    /// post-activation of every layer up to but excluding the output,
    /// starting with the input itself.
    pub fn forward_batch(&self, x: &Matrix) -> Result<(Matrix, Vec<Matrix>)> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "mlp_forward",
                detail: format!("input dim {} vs expected {}", x.cols(), self.input_dim()),
            });
        }
        let mut acts = vec![x.clone()];
        let mut h = x.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = crate::numerics::matmul_nt(&h, &layer.weight)?;
            for i in 0..z.rows() {
                for j in 0..z.cols() {
                    z[(i, j)] += layer.bias[j];
                }
            }
            if li + 1 < self.layers.len() {
                for v in z.data_mut().iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                acts.push(z.clone());
                h = z;
            } else {
                return Ok((z, acts));
            }
        }
        unreachable!("loop returns at the output layer")
    }

    /// Exact gradients for a batch. `acts` is the cache returned by
    /// [`forward_batch`]; `d_out` is dLoss/dOutput. Optionally also
    /// returns dLoss/dInput.
    pub fn backward_batch(
        &self,
        acts: &[Matrix],
        d_out: &Matrix,
        need_dx: bool,
    ) -> Result<(MlpGrads, Option<Matrix>)> {
        let num = self.layers.len();
        let mut grads: Vec<Option<(Matrix, Vec<f64>)>> = (0..num).map(|_| None).collect();
        let mut dz = d_out.clone();
        for li in (0..num).rev() {
            let h_prev = &acts[li];
            let dw = matmul_tn(&dz, h_prev)?;
            let mut db = vec![0.0; dz.cols()];
            for i in 0..dz.rows() {
                for (j, dbj) in db.iter_mut().enumerate() {
                    *dbj += dz[(i, j)];
                }
            }
            grads[li] = Some((dw, db));
            if li == 0 && !need_dx {
                break;
            }
            let mut dh = matmul(&dz, &self.layers[li].weight)?;
            if li > 0 {
                // The rectifier mask: post-activation > 0 iff pre > 0.
                for i in 0..dh.rows() {
                    for j in 0..dh.cols() {
                        if h_prev[(i, j)] <= 0.0 {
                            dh[(i, j)] = 0.0;
                        }
                    }
                }
            }
            dz = dh;
        }
        let grads = MlpGrads {
            layers: grads.into_iter().map(|g| g.expect("all layers visited")).collect(),
        };
        Ok((grads, need_dx.then_some(dz)))
    }

    /// Overwrite the output-layer bias (e.g. with the train-label mean,
    /// so optimization starts at the offset and fits fluctuations).
    pub fn set_output_bias(&mut self, bias: &[f64]) {
        let last = self.layers.last_mut().expect("non-empty");
        assert_eq!(last.bias.len(), bias.len());
        last.bias.copy_from_slice(bias);
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data().len(), l.bias.len()])
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<(Matrix, Vec<f64>)>,
}

impl MlpGrads {
    pub fn zeros_like(p: &MlpParams) -> Self {
        Self {
            layers: p
                .layers
                .iter()
                .map(|l| (Matrix::zeros(l.weight.rows(), l.weight.cols()), vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in w.data_mut().iter_mut().zip(ow.data()) {
                *x += y;
            }
            for (x, y) in b.iter_mut().zip(ob) {
                *x += y;
            }
        }
    }

    pub fn grad_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.data(), b.as_slice()])
            .collect()
    }
}

// ── Losses ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Mse,
    BceLogits,
}

/// Mean loss over all (item, dim) entries and its gradient w.r.t. the
/// predictions.
pub fn loss_and_grad(pred: &Matrix, target: &Matrix, loss: Loss) -> (f64, Matrix) {
    debug_assert_eq!((pred.rows(), pred.cols()), (target.rows(), target.cols()));
    let count = (pred.rows() * pred.cols()) as f64;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut total = 0.0;
    for i in 0..pred.rows() {
        for j in 0..pred.cols() {
            let p = pred[(i, j)];
            let y = target[(i, j)];
            match loss {
                Loss::Mse => {
                    let d = p - y;
                    total += d * d;
                    grad[(i, j)] = 2.0 * d / count;
                }
                Loss::BceLogits => {
                    // Numerically stable: max(p,0) - p*y + ln(1 + e^{-|p|}).
                    total += p.max(0.0) - p * y + (-p.abs()).exp().ln_1p();
                    let sig = 1.0 / (1.0 + (-p).exp());
                    grad[(i, j)] = (sig - y) / count;
                }
            }
        }
    }
    (total / count, grad)
}

// ── Optimizer ───────────────────────────────────────────────────────

/// Adaptive-moment optimizer with decoupled weight decay
/// (beta1 = 0.9, beta2 = 0.999, eps = 1e-8). With zero gradient the
/// adaptive step is exactly zero, so parameters shrink by the exact
/// factor (1 - lr * weight_decay) per step.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(param_sizes: &[usize]) -> Self {
        Self {
            m: param_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: param_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        lr: f64,
        weight_decay: f64,
    ) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
                p[k] -= lr * update + lr * weight_decay * p[k];
            }
        }
    }
}

// ── Metrics ─────────────────────────────────────────────────────────

/// Evaluation metrics. `accuracy` is present for multilabel tasks only
/// (mean over (item, label) of thresholded-at-zero correctness) and
/// serializes as null otherwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub r2: f64,
    pub kendall_tau: f64,
    pub accuracy: Option<f64>,
}

/// Kendall's tau-a: all-pairs sign agreement; ties count as neither
/// concordant nor discordant; denominator is the full pair count.
pub fn kendall_tau_a(y: &[f64], yhat: &[f64]) -> f64 {
    assert_eq!(y.len(), yhat.len());
    let n = y.len();
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let s = (y[i] - y[j]) * (yhat[i] - yhat[j]);
            if s > 0.0 {
                concordant += 1;
            } else if s < 0.0 {
                discordant += 1;
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    (concordant - discordant) as f64 / pairs
}

pub fn compute_metrics(
    preds: &[Vec<f64>],
    labels: &[Vec<f64>],
    kind: TaskKind,
) -> Result<Metrics> {
    if preds.len() < 2 {
        return Err(Error::UndefinedMetric(
            "tau and r2 need at least 2 items".into(),
        ));
    }
    let flat_p: Vec<f64> = preds.iter().flatten().copied().collect();
    let flat_y: Vec<f64> = labels.iter().flatten().copied().collect();
    assert_eq!(flat_p.len(), flat_y.len());
    let count = flat_p.len() as f64;

    let mse = flat_p
        .iter()
        .zip(&flat_y)
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / count;

    let mean_y = flat_y.iter().sum::<f64>() / count;
    let ss_tot: f64 = flat_y.iter().map(|y| (y - mean_y) * (y - mean_y)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedMetric("labels have zero variance".into()));
    }
    let ss_res: f64 = flat_p
        .iter()
        .zip(&flat_y)
        .map(|(p, y)| (y - p) * (y - p))
        .sum();
    let r2 = 1.0 - ss_res / ss_tot;

    let kendall_tau = kendall_tau_a(&flat_y, &flat_p);

    let accuracy = match kind {
        TaskKind::Regression => None,
        TaskKind::Multilabel => {
            let correct = flat_p
                .iter()
                .zip(&flat_y)
                .filter(|(p, y)| (**p > 0.0) == (**y > 0.5))
                .count();
            Some(correct as f64 / count)
        }
    };

    Ok(Metrics { mse, r2, kendall_tau, accuracy })
}

// ── Standardization ─────────────────────────────────────────────────

/// Per-dimension z-scoring fit on the train split only. Constant
/// dimensions get a unit-like floor so they map to zero instead of
/// blowing up.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &Matrix) -> Self {
        let n = rows.rows().max(1) as f64;
        let d = rows.cols();
        let mut mean = vec![0.0; d];
        for i in 0..rows.rows() {
            for (j, m) in mean.iter_mut().enumerate() {
                *m += rows[(i, j)];
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; d];
        for i in 0..rows.rows() {
            for (j, v) in var.iter_mut().enumerate() {
                let c = rows[(i, j)] - mean[j];
                *v += c * c;
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt().max(1e-12)).collect();
        Self { mean, std }
    }

    pub fn transform_row(&self, row: &mut [f64]) {
        for (j, x) in row.iter_mut().enumerate() {
            *x = (*x - self.mean[j]) / self.std[j];
        }
    }

    pub fn transform(&self, rows: &mut Matrix) {
        let cols = rows.cols();
        for chunk in rows.data_mut().chunks_mut(cols) {
            self.transform_row(chunk);
        }
    }
}

// ── Predictor ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub enum PredictorModel {
    FeatMlp {
        featurizer: Featurizer,
        standardizer: Option<Standardizer>,
        mlp: MlpParams,
    },
    GlNet(GlNetParams),
}

/// A trained model together with the task it was trained for.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub model: PredictorModel,
    pub task: TaskDescriptor,
    pub train_shapes: Vec<LayerShape>,
}

impl Predictor {
    pub fn predict(&self, x: &LoraUpdate) -> Result<Vec<f64>> {
        match &self.model {
            PredictorModel::FeatMlp { featurizer, standardizer, mlp } => {
                let mut f = featurizer.featurize(x)?;
                if let Some(s) = standardizer {
                    s.transform_row(&mut f.values);
                }
                mlp.forward(&f.values)
            }
            PredictorModel::GlNet(p) => glnet::glnet_forward(p, x),
        }
    }

    pub fn predict_batch(&self, xs: &[&LoraUpdate]) -> Result<Vec<Vec<f64>>> {
        xs.par_iter().map(|x| self.predict(x)).collect()
    }
}

// ── Training ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: Loss,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument {
                op: "TrainConfig",
                detail: "epochs and batch_size must be >= 1".into(),
            });
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument {
                op: "TrainConfig",
                detail: "learning_rate and weight_decay must be non-negative".into(),
            });
        }
        Ok(())
    }
}

/// What to train.
#[derive(Debug, Clone)]
pub enum ModelSpec {
    FeatMlp { feat: FeaturizerConfig, hidden: Vec<usize>, standardize: bool },
    GlNet(GlNetConfig),
}

#[derive(Debug, Clone, Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
}

pub struct TrainOutput {
    pub predictor: Predictor,
    pub log: Vec<LogRow>,
}

/// Loss-log CSV with fixed columns; metric cells are empty when a row
/// carries no metrics.
pub fn log_to_csv(log: &[LogRow]) -> String {
    let mut out = String::from("epoch,split,loss,mse,r2,kendall_tau,accuracy\n");
    for row in log {
        let (mse, r2, tau, acc) = match &row.metrics {
            Some(m) => (
                format!("{:.17e}", m.mse),
                format!("{:.17e}", m.r2),
                format!("{:.17e}", m.kendall_tau),
                m.accuracy.map(|a| format!("{a:.17e}")).unwrap_or_default(),
            ),
            None => (String::new(), String::new(), String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{},{:.17e},{},{},{},{}\n",
            row.epoch, row.split, row.loss, mse, r2, tau, acc
        ));
    }
    out
}

pub fn train(
    spec: &ModelSpec,
    train_data: &TaskDataset,
    val_data: Option<&TaskDataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::InvalidArgument {
            op: "train",
            detail: "training dataset is empty".into(),
        });
    }
    train_data.validate()?;
    match spec {
        ModelSpec::FeatMlp { feat, hidden, standardize } => {
            train_feat_mlp(feat, hidden, *standardize, train_data, val_data, cfg)
        }
        ModelSpec::GlNet(glcfg) => train_glnet(glcfg, train_data, val_data, cfg),
    }
}

fn label_means(y: &Matrix) -> Vec<f64> {
    let mut means = vec![0.0; y.cols()];
    for i in 0..y.rows() {
        for (j, m) in means.iter_mut().enumerate() {
            *m += y[(i, j)];
        }
    }
    let n = y.rows().max(1) as f64;
    for m in means.iter_mut() {
        *m /= n;
    }
    means
}

fn labels_matrix(data: &TaskDataset) -> Matrix {
    let rows = data.len();
    let cols = data.task.label_dim;
    let mut m = Matrix::zeros(rows, cols);
    for (i, item) in data.items.iter().enumerate() {
        for (j, &v) in item.label.iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    m
}

fn feature_matrix(featurizer: &Featurizer, data: &TaskDataset) -> Result<Matrix> {
    let updates: Vec<&LoraUpdate> = data.items.iter().map(|it| &it.update).collect();
    let feats = featurizer.featurize_batch(&updates)?;
    let dim = feats.first().map(|f| f.values.len()).unwrap_or(0);
    let mut m = Matrix::zeros(data.len(), dim);
    for (i, f) in feats.iter().enumerate() {
        if f.values.len() != dim {
            return Err(Error::Shape {
                op: "feature_matrix",
                detail: "items produced different feature dimensions".into(),
            });
        }
        for (j, &v) in f.values.iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

fn gather_rows(x: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), x.cols());
    for (dst, &src) in idx.iter().enumerate() {
        for j in 0..x.cols() {
            out[(dst, j)] = x[(src, j)];
        }
    }
    out
}

fn train_feat_mlp(
    feat: &FeaturizerConfig,
    hidden: &[usize],
    standardize: bool,
    train_data: &TaskDataset,
    val_data: Option<&TaskDataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    let shapes = train_data.items[0].update.shapes();
    let featurizer = Featurizer::new(feat.clone(), &shapes)?;
    let mut x = feature_matrix(&featurizer, train_data)?;
    let y = labels_matrix(train_data);

    let standardizer = standardize.then(|| Standardizer::fit(&x));
    if let Some(s) = &standardizer {
        s.transform(&mut x);
    }
    let val = val_data
        .map(|vd| -> Result<(Matrix, Matrix)> {
            let mut vx = feature_matrix(&featurizer, vd)?;
            if let Some(s) = &standardizer {
                s.transform(&mut vx);
            }
            Ok((vx, labels_matrix(vd)))
        })
        .transpose()?;

    let mut dims = vec![x.cols()];
    dims.extend_from_slice(hidden);
    dims.push(train_data.task.label_dim);
    let mut mlp = MlpParams::init(&dims, derive_seed(cfg.seed, 0x11));
    if cfg.loss == Loss::Mse {
        mlp.set_output_bias(&label_means(&y));
    }
    let mut adam = Adam::new(&mlp.param_sizes());

    let n = train_data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x22));
    let mut log = Vec::new();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let xb = gather_rows(&x, batch);
            let yb = gather_rows(&y, batch);
            let (pred, acts) = mlp.forward_batch(&xb)?;
            let (loss, dpred) = loss_and_grad(&pred, &yb, cfg.loss);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_idx });
            }
            let (grads, _) = mlp.backward_batch(&acts, &dpred, false)?;
            adam.step(
                &mut mlp.param_slices_mut(),
                &grads.grad_slices(),
                cfg.learning_rate,
                cfg.weight_decay,
            );
        }
        // End-of-epoch loss with the settled parameters, so the final
        // logged value matches a later evaluation of the checkpoint.
        let (pred, _) = mlp.forward_batch(&x)?;
        let (train_loss, _) = loss_and_grad(&pred, &y, cfg.loss);
        log.push(LogRow { epoch, split: "train".into(), loss: train_loss, metrics: None });
        if let Some((vx, vy)) = &val {
            let (vpred, _) = mlp.forward_batch(vx)?;
            let (vloss, _) = loss_and_grad(&vpred, vy, cfg.loss);
            let rows: Vec<Vec<f64>> = (0..vpred.rows()).map(|i| vpred.row(i).to_vec()).collect();
            let lab: Vec<Vec<f64>> = (0..vy.rows()).map(|i| vy.row(i).to_vec()).collect();
            let metrics = compute_metrics(&rows, &lab, train_data.task.kind).ok();
            log.push(LogRow { epoch, split: "val".into(), loss: vloss, metrics });
        }
    }

    Ok(TrainOutput {
        predictor: Predictor {
            model: PredictorModel::FeatMlp { featurizer, standardizer, mlp },
            task: train_data.task.clone(),
            train_shapes: shapes,
        },
        log,
    })
}

// Items per gradient work unit. Fixed (not thread-dependent) so chunk
// boundaries, and therefore accumulation order, never change.
const GRAD_CHUNK: usize = 8;

fn train_glnet(
    glcfg: &GlNetConfig,
    train_data: &TaskDataset,
    val_data: Option<&TaskDataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    let shapes = train_data.items[0].update.shapes();
    let nm: Vec<(usize, usize)> = shapes.iter().map(|s| (s.n, s.m)).collect();
    let mut params = GlNetParams::init(glcfg, &nm, train_data.task.label_dim, derive_seed(cfg.seed, 0x33));
    if cfg.loss == Loss::Mse {
        params.head.set_output_bias(&label_means(&labels_matrix(train_data)));
    }
    let mut adam = Adam::new(&params.param_sizes());

    let n = train_data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x44));
    let mut log = Vec::new();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let count = (batch.len() * train_data.task.label_dim) as f64;
            // Per-chunk partial sums, folded in chunk order.
            let partials: Result<Vec<(f64, GlNetGrads)>> = batch
                .par_chunks(GRAD_CHUNK)
                .map(|chunk| {
                    let mut acc = GlNetGrads::zeros_like(&params);
                    let mut loss_sum = 0.0;
                    for &idx in chunk {
                        let item = &train_data.items[idx];
                        let (out, cache) = glnet::glnet_forward_cached(&params, &item.update)?;
                        let mut upstream = vec![0.0; out.len()];
                        for (j, (p, yv)) in out.iter().zip(&item.label).enumerate() {
                            match cfg.loss {
                                Loss::Mse => {
                                    let d = p - yv;
                                    loss_sum += d * d;
                                    upstream[j] = 2.0 * d / count;
                                }
                                Loss::BceLogits => {
                                    loss_sum +=
                                        p.max(0.0) - p * yv + (-p.abs()).exp().ln_1p();
                                    let sig = 1.0 / (1.0 + (-p).exp());
                                    upstream[j] = (sig - yv) / count;
                                }
                            }
                        }
                        let g = glnet::glnet_backward(&params, &item.update, &cache, &upstream)?;
                        acc.add_assign(&g);
                    }
                    Ok((loss_sum, acc))
                })
                .collect();
            let partials = partials?;
            let mut total_loss = 0.0;
            let mut grads = GlNetGrads::zeros_like(&params);
            for (l, g) in &partials {
                total_loss += l;
                grads.add_assign(g);
            }
            let batch_loss = total_loss / count;
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_idx });
            }
            adam.step(
                &mut params.param_slices_mut(),
                &grads.grad_slices(),
                cfg.learning_rate,
                cfg.weight_decay,
            );
        }

        let train_loss = glnet_dataset_loss(&params, train_data, cfg.loss)?;
        log.push(LogRow { epoch, split: "train".into(), loss: train_loss, metrics: None });
        if let Some(vd) = val_data {
            let vloss = glnet_dataset_loss(&params, vd, cfg.loss)?;
            let preds: Result<Vec<Vec<f64>>> = vd
                .items
                .par_iter()
                .map(|it| glnet::glnet_forward(&params, &it.update))
                .collect();
            let labels: Vec<Vec<f64>> = vd.items.iter().map(|it| it.label.clone()).collect();
            let metrics = compute_metrics(&preds?, &labels, vd.task.kind).ok();
            log.push(LogRow { epoch, split: "val".into(), loss: vloss, metrics });
        }
    }

    Ok(TrainOutput {
        predictor: Predictor {
            model: PredictorModel::GlNet(params),
            task: train_data.task.clone(),
            train_shapes: shapes,
        },
        log,
    })
}

fn glnet_dataset_loss(params: &GlNetParams, data: &TaskDataset, loss: Loss) -> Result<f64> {
    let preds: Result<Vec<Vec<f64>>> = data
        .items
        .par_iter()
        .map(|it| glnet::glnet_forward(params, &it.update))
        .collect();
    let preds = preds?;
    let rows = data.len();
    let cols = data.task.label_dim;
    let mut pm = Matrix::zeros(rows, cols);
    for (i, p) in preds.iter().enumerate() {
        for (j, &v) in p.iter().enumerate() {
            pm[(i, j)] = v;
        }
    }
    let (l, _) = loss_and_grad(&pm, &labels_matrix(data), loss);
    Ok(l)
}

/// Dataset loss under a trained predictor (the quantity the training log
/// records for the train split each epoch).
pub fn dataset_loss(predictor: &Predictor, data: &TaskDataset, loss: Loss) -> Result<f64> {
    let updates: Vec<&LoraUpdate> = data.items.iter().map(|it| &it.update).collect();
    let preds = predictor.predict_batch(&updates)?;
    let mut pm = Matrix::zeros(data.len(), data.task.label_dim);
    for (i, p) in preds.iter().enumerate() {
        for (j, &v) in p.iter().enumerate() {
            pm[(i, j)] = v;
        }
    }
    let (l, _) = loss_and_grad(&pm, &labels_matrix(data), loss);
    Ok(l)
}

/// Metrics of a predictor on a dataset; order-invariant in the items.
pub fn evaluate(predictor: &Predictor, data: &TaskDataset) -> Result<Metrics> {
    let updates: Vec<&LoraUpdate> = data.items.iter().map(|it| &it.update).collect();
    let preds = predictor.predict_batch(&updates)?;
    let labels: Vec<Vec<f64>> = data.items.iter().map(|it| it.label.clone()).collect();
    compute_metrics(&preds, &labels, data.task.kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::FeatureMethod;
    use crate::lora::{TaskItem, TaskKind};
    use crate::verify::relative_deviation;

    #[test]
    fn identity_layer_is_identity() {
        let mlp = MlpParams::from_layers(vec![MlpLayer {
            weight: Matrix::identity(3),
            bias: vec![0.0; 3],
        }])
        .unwrap();
        let x = vec![1.0, -2.0, 0.5];
        assert_eq!(mlp.forward(&x).unwrap(), x);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mlp = MlpParams::from_layers(vec![MlpLayer {
            weight: Matrix::zeros(2, 4),
            bias: vec![0.7, -0.3],
        }])
        .unwrap();
        assert_eq!(mlp.forward(&[1.0; 4]).unwrap(), vec![0.7, -0.3]);
    }

    #[test]
    fn forward_matches_reference() {
        let mlp = MlpParams::init(&[5, 4, 2], 9);
        let x: Vec<f64> = (0..5).map(|i| (i as f64) * 0.3 - 0.7).collect();
        let got = mlp.forward(&x).unwrap();
        let weights: Vec<Matrix> = mlp.layers().iter().map(|l| l.weight.clone()).collect();
        let biases: Vec<Vec<f64>> = mlp.layers().iter().map(|l| l.bias.clone()).collect();
        let want = crate::verify::mlp_forward_reference(&weights, &biases, &x);
        assert!(relative_deviation(&got, &want) <= 1e-12);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mlp = MlpParams::init(&[4, 3, 2], 1);
        let x = Matrix::from_fn(3, 4, |i, j| (i + j) as f64 * 0.1);
        let (out, acts) = mlp.forward_batch(&x).unwrap();
        let dz = Matrix::zeros(out.rows(), out.cols());
        let (grads, _) = mlp.backward_batch(&acts, &dz, false).unwrap();
        for s in grads.grad_slices() {
            assert!(s.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn mse_gradient_zero_at_perfect_prediction() {
        let p = Matrix::from_fn(2, 2, |i, j| (i * 2 + j) as f64);
        let (loss, grad) = loss_and_grad(&p, &p, Loss::Mse);
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let report = crate::verify::gradients_suite(crate::verify::SuiteConfig {
            trials: 3,
            tolerance: 1e-4,
            seed: 5,
        });
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn adam_zero_grad_and_decay() {
        let mut p = vec![1.0, -2.0];
        let sizes = [2usize];
        let mut adam = Adam::new(&sizes);
        let g = vec![0.0, 0.0];
        adam.step(&mut [&mut p], &[&g], 0.1, 0.0);
        assert_eq!(p, vec![1.0, -2.0]);
        // Decay alone shrinks by exactly (1 - lr * wd) per step.
        let mut adam = Adam::new(&sizes);
        adam.step(&mut [&mut p], &[&g], 0.1, 0.5);
        adam.step(&mut [&mut p], &[&g], 0.1, 0.5);
        let f = (1.0 - 0.1 * 0.5) * (1.0 - 0.1 * 0.5);
        assert!((p[0] - 1.0 * f).abs() <= 1e-15);
        assert!((p[1] - -2.0 * f).abs() <= 1e-15);
    }

    #[test]
    fn tau_by_pair_enumeration() {
        // Pairs of y=[1,2,3] vs yhat=[1,3,2]: 2 concordant, 1 discordant.
        let tau = kendall_tau_a(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]);
        assert!((tau - 1.0 / 3.0).abs() <= 1e-15);
    }

    #[test]
    fn metrics_perfect_and_mean_prediction() {
        let labels = vec![vec![1.0], vec![2.0], vec![3.0]];
        let m = compute_metrics(&labels, &labels, TaskKind::Regression).unwrap();
        assert_eq!(m.mse, 0.0);
        assert_eq!(m.r2, 1.0);
        assert_eq!(m.kendall_tau, 1.0);
        assert!(m.accuracy.is_none());

        let mean_pred = vec![vec![2.0]; 3];
        let m = compute_metrics(&mean_pred, &labels, TaskKind::Regression).unwrap();
        assert!((m.r2 - 0.0).abs() <= 1e-15);
    }

    #[test]
    fn metrics_undefined_cases() {
        let one = vec![vec![1.0]];
        assert!(matches!(
            compute_metrics(&one, &one, TaskKind::Regression),
            Err(Error::UndefinedMetric(_))
        ));
        let preds = vec![vec![1.0], vec![2.0]];
        let constant = vec![vec![5.0], vec![5.0]];
        assert!(matches!(
            compute_metrics(&preds, &constant, TaskKind::Regression),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn metrics_json_keys() {
        let m = Metrics { mse: 0.5, r2: 0.9, kendall_tau: 0.3, accuracy: None };
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, r#"{"mse":0.5,"r2":0.9,"kendall_tau":0.3,"accuracy":null}"#);
        let m = Metrics { mse: 0.0, r2: 1.0, kendall_tau: 1.0, accuracy: Some(0.75) };
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, r#"{"mse":0.0,"r2":1.0,"kendall_tau":1.0,"accuracy":0.75}"#);
    }

    #[test]
    fn standardizer_floors_constant_dims() {
        let x = Matrix::new(2, 2, vec![1.0, 5.0, 3.0, 5.0]).unwrap();
        let s = Standardizer::fit(&x);
        let mut row = vec![2.0, 5.0];
        s.transform_row(&mut row);
        assert!((row[0] - 0.0).abs() <= 1e-12);
        assert_eq!(row[1], 0.0);
    }

    fn toy_dataset(kind: TaskKind) -> TaskDataset {
        let items: Vec<TaskItem> = (0..8)
            .map(|i| {
                let update = LoraUpdate::random(&[(5, 4)], 2, 1.0, 100 + i);
                let s: f64 = update.layers()[0].u.data().iter().sum();
                let label = match kind {
                    TaskKind::Regression => vec![s],
                    TaskKind::Multilabel => vec![if s > 0.0 { 1.0 } else { 0.0 }],
                };
                TaskItem { update, label }
            })
            .collect();
        TaskDataset {
            items,
            task: TaskDescriptor {
                kind,
                label_dim: 1,
                name: "toy".into(),
            },
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let data = toy_dataset(TaskKind::Regression);
        let spec = ModelSpec::FeatMlp {
            feat: FeaturizerConfig::new(FeatureMethod::Flatten),
            hidden: vec![8],
            standardize: false,
        };
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 0.0,
            weight_decay: 0.0,
            seed: 7,
            loss: Loss::Mse,
        };
        let out = train(&spec, &data, None, &cfg).unwrap();
        // Initialization includes the label-mean output bias; zero steps
        // of zero learning rate must leave everything else untouched.
        let mut reference = MlpParams::init(&[18, 8, 1], derive_seed(7, 0x11));
        reference.set_output_bias(&label_means(&labels_matrix(&data)));
        match out.predictor.model {
            PredictorModel::FeatMlp { mlp, .. } => assert_eq!(mlp, reference),
            _ => unreachable!(),
        }
    }

    #[test]
    fn separable_multilabel_toy_reaches_full_accuracy() {
        // Two-point linearly separable toy with a known separator.
        let a = LoraUpdate::random(&[(3, 3)], 1, 1.0, 1);
        let b = LoraUpdate::random(&[(3, 3)], 1, 1.0, 2);
        let data = TaskDataset {
            items: vec![
                TaskItem { update: a, label: vec![1.0] },
                TaskItem { update: b, label: vec![0.0] },
            ],
            task: TaskDescriptor { kind: TaskKind::Multilabel, label_dim: 1, name: "sep".into() },
        };
        let spec = ModelSpec::FeatMlp {
            feat: FeaturizerConfig::new(FeatureMethod::Flatten),
            hidden: vec![4],
            standardize: false,
        };
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 2,
            learning_rate: 0.05,
            weight_decay: 0.0,
            seed: 3,
            loss: Loss::BceLogits,
        };
        let out = train(&spec, &data, None, &cfg).unwrap();
        let m = evaluate(&out.predictor, &data).unwrap();
        assert_eq!(m.accuracy, Some(1.0));
    }

    #[test]
    fn same_seed_gives_identical_logs() {
        let data = toy_dataset(TaskKind::Regression);
        let spec = ModelSpec::FeatMlp {
            feat: FeaturizerConfig::new(FeatureMethod::Dense),
            hidden: vec![8],
            standardize: true,
        };
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 3,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            seed: 11,
            loss: Loss::Mse,
        };
        let a = train(&spec, &data, None, &cfg).unwrap();
        let b = train(&spec, &data, None, &cfg).unwrap();
        let csv_a = log_to_csv(&a.log);
        let csv_b = log_to_csv(&b.log);
        assert_eq!(csv_a, csv_b);
        let la: Vec<f64> = a.log.iter().map(|r| r.loss).collect();
        let lb: Vec<f64> = b.log.iter().map(|r| r.loss).collect();
        assert_eq!(la, lb);
    }

    #[test]
    fn evaluate_is_order_invariant() {
        let data = toy_dataset(TaskKind::Regression);
        let spec = ModelSpec::FeatMlp {
            feat: FeaturizerConfig::new(FeatureMethod::Flatten),
            hidden: vec![6],
            standardize: false,
        };
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            seed: 2,
            loss: Loss::Mse,
        };
        let out = train(&spec, &data, None, &cfg).unwrap();
        let m1 = evaluate(&out.predictor, &data).unwrap();
        let mut reversed = data.clone();
        reversed.items.reverse();
        let m2 = evaluate(&out.predictor, &reversed).unwrap();
        // Sums over a permuted dataset agree up to accumulation rounding;
        // the pair-counting tau is exactly invariant.
        assert!((m1.mse - m2.mse).abs() <= 1e-12 * m1.mse.abs().max(1.0));
        assert!((m1.r2 - m2.r2).abs() <= 1e-12);
        assert_eq!(m1.kendall_tau, m2.kendall_tau);
    }
}
