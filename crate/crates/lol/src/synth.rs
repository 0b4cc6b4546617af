//! Seeded synthetic task generation.
//!
//! Stands in for fleets of finetuned checkpoints: items are Gaussian
//! factor pairs (redrawn in the rare rank-deficient case), labels come
//! from teacher functions of the dense products only — so the ground
//! truth is exactly gauge-invariant — and a gauge policy optionally
//! scrambles factors by random invertible matrices after the label is
//! fixed. Everything is a pure function of the spec seed: item i uses a
//! seed derived from (seed, i), so parallel generation cannot change
//! outputs and split membership is stable.

use crate::error::{Error, Result};
use crate::lora::{
    act, GroupElement, LoraUpdate, TaskDataset, TaskDescriptor, TaskItem, TaskKind,
    DENSE_ENTRY_CAP,
};
use crate::numerics::{derive_seed, gaussian_matrix, Matrix};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Gauge condition bound used when scrambling; keeps float comparisons
/// of invariant quantities meaningful.
pub const SCRAMBLE_COND_BOUND: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Teacher {
    /// Mean over layers of ||U_i V_i^T||_F divided by the task rank.
    FrobeniusOfProduct,
    /// Mean over layers and product rows of tanh(row sum / sqrt(m * r)).
    /// Sign-sensitive, unlike singular values.
    RowsumTanhScore,
    /// Bit k is 1 iff the first layer's dense product has positive inner
    /// product with a fixed random probe matrix P_k.
    PlantedMultilabel,
}

impl Teacher {
    pub fn kind(&self) -> TaskKind {
        match self {
            Teacher::PlantedMultilabel => TaskKind::Multilabel,
            _ => TaskKind::Regression,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Teacher::FrobeniusOfProduct => "frobenius",
            Teacher::RowsumTanhScore => "rowsum",
            Teacher::PlantedMultilabel => "multilabel",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaugePolicy {
    Canonical,
    ScrambledTrainAndTest,
    CanonicalTrainScrambledTest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthTaskSpec {
    pub layers: Vec<(usize, usize)>,
    pub rank: usize,
    pub count: usize,
    pub teacher: Teacher,
    pub gauge: GaugePolicy,
    pub noise_std: f64,
    pub seed: u64,
    /// Standard deviation of factor entries. Rank sweeps shrink this as
    /// rank grows so the dense-product scale, and with it the label
    /// distribution, stays comparable across ranks.
    pub factor_scale: f64,
    /// Log-normal per-item magnitude spread: item i's factors are
    /// multiplied by exp(scale_jitter * g_i), g_i standard normal.
    /// Mirrors the magnitude diversity of checkpoints trained with
    /// varied hyperparameters; zero disables it.
    pub scale_jitter: f64,
    /// Label width for the multilabel teacher.
    pub probe_count: usize,
}

impl SynthTaskSpec {
    pub fn new(layers: Vec<(usize, usize)>, rank: usize, count: usize, teacher: Teacher) -> Self {
        Self {
            layers,
            rank,
            count,
            teacher,
            gauge: GaugePolicy::Canonical,
            noise_std: 0.0,
            seed: 0,
            factor_scale: 1.0,
            scale_jitter: 0.0,
            probe_count: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count < 4 {
            return Err(Error::InvalidArgument {
                op: "SynthTaskSpec",
                detail: format!("count must be >= 4, got {}", self.count),
            });
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::InvalidArgument {
                op: "SynthTaskSpec",
                detail: "noise_std must be >= 0".into(),
            });
        }
        if !(self.scale_jitter >= 0.0) {
            return Err(Error::InvalidArgument {
                op: "SynthTaskSpec",
                detail: "scale_jitter must be >= 0".into(),
            });
        }
        if self.rank == 0 {
            return Err(Error::InvalidArgument {
                op: "SynthTaskSpec",
                detail: "rank must be >= 1".into(),
            });
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument {
                op: "SynthTaskSpec",
                detail: "at least one layer shape required".into(),
            });
        }
        for &(n, m) in &self.layers {
            if n < self.rank || m < self.rank {
                return Err(Error::InvalidArgument {
                    op: "SynthTaskSpec",
                    detail: format!("layer {n}x{m} cannot host rank {}", self.rank),
                });
            }
        }
        if self.teacher == Teacher::PlantedMultilabel && self.probe_count == 0 {
            return Err(Error::InvalidArgument {
                op: "SynthTaskSpec",
                detail: "probe_count must be >= 1 for the multilabel teacher".into(),
            });
        }
        Ok(())
    }

    pub fn label_dim(&self) -> usize {
        match self.teacher {
            Teacher::PlantedMultilabel => self.probe_count,
            _ => 1,
        }
    }

    pub fn ranks(&self) -> Vec<usize> {
        vec![self.rank; self.layers.len()]
    }
}

/// Deterministic index ranges: first 80% train, next 10% val, rest test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

pub fn split_ranges(count: usize) -> SplitRanges {
    let train_end = count * 8 / 10;
    let val_end = count * 9 / 10;
    SplitRanges { train: 0..train_end, val: train_end..val_end, test: val_end..count }
}

#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: TaskDataset,
    pub val: TaskDataset,
    pub test: TaskDataset,
}

pub fn split_dataset(ds: &TaskDataset) -> DatasetSplits {
    let ranges = split_ranges(ds.len());
    let slice = |r: &Range<usize>| TaskDataset {
        items: ds.items[r.clone()].to_vec(),
        task: ds.task.clone(),
    };
    DatasetSplits {
        train: slice(&ranges.train),
        val: slice(&ranges.val),
        test: slice(&ranges.test),
    }
}

/// Probe matrices for the multilabel teacher, fixed by the task seed.
pub fn probes_for(spec: &SynthTaskSpec) -> Vec<Matrix> {
    if spec.teacher != Teacher::PlantedMultilabel {
        return Vec::new();
    }
    let (n, m) = spec.layers[0];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0x5052_4F42));
    (0..spec.probe_count).map(|_| gaussian_matrix(n, m, &mut rng)).collect()
}

/// Noise-free teacher value as a function of the dense products alone.
pub fn teacher_margins(spec: &SynthTaskSpec, probes: &[Matrix], products: &[Matrix]) -> Vec<f64> {
    match spec.teacher {
        Teacher::FrobeniusOfProduct => {
            let mean = products.iter().map(Matrix::frobenius_norm).sum::<f64>()
                / products.len() as f64;
            vec![mean / spec.rank as f64]
        }
        Teacher::RowsumTanhScore => {
            let mut total = 0.0;
            for p in products {
                let norm = ((p.cols() * spec.rank) as f64).sqrt();
                let mut layer_sum = 0.0;
                for i in 0..p.rows() {
                    let row_sum: f64 = p.row(i).iter().sum();
                    layer_sum += (row_sum / norm).tanh();
                }
                total += layer_sum / p.rows() as f64;
            }
            vec![total / products.len() as f64]
        }
        Teacher::PlantedMultilabel => probes
            .iter()
            .map(|probe| {
                probe
                    .data()
                    .iter()
                    .zip(products[0].data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .collect(),
    }
}

fn margins_to_label(spec: &SynthTaskSpec, margins: &[f64], noise: &[f64]) -> Vec<f64> {
    match spec.teacher.kind() {
        TaskKind::Regression => margins.iter().zip(noise).map(|(m, e)| m + e).collect(),
        TaskKind::Multilabel => margins
            .iter()
            .zip(noise)
            .map(|(m, e)| if m + e > 0.0 { 1.0 } else { 0.0 })
            .collect(),
    }
}

fn should_scramble(policy: GaugePolicy, idx: usize, ranges: &SplitRanges) -> bool {
    match policy {
        GaugePolicy::Canonical => false,
        GaugePolicy::ScrambledTrainAndTest => true,
        GaugePolicy::CanonicalTrainScrambledTest => idx >= ranges.train.end,
    }
}

/// Generate the full dataset for a spec. Items are ordered by index;
/// split membership is by [`split_ranges`], so per-item seeds are
/// disjoint across splits by construction.
pub fn generate(spec: &SynthTaskSpec) -> Result<TaskDataset> {
    spec.validate()?;
    let probes = probes_for(spec);
    let ranges = split_ranges(spec.count);
    let items: Result<Vec<TaskItem>> = (0..spec.count)
        .into_par_iter()
        .map(|idx| generate_item(spec, &probes, idx, should_scramble(spec.gauge, idx, &ranges)))
        .collect();
    let ds = TaskDataset {
        items: items?,
        task: TaskDescriptor {
            kind: spec.teacher.kind(),
            label_dim: spec.label_dim(),
            name: spec.teacher.name().to_string(),
        },
    };
    ds.validate()?;
    Ok(ds)
}

fn generate_item(
    spec: &SynthTaskSpec,
    probes: &[Matrix],
    idx: usize,
    scramble: bool,
) -> Result<TaskItem> {
    let item_seed = derive_seed(spec.seed, idx as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
    let jitter: f64 = rng.sample(StandardNormal);
    let scale = spec.factor_scale * (spec.scale_jitter * jitter).exp();
    let update = loop {
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, &(n, m))| crate::lora::LoraLayer {
                name: format!("layer_{i}"),
                u: gaussian_matrix(n, spec.rank, &mut rng).scaled(scale),
                v: gaussian_matrix(m, spec.rank, &mut rng).scaled(scale),
            })
            .collect::<Vec<_>>();
        let candidate = LoraUpdate::new(layers)?;
        // Full-rank domain: redraw the (measure-zero, float-rare) failures.
        if crate::lora::numerical_rank(&candidate, 1e-10) == spec.ranks() {
            break candidate;
        }
    };

    let products = update.dense_products(DENSE_ENTRY_CAP)?;
    let margins = teacher_margins(spec, probes, &products);
    let noise: Vec<f64> = (0..margins.len())
        .map(|_| {
            let g: f64 = rng.sample(StandardNormal);
            g * spec.noise_std
        })
        .collect();
    let label = margins_to_label(spec, &margins, &noise);

    let update = if scramble {
        let g = GroupElement::random_gl(
            &spec.ranks(),
            SCRAMBLE_COND_BOUND,
            derive_seed(item_seed, 0x5C7A),
        )?;
        let scrambled = act(&update, &g)?;
        // Labels are fixed before scrambling; the teacher must agree on
        // the scrambled factors because it only sees dense products.
        let scrambled_margins =
            teacher_margins(spec, probes, &scrambled.dense_products(DENSE_ENTRY_CAP)?);
        let scale = margins
            .iter()
            .fold(1.0f64, |m, x| m.max(x.abs()));
        for (a, b) in margins.iter().zip(&scrambled_margins) {
            assert!(
                (a - b).abs() <= 1e-8 * scale,
                "teacher changed under scrambling: {a} vs {b}"
            );
        }
        scrambled
    } else {
        update
    };

    Ok(TaskItem { update, label })
}

/// Datasets over a list of ranks sharing one teacher. The entry whose
/// rank equals the base rank is exactly `generate(base_spec)`; other
/// ranks get derived seeds, a `rank-gen` task-name suffix, and factor
/// scales shrunk by (base_rank / rank)^(1/4) so the product scale is
/// comparable. Training convention: fit on the base-rank train split,
/// evaluate everywhere else.
pub fn generate_rank_sweep(base_spec: &SynthTaskSpec, ranks: &[usize]) -> Result<Vec<TaskDataset>> {
    if ranks.is_empty() {
        return Err(Error::InvalidArgument {
            op: "generate_rank_sweep",
            detail: "ranks list must be non-empty".into(),
        });
    }
    ranks
        .iter()
        .map(|&r| {
            if r == base_spec.rank {
                return generate(base_spec);
            }
            let mut spec = base_spec.clone();
            spec.rank = r;
            spec.factor_scale =
                base_spec.factor_scale * (base_spec.rank as f64 / r as f64).powf(0.25);
            spec.seed = derive_seed(base_spec.seed, 0x7261_6E6B + r as u64);
            let mut ds = generate(&spec)?;
            ds.task.name = format!("{}-rank-gen-r{r}", ds.task.name);
            Ok(ds)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::numerical_rank;

    fn base_spec(teacher: Teacher) -> SynthTaskSpec {
        let mut spec = SynthTaskSpec::new(vec![(12, 10), (8, 9)], 3, 20, teacher);
        spec.seed = 42;
        spec
    }

    #[test]
    fn frobenius_teacher_matches_dense_oracle() {
        // Single layer at rank 1 so the teacher value is exactly the
        // Frobenius norm of the product.
        let mut spec = SynthTaskSpec::new(vec![(9, 7)], 1, 4, Teacher::FrobeniusOfProduct);
        spec.seed = 3;
        let ds = generate(&spec).unwrap();
        for item in &ds.items {
            let l = &item.update.layers()[0];
            let dense = crate::verify::matmul_naive(&l.u, &l.v.transpose());
            assert!((item.label[0] - dense.frobenius_norm()).abs() <= 1e-10);
        }
    }

    #[test]
    fn scrambling_preserves_labels_and_changes_factors() {
        let mut canonical = base_spec(Teacher::FrobeniusOfProduct);
        canonical.gauge = GaugePolicy::Canonical;
        let mut scrambled = canonical.clone();
        scrambled.gauge = GaugePolicy::ScrambledTrainAndTest;
        let a = generate(&canonical).unwrap();
        let b = generate(&scrambled).unwrap();
        for (x, y) in a.items.iter().zip(&b.items) {
            assert_eq!(x.label, y.label);
            let dx = x.update.layers()[0].u.data();
            let dy = y.update.layers()[0].u.data();
            assert!(dx.iter().zip(dy).any(|(p, q)| (p - q).abs() > 1e-9));
        }
    }

    #[test]
    fn canonical_train_scrambled_test_splits_at_train_boundary() {
        let mut spec = base_spec(Teacher::RowsumTanhScore);
        spec.gauge = GaugePolicy::CanonicalTrainScrambledTest;
        let with_policy = generate(&spec).unwrap();
        let mut plain = spec.clone();
        plain.gauge = GaugePolicy::Canonical;
        let canonical = generate(&plain).unwrap();
        let ranges = split_ranges(spec.count);
        for idx in 0..spec.count {
            let same = with_policy.items[idx].update == canonical.items[idx].update;
            assert_eq!(same, idx < ranges.train.end, "item {idx}");
        }
    }

    #[test]
    fn teacher_is_gauge_invariant() {
        let spec = base_spec(Teacher::RowsumTanhScore);
        let probes = probes_for(&spec);
        let ds = generate(&spec).unwrap();
        for (i, item) in ds.items.iter().take(5).enumerate() {
            let g = GroupElement::random_gl(&spec.ranks(), 1e3, 900 + i as u64).unwrap();
            let moved = act(&item.update, &g).unwrap();
            let a = teacher_margins(&spec, &probes, &item.update.dense_products(usize::MAX).unwrap());
            let b = teacher_margins(&spec, &probes, &moved.dense_products(usize::MAX).unwrap());
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-8 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn multilabel_probes_are_reproducible() {
        let mut spec = base_spec(Teacher::PlantedMultilabel);
        spec.probe_count = 3;
        let ds1 = generate(&spec).unwrap();
        let ds2 = generate(&spec).unwrap();
        assert_eq!(ds1.task.label_dim, 3);
        for (a, b) in ds1.items.iter().zip(&ds2.items) {
            assert_eq!(a.label, b.label);
            assert!(a.label.iter().all(|&b| b == 0.0 || b == 1.0));
        }
        // Bits follow the probe inner-product oracle.
        let probes = probes_for(&spec);
        for item in ds1.items.iter().take(5) {
            let dense = item.update.dense_products(usize::MAX).unwrap();
            for (k, probe) in probes.iter().enumerate() {
                let ip: f64 = probe.data().iter().zip(dense[0].data()).map(|(a, b)| a * b).sum();
                assert_eq!(item.label[k], if ip > 0.0 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn split_seeds_are_disjoint_and_items_unique() {
        let spec = base_spec(Teacher::FrobeniusOfProduct);
        let ds = generate(&spec).unwrap();
        let splits = split_dataset(&ds);
        assert_eq!(splits.train.len() + splits.val.len() + splits.test.len(), ds.len());
        // No item repeats across splits (labels + factors both differ).
        let flat = |d: &TaskDataset| -> Vec<Vec<f64>> {
            d.items.iter().map(|i| i.update.layers()[0].u.data().to_vec()).collect()
        };
        let train = flat(&splits.train);
        for t in flat(&splits.test) {
            assert!(!train.contains(&t));
        }
    }

    #[test]
    fn rank_sweep_base_rank_reduces_to_generate() {
        let spec = base_spec(Teacher::FrobeniusOfProduct);
        let sweep = generate_rank_sweep(&spec, &[spec.rank]).unwrap();
        let direct = generate(&spec).unwrap();
        assert_eq!(sweep[0].task, direct.task);
        for (a, b) in sweep[0].items.iter().zip(&direct.items) {
            assert_eq!(a.update, b.update);
        }
    }

    #[test]
    fn rank_sweep_rank_one_items_have_rank_one() {
        let spec = base_spec(Teacher::FrobeniusOfProduct);
        let sweep = generate_rank_sweep(&spec, &[1]).unwrap();
        assert!(sweep[0].task.name.contains("rank-gen"));
        for item in sweep[0].items.iter().take(5) {
            assert_eq!(numerical_rank(&item.update, 1e-10), vec![1, 1]);
        }
    }

    #[test]
    fn rank_sweep_labels_stay_in_range() {
        // The (base/r)^(1/4) factor scaling keeps the frobenius teacher
        // within a fixed range across ranks.
        let mut spec = base_spec(Teacher::FrobeniusOfProduct);
        spec.count = 40;
        let bound = {
            let (n, m) = spec.layers[0];
            4.0 * ((n * m) as f64).sqrt()
        };
        for ds in generate_rank_sweep(&spec, &[1, 2, 3, 6]).unwrap() {
            for item in &ds.items {
                assert!(item.label[0] > 0.0 && item.label[0] <= bound, "{}", item.label[0]);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = base_spec(Teacher::FrobeniusOfProduct);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        for (x, y) in a.items.iter().zip(&b.items) {
            assert_eq!(x.update, y.update);
            assert_eq!(x.label, y.label);
        }
    }

    #[test]
    fn spec_validation() {
        let mut spec = base_spec(Teacher::FrobeniusOfProduct);
        spec.count = 3;
        assert!(spec.validate().is_err());
        let mut spec = base_spec(Teacher::FrobeniusOfProduct);
        spec.rank = 0;
        assert!(spec.validate().is_err());
        let mut spec = base_spec(Teacher::FrobeniusOfProduct);
        spec.rank = 11;
        assert!(spec.validate().is_err(), "rank larger than a layer side");
    }
}
