//! Wall-clock scaling measurements for featurizer preprocessing and
//! predictor forward passes.
//!
//! Benchmark models use a linear readout (no hidden layer) so the
//! forward cost reflects the feature dimension, and so the dense
//! method's giant first layer stays within memory at large sizes.
//! Assertions built on these numbers must compare ratios across sizes,
//! never absolute times.

use crate::error::Result;
use crate::featurize::{
    featurize_dense, featurize_flatten, featurize_o_align, featurize_svd, AlignTemplates,
};
use crate::glnet::{GlNetConfig, GlNetParams};
use crate::learn::{MlpLayer, MlpParams};
use crate::lora::{LayerShape, LoraUpdate};
use crate::numerics::derive_seed;
use serde::Serialize;
use std::hint::black_box;
use std::time::Instant;

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub size: usize,
    pub method: String,
    pub preprocess_seconds: f64,
    pub forward_seconds: f64,
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("size,method,preprocess_seconds,forward_seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.9e},{:.9e}\n",
            r.size, r.method, r.preprocess_seconds, r.forward_seconds
        ));
    }
    out
}

/// Median seconds per call. Each sample loops the closure often enough
/// to exceed a couple of milliseconds so short operations are resolvable.
fn time_median(repeat: usize, mut f: impl FnMut()) -> f64 {
    f(); // warm-up
    let t0 = Instant::now();
    f();
    let once = t0.elapsed().as_secs_f64();
    let iters = ((2e-3 / once.max(1e-9)).ceil() as usize).clamp(1, 10_000);
    let mut samples: Vec<f64> = (0..repeat.max(1))
        .map(|_| {
            let t = Instant::now();
            for _ in 0..iters {
                f();
            }
            t.elapsed().as_secs_f64() / iters as f64
        })
        .collect();
    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite durations"));
    samples[samples.len() / 2]
}

fn linear_readout(dim: usize, seed: u64) -> MlpParams {
    let mlp = MlpParams::init(&[dim, 1], seed);
    MlpParams::from_layers(vec![MlpLayer {
        weight: mlp.layers()[0].weight.clone(),
        bias: vec![0.0],
    }])
    .expect("single layer always chains")
}

/// One square layer per size; five methods; medians over `repeat` runs.
pub fn run(sizes: &[usize], rank: usize, repeat: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for (si, &n) in sizes.iter().enumerate() {
        let x = LoraUpdate::random(&[(n, n)], rank, 1.0, derive_seed(seed, si as u64));
        let shape = LayerShape { n, m: n, r: rank };
        let templates = AlignTemplates::from_seed(&[shape], derive_seed(seed, 0x7E4D));

        // flatten
        let feat = featurize_flatten(&x);
        let head = linear_readout(feat.values.len(), derive_seed(seed, 1));
        rows.push(BenchRow {
            size: n,
            method: "flatten".into(),
            preprocess_seconds: time_median(repeat, || {
                black_box(featurize_flatten(black_box(&x)));
            }),
            forward_seconds: time_median(repeat, || {
                black_box(head.forward(black_box(&feat.values)).expect("dims match"));
            }),
        });

        // oalign
        let feat = featurize_o_align(&x, &templates)?;
        let head = linear_readout(feat.values.len(), derive_seed(seed, 2));
        rows.push(BenchRow {
            size: n,
            method: "oalign".into(),
            preprocess_seconds: time_median(repeat, || {
                black_box(featurize_o_align(black_box(&x), &templates).expect("shapes match"));
            }),
            forward_seconds: time_median(repeat, || {
                black_box(head.forward(black_box(&feat.values)).expect("dims match"));
            }),
        });

        // svd
        let feat = featurize_svd(&x, rank)?;
        let head = linear_readout(feat.values.len(), derive_seed(seed, 3));
        rows.push(BenchRow {
            size: n,
            method: "svd".into(),
            preprocess_seconds: time_median(repeat, || {
                black_box(featurize_svd(black_box(&x), rank).expect("tall factors"));
            }),
            forward_seconds: time_median(repeat, || {
                black_box(head.forward(black_box(&feat.values)).expect("dims match"));
            }),
        });

        // dense (no cap: the bench must reach sizes past the default)
        let feat = featurize_dense(&x, usize::MAX)?;
        let head = linear_readout(feat.values.len(), derive_seed(seed, 4));
        rows.push(BenchRow {
            size: n,
            method: "dense".into(),
            preprocess_seconds: time_median(repeat, || {
                black_box(featurize_dense(black_box(&x), usize::MAX).expect("uncapped"));
            }),
            forward_seconds: time_median(repeat, || {
                black_box(head.forward(black_box(&feat.values)).expect("dims match"));
            }),
        });

        // glnet: preprocessing is just reading the factors in
        let cfg = GlNetConfig {
            hidden_width: 32,
            head_hidden: vec![],
            ..GlNetConfig::default()
        };
        let params = GlNetParams::init(&cfg, &[(n, n)], 1, derive_seed(seed, 5));
        rows.push(BenchRow {
            size: n,
            method: "glnet".into(),
            preprocess_seconds: time_median(repeat, || {
                black_box(featurize_flatten(black_box(&x)));
            }),
            forward_seconds: time_median(repeat, || {
                black_box(crate::glnet::glnet_forward(&params, black_box(&x)).expect("shapes chain"));
            }),
        });
    }
    Ok(rows)
}

/// Ratio of a method's time at the largest size to its time at the
/// smallest, for scaling assertions.
pub fn scaling_ratio(rows: &[BenchRow], method: &str, preprocess: bool) -> Option<f64> {
    let mut points: Vec<(usize, f64)> = rows
        .iter()
        .filter(|r| r.method == method)
        .map(|r| (r.size, if preprocess { r.preprocess_seconds } else { r.forward_seconds }))
        .collect();
    if points.len() < 2 {
        return None;
    }
    points.sort_by_key(|&(s, _)| s);
    let (_, first) = points[0];
    let (_, last) = points[points.len() - 1];
    (first > 0.0).then(|| last / first)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_cover_all_methods() {
        let rows = run(&[16, 32], 2, 1, 7).unwrap();
        assert_eq!(rows.len(), 10);
        for r in &rows {
            assert!(r.preprocess_seconds > 0.0);
            assert!(r.forward_seconds > 0.0);
        }
        let csv = to_csv(&rows);
        assert!(csv.starts_with("size,method,"));
        assert_eq!(csv.lines().count(), 11);
    }

    #[test]
    fn scaling_ratio_reads_extremes() {
        let rows = vec![
            BenchRow { size: 16, method: "svd".into(), preprocess_seconds: 1.0, forward_seconds: 1.0 },
            BenchRow { size: 64, method: "svd".into(), preprocess_seconds: 3.0, forward_seconds: 2.0 },
        ];
        assert_eq!(scaling_ratio(&rows, "svd", true), Some(3.0));
        assert_eq!(scaling_ratio(&rows, "svd", false), Some(2.0));
        assert_eq!(scaling_ratio(&rows, "dense", true), None);
    }
}
