// Scratch calibration for the training-based acceptance criteria.
use lol::featurize::{FeatureMethod, FeaturizerConfig};
use lol::glnet::{GlNetConfig, Nonlinearity};
use lol::learn::{evaluate, train, Loss, ModelSpec, TrainConfig};
use lol::lora::DENSE_ENTRY_CAP;
use lol::synth::{generate, split_dataset, GaugePolicy, SynthTaskSpec, Teacher};
use std::time::Instant;

fn feat_spec(method: FeatureMethod, hidden: Vec<usize>) -> ModelSpec {
    ModelSpec::FeatMlp { feat: FeaturizerConfig::new(method), hidden, standardize: true }
}

fn hidden_from_env() -> Vec<usize> {
    std::env::var("HIDDEN")
        .unwrap_or_else(|_| "256,128".into())
        .split(',')
        .map(|t| t.parse().unwrap())
        .collect()
}

fn batch_from_env() -> usize {
    std::env::var("BATCH").ok().and_then(|s| s.parse().ok()).unwrap_or(32)
}

fn glnet_spec(width: usize) -> ModelSpec {
    ModelSpec::GlNet(GlNetConfig {
        hidden_width: width,
        equivariant_layers: 1,
        nonlinearity: Nonlinearity::None,
        head_hidden: vec![256, 128],
        product_cap: DENSE_ENTRY_CAP,
    })
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "c8".into());
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(30);
    let lr: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    match which.as_str() {
        "c8" => criterion8(epochs, lr),
        "c9" => criterion9(epochs, lr),
        "c10" => criterion10(epochs, lr),
        other => eprintln!("unknown experiment {other}"),
    }
}

fn envf(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn criterion8(epochs: usize, lr: f64) {
    let mut spec =
        SynthTaskSpec::new(vec![(16, 16), (16, 16)], 4, 2000, Teacher::FrobeniusOfProduct);
    spec.gauge = GaugePolicy::CanonicalTrainScrambledTest;
    spec.seed = 0xC8;
    spec.scale_jitter = envf("JITTER", 0.4);
    let t0 = Instant::now();
    let ds = generate(&spec).unwrap();
    let splits = split_dataset(&ds);
    eprintln!("gen {:?}", t0.elapsed());

    let cfg = TrainConfig {
        epochs,
        batch_size: batch_from_env(),
        learning_rate: lr,
        weight_decay: envf("WD", 0.0),
        seed: 7,
        loss: Loss::Mse,
    };
    for (name, mspec) in [
        ("glnet", glnet_spec(16)),
        ("dense", feat_spec(FeatureMethod::Dense, hidden_from_env())),
        ("flatten", feat_spec(FeatureMethod::Flatten, hidden_from_env())),
    ] {
        let t = Instant::now();
        let out = train(&mspec, &splits.train, None, &cfg).unwrap();
        let test = evaluate(&out.predictor, &splits.test).unwrap();
        let tr = evaluate(&out.predictor, &splits.train).unwrap();
        eprintln!(
            "{name}: test r2={:.4} mse={:.4e} | train r2={:.4} | {:?}",
            test.r2, test.mse, tr.r2, t.elapsed()
        );
    }
}

fn criterion9(epochs: usize, lr: f64) {
    let mut spec = SynthTaskSpec::new(vec![(16, 16)], 4, 2000, Teacher::PlantedMultilabel);
    spec.seed = 0xC9;
    spec.probe_count = 4;
    let ds = generate(&spec).unwrap();
    let splits = split_dataset(&ds);

    let cfg = TrainConfig {
        epochs,
        batch_size: 32,
        learning_rate: lr,
        weight_decay: 0.0,
        seed: 7,
        loss: Loss::BceLogits,
    };
    for (name, mspec) in [
        ("glnet", glnet_spec(16)),
        ("svd", feat_spec(FeatureMethod::Svd, vec![256, 128])),
    ] {
        let t = Instant::now();
        let out = train(&mspec, &splits.train, None, &cfg).unwrap();
        let test = evaluate(&out.predictor, &splits.test).unwrap();
        let tr = evaluate(&out.predictor, &splits.train).unwrap();
        eprintln!(
            "{name}: test acc={:?} | train acc={:?} | {:?}",
            test.accuracy, tr.accuracy, t.elapsed()
        );
    }
}

fn criterion10(epochs: usize, lr: f64) {
    let mut base =
        SynthTaskSpec::new(vec![(64, 64), (64, 64)], 4, 2000, Teacher::FrobeniusOfProduct);
    base.seed = 0xCA;
    base.scale_jitter = 0.4;
    let ranks = [4usize, 1, 2, 8, 16];
    let t0 = Instant::now();
    let sweep = lol::synth::generate_rank_sweep(&base, &ranks).unwrap();
    eprintln!("sweep gen {:?}", t0.elapsed());
    let base_splits = split_dataset(&sweep[0]);

    let cfg = TrainConfig {
        epochs,
        batch_size: 32,
        learning_rate: lr,
        weight_decay: 0.0,
        seed: 7,
        loss: Loss::Mse,
    };
    for (name, mspec) in [
        ("glnet", glnet_spec(32)),
        ("dense", feat_spec(FeatureMethod::Dense, vec![256, 128])),
    ] {
        let t = Instant::now();
        let out = train(&mspec, &base_splits.train, None, &cfg).unwrap();
        eprint!("{name}:");
        for (i, &r) in ranks.iter().enumerate() {
            let test = split_dataset(&sweep[i]).test;
            let m = evaluate(&out.predictor, &test).unwrap();
            eprint!(" r{r}={:.4}", m.r2);
        }
        eprintln!(" | {:?}", t.elapsed());
    }
}
