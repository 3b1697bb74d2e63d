use std::time::Instant;

use lsm_rfi::encode::{Encoding, ScoreMap};
use lsm_rfi::metrics;
use lsm_rfi::pipeline::{generate_dataset, reservoir_seed, score_patches, Decode};
use lsm_rfi::readout::Variant;
use lsm_rfi::reservoir::build_reservoir;
use lsm_rfi::train::{fit, TrainConfig};
use ndarray::Array2;

fn sweep_best(scores: &[ScoreMap], truth: &[Array2<bool>]) -> (f64, f64) {
    let mut best = (0.0, 0.0);
    for k in 1..40 {
        let thr = k as f64 / 40.0;
        let (_, f1, _) = metrics::threshold_metrics(scores, truth, thr).unwrap();
        if f1 > best.1 {
            best = (thr, f1);
        }
    }
    best
}

#[test]
fn probe_trained_f1() {
    let patches = generate_dataset(6, 512, 0.03, 42).unwrap();
    let (train, test): (Vec<_>, Vec<_>) =
        patches.into_iter().partition(|p| p.origin.source_id < 5);
    let truth: Vec<Array2<bool>> = test.iter().map(|p| p.mask.clone()).collect();

    // (label, variant, encoding, sparsity, pos_weight, lr)
    let configs = [
        ("rate    s=.190", Variant::Linear, Encoding::Rate, 0.190, Some(15.0), 3e-4),
        ("latency s=.298", Variant::Linear, Encoding::Latency, 0.298, Some(15.0), 3e-4),
        ("relu    s=.149", Variant::Relu, Encoding::Direct, 0.149, Some(15.0), 3e-4),
        ("transf  s=.230", Variant::Transformer, Encoding::Direct, 0.230, Some(15.0), 3e-4),
    ];
    for (label, variant, encoding, s, pw, lr) in configs {
        let started = Instant::now();
        let res = build_reservoir(512, 32, s, reservoir_seed(0), None).unwrap();
        let cfg = TrainConfig {
            variant,
            encoding,
            exposure: 4,
            epochs: 30,
            pos_weight: pw,
            lr,
            seed: 42,
            ..TrainConfig::default()
        };
        let result = fit(&res, &train, &cfg).unwrap();
        let scores =
            score_patches(&res, &result.head, &test, encoding, 4, Decode::Rate, None).unwrap();
        let ev = metrics::evaluate(&scores, &truth, 0.5).unwrap();
        let best = sweep_best(&scores, &truth);
        println!(
            "{label}: f1@0.5={:.3} acc={:.3} auroc={:.3} auprc={:.3} best_f1={:.3}@{:.2} ({}s)",
            ev.f1,
            ev.accuracy,
            ev.auroc.unwrap(),
            ev.auprc.unwrap(),
            best.1,
            best.0,
            started.elapsed().as_secs()
        );
    }
}
