//! Train on one set of spectrograms, evaluate on unseen ones.
//!
//! Per-pixel RFI detection is heavily imbalanced (a few percent positives),
//! so accuracy alone is misleading; this prints AUROC, AUPRC, F1, and the
//! confusion counts at the decision threshold, plus a small threshold sweep.
//!
//! Run with: cargo run --release -p lsm-rfi --example evaluate_model

use lsm_rfi::encode::Encoding;
use lsm_rfi::error::Result;
use lsm_rfi::metrics::{evaluate, threshold_metrics};
use lsm_rfi::pipeline::{generate_dataset, reservoir_seed, score_patches, Decode};
use lsm_rfi::readout::Variant;
use lsm_rfi::reservoir::build_reservoir;
use lsm_rfi::spectra::PATCH_SIZE;
use lsm_rfi::train::{fit, TrainConfig};
use ndarray::Array2;

fn main() -> Result<()> {
    // Six spectrograms; sources 0–4 train, source 5 is held out entirely.
    let patches = generate_dataset(6, 256, 0.04, 17)?;
    let (train_set, test_set): (Vec<_>, Vec<_>) =
        patches.into_iter().partition(|p| p.origin.source_id < 5);
    println!("{} training patches, {} held-out patches", train_set.len(), test_set.len());

    let reservoir = build_reservoir(256, PATCH_SIZE, 0.074, reservoir_seed(0), None)?;
    let config = TrainConfig {
        variant: Variant::Linear,
        encoding: Encoding::Direct,
        exposure: 4,
        epochs: 12,
        pos_weight: Some(15.0),
        lr: 3e-4,
        seed: 42,
        ..TrainConfig::default()
    };
    let result = fit(&reservoir, &train_set, &config)?;
    println!(
        "trained {} epochs, best val loss {:.4}",
        result.reports.len(),
        result.summary.val_loss_best.unwrap_or(f64::NAN),
    );

    let scores = score_patches(
        &reservoir, &result.head, &test_set, config.encoding, config.exposure, Decode::Rate, None,
    )?;
    let truth: Vec<Array2<bool>> = test_set.iter().map(|p| p.mask.clone()).collect();
    let ev = evaluate(&scores, &truth, 0.5)?;
    println!("\nheld-out metrics at threshold 0.5:");
    println!("  accuracy {:.4}   (base rate of clean pixels is already high!)", ev.accuracy);
    println!("  AUROC    {:.4}", ev.auroc.unwrap_or(f64::NAN));
    println!("  AUPRC    {:.4}", ev.auprc.unwrap_or(f64::NAN));
    println!("  F1       {:.4}", ev.f1);
    let c = ev.confusion;
    println!("  confusion: tp={} fp={} tn={} fn={}", c.tp, c.fp, c.tn, c.fn_);

    println!("\nthreshold sweep (precision / recall / F1):");
    for thr in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let (_, f1, confusion) = threshold_metrics(&scores, &truth, thr)?;
        println!(
            "  thr {thr:.1}: P {:.3}  R {:.3}  F1 {f1:.3}",
            confusion.precision(),
            confusion.recall(),
        );
    }
    Ok(())
}
