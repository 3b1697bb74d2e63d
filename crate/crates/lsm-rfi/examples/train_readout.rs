//! Train a readout head on a frozen liquid, end to end.
//!
//! Only the readout learns — the run prints the reservoir's content hash
//! before and after to prove it. Training minimizes pixel-wise binary
//! cross-entropy with the positive class up-weighted (RFI is rare), using
//! Adam plus a reduce-on-plateau schedule.
//!
//! Run with: cargo run --release -p lsm-rfi --example train_readout

use lsm_rfi::encode::Encoding;
use lsm_rfi::error::Result;
use lsm_rfi::pipeline::{generate_dataset, reservoir_seed};
use lsm_rfi::readout::Variant;
use lsm_rfi::reservoir::build_reservoir;
use lsm_rfi::train::{fit, TrainConfig};
use lsm_rfi::spectra::PATCH_SIZE;

fn main() -> Result<()> {
    let patches = generate_dataset(4, 128, 0.05, 21)?;
    println!("dataset: {} patches from 4 spectrograms of 128×128", patches.len());

    let reservoir = build_reservoir(128, PATCH_SIZE, 0.1, reservoir_seed(0), None)?;
    let hash_before = reservoir.content_hash();

    let config = TrainConfig {
        variant: Variant::Linear,
        encoding: Encoding::Direct,
        exposure: 4,
        epochs: 8,
        pos_weight: Some(15.0),
        lr: 3e-4,
        seed: 42,
        ..TrainConfig::default()
    };
    println!(
        "training a {} readout on {} encoding, exposure {}, {} epochs\n",
        config.variant, config.encoding, config.exposure, config.epochs,
    );
    let result = fit(&reservoir, &patches, &config)?;
    for r in &result.reports {
        println!(
            "  epoch {:2}  train loss {:.4}  val loss {:.4}  lr {:.1e}  ({:.1}s)",
            r.epoch, r.train_loss, r.val_loss, r.lr, r.seconds,
        );
    }
    let s = &result.summary;
    println!(
        "\nbest val loss {:.4} over {} train / {} val patches",
        s.val_loss_best.unwrap_or(f64::NAN),
        s.n_train,
        s.n_val,
    );

    assert_eq!(reservoir.content_hash(), hash_before);
    println!("liquid hash unchanged through training: {}…", &hash_before[..16]);
    Ok(())
}
