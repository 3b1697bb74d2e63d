//! Synthesize a labelled spectrogram corpus and look inside it.
//!
//! The generator layers four RFI morphologies (persistent narrowband
//! carriers, narrowband bursts, wideband transients, periodic interference)
//! over a correlated noise background, then divisively normalizes and cuts
//! everything into 32×32 training patches.
//!
//! Run with: cargo run --release -p lsm-rfi --example generate_dataset

use lsm_rfi::error::Result;
use lsm_rfi::spectra::{
    chunk, generate_synthetic, load_dataset, normalize_default, save_dataset, SynthConfig,
    PATCH_SIZE,
};

fn main() -> Result<()> {
    let config = SynthConfig {
        n_spectrograms: 4,
        size: 256,
        target_contamination: 0.05,
        seed: 7,
        ..SynthConfig::default()
    };
    println!(
        "synthesizing {} spectrograms, {}×{} cells, target contamination {:.0}%",
        config.n_spectrograms,
        config.size,
        config.size,
        100.0 * config.target_contamination
    );

    let mut patches = Vec::new();
    for (id, (spectrogram, mask)) in generate_synthetic(&config)?.into_iter().enumerate() {
        let normalized = normalize_default(&spectrogram)?;
        println!(
            "  spectrogram {id}: flagged fraction {:.4}, raw magnitude range [{:.2}, {:.2}]",
            mask.density(),
            spectrogram.data.iter().cloned().fold(f32::INFINITY, f32::min),
            spectrogram.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max),
        );
        patches.extend(chunk(&normalized, &mask, PATCH_SIZE, id as u32)?);
    }

    let flagged: usize = patches.iter().map(|p| p.mask.iter().filter(|&&b| b).count()).sum();
    let cells: usize = patches.iter().map(|p| p.mask.len()).sum();
    println!(
        "{} patches of {PATCH_SIZE}×{PATCH_SIZE}, overall flagged fraction {:.4}",
        patches.len(),
        flagged as f64 / cells as f64
    );

    let out = std::env::temp_dir().join("lsm-rfi-examples").join("dataset.bin");
    std::fs::create_dir_all(out.parent().unwrap()).map_err(|e| lsm_rfi::error::Error::io(&out, e))?;
    save_dataset(&patches, &out)?;
    let back = load_dataset(&out)?;
    assert_eq!(back.len(), patches.len());
    println!("saved and re-read {} patches at {}", back.len(), out.display());
    Ok(())
}
