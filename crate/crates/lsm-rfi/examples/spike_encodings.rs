//! Compare the three spike encodings on one ramp of pixel values.
//!
//! Latency codes a value as *when* a single spike fires inside the exposure
//! window (stronger ⇒ earlier), rate as *how many* spikes fire, and direct
//! skips spikes entirely, driving the liquid with the value as a constant
//! current.
//!
//! Run with: cargo run --release -p lsm-rfi --example spike_encodings

use lsm_rfi::encode::{decode_latency, encode_direct, encode_latency, encode_rate};
use lsm_rfi::error::Result;
use lsm_rfi::spectra::{Patch, PatchOrigin};
use ndarray::Array2;

fn main() -> Result<()> {
    let exposure = 8;
    let values = [0.0f32, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0];
    // One time step, one channel per value: the simplest possible patch.
    let data = Array2::from_shape_vec((1, values.len()), values.to_vec()).unwrap();
    let patch = Patch {
        mask: Array2::from_elem(data.dim(), false),
        data,
        origin: PatchOrigin { time_offset: 0, freq_offset: 0, source_id: 0 },
    };

    let latency = encode_latency(&patch, exposure)?;
    let rate = encode_rate(&patch, exposure)?;
    let direct = encode_direct(&patch, exposure)?;

    println!("exposure window: {exposure} steps; one row per input value\n");
    println!("value   latency window   rate window     direct current");
    for (c, &v) in values.iter().enumerate() {
        let window = |spikes: &ndarray::Array3<u8>| -> String {
            (0..exposure).map(|j| if spikes[[0, j, c]] == 1 { '|' } else { '.' }).collect()
        };
        println!(
            "{v:5.2}   {}       {}      {:.2} × {exposure}",
            window(&latency.spikes),
            window(&rate.spikes),
            direct.currents[[0, 0, c]],
        );
    }

    let decoded = decode_latency(&latency);
    println!("\nlatency round-trip (quantized to {} spike slots):", exposure - 1);
    for (c, &v) in values.iter().enumerate() {
        println!("  {v:.2} → {:.3}", decoded.scores[[0, c]]);
    }
    Ok(())
}
