//! Liquid state machine RFI flagging for radio spectrograms.
//!
//! The pipeline treats interference detection as multivariate time-series
//! segmentation: spectrogram columns are spike-encoded, driven through a
//! frozen reservoir of second-order leaky integrate-and-fire neurons, and a
//! small trainable readout head maps the spiking state back to per-channel
//! flag scores. Only the readout is trained; the liquid never changes.
//!
//! Module tour:
//! - [`spectra`]: spectrogram/mask data model, synthetic data generation,
//!   divisive normalization, patch chunking, dataset files.
//! - [`encode`]: latency / rate / direct encoders and the matching decoders.
//! - [`reservoir`]: frozen liquid construction and simulation.
//! - [`readout`]: trainable heads (linear, ReLU, transformer decoder) and the
//!   reverse-mode tape that trains them.
//! - [`train`]: BCE loss, Adam, plateau scheduling, and the fit loop.
//! - [`metrics`]: imbalance-aware evaluation (accuracy, F1, AUROC, AUPRC).
//! - [`hpo`]: tree-structured Parzen estimator search over the liquid knobs.
//! - [`pipeline`]: model bundles, scoring, and evaluation glue.
//! - [`render`]: three-panel diagnostic figures.
//! - [`manifest`]: run manifests for byte-level reproducibility.

pub mod binio;
pub mod cache;
pub mod encode;
pub mod error;
pub mod hpo;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod reservoir;
pub mod readout;
pub mod spectra;
pub mod train;
pub mod util;

pub use error::{Error, Result};
