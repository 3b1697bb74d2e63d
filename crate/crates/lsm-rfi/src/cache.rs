//! Disk cache of liquid spike rasters.
//!
//! The reservoir is frozen, so the raster of a patch depends only on the
//! reservoir weights, the encoding, the exposure and the patch bytes. That
//! makes the liquid pass cacheable: readout training runs many epochs (and
//! hyper-parameter search many trials) over the same rasters, and only the
//! first pass pays for the simulation.
//!
//! Keys are SHA-256 over (reservoir hash, encoding, exposure, dataset hash),
//! so a stale file can never be confused with a different configuration. A
//! corrupt or unreadable cache entry is recomputed and rewritten, never
//! trusted.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::binio::{ByteReader, ByteWriter};
use crate::encode::Encoding;
use crate::error::Result;
use crate::reservoir::{run, Reservoir, SpikeRaster};
use crate::spectra::{encode_dataset, Patch};
use crate::util;

const MAGIC: &[u8; 8] = b"LSMRAS1\0";
/// Fixed salt for the liquid's noise stream: rasters must be a pure function
/// of the cache key, so the per-patch noise seed cannot depend on run
/// configuration.
const NOISE_SALT: u64 = 0x4c49_5155_4944_5231;

/// Cache key for one (reservoir, encoding, exposure, dataset) combination.
pub fn raster_cache_key(
    reservoir_hash: &str,
    encoding: Encoding,
    exposure: usize,
    dataset_hash: &str,
) -> String {
    let text = format!("{reservoir_hash}\n{}\n{exposure}\n{dataset_hash}", encoding.name());
    util::sha256_hex(text.as_bytes())
}

/// The environment variable the CLI reads to locate the cache directory.
pub const CACHE_DIR_ENV: &str = "LSM_CACHE_DIR";

/// Spike rasters for every patch, in patch order. With a cache directory the
/// result is read from disk when present and written after computing
/// otherwise; either way the rasters are identical to an uncached run.
pub fn patch_rasters(
    reservoir: &Reservoir,
    patches: &[Patch],
    encoding: Encoding,
    exposure: usize,
    cache_dir: Option<&Path>,
) -> Result<Vec<SpikeRaster>> {
    let path = match cache_dir {
        Some(dir) => {
            let dataset_hash = util::sha256_hex(&encode_dataset(patches)?);
            let key =
                raster_cache_key(&reservoir.content_hash(), encoding, exposure, &dataset_hash);
            let path = dir.join(format!("{key}.rasters"));
            if let Some(rasters) = try_load(&path, patches.len()) {
                return Ok(rasters);
            }
            Some(path)
        }
        None => None,
    };

    let rasters = compute_rasters(reservoir, patches, encoding, exposure)?;

    if let Some(path) = path {
        // Best effort: a full disk must not fail the run, only the reuse.
        let _ = util::atomic_write(&path, &encode_rasters(&rasters));
    }
    Ok(rasters)
}

fn compute_rasters(
    reservoir: &Reservoir,
    patches: &[Patch],
    encoding: Encoding,
    exposure: usize,
) -> Result<Vec<SpikeRaster>> {
    patches
        .par_iter()
        .enumerate()
        .map(|(idx, patch)| {
            let drive = encoding.encode(patch, exposure)?;
            let mut rng = util::rng_from(util::mix_seed(NOISE_SALT, idx as u64));
            run(reservoir, &drive, None, &mut rng)
        })
        .collect()
}

fn encode_rasters(rasters: &[SpikeRaster]) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC).u32(rasters.len() as u32);
    for raster in rasters {
        let bytes = raster.to_bytes();
        w.u64(bytes.len() as u64).bytes(&bytes);
    }
    w.into_bytes()
}

fn decode_rasters(bytes: &[u8]) -> Result<Vec<SpikeRaster>> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(MAGIC)?;
    let count = r.u32()? as usize;
    let mut rasters = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u64()? as usize;
        rasters.push(SpikeRaster::from_bytes(r.take(len)?)?);
    }
    r.finish()?;
    Ok(rasters)
}

/// A hit must parse and hold one raster per patch; anything else is treated
/// as a miss.
fn try_load(path: &Path, expected: usize) -> Option<Vec<SpikeRaster>> {
    let bytes = std::fs::read(path).ok()?;
    let rasters = decode_rasters(&bytes).ok()?;
    (rasters.len() == expected).then_some(rasters)
}

/// Resolve the cache directory the way the CLI does: an explicit flag wins,
/// then [`CACHE_DIR_ENV`], then no caching.
pub fn resolve_cache_dir(flag: Option<PathBuf>) -> Option<PathBuf> {
    flag.or_else(|| std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from))
}
