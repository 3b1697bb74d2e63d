//! Dataset file format.
//!
//! Little-endian, magic `LSMDS1\0`:
//! - u32 patch_count
//! - u16 patch_size
//! - per patch: u32 source_id, u16 time_offset, u16 freq_offset,
//!   patch_size² f32 data values row-major, ceil(patch_size²/8) bytes of
//!   bit-packed mask row-major (bit j of each byte = cell 8·byte+j).

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::spectra::{Patch, PatchOrigin};
use crate::util::atomic_write;

const MAGIC: &[u8] = b"LSMDS1\0";

pub fn save_dataset(patches: &[Patch], path: &Path) -> Result<()> {
    atomic_write(path, &encode_dataset(patches)?)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Patch>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

pub fn encode_dataset(patches: &[Patch]) -> Result<Vec<u8>> {
    let size = patches.first().map_or(0, |p| p.size());
    if size > u16::MAX as usize {
        return Err(Error::Data(format!("patch size {size} overflows u16")));
    }
    if patches.len() > u32::MAX as usize {
        return Err(Error::Data("too many patches for u32 count".into()));
    }
    let mut w = ByteWriter::new();
    w.bytes(MAGIC).u32(patches.len() as u32).u16(size as u16);
    for p in patches {
        if p.size() != size || p.data.dim() != (size, size) || p.mask.dim() != (size, size) {
            return Err(Error::Data(format!(
                "patch shape {:?}/{:?} differs from dataset patch size {size}",
                p.data.dim(),
                p.mask.dim()
            )));
        }
        w.u32(p.origin.source_id).u16(p.origin.time_offset).u16(p.origin.freq_offset);
        for &v in p.data.iter() {
            w.f32(v);
        }
        w.bytes(&pack_bits(&p.mask));
    }
    Ok(w.into_bytes())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Patch>> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(MAGIC)?;
    let count = r.u32()? as usize;
    let size = r.u16()? as usize;
    if count > 0 && size == 0 {
        return Err(Error::format(r.offset() - 2, "patch size 0 with nonzero count"));
    }
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let source_id = r.u32()?;
        let time_offset = r.u16()?;
        let freq_offset = r.u16()?;
        let data = r.f32_vec(size * size)?;
        let mask_at = r.offset();
        let packed = r.take((size * size).div_ceil(8))?;
        let data = Array2::from_shape_vec((size, size), data).expect("shape matches length");
        let mask = unpack_bits(packed, size, mask_at)?;
        out.push(Patch {
            data,
            mask,
            origin: PatchOrigin { time_offset, freq_offset, source_id },
        });
    }
    r.finish()?;
    Ok(out)
}

fn pack_bits(mask: &Array2<bool>) -> Vec<u8> {
    let n = mask.len();
    let mut out = vec![0u8; n.div_ceil(8)];
    for (i, &b) in mask.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(packed: &[u8], size: usize, offset: u64) -> Result<Array2<bool>> {
    let n = size * size;
    // Padding bits past the last cell must be zero, so that the encoding of
    // a dataset is canonical.
    for i in n..packed.len() * 8 {
        if packed[i / 8] >> (i % 8) & 1 == 1 {
            return Err(Error::format(offset + (i / 8) as u64, "nonzero padding bit in mask"));
        }
    }
    Ok(Array2::from_shape_fn((size, size), |(t, f)| {
        let i = t * size + f;
        packed[i / 8] >> (i % 8) & 1 == 1
    }))
}
