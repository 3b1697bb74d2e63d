//! Spectrogram data model: synthetic generation, divisive normalization,
//! chunking into patches, and dataset persistence.
//!
//! A [`Spectrogram`] is a time × frequency magnitude array; its paired
//! [`RFIMask`] marks which cells contain interference. Full spectrograms are
//! normalized to [0,1], then split into square [`Patch`]es which are the unit
//! every later stage (encoding, the liquid, the readout) operates on.

mod io;
mod synth;

pub use io::{encode_dataset, decode_dataset, load_dataset, save_dataset};
pub use synth::{generate_synthetic, BackgroundConfig, RfiMix, SynthConfig};

use ndarray::Array2;

use crate::error::{Error, Result};

/// Default patch edge length, matching the 32×32 chunking the rest of the
/// pipeline is sized for.
pub const PATCH_SIZE: usize = 32;

/// A single-baseline magnitude spectrogram, rows = time steps, columns =
/// frequency channels. Entries are finite and ≥ 0 at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub data: Array2<f32>,
}

impl Spectrogram {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        let (t, f) = data.dim();
        if t == 0 || f == 0 {
            return Err(Error::Data(format!("empty spectrogram shape {t}×{f}")));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Data(format!("non-finite or negative magnitude {bad}")));
        }
        Ok(Spectrogram { data })
    }

    pub fn time_steps(&self) -> usize {
        self.data.nrows()
    }

    pub fn freq_channels(&self) -> usize {
        self.data.ncols()
    }
}

/// Ground-truth interference flags, same shape as the paired spectrogram.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RFIMask {
    pub flags: Array2<bool>,
}

impl RFIMask {
    /// Fraction of flagged cells.
    pub fn density(&self) -> f64 {
        let total = self.flags.len();
        if total == 0 {
            return 0.0;
        }
        self.flags.iter().filter(|&&b| b).count() as f64 / total as f64
    }
}

/// Where a patch came from in its source spectrogram.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchOrigin {
    pub time_offset: u16,
    pub freq_offset: u16,
    pub source_id: u32,
}

/// A square tile of a normalized spectrogram plus its mask tile. Data is
/// expected in [0,1] (produced by [`normalize_divisive`] upstream); the
/// encoders reject anything outside that range.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub data: Array2<f32>,
    pub mask: Array2<bool>,
    pub origin: PatchOrigin,
}

impl Patch {
    pub fn size(&self) -> usize {
        self.data.nrows()
    }
}

/// Local-mean divisive normalization followed by per-spectrogram min-max
/// rescale to [0,1].
///
/// `out[t,f] = s[t,f] / (k + mean of s over the window×window neighborhood
/// centered on (t,f))`, neighborhood indices clamped to the array edge. A
/// constant field (max == min after division) rescales to all zeros.
pub fn normalize_divisive(s: &Spectrogram, window: usize, k: f64) -> Result<Spectrogram> {
    if window % 2 == 0 || window == 0 {
        return Err(Error::Config(format!("window must be odd and ≥ 1, got {window}")));
    }
    if !(k > 0.0) || !k.is_finite() {
        return Err(Error::Config(format!("k must be finite and > 0, got {k}")));
    }
    if s.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in spectrogram".into()));
    }
    let local = box_mean_clamped(&s.data, window);
    let (t, f) = s.data.dim();
    let mut out = Array2::<f32>::zeros((t, f));
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for ti in 0..t {
        for fi in 0..f {
            let v = s.data[[ti, fi]] as f64 / (k + local[[ti, fi]]);
            lo = lo.min(v);
            hi = hi.max(v);
            out[[ti, fi]] = v as f32;
        }
    }
    let span = hi - lo;
    if span > 0.0 {
        out.mapv_inplace(|v| (((v as f64 - lo) / span) as f32).clamp(0.0, 1.0));
    } else {
        out.fill(0.0);
    }
    Spectrogram::new(out)
}

/// [`normalize_divisive`] with the library defaults: window 9 and
/// k = 1e-2 × global mean (falling back to k = 1 for an all-zero field,
/// whose output is all zeros either way).
pub fn normalize_default(s: &Spectrogram) -> Result<Spectrogram> {
    let mean = s.data.iter().map(|&v| v as f64).sum::<f64>() / s.data.len() as f64;
    let k = if mean > 0.0 { 1e-2 * mean } else { 1.0 };
    normalize_divisive(s, 9, k)
}

/// Mean over the window×window neighborhood of every cell, edges handled by
/// clamping indices into range (edge rows/columns count multiple times).
/// Separable: one horizontal pass, one vertical pass, both via prefix sums.
fn box_mean_clamped(data: &Array2<f32>, window: usize) -> Array2<f64> {
    let (t, f) = data.dim();
    let h = (window / 2) as isize;
    let horiz = directional_mean(data.mapv(|v| v as f64), f, h, Axis2::Cols);
    directional_mean(horiz, t, h, Axis2::Rows)
}

enum Axis2 {
    Rows,
    Cols,
}

fn directional_mean(data: Array2<f64>, len: usize, h: isize, axis: Axis2) -> Array2<f64> {
    let (t, f) = data.dim();
    let mut out = Array2::<f64>::zeros((t, f));
    let lanes = match axis {
        Axis2::Cols => t,
        Axis2::Rows => f,
    };
    let w = (2 * h + 1) as f64;
    let n = len as isize;
    for lane in 0..lanes {
        let at = |i: isize| -> f64 {
            let i = i.clamp(0, n - 1) as usize;
            match axis {
                Axis2::Cols => data[[lane, i]],
                Axis2::Rows => data[[i, lane]],
            }
        };
        // prefix[i] = sum of the first i in-range elements
        let mut prefix = Vec::with_capacity(len + 1);
        prefix.push(0.0);
        for i in 0..n {
            prefix.push(prefix[i as usize] + at(i));
        }
        for i in 0..n {
            let lo = i - h;
            let hi = i + h;
            let below = (-lo).max(0) as f64; // samples clamped to index 0
            let above = (hi - (n - 1)).max(0) as f64; // clamped to index n-1
            let a = lo.clamp(0, n - 1) as usize;
            let b = hi.clamp(0, n - 1) as usize;
            let sum = prefix[b + 1] - prefix[a] + below * at(0) + above * at(n - 1);
            let m = sum / w;
            match axis {
                Axis2::Cols => out[[lane, i as usize]] = m,
                Axis2::Rows => out[[i as usize, lane]] = m,
            }
        }
    }
    out
}

/// Split a spectrogram and its mask into non-overlapping `patch`×`patch`
/// tiles in row-major order. Shapes that don't divide evenly are padded with
/// zero data and false mask. `source_id` is recorded in every tile's origin.
pub fn chunk(s: &Spectrogram, m: &RFIMask, patch: usize, source_id: u32) -> Result<Vec<Patch>> {
    if patch == 0 {
        return Err(Error::Config("patch size must be ≥ 1".into()));
    }
    if s.data.dim() != m.flags.dim() {
        return Err(Error::Data(format!(
            "spectrogram shape {:?} != mask shape {:?}",
            s.data.dim(),
            m.flags.dim()
        )));
    }
    let (t, f) = s.data.dim();
    let t_tiles = t.div_ceil(patch);
    let f_tiles = f.div_ceil(patch);
    if (t_tiles - 1) * patch > u16::MAX as usize || (f_tiles - 1) * patch > u16::MAX as usize {
        return Err(Error::Data(format!("offsets for shape {t}×{f} overflow u16")));
    }
    let mut out = Vec::with_capacity(t_tiles * f_tiles);
    for tt in 0..t_tiles {
        for ft in 0..f_tiles {
            let t0 = tt * patch;
            let f0 = ft * patch;
            let mut data = Array2::<f32>::zeros((patch, patch));
            let mut mask = Array2::<bool>::from_elem((patch, patch), false);
            for dt in 0..patch.min(t - t0) {
                for df in 0..patch.min(f - f0) {
                    data[[dt, df]] = s.data[[t0 + dt, f0 + df]];
                    mask[[dt, df]] = m.flags[[t0 + dt, f0 + df]];
                }
            }
            out.push(Patch {
                data,
                mask,
                origin: PatchOrigin {
                    time_offset: t0 as u16,
                    freq_offset: f0 as u16,
                    source_id,
                },
            });
        }
    }
    Ok(out)
}

/// Inverse of [`chunk`]: stitch patches back into full arrays of the given
/// shape, dropping any padding that falls outside it. Useful for turning
/// per-patch predictions back into a full-size map.
pub fn assemble(patches: &[Patch], time_steps: usize, freq_channels: usize) -> (Array2<f32>, Array2<bool>) {
    let mut data = Array2::<f32>::zeros((time_steps, freq_channels));
    let mut mask = Array2::<bool>::from_elem((time_steps, freq_channels), false);
    for p in patches {
        let t0 = p.origin.time_offset as usize;
        let f0 = p.origin.freq_offset as usize;
        let n = p.size();
        for dt in 0..n.min(time_steps.saturating_sub(t0)) {
            for df in 0..n.min(freq_channels.saturating_sub(f0)) {
                data[[t0 + dt, f0 + df]] = p.data[[dt, df]];
                mask[[t0 + dt, f0 + df]] = p.mask[[dt, df]];
            }
        }
    }
    (data, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use proptest::prelude::*;

    fn spec(values: Array2<f32>) -> Spectrogram {
        Spectrogram::new(values).unwrap()
    }

    #[test]
    fn constant_field_normalizes_to_zero() {
        let s = spec(Array2::from_elem((5, 7), 3.25));
        let n = normalize_divisive(&s, 3, 1.0).unwrap();
        assert!(n.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_hand_case() {
        // value 3, window 1, k 1: 3/(1+3) = 0.75 before rescale; a single
        // value has zero span, so the min-max rescale sends it to 0.
        let s = spec(arr2(&[[3.0_f32]]));
        let n = normalize_divisive(&s, 1, 1.0).unwrap();
        assert_eq!(n.data[[0, 0]], 0.0);
    }

    #[test]
    fn two_pixel_hand_case() {
        // [0, 9], window 1, k 1 → pre-rescale [0, 0.9] → post-rescale [0, 1].
        let s = spec(arr2(&[[0.0_f32], [9.0]]));
        let n = normalize_divisive(&s, 1, 1.0).unwrap();
        assert_eq!(n.data[[0, 0]], 0.0);
        assert_eq!(n.data[[1, 0]], 1.0);
    }

    #[test]
    fn normalize_rejects_bad_window_and_k() {
        let s = spec(Array2::ones((4, 4)));
        assert!(matches!(normalize_divisive(&s, 2, 1.0), Err(Error::Config(_))));
        assert!(matches!(normalize_divisive(&s, 0, 1.0), Err(Error::Config(_))));
        assert!(matches!(normalize_divisive(&s, 3, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn normalize_rejects_non_finite() {
        let mut s = spec(Array2::ones((2, 2)));
        s.data[[0, 1]] = f32::NAN;
        assert!(matches!(normalize_divisive(&s, 1, 1.0), Err(Error::Data(_))));
    }

    #[test]
    fn box_mean_clamps_edges() {
        // Row [1, 2, 3], window 3: at index 0 the neighborhood is
        // [clamp(-1)=1, 1, 2] → 4/3; at 1 it is exactly [1,2,3] → 2; at 2 it
        // is [2, 3, clamp(3)=3] → 8/3.
        let d = arr2(&[[1.0_f32, 2.0, 3.0]]);
        let m = box_mean_clamped(&d, 3);
        assert!((m[[0, 0]] - 4.0 / 3.0).abs() < 1e-12);
        assert!((m[[0, 1]] - 2.0).abs() < 1e-12);
        assert!((m[[0, 2]] - 8.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn chunk_512_gives_256_patches() {
        let s = spec(Array2::zeros((512, 512)));
        let m = RFIMask { flags: Array2::from_elem((512, 512), false) };
        let patches = chunk(&s, &m, 32, 0).unwrap();
        assert_eq!(patches.len(), 256);
    }

    #[test]
    fn chunk_identity_on_exact_fit() {
        let mut data = Array2::zeros((32, 32));
        for (i, v) in data.iter_mut().enumerate() {
            *v = (i % 97) as f32 / 97.0;
        }
        let mut flags = Array2::from_elem((32, 32), false);
        flags[[3, 9]] = true;
        let s = spec(data.clone());
        let m = RFIMask { flags: flags.clone() };
        let patches = chunk(&s, &m, 32, 7).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].data, data);
        assert_eq!(patches[0].mask, flags);
        assert_eq!(patches[0].origin, PatchOrigin { time_offset: 0, freq_offset: 0, source_id: 7 });
    }

    #[test]
    fn chunk_pads_ragged_rows() {
        let s = spec(Array2::ones((33, 32)));
        let m = RFIMask { flags: Array2::from_elem((33, 32), true) };
        let patches = chunk(&s, &m, 32, 0).unwrap();
        assert_eq!(patches.len(), 2);
        let second = &patches[1];
        assert_eq!(second.origin.time_offset, 32);
        // Only the first row of the second tile is real; 31 rows are padding.
        for df in 0..32 {
            assert_eq!(second.data[[0, df]], 1.0);
            assert!(second.mask[[0, df]]);
        }
        for dt in 1..32 {
            for df in 0..32 {
                assert_eq!(second.data[[dt, df]], 0.0);
                assert!(!second.mask[[dt, df]]);
            }
        }
    }

    #[test]
    fn chunk_rejects_shape_mismatch() {
        let s = spec(Array2::ones((8, 8)));
        let m = RFIMask { flags: Array2::from_elem((8, 9), false) };
        assert!(matches!(chunk(&s, &m, 4, 0), Err(Error::Data(_))));
    }

    proptest! {
        #[test]
        fn chunk_then_assemble_is_lossless(
            t in 1usize..70,
            f in 1usize..70,
            patch in 1usize..20,
            seed in 0u64..1000,
        ) {
            let mut rng = crate::util::rng_from(seed);
            use rand::Rng;
            let data = Array2::from_shape_fn((t, f), |_| rng.random_range(0.0f32..1.0));
            let flags = Array2::from_shape_fn((t, f), |_| rng.random_bool(0.3));
            let s = spec(data.clone());
            let m = RFIMask { flags: flags.clone() };
            let patches = chunk(&s, &m, patch, 1).unwrap();
            prop_assert_eq!(patches.len(), t.div_ceil(patch) * f.div_ceil(patch));
            let (d2, m2) = assemble(&patches, t, f);
            prop_assert_eq!(d2, data);
            prop_assert_eq!(m2, flags);
        }

        #[test]
        fn normalize_output_in_unit_interval(
            t in 1usize..20,
            f in 1usize..20,
            window in (0usize..4).prop_map(|w| 2 * w + 1),
            seed in 0u64..1000,
        ) {
            let mut rng = crate::util::rng_from(seed);
            use rand::Rng;
            let data = Array2::from_shape_fn((t, f), |_| rng.random_range(0.0f32..50.0));
            let s = spec(data);
            let n = normalize_divisive(&s, window, 0.5).unwrap();
            prop_assert!(n.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
