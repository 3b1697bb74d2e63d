//! Trainable readout heads that map reservoir spike vectors to per-pixel
//! logits.
//!
//! Three variants share one contract: given the liquid state at a time step
//! they emit one logit per frequency channel of the current spectrogram
//! column. [`forward_sequence_f64`] evaluates a whole patch at once and is
//! exactly consistent with the per-step entry points ([`forward_linear`],
//! [`forward_relu`], [`forward_transformer`]) — the transformer uses a causal
//! attention mask so step `t` never sees later steps.
//!
//! Heads serialize to a named-tensor container (magic `LSMHEAD1`) so a file
//! round-trip is bit-exact.

pub mod tape;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::reservoir::SpikeRaster;
use crate::spectra::PATCH_SIZE;
use crate::util;
use tape::{Id, Scalar, Tape};

/// Logits per step: one per frequency channel of a patch column.
pub const OUT_DIM: usize = PATCH_SIZE;
/// Hidden width of the two-layer ReLU head and of the transformer's
/// position-wise feed-forward block.
pub const DEFAULT_HIDDEN: usize = 256;
/// Additive pre-softmax mask value for disallowed attention slots.
const MASK_NEG: f64 = -1e30;

const MAGIC: &[u8; 8] = b"LSMHEAD1";
/// Reserved tensor name holding transformer hyper-parameters; never trained.
const CONFIG_TENSOR: &str = "_config";

/// Readout head architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Single affine map from the spike vector.
    Linear,
    /// Two affine maps with a ReLU between them.
    Relu,
    /// One cross-attention decoder block over the patch history.
    Transformer,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Linear, Variant::Relu, Variant::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Linear => "linear",
            Variant::Relu => "relu",
            Variant::Transformer => "transformer",
        }
    }

    fn tag(self) -> u8 {
        match self {
            Variant::Linear => 0,
            Variant::Relu => 1,
            Variant::Transformer => 2,
        }
    }

    fn from_tag(tag: u8, offset: u64) -> Result<Self> {
        match tag {
            0 => Ok(Variant::Linear),
            1 => Ok(Variant::Relu),
            2 => Ok(Variant::Transformer),
            other => Err(Error::format(offset, format!("unknown head variant tag {other}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Variant::Linear),
            "relu" => Ok(Variant::Relu),
            "transformer" => Ok(Variant::Transformer),
            other => Err(Error::Config(format!(
                "unknown head variant {other:?} (expected linear, relu or transformer)"
            ))),
        }
    }
}

/// Shape of the transformer decoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Longest history window a query may attend to; `None` means the whole
    /// current patch.
    pub max_memory: Option<usize>,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig { d_model: 64, n_heads: 4, d_ff: 256, max_memory: None }
    }
}

impl AttentionConfig {
    fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("attention dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_memory == Some(0) {
            return Err(Error::Config("max_memory must be at least 1".into()));
        }
        Ok(())
    }

    fn to_tensor(self) -> Array2<f32> {
        let mm = self.max_memory.unwrap_or(0) as f32;
        Array2::from_shape_vec(
            (1, 4),
            vec![self.d_model as f32, self.n_heads as f32, self.d_ff as f32, mm],
        )
        .expect("static shape")
    }

    fn from_tensor(t: &Array2<f32>) -> Result<Self> {
        if t.dim() != (1, 4) {
            return Err(Error::Data(format!("attention config tensor has shape {:?}", t.dim())));
        }
        let as_usize = |v: f32, what: &str| -> Result<usize> {
            if v.fract() != 0.0 || v < 0.0 || v > 1e9 {
                return Err(Error::Data(format!("attention config field {what} is {v}")));
            }
            Ok(v as usize)
        };
        let cfg = AttentionConfig {
            d_model: as_usize(t[[0, 0]], "d_model")?,
            n_heads: as_usize(t[[0, 1]], "n_heads")?,
            d_ff: as_usize(t[[0, 2]], "d_ff")?,
            max_memory: match as_usize(t[[0, 3]], "max_memory")? {
                0 => None,
                m => Some(m),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A trained (or freshly initialized) readout head: a variant plus its named
/// parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutHead {
    variant: Variant,
    tensors: BTreeMap<String, Array2<f32>>,
}

/// Everything the graph builder needs to know about a head's architecture.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GraphSpec {
    pub variant: Variant,
    pub d_model: usize,
    pub n_heads: usize,
    pub max_memory: Option<usize>,
}

impl ReadoutHead {
    pub fn variant(&self) -> Variant {
        self.variant
    }

    /// Reservoir size this head reads from.
    pub fn in_dim(&self) -> usize {
        match self.variant {
            Variant::Linear => self.tensors["w"].dim().0,
            Variant::Relu => self.tensors["w1"].dim().0,
            Variant::Transformer => self.tensors["embed_w"].dim().0,
        }
    }

    /// Logits emitted per step.
    pub fn out_dim(&self) -> usize {
        match self.variant {
            Variant::Linear => self.tensors["w"].dim().1,
            Variant::Relu => self.tensors["w2"].dim().1,
            Variant::Transformer => self.tensors["out_w"].dim().1,
        }
    }

    pub fn attention(&self) -> Option<AttentionConfig> {
        self.tensors.get(CONFIG_TENSOR).map(|t| {
            AttentionConfig::from_tensor(t).expect("config tensor validated on construction")
        })
    }

    /// Named parameter tensors, excluding reserved metadata entries.
    pub fn parameters(&self) -> impl Iterator<Item = (&str, &Array2<f32>)> {
        self.tensors
            .iter()
            .filter(|(name, _)| !name.starts_with('_'))
            .map(|(name, t)| (name.as_str(), t))
    }

    pub(crate) fn parameter_mut(&mut self, name: &str) -> &mut Array2<f32> {
        debug_assert!(!name.starts_with('_'), "reserved tensor {name} is not trainable");
        self.tensors.get_mut(name).unwrap_or_else(|| panic!("no tensor named {name}"))
    }

    pub(crate) fn graph_spec(&self) -> GraphSpec {
        let attn = self.attention().unwrap_or_default();
        GraphSpec {
            variant: self.variant,
            d_model: attn.d_model,
            n_heads: attn.n_heads,
            max_memory: attn.max_memory,
        }
    }

    /// Every tensor present with exactly the expected name and shape, all
    /// values finite.
    pub fn check_invariants(&self) -> Result<()> {
        let expected = match self.variant {
            Variant::Linear => {
                let (n, out) = dims_or_err(&self.tensors, "w")?;
                vec![("w", (n, out)), ("b", (1, out))]
            }
            Variant::Relu => {
                let (n, h) = dims_or_err(&self.tensors, "w1")?;
                let (_, out) = dims_or_err(&self.tensors, "w2")?;
                vec![("w1", (n, h)), ("b1", (1, h)), ("w2", (h, out)), ("b2", (1, out))]
            }
            Variant::Transformer => {
                let cfg_t = self
                    .tensors
                    .get(CONFIG_TENSOR)
                    .ok_or_else(|| Error::Data("transformer head is missing _config".into()))?;
                let cfg = AttentionConfig::from_tensor(cfg_t)?;
                let (n, d) = dims_or_err(&self.tensors, "embed_w")?;
                if d != cfg.d_model {
                    return Err(Error::Data(format!(
                        "embed_w width {d} disagrees with configured d_model {}",
                        cfg.d_model
                    )));
                }
                let (_, out) = dims_or_err(&self.tensors, "out_w")?;
                vec![
                    ("_config", (1, 4)),
                    ("embed_w", (n, d)),
                    ("embed_b", (1, d)),
                    ("wq", (d, d)),
                    ("wk", (d, d)),
                    ("wv", (d, d)),
                    ("wo", (d, d)),
                    ("ln1_g", (1, d)),
                    ("ln1_b", (1, d)),
                    ("ln2_g", (1, d)),
                    ("ln2_b", (1, d)),
                    ("ff1_w", (d, cfg.d_ff)),
                    ("ff1_b", (1, cfg.d_ff)),
                    ("ff2_w", (cfg.d_ff, d)),
                    ("ff2_b", (1, d)),
                    ("out_w", (d, out)),
                    ("out_b", (1, out)),
                ]
            }
        };
        if self.tensors.len() != expected.len() {
            let names: Vec<&str> = self.tensors.keys().map(String::as_str).collect();
            return Err(Error::Data(format!(
                "head has tensors {names:?}, expected {} entries",
                expected.len()
            )));
        }
        for (name, shape) in expected {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::Data(format!("head is missing tensor {name}")))?;
            if t.dim() != shape {
                return Err(Error::Data(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.dim()
                )));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("tensor {name} contains non-finite values")));
            }
        }
        if self.in_dim() == 0 || self.out_dim() == 0 {
            return Err(Error::Data("head dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Canonical byte encoding: magic, variant tag, then the tensor table in
    /// name order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC).u8(self.variant.tag()).u32(self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            w.u16(name.len() as u16).bytes(name.as_bytes());
            w.u32(t.dim().0 as u32).u32(t.dim().1 as u32);
            for &v in t.iter() {
                w.f32(v);
            }
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(MAGIC)?;
        let tag_offset = r.offset();
        let variant = Variant::from_tag(r.u8()?, tag_offset)?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name_offset = r.offset();
            let name_bytes = r.take(name_len)?.to_vec();
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::format(name_offset, "tensor name is not UTF-8"))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            if rows == 0 || cols == 0 {
                return Err(Error::format(
                    name_offset,
                    format!("tensor {name} has empty shape {rows}x{cols}"),
                ));
            }
            let data = r.f32_vec(rows * cols)?;
            let arr = Array2::from_shape_vec((rows, cols), data).expect("length checked");
            if tensors.insert(name.clone(), arr).is_some() {
                return Err(Error::format(name_offset, format!("duplicate tensor {name}")));
            }
        }
        r.finish()?;
        let head = ReadoutHead { variant, tensors };
        head.check_invariants().map_err(|e| match e {
            Error::Data(msg) => Error::format(0, msg),
            other => other,
        })?;
        Ok(head)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the canonical encoding.
    pub fn content_hash(&self) -> String {
        util::sha256_hex(&self.to_bytes())
    }
}

fn dims_or_err(
    tensors: &BTreeMap<String, Array2<f32>>,
    name: &str,
) -> Result<(usize, usize)> {
    tensors
        .get(name)
        .map(|t| t.dim())
        .ok_or_else(|| Error::Data(format!("head is missing tensor {name}")))
}

/// Initialize a head with the stock architecture: 32 output channels and
/// hidden width 256.
pub fn init_head(variant: Variant, in_dim: usize, seed: u64) -> Result<ReadoutHead> {
    init_head_with(variant, in_dim, OUT_DIM, DEFAULT_HIDDEN, AttentionConfig::default(), seed)
}

/// Initialize a head with explicit dimensions. Weight matrices draw uniform
/// ±1/√fan_in entries in a fixed tensor order; biases start at zero and
/// layer-norm gains at one, so zero spikes produce zero logits.
pub fn init_head_with(
    variant: Variant,
    in_dim: usize,
    out_dim: usize,
    hidden: usize,
    attn: AttentionConfig,
    seed: u64,
) -> Result<ReadoutHead> {
    if in_dim == 0 || out_dim == 0 || hidden == 0 {
        return Err(Error::Config("head dimensions must be positive".into()));
    }
    attn.validate()?;
    let mut rng = util::rng_from(seed);
    let mut draw = |rows: usize, cols: usize| -> Array2<f32> {
        let bound = 1.0 / (rows as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound) as f32)
    };
    let mut tensors = BTreeMap::new();
    let put = |map: &mut BTreeMap<String, Array2<f32>>, name: &str, t: Array2<f32>| {
        map.insert(name.to_string(), t);
    };
    match variant {
        Variant::Linear => {
            put(&mut tensors, "w", draw(in_dim, out_dim));
            put(&mut tensors, "b", Array2::zeros((1, out_dim)));
        }
        Variant::Relu => {
            put(&mut tensors, "w1", draw(in_dim, hidden));
            put(&mut tensors, "w2", draw(hidden, out_dim));
            put(&mut tensors, "b1", Array2::zeros((1, hidden)));
            put(&mut tensors, "b2", Array2::zeros((1, out_dim)));
        }
        Variant::Transformer => {
            let d = attn.d_model;
            put(&mut tensors, "embed_w", draw(in_dim, d));
            put(&mut tensors, "wq", draw(d, d));
            put(&mut tensors, "wk", draw(d, d));
            put(&mut tensors, "wv", draw(d, d));
            put(&mut tensors, "wo", draw(d, d));
            put(&mut tensors, "ff1_w", draw(d, attn.d_ff));
            put(&mut tensors, "ff2_w", draw(attn.d_ff, d));
            put(&mut tensors, "out_w", draw(d, out_dim));
            put(&mut tensors, "embed_b", Array2::zeros((1, d)));
            put(&mut tensors, "ff1_b", Array2::zeros((1, attn.d_ff)));
            put(&mut tensors, "ff2_b", Array2::zeros((1, d)));
            put(&mut tensors, "out_b", Array2::zeros((1, out_dim)));
            put(&mut tensors, "ln1_g", Array2::ones((1, d)));
            put(&mut tensors, "ln1_b", Array2::zeros((1, d)));
            put(&mut tensors, "ln2_g", Array2::ones((1, d)));
            put(&mut tensors, "ln2_b", Array2::zeros((1, d)));
            put(&mut tensors, CONFIG_TENSOR, attn.to_tensor());
        }
    }
    let head = ReadoutHead { variant, tensors };
    head.check_invariants()?;
    Ok(head)
}

/// Insert every trainable tensor of `head` into `tape`, converted to `S`.
/// With `trainable` they become named parameters; otherwise constants.
pub(crate) fn insert_params<S: Scalar>(
    tape: &mut Tape<S>,
    head: &ReadoutHead,
    trainable: bool,
) -> BTreeMap<String, Id> {
    let mut ids = BTreeMap::new();
    for (name, t) in head.parameters() {
        let arr = t.mapv(|v| S::from_f64(f64::from(v)));
        let id = if trainable { tape.param(name, arr) } else { tape.constant(arr) };
        ids.insert(name.to_string(), id);
    }
    ids
}

fn sinusoidal_positions<S: Scalar>(positions: &[usize], d: usize) -> Array2<S> {
    let mut p = Array2::zeros((positions.len(), d));
    for (row, &t) in positions.iter().enumerate() {
        for j in 0..d {
            let pair = (j / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / d as f64);
            p[[row, j]] = S::from_f64(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    p
}

/// Pre-softmax mask allowing query row `t` to attend to keys in
/// `max(0, t+1−window)..=t`.
fn causal_mask<S: Scalar>(steps: usize, window: Option<usize>) -> Array2<S> {
    let neg = S::from_f64(MASK_NEG);
    Array2::from_shape_fn((steps, steps), |(t, k)| {
        let lo = window.map_or(0, |w| (t + 1).saturating_sub(w));
        if k >= lo && k <= t {
            S::zero()
        } else {
            neg
        }
    })
}

/// Cross-attention decoder block shared by the sequence and per-step paths.
/// `query` is [Tq×in_dim] at absolute positions `q_pos`; `memory` is
/// [Tm×in_dim] at positions `m_pos`; `mask` (if any) is [Tq×Tm] additive.
fn transformer_graph<S: Scalar>(
    tape: &mut Tape<S>,
    spec: &GraphSpec,
    ids: &BTreeMap<String, Id>,
    query: Id,
    memory: Id,
    q_pos: &[usize],
    m_pos: &[usize],
    mask: Option<Array2<S>>,
) -> Id {
    let d = spec.d_model;
    let heads = spec.n_heads;
    let dh = d / heads;
    let embed = |tape: &mut Tape<S>, x: Id, pos: &[usize]| -> Id {
        let e = tape.matmul(x, ids["embed_w"]);
        let e = tape.add_row(e, ids["embed_b"]);
        let p = tape.constant(sinusoidal_positions(pos, d));
        tape.add(e, p)
    };
    let q_embed = embed(tape, query, q_pos);
    let m_embed = embed(tape, memory, m_pos);

    let q_all = tape.matmul(q_embed, ids["wq"]);
    let k_all = tape.matmul(m_embed, ids["wk"]);
    let v_all = tape.matmul(m_embed, ids["wv"]);
    let mask_id = mask.map(|m| tape.constant(m));
    let inv_sqrt = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (from, to) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q_all, from, to);
        let kh = tape.slice_cols(k_all, from, to);
        let vh = tape.slice_cols(v_all, from, to);
        let scores = tape.matmul_nt(qh, kh);
        let scores = tape.scale(scores, inv_sqrt);
        let scores = match mask_id {
            Some(m) => tape.add(scores, m),
            None => scores,
        };
        let attn = tape.softmax_rows(scores);
        head_outputs.push(tape.matmul(attn, vh));
    }
    let mixed = tape.concat_cols(&head_outputs);
    let mixed = tape.matmul(mixed, ids["wo"]);

    // Post-norm residual around the attention sublayer.
    let x1 = tape.add(q_embed, mixed);
    let x1 = tape.layer_norm_rows(x1, ids["ln1_g"], ids["ln1_b"]);

    // Position-wise feed-forward, then the second residual + norm.
    let ff = tape.matmul(x1, ids["ff1_w"]);
    let ff = tape.add_row(ff, ids["ff1_b"]);
    let ff = tape.relu(ff);
    let ff = tape.matmul(ff, ids["ff2_w"]);
    let ff = tape.add_row(ff, ids["ff2_b"]);
    let x2 = tape.add(x1, ff);
    let x2 = tape.layer_norm_rows(x2, ids["ln2_g"], ids["ln2_b"]);

    let logits = tape.matmul(x2, ids["out_w"]);
    tape.add_row(logits, ids["out_b"])
}

/// Build the logits graph for a whole patch: `x` is [T×in_dim] spike rows,
/// output is [T×out_dim]. The transformer path applies a causal mask so row
/// `t` only attends to rows ≤ t.
pub(crate) fn logits_graph<S: Scalar>(
    tape: &mut Tape<S>,
    spec: &GraphSpec,
    ids: &BTreeMap<String, Id>,
    x: Id,
) -> Id {
    match spec.variant {
        Variant::Linear => {
            let logits = tape.matmul(x, ids["w"]);
            tape.add_row(logits, ids["b"])
        }
        Variant::Relu => {
            let h = tape.matmul(x, ids["w1"]);
            let h = tape.add_row(h, ids["b1"]);
            let h = tape.relu(h);
            let out = tape.matmul(h, ids["w2"]);
            tape.add_row(out, ids["b2"])
        }
        Variant::Transformer => {
            let steps = tape.value(x).dim().0;
            let positions: Vec<usize> = (0..steps).collect();
            let mask = causal_mask(steps, spec.max_memory);
            transformer_graph(tape, spec, ids, x, x, &positions, &positions, Some(mask))
        }
    }
}

fn check_input(head: &ReadoutHead, len: usize) -> Result<()> {
    if len != head.in_dim() {
        return Err(Error::Config(format!(
            "readout expects {} inputs, got {len}",
            head.in_dim()
        )));
    }
    Ok(())
}

/// Logits for a whole patch of spike rows `x` [T×n], evaluated in f64.
pub fn forward_sequence_f64(head: &ReadoutHead, x: &Array2<f64>) -> Result<Array2<f64>> {
    check_input(head, x.dim().1)?;
    let mut tape = Tape::<f64>::new();
    let ids = insert_params(&mut tape, head, false);
    let x_id = tape.constant(x.clone());
    let logits = logits_graph(&mut tape, &head.graph_spec(), &ids, x_id);
    Ok(tape.value(logits).clone())
}

/// Single-step logits of a linear head.
pub fn forward_linear(head: &ReadoutHead, spikes: &[f64]) -> Result<Vec<f64>> {
    if head.variant() != Variant::Linear {
        return Err(Error::Config(format!("head is {}, not linear", head.variant())));
    }
    check_input(head, spikes.len())?;
    let w = &head.tensors["w"];
    let b = &head.tensors["b"];
    let out = head.out_dim();
    let mut logits = vec![0.0f64; out];
    for (j, l) in logits.iter_mut().enumerate() {
        *l = f64::from(b[[0, j]]);
    }
    for (i, &s) in spikes.iter().enumerate() {
        if s == 0.0 {
            continue;
        }
        for (j, l) in logits.iter_mut().enumerate() {
            *l += s * f64::from(w[[i, j]]);
        }
    }
    Ok(logits)
}

/// Single-step logits of a two-layer ReLU head.
pub fn forward_relu(head: &ReadoutHead, spikes: &[f64]) -> Result<Vec<f64>> {
    if head.variant() != Variant::Relu {
        return Err(Error::Config(format!("head is {}, not relu", head.variant())));
    }
    check_input(head, spikes.len())?;
    let (w1, b1) = (&head.tensors["w1"], &head.tensors["b1"]);
    let (w2, b2) = (&head.tensors["w2"], &head.tensors["b2"]);
    let hidden = w1.dim().1;
    let mut h = vec![0.0f64; hidden];
    for (k, v) in h.iter_mut().enumerate() {
        *v = f64::from(b1[[0, k]]);
    }
    for (i, &s) in spikes.iter().enumerate() {
        if s == 0.0 {
            continue;
        }
        for (k, v) in h.iter_mut().enumerate() {
            *v += s * f64::from(w1[[i, k]]);
        }
    }
    let out = head.out_dim();
    let mut logits = vec![0.0f64; out];
    for (j, l) in logits.iter_mut().enumerate() {
        *l = f64::from(b2[[0, j]]);
    }
    for (k, &hv) in h.iter().enumerate() {
        if hv <= 0.0 {
            continue;
        }
        for (j, l) in logits.iter_mut().enumerate() {
            *l += hv * f64::from(w2[[k, j]]);
        }
    }
    Ok(logits)
}

/// Single-step logits of the transformer head. `history` holds the spike
/// vectors of the current patch at steps `0..=t`, current step included; the
/// query attends to it as memory from absolute position `history.len() - 1`.
/// An empty history makes the query its own single memory row at position 0.
pub fn forward_transformer(
    head: &ReadoutHead,
    spikes_t: &[f64],
    history: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if head.variant() != Variant::Transformer {
        return Err(Error::Config(format!("head is {}, not transformer", head.variant())));
    }
    check_input(head, spikes_t.len())?;
    for row in history {
        check_input(head, row.len())?;
    }
    let spec = head.graph_spec();
    let n = head.in_dim();

    // Memory = history rows (or the query alone), trimmed to the window.
    let (rows, positions): (Vec<&[f64]>, Vec<usize>) = if history.is_empty() {
        (vec![spikes_t], vec![0])
    } else {
        let keep = spec.max_memory.unwrap_or(history.len()).min(history.len());
        let start = history.len() - keep;
        (
            history[start..].iter().map(Vec::as_slice).collect(),
            (start..history.len()).collect(),
        )
    };
    let q_pos = *positions.last().expect("memory is never empty");

    let mut memory = Array2::zeros((rows.len(), n));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            memory[[i, j]] = v;
        }
    }
    let mut query = Array2::zeros((1, n));
    for (j, &v) in spikes_t.iter().enumerate() {
        query[[0, j]] = v;
    }

    let mut tape = Tape::<f64>::new();
    let ids = insert_params(&mut tape, head, false);
    let q_id = tape.constant(query);
    let m_id = tape.constant(memory);
    let logits = transformer_graph(&mut tape, &spec, &ids, q_id, m_id, &[q_pos], &positions, None);
    Ok(tape.value(logits).row(0).to_vec())
}

/// Expand a bit-packed raster into a dense [steps×n] matrix of 0/1 rows.
pub fn raster_rows<S: Scalar>(raster: &SpikeRaster) -> Array2<S> {
    let mut x = Array2::zeros((raster.steps(), raster.n()));
    let mut active = Vec::new();
    for t in 0..raster.steps() {
        raster.active_into(t, &mut active);
        for &i in &active {
            x[[t, i]] = S::one();
        }
    }
    x
}

/// Loss of a head on fixed data, with parameters overridden from an f64 map —
/// the finite-difference harness perturbs that map directly so no f32
/// rounding pollutes the difference quotient.
fn loss_with_params(
    head: &ReadoutHead,
    params: &BTreeMap<String, Array2<f64>>,
    x: &Array2<f64>,
    targets: &Array2<f64>,
    window: usize,
    pos_weight: f64,
) -> (Tape<f64>, Id) {
    let mut tape = Tape::<f64>::new();
    let mut ids = BTreeMap::new();
    for (name, t) in params {
        ids.insert(name.clone(), tape.param(name, t.clone()));
    }
    let x_id = tape.constant(x.clone());
    let logits = logits_graph(&mut tape, &head.graph_spec(), &ids, x_id);
    let pooled = tape.mean_pool_rows(logits, window);
    let scores = tape.sigmoid(pooled);
    let t_id = tape.constant(targets.clone());
    let loss = tape.bce_mean(scores, t_id, pos_weight);
    (tape, loss)
}

/// Audit the reverse-mode gradients of `head` against central finite
/// differences on one random toy instance (4 raster steps, pooling window 2)
/// drawn from `seed`, entirely in f64. Returns the max relative error over
/// every parameter entry; an exact adjoint keeps it well below 1e-4.
pub fn gradcheck(head: &ReadoutHead, seed: u64) -> Result<f64> {
    let mut rng = util::rng_from(seed ^ 0x5eed);
    let x = Array2::from_shape_fn((4, head.in_dim()), |_| f64::from(rng.random_bool(0.4)));
    let window = 2;
    let targets = Array2::from_shape_fn((4 / window, head.out_dim()), |_| {
        f64::from(rng.random_bool(0.3))
    });
    let params: BTreeMap<String, Array2<f64>> = head
        .parameters()
        .map(|(name, t)| (name.to_string(), t.mapv(f64::from)))
        .collect();
    let (tape, loss) = loss_with_params(head, &params, &x, &targets, window, 1.5);
    let grads = tape.backward(loss)?;
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (name, g) in &grads {
        let (rows, cols) = g.dim();
        for i in 0..rows {
            for j in 0..cols {
                let mut plus = params.clone();
                plus.get_mut(name).expect("gradient key is a parameter")[[i, j]] += h;
                let mut minus = params.clone();
                minus.get_mut(name).expect("gradient key is a parameter")[[i, j]] -= h;
                let (tp, lp) = loss_with_params(head, &plus, &x, &targets, window, 1.5);
                let (tm, lm) = loss_with_params(head, &minus, &x, &targets, window, 1.5);
                let fd = (tp.value(lp)[[0, 0]] - tm.value(lm)[[0, 0]]) / (2.0 * h);
                let ad = g[[i, j]];
                let denom = ad.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(((ad - fd) / denom).abs());
            }
        }
    }
    Ok(worst)
}
