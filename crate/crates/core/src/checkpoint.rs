//! Binary checkpoint format.
//!
//! All integers and floats are little-endian; floats are stored as raw `f32` bits so a
//! round trip is bit-exact.
//!
//! ```text
//! "CSQZ"  u32 version
//! u32 len, spec JSON        u32 len, metadata JSON
//! u32 C, C × f32 norm mean, C × f32 norm scale
//! u64 adam step, u32 layer count
//! per layer: u8 tag (0 stateless, 1 dense, 2 conv, 3 batch norm)
//!   dense/conv: u8 flags (bit 0 quantized, bit 1 masked), u32 weights, u32 biases,
//!               shadow, effective, bias, [mask bitmap], m_w, v_w, m_b, v_b
//!   batch norm: u32 channels, gamma, beta, running mean, running var, m_g, v_g, m_b, v_b
//! ```
//!
//! The mask bitmap has one bit per weight, LSB first, one byte-aligned row per output
//! unit.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::dataset::patches::ByteReader;
use crate::error::{Error, Result};
use crate::inference::FrozenNet;
use crate::nn::{BnState, InputNorm, LayerState, Network, NetworkSpec, WeightState};
use crate::pipeline::PipelineMeta;

pub const MAGIC: &[u8; 4] = b"CSQZ";
pub const VERSION: u32 = 1;

const TAG_STATELESS: u8 = 0;
const TAG_DENSE: u8 = 1;
const TAG_CONV: u8 = 2;
const TAG_BN: u8 = 3;
const FLAG_QUANTIZED: u8 = 1;
const FLAG_MASKED: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: Network<f32>,
    pub meta: PipelineMeta,
}

impl Checkpoint {
    pub fn new(net: Network<f32>, meta: PipelineMeta) -> Self {
        Checkpoint { net, meta }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_json(&mut out, &serde_json::to_vec(self.net.spec()).expect("spec serializes"));
        put_json(&mut out, &serde_json::to_vec(&self.meta).expect("metadata serializes"));
        let norm = self.net.input_norm();
        put_u32(&mut out, norm.mean.len() as u32);
        put_f32s(&mut out, &norm.mean);
        put_f32s(&mut out, &norm.scale);
        out.extend_from_slice(&self.net.adam_t.to_le_bytes());
        put_u32(&mut out, self.net.layers.len() as u32);
        for layer in &self.net.layers {
            match layer {
                LayerState::Stateless => out.push(TAG_STATELESS),
                LayerState::Dense(w) => {
                    out.push(TAG_DENSE);
                    put_weights(&mut out, w);
                }
                LayerState::Conv(w) => {
                    out.push(TAG_CONV);
                    put_weights(&mut out, w);
                }
                LayerState::BatchNorm(bn) => {
                    out.push(TAG_BN);
                    put_u32(&mut out, bn.channels() as u32);
                    for v in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var, &bn.m_g, &bn.v_g, &bn.m_b, &bn.v_b] {
                        put_f32s(&mut out, v);
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::parse(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::parse(4, format!("unsupported checkpoint version {version}")));
        }
        let spec: NetworkSpec = read_json(&mut r, "spec")?;
        let spec = NetworkSpec::new(spec.input, spec.layers)?;
        let meta: PipelineMeta = read_json(&mut r, "metadata")?;
        let c = r.u32()? as usize;
        let mean = read_f32s(&mut r, c)?;
        let scale = read_f32s(&mut r, c)?;
        let adam_t = r.u64()?;
        let n_layers = r.u32()? as usize;
        if n_layers != spec.layers.len() {
            return Err(Error::parse(r.pos, format!("{n_layers} layer records for {} layers", spec.layers.len())));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for spec_layer in &spec.layers {
            let at = r.pos;
            let layer = match r.u8()? {
                TAG_STATELESS => LayerState::Stateless,
                TAG_DENSE => LayerState::Dense(read_weights(&mut r, spec_layer.bias_count())?),
                TAG_CONV => LayerState::Conv(read_weights(&mut r, spec_layer.bias_count())?),
                TAG_BN => {
                    let ch = r.u32()? as usize;
                    let mut v: Vec<Vec<f32>> = (0..8).map(|_| read_f32s(&mut r, ch)).collect::<Result<_>>()?;
                    let mut next = || v.remove(0);
                    LayerState::BatchNorm(BnState {
                        gamma: next(),
                        beta: next(),
                        running_mean: next(),
                        running_var: next(),
                        m_g: next(),
                        v_g: next(),
                        m_b: next(),
                        v_b: next(),
                    })
                }
                t => return Err(Error::parse(at, format!("unknown layer tag {t}"))),
            };
            layers.push(layer);
        }
        if r.pos != bytes.len() {
            return Err(Error::parse(r.pos, "trailing bytes after the last layer"));
        }
        let net = Network::from_parts(spec, InputNorm { mean, scale }, layers, adam_t)?;
        Ok(Checkpoint { net, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn sha256(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    /// Inference network whose provenance is the checkpoint hash.
    pub fn freeze(&self) -> Result<FrozenNet> {
        FrozenNet::from_network(&self.net, self.sha256())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_bits().to_le_bytes());
    }
}

fn put_json(out: &mut Vec<u8>, json: &[u8]) {
    put_u32(out, json.len() as u32);
    out.extend_from_slice(json);
}

fn put_weights(out: &mut Vec<u8>, w: &WeightState<f32>) {
    let flags = (w.quantized as u8 * FLAG_QUANTIZED) | (w.mask.is_some() as u8 * FLAG_MASKED);
    out.push(flags);
    put_u32(out, w.shadow.len() as u32);
    put_u32(out, w.bias.len() as u32);
    put_f32s(out, &w.shadow);
    put_f32s(out, &w.effective);
    put_f32s(out, &w.bias);
    if let Some(mask) = &w.mask {
        out.extend_from_slice(&pack_mask(mask, w.bias.len()));
    }
    for v in [&w.m_w, &w.v_w, &w.m_b, &w.v_b] {
        put_f32s(out, v);
    }
}

fn read_json<T: serde::de::DeserializeOwned>(r: &mut ByteReader<'_>, what: &str) -> Result<T> {
    let at = r.pos;
    let len = r.u32()? as usize;
    let raw = r.take(len)?;
    serde_json::from_slice(raw).map_err(|e| Error::parse(at, format!("bad {what} JSON: {e}")))
}

fn read_f32s(r: &mut ByteReader<'_>, n: usize) -> Result<Vec<f32>> {
    if n > r.bytes.len().saturating_sub(r.pos) / 4 {
        return Err(Error::parse(r.pos, format!("truncated: {n} floats expected")));
    }
    (0..n).map(|_| r.f32()).collect()
}

fn read_weights(r: &mut ByteReader<'_>, rows: usize) -> Result<WeightState<f32>> {
    let at = r.pos;
    let flags = r.u8()?;
    if flags & !(FLAG_QUANTIZED | FLAG_MASKED) != 0 {
        return Err(Error::parse(at, format!("unknown weight flags {flags:#04x}")));
    }
    let n = r.u32()? as usize;
    let nb = r.u32()? as usize;
    if nb != rows || nb == 0 || n % nb != 0 {
        return Err(Error::parse(at, format!("{n} weights and {nb} biases do not form a layer")));
    }
    let shadow = read_f32s(r, n)?;
    let effective = read_f32s(r, n)?;
    let bias = read_f32s(r, nb)?;
    let mask = if flags & FLAG_MASKED != 0 {
        let row_bytes = (n / nb).div_ceil(8);
        Some(unpack_mask(r.take(row_bytes * nb)?, n, nb))
    } else {
        None
    };
    let m_w = read_f32s(r, n)?;
    let v_w = read_f32s(r, n)?;
    let m_b = read_f32s(r, nb)?;
    let v_b = read_f32s(r, nb)?;
    Ok(WeightState { shadow, effective, bias, mask, quantized: flags & FLAG_QUANTIZED != 0, m_w, v_w, m_b, v_b })
}

/// One byte-aligned, LSB-first bit row per output unit.
pub fn pack_mask(mask: &[u8], rows: usize) -> Vec<u8> {
    let cols = mask.len() / rows;
    let row_bytes = cols.div_ceil(8);
    let mut out = vec![0u8; row_bytes * rows];
    for (r, row) in mask.chunks_exact(cols).enumerate() {
        for (c, &m) in row.iter().enumerate() {
            if m != 0 {
                out[r * row_bytes + c / 8] |= 1 << (c % 8);
            }
        }
    }
    out
}

pub fn unpack_mask(bits: &[u8], len: usize, rows: usize) -> Vec<u8> {
    let cols = len / rows;
    let row_bytes = cols.div_ceil(8);
    (0..len).map(|i| (bits[(i / cols) * row_bytes + (i % cols) / 8] >> ((i % cols) % 8)) & 1).collect()
}
