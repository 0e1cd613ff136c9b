//! Checkpoint (`.caspkpt`) and calibration (`.casptok`) binary formats.
//!
//! Checkpoint layout, all little-endian:
//!
//! ```text
//! magic "CASP" | u32 version | u32 d | u32 n_layers | u32 n_heads
//! | u32 vocab_size | u32 max_seq_len | u32 tensor_count
//! | tensor records... | u32 crc32 of all preceding bytes
//! ```
//!
//! Each tensor record is `u32 name_len | name | u8 tag | payload`:
//! tag 0 dense (`u32 rows | u32 cols | f32 data row-major`), tag 1 low-rank
//! (`u32 rows | u32 cols | u32 rank`, then two factor sub-records, each
//! dense or quantized), tag 2 quantized (scheme, bits, grids/codebook, and
//! a bit-packed index stream).
//!
//! Calibration layout: `u32 count | u32 seq_len | u32 token ids...`.

use crate::error::{CaspError, Result};
use crate::model::checkpoint::{
    FactorStore, LayerWeights, ModelCheckpoint, TensorRepr, TransformerConfig, FORMAT_VERSION,
    SLOT_NAMES,
};
use crate::model::tensor::Tensor;
use crate::quant::{Codebook, QuantScheme, QuantizedTensor};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"CASP";
const TAG_DENSE: u8 = 0;
const TAG_LOWRANK: u8 = 1;
const TAG_QUANTIZED: u8 = 2;
/// Tensors beyond this element count are rejected at save time.
const MAX_ELEMENTS: usize = 1 << 31;

// ---------------------------------------------------------------------------
// Writer
// ---------------------------------------------------------------------------

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
}

/// Pack `width`-bit values little-endian into a byte stream.
fn pack_bits(values: &[u32], width: u32) -> Vec<u8> {
    let total_bits = values.len() * width as usize;
    let mut out = vec![0u8; total_bits.div_ceil(8)];
    let mut bit = 0usize;
    for &v in values {
        for k in 0..width {
            if (v >> k) & 1 == 1 {
                out[bit >> 3] |= 1 << (bit & 7);
            }
            bit += 1;
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], width: u32, count: usize) -> Result<Vec<u32>> {
    let need_bits = count * width as usize;
    if bytes.len() * 8 < need_bits {
        return Err(CaspError::format("truncated index stream"));
    }
    let mut out = Vec::with_capacity(count);
    let mut bit = 0usize;
    for _ in 0..count {
        let mut v = 0u32;
        for k in 0..width {
            if (bytes[bit >> 3] >> (bit & 7)) & 1 == 1 {
                v |= 1 << k;
            }
            bit += 1;
        }
        out.push(v);
    }
    Ok(out)
}

fn write_dense(w: &mut Writer, t: &Tensor) -> Result<()> {
    if t.len() > MAX_ELEMENTS {
        return Err(CaspError::invalid(format!(
            "tensor with {} elements exceeds the 2^31 limit",
            t.len()
        )));
    }
    w.u32(t.rows() as u32);
    w.u32(t.cols() as u32);
    for &v in t.data() {
        w.f32(v);
    }
    Ok(())
}

fn write_quantized(w: &mut Writer, q: &QuantizedTensor) -> Result<()> {
    q.validate()
        .map_err(|e| CaspError::invalid(format!("refusing to save invalid tensor: {e}")))?;
    let scheme = match q.scheme {
        QuantScheme::Rtn => 0u8,
        QuantScheme::Greedy => 1,
        QuantScheme::Vq => 2,
    };
    w.u8(scheme);
    w.u8(q.n_bits);
    w.u32(q.group_size);
    w.u32(q.rows);
    w.u32(q.cols);
    match q.scheme {
        QuantScheme::Rtn | QuantScheme::Greedy => {
            w.u32(q.scales.len() as u32);
            for &s in &q.scales {
                w.u16(s);
            }
            for &z in &q.zeros {
                w.u16(z);
            }
            w.u32(q.indices.len() as u32);
            w.bytes(&pack_bits(&q.indices, q.n_bits as u32));
        }
        QuantScheme::Vq => {
            let cb = q.codebook.as_ref().unwrap();
            w.u32(cb.entry_count() as u32);
            w.u32(cb.vec_dim);
            for &e in &cb.entries {
                w.u16(e);
            }
            w.u32(q.indices.len() as u32);
            w.bytes(&pack_bits(&q.indices, q.n_bits as u32 * q.group_size));
        }
    }
    Ok(())
}

fn write_factor(w: &mut Writer, f: &FactorStore) -> Result<()> {
    match f {
        FactorStore::Dense(t) => {
            w.u8(TAG_DENSE);
            write_dense(w, t)
        }
        FactorStore::Quantized(q) => {
            w.u8(TAG_QUANTIZED);
            write_quantized(w, q)
        }
    }
}

fn write_record(w: &mut Writer, name: &str, repr: &TensorRepr) -> Result<()> {
    w.u32(name.len() as u32);
    w.bytes(name.as_bytes());
    match repr {
        TensorRepr::Dense(t) => {
            w.u8(TAG_DENSE);
            write_dense(w, t)
        }
        TensorRepr::LowRank { a, b, rank } => {
            w.u8(TAG_LOWRANK);
            let (rows, _) = a.dims();
            let (_, cols) = b.dims();
            w.u32(rows as u32);
            w.u32(cols as u32);
            w.u32(*rank as u32);
            write_factor(w, a)?;
            write_factor(w, b)
        }
        TensorRepr::Quantized(q) => {
            w.u8(TAG_QUANTIZED);
            write_quantized(w, q)
        }
    }
}

/// Serialize a checkpoint to bytes (deterministic).
pub fn checkpoint_to_bytes(model: &ModelCheckpoint) -> Result<Vec<u8>> {
    model.validate()?;
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(model.format_version);
    w.u32(model.config.d as u32);
    w.u32(model.config.n_layers as u32);
    w.u32(model.config.n_heads as u32);
    w.u32(model.config.vocab_size as u32);
    w.u32(model.config.max_seq_len as u32);
    w.u32(1 + 6 * model.layers.len() as u32);
    write_record(&mut w, "embedding", &TensorRepr::Dense(model.embedding.clone()))?;
    for (li, layer) in model.layers.iter().enumerate() {
        for (name, repr) in layer.slots() {
            write_record(&mut w, &format!("layers.{li}.{name}"), repr)?;
        }
    }
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    Ok(w.buf)
}

pub fn save_checkpoint(model: &ModelCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    let bytes = checkpoint_to_bytes(model)?;
    fs::write(path, bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Reader
// ---------------------------------------------------------------------------

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CaspError::format("truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn read_dense(r: &mut Reader) -> Result<Tensor> {
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    if rows.saturating_mul(cols) > MAX_ELEMENTS {
        return Err(CaspError::format("tensor dims exceed the 2^31 element limit"));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(r.f32()?);
    }
    Tensor::new(rows, cols, data).map_err(|e| CaspError::format(e.to_string()))
}

fn read_quantized(r: &mut Reader) -> Result<QuantizedTensor> {
    let scheme = match r.u8()? {
        0 => QuantScheme::Rtn,
        1 => QuantScheme::Greedy,
        2 => QuantScheme::Vq,
        other => return Err(CaspError::format(format!("unknown quant scheme tag {other}"))),
    };
    let n_bits = r.u8()?;
    let group_size = r.u32()?;
    let rows = r.u32()?;
    let cols = r.u32()?;
    if n_bits == 0 || n_bits > 16 || group_size == 0 {
        return Err(CaspError::format("invalid quantized tensor header"));
    }
    let qt = match scheme {
        QuantScheme::Rtn | QuantScheme::Greedy => {
            let n_groups = r.u32()? as usize;
            let mut scales = Vec::with_capacity(n_groups);
            for _ in 0..n_groups {
                scales.push(r.u16()?);
            }
            let mut zeros = Vec::with_capacity(n_groups);
            for _ in 0..n_groups {
                zeros.push(r.u16()?);
            }
            let n_indices = r.u32()? as usize;
            let width = n_bits as u32;
            let packed = r.take((n_indices * width as usize).div_ceil(8))?;
            let indices = unpack_bits(packed, width, n_indices)?;
            QuantizedTensor {
                scheme,
                n_bits,
                group_size,
                rows,
                cols,
                indices,
                scales,
                zeros,
                codebook: None,
            }
        }
        QuantScheme::Vq => {
            let n_entries = r.u32()? as usize;
            let vec_dim = r.u32()?;
            let mut entries = Vec::with_capacity(n_entries * vec_dim as usize);
            for _ in 0..n_entries * vec_dim as usize {
                entries.push(r.u16()?);
            }
            let n_indices = r.u32()? as usize;
            let width = n_bits as u32 * vec_dim;
            let packed = r.take((n_indices * width as usize).div_ceil(8))?;
            let indices = unpack_bits(packed, width, n_indices)?;
            QuantizedTensor {
                scheme,
                n_bits,
                group_size,
                rows,
                cols,
                indices,
                scales: Vec::new(),
                zeros: Vec::new(),
                codebook: Some(Codebook {
                    n_bits,
                    vec_dim,
                    entries,
                }),
            }
        }
    };
    qt.validate().map_err(|e| CaspError::format(e.to_string()))?;
    Ok(qt)
}

fn read_factor(r: &mut Reader) -> Result<FactorStore> {
    match r.u8()? {
        TAG_DENSE => Ok(FactorStore::Dense(read_dense(r)?)),
        TAG_QUANTIZED => Ok(FactorStore::Quantized(read_quantized(r)?)),
        other => Err(CaspError::format(format!("invalid factor tag {other}"))),
    }
}

fn read_record(r: &mut Reader, expect_name: &str) -> Result<TensorRepr> {
    let name_len = r.u32()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| CaspError::format("tensor name is not utf-8"))?;
    if name != expect_name {
        return Err(CaspError::format(format!(
            "unexpected tensor '{name}', expected '{expect_name}'"
        )));
    }
    match r.u8()? {
        TAG_DENSE => Ok(TensorRepr::Dense(read_dense(r)?)),
        TAG_LOWRANK => {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let rank = r.u32()? as usize;
            let a = read_factor(r)?;
            let b = read_factor(r)?;
            if a.dims() != (rows, rank) || b.dims() != (rank, cols) {
                return Err(CaspError::format("low-rank factor dims mismatch"));
            }
            Ok(TensorRepr::LowRank { a, b, rank })
        }
        TAG_QUANTIZED => Ok(TensorRepr::Quantized(read_quantized(r)?)),
        other => Err(CaspError::format(format!("invalid representation tag {other}"))),
    }
}

/// Parse a checkpoint from bytes, verifying the trailing CRC32 first.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelCheckpoint> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(CaspError::format("truncated file"));
    }
    if &bytes[..4] != MAGIC {
        return Err(CaspError::format("not a CASP checkpoint"));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let actual_crc = crc32fast::hash(body);
    if stored_crc != actual_crc {
        return Err(CaspError::format(format!(
            "checksum error: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )));
    }

    let mut r = Reader::new(body);
    r.take(4)?; // magic
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CaspError::format(format!("unsupported version {version}")));
    }
    let config = TransformerConfig {
        d: r.u32()? as usize,
        n_layers: r.u32()? as usize,
        n_heads: r.u32()? as usize,
        vocab_size: r.u32()? as usize,
        max_seq_len: r.u32()? as usize,
    };
    let tensor_count = r.u32()? as usize;
    if tensor_count != 1 + 6 * config.n_layers {
        return Err(CaspError::format(format!(
            "tensor count {tensor_count} does not match {} layers",
            config.n_layers
        )));
    }
    let embedding = match read_record(&mut r, "embedding")? {
        TensorRepr::Dense(t) => t,
        _ => return Err(CaspError::format("embedding must be dense")),
    };
    let mut layers = Vec::with_capacity(config.n_layers);
    for li in 0..config.n_layers {
        let mut slots = Vec::with_capacity(6);
        for name in SLOT_NAMES {
            slots.push(read_record(&mut r, &format!("layers.{li}.{name}"))?);
        }
        let mut it = slots.into_iter();
        layers.push(LayerWeights {
            w_q: it.next().unwrap(),
            w_k: it.next().unwrap(),
            w_v: it.next().unwrap(),
            w_o: it.next().unwrap(),
            mlp_up: it.next().unwrap(),
            mlp_down: it.next().unwrap(),
        });
    }
    if r.pos != body.len() {
        return Err(CaspError::format("trailing bytes after tensor records"));
    }
    let model = ModelCheckpoint {
        config,
        embedding,
        layers,
        format_version: version,
    };
    model.validate()?;
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    let bytes = fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

// ---------------------------------------------------------------------------
// Calibration files
// ---------------------------------------------------------------------------

use crate::model::calibration::CalibrationSet;

pub fn calibration_to_bytes(calib: &CalibrationSet) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(calib.sequences.len() as u32);
    w.u32(calib.seq_len as u32);
    for seq in &calib.sequences {
        for &t in seq {
            w.u32(t);
        }
    }
    w.buf
}

pub fn save_calibration(calib: &CalibrationSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, calibration_to_bytes(calib))?;
    Ok(())
}

pub fn load_calibration(path: impl AsRef<Path>) -> Result<CalibrationSet> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(CaspError::format("truncated calibration file"));
    }
    let mut r = Reader::new(&bytes);
    let count = r.u32()? as usize;
    let seq_len = r.u32()? as usize;
    if bytes.len() != 8 + 4 * count * seq_len {
        return Err(CaspError::format(format!(
            "calibration file size {} does not match header ({count} x {seq_len})",
            bytes.len()
        )));
    }
    let mut sequences = Vec::with_capacity(count);
    for _ in 0..count {
        let mut seq = Vec::with_capacity(seq_len);
        for _ in 0..seq_len {
            seq.push(r.u32()?);
        }
        sequences.push(seq);
    }
    CalibrationSet::new(sequences, seq_len, 0)
}
