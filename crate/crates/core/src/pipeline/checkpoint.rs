//! The `.pqdk` container.
//!
//! ```text
//! "PQDK" | version u16 | section count u16
//! count × (tag [u8; 4] | offset u32 | length u32)
//! sections, in table order
//! CRC-32 u32 of every preceding byte
//! ```
//!
//! Sections: `TOPO` architecture, `MASK` packed keep-bits (optional),
//! `PAYL` one entry per parameter, `QPRM` activation grids (integer models
//! only), `HIST` stage history, `METR` metrics snapshot. All integers are
//! little-endian. Masked payloads store kept entries only, so a pruned
//! weight costs one bit. Encoding is canonical: decoding then re-encoding
//! reproduces the input bytes.

use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::nn::{Arch, Network};
use crate::pruning::{MaskBits, PruneMask};
use crate::quant::affine::QuantParams;
use crate::quant::int8::QuantTensor;
use crate::quant::IntNetwork;
use crate::tensor::DenseTensor;

pub const MAGIC: [u8; 4] = *b"PQDK";
pub const VERSION: u16 = 1;

const TAG_TOPO: [u8; 4] = *b"TOPO";
const TAG_MASK: [u8; 4] = *b"MASK";
const TAG_PAYL: [u8; 4] = *b"PAYL";
const TAG_QPRM: [u8; 4] = *b"QPRM";
const TAG_HIST: [u8; 4] = *b"HIST";
const TAG_METR: [u8; 4] = *b"METR";

const KIND_DENSE_F32: u8 = 0;
const KIND_MASKED_F32: u8 = 1;
const KIND_QUANT_DENSE: u8 = 2;
const KIND_QUANT_MASKED: u8 = 3;
const KIND_BIAS_I32: u8 = 4;

/// One completed stage: its label, per-epoch mean losses and the test
/// accuracy of the model it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub label: String,
    pub losses: Vec<f32>,
    pub accuracy_pct: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsSnapshot {
    pub accuracy_pct: f64,
    pub nonzeros: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// All parameters, `[w0, b0, w1, b1, ...]`.
    Float(Vec<DenseTensor>),
    Int8(IntNetwork),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: Arch,
    pub mask: Option<PruneMask>,
    pub payload: Payload,
    pub history: Vec<HistoryEntry>,
    pub metrics: MetricsSnapshot,
}

/// Section byte lengths by tag, in file order.
pub type SectionLayout = Vec<([u8; 4], usize)>;

impl Checkpoint {
    pub fn is_quantized(&self) -> bool {
        matches!(self.payload, Payload::Int8(_))
    }

    /// The FP32 view: the stored floats, or the dequantized integer model.
    pub fn float_network(&self) -> Result<Network> {
        match &self.payload {
            Payload::Float(v) => Network::from_values(self.arch, v.clone()),
            Payload::Int8(q) => q.to_float(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut sections: Vec<([u8; 4], Vec<u8>)> = vec![(TAG_TOPO, encode_arch(self.arch))];
        if let Some(m) = &self.mask {
            sections.push((TAG_MASK, encode_mask(m)));
        }
        sections.push((TAG_PAYL, self.encode_payload()?));
        if let Payload::Int8(q) = &self.payload {
            sections.push((TAG_QPRM, encode_qprm(q)));
        }
        sections.push((TAG_HIST, encode_history(&self.history)?));
        let mut metr = Vec::with_capacity(16);
        metr.extend(self.metrics.accuracy_pct.to_le_bytes());
        metr.extend(self.metrics.nonzeros.to_le_bytes());
        sections.push((TAG_METR, metr));

        let table_end = 8 + 12 * sections.len();
        let mut out =
            Vec::with_capacity(table_end + sections.iter().map(|s| s.1.len()).sum::<usize>() + 4);
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((sections.len() as u16).to_le_bytes());
        let mut offset = table_end;
        for (tag, body) in &sections {
            out.extend(tag);
            out.extend(u32_len(offset)?.to_le_bytes());
            out.extend(u32_len(body.len())?.to_le_bytes());
            offset += body.len();
        }
        for (_, body) in &sections {
            out.extend(body);
        }
        let crc = crc32fast::hash(&out);
        out.extend(crc.to_le_bytes());
        Ok(out)
    }

    fn encode_payload(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        let mask_layer = |site: usize| self.mask.as_ref().map(|m| &m.layers()[site]);
        match &self.payload {
            Payload::Float(values) => {
                w.extend(u32_len(values.len())?.to_le_bytes());
                for (i, v) in values.iter().enumerate() {
                    match (i % 2, mask_layer(i / 2)) {
                        (0, Some(bits)) => {
                            w.push(KIND_MASKED_F32);
                            put_shape(&mut w, v.shape())?;
                            check_len(bits.len(), v.len())?;
                            for (x, keep) in v.data().iter().zip(bits.iter()) {
                                if keep {
                                    w.extend(x.to_le_bytes());
                                }
                            }
                        }
                        _ => {
                            w.push(KIND_DENSE_F32);
                            put_shape(&mut w, v.shape())?;
                            v.data().iter().for_each(|x| w.extend(x.to_le_bytes()));
                        }
                    }
                }
            }
            Payload::Int8(q) => {
                let weights = q.weights();
                let biases = q.biases();
                w.extend(u32_len(2 * weights.len())?.to_le_bytes());
                for (site, (wt, b)) in weights.iter().zip(&biases).enumerate() {
                    let qp = wt.qparams();
                    match mask_layer(site) {
                        Some(bits) => {
                            w.push(KIND_QUANT_MASKED);
                            put_shape(&mut w, wt.shape())?;
                            put_qparams(&mut w, qp);
                            check_len(bits.len(), wt.len())?;
                            for (c, keep) in wt.data().iter().zip(bits.iter()) {
                                if keep {
                                    w.push(*c);
                                } else if *c != qp.zero_point_u8() {
                                    return Err(Error::Invariant(format!(
                                        "pruned weight in site {site} has code {c}, zero point is {}",
                                        qp.zero_point_u8()
                                    )));
                                }
                            }
                        }
                        None => {
                            w.push(KIND_QUANT_DENSE);
                            put_shape(&mut w, wt.shape())?;
                            put_qparams(&mut w, qp);
                            w.extend(wt.data());
                        }
                    }
                    w.push(KIND_BIAS_I32);
                    put_shape(&mut w, &[b.len()])?;
                    b.iter().for_each(|x| w.extend(x.to_le_bytes()));
                }
            }
        }
        Ok(w)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let sections = read_table(bytes)?;
        let find = |tag: [u8; 4]| sections.iter().find(|s| s.0 == tag).map(|s| s.1);
        let require = |tag: [u8; 4]| {
            find(tag).ok_or_else(|| malformed(format!("missing {} section", tag_name(tag))))
        };

        let arch = decode_arch(&mut Reader::new(require(TAG_TOPO)?))?;
        let shapes = arch.param_shapes();
        let mask = match find(TAG_MASK) {
            Some(body) => Some(decode_mask(&mut Reader::new(body), &shapes)?),
            None => None,
        };
        let mut r = Reader::new(require(TAG_PAYL)?);
        let count = r.u32()? as usize;
        if count != shapes.len() {
            return Err(malformed(format!(
                "{count} payload entries for {} parameters",
                shapes.len()
            )));
        }
        let mut floats = Vec::new();
        let mut qweights = Vec::new();
        let mut qbiases = Vec::new();
        for (i, shape) in shapes.iter().enumerate() {
            let kind = r.u8()?;
            let stored = r.shape()?;
            if &stored != shape {
                return Err(malformed(format!(
                    "parameter {i} has shape {stored:?}, topology says {shape:?}"
                )));
            }
            let numel: usize = shape.iter().product();
            let bits = if i % 2 == 0 {
                mask.as_ref().map(|m| &m.layers()[i / 2])
            } else {
                None
            };
            let expect = match (i % 2, bits.is_some(), find(TAG_QPRM).is_some()) {
                (0, false, false) | (1, _, false) => KIND_DENSE_F32,
                (0, true, false) => KIND_MASKED_F32,
                (0, false, true) => KIND_QUANT_DENSE,
                (0, true, true) => KIND_QUANT_MASKED,
                _ => KIND_BIAS_I32,
            };
            if kind != expect {
                return Err(malformed(format!(
                    "parameter {i} has payload kind {kind}, expected {expect}"
                )));
            }
            match kind {
                KIND_DENSE_F32 => {
                    let data = (0..numel).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
                    floats.push(DenseTensor::new(shape.clone(), data)?);
                }
                KIND_MASKED_F32 => {
                    let bits = bits.expect("kind implies mask");
                    let mut data = vec![0.0f32; numel];
                    for (j, keep) in bits.iter().enumerate() {
                        if keep {
                            data[j] = r.f32()?;
                        }
                    }
                    floats.push(DenseTensor::new(shape.clone(), data)?);
                }
                KIND_QUANT_DENSE | KIND_QUANT_MASKED => {
                    let qp = r.qparams()?;
                    let codes = match bits {
                        Some(bits) => {
                            let mut codes = vec![qp.zero_point_u8(); numel];
                            for (j, keep) in bits.iter().enumerate() {
                                if keep {
                                    codes[j] = r.u8()?;
                                }
                            }
                            codes
                        }
                        None => r.bytes(numel)?.to_vec(),
                    };
                    qweights.push(QuantTensor::new(shape.clone(), codes, qp)?);
                }
                _ => {
                    let data = (0..numel).map(|_| r.i32()).collect::<Result<Vec<_>>>()?;
                    qbiases.push(data);
                }
            }
        }
        r.finish("PAYL")?;

        let payload = match find(TAG_QPRM) {
            Some(body) => {
                let mut r = Reader::new(body);
                let input = r.qparams()?;
                let n = r.u32()? as usize;
                if n != arch.num_sites() {
                    return Err(malformed(format!(
                        "{n} activation grids for {} sites",
                        arch.num_sites()
                    )));
                }
                let acts = (0..n).map(|_| r.qparams()).collect::<Result<Vec<_>>>()?;
                r.finish("QPRM")?;
                Payload::Int8(IntNetwork::from_parts(
                    arch, input, qweights, qbiases, &acts,
                )?)
            }
            None => Payload::Float(floats),
        };
        let history = decode_history(&mut Reader::new(require(TAG_HIST)?))?;
        let mut r = Reader::new(require(TAG_METR)?);
        let metrics = MetricsSnapshot {
            accuracy_pct: r.f64()?,
            nonzeros: r.u64()?,
        };
        r.finish("METR")?;
        let ckpt = Self {
            arch,
            mask,
            payload,
            history,
            metrics,
        };
        if ckpt.encode()? != bytes {
            return Err(malformed("encoding is not canonical"));
        }
        Ok(ckpt)
    }

    /// Byte length of each section, for structural comparisons.
    pub fn section_layout(bytes: &[u8]) -> Result<SectionLayout> {
        Ok(read_table(bytes)?
            .into_iter()
            .map(|(t, b)| (t, b.len()))
            .collect())
    }
}

/// Nonzero weights: values `≠ 0` in a float payload, codes `≠` the zero
/// point in an integer one. Biases are not counted.
pub fn count_nonzero(ckpt: &Checkpoint) -> u64 {
    match &ckpt.payload {
        Payload::Float(v) => v
            .iter()
            .step_by(2)
            .map(|w| w.data().iter().filter(|&&x| x != 0.0).count() as u64)
            .sum(),
        Payload::Int8(q) => q.weights().iter().map(|w| w.count_nonzero() as u64).sum(),
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<u64> {
    let bytes = ckpt.encode()?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::Checkpoint(CheckpointError::Malformed(msg.into()))
}

fn tag_name(tag: [u8; 4]) -> String {
    String::from_utf8_lossy(&tag).into_owned()
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n)
        .map_err(|_| Error::config(format!("{n} does not fit the 32-bit checkpoint fields")))
}

fn check_len(bits: usize, values: usize) -> Result<()> {
    if bits != values {
        return Err(Error::shape(
            "checkpoint",
            format!("{bits} mask bits for {values} weights"),
        ));
    }
    Ok(())
}

fn put_shape(w: &mut Vec<u8>, shape: &[usize]) -> Result<()> {
    w.push(shape.len() as u8);
    for &d in shape {
        w.extend(u32_len(d)?.to_le_bytes());
    }
    Ok(())
}

fn put_qparams(w: &mut Vec<u8>, qp: QuantParams) {
    w.extend(qp.scale().to_le_bytes());
    w.push(qp.zero_point_u8());
}

fn read_table(bytes: &[u8]) -> Result<Vec<([u8; 4], &[u8])>> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated {
            offset: 0,
            needed: 4,
            available: bytes.len(),
        }
        .into());
    }
    if bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: bytes[..4].try_into().expect("4 bytes"),
        }
        .into());
    }
    let mut r = Reader::new(bytes);
    r.bytes(4)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let count = r.u16()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let tag: [u8; 4] = r.bytes(4)?.try_into().expect("4 bytes");
        let offset = r.u32()? as usize;
        let len = r.u32()? as usize;
        entries.push((tag, offset, len));
    }
    let mut expected = r.pos;
    for &(tag, offset, len) in &entries {
        if offset != expected {
            return Err(malformed(format!(
                "section {} at offset {offset}, expected {expected}",
                tag_name(tag)
            )));
        }
        expected = offset + len;
    }
    if bytes.len() < expected + 4 {
        return Err(CheckpointError::Truncated {
            offset: expected,
            needed: 4,
            available: bytes.len().saturating_sub(expected),
        }
        .into());
    }
    if bytes.len() > expected + 4 {
        return Err(malformed(format!(
            "{} trailing bytes",
            bytes.len() - expected - 4
        )));
    }
    let stored = u32::from_le_bytes(bytes[expected..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..expected]);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed }.into());
    }
    Ok(entries
        .into_iter()
        .map(|(tag, offset, len)| (tag, &bytes[offset..offset + len]))
        .collect())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.buf.len() - self.pos,
            }
            .into());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.u8()? as usize;
        (0..rank).map(|_| Ok(self.u32()? as usize)).collect()
    }

    fn qparams(&mut self) -> Result<QuantParams> {
        let scale = self.f32()?;
        let zp = self.u8()?;
        QuantParams::new(scale, zp as i32)
            .map_err(|e| malformed(format!("bad quantization grid: {e}")))
    }

    fn finish(&self, section: &str) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(malformed(format!(
                "{} unread bytes in {section}",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn encode_arch(arch: Arch) -> Vec<u8> {
    let (kind, dims) = match arch {
        Arch::Mlp {
            inputs,
            hidden,
            classes,
        } => (0u8, [inputs, hidden, classes, 0]),
        Arch::SmallConv {
            channels,
            height,
            width,
            classes,
        } => (1u8, [channels, height, width, classes]),
    };
    let mut w = vec![kind];
    let n = if kind == 0 { 3 } else { 4 };
    for d in &dims[..n] {
        w.extend((*d as u32).to_le_bytes());
    }
    w
}

fn decode_arch(r: &mut Reader<'_>) -> Result<Arch> {
    let kind = r.u8()?;
    let arch = match kind {
        0 => Arch::Mlp {
            inputs: r.u32()? as usize,
            hidden: r.u32()? as usize,
            classes: r.u32()? as usize,
        },
        1 => Arch::SmallConv {
            channels: r.u32()? as usize,
            height: r.u32()? as usize,
            width: r.u32()? as usize,
            classes: r.u32()? as usize,
        },
        other => return Err(malformed(format!("unknown architecture kind {other}"))),
    };
    r.finish("TOPO")?;
    arch.validate()
        .map_err(|e| malformed(format!("bad topology: {e}")))?;
    Ok(arch)
}

fn encode_mask(m: &PruneMask) -> Vec<u8> {
    let mut w = Vec::new();
    w.extend(m.rho().to_le_bytes());
    w.extend(m.gamma().to_le_bytes());
    w.extend((m.layers().len() as u32).to_le_bytes());
    for l in m.layers() {
        w.extend((l.len() as u32).to_le_bytes());
        w.extend(l.as_bytes());
    }
    w
}

fn decode_mask(r: &mut Reader<'_>, shapes: &[Vec<usize>]) -> Result<PruneMask> {
    let rho = r.f64()?;
    let gamma = r.f32()?;
    let n = r.u32()? as usize;
    if n * 2 != shapes.len() {
        return Err(malformed(format!(
            "{n} mask layers for {} sites",
            shapes.len() / 2
        )));
    }
    let mut layers = Vec::with_capacity(n);
    for site in 0..n {
        let len = r.u32()? as usize;
        let numel: usize = shapes[2 * site].iter().product();
        if len != numel {
            return Err(malformed(format!(
                "mask layer {site} has {len} bits for {numel} weights"
            )));
        }
        let bytes = r.bytes(len.div_ceil(8))?.to_vec();
        layers.push(MaskBits::from_bytes(len, bytes).map_err(|e| malformed(e.to_string()))?);
    }
    r.finish("MASK")?;
    PruneMask::new(layers, rho, gamma).map_err(|e| malformed(e.to_string()))
}

fn encode_qprm(q: &IntNetwork) -> Vec<u8> {
    let mut w = Vec::new();
    put_qparams(&mut w, q.input_qparams());
    let acts = q.activation_qparams();
    w.extend((acts.len() as u32).to_le_bytes());
    for qp in acts {
        put_qparams(&mut w, qp);
    }
    w
}

fn encode_history(history: &[HistoryEntry]) -> Result<Vec<u8>> {
    let mut w = Vec::new();
    w.extend(u32_len(history.len())?.to_le_bytes());
    for h in history {
        let label = h.label.as_bytes();
        let len =
            u16::try_from(label.len()).map_err(|_| Error::config("history label too long"))?;
        w.extend(len.to_le_bytes());
        w.extend(label);
        w.extend(u32_len(h.losses.len())?.to_le_bytes());
        h.losses.iter().for_each(|l| w.extend(l.to_le_bytes()));
        w.extend(h.accuracy_pct.to_le_bytes());
    }
    Ok(w)
}

fn decode_history(r: &mut Reader<'_>) -> Result<Vec<HistoryEntry>> {
    let n = r.u32()? as usize;
    let mut out = Vec::new();
    for _ in 0..n {
        let len = r.u16()? as usize;
        let label = String::from_utf8(r.bytes(len)?.to_vec())
            .map_err(|_| malformed("history label is not utf-8"))?;
        let epochs = r.u32()? as usize;
        let losses = (0..epochs).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        out.push(HistoryEntry {
            label,
            losses,
            accuracy_pct: r.f64()?,
        });
    }
    r.finish("HIST")?;
    Ok(out)
}
