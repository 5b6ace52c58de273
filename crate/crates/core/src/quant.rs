//! Block-wise 8-bit and 4-bit quantization of frozen weights.
//!
//! A tensor is split into contiguous blocks of `block_size` elements (row-major
//! order, last block may be short). Each block stores one absmax scale and one
//! code per element; codes index a [`Codebook`] of levels in `[-1, 1]`.
//!
//! Codes are packed little-endian within bytes: element `i` occupies bits
//! `[i * bits, (i + 1) * bits)` of the stream.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::numerics::{bf16, Tensor};

pub const DEFAULT_BLOCK_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookId {
    IntAbsmax,
    Nf4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u8,
    pub block_size: usize,
    pub codebook: CodebookId,
}

impl QuantConfig {
    pub fn new(bits: u8, block_size: usize, codebook: CodebookId) -> Result<Self> {
        let ok = matches!((bits, codebook), (8, CodebookId::IntAbsmax) | (4, _));
        if !ok {
            return Err(Error::Config(format!(
                "unsupported quantization: {bits}-bit with {codebook:?} codebook"
            )));
        }
        if block_size == 0 {
            return Err(Error::Config("block size must be positive".into()));
        }
        Ok(Self {
            bits,
            block_size,
            codebook,
        })
    }

    pub fn int8() -> Self {
        Self {
            bits: 8,
            block_size: DEFAULT_BLOCK_SIZE,
            codebook: CodebookId::IntAbsmax,
        }
    }

    pub fn int4() -> Self {
        Self {
            bits: 4,
            block_size: DEFAULT_BLOCK_SIZE,
            codebook: CodebookId::IntAbsmax,
        }
    }

    pub fn nf4() -> Self {
        Self {
            bits: 4,
            block_size: DEFAULT_BLOCK_SIZE,
            codebook: CodebookId::Nf4,
        }
    }

    pub fn codebook(&self) -> &'static Codebook {
        Codebook::get(self.codebook, self.bits)
    }
}

/// Sorted representative values in `[-1, 1]` plus the mapping between levels
/// and raw `bits`-wide code patterns.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    id: CodebookId,
    bits: u8,
    levels: Vec<f64>,
}

impl Codebook {
    /// Symmetric integer grid `{-q, …, q} / q` with `q = 2^(bits-1) - 1`.
    /// The most negative two's-complement pattern is unused.
    pub fn int_absmax(bits: u8) -> Self {
        let q = qmax(bits);
        let levels = (-q..=q).map(|c| c as f64 / q as f64).collect();
        Self {
            id: CodebookId::IntAbsmax,
            bits,
            levels,
        }
    }

    /// 16-level NormalFloat codebook: standard-normal quantiles with an exact
    /// zero, 8 positive and 7 negative levels, normalized to `[-1, 1]`.
    pub fn nf4() -> Self {
        const OFFSET: f64 = 0.967_708_333_333_333_3; // (1 - 1/(2*15) + 1 - 1/(2*16)) / 2
        let normal = Normal::standard();
        let linspace = |lo: f64, hi: f64, n: usize| -> Vec<f64> {
            (0..n)
                .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                .collect()
        };
        let mut levels: Vec<f64> = Vec::with_capacity(16);
        for p in &linspace(OFFSET, 0.5, 9)[..8] {
            levels.push(normal.inverse_cdf(*p));
        }
        levels.push(0.0);
        for p in &linspace(OFFSET, 0.5, 8)[..7] {
            levels.push(-normal.inverse_cdf(*p));
        }
        levels.sort_by(f64::total_cmp);
        let max = levels.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        for l in &mut levels {
            *l /= max;
        }
        // pin the endpoints against ppf round-off
        levels[0] = -1.0;
        levels[15] = 1.0;
        Self {
            id: CodebookId::Nf4,
            bits: 4,
            levels,
        }
    }

    pub(crate) fn get(id: CodebookId, bits: u8) -> &'static Codebook {
        static INT8: OnceLock<Codebook> = OnceLock::new();
        static INT4: OnceLock<Codebook> = OnceLock::new();
        static NF4: OnceLock<Codebook> = OnceLock::new();
        match (id, bits) {
            (CodebookId::Nf4, _) => NF4.get_or_init(Codebook::nf4),
            (CodebookId::IntAbsmax, 8) => INT8.get_or_init(|| Codebook::int_absmax(8)),
            _ => INT4.get_or_init(|| Codebook::int_absmax(4)),
        }
    }

    pub fn id(&self) -> CodebookId {
        self.id
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Raw code of the exact-zero level.
    pub fn zero_code(&self) -> u8 {
        match self.id {
            CodebookId::IntAbsmax => 0,
            CodebookId::Nf4 => self.levels.iter().position(|&l| l == 0.0).unwrap() as u8,
        }
    }

    /// Raw code for a value already normalized by its block scale.
    ///
    /// Integer grids round half away from zero; the NF4 grid picks the
    /// nearest level with ties going to the smaller magnitude.
    pub fn encode(&self, x: f64) -> u8 {
        match self.id {
            CodebookId::IntAbsmax => {
                let q = qmax(self.bits) as f64;
                let c = (x * q).round().clamp(-q, q) as i32;
                (c as u8) & mask(self.bits)
            }
            CodebookId::Nf4 => {
                let idx = self.levels.partition_point(|&l| l < x);
                if idx == 0 {
                    return 0;
                }
                if idx == self.levels.len() {
                    return (idx - 1) as u8;
                }
                let (lo, hi) = (self.levels[idx - 1], self.levels[idx]);
                let (dlo, dhi) = (x - lo, hi - x);
                let pick_hi = dhi < dlo || (dhi == dlo && hi.abs() < lo.abs());
                (if pick_hi { idx } else { idx - 1 }) as u8
            }
        }
    }

    /// Level for a raw code; `None` for patterns outside the codebook.
    pub fn decode(&self, raw: u8) -> Option<f64> {
        match self.id {
            CodebookId::IntAbsmax => {
                let c = signed_code(raw, self.bits);
                let q = qmax(self.bits);
                (c.abs() <= q).then(|| c as f64 / q as f64)
            }
            CodebookId::Nf4 => self.levels.get(raw as usize).copied(),
        }
    }
}

/// The NF4 codebook.
pub fn nf4_codebook() -> Codebook {
    Codebook::nf4()
}

fn qmax(bits: u8) -> i32 {
    (1 << (bits - 1)) - 1
}

fn mask(bits: u8) -> u8 {
    if bits == 8 {
        0xff
    } else {
        (1u8 << bits) - 1
    }
}

fn signed_code(raw: u8, bits: u8) -> i32 {
    let shift = 8 - bits as u32;
    (((raw << shift) as i8) >> shift) as i32
}

/// Packs `bits`-wide codes into a little-endian bitstream.
pub fn pack(codes: &[u8], bits: u8) -> Vec<u8> {
    let b = bits as usize;
    let mut out = vec![0u8; (codes.len() * b).div_ceil(8)];
    let m = mask(bits);
    for (i, &c) in codes.iter().enumerate() {
        let bit = i * b;
        let v = ((c & m) as u16) << (bit % 8);
        out[bit / 8] |= v as u8;
        if bit % 8 + b > 8 {
            out[bit / 8 + 1] |= (v >> 8) as u8;
        }
    }
    out
}

/// Inverse of [`pack`] for `n` codes.
pub fn unpack(bytes: &[u8], bits: u8, n: usize) -> Result<Vec<u8>> {
    let b = bits as usize;
    let need = (n * b).div_ceil(8);
    if bytes.len() != need {
        return Err(Error::format(
            bytes.len().min(need),
            format!("code stream holds {} bytes, expected {need}", bytes.len()),
        ));
    }
    let m = mask(bits);
    Ok((0..n)
        .map(|i| {
            let bit = i * b;
            let mut v = bytes[bit / 8] as u16;
            if bit % 8 + b > 8 {
                v |= (bytes[bit / 8 + 1] as u16) << 8;
            }
            ((v >> (bit % 8)) as u8) & m
        })
        .collect())
}

/// A frozen weight at rest: packed codes, per-block scales and the config
/// needed to reconstruct it.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    codes: Vec<u8>,
    scales: Vec<f32>,
    config: QuantConfig,
}

impl QuantizedTensor {
    /// Reassembles a tensor from stored parts, checking stream lengths.
    pub fn from_parts(
        shape: Vec<usize>,
        codes: Vec<u8>,
        scales: Vec<f32>,
        config: QuantConfig,
    ) -> Result<Self> {
        let numel: usize = shape.iter().product();
        let want_codes = (numel * config.bits as usize).div_ceil(8);
        if codes.len() != want_codes {
            return Err(Error::format(
                codes.len().min(want_codes),
                format!(
                    "code stream holds {} bytes, expected {want_codes}",
                    codes.len()
                ),
            ));
        }
        let want_scales = numel.div_ceil(config.block_size);
        if scales.len() != want_scales {
            return Err(Error::format(
                want_codes,
                format!("{} scales stored, expected {want_scales}", scales.len()),
            ));
        }
        if let Some(i) = scales.iter().position(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::format(
                want_codes + 4 * i,
                "scale is negative or non-finite",
            ));
        }
        Ok(Self {
            shape,
            codes,
            scales,
            config,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn config(&self) -> QuantConfig {
        self.config
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    /// Raw per-element code patterns.
    pub fn raw_codes(&self) -> Result<Vec<u8>> {
        unpack(&self.codes, self.config.bits, self.numel())
    }

    /// Codes as signed integers for integer grids, or level indices for NF4.
    pub fn codes(&self) -> Result<Vec<i32>> {
        let raw = self.raw_codes()?;
        Ok(match self.config.codebook {
            CodebookId::IntAbsmax => raw
                .iter()
                .map(|&r| signed_code(r, self.config.bits))
                .collect(),
            CodebookId::Nf4 => raw.iter().map(|&r| r as i32).collect(),
        })
    }

    pub fn packed_bytes(&self) -> usize {
        packed_bytes(self)
    }
}

/// Quantizes `t` block-wise. Scales are absmax values snapped to the BF16
/// grid, so that quantizing a dequantized tensor reproduces it exactly.
pub fn quantize(t: &Tensor, cfg: QuantConfig) -> Result<QuantizedTensor> {
    if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!(
            "cannot quantize non-finite value at index {i}"
        )));
    }
    let book = cfg.codebook();
    let mut raw = Vec::with_capacity(t.numel());
    let mut scales = Vec::with_capacity(t.numel().div_ceil(cfg.block_size));
    for block in t.data().chunks(cfg.block_size) {
        let absmax = block.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        if absmax == 0.0 {
            scales.push(0.0);
            raw.extend(std::iter::repeat_n(book.zero_code(), block.len()));
            continue;
        }
        let mut scale = bf16::round(absmax);
        if scale == 0.0 {
            scale = bf16::ulp(0.0);
        }
        scales.push(scale as f32);
        raw.extend(block.iter().map(|&v| book.encode(v / scale)));
    }
    QuantizedTensor::from_parts(t.shape().to_vec(), pack(&raw, cfg.bits), scales, cfg)
}

/// Reconstructs `scale · level` per element, rounded to BF16.
pub fn dequantize(q: &QuantizedTensor) -> Result<Tensor> {
    let raw = q.raw_codes()?;
    let book = q.config.codebook();
    let mut data = Vec::with_capacity(raw.len());
    for (b, (chunk, &scale)) in raw.chunks(q.config.block_size).zip(&q.scales).enumerate() {
        for (j, &r) in chunk.iter().enumerate() {
            let level = book.decode(r).ok_or_else(|| {
                let i = b * q.config.block_size + j;
                Error::format(
                    i * q.config.bits as usize / 8,
                    format!("code {r:#x} is not in the codebook"),
                )
            })?;
            data.push(scale as f64 * level);
        }
    }
    Ok(Tensor::new(q.shape.clone(), data)?.round_bf16())
}

/// Bytes at rest: packed codes plus four bytes per block scale.
pub fn packed_bytes(q: &QuantizedTensor) -> usize {
    q.codes.len() + 4 * q.scales.len()
}

/// Bytes at rest for `numel` elements under `cfg`, without quantizing.
pub fn packed_bytes_for(numel: usize, cfg: QuantConfig) -> usize {
    (numel * cfg.bits as usize).div_ceil(8) + 4 * numel.div_ceil(cfg.block_size)
}
