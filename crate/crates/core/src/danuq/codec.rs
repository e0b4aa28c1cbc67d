use rand::Rng;

use super::QuantLevels;
use crate::error::{Error, Result};

/// `layer_id: u16 | bits: u8 | count: u32 | scale: f32`, little-endian.
pub const WIRE_HEADER_BYTES: usize = 11;

/// Quantization codes for one layer, packed least-significant-bit first.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    pub layer_id: usize,
    pub bits: u8,
    pub count: usize,
    pub codes: Vec<u8>,
    /// Scale the values were divided by before encoding. Travels as `f32`.
    pub scale_used: f64,
}

/// Packs `codes` at `bits` bits each; the tail of the last byte is zero.
pub fn pack_codes(codes: &[u8], bits: u8) -> Vec<u8> {
    let bits = bits as usize;
    let mut out = vec![0u8; (codes.len() * bits).div_ceil(8)];
    for (i, &code) in codes.iter().enumerate() {
        let base = i * bits;
        for j in 0..bits {
            if (code >> j) & 1 == 1 {
                let p = base + j;
                out[p / 8] |= 1 << (p % 8);
            }
        }
    }
    out
}

pub fn unpack_codes(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<u8>> {
    let bits = bits as usize;
    let needed = (count * bits).div_ceil(8);
    if bytes.len() < needed {
        return Err(Error::Decoding(format!(
            "{count} codes of {bits} bits need {needed} bytes, have {}",
            bytes.len()
        )));
    }
    Ok((0..count)
        .map(|i| {
            let base = i * bits;
            (0..bits).fold(0u8, |acc, j| {
                let p = base + j;
                acc | (((bytes[p / 8] >> (p % 8)) & 1) << j)
            })
        })
        .collect())
}

impl QuantizedBlock {
    pub fn payload_bytes(&self) -> usize {
        (self.count * self.bits as usize).div_ceil(8)
    }

    pub fn wire_len(&self) -> usize {
        WIRE_HEADER_BYTES + self.payload_bytes()
    }

    pub fn decode_codes(&self) -> Result<Vec<u8>> {
        unpack_codes(&self.codes, self.bits, self.count)
    }

    pub fn write_to(&self, out: &mut Vec<u8>) -> Result<()> {
        let layer_id = u16::try_from(self.layer_id)
            .map_err(|_| Error::arg(format!("layer id {} exceeds u16", self.layer_id)))?;
        let count = u32::try_from(self.count)
            .map_err(|_| Error::arg(format!("count {} exceeds u32", self.count)))?;
        if self.codes.len() != self.payload_bytes() {
            return Err(Error::Decoding(format!(
                "block holds {} code bytes, expected {}",
                self.codes.len(),
                self.payload_bytes()
            )));
        }
        out.extend_from_slice(&layer_id.to_le_bytes());
        out.push(self.bits);
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&(self.scale_used as f32).to_le_bytes());
        out.extend_from_slice(&self.codes);
        Ok(())
    }

    /// Parses one block from the front of `bytes`, returning it with the
    /// number of bytes consumed. The scale comes back rounded to `f32`.
    pub fn read_from(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < WIRE_HEADER_BYTES {
            return Err(Error::Decoding(format!(
                "header needs {WIRE_HEADER_BYTES} bytes, have {}",
                bytes.len()
            )));
        }
        let layer_id = u16::from_le_bytes([bytes[0], bytes[1]]) as usize;
        let bits = bytes[2];
        let count = u32::from_le_bytes(bytes[3..7].try_into().unwrap()) as usize;
        let scale_used = f32::from_le_bytes(bytes[7..11].try_into().unwrap()) as f64;
        if bits > 8 {
            return Err(Error::Decoding(format!("bit-width {bits} out of range")));
        }
        let payload = (count * bits as usize).div_ceil(8);
        let end = WIRE_HEADER_BYTES + payload;
        if bytes.len() < end {
            return Err(Error::Decoding(format!(
                "block declares {payload} payload bytes, only {} present",
                bytes.len() - WIRE_HEADER_BYTES
            )));
        }
        Ok((
            QuantizedBlock {
                layer_id,
                bits,
                count,
                codes: bytes[WIRE_HEADER_BYTES..end].to_vec(),
                scale_used,
            },
            end,
        ))
    }
}

fn check_scale(scale: f64) -> Result<()> {
    if scale > 0.0 && scale.is_finite() {
        Ok(())
    } else {
        Err(Error::arg(format!("quantization scale must be positive, got {scale}")))
    }
}

/// Maps each `v / scale` to the level whose half-open cell contains it.
/// The returned block has `layer_id` 0; callers label it.
pub fn quantize(values: &[f64], scale: f64, levels: &QuantLevels) -> Result<QuantizedBlock> {
    check_scale(scale)?;
    let mut codes = Vec::with_capacity(values.len());
    for (position, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Encoding { position });
        }
        codes.push(levels.index_of(v / scale) as u8);
    }
    Ok(QuantizedBlock {
        layer_id: 0,
        bits: levels.bits(),
        count: values.len(),
        codes: pack_codes(&codes, levels.bits()),
        scale_used: scale,
    })
}

/// Reconstructs `levels[code] * scale` for every code in the block.
pub fn dequantize(block: &QuantizedBlock, scale: f64, levels: &QuantLevels) -> Result<Vec<f64>> {
    if block.bits != levels.bits() {
        return Err(Error::arg(format!(
            "block has {}-bit codes, table is {}-bit",
            block.bits,
            levels.bits()
        )));
    }
    if !scale.is_finite() {
        return Err(Error::arg(format!("dequantization scale {scale} is not finite")));
    }
    let table = levels.levels();
    Ok(block
        .decode_codes()?
        .into_iter()
        .map(|c| table[c as usize] * scale)
        .collect())
}

/// Absmax uniform quantization with stochastic rounding.
///
/// Values are divided by `max |v|` into `[-1, 1]` and rounded to one of the
/// two neighbouring points of [`QuantLevels::uniform`] with probability
/// proportional to proximity, so the reconstruction is unbiased. An all-zero
/// input is encoded with scale 1 onto the smallest positive level and
/// reports a scale of 0, which reconstructs to zeros.
pub fn uniform_quantize_absmax<R: Rng + ?Sized>(
    values: &[f64],
    bits: u8,
    rng: &mut R,
) -> Result<(QuantizedBlock, f64)> {
    if !super::SUPPORTED_BITS.contains(&bits) {
        return Err(Error::config(format!("unsupported bit-width {bits}")));
    }
    if values.is_empty() {
        return Err(Error::arg("cannot quantize an empty tensor"));
    }
    if let Some(position) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Encoding { position });
    }
    let absmax = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let top = (1usize << bits) - 1;
    let codes: Vec<u8> = if absmax == 0.0 {
        vec![(top / 2 + 1) as u8; values.len()]
    } else {
        values
            .iter()
            .map(|&v| {
                let pos = ((v / absmax + 1.0) * 0.5 * top as f64).clamp(0.0, top as f64);
                let lo = (pos.floor() as usize).min(top);
                let frac = pos - lo as f64;
                let up = frac > 0.0 && rng.random::<f64>() < frac;
                (lo + up as usize) as u8
            })
            .collect()
    };
    let block = QuantizedBlock {
        layer_id: 0,
        bits,
        count: values.len(),
        codes: pack_codes(&codes, bits),
        scale_used: absmax,
    };
    Ok((block, absmax))
}
