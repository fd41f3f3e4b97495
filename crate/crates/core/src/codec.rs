//! Wire codec for sparse quantized gradient messages.
//!
//! A message is `dim | scale | indicator bitmap | packed codes`:
//!
//! * 4-byte little-endian `u32` dimension (framing, not counted as payload),
//! * 4-byte little-endian IEEE-754 scale,
//! * `ceil(dim/8)` bitmap bytes — coordinate `d` maps to bit `d % 8` of byte
//!   `d / 8`, LSB-first; pad bits in the final byte are zero,
//! * `ceil(2k/8)` code bytes — one 2-bit entry per selected coordinate in
//!   ascending coordinate order, packed LSB-first; `00` = zero, `01` = +1,
//!   `10` = -1, `11` is invalid; pad bits are zero.
//!
//! The payload therefore costs exactly `32 + dim + 2k` bits, with `k` the
//! number of selected coordinates. The same byte stream doubles as the
//! on-disk dump format for message traces.

use crate::quantize::TernaryGradient;
use crate::{Error, Result};

/// Per-coordinate selection bitmap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndicatorBitmap {
    dim: usize,
    bits: Vec<u8>,
}

impl IndicatorBitmap {
    /// All-zero bitmap.
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            bits: vec![0u8; dim.div_ceil(8)],
        }
    }

    /// All-ones bitmap (pad bits in the last byte stay zero).
    pub fn ones(dim: usize) -> Self {
        let mut b = Self::zeros(dim);
        for i in 0..dim {
            b.set(i, true);
        }
        b
    }

    /// Builds a bitmap from a per-coordinate predicate.
    pub fn from_fn<F: FnMut(usize) -> bool>(dim: usize, mut f: F) -> Self {
        let mut b = Self::zeros(dim);
        for i in 0..dim {
            if f(i) {
                b.set(i, true);
            }
        }
        b
    }

    fn from_bytes(dim: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != dim.div_ceil(8) {
            return Err(Error::TruncatedMessage);
        }
        // Trailing pad bits must be zero.
        if !dim.is_multiple_of(8) {
            let mask = !((1u16 << (dim % 8)) - 1) as u8;
            if bytes.last().is_some_and(|&b| b & mask != 0) {
                return Err(Error::CorruptCode);
            }
        }
        Ok(Self {
            dim,
            bits: bytes.to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i / 8] >> (i % 8) & 1 == 1
    }

    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.dim, "coordinate {i} out of range {}", self.dim);
        if value {
            self.bits[i / 8] |= 1 << (i % 8);
        } else {
            self.bits[i / 8] &= !(1 << (i % 8));
        }
    }

    /// Number of selected coordinates.
    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn is_all_ones(&self) -> bool {
        self.count_ones() == self.dim
    }

    /// Ascending indices of selected coordinates.
    pub fn selected(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.dim).filter(|&i| self.get(i))
    }

    /// Coordinate-wise OR (the synchronous indicator across workers).
    pub fn or(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| a | b)
            .collect();
        Ok(Self {
            dim: self.dim,
            bits,
        })
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }
}

/// OR of two indicators; free-function form of [`IndicatorBitmap::or`].
pub fn indicator_or(a: &IndicatorBitmap, b: &IndicatorBitmap) -> Result<IndicatorBitmap> {
    a.or(b)
}

const CODE_ZERO: u8 = 0b00;
const CODE_PLUS: u8 = 0b01;
const CODE_MINUS: u8 = 0b10;

/// A wire-level sparse quantized gradient: scale, selection bitmap, and one
/// 2-bit code per selected coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMessage {
    scale: f32,
    indicator: IndicatorBitmap,
    packed_codes: Vec<u8>,
}

impl GradientMessage {
    pub fn dim(&self) -> usize {
        self.indicator.dim
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn indicator(&self) -> &IndicatorBitmap {
        &self.indicator
    }

    /// Payload cost in bits: `32 + dim + 2k`. Framing (the dimension word)
    /// and byte-alignment padding are excluded; this matches the meaningful
    /// serialized bit count exactly.
    pub fn payload_bits(&self) -> u64 {
        32 + self.indicator.dim as u64 + 2 * self.indicator.count_ones() as u64
    }

    /// Serializes to the wire byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.indicator.bits.len() + self.packed_codes.len());
        out.extend_from_slice(&(self.indicator.dim as u32).to_le_bytes());
        out.extend_from_slice(&self.scale.to_le_bytes());
        out.extend_from_slice(&self.indicator.bits);
        out.extend_from_slice(&self.packed_codes);
        out
    }

    /// Parses and validates the wire byte layout.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::TruncatedMessage);
        }
        let dim = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let scale = f32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if !scale.is_finite() || scale < 0.0 {
            return Err(Error::InvalidScale(f64::from(scale)));
        }
        let bitmap_len = dim.div_ceil(8);
        if bytes.len() < 8 + bitmap_len {
            return Err(Error::TruncatedMessage);
        }
        let indicator = IndicatorBitmap::from_bytes(dim, &bytes[8..8 + bitmap_len])?;
        let k = indicator.count_ones();
        let code_len = (2 * k).div_ceil(8);
        if bytes.len() != 8 + bitmap_len + code_len {
            return Err(Error::TruncatedMessage);
        }
        let packed_codes = bytes[8 + bitmap_len..].to_vec();
        // Every entry must be a valid code and pad bits must be zero.
        for j in 0..k {
            if read_code(&packed_codes, j) == 0b11 {
                return Err(Error::CorruptCode);
            }
        }
        if !(2 * k).is_multiple_of(8) {
            let mask = !((1u16 << (2 * k % 8)) - 1) as u8;
            if packed_codes.last().is_some_and(|&b| b & mask != 0) {
                return Err(Error::CorruptCode);
            }
        }
        Ok(Self {
            scale,
            indicator,
            packed_codes,
        })
    }
}

fn read_code(packed: &[u8], j: usize) -> u8 {
    packed[j / 4] >> (2 * (j % 4)) & 0b11
}

fn write_code(packed: &mut [u8], j: usize, code: u8) {
    packed[j / 4] |= (code & 0b11) << (2 * (j % 4));
}

/// Payload cost in bits; free-function form of
/// [`GradientMessage::payload_bits`].
pub fn payload_bits(msg: &GradientMessage) -> u64 {
    msg.payload_bits()
}

/// Packs the selected coordinates of a ternary gradient into a message.
///
/// Codes at unselected coordinates are dropped; selected-but-zero codes are
/// kept (the indicator is parameter-driven, not gradient-driven). The scale
/// is narrowed to 32-bit for the wire.
pub fn encode(q: &TernaryGradient, indicator: &IndicatorBitmap) -> Result<GradientMessage> {
    if q.dim() != indicator.dim {
        return Err(Error::DimMismatch {
            expected: q.dim(),
            got: indicator.dim,
        });
    }
    let scale = q.scale() as f32;
    if !scale.is_finite() {
        return Err(Error::InvalidScale(q.scale()));
    }
    let k = indicator.count_ones();
    let mut packed_codes = vec![0u8; (2 * k).div_ceil(8)];
    for (j, coord) in indicator.selected().enumerate() {
        let code = match q.codes()[coord] {
            0 => CODE_ZERO,
            1 => CODE_PLUS,
            -1 => CODE_MINUS,
            _ => return Err(Error::CorruptCode),
        };
        write_code(&mut packed_codes, j, code);
    }
    Ok(GradientMessage {
        scale,
        indicator: indicator.clone(),
        packed_codes,
    })
}

/// Expands a message back to a dense ternary gradient, zero at unselected
/// coordinates.
pub fn decode(msg: &GradientMessage) -> Result<TernaryGradient> {
    let mut codes = vec![0i8; msg.dim()];
    let mut any_nonzero = false;
    for (j, coord) in msg.indicator.selected().enumerate() {
        codes[coord] = match read_code(&msg.packed_codes, j) {
            CODE_ZERO => 0,
            CODE_PLUS => 1,
            CODE_MINUS => -1,
            _ => return Err(Error::CorruptCode),
        };
        any_nonzero |= codes[coord] != 0;
    }
    let scale = f64::from(msg.scale);
    if scale == 0.0 && any_nonzero {
        return Err(Error::CorruptCode);
    }
    // A message can carry a nonzero scale with all-zero codes (e.g. nothing
    // cleared the threshold); normalize to the zero gradient.
    TernaryGradient::new(if any_nonzero { scale } else { 0.0 }, codes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example_message() -> (TernaryGradient, IndicatorBitmap) {
        let mut codes = vec![0i8; 8];
        codes[1] = -1;
        codes[4] = 1;
        let q = TernaryGradient::new(0.5, codes).unwrap();
        let ind = IndicatorBitmap::from_fn(8, |i| i == 1 || i == 4);
        (q, ind)
    }

    #[test]
    fn payload_bits_formula() {
        let (q, ind) = example_message();
        let msg = encode(&q, &ind).unwrap();
        assert_eq!(msg.payload_bits(), 44); // 32 + 8 + 2*2

        let empty = encode(&TernaryGradient::zero(8), &IndicatorBitmap::zeros(8)).unwrap();
        assert_eq!(empty.payload_bits(), 40); // 32 + 8 + 0

        let dense = encode(&q, &IndicatorBitmap::ones(8)).unwrap();
        assert_eq!(dense.payload_bits(), 32 + 8 + 16);
    }

    #[test]
    fn payload_bits_rcv1_scale() {
        let dim = 47_236;
        let mut codes = vec![0i8; dim];
        let ind = IndicatorBitmap::from_fn(dim, |i| i % 100 == 0 && i < 47_200);
        assert_eq!(ind.count_ones(), 472);
        for i in ind.selected() {
            codes[i] = 1;
        }
        let q = TernaryGradient::new(1.0, codes).unwrap();
        let msg = encode(&q, &ind).unwrap();
        assert_eq!(msg.payload_bits(), 48_212); // 32 + 47236 + 944
    }

    #[test]
    fn byte_layout_is_pinned() {
        let (q, ind) = example_message();
        let bytes = encode(&q, &ind).unwrap().to_bytes();
        // dim=8 LE | scale=0.5f32 LE | bitmap 0b00010010 | codes -1,+1 LSB-first
        assert_eq!(
            bytes,
            vec![0x08, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x3F, 0x12, 0x06]
        );
        // Meaningful bits (excluding the 4-byte dim framing and pad bits)
        // match payload_bits exactly: 6 bytes * 8 - 0 bitmap pad - 4 code pad.
        assert_eq!((bytes.len() as u64 - 4) * 8 - 4, 44);
    }

    #[test]
    fn roundtrip_example() {
        let (q, ind) = example_message();
        let bytes = encode(&q, &ind).unwrap().to_bytes();
        let decoded = decode(&GradientMessage::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(
            decoded.dense(),
            vec![0.0, -0.5, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn roundtrip_all_zero_indicator() {
        let q = TernaryGradient::new(0.25, vec![1, -1, 0]).unwrap();
        let msg = encode(&q, &IndicatorBitmap::zeros(3)).unwrap();
        let decoded = decode(&msg).unwrap();
        assert_eq!(decoded.dense(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn selected_but_zero_is_representable() {
        let q = TernaryGradient::new(0.25, vec![0, 1]).unwrap();
        let ind = IndicatorBitmap::from_fn(2, |i| i == 0);
        let decoded = decode(&encode(&q, &ind).unwrap()).unwrap();
        assert_eq!(decoded.dense(), vec![0.0, 0.0]);
        assert_eq!(decoded.scale(), 0.0);
    }

    #[test]
    fn indicator_or_examples() {
        let a = IndicatorBitmap::from_fn(8, |i| i == 2 || i == 3);
        let b = IndicatorBitmap::from_fn(8, |i| i == 6 || i == 7);
        let c = a.or(&b).unwrap();
        assert_eq!(c.selected().collect::<Vec<_>>(), vec![2, 3, 6, 7]);
        assert_eq!(a.or(&a).unwrap(), a);
        assert_eq!(a.or(&IndicatorBitmap::zeros(8)).unwrap(), a);
        assert!(a.or(&IndicatorBitmap::zeros(9)).is_err());
    }

    #[test]
    fn corrupt_code_detected() {
        let (q, ind) = example_message();
        let mut bytes = encode(&q, &ind).unwrap().to_bytes();
        bytes[9] = 0b0000_0011; // first entry becomes 11
        assert!(matches!(
            GradientMessage::from_bytes(&bytes),
            Err(Error::CorruptCode)
        ));
    }

    #[test]
    fn truncated_message_detected() {
        let (q, ind) = example_message();
        let bytes = encode(&q, &ind).unwrap().to_bytes();
        assert!(matches!(
            GradientMessage::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::TruncatedMessage)
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            GradientMessage::from_bytes(&long),
            Err(Error::TruncatedMessage)
        ));
    }

    #[test]
    fn nonzero_pad_bits_rejected() {
        let (q, ind) = example_message();
        let mut bytes = encode(&q, &ind).unwrap().to_bytes();
        bytes[9] |= 0b1000_0000; // pad region of the code byte
        assert!(matches!(
            GradientMessage::from_bytes(&bytes),
            Err(Error::CorruptCode)
        ));
    }

    #[test]
    fn encode_dim_mismatch() {
        let q = TernaryGradient::zero(4);
        assert!(encode(&q, &IndicatorBitmap::zeros(5)).is_err());
    }
}
