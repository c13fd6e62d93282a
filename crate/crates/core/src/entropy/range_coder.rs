//! Carry-less range coder over 16-bit cumulative frequency tables.
//!
//! State is a 32-bit `low` and `range`. After each symbol the coder emits
//! the top byte of `low` while it is settled, or while `range` has fallen
//! below 2^16 (in which case `range` is first trimmed so the interval ends
//! on a 2^16 boundary). Termination writes the four bytes of `low`, so the
//! decoder consumes exactly the payload.
//!
//! Symbols outside a row's support are coded as the row's escape symbol
//! followed by the excess, sent as a 6-bit length and then raw bits in
//! groups of at most 8 with uniform frequencies.

use crate::entropy::cdf::{CdfTable, PRECISION};
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChunkModel {
    FactorizedZ,
    GaussianY,
}

/// An entropy-coded stream of `symbol_count` symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodedChunk {
    pub payload: Vec<u8>,
    pub symbol_count: usize,
    pub model: ChunkModel,
}

impl CodedChunk {
    /// `[u32 LE payload length][payload]`.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.payload.len());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parse one chunk from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn from_wire(bytes: &[u8], symbol_count: usize, model: ChunkModel) -> Result<(Self, usize)> {
        if bytes.len() < 4 {
            return Err(Error::Truncated {
                expected: 4,
                actual: bytes.len() as u64,
            });
        }
        let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        if bytes.len() < 4 + len {
            return Err(Error::Truncated {
                expected: (4 + len) as u64,
                actual: bytes.len() as u64,
            });
        }
        let chunk = CodedChunk {
            payload: bytes[4..4 + len].to_vec(),
            symbol_count,
            model,
        };
        Ok((chunk, 4 + len))
    }

    pub fn bits(&self) -> u64 {
        8 * self.payload.len() as u64
    }
}

pub struct Encoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Encoder {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    /// Code the interval `[cum, cum + freq)` of a `2^PRECISION` total.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= 1 << PRECISION);
        let r = self.range >> PRECISION;
        self.low = self.low.wrapping_add(r * cum);
        self.range = r * freq;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    /// Uniform `bits`-bit value, `bits <= 16`.
    pub fn encode_bits(&mut self, value: u32, bits: u32) {
        let shift = PRECISION - bits;
        self.encode(value << shift, 1 << shift);
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..4 {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

pub struct Decoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        let mut d = Decoder {
            low: 0,
            range: u32::MAX,
            code: 0,
            input,
            pos: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.byte()? as u32;
        }
        Ok(d)
    }

    fn byte(&mut self) -> Result<u8> {
        let b = *self
            .input
            .get(self.pos)
            .ok_or_else(|| Error::CorruptPayload("payload ended early".into()))?;
        self.pos += 1;
        Ok(b)
    }

    /// Target frequency for the next symbol; follow with [`Decoder::consume`].
    pub fn target(&mut self) -> Result<u32> {
        self.range >>= PRECISION;
        if self.range == 0 {
            return Err(Error::CorruptPayload("coder range collapsed".into()));
        }
        let v = self.code.wrapping_sub(self.low) / self.range;
        if v >= 1 << PRECISION {
            return Err(Error::CorruptPayload("target outside the coding interval".into()));
        }
        Ok(v)
    }

    pub fn consume(&mut self, cum: u32, freq: u32) -> Result<()> {
        self.low = self.low.wrapping_add(self.range * cum);
        self.range *= freq;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | self.byte()? as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode_bits(&mut self, bits: u32) -> Result<u32> {
        let shift = PRECISION - bits;
        let v = self.target()? >> shift;
        self.consume(v << shift, 1 << shift)?;
        Ok(v)
    }

    pub fn consumed(&self) -> usize {
        self.pos
    }
}

fn excess_code(sym: i32, lo: i32, hi: i32) -> u32 {
    // Zig-zag the distance past either end of the support.
    if sym < lo {
        2 * (lo as i64 - sym as i64 - 1) as u32
    } else {
        2 * (sym as i64 - hi as i64 - 1) as u32 + 1
    }
}

fn excess_value(code: u32, lo: i32, hi: i32) -> Result<i32> {
    let d = (code / 2) as i64 + 1;
    let v = if code.is_multiple_of(2) { lo as i64 - d } else { hi as i64 + d };
    i32::try_from(v).map_err(|_| Error::CorruptPayload("escaped value out of range".into()))
}

/// Code `symbols[i]` with row `indices[i]` of `table`.
pub fn range_encode(symbols: &[i32], table: &CdfTable, indices: &[usize]) -> Result<CodedChunk> {
    if symbols.len() != indices.len() {
        return Err(Error::shape(format!(
            "{} symbols but {} row indices",
            symbols.len(),
            indices.len()
        )));
    }
    let mut enc = Encoder::new();
    for (&s, &idx) in symbols.iter().zip(indices) {
        let row = table.row(idx)?;
        let (lo, hi) = row.support();
        if (lo..=hi).contains(&s) {
            let k = (s - lo) as usize;
            enc.encode(row.cdf[k], row.cdf[k + 1] - row.cdf[k]);
        } else {
            let e = row.escape_index();
            enc.encode(row.cdf[e], row.cdf[e + 1] - row.cdf[e]);
            let code = excess_code(s, lo, hi);
            let nbits = 32 - code.leading_zeros();
            enc.encode_bits(nbits, 6);
            let mut left = nbits;
            while left > 0 {
                let take = left.min(8);
                left -= take;
                enc.encode_bits((code >> left) & ((1 << take) - 1), take);
            }
        }
    }
    Ok(CodedChunk {
        payload: enc.finish(),
        symbol_count: symbols.len(),
        model: table.model,
    })
}

/// Inverse of [`range_encode`]. The payload must be consumed exactly.
pub fn range_decode(chunk: &CodedChunk, table: &CdfTable, indices: &[usize]) -> Result<Vec<i32>> {
    if chunk.symbol_count != indices.len() {
        return Err(Error::shape(format!(
            "chunk holds {} symbols but {} row indices were given",
            chunk.symbol_count,
            indices.len()
        )));
    }
    let mut dec = Decoder::new(&chunk.payload)?;
    let mut out = Vec::with_capacity(indices.len());
    for &idx in indices {
        let row = table.row(idx)?;
        let (lo, hi) = row.support();
        let t = dec.target()?;
        // Last k with cdf[k] <= t.
        let k = row.cdf.partition_point(|&c| c <= t) - 1;
        dec.consume(row.cdf[k], row.cdf[k + 1] - row.cdf[k])?;
        if k == row.escape_index() {
            let nbits = dec.decode_bits(6)?;
            if nbits > 32 {
                return Err(Error::CorruptPayload("bad escape length".into()));
            }
            let mut code = 0u64;
            let mut left = nbits;
            while left > 0 {
                let take = left.min(8);
                left -= take;
                code = (code << take) | dec.decode_bits(take)? as u64;
            }
            out.push(excess_value(code as u32, lo, hi)?);
        } else {
            out.push(lo + k as i32);
        }
    }
    if dec.consumed() != chunk.payload.len() {
        return Err(Error::CorruptPayload(format!(
            "decoder consumed {} of {} payload bytes",
            dec.consumed(),
            chunk.payload.len()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::cdf::CdfRow;
    use proptest::prelude::*;

    fn table() -> CdfTable {
        let rows = vec![
            CdfRow::from_pmf(-2, &[0.1, 0.2, 0.4, 0.2, 0.1], 1e-4).unwrap(),
            CdfRow::from_pmf(0, &[0.999, 0.001], 1e-6).unwrap(),
        ];
        CdfTable::new(rows, ChunkModel::GaussianY)
    }

    #[test]
    fn empty_stream() {
        let t = table();
        let c = range_encode(&[], &t, &[]).unwrap();
        assert!(c.payload.len() <= 8);
        assert!(range_decode(&c, &t, &[]).unwrap().is_empty());
    }

    #[test]
    fn adversarial_streams_round_trip() {
        let t = table();
        let cases: Vec<Vec<i32>> = vec![
            vec![-2; 500],
            vec![2; 500],
            (0..500).map(|i| if i % 2 == 0 { i32::MIN } else { i32::MAX }).collect(),
            (0..500).map(|i| if i % 2 == 0 { -3 } else { 3 }).collect(),
            vec![1; 3000],
        ];
        for syms in cases {
            for row in 0..2 {
                let idx = vec![row; syms.len()];
                let c = range_encode(&syms, &t, &idx).unwrap();
                assert_eq!(range_decode(&c, &t, &idx).unwrap(), syms);
            }
        }
    }

    #[test]
    fn corrupt_payloads_are_rejected() {
        let t = table();
        let syms: Vec<i32> = (0..200).map(|i| (i % 5) - 2).collect();
        let idx = vec![0; syms.len()];
        let c = range_encode(&syms, &t, &idx).unwrap();
        let mut short = c.clone();
        short.payload.truncate(c.payload.len() - 2);
        assert!(range_decode(&short, &t, &idx).is_err());
        let mut long = c.clone();
        long.payload.push(0);
        assert!(range_decode(&long, &t, &idx).is_err());
    }

    #[test]
    fn wire_format() {
        let c = CodedChunk {
            payload: vec![1, 2, 3],
            symbol_count: 9,
            model: ChunkModel::FactorizedZ,
        };
        let w = c.to_wire();
        assert_eq!(w, vec![3, 0, 0, 0, 1, 2, 3]);
        let (back, used) = CodedChunk::from_wire(&w, 9, ChunkModel::FactorizedZ).unwrap();
        assert_eq!((back, used), (c, 7));
        assert!(CodedChunk::from_wire(&w[..5], 9, ChunkModel::FactorizedZ).is_err());
    }

    proptest! {
        #[test]
        fn random_round_trip(syms in proptest::collection::vec(-40i32..40, 0..400), rows in proptest::collection::vec(0usize..2, 400)) {
            let t = table();
            let idx = &rows[..syms.len()];
            let c = range_encode(&syms, &t, idx).unwrap();
            prop_assert_eq!(range_decode(&c, &t, idx).unwrap(), syms);
        }
    }
}
