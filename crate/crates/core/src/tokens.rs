//! Per-band token streams and the `.bstk` container.
//!
//! Layout, little-endian header:
//!
//! | field           | type        |
//! |-----------------|-------------|
//! | magic           | `b"BSTK"`   |
//! | version         | `u16`       |
//! | band count `B`  | `u8`        |
//! | bits per band   | `u8` x `B`  |
//! | frame count     | `u32`       |
//! | sample rate     | `u32`       |
//! | original length | `u64`       |
//!
//! The payload follows band by band. Each index is written MSB-first in
//! exactly `bits` bits and every band is zero-padded to a byte boundary.

use std::fs;
use std::path::Path;

use crate::fsutil::{write_atomic, Reader};
use crate::{Error, Result};

pub const TOKEN_MAGIC: &[u8; 4] = b"BSTK";
pub const TOKEN_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    bits_per_band: Vec<u8>,
    frame_count: usize,
    sample_rate: u32,
    original_length: u64,
    /// Band-major, `band_count x frame_count`.
    indices: Vec<Vec<u32>>,
}

impl TokenStream {
    pub fn new(
        bits_per_band: Vec<u8>,
        sample_rate: u32,
        original_length: u64,
        indices: Vec<Vec<u32>>,
    ) -> Result<Self> {
        if bits_per_band.is_empty() || bits_per_band.len() > u8::MAX as usize {
            return Err(Error::arg(format!("band count {} outside 1..=255", bits_per_band.len())));
        }
        if indices.len() != bits_per_band.len() {
            return Err(Error::arg(format!(
                "{} index rows for {} bands",
                indices.len(),
                bits_per_band.len()
            )));
        }
        if let Some(b) = bits_per_band.iter().find(|&&b| !(1..=32).contains(&b)) {
            return Err(Error::arg(format!("{b} bits per index outside 1..=32")));
        }
        let frame_count = indices[0].len();
        if indices.iter().any(|row| row.len() != frame_count) {
            return Err(Error::arg("bands disagree on frame count"));
        }
        if frame_count > u32::MAX as usize {
            return Err(Error::arg("frame count exceeds u32"));
        }
        Ok(Self { bits_per_band, frame_count, sample_rate, original_length, indices })
    }

    pub fn band_count(&self) -> usize {
        self.bits_per_band.len()
    }

    pub fn bits_per_band(&self) -> &[u8] {
        &self.bits_per_band
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn original_length(&self) -> u64 {
        self.original_length
    }

    pub fn indices(&self) -> &[Vec<u32>] {
        &self.indices
    }

    pub fn band(&self, b: usize) -> &[u32] {
        &self.indices[b]
    }

    /// Payload bytes for band `b`, including its padding.
    pub fn band_payload_len(&self, b: usize) -> usize {
        (self.frame_count * self.bits_per_band[b] as usize).div_ceil(8)
    }

    pub fn payload_bits(&self) -> usize {
        self.bits_per_band.iter().map(|&b| b as usize * self.frame_count).sum()
    }

    fn check_ranges(&self) -> Result<()> {
        for (b, (row, &bits)) in self.indices.iter().zip(&self.bits_per_band).enumerate() {
            if bits < 32 {
                if let Some((m, v)) = row.iter().enumerate().find(|(_, &v)| v >> bits != 0) {
                    return Err(Error::Serialization(format!(
                        "band {} frame {m}: index {v} does not fit in {bits} bits",
                        b + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn serialize(&self) -> Result<Vec<u8>> {
        self.check_ranges()?;
        let header = 4 + 2 + 1 + self.band_count() + 4 + 4 + 8;
        let payload: usize = (0..self.band_count()).map(|b| self.band_payload_len(b)).sum();
        let mut out = Vec::with_capacity(header + payload);
        out.extend_from_slice(TOKEN_MAGIC);
        out.extend_from_slice(&TOKEN_VERSION.to_le_bytes());
        out.push(self.band_count() as u8);
        out.extend_from_slice(&self.bits_per_band);
        out.extend_from_slice(&(self.frame_count as u32).to_le_bytes());
        out.extend_from_slice(&self.sample_rate.to_le_bytes());
        out.extend_from_slice(&self.original_length.to_le_bytes());
        for (row, &bits) in self.indices.iter().zip(&self.bits_per_band) {
            let mut w = BitWriter::new(&mut out);
            for &v in row {
                w.put(v, bits);
            }
            w.finish();
        }
        Ok(out)
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "token stream");
        if r.take(4)? != TOKEN_MAGIC {
            return Err(Error::format("bad token stream magic"));
        }
        let version = r.u16()?;
        if version != TOKEN_VERSION {
            return Err(Error::format(format!("token stream version {version} not supported")));
        }
        let band_count = r.u8()? as usize;
        if band_count == 0 {
            return Err(Error::corrupt("token stream with zero bands"));
        }
        let bits_per_band = r.take(band_count)?.to_vec();
        if let Some(b) = bits_per_band.iter().find(|&&b| !(1..=32).contains(&b)) {
            return Err(Error::corrupt(format!("{b} bits per index")));
        }
        let frame_count = r.u32()? as usize;
        let sample_rate = r.u32()?;
        let original_length = r.u64()?;

        let mut indices = Vec::with_capacity(band_count);
        for (b, &bits) in bits_per_band.iter().enumerate() {
            let len = (frame_count * bits as usize).div_ceil(8);
            let chunk = r.take(len).map_err(|_| {
                Error::corrupt(format!("payload of band {} truncated", b + 1))
            })?;
            let mut br = BitReader::new(chunk);
            let row: Vec<u32> = (0..frame_count).map(|_| br.get(bits)).collect();
            if !br.padding_is_zero() {
                return Err(Error::corrupt(format!("nonzero padding after band {}", b + 1)));
            }
            indices.push(row);
        }
        if r.remaining() != 0 {
            return Err(Error::corrupt(format!(
                "{} trailing bytes after offset {}",
                r.remaining(),
                r.position()
            )));
        }
        Self::new(bits_per_band, sample_rate, original_length, indices)
            .map_err(|e| Error::corrupt(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.serialize()?;
        write_atomic(path.as_ref(), &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::deserialize(&fs::read(path)?)
    }
}

struct BitWriter<'a> {
    out: &'a mut Vec<u8>,
    acc: u64,
    nbits: u32,
}

impl<'a> BitWriter<'a> {
    fn new(out: &'a mut Vec<u8>) -> Self {
        Self { out, acc: 0, nbits: 0 }
    }

    fn put(&mut self, value: u32, bits: u8) {
        let bits = bits as u32;
        let mask = if bits == 32 { u32::MAX } else { (1u32 << bits) - 1 };
        self.acc = (self.acc << bits) | (value & mask) as u64;
        self.nbits += bits;
        while self.nbits >= 8 {
            self.nbits -= 8;
            self.out.push((self.acc >> self.nbits) as u8);
        }
        self.acc &= (1u64 << self.nbits) - 1;
    }

    fn finish(self) {
        if self.nbits > 0 {
            self.out.push((self.acc << (8 - self.nbits)) as u8);
        }
    }
}

struct BitReader<'a> {
    buf: &'a [u8],
    bitpos: usize,
}

impl<'a> BitReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, bitpos: 0 }
    }

    fn get(&mut self, bits: u8) -> u32 {
        let mut v: u32 = 0;
        for _ in 0..bits {
            let byte = self.buf[self.bitpos / 8];
            let bit = (byte >> (7 - self.bitpos % 8)) & 1;
            v = (v << 1) | bit as u32;
            self.bitpos += 1;
        }
        v
    }

    fn padding_is_zero(&self) -> bool {
        let used = self.bitpos % 8;
        used == 0 || self.buf[self.bitpos / 8] & (0xFFu8 >> used) == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: usize = 4 + 2 + 1 + 4 + 4 + 8;

    #[test]
    fn single_byte_payload() {
        let t = TokenStream::new(vec![8], 24000, 320, vec![vec![255]]).unwrap();
        let bytes = t.serialize().unwrap();
        assert_eq!(&bytes[..4], b"BSTK");
        assert_eq!(bytes.len(), HEADER + 1 + 1);
        assert_eq!(*bytes.last().unwrap(), 0xFF);
    }

    #[test]
    fn seventeen_bit_payload_length() {
        let t = TokenStream::new(vec![17], 24000, 640, vec![vec![131071, 1]]).unwrap();
        let bytes = t.serialize().unwrap();
        assert_eq!(bytes.len() - HEADER - 1, 5);
        assert_eq!(t.band_payload_len(0), 5);
        assert_eq!(TokenStream::deserialize(&bytes).unwrap(), t);
    }

    #[test]
    fn msb_first_packing() {
        // 3-bit values 0b101, 0b011 -> 10101100
        let t = TokenStream::new(vec![3], 8000, 2, vec![vec![5, 3]]).unwrap();
        assert_eq!(*t.serialize().unwrap().last().unwrap(), 0b1010_1100);
    }

    #[test]
    fn overflow_is_a_serialization_error() {
        let t = TokenStream::new(vec![4], 24000, 320, vec![vec![16]]).unwrap();
        assert!(matches!(t.serialize(), Err(Error::Serialization(_))));
    }

    #[test]
    fn header_and_payload_errors() {
        let t = TokenStream::new(vec![5, 9], 24000, 960, vec![vec![1, 2, 3], vec![4, 5, 6]]).unwrap();
        let bytes = t.serialize().unwrap();

        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(TokenStream::deserialize(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(TokenStream::deserialize(&bad), Err(Error::Format(_))));
        assert!(matches!(TokenStream::deserialize(&bytes[..bytes.len() - 1]), Err(Error::Corrupt(_))));
        assert!(matches!(TokenStream::deserialize(&bytes[..10]), Err(Error::Corrupt(_))));
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(TokenStream::deserialize(&bad), Err(Error::Corrupt(_))));
        // 3 x 5 bits = 15 bits, last bit of the band's second byte is padding
        let mut bad = bytes.clone();
        let band1_end = HEADER + 2 + 2;
        bad[band1_end - 1] |= 1;
        assert!(matches!(TokenStream::deserialize(&bad), Err(Error::Corrupt(_))));
    }

    #[test]
    fn constructor_validation() {
        assert!(TokenStream::new(vec![], 1, 0, vec![]).is_err());
        assert!(TokenStream::new(vec![0], 1, 0, vec![vec![]]).is_err());
        assert!(TokenStream::new(vec![33], 1, 0, vec![vec![]]).is_err());
        assert!(TokenStream::new(vec![8, 8], 1, 0, vec![vec![1], vec![]]).is_err());
        assert!(TokenStream::new(vec![8], 1, 0, vec![vec![1], vec![2]]).is_err());
    }

    #[test]
    fn thirty_two_bit_indices() {
        let t = TokenStream::new(vec![32, 1], 24000, 3, vec![vec![u32::MAX, 0, 0xDEAD_BEEF], vec![1, 0, 1]]).unwrap();
        assert_eq!(TokenStream::deserialize(&t.serialize().unwrap()).unwrap(), t);
    }

    pub(crate) fn arb_stream() -> impl Strategy<Value = TokenStream> {
        (proptest::collection::vec(1u8..=32, 1..6), 0usize..40, any::<u32>(), any::<u64>())
            .prop_flat_map(|(bits, frames, rate, len)| {
                let rows: Vec<_> = bits
                    .iter()
                    .map(|&b| {
                        let max = if b == 32 { u32::MAX } else { (1u32 << b) - 1 };
                        proptest::collection::vec(0..=max, frames)
                    })
                    .collect();
                (Just(bits), rows, Just(rate), Just(len))
            })
            .prop_map(|(bits, rows, rate, len)| TokenStream::new(bits, rate, len, rows).unwrap())
    }

    proptest! {
        #[test]
        fn round_trip(t in arb_stream()) {
            let bytes = t.serialize().unwrap();
            let back = TokenStream::deserialize(&bytes).unwrap();
            prop_assert_eq!(back.serialize().unwrap(), bytes.clone());
            let payload: usize = (0..t.band_count()).map(|b| t.band_payload_len(b)).sum();
            prop_assert_eq!(bytes.len(), HEADER + t.band_count() + payload);
            prop_assert!(payload * 8 - t.payload_bits() < 8 * t.band_count());
            prop_assert_eq!(back, t);
        }
    }
}
