//! LSB-first bit packing. Bit `i` of a buffer lives in byte `i / 8` at
//! position `i % 8`; multi-bit fields store their least significant bit first.

use crate::error::CodecError;

pub struct BitWriter<'a> {
    buf: &'a mut [u8],
    pos: usize,
}

impl<'a> BitWriter<'a> {
    pub fn new(buf: &'a mut [u8]) -> Self {
        BitWriter { buf, pos: 0 }
    }

    pub fn put(&mut self, field: &'static str, value: u64, bits: u32) -> Result<(), CodecError> {
        if bits < 64 && value >> bits != 0 {
            return Err(CodecError::FieldOverflow { field, value, bits });
        }
        write_bits(self.buf, self.pos, value, bits);
        self.pos += bits as usize;
        Ok(())
    }

    pub fn position(&self) -> usize {
        self.pos
    }
}

pub struct BitReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        BitReader { buf, pos: 0 }
    }

    pub fn take(&mut self, bits: u32) -> u64 {
        let v = read_bits(self.buf, self.pos, bits);
        self.pos += bits as usize;
        v
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// True when every bit from the current position to the end is zero.
    pub fn rest_is_zero(&self) -> bool {
        let total = self.buf.len() * 8;
        (self.pos..total).all(|i| self.buf[i / 8] >> (i % 8) & 1 == 0)
    }
}

pub fn write_bits(buf: &mut [u8], start: usize, value: u64, bits: u32) {
    for i in 0..bits as usize {
        let bit = (value >> i) & 1;
        let at = start + i;
        let mask = 1u8 << (at % 8);
        if bit == 1 {
            buf[at / 8] |= mask;
        } else {
            buf[at / 8] &= !mask;
        }
    }
}

pub fn read_bits(buf: &[u8], start: usize, bits: u32) -> u64 {
    let mut v = 0u64;
    for i in 0..bits as usize {
        let at = start + i;
        v |= u64::from(buf[at / 8] >> (at % 8) & 1) << i;
    }
    v
}

/// Copies `bits` bits from `src` (starting at bit 0) into `dst` at `dst_start`.
pub fn copy_bits_into(dst: &mut [u8], dst_start: usize, src: &[u8], bits: usize) {
    for i in 0..bits {
        let b = src[i / 8] >> (i % 8) & 1;
        let at = dst_start + i;
        let mask = 1u8 << (at % 8);
        if b == 1 {
            dst[at / 8] |= mask;
        } else {
            dst[at / 8] &= !mask;
        }
    }
}

/// Extracts `bits` bits starting at `src_start` into a fresh buffer.
pub fn extract_bits(src: &[u8], src_start: usize, bits: usize) -> Vec<u8> {
    let mut out = vec![0u8; bits.div_ceil(8)];
    for i in 0..bits {
        let at = src_start + i;
        let b = src[at / 8] >> (at % 8) & 1;
        out[i / 8] |= b << (i % 8);
    }
    out
}
