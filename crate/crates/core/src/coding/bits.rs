//! MSB-first bit packing.

use crate::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    len: usize,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of bits written so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends the low `n` bits of `value`, most significant first.
    pub fn write(&mut self, value: u64, n: u32) {
        debug_assert!(n <= 64);
        for shift in (0..n).rev() {
            let bit = (value >> shift) & 1;
            if self.len % 8 == 0 {
                self.bytes.push(0);
            }
            if bit == 1 {
                let last = self.bytes.last_mut().unwrap();
                *last |= 0x80 >> (self.len % 8);
            }
            self.len += 1;
        }
    }

    /// Zero-pads to a byte boundary and returns the bytes.
    pub fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

#[derive(Clone, Debug)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    limit: usize,
    pos: usize,
}

impl<'a> BitReader<'a> {
    /// Reads at most `limit` bits of `bytes`.
    pub fn new(bytes: &'a [u8], limit: usize) -> Self {
        BitReader {
            bytes,
            limit: limit.min(bytes.len() * 8),
            pos: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.limit - self.pos
    }

    pub fn read_bit(&mut self) -> Result<u64> {
        if self.pos >= self.limit {
            return Err(Error::Truncated {
                position: self.pos,
                needed: 1,
            });
        }
        let bit = (self.bytes[self.pos / 8] >> (7 - self.pos % 8)) & 1;
        self.pos += 1;
        Ok(bit as u64)
    }

    pub fn read(&mut self, n: u32) -> Result<u64> {
        if self.remaining() < n as usize {
            return Err(Error::Truncated {
                position: self.pos,
                needed: n as usize - self.remaining(),
            });
        }
        let mut v = 0;
        for _ in 0..n {
            v = (v << 1) | self.read_bit()?;
        }
        Ok(v)
    }
}
