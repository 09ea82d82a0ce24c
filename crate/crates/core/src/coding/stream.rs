//! The `NQ01` container.
//!
//! Bit-exact layout, MSB first within each byte, zero-padded at the end:
//!
//! ```text
//! magic      "NQ01"                      32
//! scheme     0 fixed, 1 huffman           8
//! b          bits per stored centre       8   (32 or 64)
//! k          clusters                    32
//! n          quantized parameters        32
//! flags      bit 0: index section         8
//! centres    k × b (IEEE-754, big endian)
//! lengths    k × 8
//! codewords  Σ b_i
//! payload    Σ_i b_{a(i)}
//! [index section, see `index`]
//! padding    0..7 zero bits
//! ```
//!
//! Centres, codewords and payload are exactly the storage counted by the
//! compression ratio `N b / (Σ (|C_i| + 1) b_i + k b)`; everything else is
//! reported separately as framing.

use serde::{Deserialize, Serialize};

use super::bits::{BitReader, BitWriter};
use super::index::{decode_symbols, read_index_section, write_index_section, IndexDiffCode};
use super::prefix::{CodeScheme, PrefixCode};
use crate::quantizers::{Assignment, Codebook};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NQ01";

const FLAG_INDEX: u8 = 1;

/// Where the bits of an encoded model went.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitBreakdown {
    /// Magic, header fields and the 8-bit code length array.
    pub framing_bits: u64,
    /// `k · b`.
    pub center_bits: u64,
    /// `Σ b_i`.
    pub codeword_bits: u64,
    /// `Σ |C_i| b_i`.
    pub payload_bits: u64,
    /// Whole index-difference section, tables included.
    pub index_bits: u64,
    pub padding_bits: u64,
}

impl BitBreakdown {
    /// Bits counted by the compression-ratio formula.
    pub fn ratio_bits(&self) -> u64 {
        self.center_bits + self.codeword_bits + self.payload_bits
    }

    pub fn total_bits(&self) -> u64 {
        self.framing_bits
            + self.center_bits
            + self.codeword_bits
            + self.payload_bits
            + self.index_bits
            + self.padding_bits
    }
}

/// Original positions of the quantized entries in a pruned model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexSection {
    /// Length of the unpruned parameter vector.
    pub n_total: usize,
    pub positions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedModel {
    pub bytes: Vec<u8>,
    pub breakdown: BitBreakdown,
}

impl EncodedModel {
    pub fn total_bits(&self) -> u64 {
        self.bytes.len() as u64 * 8
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodedModel {
    pub assignment: Assignment,
    pub codebook: Codebook,
    pub code: PrefixCode,
    pub bits_per_center: u32,
    pub index: Option<IndexSection>,
    pub breakdown: BitBreakdown,
}

fn center_bits(b: u32, value: f64) -> Result<u64> {
    match b {
        32 => {
            let x = value as f32;
            if !x.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "centre {value} overflows 32-bit storage"
                )));
            }
            Ok(x.to_bits() as u64)
        }
        64 => Ok(value.to_bits()),
        other => Err(Error::InvalidArgument(format!(
            "centres can be stored with 32 or 64 bits, not {other}"
        ))),
    }
}

fn center_value(b: u32, bits: u64) -> Result<f64> {
    let v = match b {
        32 => f32::from_bits(bits as u32) as f64,
        64 => f64::from_bits(bits),
        other => return Err(Error::Format(format!("unsupported centre width {other}"))),
    };
    if !v.is_finite() {
        return Err(Error::Format("non-finite centre".into()));
    }
    Ok(v)
}

/// Serializes assignments, centres and code. `bits_per_center` is the `b`
/// of the ratio formula (32 or 64). Centres are stored at that precision, so
/// with `b = 32` decoding returns them rounded to `f32`.
pub fn encode_assignments(
    assignment: &Assignment,
    codebook: &Codebook,
    code: &PrefixCode,
    bits_per_center: u32,
    index: Option<&IndexSection>,
) -> Result<EncodedModel> {
    let k = codebook.k();
    if code.len() != k {
        return Err(Error::LengthMismatch {
            what: "code table",
            expected: k,
            got: code.len(),
        });
    }
    let n = assignment.len();
    if n > u32::MAX as usize || k > u32::MAX as usize {
        return Err(Error::InvalidArgument("model too large for 32-bit header fields".into()));
    }
    if let Some(j) = assignment.indices().iter().find(|&&j| code.codeword(j).is_none()) {
        return Err(Error::InvalidCode(format!("cluster {j} has no codeword")));
    }
    if let Some(l) = code.lengths().iter().find(|&&l| l > u8::MAX as u32) {
        return Err(Error::InvalidCode(format!("codeword length {l} does not fit 8 bits")));
    }

    let mut w = BitWriter::new();
    let mut breakdown = BitBreakdown::default();
    let mut mark = 0;
    let mut section = |w: &BitWriter, slot: &mut u64| {
        *slot += (w.len() - mark) as u64;
        mark = w.len();
    };

    for &byte in MAGIC {
        w.write(byte as u64, 8);
    }
    w.write(code.scheme().tag() as u64, 8);
    w.write(bits_per_center as u64, 8);
    w.write(k as u64, 32);
    w.write(n as u64, 32);
    w.write(if index.is_some() { FLAG_INDEX as u64 } else { 0 }, 8);
    section(&w, &mut breakdown.framing_bits);

    for &c in codebook.centers() {
        w.write(center_bits(bits_per_center, c)?, bits_per_center);
    }
    section(&w, &mut breakdown.center_bits);

    for &l in code.lengths() {
        w.write(l as u64, 8);
    }
    section(&w, &mut breakdown.framing_bits);

    for j in 0..k {
        if let Some((bits, len)) = code.codeword(j) {
            w.write(bits, len);
        }
    }
    section(&w, &mut breakdown.codeword_bits);

    for &j in assignment.indices() {
        let (bits, len) = code.codeword(j).unwrap();
        w.write(bits, len);
    }
    section(&w, &mut breakdown.payload_bits);

    if let Some(index) = index {
        if index.positions.len() != n {
            return Err(Error::LengthMismatch {
                what: "index positions",
                expected: n,
                got: index.positions.len(),
            });
        }
        let diffs = IndexDiffCode::new(&index.positions, index.n_total)?;
        write_index_section(&mut w, &diffs)?;
        section(&w, &mut breakdown.index_bits);
    }

    breakdown.padding_bits = ((8 - w.len() % 8) % 8) as u64;
    Ok(EncodedModel {
        bytes: w.finish(),
        breakdown,
    })
}

/// Inverse of [`encode_assignments`].
pub fn decode_assignments(em: &EncodedModel) -> Result<DecodedModel> {
    decode_bits(&em.bytes, em.bytes.len() * 8)
}

/// Decodes from the first `bit_len` bits of `bytes`. Everything after the
/// last section must be fewer than 8 zero bits.
pub fn decode_bits(bytes: &[u8], bit_len: usize) -> Result<DecodedModel> {
    let mut r = BitReader::new(bytes, bit_len);
    let mut breakdown = BitBreakdown::default();
    let mut mark = 0;
    let mut section = |r: &BitReader, slot: &mut u64| {
        *slot += (r.position() - mark) as u64;
        mark = r.position();
    };

    let mut magic = [0u8; 4];
    for m in &mut magic {
        *m = r.read(8)? as u8;
    }
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let scheme = CodeScheme::from_tag(r.read(8)? as u8)?;
    let b = r.read(8)? as u32;
    let k = r.read(32)? as usize;
    let n = r.read(32)? as usize;
    let flags = r.read(8)? as u8;
    if k == 0 {
        return Err(Error::Format("header declares zero clusters".into()));
    }
    if flags & !FLAG_INDEX != 0 {
        return Err(Error::Format(format!("unknown flags {flags:#04x}")));
    }
    if b != 32 && b != 64 {
        return Err(Error::Format(format!("unsupported centre width {b}")));
    }
    section(&r, &mut breakdown.framing_bits);

    // Cheap plausibility bound before allocating k-sized tables.
    if (k as u128) * (b as u128 + 8) > r.remaining() as u128 {
        return Err(Error::Truncated {
            position: r.position(),
            needed: k * (b as usize + 8) - r.remaining(),
        });
    }
    let centers = (0..k)
        .map(|_| center_value(b, r.read(b)?))
        .collect::<Result<Vec<_>>>()?;
    section(&r, &mut breakdown.center_bits);

    let lengths = (0..k).map(|_| Ok(r.read(8)? as u32)).collect::<Result<Vec<_>>>()?;
    section(&r, &mut breakdown.framing_bits);

    let codes = lengths
        .iter()
        .map(|&l| if l == 0 { Ok(0) } else { r.read(l) })
        .collect::<Result<Vec<_>>>()?;
    let code = PrefixCode::from_codewords(lengths, codes, scheme)?;
    section(&r, &mut breakdown.codeword_bits);

    let indices = decode_symbols(&mut r, &code, n)?;
    section(&r, &mut breakdown.payload_bits);

    let index = if flags & FLAG_INDEX != 0 {
        let diffs = read_index_section(&mut r, n)?;
        section(&r, &mut breakdown.index_bits);
        Some(IndexSection {
            n_total: diffs.n_total,
            positions: diffs.positions()?,
        })
    } else {
        None
    };

    let rest = r.remaining();
    if rest >= 8 {
        return Err(Error::Format(format!("{rest} trailing bits after the last section")));
    }
    if r.read(rest as u32)? != 0 {
        return Err(Error::Format("nonzero padding".into()));
    }
    breakdown.padding_bits = rest as u64;

    let assignment = Assignment::new(indices, k)?;
    let codebook = Codebook::from_assignment(centers, &assignment)?;
    Ok(DecodedModel {
        assignment,
        codebook,
        code,
        bits_per_center: b,
        index,
        breakdown,
    })
}
