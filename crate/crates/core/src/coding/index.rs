//! Huffman-coded index differences for pruned models.
//!
//! Section layout:
//!
//! ```text
//! n_total    32
//! nsym       32
//! symbols    nsym × (value 32, length 8)
//! codewords  Σ lengths
//! diffs      one codeword per kept position
//! ```

use std::collections::{BTreeMap, HashMap};

use super::bits::{BitReader, BitWriter};
use super::prefix::{build_huffman, CodeScheme, PrefixCode};
use crate::{Error, Result};

/// Index differences `d_0 = p_0`, `d_i = p_i − p_{i−1}` and their code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexDiffCode {
    pub n_total: usize,
    pub diffs: Vec<usize>,
    /// Distinct difference values, ascending; symbol `j` stands for `symbols[j]`.
    pub symbols: Vec<usize>,
    pub code: PrefixCode,
}

impl IndexDiffCode {
    pub fn new(positions: &[usize], n_total: usize) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidArgument("no positions to encode".into()));
        }
        if n_total > u32::MAX as usize {
            return Err(Error::InvalidArgument("n_total exceeds 32 bits".into()));
        }
        let mut diffs = Vec::with_capacity(positions.len());
        let mut prev: Option<usize> = None;
        for &p in positions {
            if p >= n_total {
                return Err(Error::InvalidArgument(format!(
                    "position {p} out of range for {n_total} parameters"
                )));
            }
            match prev {
                Some(q) if p <= q => {
                    return Err(Error::InvalidArgument(format!(
                        "positions must increase strictly, got {q} then {p}"
                    )))
                }
                Some(q) => diffs.push(p - q),
                None => diffs.push(p),
            }
            prev = Some(p);
        }
        let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
        for &d in &diffs {
            *hist.entry(d).or_default() += 1;
        }
        let symbols: Vec<usize> = hist.keys().copied().collect();
        let counts: Vec<usize> = hist.values().copied().collect();
        let code = build_huffman(&counts)?;
        Ok(IndexDiffCode {
            n_total,
            diffs,
            symbols,
            code,
        })
    }

    /// Cumulative sums of the differences.
    pub fn positions(&self) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(self.diffs.len());
        let mut acc = 0usize;
        for (i, &d) in self.diffs.iter().enumerate() {
            if i > 0 && d == 0 {
                return Err(Error::Format("repeated index position".into()));
            }
            acc = acc
                .checked_add(d)
                .filter(|&p| p < self.n_total)
                .ok_or_else(|| Error::Format("index position out of range".into()))?;
            out.push(acc);
        }
        Ok(out)
    }

    /// Bits spent on the coded differences alone.
    pub fn payload_bits(&self) -> u64 {
        let len_of: HashMap<usize, u32> = self
            .symbols
            .iter()
            .zip(self.code.lengths())
            .map(|(&s, &l)| (s, l))
            .collect();
        self.diffs.iter().map(|d| len_of[d] as u64).sum()
    }

    /// Size of the whole section as written by the serializer.
    pub fn total_bits(&self) -> u64 {
        64 + 40 * self.symbols.len() as u64 + self.code.table_bits() + self.payload_bits()
    }
}

/// Diff sequence, code and section size for sorted `positions` below `n`.
pub fn index_diff_code(positions: &[usize], n: usize) -> Result<(Vec<usize>, PrefixCode, u64)> {
    let idx = IndexDiffCode::new(positions, n)?;
    let bits = idx.total_bits();
    Ok((idx.diffs, idx.code, bits))
}

pub(crate) fn write_index_section(w: &mut BitWriter, idx: &IndexDiffCode) -> Result<()> {
    if let Some(&l) = idx.code.lengths().iter().find(|&&l| l > u8::MAX as u32) {
        return Err(Error::InvalidCode(format!("codeword length {l} does not fit 8 bits")));
    }
    w.write(idx.n_total as u64, 32);
    w.write(idx.symbols.len() as u64, 32);
    for (&s, &l) in idx.symbols.iter().zip(idx.code.lengths()) {
        w.write(s as u64, 32);
        w.write(l as u64, 8);
    }
    for j in 0..idx.symbols.len() {
        let (bits, len) = idx.code.codeword(j).unwrap();
        w.write(bits, len);
    }
    let sym_of: HashMap<usize, usize> =
        idx.symbols.iter().enumerate().map(|(j, &s)| (s, j)).collect();
    for d in &idx.diffs {
        let (bits, len) = idx.code.codeword(sym_of[d]).unwrap();
        w.write(bits, len);
    }
    Ok(())
}

pub(crate) fn read_index_section(r: &mut BitReader, count: usize) -> Result<IndexDiffCode> {
    let n_total = r.read(32)? as usize;
    let nsym = r.read(32)? as usize;
    if nsym == 0 {
        return Err(Error::Format("index section without symbols".into()));
    }
    if nsym as u128 * 40 > r.remaining() as u128 {
        return Err(Error::Truncated {
            position: r.position(),
            needed: nsym * 40 - r.remaining(),
        });
    }
    let mut symbols = Vec::with_capacity(nsym);
    let mut lengths = Vec::with_capacity(nsym);
    for _ in 0..nsym {
        symbols.push(r.read(32)? as usize);
        let l = r.read(8)? as u32;
        if l == 0 {
            return Err(Error::Format("index symbol without codeword".into()));
        }
        lengths.push(l);
    }
    if symbols.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Format("index symbols not ascending".into()));
    }
    let codes = lengths.iter().map(|&l| r.read(l)).collect::<Result<Vec<_>>>()?;
    let code = PrefixCode::from_codewords(lengths, codes, CodeScheme::Huffman)?;
    let diffs = decode_symbols(r, &code, count)?
        .into_iter()
        .map(|j| symbols[j])
        .collect();
    Ok(IndexDiffCode {
        n_total,
        diffs,
        symbols,
        code,
    })
}

const NO_NODE: u32 = u32::MAX;
const LEAF: u32 = 1 << 31;

/// Binary decoding trie; a child slot holds a node index, `LEAF | symbol`
/// or `NO_NODE`.
fn build_trie(code: &PrefixCode) -> Vec<[u32; 2]> {
    let mut nodes = vec![[NO_NODE; 2]];
    for j in 0..code.len() {
        let Some((bits, len)) = code.codeword(j) else {
            continue;
        };
        let mut at = 0usize;
        for depth in (0..len).rev() {
            let bit = ((bits >> depth) & 1) as usize;
            if depth == 0 {
                nodes[at][bit] = LEAF | j as u32;
            } else {
                if nodes[at][bit] == NO_NODE {
                    nodes[at][bit] = nodes.len() as u32;
                    nodes.push([NO_NODE; 2]);
                }
                at = nodes[at][bit] as usize;
            }
        }
    }
    nodes
}

/// Reads `count` codewords of `code`, returning symbol indices.
pub(crate) fn decode_symbols(
    r: &mut BitReader,
    code: &PrefixCode,
    count: usize,
) -> Result<Vec<usize>> {
    let trie = build_trie(code);
    let mut out = Vec::with_capacity(count.min(r.remaining()));
    for _ in 0..count {
        let mut at = 0usize;
        loop {
            let start = r.position();
            let next = trie[at][r.read_bit()? as usize];
            if next == NO_NODE {
                return Err(Error::InvalidCode(format!(
                    "bit pattern at {start} matches no codeword"
                )));
            }
            if next & LEAF != 0 {
                out.push((next & !LEAF) as usize);
                break;
            }
            at = next as usize;
        }
    }
    Ok(out)
}
