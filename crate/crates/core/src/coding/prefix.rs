use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Longest codeword the bitstream format can carry.
pub const MAX_CODE_LEN: u32 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeScheme {
    Fixed,
    Huffman,
}

impl CodeScheme {
    pub(crate) fn tag(self) -> u8 {
        match self {
            CodeScheme::Fixed => 0,
            CodeScheme::Huffman => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(CodeScheme::Fixed),
            1 => Ok(CodeScheme::Huffman),
            other => Err(Error::Format(format!("unknown coding scheme tag {other}"))),
        }
    }
}

/// Per-symbol codeword lengths and bit patterns. A length of zero marks a
/// symbol without a codeword (a cluster with no members).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrefixCode {
    lengths: Vec<u32>,
    codes: Vec<u64>,
    scheme: CodeScheme,
}

impl PrefixCode {
    /// Canonical code for the given lengths: symbols ordered by (length,
    /// index) receive consecutive codewords.
    pub fn canonical(lengths: Vec<u32>, scheme: CodeScheme) -> Result<Self> {
        if let Some(&bad) = lengths.iter().find(|&&l| l > MAX_CODE_LEN) {
            return Err(Error::InvalidCode(format!("codeword length {bad} exceeds {MAX_CODE_LEN}")));
        }
        let kraft: f64 = lengths
            .iter()
            .filter(|&&l| l > 0)
            .map(|&l| (-(l as f64)).exp2())
            .sum();
        if kraft > 1.0 {
            return Err(Error::InvalidCode(format!("Kraft sum {kraft} exceeds 1")));
        }
        let mut order: Vec<usize> = (0..lengths.len()).filter(|&j| lengths[j] > 0).collect();
        order.sort_by_key(|&j| (lengths[j], j));
        let mut codes = vec![0u64; lengths.len()];
        let mut next: u128 = 0;
        let mut prev_len = 0;
        for j in order {
            next <<= lengths[j] - prev_len;
            prev_len = lengths[j];
            codes[j] = next as u64;
            next += 1;
        }
        Ok(PrefixCode {
            lengths,
            codes,
            scheme,
        })
    }

    /// Code from explicit codewords, checked for prefix-freeness.
    pub fn from_codewords(lengths: Vec<u32>, codes: Vec<u64>, scheme: CodeScheme) -> Result<Self> {
        if lengths.len() != codes.len() {
            return Err(Error::LengthMismatch {
                what: "codewords",
                expected: lengths.len(),
                got: codes.len(),
            });
        }
        let used: Vec<usize> = (0..lengths.len()).filter(|&j| lengths[j] > 0).collect();
        for &j in &used {
            if lengths[j] > MAX_CODE_LEN || (lengths[j] < 64 && codes[j] >> lengths[j] != 0) {
                return Err(Error::InvalidCode(format!("codeword {j} does not fit its length")));
            }
        }
        for &a in &used {
            for &b in &used {
                if a != b && lengths[a] <= lengths[b] {
                    let prefix = codes[b] >> (lengths[b] - lengths[a]);
                    if prefix == codes[a] {
                        return Err(Error::InvalidCode(format!(
                            "codeword of symbol {a} is a prefix of symbol {b}"
                        )));
                    }
                }
            }
        }
        Ok(PrefixCode {
            lengths,
            codes,
            scheme,
        })
    }

    pub fn lengths(&self) -> &[u32] {
        &self.lengths
    }

    pub fn codes(&self) -> &[u64] {
        &self.codes
    }

    pub fn scheme(&self) -> CodeScheme {
        self.scheme
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// `(bits, length)` of symbol `j`, if it has a codeword.
    pub fn codeword(&self, j: usize) -> Option<(u64, u32)> {
        match self.lengths.get(j) {
            Some(&l) if l > 0 => Some((self.codes[j], l)),
            _ => None,
        }
    }

    pub fn kraft_sum(&self) -> f64 {
        self.lengths
            .iter()
            .filter(|&&l| l > 0)
            .map(|&l| (-(l as f64)).exp2())
            .sum()
    }

    /// `Σ b_i`, the bits needed to store every codeword once.
    pub fn table_bits(&self) -> u64 {
        self.lengths.iter().map(|&l| l as u64).sum()
    }

    /// `b̄ = Σ |C_i| b_i / N`.
    pub fn average_length(&self, counts: &[usize]) -> f64 {
        let n: usize = counts.iter().sum();
        let bits: u64 = counts
            .iter()
            .zip(&self.lengths)
            .map(|(&c, &l)| c as u64 * l as u64)
            .sum();
        bits as f64 / n as f64
    }
}

/// `⌈log₂ k⌉`, with one bit for `k = 1`.
pub fn fixed_length_bits(k: usize) -> u32 {
    if k <= 2 {
        1
    } else {
        usize::BITS - (k - 1).leading_zeros()
    }
}

/// Every symbol gets `⌈log₂ k⌉` bits.
pub fn fixed_length_code(k: usize) -> Result<PrefixCode> {
    if k == 0 {
        return Err(Error::InvalidArgument("a code needs at least one symbol".into()));
    }
    PrefixCode::canonical(vec![fixed_length_bits(k); k], CodeScheme::Fixed)
}

/// Optimal prefix code for the given symbol counts. Zero-count symbols get
/// no codeword; a lone symbol gets a 1-bit codeword.
pub fn build_huffman(counts: &[usize]) -> Result<PrefixCode> {
    let used: Vec<usize> = (0..counts.len()).filter(|&j| counts[j] > 0).collect();
    let mut lengths = vec![0u32; counts.len()];
    match used.len() {
        0 => {
            return Err(Error::InvalidArgument(
                "huffman code needs at least one nonzero count".into(),
            ))
        }
        1 => lengths[used[0]] = 1,
        _ => {
            // Leaves are nodes 0..m, merged nodes follow; ties between equal
            // weights go to the lower node id.
            let m = used.len();
            let mut parent = vec![usize::MAX; 2 * m - 1];
            let mut heap: BinaryHeap<Reverse<(u64, usize)>> = used
                .iter()
                .enumerate()
                .map(|(node, &j)| Reverse((counts[j] as u64, node)))
                .collect();
            let mut next = m;
            while heap.len() > 1 {
                let Reverse((wa, a)) = heap.pop().unwrap();
                let Reverse((wb, b)) = heap.pop().unwrap();
                parent[a] = next;
                parent[b] = next;
                heap.push(Reverse((wa + wb, next)));
                next += 1;
            }
            for (node, &j) in used.iter().enumerate() {
                let mut depth = 0;
                let mut cur = node;
                while parent[cur] != usize::MAX {
                    cur = parent[cur];
                    depth += 1;
                }
                lengths[j] = depth;
            }
        }
    }
    PrefixCode::canonical(lengths, CodeScheme::Huffman)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sorted(mut v: Vec<u32>) -> Vec<u32> {
        v.sort();
        v
    }

    #[test]
    fn dyadic_distribution_meets_entropy() {
        let code = build_huffman(&[2, 1, 1]).unwrap();
        assert_eq!(code.lengths(), &[1, 2, 2]);
        assert_eq!(code.average_length(&[2, 1, 1]), 1.5);
    }

    #[test]
    fn four_symbol_example() {
        let counts = [4, 3, 2, 1];
        let code = build_huffman(&counts).unwrap();
        assert_eq!(sorted(code.lengths().to_vec()), vec![1, 2, 3, 3]);
        assert!((code.average_length(&counts) - 1.9).abs() < 1e-12);
    }

    #[test]
    fn single_symbol_gets_one_bit() {
        let code = build_huffman(&[7]).unwrap();
        assert_eq!(code.lengths(), &[1]);
        assert!(build_huffman(&[0, 0]).is_err());
    }

    #[test]
    fn zero_counts_get_no_codeword() {
        let code = build_huffman(&[5, 0, 5]).unwrap();
        assert_eq!(code.lengths(), &[1, 0, 1]);
        assert!(code.codeword(1).is_none());
    }

    #[test]
    fn fixed_lengths() {
        assert_eq!(fixed_length_code(4).unwrap().lengths(), &[2; 4]);
        assert_eq!(fixed_length_code(5).unwrap().lengths(), &[3; 5]);
        assert_eq!(fixed_length_code(1).unwrap().lengths(), &[1]);
        assert_eq!(fixed_length_code(2).unwrap().lengths(), &[1, 1]);
        assert_eq!(fixed_length_bits(8), 3);
        assert_eq!(fixed_length_bits(9), 4);
    }

    #[test]
    fn canonical_codewords_are_sequential() {
        let code = PrefixCode::canonical(vec![2, 1, 3, 3], CodeScheme::Huffman).unwrap();
        assert_eq!(code.codes(), &[0b10, 0b0, 0b110, 0b111]);
        assert!(PrefixCode::canonical(vec![1, 1, 1], CodeScheme::Huffman).is_err());
    }

    #[test]
    fn prefix_violations_are_detected() {
        assert!(PrefixCode::from_codewords(vec![1, 2], vec![0b0, 0b01], CodeScheme::Huffman)
            .is_err());
        assert!(PrefixCode::from_codewords(vec![1, 2], vec![0b0, 0b10], CodeScheme::Huffman)
            .is_ok());
        assert!(PrefixCode::from_codewords(vec![1], vec![0b10], CodeScheme::Huffman).is_err());
    }
}
