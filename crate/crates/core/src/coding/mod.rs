//! Entropy, prefix codes, the bitstream container and ratio accounting.

mod bits;
mod index;
mod prefix;
mod stream;

use serde::{Deserialize, Serialize};

pub use bits::{BitReader, BitWriter};
pub use index::{index_diff_code, IndexDiffCode};
pub use prefix::{
    build_huffman, fixed_length_bits, fixed_length_code, CodeScheme, PrefixCode, MAX_CODE_LEN,
};
pub use stream::{
    decode_assignments, decode_bits, encode_assignments, BitBreakdown, DecodedModel,
    EncodedModel, IndexSection, MAGIC,
};

use crate::quantizers::Codebook;
use crate::{Error, Result};

/// `−Σ p_i log₂ p_i` of the empirical distribution, with `0 · log 0 = 0`.
pub fn entropy_of_counts(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

pub fn entropy_bits(codebook: &Codebook) -> f64 {
    entropy_of_counts(codebook.counts())
}

/// `N b / (Σ (|C_i| + 1) b_i + k b)` with `k = counts.len()`.
pub fn compression_ratio_exact(n: usize, b: u32, counts: &[usize], code: &PrefixCode) -> Result<f64> {
    if counts.len() != code.len() {
        return Err(Error::LengthMismatch {
            what: "code table",
            expected: counts.len(),
            got: code.len(),
        });
    }
    let total: usize = counts.iter().sum();
    if total != n {
        return Err(Error::LengthMismatch {
            what: "cluster counts",
            expected: n,
            got: total,
        });
    }
    Ok((n as f64 * b as f64) / ratio_denominator(b, counts, code) as f64)
}

/// Denominator of the exact ratio in bits.
pub fn ratio_denominator(b: u32, counts: &[usize], code: &PrefixCode) -> u64 {
    let stored: u64 = counts
        .iter()
        .zip(code.lengths())
        .map(|(&c, &l)| (c as u64 + 1) * l as u64)
        .sum();
    stored + counts.len() as u64 * b as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyRatio {
    /// `b / (b̄ + (Σ b_i + k b)/N)`.
    pub with_overhead: f64,
    /// `b / b̄`, or `N b / (Σ b_i + k b)` when `b̄ = 0`.
    pub approximate: f64,
}

pub fn compression_ratio_entropy(
    b: u32,
    average_length: f64,
    k: usize,
    sum_lengths: u64,
    n: usize,
) -> Result<EntropyRatio> {
    if n == 0 {
        return Err(Error::InvalidArgument("ratio needs at least one parameter".into()));
    }
    if !(average_length >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "average length must be nonnegative, got {average_length}"
        )));
    }
    let b = b as f64;
    let overhead = sum_lengths as f64 + k as f64 * b;
    let with_overhead = b / (average_length + overhead / n as f64);
    let approximate = if average_length > 0.0 {
        b / average_length
    } else {
        n as f64 * b / overhead
    };
    Ok(EntropyRatio {
        with_overhead,
        approximate,
    })
}

/// Entropy budget `R = b / C` for a target ratio `C`.
pub fn entropy_budget(b: u32, target_ratio: f64) -> Result<f64> {
    if !(target_ratio > 0.0) || !target_ratio.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "target ratio must be positive, got {target_ratio}"
        )));
    }
    Ok(b as f64 / target_ratio)
}

/// Size and accuracy summary of one encoded model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub scheme: CodeScheme,
    /// Clusters with at least one member.
    pub k_effective: usize,
    /// Quantized parameters.
    pub n: usize,
    /// Parameters of the original model, pruned ones included.
    pub n_total: usize,
    pub bits_per_param: u32,
    pub entropy: f64,
    pub average_length: f64,
    pub sum_code_lengths: u64,
    pub ratio_exact: f64,
    pub ratio_entropy: f64,
    pub ratio_entropy_approx: f64,
    /// `n_total · b` over every serialized bit.
    pub ratio_measured: f64,
    pub breakdown: BitBreakdown,
    pub accuracy_unquantized: Option<f64>,
    pub accuracy_pre_ft: Option<f64>,
    pub accuracy_post_ft: Option<f64>,
}

impl CompressionReport {
    /// Figures recomputed from a decoded container.
    pub fn from_decoded(model: &DecodedModel, serialized_bits: u64) -> Result<Self> {
        let counts = model.codebook.counts();
        let n = model.assignment.len();
        let b = model.bits_per_center;
        let n_total = model.index.as_ref().map_or(n, |ix| ix.n_total);
        let average_length = model.code.average_length(counts);
        let er = compression_ratio_entropy(
            b,
            average_length,
            counts.len(),
            model.code.table_bits(),
            n,
        )?;
        Ok(CompressionReport {
            scheme: model.code.scheme(),
            k_effective: model.codebook.k_effective(),
            n,
            n_total,
            bits_per_param: b,
            entropy: entropy_of_counts(counts),
            average_length,
            sum_code_lengths: model.code.table_bits(),
            ratio_exact: compression_ratio_exact(n, b, counts, &model.code)?,
            ratio_entropy: er.with_overhead,
            ratio_entropy_approx: er.approximate,
            ratio_measured: n_total as f64 * b as f64 / serialized_bits as f64,
            breakdown: model.breakdown,
            accuracy_unquantized: None,
            accuracy_pre_ft: None,
            accuracy_post_ft: None,
        })
    }

    pub fn from_encoded(em: &EncodedModel) -> Result<Self> {
        Self::from_decoded(&decode_assignments(em)?, em.total_bits())
    }
}
