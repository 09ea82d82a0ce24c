use serde::{Deserialize, Serialize};

use super::{check_lengths, Assignment, ClusterResult, Codebook};
use crate::store::{CurvatureDiag, ParamSet};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterRule {
    Mean,
    HessianWeightedMean,
}

/// Uniform quantization: `k` equal-width bins over `[min, max]`, bin index
/// `min(⌊(w − min)/width⌋, k − 1)`, centres by `rule` over each bin's
/// members. Empty bins are dropped, so the codebook may hold fewer than `k`
/// clusters. The trace holds the single resulting weighted distortion (or
/// MSQE for [`CenterRule::Mean`] without curvature).
pub fn uniform_quantize(
    ps: &ParamSet,
    cv: Option<&CurvatureDiag>,
    k: usize,
    rule: CenterRule,
) -> Result<ClusterResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if let Some(cv) = cv {
        check_lengths(ps, cv)?;
    }
    if rule == CenterRule::HessianWeightedMean && cv.is_none() {
        return Err(Error::InvalidArgument(
            "hessian-weighted centres need curvature".into(),
        ));
    }
    let values = ps.values();
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let width = (max - min) / k as f64;

    let bins: Vec<usize> = values
        .iter()
        .map(|&w| {
            if width > 0.0 {
                (((w - min) / width).floor() as usize).min(k - 1)
            } else {
                0
            }
        })
        .collect();

    let weight = |i: usize| match (rule, cv) {
        (CenterRule::HessianWeightedMean, Some(cv)) => cv.values()[i],
        _ => 1.0,
    };
    let mut num = vec![0.0; k];
    let mut den = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (i, &b) in bins.iter().enumerate() {
        num[b] += weight(i) * values[i];
        den[b] += weight(i);
        counts[b] += 1;
    }
    let centers: Vec<f64> = (0..k)
        .map(|b| if counts[b] > 0 { num[b] / den[b] } else { 0.0 })
        .collect();

    let full = Codebook::new(centers, counts)?;
    let (assignment, codebook) = full.compact(&Assignment::new(bins, k)?)?;
    let objective = values
        .iter()
        .zip(assignment.indices())
        .enumerate()
        .map(|(i, (w, &j))| {
            let h = cv.map_or(1.0, |cv| cv.values()[i]);
            h * (w - codebook.centers()[j]).powi(2)
        })
        .sum();
    Ok(ClusterResult {
        assignment,
        codebook,
        trace: vec![objective],
        iterations: 1,
        converged: true,
    })
}
